mod common;

use common::{fd_log_det, integrate_2d, random_krnet};
use proptest::prelude::*;
use vaekrnet::krnet::{KRnetConfig, KRnetModel};
use vaekrnet::numerics::{gauss_sample, grad_check, seeded_rng, std_normal_logpdf_rows, Graph, Parameterized, Tensor};

fn full_config(n: usize, step: usize, blocks: usize, depth: usize, hidden: usize) -> KRnetConfig {
    KRnetConfig::stepped(n, step, blocks, depth, hidden).unwrap().with_rotation(true).with_nonlinear(true)
}

#[test]
fn ten_dimensional_five_block_round_trip() {
    let m = random_krnet(KRnetConfig::stepped(10, 2, 5, 6, 24).unwrap(), 1, 0.1);
    let y = gauss_sample(&mut seeded_rng(2), 1000, 10);
    let g = Graph::no_grad();
    let (z, ld) = m.forward(&g, &g.constant(y.clone())).unwrap();
    let (back, ld_inv) = m.inverse(&g, &z).unwrap();
    assert!(back.value().max_abs_diff(&y) < 1e-8);
    for (a, b) in ld.data().iter().zip(ld_inv.data()) {
        assert!((a + b).abs() < 1e-8);
    }
}

#[test]
fn composed_round_trip_with_all_layers() {
    for (n, step, blocks) in [(6, 2, 3), (5, 1, 5), (3, 1, 1), (1, 1, 1)] {
        let m = random_krnet(full_config(n, step, blocks, 3, 12), 7, 0.2);
        let y = gauss_sample(&mut seeded_rng(3), 1000, n);
        let g = Graph::no_grad();
        let (z, _) = m.forward(&g, &g.constant(y.clone())).unwrap();
        let (back, _) = m.inverse(&g, &z).unwrap();
        assert!(back.value().max_abs_diff(&y) < 1e-8, "n={n}");
    }
}

#[test]
fn composed_log_det_matches_jacobian() {
    for (n, step, blocks) in [(6, 2, 3), (4, 1, 4), (2, 1, 2)] {
        let m = random_krnet(full_config(n, step, blocks, 2, 10), 11, 0.2);
        let mut rng = seeded_rng(5);
        for _ in 0..5 {
            let y = gauss_sample(&mut rng, 1, n).into_data();
            let (_, ld) = m.forward_vec(&y).unwrap();
            let fd = fd_log_det(|v| m.forward_vec(v).unwrap().0, &y, 1e-6);
            assert!((ld - fd).abs() < 1e-4, "n={n}: {ld} vs {fd}");
        }
    }
}

#[test]
fn frozen_coordinates_are_copied() {
    let m = random_krnet(KRnetConfig::stepped(6, 2, 3, 2, 8).unwrap(), 3, 0.3);
    let mut rng = seeded_rng(9);
    let widths = m.stage_widths();
    for (stage, &active) in widths.iter().enumerate() {
        let base = gauss_sample(&mut rng, 1, 6);
        let g = Graph::no_grad();
        let (z0, _) = m.forward_from_stage(&g, &g.constant(base.clone()), stage).unwrap();
        for col in active..6 {
            let mut bumped = base.clone();
            bumped.data_mut()[col] += 0.37;
            let (z1, _) = m.forward_from_stage(&g, &g.constant(bumped), stage).unwrap();
            for j in 0..6 {
                let d = z1.data()[j] - z0.data()[j];
                if j == col {
                    assert!((d - 0.37).abs() < 1e-12);
                } else {
                    assert_eq!(d, 0.0, "stage {stage}: bumping {col} moved output {j}");
                }
            }
        }
    }
}

#[test]
fn later_blocks_never_change_earlier_outputs() {
    // Outputs frozen at stage k depend on the input only through stage k.
    let m = random_krnet(KRnetConfig::stepped(6, 2, 3, 2, 8).unwrap(), 4, 0.3);
    let y = gauss_sample(&mut seeded_rng(1), 1, 6);
    let g = Graph::no_grad();
    let (z, _) = m.forward(&g, &g.constant(y.clone())).unwrap();
    // re-running the tail stages on the output leaves frozen blocks in place
    let (z2, _) = m.forward_from_stage(&g, &z, 1).unwrap();
    assert_eq!(&z.data()[4..], &z2.data()[4..]);
    let (z3, _) = m.forward_from_stage(&g, &z, 2).unwrap();
    assert_eq!(&z.data()[2..], &z3.data()[2..]);
}

#[test]
fn identity_log_pdf_is_standard_normal() {
    let mut m = KRnetModel::new(KRnetConfig::stepped(3, 1, 3, 2, 8).unwrap(), &mut seeded_rng(0)).unwrap();
    m.mark_identity_initialized();
    let y = gauss_sample(&mut seeded_rng(4), 10, 3);
    let lp = m.log_pdf_batch(&y).unwrap();
    for (a, b) in lp.iter().zip(std_normal_logpdf_rows(&y)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_2d_density_integrates_to_one() {
    let m = random_krnet(full_config(2, 1, 2, 3, 10), 21, 0.08);
    let total = integrate_2d(|pts| m.log_pdf_batch(pts).unwrap(), 8.0, 400);
    assert!((total - 1.0).abs() < 0.01, "{total}");
}

#[test]
fn identity_samples_are_standard_normal() {
    let mut m = KRnetModel::new(KRnetConfig::stepped(2, 1, 2, 2, 8).unwrap(), &mut seeded_rng(0)).unwrap();
    m.mark_identity_initialized();
    let s = m.sample(100_000, &mut seeded_rng(8)).unwrap();
    for j in 0..2 {
        let col: Vec<f64> = (0..s.rows()).map(|i| s.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
    }
}

#[test]
fn samples_map_back_to_their_noise() {
    let m = random_krnet(full_config(4, 1, 3, 2, 8), 2, 0.2);
    let z = gauss_sample(&mut seeded_rng(6), 50, 4);
    let s = m.sample(50, &mut seeded_rng(6)).unwrap();
    let g = Graph::no_grad();
    let (back, _) = m.forward(&g, &g.constant(s)).unwrap();
    assert!(back.value().max_abs_diff(&z) < 1e-8);
    let again = m.sample(50, &mut seeded_rng(6)).unwrap();
    assert_eq!(again, m.sample(50, &mut seeded_rng(6)).unwrap());
}

#[test]
fn likelihood_gradient_matches_differences() {
    let mut m = random_krnet(full_config(4, 1, 3, 2, 8), 13, 0.2);
    assert!(m.num_params() <= 2000, "{}", m.num_params());
    let batch = gauss_sample(&mut seeded_rng(14), 16, 4);
    let err = grad_check(&mut m, |m, g| Ok(m.log_pdf(g, &g.constant(batch.clone()))?.mean())).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn log_pdf_is_differentiable_in_the_input() {
    let m = random_krnet(KRnetConfig::stepped(3, 1, 3, 2, 8).unwrap(), 5, 0.2);
    let y = Tensor::matrix(1, 3, vec![0.2, -0.4, 1.1]).unwrap();
    let g = Graph::new();
    let v = g.variable(y.clone());
    let lp = m.log_pdf(&g, &v).unwrap().sum();
    let grads = g.backward(&lp).unwrap();
    let ad = v.grad(&grads).unwrap().clone();
    for j in 0..3 {
        let mut p = y.clone();
        p.data_mut()[j] += 1e-5;
        let mut q = y.clone();
        q.data_mut()[j] -= 1e-5;
        let fd = (m.log_pdf_batch(&p).unwrap()[0] - m.log_pdf_batch(&q).unwrap()[0]) / 2e-5;
        assert!((fd - ad.data()[j]).abs() < 1e-6 * (1.0 + fd.abs()));
    }
}

#[test]
fn data_initialization_standardizes() {
    let mut rng = seeded_rng(0);
    let mut m = KRnetModel::new(KRnetConfig::stepped(3, 1, 2, 1, 4).unwrap(), &mut rng).unwrap();
    let data = Tensor::new(&[400, 3], gauss_sample(&mut rng, 400, 3).data().iter().map(|x| 3.0 * x + 5.0).collect()).unwrap();
    m.initialize_from_data(&data).unwrap();
    assert!(m.is_initialized());
    let g = Graph::no_grad();
    let (z, _) = m.forward(&g, &g.constant(data)).unwrap();
    let mean: f64 = z.value().slice_cols(0, 1).mean();
    assert!(mean.abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_configs_round_trip(n in 1usize..7, step in 1usize..3, blocks in 1usize..4, depth in 1usize..3, seed in 0u64..1000) {
        let cfg = full_config(n, step, blocks, depth, 6);
        let m = random_krnet(cfg, seed, 0.2);
        let y = gauss_sample(&mut seeded_rng(seed + 1), 32, n);
        let g = Graph::no_grad();
        let (z, _) = m.forward(&g, &g.constant(y.clone())).unwrap();
        let (back, _) = m.inverse(&g, &z).unwrap();
        prop_assert!(back.value().max_abs_diff(&y) < 1e-8);
    }
}
