//! Every flow layer on its own: round trip error and log-determinant checked
//! against a central-difference Jacobian.
//!
//! cargo run --release --example flow_layers

use nalgebra::DMatrix;
use vaekrnet::flow_layers::{AffineCoupling, FlowLayer, NonlinearInvertible, RotationLU, ScaleBias, SqueezeMask};
use vaekrnet::numerics::{gauss_sample, seeded_rng, Graph, Parameterized};
use vaekrnet::Result;

fn fd_log_det(layer: &FlowLayer, y: &[f64]) -> Result<f64> {
    let k = y.len();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(k, k);
    for j in 0..k {
        let (mut up, mut down) = (y.to_vec(), y.to_vec());
        up[j] += h;
        down[j] -= h;
        let (zu, _) = layer.apply(&up)?;
        let (zd, _) = layer.apply(&down)?;
        for i in 0..k {
            jac[(i, j)] = (zu[i] - zd[i]) / (2.0 * h);
        }
    }
    Ok(jac.determinant().abs().ln())
}

fn main() -> Result<()> {
    let k = 4;
    let mut rng = seeded_rng(0);

    // Freshly built layers are close to the identity; perturb the parameters
    // so the checks are not trivial.
    let mut layers = vec![
        FlowLayer::Squeeze(SqueezeMask::new(k, 2)?),
        FlowLayer::Rotation(RotationLU::identity(k)),
        FlowLayer::ScaleBias(ScaleBias::from_params(vec![1.5, 0.7, 1.0, 2.0], vec![0.1, -0.3, 0.0, 0.5])?),
        FlowLayer::Coupling(AffineCoupling::new(k, 0, 16, &mut rng)?),
        FlowLayer::Coupling(AffineCoupling::new(k, 1, 16, &mut rng)?),
        FlowLayer::Nonlinear(NonlinearInvertible::with_bins(k, 3.0, 16)),
    ];
    for layer in &mut layers {
        for p in layer.params_mut() {
            let noise = gauss_sample(&mut rng, 1, p.value.len());
            for (v, e) in p.value.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.3 * e;
            }
        }
    }

    let y = gauss_sample(&mut rng, 1000, k);
    let g = Graph::no_grad();
    println!("{:<12} {:>8} {:>14} {:>14}", "layer", "params", "round trip", "|ld - fd ld|");
    for layer in &layers {
        let (z, _) = layer.forward(&g, &g.constant(y.clone()))?;
        let (back, _) = layer.inverse(&g, &z)?;
        let round_trip = back.value().max_abs_diff(&y);
        let point = y.row(0);
        let (_, ld) = layer.apply(point)?;
        let gap = (ld - fd_log_det(layer, point)?).abs();
        println!("{:<12} {:>8} {:>14.2e} {:>14.2e}", layer.kind(), layer.num_params(), round_trip, gap);
    }
    Ok(())
}
