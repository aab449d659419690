//! Kernels for the piecewise-quadratic CDF map on `[-a, a]`.
//!
//! The density on the unit interval is piecewise linear through `B + 1`
//! equally spaced node values `v`; its CDF is piecewise quadratic. Points
//! outside `[-a, a]` pass through unchanged.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Kind {
    Forward,
    LogPdf,
    Inverse,
}

struct Bins<'a> {
    v: &'a [f64],
    h: f64,
    cdf: Vec<f64>,
    a: f64,
}

impl<'a> Bins<'a> {
    fn new(v: &'a [f64], a: f64) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Shape("piecewise-quadratic map needs at least one bin".into()));
        }
        if v.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::Numerical("bin node values must be positive and finite".into()));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Config(format!("cutoff must be positive, got {a}")));
        }
        let b = v.len() - 1;
        let h = 1.0 / b as f64;
        let mut cdf = Vec::with_capacity(b + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for j in 0..b {
            acc += 0.5 * h * (v[j] + v[j + 1]);
            cdf.push(acc);
        }
        Ok(Self { v, h, cdf, a })
    }

    fn nbins(&self) -> usize {
        self.v.len() - 1
    }

    fn inside(&self, y: f64) -> bool {
        y.abs() <= self.a
    }

    /// Bin index and offset inside the bin for `y` in `[-a, a]`.
    fn locate(&self, y: f64) -> (usize, f64) {
        let x = ((y + self.a) / (2.0 * self.a)).clamp(0.0, 1.0);
        let j = ((x / self.h).floor() as usize).min(self.nbins() - 1);
        (j, x - j as f64 * self.h)
    }

    fn density(&self, j: usize, t: f64) -> f64 {
        self.v[j] + (self.v[j + 1] - self.v[j]) * t / self.h
    }

    fn cdf_at(&self, j: usize, t: f64) -> f64 {
        self.cdf[j] + self.v[j] * t + (self.v[j + 1] - self.v[j]) * t * t / (2.0 * self.h)
    }

    fn forward(&self, y: f64) -> f64 {
        if !self.inside(y) {
            return y;
        }
        let (j, t) = self.locate(y);
        2.0 * self.a * self.cdf_at(j, t) - self.a
    }

    fn log_pdf(&self, y: f64) -> f64 {
        if !self.inside(y) {
            return 0.0;
        }
        let (j, t) = self.locate(y);
        self.density(j, t).ln()
    }

    fn inverse(&self, z: f64) -> Result<f64> {
        if !self.inside(z) {
            return Ok(z);
        }
        let r = ((z + self.a) / (2.0 * self.a)).clamp(0.0, 1.0);
        let b = self.nbins();
        let j = self.cdf[..b].partition_point(|&c| c <= r).saturating_sub(1).min(b - 1);
        let dr = r - self.cdf[j];
        let dv = self.v[j + 1] - self.v[j];
        let disc = (self.v[j] * self.v[j] + 2.0 * dv * dr / self.h).max(0.0);
        let denom = self.v[j] + disc.sqrt();
        let mut t = if denom > 0.0 { 2.0 * dr / denom } else { 0.0 };
        let tol = 1e-8 * self.h;
        if !(t > -tol && t < self.h + tol) {
            return Err(Error::Numerical(format!("inverse root {t} escapes bin {j} for z = {z}")));
        }
        t = t.clamp(0.0, self.h);
        Ok(2.0 * self.a * (j as f64 * self.h + t) - self.a)
    }

    /// Adds `w * dF/dv` at `(j, t)` into the cumulative buffers.
    ///
    /// `range` is a difference array over node indices for the interior
    /// `h` terms, finished by [`finish_range`].
    fn accumulate_dfdv(&self, j: usize, t: f64, w: f64, gv: &mut [f64], range: &mut [f64]) {
        let h = self.h;
        if j >= 1 {
            gv[0] += w * h / 2.0;
            gv[j] += w * h / 2.0;
            range[1] += w * h;
            range[j] -= w * h;
        }
        let q = t * t / (2.0 * h);
        gv[j] += w * (t - q);
        gv[j + 1] += w * q;
    }
}

fn finish_range(gv: &mut [f64], range: &[f64]) {
    let mut run = 0.0;
    for (g, r) in gv.iter_mut().zip(range) {
        run += r;
        *g += run;
    }
}

pub(crate) fn forward(kind: Kind, x: &Tensor, v: &Tensor, a: f64) -> Result<Tensor> {
    let bins = Bins::new(v.data(), a)?;
    let data: Result<Vec<f64>> = match kind {
        Kind::Forward => Ok(x.data().iter().map(|&y| bins.forward(y)).collect()),
        Kind::LogPdf => Ok(x.data().iter().map(|&y| bins.log_pdf(y)).collect()),
        Kind::Inverse => x.data().iter().map(|&z| bins.inverse(z)).collect(),
    };
    Ok(Tensor::from_parts(x.shape().to_vec(), data?))
}

/// Vector-Jacobian products for the input and the node values.
pub(crate) fn backward(
    kind: Kind,
    x: &Tensor,
    v: &Tensor,
    a: f64,
    g: &[f64],
    want_x: bool,
    want_v: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let bins = Bins::new(v.data(), a).expect("node values were validated on the forward pass");
    let n = v.len();
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gv = vec![0.0; n];
    let mut range = vec![0.0; n];
    for (i, (&xi, &gi)) in x.data().iter().zip(g).enumerate() {
        // For the inverse, differentiate at the preimage y = f^-1(z).
        let y = match kind {
            Kind::Inverse => bins.inverse(xi).expect("validated on the forward pass"),
            _ => xi,
        };
        if !bins.inside(y) {
            if let Some(gx) = gx.as_mut() {
                gx[i] += match kind {
                    Kind::LogPdf => 0.0,
                    _ => gi,
                };
            }
            continue;
        }
        let (j, t) = bins.locate(y);
        let p = bins.density(j, t);
        match kind {
            Kind::Forward => {
                if let Some(gx) = gx.as_mut() {
                    gx[i] += gi * p;
                }
                if want_v {
                    bins.accumulate_dfdv(j, t, gi * 2.0 * a, &mut gv, &mut range);
                }
            }
            Kind::LogPdf => {
                let slope = (bins.v[j + 1] - bins.v[j]) / bins.h;
                if let Some(gx) = gx.as_mut() {
                    gx[i] += gi * slope / (p * 2.0 * a);
                }
                if want_v {
                    gv[j] += gi * (1.0 - t / bins.h) / p;
                    gv[j + 1] += gi * (t / bins.h) / p;
                }
            }
            Kind::Inverse => {
                if let Some(gx) = gx.as_mut() {
                    gx[i] += gi / p;
                }
                if want_v {
                    bins.accumulate_dfdv(j, t, -gi * 2.0 * a / p, &mut gv, &mut range);
                }
            }
        }
    }
    if !want_v {
        return (gx, None);
    }
    finish_range(&mut gv, &range);
    (gx, Some(gv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes() -> Tensor {
        // integrates to one with h = 1/4
        let raw = [0.5, 1.5, 1.0, 0.7, 1.2];
        let h = 0.25;
        let z: f64 = (0..4).map(|j| 0.5 * h * (raw[j] + raw[j + 1])).sum();
        Tensor::vector(raw.iter().map(|r| r / z).collect())
    }

    #[test]
    fn forward_hits_endpoints_and_inverts() {
        let v = nodes();
        let a = 3.0;
        let ys = Tensor::vector(vec![-3.0, -2.9, -1.0, 0.0, 0.4, 2.99, 3.0, 7.0, -9.0]);
        let z = forward(Kind::Forward, &ys, &v, a).unwrap();
        assert!((z.data()[0] + 3.0).abs() < 1e-12);
        assert!((z.data()[6] - 3.0).abs() < 1e-12);
        assert_eq!(z.data()[7], 7.0);
        assert_eq!(z.data()[8], -9.0);
        let back = forward(Kind::Inverse, &z, &v, a).unwrap();
        assert!(back.max_abs_diff(&ys) < 1e-12);
    }

    #[test]
    fn rejects_bad_nodes() {
        let x = Tensor::vector(vec![0.0]);
        assert!(forward(Kind::Forward, &x, &Tensor::vector(vec![1.0]), 1.0).is_err());
        assert!(forward(Kind::Forward, &x, &Tensor::vector(vec![1.0, -1.0]), 1.0).is_err());
        assert!(forward(Kind::Forward, &x, &Tensor::vector(vec![1.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn node_gradients_match_differences() {
        let v = nodes();
        let a = 2.0;
        let x = Tensor::vector(vec![-1.7, -0.3, 0.2, 1.1, 1.9]);
        for kind in [Kind::Forward, Kind::LogPdf, Kind::Inverse] {
            let g = vec![1.0; x.len()];
            let (_, gv) = backward(kind, &x, &v, a, &g, false, true);
            let gv = gv.unwrap();
            for k in 0..v.len() {
                let eps = 1e-6;
                let mut vp = v.clone();
                vp.data_mut()[k] += eps;
                let mut vm = v.clone();
                vm.data_mut()[k] -= eps;
                let fp = forward(kind, &x, &vp, a).unwrap().sum();
                let fm = forward(kind, &x, &vm, a).unwrap().sum();
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - gv[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} node {k}: {fd} vs {}", gv[k]);
            }
        }
    }
}
