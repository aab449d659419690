use rand::Rng;

use super::autodiff::{Graph, Var};
use super::param::{Param, Parameterized};
use super::rng::gauss_sample;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully connected tanh network.
///
/// Each hidden layer is affine, then tanh, then a trainable elementwise
/// scale and shift. The output layer is affine only. Weights are stored
/// `[in, out]` so a batch `[M, in]` maps to `X W + b`.
#[derive(Debug, Clone)]
pub struct MlpNet {
    widths: Vec<usize>,
    weights: Vec<Param>,
    biases: Vec<Param>,
    scales: Vec<Param>,
    shifts: Vec<Param>,
}

impl MlpNet {
    /// `widths = [in, hidden.., out]`. Weights are drawn from N(0, 1/fan_in).
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid network widths {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut scales = Vec::new();
        let mut shifts = Vec::new();
        for (l, w) in widths.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let std = 1.0 / (fi as f64).sqrt();
            let mut wt = gauss_sample(rng, fi, fo);
            wt.data_mut().iter_mut().for_each(|x| *x *= std);
            weights.push(Param::new(wt));
            biases.push(Param::new(Tensor::zeros(&[fo])));
            if l + 2 < widths.len() {
                scales.push(Param::new(Tensor::ones(&[fo])));
                shifts.push(Param::new(Tensor::zeros(&[fo])));
            }
        }
        Ok(Self { widths: widths.to_vec(), weights, biases, scales, shifts })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Zeroes the output layer so the network starts as the zero map.
    pub fn zero_output_head(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        self.biases[last].value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn output_weights_mut(&mut self) -> (&mut Param, &mut Param) {
        let last = self.weights.len() - 1;
        let (w, b) = (&mut self.weights[last], &mut self.biases[last]);
        (w, b)
    }

    /// Maps `[M, in]` to `[M, out]`, or a vector `[in]` to `[out]`.
    pub fn forward(&self, g: &Graph, x: &Var) -> Result<Var> {
        let vector_in = x.shape().len() == 1;
        if x.cols() != self.input_dim() || x.shape().len() > 2 {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got shape {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        let mut h = if vector_in { x.reshape(&[1, self.input_dim()]) } else { x.clone() };
        let nl = self.weights.len();
        for l in 0..nl {
            h = h.matmul(&g.param(&self.weights[l])).add(&g.param(&self.biases[l]));
            if l + 1 < nl {
                h = h.tanh().mul(&g.param(&self.scales[l])).add(&g.param(&self.shifts[l]));
            }
        }
        Ok(if vector_in { h.reshape(&[self.output_dim()]) } else { h })
    }
}

impl Parameterized for MlpNet {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.push(&self.weights[l]);
            out.push(&self.biases[l]);
            if l < self.scales.len() {
                out.push(&self.scales[l]);
                out.push(&self.shifts[l]);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        let hidden = self.scales.len();
        let mut scales = self.scales.iter_mut();
        let mut shifts = self.shifts.iter_mut();
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push(w);
            out.push(b);
            if l < hidden {
                out.push(scales.next().unwrap());
                out.push(shifts.next().unwrap());
            }
        }
        out
    }
}
