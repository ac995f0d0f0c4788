//! Shared building blocks: linear layers, position-wise feed-forward,
//! 1-D convolution over time, and the forward-pass context that controls
//! dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::init::{sub_rng, uniform_fan_in, zeros_bias};
use crate::tensor::{Scalar, Tensor};

/// Dense layer; weight stored `out_dim x in_dim`, applied as `x @ W^T + b`.
#[derive(Debug, Clone)]
pub struct LinearParams<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: S,
    pub bias: S,
}

impl<S> LinearParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> LinearParams<U> {
        LinearParams {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> LinearParams<Tensor<T>> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            in_dim,
            out_dim,
            weight: uniform_fan_in(out_dim, in_dim, rng),
            bias: zeros_bias(out_dim),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LinearParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LinearParams<Var>) -> Var {
    let y = g.matmul_nt(x, p.weight);
    g.add_row(y, p.bias)
}

/// Position-wise feed-forward: `lin2(relu(lin1(x)))`.
#[derive(Debug, Clone)]
pub struct FeedForwardParams<S> {
    pub lin1: LinearParams<S>,
    pub lin2: LinearParams<S>,
}

impl<S> FeedForwardParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> FeedForwardParams<U> {
        FeedForwardParams {
            lin1: self.lin1.map(&mut f),
            lin2: self.lin2.map(&mut f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        self.lin1.for_each(&format!("{prefix}.lin1"), f);
        self.lin2.for_each(&format!("{prefix}.lin2"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        self.lin1.for_each_mut(&format!("{prefix}.lin1"), f);
        self.lin2.for_each_mut(&format!("{prefix}.lin2"), f);
    }
}

impl<T: Scalar> FeedForwardParams<Tensor<T>> {
    pub fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForwardParams {
            lin1: LinearParams::init(in_dim, hidden_dim, rng),
            lin2: LinearParams::init(hidden_dim, out_dim, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> FeedForwardParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &FeedForwardParams<Var>) -> Var {
    let h = linear(g, x, &p.lin1);
    let h = g.relu(h);
    linear(g, h, &p.lin2)
}

/// 1-D convolution over the time axis with zero padding, expressed as a
/// linear map over concatenated shifted copies of the input. Weight is
/// `out_dim x (kernel * in_dim)`; `kernel` must be odd.
#[derive(Debug, Clone)]
pub struct Conv1dParams<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
    pub weight: S,
    pub bias: S,
}

impl<S> Conv1dParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> Conv1dParams<U> {
        Conv1dParams {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            kernel: self.kernel,
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> Conv1dParams<Tensor<T>> {
    pub fn init(in_dim: usize, out_dim: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel % 2 == 1, "conv1d kernel must be odd");
        Conv1dParams {
            in_dim,
            out_dim,
            kernel,
            weight: uniform_fan_in(out_dim, kernel * in_dim, rng),
            bias: zeros_bias(out_dim),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Conv1dParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

pub fn conv1d<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Conv1dParams<Var>) -> Var {
    let half = (p.kernel / 2) as isize;
    let shifts: Vec<Var> = (-half..=half)
        .map(|j| if j == 0 { x } else { g.shift_rows(x, -j) })
        .collect();
    let windows = if shifts.len() == 1 {
        shifts[0]
    } else {
        g.concat_cols(&shifts)
    };
    let y = g.matmul_nt(windows, p.weight);
    g.add_row(y, p.bias)
}

/// Per-forward-pass state: dropout is active only while training and is
/// disabled for gradient checking and extraction.
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    /// Evaluation mode: no dropout, inert RNG.
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            rng: sub_rng(0, "eval"),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardCtx {
            train: true,
            dropout,
            rng: sub_rng(seed, "dropout"),
        }
    }

    /// Inverted dropout: keep with probability `1 - p`, scale kept values
    /// by `1/(1-p)`. Identity in evaluation mode.
    pub fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        if !self.train || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let scale = T::from_f64(1.0 / keep);
        let [rows, cols] = g.value(x).shape();
        let mask: Vec<T> = (0..rows * cols)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::ZERO
                }
            })
            .collect();
        let m = g.input(Tensor::from_raw(rows, cols, mask));
        g.mul(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_kernel_one_is_a_per_row_linear_map() {
        let mut rng = sub_rng(1, "conv-test");
        let p: Conv1dParams<Tensor<f64>> = Conv1dParams::init(3, 2, 1, &mut rng);
        let row = vec![0.2, -0.4, 0.9];
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let xv = g.input(x);
        let pv = p.map(|t| g.input(t.clone()));
        let yv = conv1d(&mut g, xv, &pv);
        let y = g.value(yv).clone();
        // identical input rows -> identical output rows
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn conv1d_zero_pads_edges() {
        let mut rng = sub_rng(2, "conv-test");
        let p: Conv1dParams<Tensor<f64>> = Conv1dParams::init(1, 1, 3, &mut rng);
        let x = Tensor::new(1, 1, vec![1.0]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let xv = g.input(x);
        let pv = p.map(|t| g.input(t.clone()));
        let y = conv1d(&mut g, xv, &pv);
        // T=1 with kernel 3: only the center tap sees the value.
        let expected = p.weight.get(0, 1) * 1.0 + p.bias.get(0, 0);
        assert!((g.value(y).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn dropout_disabled_in_eval_mode() {
        let mut ctx = ForwardCtx::eval();
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = ctx.dropout(&mut g, x);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dropout_preserves_expectation_roughly() {
        let mut ctx = ForwardCtx::train(0.5, 42);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::full(1, 10_000, 1.0));
        let y = ctx.dropout(&mut g, x);
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }
}
