//! Gated recurrent unit cell and bidirectional sequence runner.
//!
//! Convention fixed here so tests are unambiguous:
//! `h' = (1 - z) * h_prev + z * h_cand` with update gate
//! `z = sigmoid(W_z x + U_z h + b_z)`, reset gate
//! `r = sigmoid(W_r x + U_r h + b_r)` and candidate
//! `h_cand = tanh(W_c x + U_c (r * h) + b_c)`.
//!
//! Weights are stored `hidden_dim x input_dim` / `hidden_dim x hidden_dim`
//! and applied to row vectors via `x @ W^T`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::{uniform_fan_in, zeros_bias};
use crate::tensor::{Scalar, Tensor};

/// The six weight matrices and three bias vectors of one GRU cell, generic
/// over the slot type (`Tensor<T>` for owned parameters, [`Var`] once bound
/// into a graph).
#[derive(Debug, Clone)]
pub struct GruCellParams<S> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: S,
    pub u_update: S,
    pub b_update: S,
    pub w_reset: S,
    pub u_reset: S,
    pub b_reset: S,
    pub w_cand: S,
    pub u_cand: S,
    pub b_cand: S,
}

impl<S> GruCellParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> GruCellParams<U> {
        GruCellParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_update: f(&self.w_update),
            u_update: f(&self.u_update),
            b_update: f(&self.b_update),
            w_reset: f(&self.w_reset),
            u_reset: f(&self.u_reset),
            b_reset: f(&self.b_reset),
            w_cand: f(&self.w_cand),
            u_cand: f(&self.u_cand),
            b_cand: f(&self.b_cand),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        f(format!("{prefix}.w_update"), &self.w_update);
        f(format!("{prefix}.u_update"), &self.u_update);
        f(format!("{prefix}.b_update"), &self.b_update);
        f(format!("{prefix}.w_reset"), &self.w_reset);
        f(format!("{prefix}.u_reset"), &self.u_reset);
        f(format!("{prefix}.b_reset"), &self.b_reset);
        f(format!("{prefix}.w_cand"), &self.w_cand);
        f(format!("{prefix}.u_cand"), &self.u_cand);
        f(format!("{prefix}.b_cand"), &self.b_cand);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        f(format!("{prefix}.w_update"), &mut self.w_update);
        f(format!("{prefix}.u_update"), &mut self.u_update);
        f(format!("{prefix}.b_update"), &mut self.b_update);
        f(format!("{prefix}.w_reset"), &mut self.w_reset);
        f(format!("{prefix}.u_reset"), &mut self.u_reset);
        f(format!("{prefix}.b_reset"), &mut self.b_reset);
        f(format!("{prefix}.w_cand"), &mut self.w_cand);
        f(format!("{prefix}.u_cand"), &mut self.u_cand);
        f(format!("{prefix}.b_cand"), &mut self.b_cand);
    }
}

impl<T: Scalar> GruCellParams<Tensor<T>> {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        GruCellParams {
            input_dim,
            hidden_dim,
            w_update: uniform_fan_in(hidden_dim, input_dim, rng),
            u_update: uniform_fan_in(hidden_dim, hidden_dim, rng),
            b_update: zeros_bias(hidden_dim),
            w_reset: uniform_fan_in(hidden_dim, input_dim, rng),
            u_reset: uniform_fan_in(hidden_dim, hidden_dim, rng),
            b_reset: zeros_bias(hidden_dim),
            w_cand: uniform_fan_in(hidden_dim, input_dim, rng),
            u_cand: uniform_fan_in(hidden_dim, hidden_dim, rng),
            b_cand: zeros_bias(hidden_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let checks: [(&str, &Tensor<T>, [usize; 2]); 9] = [
            ("w_update", &self.w_update, [h, i]),
            ("u_update", &self.u_update, [h, h]),
            ("b_update", &self.b_update, [1, h]),
            ("w_reset", &self.w_reset, [h, i]),
            ("u_reset", &self.u_reset, [h, h]),
            ("b_reset", &self.b_reset, [1, h]),
            ("w_cand", &self.w_cand, [h, i]),
            ("u_cand", &self.u_cand, [h, h]),
            ("b_cand", &self.b_cand, [1, h]),
        ];
        for (name, t, expected) in checks {
            if t.shape() != expected {
                return Err(Error::Shape {
                    context: format!("GruCellParams.{name}"),
                    expected: expected.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> GruCellParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// One GRU step on row vectors: `x` is `1 x input_dim` (or `B x input_dim`
/// for a batch of independent streams), `h_prev` is `1 x hidden_dim`
/// (respectively `B x hidden_dim`).
pub fn gru_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h_prev: Var,
    p: &GruCellParams<Var>,
) -> Var {
    let zx = g.matmul_nt(x, p.w_update);
    let zh = g.matmul_nt(h_prev, p.u_update);
    let zs = g.add(zx, zh);
    let zs = g.add_row(zs, p.b_update);
    let z = g.sigmoid(zs);

    let rx = g.matmul_nt(x, p.w_reset);
    let rh = g.matmul_nt(h_prev, p.u_reset);
    let rs = g.add(rx, rh);
    let rs = g.add_row(rs, p.b_reset);
    let r = g.sigmoid(rs);

    let gated = g.mul(r, h_prev);
    let cx = g.matmul_nt(x, p.w_cand);
    let ch = g.matmul_nt(gated, p.u_cand);
    let cs = g.add(cx, ch);
    let cs = g.add_row(cs, p.b_cand);
    let cand = g.tanh(cs);

    // h' = h_prev - z*h_prev + z*cand
    let zh_prev = g.mul(z, h_prev);
    let keep = g.sub(h_prev, zh_prev);
    let zc = g.mul(z, cand);
    g.add(keep, zc)
}

/// Validated single-step evaluation on plain tensors.
pub fn gru_cell_eval<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    p: &GruCellParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    p.validate()?;
    if x.cols() != p.input_dim || x.rows() != h_prev.rows() || h_prev.cols() != p.hidden_dim {
        return Err(Error::Shape {
            context: "gru_cell".into(),
            expected: vec![1, p.input_dim],
            got: x.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let hv = g.input(h_prev.clone());
    let pv = p.map(|t| g.input(t.clone()));
    let out = gru_cell(&mut g, xv, hv, &pv);
    Ok(g.value(out).clone())
}

/// Outputs of a bidirectional GRU pass over one sequence.
pub struct BiGruOut {
    /// Per-step concatenated states, `L x 2*hidden_dim`.
    pub states: Var,
    /// Forward state after the last step, `1 x hidden_dim`.
    pub final_fwd: Var,
    /// Backward state after consuming the sequence in reverse, `1 x hidden_dim`.
    pub final_bwd: Var,
}

/// Run forward and backward GRU passes over `seq` (`L x input_dim`).
pub fn bigru_sequence<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    fwd: &GruCellParams<Var>,
    bwd: &GruCellParams<Var>,
) -> BiGruOut {
    let len = g.value(seq).rows();
    assert!(len >= 1, "bigru_sequence: empty sequence");
    let hidden = fwd.hidden_dim;

    let steps: Vec<Var> = (0..len).map(|t| g.slice_rows(seq, t, 1)).collect();

    let mut h = g.input(Tensor::zeros(1, hidden));
    let mut fwd_states = Vec::with_capacity(len);
    for &x in &steps {
        h = gru_cell(g, x, h, fwd);
        fwd_states.push(h);
    }
    let final_fwd = *fwd_states.last().expect("len >= 1");

    let mut h = g.input(Tensor::zeros(1, bwd.hidden_dim));
    let mut bwd_states = vec![final_fwd; len]; // placeholder, overwritten below
    for t in (0..len).rev() {
        h = gru_cell(g, steps[t], h, bwd);
        bwd_states[t] = h;
    }
    let final_bwd = bwd_states[0];

    let per_step: Vec<Var> = (0..len)
        .map(|t| g.concat_cols(&[fwd_states[t], bwd_states[t]]))
        .collect();
    let states = g.concat_rows(&per_step);

    BiGruOut {
        states,
        final_fwd,
        final_bwd,
    }
}
