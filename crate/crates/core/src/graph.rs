//! Reverse-mode automatic differentiation on rank-2 tensors.
//!
//! A [`Graph`] is a grow-only tape of nodes built per forward pass. Each op
//! records its output value plus a backward closure that maps the output
//! gradient to per-parent gradient contributions. [`Graph::backward`] walks
//! the tape in reverse, accumulating gradients for every node that sits on
//! a path from a parameter leaf to the loss.
//!
//! Tensors produced by ops are immutable; graphs are cheap to build and are
//! rebuilt from scratch for every training step, which keeps the engine
//! free of stale-state bugs at the cost of some allocation churn (fine at
//! the scales this crate targets).
//!
//! Shape preconditions inside this module are programmer contracts and are
//! enforced with assertions; the public model-level operations validate
//! their inputs and return errors before graph construction starts.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(Var, Tensor<T>)>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackFn<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` received one.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter leaf; zeros if the parameter did not
    /// influence the loss.
    pub fn for_param(&self, v: Var, rows: usize, cols: usize) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

/// Reverse-mode tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value_rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn push_leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(t),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert!(av.same_shape(&bv), "add: shape mismatch");
        let out = av.zip(&bv, |x, y| x + y);
        self.push(out, &[a, b], Box::new(move |g| vec![(a, g.clone()), (b, g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert!(av.same_shape(&bv), "sub: shape mismatch");
        let out = av.zip(&bv, |x, y| x - y);
        self.push(
            out,
            &[a, b],
            Box::new(move |g| vec![(a, g.clone()), (b, g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert!(av.same_shape(&bv), "mul: shape mismatch");
        let out = av.zip(&bv, |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                vec![(a, g.zip(&bv, |gv, y| gv * y)), (b, g.zip(&av, |gv, x| gv * x))]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| x * c);
        self.push(out, &[a], Box::new(move |g| vec![(a, g.map(|v| v * c))]))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| T::ONE / (T::ONE + (-x).exp()));
        let s = Rc::new(out.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g| vec![(a, g.zip(&s, |gv, sv| gv * sv * (T::ONE - sv)))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| x.tanh());
        let t = Rc::new(out.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g| vec![(a, g.zip(&t, |gv, tv| gv * (T::ONE - tv * tv)))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = av.map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                vec![(a, g.zip(&av, |gv, x| if x > T::ZERO { gv } else { T::ZERO }))]
            }),
        )
    }

    // ── Matrix products ─────────────────────────────────────────────────

    /// `a (m x k) @ b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.cols(), bv.rows(), "matmul: inner dims");
        let out = mm_nn(&av, &bv);
        self.push(
            out,
            &[a, b],
            Box::new(move |g| vec![(a, mm_nt(g, &bv)), (b, mm_tn(&av, g))]),
        )
    }

    /// `a (m x k) @ b^T (k x n)` where `b` is stored `n x k`.
    ///
    /// This is the natural layout for linear layers whose weights are kept
    /// as `out_features x in_features`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt: inner dims");
        let out = mm_nt(&av, &bv);
        self.push(
            out,
            &[a, b],
            Box::new(move |g| vec![(a, mm_nn(g, &bv)), (b, mm_tn(g, &av))]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = transpose_kernel(&av);
        self.push(out, &[a], Box::new(move |g| vec![(a, transpose_kernel(g))]))
    }

    /// `a (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(bv.rows(), 1, "add_row: bias must be 1 x n");
        assert_eq!(av.cols(), bv.cols(), "add_row: width mismatch");
        let (m, n) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(av.get(r, c) + bv.get(0, c));
            }
        }
        self.push(
            Tensor::from_raw(m, n, data),
            &[a, b],
            Box::new(move |g| {
                let mut db = vec![T::ZERO; n];
                for r in 0..g.rows() {
                    for c in 0..n {
                        db[c] = db[c] + g.get(r, c);
                    }
                }
                vec![(a, g.clone()), (b, Tensor::from_raw(1, n, db))]
            }),
        )
    }

    // ── Row-structured ops ──────────────────────────────────────────────

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let out = softmax_rows_kernel(&av);
        let s = Rc::new(out.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g| {
                let (m, n) = (s.rows(), s.cols());
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let dot: T = (0..n).map(|c| g.get(r, c) * s.get(r, c)).sum();
                    for c in 0..n {
                        dx.push(s.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                vec![(a, Tensor::from_raw(m, n, dx))]
            }),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    ///
    /// `gamma`/`beta` are `1 x d`. A zero-variance row normalizes to zeros
    /// (the eps guard), so the output there is just `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (xv, gv, bv) = (self.value_rc(x), self.value_rc(gamma), self.value_rc(beta));
        let d = xv.cols();
        assert_eq!(gv.shape(), [1, d], "layer_norm: gamma shape");
        assert_eq!(bv.shape(), [1, d], "layer_norm: beta shape");
        let m = xv.rows();
        let inv_d = T::ONE / T::from_f64(d as f64);

        let mut out = Vec::with_capacity(m * d);
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean: T = row.iter().copied().sum::<T>() * inv_d;
            let var: T = row
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<T>()
                * inv_d;
            let istd = T::ONE / (var + eps).sqrt();
            inv_std.push(istd);
            for c in 0..d {
                let xh = (row[c] - mean) * istd;
                xhat.push(xh);
                out.push(xh * gv.get(0, c) + bv.get(0, c));
            }
        }
        let xhat = Rc::new(Tensor::from_raw(m, d, xhat));
        self.push(
            Tensor::from_raw(m, d, out),
            &[x, gamma, beta],
            Box::new(move |g| {
                let d_t = T::from_f64(d as f64);
                let mut dx = Vec::with_capacity(m * d);
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                for r in 0..m {
                    let mut dxhat = vec![T::ZERO; d];
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for c in 0..d {
                        let gc = g.get(r, c);
                        let xh = xhat.get(r, c);
                        dgamma[c] = dgamma[c] + gc * xh;
                        dbeta[c] = dbeta[c] + gc;
                        let dxh = gc * gv.get(0, c);
                        dxhat[c] = dxh;
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                    }
                    let istd = inv_std[r];
                    for c in 0..d {
                        let xh = xhat.get(r, c);
                        dx.push(istd / d_t * (d_t * dxhat[c] - sum_dxhat - xh * sum_dxhat_xhat));
                    }
                }
                vec![
                    (x, Tensor::from_raw(m, d, dx)),
                    (gamma, Tensor::from_raw(1, d, dgamma)),
                    (beta, Tensor::from_raw(1, d, dbeta)),
                ]
            }),
        )
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(m > 0, "mean_rows: empty input");
        let inv_m = T::ONE / T::from_f64(m as f64);
        let mut out = vec![T::ZERO; n];
        for r in 0..m {
            for c in 0..n {
                out[c] = out[c] + av.get(r, c) * inv_m;
            }
        }
        self.push(
            Tensor::from_raw(1, n, out),
            &[a],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    for c in 0..n {
                        dx.push(g.get(0, c) * inv_m);
                    }
                }
                vec![(a, Tensor::from_raw(m, n, dx))]
            }),
        )
    }

    /// Sum of all entries: `m x n -> 1 x 1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        let s: T = av.data().iter().copied().sum();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |g| vec![(a, Tensor::full(m, n, g.item()))]),
        )
    }

    /// Stack matrices with equal widths on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| self.value_rc(*p)).collect();
        let n = values[0].cols();
        assert!(values.iter().all(|v| v.cols() == n), "concat_rows: widths differ");
        let m_total: usize = values.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(m_total * n);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let row_counts: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::from_raw(m_total, n, data),
            parts,
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(parts_owned.len());
                let mut offset = 0;
                for (var, &rc) in parts_owned.iter().zip(row_counts.iter()) {
                    let slice = g.data()[offset * n..(offset + rc) * n].to_vec();
                    grads.push((*var, Tensor::from_raw(rc, n, slice)));
                    offset += rc;
                }
                grads
            }),
        )
    }

    /// Concatenate matrices with equal heights side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| self.value_rc(*p)).collect();
        let m = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == m), "concat_cols: heights differ");
        let n_total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(m * n_total);
        for r in 0..m {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let col_counts: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::from_raw(m, n_total, data),
            parts,
            Box::new(move |g| {
                let mut grads: Vec<(Var, Tensor<T>)> = Vec::with_capacity(parts_owned.len());
                let mut offset = 0;
                for (var, &cc) in parts_owned.iter().zip(col_counts.iter()) {
                    let mut part = Vec::with_capacity(m * cc);
                    for r in 0..m {
                        let row = g.row(r);
                        part.extend_from_slice(&row[offset..offset + cc]);
                    }
                    grads.push((*var, Tensor::from_raw(m, cc, part)));
                    offset += cc;
                }
                grads
            }),
        )
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start + len <= m, "slice_rows: out of range");
        let data = av.data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_raw(len, n, data),
            &[a],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g.data());
                vec![(a, Tensor::from_raw(m, n, dx))]
            }),
        )
    }

    /// Shift rows down by `offset` (negative shifts up), zero-filling.
    /// `out[r] = a[r - offset]` where in range.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![T::ZERO; m * n];
        for r in 0..m as isize {
            let src = r - offset;
            if src >= 0 && src < m as isize {
                let (r, src) = (r as usize, src as usize);
                data[r * n..(r + 1) * n].copy_from_slice(av.row(src));
            }
        }
        self.push(
            Tensor::from_raw(m, n, data),
            &[a],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; m * n];
                for r in 0..m as isize {
                    let src = r - offset;
                    if src >= 0 && src < m as isize {
                        let (r, src) = (r as usize, src as usize);
                        dx[src * n..(src + 1) * n].copy_from_slice(g.row(r));
                    }
                }
                vec![(a, Tensor::from_raw(m, n, dx))]
            }),
        )
    }

    /// Stable row-wise log-sum-exp: `m x n -> m x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = av.row(r);
            let mx = row.iter().fold(row[0], |acc, v| acc.maximum(*v));
            let s: T = row.iter().map(|v| (*v - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        self.push(
            Tensor::from_raw(m, 1, out),
            &[a],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = av.row(r);
                    let mx = row.iter().fold(row[0], |acc, v| acc.maximum(*v));
                    let exps: Vec<T> = row.iter().map(|v| (*v - mx).exp()).collect();
                    let s: T = exps.iter().copied().sum();
                    for e in exps {
                        dx.push(g.get(r, 0) * e / s);
                    }
                }
                vec![(a, Tensor::from_raw(m, n, dx))]
            }),
        )
    }

    /// Normalize each row to unit Euclidean length.
    ///
    /// A tiny epsilon inside the square root keeps zero rows defined; the
    /// backward formula differentiates exactly that guarded expression.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let (m, n) = (av.rows(), av.cols());
        let eps = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = av.row(r);
            let norm = (row.iter().map(|v| *v * *v).sum::<T>() + eps).sqrt();
            norms.push(norm);
            for v in row {
                out.push(*v / norm);
            }
        }
        self.push(
            Tensor::from_raw(m, n, out),
            &[a],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = av.row(r);
                    let norm = norms[r];
                    let dot: T = (0..n).map(|c| g.get(r, c) * row[c]).sum();
                    let n3 = norm * norm * norm;
                    for c in 0..n {
                        dx.push(g.get(r, c) / norm - row[c] * dot / n3);
                    }
                }
                vec![(a, Tensor::from_raw(m, n, dx))]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, optionally class-weighted (weighted mean).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Var {
        let lv = self.value_rc(logits);
        let (b, c) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), b, "cross_entropy: batch size");
        assert!(labels.iter().all(|&y| y < c), "cross_entropy: label range");
        if let Some(w) = class_weights {
            assert_eq!(w.len(), c, "cross_entropy: weight count");
        }
        let weights: Vec<T> = labels
            .iter()
            .map(|&y| class_weights.map_or(T::ONE, |w| w[y]))
            .collect();
        let total_w: T = weights.iter().copied().sum();

        let mut loss = T::ZERO;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().fold(row[0], |acc, v| acc.maximum(*v));
            let lse: T = row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln() + mx;
            loss = loss + weights[r] * (lse - row[y]);
        }
        loss = loss / total_w;

        let labels_owned: Vec<usize> = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g| {
                let gs = g.item();
                let mut dl = Vec::with_capacity(b * c);
                for (r, &y) in labels_owned.iter().enumerate() {
                    let row = lv.row(r);
                    let mx = row.iter().fold(row[0], |acc, v| acc.maximum(*v));
                    let exps: Vec<T> = row.iter().map(|v| (*v - mx).exp()).collect();
                    let s: T = exps.iter().copied().sum();
                    let scale = gs * weights[r] / total_w;
                    for (j, e) in exps.iter().enumerate() {
                        let softmax = *e / s;
                        let onehot = if j == y { T::ONE } else { T::ZERO };
                        dl.push(scale * (softmax - onehot));
                    }
                }
                vec![(logits, Tensor::from_raw(b, c, dl))]
            }),
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Run reverse-mode accumulation from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.shape() != [1, 1] {
            return Err(Error::Shape {
                context: "backward: loss must be scalar".into(),
                expected: vec![1, 1],
                got: loss_value.shape().to_vec(),
            });
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("backward: loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(back) = &self.nodes[i].backward else {
                continue;
            };
            let g = grads[i].clone().expect("gradient present");
            for (parent, contrib) in back(&g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// ── Kernels (shared by graph ops and the tensor-level API) ─────────────

pub(crate) fn mm_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(b.rows(), k);
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row(p);
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_raw(m, n, out)
}

/// `a (m x k) @ b^T` where `b` is `n x k`.
pub(crate) fn mm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(b.cols(), k);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let dot: T = arow.iter().zip(brow.iter()).map(|(x, y)| *x * *y).sum();
            out.push(dot);
        }
    }
    Tensor::from_raw(m, n, out)
}

/// `a^T (k x m) @ b (m x n)` where `a` is `m x k`.
pub(crate) fn mm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(b.rows(), m);
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_raw(k, n, out)
}

pub(crate) fn transpose_kernel<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::ZERO; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a.get(r, c);
        }
    }
    Tensor::from_raw(n, m, out)
}

pub(crate) fn softmax_rows_kernel<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = a.row(r);
        let mx = row.iter().fold(row[0], |acc, v| acc.maximum(*v));
        let start = out.len();
        let mut sum = T::ZERO;
        for v in row {
            let e = (*v - mx).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    Tensor::from_raw(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_forward_hand_value() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.input(Tensor::new(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.matmul(a, b);
        assert_close(g.value(c).data(), &[58., 64., 139., 154.], 1e-12);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.input(Tensor::new(4, 3, (0..12).map(|v| v as f64 * 0.5).collect()).unwrap());
        let bt = g.transpose(b);
        let direct = g.matmul_nt(a, b);
        let viat = g.matmul(a, bt);
        assert_close(g.value(direct).data(), g.value(viat).data(), 1e-12);
    }

    // softmax oracle: [[0, ln 3]] -> [[0.25, 0.75]]
    #[test]
    fn softmax_hand_values() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(1, 2, vec![0.0, 3.0f64.ln()]).unwrap());
        let s = g.softmax_rows(x);
        assert_close(g.value(s).data(), &[0.25, 0.75], 1e-12);

        // symmetry and overflow safety
        let x = g.input(Tensor::new(2, 2, vec![0.0, 0.0, 1000.0, 1000.0]).unwrap());
        let s = g.softmax_rows(x);
        assert_close(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5], 1e-12);
    }

    // layer_norm oracles: constant row -> zeros (+beta); [1,-1] -> [1,-1]
    #[test]
    fn layer_norm_hand_values() {
        let mut g: Graph<f64> = Graph::new();
        let gamma = g.input(Tensor::new(1, 4, vec![1.; 4]).unwrap());
        let beta = g.input(Tensor::zeros(1, 4));
        let x = g.input(Tensor::new(1, 4, vec![5., 5., 5., 5.]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-5);
        assert_close(g.value(y).data(), &[0., 0., 0., 0.], 1e-9);

        let gamma2 = g.input(Tensor::new(1, 2, vec![1., 1.]).unwrap());
        let beta2 = g.input(Tensor::zeros(1, 2));
        let x2 = g.input(Tensor::new(1, 2, vec![1., -1.]).unwrap());
        let y2 = g.layer_norm(x2, gamma2, beta2, 1e-12);
        assert_close(g.value(y2).data(), &[1., -1.], 1e-5);

        // gamma=0, beta=c collapses every row to c
        let gamma3 = g.input(Tensor::zeros(1, 3));
        let beta3 = g.input(Tensor::new(1, 3, vec![2.5, 2.5, 2.5]).unwrap());
        let x3 = g.input(Tensor::new(2, 3, vec![1., 9., -4., 0., 0.3, 7.]).unwrap());
        let y3 = g.layer_norm(x3, gamma3, beta3, 1e-5);
        assert_close(g.value(y3).data(), &[2.5; 6], 1e-12);
    }

    #[test]
    fn cross_entropy_hand_values() {
        // logits all zero, C=2 -> ln 2
        let mut g: Graph<f64> = Graph::new();
        let l = g.input(Tensor::zeros(1, 2));
        let loss = g.cross_entropy(l, &[0], None);
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // logits [[1, 0]], label 1 -> -log(1/(e+1)) = ln(1+e)
        let mut g: Graph<f64> = Graph::new();
        let l = g.input(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap());
        let loss = g.cross_entropy(l, &[1], None);
        assert!((g.value(loss).item() - (1.0f64.exp() + 1.0).ln()).abs() < 1e-10);
        assert!((g.value(loss).item() - 1.3133).abs() < 1e-4);

        // confidently correct -> loss near 0
        let mut g: Graph<f64> = Graph::new();
        let l = g.input(Tensor::new(1, 2, vec![50.0, 0.0]).unwrap());
        let loss = g.cross_entropy(l, &[0], None);
        assert!(g.value(loss).item() < 1e-9);
    }

    /// Central-difference check against a scalar-producing graph builder.
    fn check_grads(
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        params: &[Tensor<f64>],
        tol: f64,
    ) {
        let mut graph = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| graph.param(t.clone())).collect();
        let loss = build(&mut graph, &vars);
        let grads = graph.backward(loss).unwrap();
        let eps = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.for_param(vars[pi], p.rows(), p.cols());
            for idx in 0..p.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Tensor<f64>> = params.to_vec();
                    perturbed[pi].data_mut()[idx] += delta;
                    let mut gg = Graph::new();
                    let vv: Vec<Var> = perturbed.iter().map(|t| gg.param(t.clone())).collect();
                    let l = build(&mut gg, &vv);
                    gg.value(l).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[idx];
                let denom = a.abs().max(numeric.abs());
                let err = if denom < 1e-6 {
                    (a - numeric).abs()
                } else {
                    (a - numeric).abs() / denom
                };
                assert!(err < tol, "param {pi} coord {idx}: analytic {a} vs numeric {numeric}");
            }
        }
    }

    fn seeded(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        // tiny deterministic LCG so these tests need no rand dependency
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5;
            data.push(v);
        }
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn gradients_elementwise_and_matmul() {
        check_grads(
            |g, v| {
                let s = g.mul(v[0], v[1]);
                let t = g.add(s, v[0]);
                let u = g.sub(t, v[1]);
                g.sum_all(u)
            },
            &[seeded(3, 4, 1), seeded(3, 4, 2)],
            1e-6,
        );
        check_grads(
            |g, v| {
                let c = g.matmul(v[0], v[1]);
                let d = g.matmul_nt(c, v[2]);
                g.sum_all(d)
            },
            &[seeded(2, 3, 3), seeded(3, 4, 4), seeded(5, 4, 5)],
            1e-6,
        );
    }

    #[test]
    fn gradients_activations_and_norms() {
        check_grads(
            |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.tanh(a);
                let c = g.relu(b);
                let s = g.softmax_rows(c);
                g.sum_all(s)
            },
            &[seeded(3, 5, 7)],
            1e-5,
        );
        check_grads(
            |g, v| {
                let ln = g.layer_norm(v[0], v[1], v[2], 1e-5);
                let sq = g.mul(ln, ln);
                g.sum_all(sq)
            },
            &[seeded(4, 6, 11), seeded(1, 6, 12), seeded(1, 6, 13)],
            1e-5,
        );
        check_grads(
            |g, v| {
                let n = g.l2_normalize_rows(v[0]);
                let w = g.mul(n, n);
                let z = g.logsumexp_rows(w);
                g.sum_all(z)
            },
            &[seeded(3, 4, 17)],
            1e-5,
        );
    }

    #[test]
    fn gradients_shape_ops() {
        check_grads(
            |g, v| {
                let shifted = g.shift_rows(v[0], 1);
                let back = g.shift_rows(v[0], -1);
                let cat = g.concat_cols(&[shifted, v[0], back]);
                let sl = g.slice_rows(cat, 1, 2);
                let stacked = g.concat_rows(&[sl, sl]);
                let m = g.mean_rows(stacked);
                let t = g.transpose(m);
                let sq = g.mul(t, t);
                g.sum_all(sq)
            },
            &[seeded(4, 3, 23)],
            1e-6,
        );
        check_grads(
            |g, v| {
                let y = g.add_row(v[0], v[1]);
                let s = g.sigmoid(y);
                g.sum_all(s)
            },
            &[seeded(3, 4, 29), seeded(1, 4, 31)],
            1e-6,
        );
    }

    #[test]
    fn gradients_cross_entropy_weighted() {
        check_grads(
            |g, v| g.cross_entropy(v[0], &[0, 2, 1], None),
            &[seeded(3, 3, 37)],
            1e-6,
        );
        check_grads(
            |g, v| g.cross_entropy(v[0], &[0, 2, 1], Some(&[0.5, 2.0, 1.0])),
            &[seeded(3, 3, 41)],
            1e-6,
        );
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(seeded(2, 2, 43));
        let y = g.relu(p);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn inputs_receive_no_gradients() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(seeded(2, 2, 47));
        let x = g.input(seeded(2, 2, 53));
        let y = g.mul(p, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_some());
        assert!(grads.get(x).is_none());
    }
}
