//! Single-head scaled dot-product attention blocks and the two-arm
//! co-attention fusion network.
//!
//! The block structure is: project the inputs to Q/K/V, attend, add the
//! projected query back in as a residual, then layer-normalize (post-norm).
//! Cross-attention differs from self-attention only in where K/V come
//! from. The fusion network runs two mirrored arms (audio queries text,
//! text queries audio), each refined by a self-attention block, then
//! concatenates per position and applies a position-wise feed-forward.
//!
//! No positional encoding anywhere: every block is permutation-equivariant
//! over valid positions. Masked key positions receive a -1e9 score bias
//! before the softmax; masked query rows are zeroed on output.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::zeros_bias;
use crate::layers::{feed_forward, linear, FeedForwardParams, LinearParams};
use crate::tensor::{Scalar, Tensor};

const MASK_SCORE: f64 = -1e9;

/// Validity flags for the positions of a sequence; at least one must be set
/// for attention to be defined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask(Vec<bool>);

impl ValidMask {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if !flags.iter().any(|&b| b) {
            return Err(Error::AllMasked);
        }
        Ok(ValidMask(flags))
    }

    pub fn all_valid(n: usize) -> Self {
        ValidMask(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count_valid(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    /// True when the valid positions form a prefix (padding is a suffix).
    pub fn is_prefix(&self) -> bool {
        let mut seen_invalid = false;
        for &b in &self.0 {
            if b && seen_invalid {
                return false;
            }
            if !b {
                seen_invalid = true;
            }
        }
        true
    }

    /// Additive score bias over key positions: 0 for valid, -1e9 for masked.
    fn key_bias<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .0
            .iter()
            .map(|&b| if b { T::ZERO } else { T::from_f64(MASK_SCORE) })
            .collect();
        Tensor::from_raw(1, self.0.len(), data)
    }

    /// 0/1 matrix that zeroes masked rows of an `n x d` sequence.
    fn row_gate<T: Scalar>(&self, d: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.0.len() * d);
        for &b in &self.0 {
            let v = if b { T::ONE } else { T::ZERO };
            data.extend(std::iter::repeat(v).take(d));
        }
        Tensor::from_raw(self.0.len(), d, data)
    }
}

/// Projection and normalization parameters of one attention block.
/// All projections are square in `d_model`.
#[derive(Debug, Clone)]
pub struct AttentionParams<S> {
    pub d_model: usize,
    pub wq: LinearParams<S>,
    pub wk: LinearParams<S>,
    pub wv: LinearParams<S>,
    pub ln_gamma: S,
    pub ln_beta: S,
}

impl<S> AttentionParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> AttentionParams<U> {
        AttentionParams {
            d_model: self.d_model,
            wq: self.wq.map(&mut f),
            wk: self.wk.map(&mut f),
            wv: self.wv.map(&mut f),
            ln_gamma: f(&self.ln_gamma),
            ln_beta: f(&self.ln_beta),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        self.wq.for_each(&format!("{prefix}.wq"), f);
        self.wk.for_each(&format!("{prefix}.wk"), f);
        self.wv.for_each(&format!("{prefix}.wv"), f);
        f(format!("{prefix}.ln_gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &self.ln_beta);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        self.wq.for_each_mut(&format!("{prefix}.wq"), f);
        self.wk.for_each_mut(&format!("{prefix}.wk"), f);
        self.wv.for_each_mut(&format!("{prefix}.wv"), f);
        f(format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &mut self.ln_beta);
    }
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    pub fn init(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            d_model,
            wq: LinearParams::init(d_model, d_model, rng),
            wk: LinearParams::init(d_model, d_model, rng),
            wv: LinearParams::init(d_model, d_model, rng),
            ln_gamma: Tensor::full(1, d_model, T::ONE),
            ln_beta: zeros_bias(d_model),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AttentionParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

fn check_mask(n: usize, mask: Option<&ValidMask>) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape {
                context: "attention mask".into(),
                expected: vec![n],
                got: vec![m.len()],
            });
        }
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d_k)) V` with masked keys excluded from the
/// softmax and masked query rows zeroed.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&ValidMask>,
) -> Result<Var> {
    let [n_q, d_k] = g.value(q).shape();
    let [n_k, d_k2] = g.value(k).shape();
    let [n_v, d_v] = g.value(v).shape();
    if d_k != d_k2 || n_k != n_v || d_k != d_v {
        return Err(Error::Shape {
            context: "scaled_dot_attention".into(),
            expected: vec![n_k, d_k],
            got: vec![n_v, d_v],
        });
    }
    check_mask(n_k, mask)?;

    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, T::from_f64(1.0 / (d_k as f64).sqrt()));
    let biased = match mask {
        Some(m) if m.count_valid() < m.len() => {
            let bias = g.input(m.key_bias());
            g.add_row(scaled, bias)
        }
        _ => scaled,
    };
    let weights = g.softmax_rows(biased);
    let out = g.matmul(weights, v);

    Ok(match mask {
        Some(m) if n_q == n_k && m.count_valid() < m.len() => {
            let gate = g.input(m.row_gate(d_v));
            g.mul(out, gate)
        }
        _ => out,
    })
}

/// `LayerNorm(Q + Attention(Q, K, V))` where Q comes from `query_seq` and
/// K/V from `kv_seq`. Output shape equals the query shape.
pub fn cross_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    query_seq: Var,
    kv_seq: Var,
    p: &AttentionParams<Var>,
    mask: Option<&ValidMask>,
) -> Result<Var> {
    let [n_q, d] = g.value(query_seq).shape();
    let [n_kv, d2] = g.value(kv_seq).shape();
    if d != p.d_model || d2 != p.d_model || n_q != n_kv {
        return Err(Error::Shape {
            context: "cross_attention_block".into(),
            expected: vec![n_q, p.d_model],
            got: vec![n_kv, d2],
        });
    }
    let q = linear(g, query_seq, &p.wq);
    let k = linear(g, kv_seq, &p.wk);
    let v = linear(g, kv_seq, &p.wv);
    let attn = scaled_dot_attention(g, q, k, v, mask)?;
    let res = g.add(q, attn);
    let normed = g.layer_norm(res, p.ln_gamma, p.ln_beta, T::from_f64(1e-5));
    Ok(match mask {
        Some(m) if m.count_valid() < m.len() => {
            let gate = g.input(m.row_gate(p.d_model));
            g.mul(normed, gate)
        }
        _ => normed,
    })
}

/// Self-attention is cross-attention with the sequence attending to itself.
pub fn self_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams<Var>,
    mask: Option<&ValidMask>,
) -> Result<Var> {
    cross_attention_block(g, x, x, p, mask)
}

/// Parameters of the two-arm co-attention fusion network. Arms are named
/// by the modality that supplies the query; each arm has independent
/// parameters (nothing in the architecture forces them to be tied).
#[derive(Debug, Clone)]
pub struct CoAttentionParams<S> {
    pub d_model: usize,
    pub cross_audio_query: AttentionParams<S>,
    pub self_audio_arm: AttentionParams<S>,
    pub cross_text_query: AttentionParams<S>,
    pub self_text_arm: AttentionParams<S>,
    /// Position-wise feed-forward over the concatenated arms:
    /// `2*d_model -> d_ff -> d_model`.
    pub ff: FeedForwardParams<S>,
}

impl<S> CoAttentionParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> CoAttentionParams<U> {
        CoAttentionParams {
            d_model: self.d_model,
            cross_audio_query: self.cross_audio_query.map(&mut f),
            self_audio_arm: self.self_audio_arm.map(&mut f),
            cross_text_query: self.cross_text_query.map(&mut f),
            self_text_arm: self.self_text_arm.map(&mut f),
            ff: self.ff.map(&mut f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        self.cross_audio_query
            .for_each(&format!("{prefix}.cross_audio_query"), f);
        self.self_audio_arm
            .for_each(&format!("{prefix}.self_audio_arm"), f);
        self.cross_text_query
            .for_each(&format!("{prefix}.cross_text_query"), f);
        self.self_text_arm
            .for_each(&format!("{prefix}.self_text_arm"), f);
        self.ff.for_each(&format!("{prefix}.ff"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        self.cross_audio_query
            .for_each_mut(&format!("{prefix}.cross_audio_query"), f);
        self.self_audio_arm
            .for_each_mut(&format!("{prefix}.self_audio_arm"), f);
        self.cross_text_query
            .for_each_mut(&format!("{prefix}.cross_text_query"), f);
        self.self_text_arm
            .for_each_mut(&format!("{prefix}.self_text_arm"), f);
        self.ff.for_each_mut(&format!("{prefix}.ff"), f);
    }
}

impl<T: Scalar> CoAttentionParams<Tensor<T>> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        CoAttentionParams {
            d_model,
            cross_audio_query: AttentionParams::init(d_model, rng),
            self_audio_arm: AttentionParams::init(d_model, rng),
            cross_text_query: AttentionParams::init(d_model, rng),
            self_text_arm: AttentionParams::init(d_model, rng),
            ff: FeedForwardParams::init(2 * d_model, d_ff, d_model, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> CoAttentionParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// Intermediate and final values of one fusion pass.
pub struct FusionOut {
    /// Audio-queries-text arm after its self-attention block, `N x d_model`.
    pub arm_audio_query: Var,
    /// Text-queries-audio arm after its self-attention block, `N x d_model`.
    pub arm_text_query: Var,
    /// Per-position concatenation of the arms, `N x 2*d_model`.
    pub concat: Var,
    /// Feed-forward output, `N x d_model`.
    pub fused: Var,
}

/// Two-arm co-attention fusion over aligned audio/text sequences.
pub fn co_attention_fuse<T: Scalar>(
    g: &mut Graph<T>,
    audio: Var,
    text: Var,
    p: &CoAttentionParams<Var>,
    mask: Option<&ValidMask>,
) -> Result<FusionOut> {
    let [n_a, d_a] = g.value(audio).shape();
    let [n_t, d_t] = g.value(text).shape();
    if n_a != n_t || d_a != p.d_model || d_t != p.d_model {
        return Err(Error::Shape {
            context: "co_attention_fuse".into(),
            expected: vec![n_a, p.d_model],
            got: vec![n_t, d_t],
        });
    }
    let cross_a = cross_attention_block(g, audio, text, &p.cross_audio_query, mask)?;
    let arm_audio_query = self_attention_block(g, cross_a, &p.self_audio_arm, mask)?;
    let cross_t = cross_attention_block(g, text, audio, &p.cross_text_query, mask)?;
    let arm_text_query = self_attention_block(g, cross_t, &p.self_text_arm, mask)?;
    let concat = g.concat_cols(&[arm_audio_query, arm_text_query]);
    let fused = feed_forward(g, concat, &p.ff);
    Ok(FusionOut {
        arm_audio_query,
        arm_text_query,
        concat,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::sub_rng;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = sub_rng(seed, "attn-test");
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_raw(rows, cols, data)
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.input(rand_tensor(1, 4, 1));
        let k = g.input(rand_tensor(1, 4, 2));
        let v = g.input(rand_tensor(1, 4, 3));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(v).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_queries_average_values() {
        // all scores zero -> uniform weights -> each output row is the
        // column mean of V
        let mut g: Graph<f64> = Graph::new();
        let q = g.input(Tensor::zeros(2, 3));
        let k = g.input(rand_tensor(2, 3, 4));
        let v = g.input(rand_tensor(2, 3, 5));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        let vv = g.value(v);
        for c in 0..3 {
            let mean = (vv.get(0, c) + vv.get(1, c)) / 2.0;
            assert!((g.value(out).get(0, c) - mean).abs() < 1e-12);
            assert!((g.value(out).get(1, c) - mean).abs() < 1e-12);
        }
    }

    // N=2, d_k=1, Q=[[1],[1]], K=[[10],[0]], V=[[1],[0]]:
    // weight on V0 is e^10 / (e^10 + 1) ≈ 0.9999546
    #[test]
    fn two_key_softmax_hand_value() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.input(Tensor::new(2, 1, vec![1.0, 1.0]).unwrap());
        let k = g.input(Tensor::new(2, 1, vec![10.0, 0.0]).unwrap());
        let v = g.input(Tensor::new(2, 1, vec![1.0, 0.0]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((g.value(out).get(0, 0) - expected).abs() < 1e-9);
        assert!((expected - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn all_masked_is_an_error() {
        assert!(ValidMask::new(vec![false, false]).is_err());
    }

    #[test]
    fn masked_rows_are_zero_and_do_not_leak() {
        let mut rng = sub_rng(7, "attn-mask");
        let p: AttentionParams<Tensor<f64>> = AttentionParams::init(4, &mut rng);
        let mask = ValidMask::new(vec![true, true, false]).unwrap();

        let run = |x: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.input(x.clone());
            let pv = p.map(|t| g.input(t.clone()));
            let out = self_attention_block(&mut g, xv, &pv, Some(&mask)).unwrap();
            g.value(out).clone()
        };

        let x = rand_tensor(3, 4, 8);
        let out = run(&x);
        // masked row zero
        assert!(out.row(2).iter().all(|v| *v == 0.0));

        // garbling the masked row leaves valid rows unchanged
        let mut garbled = x.clone();
        for c in 0..4 {
            garbled.set(2, c, 123.0 + c as f64);
        }
        let out2 = run(&garbled);
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.get(r, c) - out2.get(r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blocks_are_permutation_equivariant() {
        let mut rng = sub_rng(9, "attn-perm");
        let p: AttentionParams<Tensor<f64>> = AttentionParams::init(4, &mut rng);
        let x = rand_tensor(5, 4, 10);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap();

        let run = |input: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.input(input.clone());
            let pv = p.map(|t| g.input(t.clone()));
            let out = self_attention_block(&mut g, xv, &pv, None).unwrap();
            g.value(out).clone()
        };
        let base = run(&x);
        let shuffled = run(&permuted);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((shuffled.get(new_row, c) - base.get(old_row, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_attention_on_self_equals_self_attention() {
        let mut rng = sub_rng(13, "attn-degenerate");
        let p: AttentionParams<Tensor<f64>> = AttentionParams::init(4, &mut rng);
        let x = rand_tensor(3, 4, 14);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.input(x);
        let pv = p.map(|t| g.input(t.clone()));
        let a = self_attention_block(&mut g, xv, &pv, None).unwrap();
        let b = cross_attention_block(&mut g, xv, xv, &pv, None).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn cross_attention_depends_on_kv_sequence() {
        let mut rng = sub_rng(15, "attn-sensitivity");
        let p: AttentionParams<Tensor<f64>> = AttentionParams::init(4, &mut rng);
        let q = rand_tensor(3, 4, 16);
        let kv = rand_tensor(3, 4, 17);
        let mut kv2 = kv.clone();
        kv2.set(1, 2, kv2.get(1, 2) + 1.0);

        let run = |kv: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let qv = g.input(q.clone());
            let kvv = g.input(kv.clone());
            let pv = p.map(|t| g.input(t.clone()));
            let out = cross_attention_block(&mut g, qv, kvv, &pv, None).unwrap();
            g.value(out).clone()
        };
        let a = run(&kv);
        let b = run(&kv2);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    // N=1 composition: output = LayerNorm(q + v) with projected rows.
    #[test]
    fn cross_attention_single_position_hand_composition() {
        let mut rng = sub_rng(19, "attn-n1");
        let p: AttentionParams<Tensor<f64>> = AttentionParams::init(3, &mut rng);
        let xq = rand_tensor(1, 3, 20);
        let xkv = rand_tensor(1, 3, 21);

        let mut g: Graph<f64> = Graph::new();
        let qv = g.input(xq.clone());
        let kvv = g.input(xkv.clone());
        let pv = p.map(|t| g.input(t.clone()));
        let out = cross_attention_block(&mut g, qv, kvv, &pv, None).unwrap();

        // manual route
        let q = linear(&mut g, qv, &pv.wq);
        let v = linear(&mut g, kvv, &pv.wv);
        let s = g.add(q, v);
        let manual = g.layer_norm(s, pv.ln_gamma, pv.ln_beta, 1e-5);
        for (a, b) in g.value(out).data().iter().zip(g.value(manual).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_output_width_is_twice_d_model_pre_ff() {
        let mut rng = sub_rng(23, "fusion");
        let p: CoAttentionParams<Tensor<f64>> = CoAttentionParams::init(4, 8, &mut rng);
        let audio = rand_tensor(5, 4, 24);
        let text = rand_tensor(5, 4, 25);
        let mut g: Graph<f64> = Graph::new();
        let av = g.input(audio);
        let tv = g.input(text);
        let pv = p.map(|t| g.input(t.clone()));
        let out = co_attention_fuse(&mut g, av, tv, &pv, None).unwrap();
        assert_eq!(g.value(out.concat).shape(), [5, 8]);
        assert_eq!(g.value(out.fused).shape(), [5, 4]);
    }

    #[test]
    fn swapping_modalities_swaps_arms_under_mirrored_params() {
        let mut rng = sub_rng(29, "fusion-swap");
        let arm_cross: AttentionParams<Tensor<f64>> = AttentionParams::init(4, &mut rng);
        let arm_self: AttentionParams<Tensor<f64>> = AttentionParams::init(4, &mut rng);
        let ff: FeedForwardParams<Tensor<f64>> =
            FeedForwardParams::init(8, 8, 4, &mut sub_rng(31, "fusion-ff"));
        let p = CoAttentionParams {
            d_model: 4,
            cross_audio_query: arm_cross.clone(),
            self_audio_arm: arm_self.clone(),
            cross_text_query: arm_cross,
            self_text_arm: arm_self,
            ff,
        };
        let a = rand_tensor(3, 4, 32);
        let t = rand_tensor(3, 4, 33);

        let run = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.input(x.clone());
            let yv = g.input(y.clone());
            let pv = p.map(|t| g.input(t.clone()));
            let out = co_attention_fuse(&mut g, xv, yv, &pv, None).unwrap();
            (
                g.value(out.arm_audio_query).clone(),
                g.value(out.arm_text_query).clone(),
            )
        };
        let (arm1, arm2) = run(&a, &t);
        let (arm1_swapped, arm2_swapped) = run(&t, &a);
        assert_eq!(arm1.data(), arm2_swapped.data());
        assert_eq!(arm2.data(), arm1_swapped.data());
    }
}
