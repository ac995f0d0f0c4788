//! Stage-2 contextual model: a bidirectional GRU over the utterance
//! embeddings of one conversation, a self-attention block over its hidden
//! states for long-range context, and a position-wise feed-forward with
//! ReLU. Emits per-utterance context embeddings (pre-classifier) and
//! logits.
//!
//! The self-attention block can be disabled (`use_self_attention: false`)
//! for the ablation where the bi-GRU output feeds the feed-forward
//! directly.

use rand_chacha::ChaCha8Rng;

use crate::attention::{self_attention_block, AttentionParams, ValidMask};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{bigru_sequence, GruCellParams};
use crate::layers::{feed_forward, linear, FeedForwardParams, ForwardCtx, LinearParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ContextualGruParams<S> {
    pub d_model: usize,
    pub num_classes: usize,
    pub use_self_attention: bool,
    /// Each direction runs at `d_model / 2` so the concatenated states
    /// stay at `d_model`.
    pub fwd: GruCellParams<S>,
    pub bwd: GruCellParams<S>,
    pub attn: AttentionParams<S>,
    pub ff: FeedForwardParams<S>,
    pub head: LinearParams<S>,
}

impl<S> ContextualGruParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> ContextualGruParams<U> {
        ContextualGruParams {
            d_model: self.d_model,
            num_classes: self.num_classes,
            use_self_attention: self.use_self_attention,
            fwd: self.fwd.map(&mut f),
            bwd: self.bwd.map(&mut f),
            attn: self.attn.map(&mut f),
            ff: self.ff.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        self.fwd.for_each(&format!("{prefix}.fwd"), f);
        self.bwd.for_each(&format!("{prefix}.bwd"), f);
        self.attn.for_each(&format!("{prefix}.attn"), f);
        self.ff.for_each(&format!("{prefix}.ff"), f);
        self.head.for_each(&format!("{prefix}.head"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        self.fwd.for_each_mut(&format!("{prefix}.fwd"), f);
        self.bwd.for_each_mut(&format!("{prefix}.bwd"), f);
        self.attn.for_each_mut(&format!("{prefix}.attn"), f);
        self.ff.for_each_mut(&format!("{prefix}.ff"), f);
        self.head.for_each_mut(&format!("{prefix}.head"), f);
    }
}

impl<T: Scalar> ContextualGruParams<Tensor<T>> {
    pub fn init(
        d_model: usize,
        d_ff: usize,
        num_classes: usize,
        use_self_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "contextual model requires even d_model, got {d_model}"
            )));
        }
        let half = d_model / 2;
        Ok(ContextualGruParams {
            d_model,
            num_classes,
            use_self_attention,
            fwd: GruCellParams::init(d_model, half, rng),
            bwd: GruCellParams::init(d_model, half, rng),
            attn: AttentionParams::init(d_model, rng),
            ff: FeedForwardParams::init(d_model, d_ff, d_model, rng),
            head: LinearParams::init(d_model, num_classes, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ContextualGruParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// Forward over one conversation's `L x d_model` utterance embeddings.
/// Returns `(context embeddings L x d_model, logits L x num_classes)`.
pub fn contextual_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ContextualGruParams<Var>,
    utterances: Var,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    let [len, d] = g.value(utterances).shape();
    if len == 0 {
        return Err(Error::Contract("contextual_forward: empty conversation".into()));
    }
    if d != p.d_model {
        return Err(Error::Shape {
            context: "contextual_forward".into(),
            expected: vec![len, p.d_model],
            got: vec![len, d],
        });
    }
    let states = bigru_sequence(g, utterances, &p.fwd, &p.bwd).states;
    let states = ctx.dropout(g, states);
    let attended = if p.use_self_attention {
        let a = self_attention_block(g, states, &p.attn, None)?;
        ctx.dropout(g, a)
    } else {
        states
    };
    let context = feed_forward(g, attended, &p.ff);
    let context = ctx.dropout(g, context);
    let logits = linear(g, context, &p.head);
    Ok((context, logits))
}

/// Validated evaluation on plain tensors. `mask` must flag a non-empty
/// prefix of valid positions (padding is a suffix); the model runs on the
/// valid prefix only.
pub fn contextual_gru<T: Scalar>(
    utterances: &Tensor<T>,
    p: &ContextualGruParams<Tensor<T>>,
    mask: &ValidMask,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if mask.len() != utterances.rows() {
        return Err(Error::Shape {
            context: "contextual_gru mask".into(),
            expected: vec![utterances.rows()],
            got: vec![mask.len()],
        });
    }
    if !mask.is_prefix() {
        return Err(Error::Contract(
            "contextual_gru: padding must be a suffix of the conversation".into(),
        ));
    }
    let valid = mask.count_valid();
    let mut g = Graph::new();
    let seq_full = g.input(utterances.clone());
    let seq = if valid == utterances.rows() {
        seq_full
    } else {
        g.slice_rows(seq_full, 0, valid)
    };
    let pv = p.map(|t| g.input(t.clone()));
    let mut fwd_ctx = ForwardCtx::eval();
    let (context, logits) = contextual_forward(&mut g, &pv, seq, &mut fwd_ctx)?;
    Ok((g.value(context).clone(), g.value(logits).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::sub_rng;
    use rand::Rng;

    fn conv_embs(l: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = sub_rng(seed, "ctx-test");
        Tensor::from_raw(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn params(d: usize, c: usize, seed: u64, attn: bool) -> ContextualGruParams<Tensor<f64>> {
        let mut rng = sub_rng(seed, "ctx-params");
        ContextualGruParams::init(d, 2 * d, c, attn, &mut rng).unwrap()
    }

    #[test]
    fn single_utterance_conversation_works() {
        let p = params(6, 3, 1, true);
        let x = conv_embs(1, 6, 2);
        let (ctxe, logits) = contextual_gru(&x, &p, &ValidMask::all_valid(1)).unwrap();
        assert_eq!(ctxe.shape(), [1, 6]);
        assert_eq!(logits.shape(), [1, 3]);
    }

    #[test]
    fn empty_conversation_is_an_error() {
        let p = params(6, 3, 3, true);
        let x = Tensor::zeros(0, 6);
        assert!(ValidMask::new(vec![]).is_err());
        // even with a fabricated mask the forward refuses
        let mask = ValidMask::all_valid(1);
        assert!(contextual_gru(&x, &p, &mask).is_err());
    }

    #[test]
    fn odd_d_model_rejected() {
        let mut rng = sub_rng(4, "ctx-odd");
        assert!(ContextualGruParams::<Tensor<f64>>::init(5, 10, 3, true, &mut rng).is_err());
    }

    #[test]
    fn distant_utterance_changes_logits() {
        let p = params(6, 3, 5, true);
        let x = conv_embs(8, 6, 6);
        let mask = ValidMask::all_valid(8);
        let (_, base) = contextual_gru(&x, &p, &mask).unwrap();
        let mut altered = x.clone();
        for c in 0..6 {
            altered.set(7, c, altered.get(7, c) + 2.0);
        }
        let (_, changed) = contextual_gru(&altered, &p, &mask).unwrap();
        // logits for utterance 0 respond to a change at distance 7
        let moved = (0..3).any(|c| (base.get(0, c) - changed.get(0, c)).abs() > 1e-9);
        assert!(moved);
    }

    #[test]
    fn reversing_conversation_changes_logits() {
        let p = params(6, 3, 7, true);
        let x = conv_embs(5, 6, 8);
        let rev =
            Tensor::from_rows(&(0..5).rev().map(|r| x.row(r).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let mask = ValidMask::all_valid(5);
        let (_, a) = contextual_gru(&x, &p, &mask).unwrap();
        let (_, b) = contextual_gru(&rev, &p, &mask).unwrap();
        // compare logits of the utterance that ends up in row 0
        let differs = (0..3).any(|c| (a.get(0, c) - b.get(4, c)).abs() > 1e-9);
        assert!(differs);
    }

    #[test]
    fn padding_suffix_is_sliced_off() {
        let p = params(6, 3, 9, true);
        let x = conv_embs(3, 6, 10);
        let mut padded_rows: Vec<Vec<f64>> = (0..3).map(|r| x.row(r).to_vec()).collect();
        padded_rows.push(vec![777.0; 6]);
        padded_rows.push(vec![-555.0; 6]);
        let padded = Tensor::from_rows(&padded_rows).unwrap();
        let mask = ValidMask::new(vec![true, true, true, false, false]).unwrap();
        let (ctx_a, log_a) = contextual_gru(&x, &p, &ValidMask::all_valid(3)).unwrap();
        let (ctx_b, log_b) = contextual_gru(&padded, &p, &mask).unwrap();
        assert_eq!(ctx_a.data(), ctx_b.data());
        assert_eq!(log_a.data(), log_b.data());
    }

    #[test]
    fn non_suffix_padding_rejected() {
        let p = params(6, 3, 11, true);
        let x = conv_embs(3, 6, 12);
        let mask = ValidMask::new(vec![true, false, true]).unwrap();
        assert!(contextual_gru(&x, &p, &mask).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, DEFAULT_EPS};
        let p = params(4, 2, 13, true);
        let x = conv_embs(4, 4, 14);
        let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
        p.for_each("ctx", &mut |name, t: &Tensor<f64>| {
            named.push((name, t.clone()));
        });
        let template = p.clone();
        let report = grad_check(
            &move |g: &mut Graph<f64>, v: &[Var]| {
                let mut i = 0;
                let pv = template.map(|_| {
                    let var = v[i];
                    i += 1;
                    var
                });
                let xv = g.input(x.clone());
                let mut fwd_ctx = ForwardCtx::eval();
                let (ctxe, logits) = contextual_forward(g, &pv, xv, &mut fwd_ctx).unwrap();
                let cat = g.concat_cols(&[ctxe, logits]);
                let sq = g.mul(cat, cat);
                g.sum_all(sq)
            },
            &named,
            DEFAULT_EPS,
            1e-4,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn ablated_attention_still_runs_and_differs() {
        let with = params(6, 3, 15, true);
        let mut without = with.clone();
        without.use_self_attention = false;
        let x = conv_embs(4, 6, 16);
        let mask = ValidMask::all_valid(4);
        let (_, a) = contextual_gru(&x, &with, &mask).unwrap();
        let (_, b) = contextual_gru(&x, &without, &mask).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
