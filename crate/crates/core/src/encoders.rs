//! Stage-1 utterance encoders.
//!
//! Both encoders map a variable-length sequence of precomputed embeddings
//! (audio frames or text tokens) to one fixed `d_model` vector plus class
//! logits. They see a single utterance at a time and nothing of the
//! surrounding conversation; conversational context is stage 2's job.
//!
//! Audio: two 1-D convolutions (ReLU, zero padding) over the frame axis,
//! mean-pooled over time. Text: a bidirectional GRU over tokens whose
//! final states are concatenated and projected down to `d_model`. In both
//! cases the pooled pre-classifier vector is the utterance embedding that
//! later stages consume.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{bigru_sequence, GruCellParams};
use crate::layers::{conv1d, linear, Conv1dParams, ForwardCtx, LinearParams};
use crate::tensor::{Scalar, Tensor};
use crate::Modality;

/// Stage-1 output for one utterance: the pre-classifier embedding.
#[derive(Debug, Clone)]
pub struct UtteranceEmbedding<T> {
    pub vector: Tensor<T>,
    pub modality: Modality,
    pub stage: u8,
}

#[derive(Debug, Clone)]
pub struct AudioEncoderParams<S> {
    pub input_dim: usize,
    pub d_model: usize,
    pub num_classes: usize,
    pub conv1: Conv1dParams<S>,
    pub conv2: Conv1dParams<S>,
    pub head: LinearParams<S>,
}

impl<S> AudioEncoderParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> AudioEncoderParams<U> {
        AudioEncoderParams {
            input_dim: self.input_dim,
            d_model: self.d_model,
            num_classes: self.num_classes,
            conv1: self.conv1.map(&mut f),
            conv2: self.conv2.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        self.conv1.for_each(&format!("{prefix}.conv1"), f);
        self.conv2.for_each(&format!("{prefix}.conv2"), f);
        self.head.for_each(&format!("{prefix}.head"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        self.conv1.for_each_mut(&format!("{prefix}.conv1"), f);
        self.conv2.for_each_mut(&format!("{prefix}.conv2"), f);
        self.head.for_each_mut(&format!("{prefix}.head"), f);
    }
}

impl<T: Scalar> AudioEncoderParams<Tensor<T>> {
    pub fn init(
        input_dim: usize,
        d_model: usize,
        num_classes: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AudioEncoderParams {
            input_dim,
            d_model,
            num_classes,
            conv1: Conv1dParams::init(input_dim, d_model, kernel, rng),
            conv2: Conv1dParams::init(d_model, d_model, kernel, rng),
            head: LinearParams::init(d_model, num_classes, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AudioEncoderParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// Conv stack -> mean pool -> classifier. Returns `(embedding 1 x d_model,
/// logits 1 x num_classes)`.
pub fn audio_encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &AudioEncoderParams<Var>,
    frames: Var,
    ctx: &mut ForwardCtx,
) -> (Var, Var) {
    let h = conv1d(g, frames, &p.conv1);
    let h = g.relu(h);
    let h = ctx.dropout(g, h);
    let h = conv1d(g, h, &p.conv2);
    let h = g.relu(h);
    let h = ctx.dropout(g, h);
    let embedding = g.mean_rows(h);
    let logits = linear(g, embedding, &p.head);
    (embedding, logits)
}

/// Validated single-utterance evaluation on plain tensors (no dropout).
pub fn audio_utterance_encoder<T: Scalar>(
    frames: &Tensor<T>,
    p: &AudioEncoderParams<Tensor<T>>,
) -> Result<(UtteranceEmbedding<T>, Tensor<T>)> {
    check_frames("audio_utterance_encoder", frames, p.input_dim)?;
    let mut g = Graph::new();
    let fv = g.input(frames.clone());
    let pv = p.map(|t| g.input(t.clone()));
    let mut ctx = ForwardCtx::eval();
    let (emb, logits) = audio_encoder_forward(&mut g, &pv, fv, &mut ctx);
    Ok((
        UtteranceEmbedding {
            vector: g.value(emb).clone(),
            modality: Modality::Audio,
            stage: 1,
        },
        g.value(logits).clone(),
    ))
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams<S> {
    pub input_dim: usize,
    pub d_model: usize,
    pub num_classes: usize,
    pub fwd: GruCellParams<S>,
    pub bwd: GruCellParams<S>,
    /// Projects the concatenated final states (`2 * d_model`) to `d_model`.
    pub proj: LinearParams<S>,
    pub head: LinearParams<S>,
}

impl<S> TextEncoderParams<S> {
    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> TextEncoderParams<U> {
        TextEncoderParams {
            input_dim: self.input_dim,
            d_model: self.d_model,
            num_classes: self.num_classes,
            fwd: self.fwd.map(&mut f),
            bwd: self.bwd.map(&mut f),
            proj: self.proj.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a S)) {
        self.fwd.for_each(&format!("{prefix}.fwd"), f);
        self.bwd.for_each(&format!("{prefix}.bwd"), f);
        self.proj.for_each(&format!("{prefix}.proj"), f);
        self.head.for_each(&format!("{prefix}.head"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut S)) {
        self.fwd.for_each_mut(&format!("{prefix}.fwd"), f);
        self.bwd.for_each_mut(&format!("{prefix}.bwd"), f);
        self.proj.for_each_mut(&format!("{prefix}.proj"), f);
        self.head.for_each_mut(&format!("{prefix}.head"), f);
    }
}

impl<T: Scalar> TextEncoderParams<Tensor<T>> {
    pub fn init(
        input_dim: usize,
        d_model: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TextEncoderParams {
            input_dim,
            d_model,
            num_classes,
            fwd: GruCellParams::init(input_dim, d_model, rng),
            bwd: GruCellParams::init(input_dim, d_model, rng),
            proj: LinearParams::init(2 * d_model, d_model, rng),
            head: LinearParams::init(d_model, num_classes, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> TextEncoderParams<Var> {
        self.map(|t| g.param(t.clone()))
    }
}

/// bi-GRU over tokens -> concat final states -> project -> classifier.
pub fn text_encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &TextEncoderParams<Var>,
    tokens: Var,
    ctx: &mut ForwardCtx,
) -> (Var, Var) {
    let out = bigru_sequence(g, tokens, &p.fwd, &p.bwd);
    let finals = g.concat_cols(&[out.final_fwd, out.final_bwd]);
    let finals = ctx.dropout(g, finals);
    let embedding = linear(g, finals, &p.proj);
    let logits = linear(g, embedding, &p.head);
    (embedding, logits)
}

/// Validated single-utterance evaluation on plain tensors (no dropout).
pub fn text_utterance_encoder<T: Scalar>(
    tokens: &Tensor<T>,
    p: &TextEncoderParams<Tensor<T>>,
) -> Result<(UtteranceEmbedding<T>, Tensor<T>)> {
    check_frames("text_utterance_encoder", tokens, p.input_dim)?;
    let mut g = Graph::new();
    let tv = g.input(tokens.clone());
    let pv = p.map(|t| g.input(t.clone()));
    let mut ctx = ForwardCtx::eval();
    let (emb, logits) = text_encoder_forward(&mut g, &pv, tv, &mut ctx);
    Ok((
        UtteranceEmbedding {
            vector: g.value(emb).clone(),
            modality: Modality::Text,
            stage: 1,
        },
        g.value(logits).clone(),
    ))
}

fn check_frames<T: Scalar>(context: &str, frames: &Tensor<T>, input_dim: usize) -> Result<()> {
    if frames.rows() == 0 {
        return Err(Error::Contract(format!(
            "{context}: empty frame sequence"
        )));
    }
    if frames.cols() != input_dim {
        return Err(Error::Shape {
            context: context.into(),
            expected: vec![frames.rows(), input_dim],
            got: frames.shape().to_vec(),
        });
    }
    if !frames.is_finite() {
        return Err(Error::NonFinite(format!("{context} input")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::sub_rng;
    use rand::Rng;

    fn frames(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = sub_rng(seed, "enc-test");
        Tensor::from_raw(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn audio_embedding_width_is_d_model_for_any_length() {
        let mut rng = sub_rng(1, "audio-enc");
        let p: AudioEncoderParams<Tensor<f64>> = AudioEncoderParams::init(6, 8, 3, 3, &mut rng);
        for t in [1usize, 5, 50] {
            let (emb, logits) = audio_utterance_encoder(&frames(t, 6, t as u64), &p).unwrap();
            assert_eq!(emb.vector.shape(), [1, 8]);
            assert_eq!(logits.shape(), [1, 3]);
        }
    }

    #[test]
    fn kernel_one_constant_frames_give_length_invariant_embedding() {
        let mut rng = sub_rng(2, "audio-enc");
        let p: AudioEncoderParams<Tensor<f64>> = AudioEncoderParams::init(4, 6, 2, 1, &mut rng);
        let row = vec![0.3, -0.7, 0.1, 0.9];
        let short = Tensor::from_rows(&vec![row.clone(); 2]).unwrap();
        let long = Tensor::from_rows(&vec![row; 11]).unwrap();
        let (e1, _) = audio_utterance_encoder(&short, &p).unwrap();
        let (e2, _) = audio_utterance_encoder(&long, &p).unwrap();
        for (a, b) in e1.vector.data().iter().zip(e2.vector.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_or_mismatched_frames_error() {
        let mut rng = sub_rng(3, "audio-enc");
        let p: AudioEncoderParams<Tensor<f64>> = AudioEncoderParams::init(4, 6, 2, 3, &mut rng);
        assert!(audio_utterance_encoder(&Tensor::zeros(0, 4), &p).is_err());
        assert!(audio_utterance_encoder(&Tensor::zeros(3, 5), &p).is_err());
    }

    #[test]
    fn text_encoder_handles_single_token() {
        let mut rng = sub_rng(4, "text-enc");
        let p: TextEncoderParams<Tensor<f64>> = TextEncoderParams::init(5, 6, 4, &mut rng);
        let (emb, logits) = text_utterance_encoder(&frames(1, 5, 9), &p).unwrap();
        assert_eq!(emb.vector.shape(), [1, 6]);
        assert_eq!(logits.shape(), [1, 4]);
        assert!(emb.vector.is_finite());
    }

    #[test]
    fn text_reversal_is_identity_with_tied_directions() {
        let mut rng = sub_rng(5, "text-enc");
        let mut p: TextEncoderParams<Tensor<f64>> = TextEncoderParams::init(5, 6, 4, &mut rng);
        p.bwd = p.fwd.clone();
        // With tied directions, concat(final_fwd, final_bwd) under reversal
        // swaps the two halves; force the projection to be symmetric over
        // the halves so the embedding is reversal-invariant.
        let half = p.proj.weight.clone();
        let mut w = Tensor::zeros(6, 12);
        for r in 0..6 {
            for c in 0..6 {
                w.set(r, c, half.get(r, c));
                w.set(r, c + 6, half.get(r, c));
            }
        }
        p.proj.weight = w;

        let x = frames(4, 5, 11);
        let rev =
            Tensor::from_rows(&(0..4).rev().map(|r| x.row(r).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let (e1, _) = text_utterance_encoder(&x, &p).unwrap();
        let (e2, _) = text_utterance_encoder(&rev, &p).unwrap();
        for (a, b) in e1.vector.data().iter().zip(e2.vector.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, DEFAULT_EPS};
        let mut rng = sub_rng(6, "enc-grad");
        let p: AudioEncoderParams<Tensor<f64>> = AudioEncoderParams::init(3, 4, 2, 3, &mut rng);
        let x = frames(4, 3, 13);

        let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
        p.for_each("audio", &mut |name, t: &Tensor<f64>| {
            named.push((name, t.clone()));
        });
        let shapes = p.map(|t| t.shape());
        let report = grad_check(
            &move |g: &mut Graph<f64>, v: &[Var]| {
                let mut i = 0;
                let pv = shapes.map(|_| {
                    let var = v[i];
                    i += 1;
                    var
                });
                let xv = g.input(x.clone());
                let mut ctx = ForwardCtx::eval();
                let (emb, logits) = audio_encoder_forward(g, &pv, xv, &mut ctx);
                let cat = g.concat_cols(&[emb, logits]);
                let sq = g.mul(cat, cat);
                g.sum_all(sq)
            },
            &named,
            DEFAULT_EPS,
            1e-4,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);

        let pt: TextEncoderParams<Tensor<f64>> = TextEncoderParams::init(6, 4, 2, &mut rng);
        let xt = frames(4, 6, 17);
        let mut named_t: Vec<(String, Tensor<f64>)> = Vec::new();
        pt.for_each("text", &mut |name, t: &Tensor<f64>| {
            named_t.push((name, t.clone()));
        });
        let shapes_t = pt.map(|t| t.shape());
        let report = grad_check(
            &move |g: &mut Graph<f64>, v: &[Var]| {
                let mut i = 0;
                let pv = shapes_t.map(|_| {
                    let var = v[i];
                    i += 1;
                    var
                });
                let xv = g.input(xt.clone());
                let mut ctx = ForwardCtx::eval();
                let (emb, logits) = text_encoder_forward(g, &pv, xv, &mut ctx);
                let cat = g.concat_cols(&[emb, logits]);
                let sq = g.mul(cat, cat);
                g.sum_all(sq)
            },
            &named_t,
            DEFAULT_EPS,
            1e-4,
        );
        assert!(report.passed(), "text max rel err {}", report.max_rel_err);
    }
}
