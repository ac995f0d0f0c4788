//! Synthetic datasets with analytically known Bayes accuracies.
//!
//! Four regimes, all driven by per-utterance latent states:
//!
//! * `context_free` — every utterance's label is its own latent state, and
//!   both modalities encode it. Anything works; a sanity regime.
//! * `context_dependent` — latent states follow a Markov chain over the
//!   conversation (sharpness = `stay_prob`) and the label of utterance `i`
//!   is the majority vote over the latent states in the clamped window
//!   `i-w ..= i+w` (ties toward the smallest class id). A single utterance
//!   reveals only its own latent, so context-free models are capped by an
//!   enumerable Bayes bound while contextual models are not.
//! * `complementary_modality` — labels are i.i.d.; the audio pattern
//!   encodes `label / 2` and the text pattern `label % 2`, so each
//!   modality alone caps well below the joint.
//! * `composite` — the Markov/window rule of `context_dependent` with the
//!   bit split of `complementary_modality` applied to the latent state:
//!   context and fusion are both required.
//!
//! Emissions are class patterns plus white noise, repeated over a random
//! number of frames per utterance. The sidecar (`meta.toml`) records the
//! enumerated Bayes accuracies, which assume the emission noise is small
//! enough that an utterance's latent component is recoverable; the bounds
//! are exact in the noise-free limit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::embfile::write_embedding_file;
use crate::data::manifest::{write_manifest, Split};
use crate::error::{Error, Result};
use crate::init::sub_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ContextFree,
    ContextDependent,
    ComplementaryModality,
    Composite,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::ContextFree => "context_free",
            Regime::ContextDependent => "context_dependent",
            Regime::ComplementaryModality => "complementary_modality",
            Regime::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "context_free" => Some(Regime::ContextFree),
            "context_dependent" => Some(Regime::ContextDependent),
            "complementary_modality" => Some(Regime::ComplementaryModality),
            "composite" => Some(Regime::Composite),
            _ => None,
        }
    }
}

fn default_window() -> usize {
    1
}
fn default_stay() -> f64 {
    0.35
}
fn one() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.25
}
fn default_frames_min() -> usize {
    4
}
fn default_frames_max() -> usize {
    9
}
fn default_train_frac() -> f64 {
    0.7
}
fn default_val_frac() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub regime: Regime,
    pub num_conversations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub d_audio: usize,
    pub d_text: usize,
    /// Neighbors on each side entering the label rule.
    #[serde(default = "default_window")]
    pub context_window: usize,
    /// Probability the latent chain repeats the previous state.
    #[serde(default = "default_stay")]
    pub stay_prob: f64,
    /// Emission pattern scale per modality.
    #[serde(default = "one")]
    pub audio_scale: f64,
    #[serde(default = "one")]
    pub text_scale: f64,
    /// White-noise standard deviation added to every frame.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_frames_min")]
    pub frames_min: usize,
    #[serde(default = "default_frames_max")]
    pub frames_max: usize,
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.num_conversations >= 3
            && self.min_len >= 1
            && self.min_len <= self.max_len
            && self.num_classes >= 2
            && self.d_audio >= 1
            && self.d_text >= 1
            && self.context_window >= 1
            && self.stay_prob > 0.0
            && self.stay_prob < 1.0
            && self.noise >= 0.0
            && self.frames_min >= 1
            && self.frames_min <= self.frames_max
            && self.train_frac > 0.0
            && self.val_frac > 0.0
            && self.train_frac + self.val_frac < 1.0;
        if !ok {
            return Err(Error::Config("invalid synthetic dataset spec".into()));
        }
        Ok(())
    }
}

/// Enumerated performance ceilings recorded with each dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesSummary {
    /// Best accuracy achievable from one utterance's own latent
    /// information (both modalities together).
    pub single_utterance: f64,
    /// Context-free per-modality ceilings, where exactly enumerable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio_only: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_only: Option<f64>,
    /// Ceiling given every latent state and both modalities.
    pub joint_full_context: f64,
    pub class_priors: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub regime: Regime,
    pub seed: u64,
    pub num_conversations: usize,
    pub num_classes: usize,
    pub context_window: usize,
    pub stay_prob: f64,
    pub noise: f64,
    pub bayes: BayesSummary,
}

// ── Label rule ──────────────────────────────────────────────────────────

/// Majority vote with ties toward the smallest class id.
fn majority(values: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &v in values {
        counts[v] += 1;
    }
    let mut best = 0;
    for y in 1..num_classes {
        if counts[y] > counts[best] {
            best = y;
        }
    }
    best
}

/// Label of position `i` under the clamped-window majority rule.
fn window_label(states: &[usize], i: usize, w: usize, num_classes: usize) -> usize {
    let lo = i.saturating_sub(w);
    let hi = (i + w).min(states.len() - 1);
    majority(&states[lo..=hi], num_classes)
}

fn hi_component(state: usize) -> usize {
    state / 2
}

fn lo_component(state: usize) -> usize {
    state % 2
}

// ── Exact enumeration ───────────────────────────────────────────────────

fn transition_row(c: usize, stay: f64, from: usize) -> Vec<f64> {
    (0..c)
        .map(|to| if to == from { stay } else { (1.0 - stay) / (c - 1) as f64 })
        .collect()
}

/// Iterate all `len`-tuples over `0..c`, chained outward from `anchor`,
/// yielding `(tuple, probability)`. The first element is adjacent to the
/// anchor.
fn arm_tuples(c: usize, stay: f64, anchor: usize, len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut result = vec![(Vec::new(), 1.0f64)];
    let mut prev_anchor = vec![anchor];
    for _ in 0..len {
        let mut next = Vec::with_capacity(result.len() * c);
        let mut next_anchor = Vec::with_capacity(result.len() * c);
        for ((tuple, p), &last) in result.iter().zip(prev_anchor.iter()) {
            let row = transition_row(c, stay, last);
            for s in 0..c {
                let mut t = tuple.clone();
                t.push(s);
                next.push((t, p * row[s]));
                next_anchor.push(s);
            }
        }
        result = next;
        prev_anchor = next_anchor;
    }
    result
}

/// Joint distribution `P(center = s, label = y)` for a position with
/// `left` states before it and `right` after it inside the label window.
fn center_label_joint(c: usize, stay: f64, left: usize, right: usize) -> Vec<Vec<f64>> {
    let mut joint = vec![vec![0.0f64; c]; c];
    let prior = 1.0 / c as f64;
    for s in 0..c {
        for (ltuple, lp) in arm_tuples(c, stay, s, left) {
            for (rtuple, rp) in arm_tuples(c, stay, s, right) {
                // window in conversation order
                let mut window = Vec::with_capacity(left + right + 1);
                window.extend(ltuple.iter().rev());
                window.push(s);
                window.extend(rtuple.iter());
                let y = majority(&window, c);
                joint[s][y] += prior * lp * rp;
            }
        }
    }
    joint
}

/// Exact single-utterance Bayes accuracy for the window-majority rule,
/// averaged over utterance positions and conversation lengths (uniform on
/// `min_len..=max_len`). Also returns the induced class priors.
///
/// The observer sees the utterance's own latent state; the label depends
/// on the neighbors, which are only correlated with it through the chain.
pub fn bayes_single_utterance(
    num_classes: usize,
    window: usize,
    stay_prob: f64,
    min_len: usize,
    max_len: usize,
) -> (f64, Vec<f64>) {
    let mut cache: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let mut acc_sum = 0.0;
    let mut prior_sum = vec![0.0f64; num_classes];
    let mut utterances = 0usize;
    for len in min_len..=max_len {
        for i in 0..len {
            let left = i.min(window);
            let right = (len - 1 - i).min(window);
            let joint = cache
                .entry((left, right))
                .or_insert_with(|| center_label_joint(num_classes, stay_prob, left, right));
            for s in 0..num_classes {
                let best = joint[s].iter().cloned().fold(0.0f64, f64::max);
                acc_sum += best;
            }
            for s in 0..num_classes {
                for y in 0..num_classes {
                    prior_sum[y] += joint[s][y];
                }
            }
        }
        utterances += len;
    }
    let n = utterances as f64;
    (acc_sum / n, prior_sum.iter().map(|p| p / n).collect())
}

/// Context-free per-modality ceiling when a modality reveals only one
/// component of an i.i.d. uniform label: the fraction of label mass the
/// component pins down.
pub fn bayes_modality_marginal(num_classes: usize, component: fn(usize) -> usize) -> f64 {
    let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
    for y in 0..num_classes {
        *groups.entry(component(y)).or_default() += 1;
    }
    groups.len() as f64 / num_classes as f64
}

fn bayes_summary(spec: &SyntheticSpec) -> BayesSummary {
    let c = spec.num_classes;
    let uniform = vec![1.0 / c as f64; c];
    match spec.regime {
        Regime::ContextFree => BayesSummary {
            single_utterance: 1.0,
            audio_only: Some(1.0),
            text_only: Some(1.0),
            joint_full_context: 1.0,
            class_priors: uniform,
        },
        Regime::ComplementaryModality => BayesSummary {
            single_utterance: 1.0,
            audio_only: Some(bayes_modality_marginal(c, hi_component)),
            text_only: Some(bayes_modality_marginal(c, lo_component)),
            joint_full_context: 1.0,
            class_priors: uniform,
        },
        Regime::ContextDependent | Regime::Composite => {
            let (bound, priors) = bayes_single_utterance(
                c,
                spec.context_window,
                spec.stay_prob,
                spec.min_len,
                spec.max_len,
            );
            BayesSummary {
                single_utterance: bound,
                audio_only: None,
                text_only: None,
                joint_full_context: 1.0,
                class_priors: priors,
            }
        }
    }
}

// ── Generation ──────────────────────────────────────────────────────────

fn sample_chain(rng: &mut ChaCha8Rng, c: usize, stay: f64, len: usize) -> Vec<usize> {
    let mut states = Vec::with_capacity(len);
    let mut current = rng.gen_range(0..c);
    states.push(current);
    for _ in 1..len {
        if rng.gen::<f64>() >= stay {
            // uniform over the other states
            let step = rng.gen_range(0..c - 1);
            current = if step >= current { step + 1 } else { step };
        }
        states.push(current);
    }
    states
}

fn patterns(rng: &mut ChaCha8Rng, count: usize, dim: usize, scale: f64) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| (rng.gen_range(-1.0..1.0) * scale) as f32)
                .collect()
        })
        .collect()
}

fn emit_frames(
    rng: &mut ChaCha8Rng,
    pattern: &[f32],
    frames: usize,
    noise: f64,
) -> Tensor<f32> {
    let dim = pattern.len();
    let mut data = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        for &p in pattern {
            let n: f64 = StandardNormal.sample(rng);
            data.push(p + (noise * n) as f32);
        }
    }
    Tensor::from_raw(frames, dim, data)
}

/// Number of distinct emission patterns each modality needs.
fn pattern_counts(regime: Regime, c: usize) -> (usize, usize) {
    match regime {
        Regime::ContextFree | Regime::ContextDependent => (c, c),
        Regime::ComplementaryModality | Regime::Composite => (hi_component(c - 1) + 1, 2),
    }
}

/// Which pattern index each modality emits for a latent state.
fn pattern_index(regime: Regime, state: usize) -> (usize, usize) {
    match regime {
        Regime::ContextFree | Regime::ContextDependent => (state, state),
        Regime::ComplementaryModality | Regime::Composite => {
            (hi_component(state), lo_component(state))
        }
    }
}

/// Write a complete dataset (embedding files, manifest, sidecar) under
/// `out_dir`. Pure function of `spec`: identical specs produce bitwise
/// identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetMeta> {
    spec.validate()?;
    let manifest_path = out_dir.join("manifest.tsv");
    if manifest_path.exists() {
        return Err(Error::WouldOverwrite(manifest_path));
    }
    let emb_dir = out_dir.join("emb");
    fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;

    let c = spec.num_classes;
    let (n_audio_patterns, n_text_patterns) = pattern_counts(spec.regime, c);
    let audio_patterns = patterns(
        &mut sub_rng(spec.seed, "patterns-audio"),
        n_audio_patterns,
        spec.d_audio,
        spec.audio_scale,
    );
    let text_patterns = patterns(
        &mut sub_rng(spec.seed, "patterns-text"),
        n_text_patterns,
        spec.d_text,
        spec.text_scale,
    );

    let n = spec.num_conversations;
    let n_train = ((n as f64 * spec.train_frac).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * spec.val_frac).round() as usize).clamp(1, n - n_train - 1);

    let mut rows = Vec::new();
    for ci in 0..n {
        let mut rng = sub_rng(spec.seed, &format!("conversation-{ci}"));
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let states = match spec.regime {
            Regime::ContextFree | Regime::ComplementaryModality => {
                (0..len).map(|_| rng.gen_range(0..c)).collect::<Vec<_>>()
            }
            Regime::ContextDependent | Regime::Composite => {
                sample_chain(&mut rng, c, spec.stay_prob, len)
            }
        };
        let labels: Vec<usize> = match spec.regime {
            Regime::ContextFree | Regime::ComplementaryModality => states.clone(),
            Regime::ContextDependent | Regime::Composite => (0..len)
                .map(|i| window_label(&states, i, spec.context_window, c))
                .collect(),
        };
        let split = if ci < n_train {
            Split::Train
        } else if ci < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };

        let conv_id = format!("c{ci:04}");
        for (ui, (&state, &label)) in states.iter().zip(labels.iter()).enumerate() {
            let utt_id = format!("{conv_id}_u{ui:03}");
            let (ai, ti) = pattern_index(spec.regime, state);
            let t_audio = rng.gen_range(spec.frames_min..=spec.frames_max);
            let t_text = rng.gen_range(spec.frames_min..=spec.frames_max);
            let audio = emit_frames(&mut rng, &audio_patterns[ai], t_audio, spec.noise);
            let text = emit_frames(&mut rng, &text_patterns[ti], t_text, spec.noise);
            let audio_rel = format!("emb/{utt_id}_audio.emb");
            let text_rel = format!("emb/{utt_id}_text.emb");
            write_embedding_file(&out_dir.join(&audio_rel), &audio)?;
            write_embedding_file(&out_dir.join(&text_rel), &text)?;
            rows.push((
                conv_id.clone(),
                utt_id,
                ui,
                split,
                label,
                audio_rel,
                text_rel,
            ));
        }
    }
    write_manifest(&manifest_path, &rows)?;

    let meta = DatasetMeta {
        schema_version: 1,
        regime: spec.regime,
        seed: spec.seed,
        num_conversations: n,
        num_classes: c,
        context_window: spec.context_window,
        stay_prob: spec.stay_prob,
        noise: spec.noise,
        bayes: bayes_summary(spec),
    };
    let meta_text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("failed to serialize dataset meta: {e}")))?;
    let meta_path = out_dir.join("meta.toml");
    fs::write(&meta_path, meta_text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

pub fn load_dataset_meta(out_dir: &Path) -> Result<DatasetMeta> {
    let path = out_dir.join("meta.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("bad dataset meta: {e}")))
}
