//! Staged inference ensembling and validation-driven weight search.
//!
//! Stage 2 inference blends each modality's contextual softmax output with
//! its stage-1 output: `y_m2 = alpha * p_m2 + (1 - alpha) * p_m1`. Stage 3
//! blends the fused model with both ensembled stage-2 outputs:
//! `y = alpha_c * p_c + alpha_a * y_a2 + alpha_t * y_t2`, with the triple
//! canonicalized to the probability simplex (scaling all three weights by
//! a positive constant never changes the argmax, so the normalization is a
//! canonicalization rather than a behavioral choice).
//!
//! Weights are picked by exhaustive grid search maximizing weighted F1 on
//! validation predictions; ties prefer the newest stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{argmax, weighted_f1};
use crate::par::{self, Threading};
use crate::Modality;

/// Identifies which model produced a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKey {
    Audio1,
    Text1,
    Audio2,
    Text2,
    Fused,
}

impl StageKey {
    pub const ALL: [StageKey; 5] = [
        StageKey::Audio1,
        StageKey::Text1,
        StageKey::Audio2,
        StageKey::Text2,
        StageKey::Fused,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKey::Audio1 => "audio1",
            StageKey::Text1 => "text1",
            StageKey::Audio2 => "audio2",
            StageKey::Text2 => "text2",
            StageKey::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<StageKey> {
        match s {
            "audio1" => Some(StageKey::Audio1),
            "text1" => Some(StageKey::Text1),
            "audio2" => Some(StageKey::Audio2),
            "text2" => Some(StageKey::Text2),
            "fused" => Some(StageKey::Fused),
            _ => None,
        }
    }

    pub fn stage1_of(m: Modality) -> StageKey {
        match m {
            Modality::Audio => StageKey::Audio1,
            Modality::Text => StageKey::Text1,
            Modality::Fused => StageKey::Fused,
        }
    }

    pub fn stage2_of(m: Modality) -> StageKey {
        match m {
            Modality::Audio => StageKey::Audio2,
            Modality::Text => StageKey::Text2,
            Modality::Fused => StageKey::Fused,
        }
    }
}

fn check_distribution(probs: &[f32], context: &str) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract(format!(
            "{context}: probabilities must be finite and non-negative"
        )));
    }
    let sum: f64 = probs.iter().map(|p| *p as f64).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Contract(format!(
            "{context}: probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Per-utterance softmax outputs of every evaluated stage.
///
/// Store file format: a `# convemo-predictions v1 classes=C` header line,
/// then one line per (utterance, stage):
/// `utterance_id<TAB>stage_key<TAB>p0<TAB>p1<TAB>...`.
#[derive(Debug, Clone)]
pub struct StagePredictions {
    pub num_classes: usize,
    rows: BTreeMap<String, BTreeMap<StageKey, Vec<f32>>>,
}

impl StagePredictions {
    pub fn new(num_classes: usize) -> Self {
        StagePredictions {
            num_classes,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, utterance_id: &str, key: StageKey, probs: Vec<f32>) -> Result<()> {
        if probs.len() != self.num_classes {
            return Err(Error::Shape {
                context: format!("predictions for `{utterance_id}`"),
                expected: vec![self.num_classes],
                got: vec![probs.len()],
            });
        }
        check_distribution(&probs, &format!("{utterance_id}/{}", key.as_str()))?;
        self.rows
            .entry(utterance_id.to_string())
            .or_default()
            .insert(key, probs);
        Ok(())
    }

    pub fn get(&self, utterance_id: &str, key: StageKey) -> Option<&[f32]> {
        self.rows
            .get(utterance_id)
            .and_then(|m| m.get(&key))
            .map(|v| v.as_slice())
    }

    pub fn require(&self, utterance_id: &str, key: StageKey) -> Result<&[f32]> {
        self.get(utterance_id, key).ok_or_else(|| {
            Error::Contract(format!(
                "missing {} prediction for utterance `{utterance_id}`",
                key.as_str()
            ))
        })
    }

    pub fn utterance_ids(&self) -> Vec<&str> {
        self.rows.keys().map(|s| s.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("# convemo-predictions v1 classes={}\n", self.num_classes);
        for (utt, stages) in &self.rows {
            for (key, probs) in stages {
                out.push_str(utt);
                out.push('\t');
                out.push_str(key.as_str());
                for p in probs {
                    out.push('\t');
                    out.push_str(&format!("{p}"));
                }
                out.push('\n');
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::ManifestParse {
            line: 1,
            detail: "empty prediction store".into(),
        })?;
        let classes = header
            .strip_prefix("# convemo-predictions v1 classes=")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::ManifestParse {
                line: 1,
                detail: format!("bad prediction store header `{header}`"),
            })?;
        let mut store = StagePredictions::new(classes);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 + classes {
                return Err(Error::ManifestParse {
                    line: idx + 1,
                    detail: format!("expected {} fields, got {}", 2 + classes, fields.len()),
                });
            }
            let key = StageKey::parse(fields[1]).ok_or_else(|| Error::ManifestParse {
                line: idx + 1,
                detail: format!("unknown stage key `{}`", fields[1]),
            })?;
            let probs: Vec<f32> = fields[2..]
                .iter()
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::ManifestParse {
                    line: idx + 1,
                    detail: format!("bad probability: {e}"),
                })?;
            store.insert(fields[0], key, probs)?;
        }
        Ok(store)
    }
}

/// Stage-2 blend: `alpha * p2 + (1 - alpha) * p1`.
pub fn ensemble_stage2(p2: &[f32], p1: &[f32], alpha: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0,1], got {alpha}")));
    }
    if p1.len() != p2.len() {
        return Err(Error::Shape {
            context: "ensemble_stage2".into(),
            expected: vec![p2.len()],
            got: vec![p1.len()],
        });
    }
    check_distribution(p1, "ensemble_stage2 p1")?;
    check_distribution(p2, "ensemble_stage2 p2")?;
    Ok(p2
        .iter()
        .zip(p1.iter())
        .map(|(a, b)| (alpha * *a as f64 + (1.0 - alpha) * *b as f64) as f32)
        .collect())
}

/// Weights of the staged ensemble. The stage-3 triple lives on the
/// probability simplex.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnsembleWeights {
    pub alpha_audio_12: f64,
    pub alpha_text_12: f64,
    pub alpha_fused: f64,
    pub alpha_audio_23: f64,
    pub alpha_text_23: f64,
}

impl EnsembleWeights {
    /// Pure current-stage weights: stage 2 and 3 outputs used alone.
    pub fn current_stage_only() -> Self {
        EnsembleWeights {
            alpha_audio_12: 1.0,
            alpha_text_12: 1.0,
            alpha_fused: 1.0,
            alpha_audio_23: 0.0,
            alpha_text_23: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_audio_12", self.alpha_audio_12),
            ("alpha_text_12", self.alpha_text_12),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        let triple = [self.alpha_fused, self.alpha_audio_23, self.alpha_text_23];
        if triple.iter().any(|v| *v < 0.0) {
            return Err(Error::Config("stage-3 weights must be non-negative".into()));
        }
        let sum: f64 = triple.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "stage-3 weights must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Stage-3 blend per the simplex-constrained triple.
pub fn ensemble_stage3(
    p_fused: &[f32],
    y_audio2: &[f32],
    y_text2: &[f32],
    weights: &EnsembleWeights,
) -> Result<Vec<f32>> {
    weights.validate()?;
    if y_audio2.len() != p_fused.len() || y_text2.len() != p_fused.len() {
        return Err(Error::Shape {
            context: "ensemble_stage3".into(),
            expected: vec![p_fused.len()],
            got: vec![y_audio2.len(), y_text2.len()],
        });
    }
    check_distribution(p_fused, "ensemble_stage3 p_fused")?;
    check_distribution(y_audio2, "ensemble_stage3 y_audio2")?;
    check_distribution(y_text2, "ensemble_stage3 y_text2")?;
    Ok((0..p_fused.len())
        .map(|i| {
            (weights.alpha_fused * p_fused[i] as f64
                + weights.alpha_audio_23 * y_audio2[i] as f64
                + weights.alpha_text_23 * y_text2[i] as f64) as f32
        })
        .collect())
}

/// Final ensembled distribution for one utterance.
pub fn ensembled_distribution(
    preds: &StagePredictions,
    utterance_id: &str,
    weights: &EnsembleWeights,
) -> Result<Vec<f32>> {
    let y_a2 = ensemble_stage2(
        preds.require(utterance_id, StageKey::Audio2)?,
        preds.require(utterance_id, StageKey::Audio1)?,
        weights.alpha_audio_12,
    )?;
    let y_t2 = ensemble_stage2(
        preds.require(utterance_id, StageKey::Text2)?,
        preds.require(utterance_id, StageKey::Text1)?,
        weights.alpha_text_12,
    )?;
    ensemble_stage3(
        preds.require(utterance_id, StageKey::Fused)?,
        &y_a2,
        &y_t2,
        weights,
    )
}

/// One evaluated point of a search curve.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub alpha: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct SearchReport {
    pub weights: EnsembleWeights,
    pub best_val_f1: f64,
    /// F1 as a function of the stage-2 audio alpha (text fixed at best).
    pub audio_curve: Vec<CurvePoint>,
    pub text_curve: Vec<CurvePoint>,
    /// Evaluated stage-3 simplex cells `(alpha_fused, alpha_audio, alpha_text, f1)`.
    pub stage3_cells: Vec<(f64, f64, f64, f64)>,
}

fn grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| (i as f64 * step).min(1.0)).collect()
}

fn f1_of_labels(
    ids: &[&str],
    labels: &BTreeMap<String, usize>,
    predicted: &[usize],
) -> Result<f64> {
    let truth: Vec<usize> = ids.iter().map(|id| labels[*id]).collect();
    weighted_f1(predicted, &truth)
}

/// Exhaustive grid search over the stage-2 alphas and the stage-3 simplex,
/// maximizing validation weighted F1. Ties prefer the larger
/// current-stage weight (newest stage first).
pub fn search_ensemble_weights(
    preds: &StagePredictions,
    labels: &BTreeMap<String, usize>,
    grid_step: f64,
) -> Result<SearchReport> {
    search_ensemble_weights_with(Threading::default(), preds, labels, grid_step)
}

pub fn search_ensemble_weights_with(
    threading: Threading,
    preds: &StagePredictions,
    labels: &BTreeMap<String, usize>,
    grid_step: f64,
) -> Result<SearchReport> {
    if preds.is_empty() || labels.is_empty() {
        return Err(Error::EmptySplit("validation predictions".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Config(format!("bad grid step {grid_step}")));
    }
    let ids: Vec<&str> = preds.utterance_ids();
    for id in &ids {
        if !labels.contains_key(*id) {
            return Err(Error::Contract(format!("no validation label for `{id}`")));
        }
    }
    let alphas = grid(grid_step);

    // Stage-2 searches, one modality at a time.
    let stage2_curve = |m: Modality| -> Result<Vec<CurvePoint>> {
        let points = par::map(threading, &alphas, |&alpha| {
            let predicted: Result<Vec<usize>> = ids
                .iter()
                .map(|id| {
                    let p2 = preds.require(id, StageKey::stage2_of(m))?;
                    let p1 = preds.require(id, StageKey::stage1_of(m))?;
                    Ok(argmax(&ensemble_stage2(p2, p1, alpha)?))
                })
                .collect();
            predicted.and_then(|p| f1_of_labels(&ids, labels, &p)).map(|f1| CurvePoint { alpha, f1 })
        });
        points.into_iter().collect()
    };
    let audio_curve = stage2_curve(Modality::Audio)?;
    let text_curve = stage2_curve(Modality::Text)?;

    // larger alpha wins ties: scan with >=
    let best_alpha = |curve: &[CurvePoint]| {
        let mut best = &curve[0];
        for p in curve {
            if p.f1 >= best.f1 {
                best = p;
            }
        }
        best.alpha
    };
    let alpha_audio_12 = best_alpha(&audio_curve);
    let alpha_text_12 = best_alpha(&text_curve);

    // Pre-blend stage-2 outputs at the chosen alphas.
    let blended: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = ids
        .iter()
        .map(|id| {
            let y_a2 = ensemble_stage2(
                preds.require(id, StageKey::Audio2)?,
                preds.require(id, StageKey::Audio1)?,
                alpha_audio_12,
            )?;
            let y_t2 = ensemble_stage2(
                preds.require(id, StageKey::Text2)?,
                preds.require(id, StageKey::Text1)?,
                alpha_text_12,
            )?;
            let p_c = preds.require(id, StageKey::Fused)?.to_vec();
            Ok((p_c, y_a2, y_t2))
        })
        .collect::<Result<_>>()?;

    // Stage-3 simplex cells.
    let mut cells_in: Vec<(f64, f64, f64)> = Vec::new();
    for &ac in &alphas {
        for &aa in &alphas {
            let at = 1.0 - ac - aa;
            if at >= -1e-12 {
                cells_in.push((ac, aa, at.max(0.0)));
            }
        }
    }
    let cells: Vec<(f64, f64, f64, f64)> = par::map(threading, &cells_in, |&(ac, aa, at)| {
        let w = EnsembleWeights {
            alpha_audio_12,
            alpha_text_12,
            alpha_fused: ac,
            alpha_audio_23: aa,
            alpha_text_23: at,
        };
        let predicted: Vec<usize> = blended
            .iter()
            .map(|(p_c, y_a2, y_t2)| {
                argmax(&ensemble_stage3(p_c, y_a2, y_t2, &w).expect("validated inputs"))
            })
            .collect();
        let f1 = f1_of_labels(&ids, labels, &predicted).expect("lengths match");
        (ac, aa, at, f1)
    });

    // prefer larger alpha_fused, then larger alpha_audio_23 on ties
    let mut best = cells[0];
    for &c in &cells {
        let better = c.3 > best.3
            || (c.3 == best.3 && (c.0 > best.0 || (c.0 == best.0 && c.1 > best.1)));
        if better {
            best = c;
        }
    }
    let weights = EnsembleWeights {
        alpha_audio_12,
        alpha_text_12,
        alpha_fused: best.0,
        alpha_audio_23: best.1,
        alpha_text_23: best.2,
    };
    weights.validate()?;
    Ok(SearchReport {
        weights,
        best_val_f1: best.3,
        audio_curve,
        text_curve,
        stage3_cells: cells,
    })
}
