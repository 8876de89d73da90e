//! Semantic-shift diagnostics between an initial and a fine-tuned checkpoint.
//!
//! For each sample the pooled visual embedding `V` is compared with the
//! class word's embedding row `L` by cosine, and the probability of the class
//! word at the answer slot is read from the LM head. Both are reported as
//! relative changes from the initial checkpoint.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, PromptMode, ANSWER_PREFIX};
use crate::distortion::DistortionClass;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{encode_image, label_embedding, next_token_logits, pooled_visual_embedding, project, Float, Parameters};
use crate::parallel;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

pub fn cosine(v: &[f64], l: &[f64]) -> Result<f64> {
    if v.len() != l.len() {
        return Err(Error::domain(format!("cosine of vectors with lengths {} and {}", v.len(), l.len())));
    }
    let dot: f64 = v.iter().zip(l).map(|(a, b)| a * b).sum();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nl = l.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nv == 0.0 || nl == 0.0 {
        return Err(Error::domain("cosine of a zero vector"));
    }
    Ok((dot / (nv * nl)).clamp(-1.0, 1.0))
}

/// `(after - before) / |before|`, or `None` when `|before| <= tolerance`.
pub fn relative_shift(after: f64, before: f64, tolerance: f64) -> Option<f64> {
    (before.abs() > tolerance).then(|| (after - before) / before.abs())
}

/// Token ids conditioning the class-word slot: `<bos> prompt answer-prefix`.
pub fn slot_context<T: Float>(params: &Parameters<T>) -> Result<Vec<u32>> {
    let vocab = &params.config().vocab;
    let mut ids = vec![vocab.bos()?];
    ids.extend(vocab.tokenize(&render_prompt(PromptMode::Finetune)));
    ids.extend(vocab.tokenize(ANSWER_PREFIX));
    Ok(ids)
}

/// Softmax over the vocabulary at the class-word slot, in f64.
pub fn slot_distribution<T: Float>(params: &Parameters<T>, img: &RgbImage) -> Result<(Array1<f64>, Array1<f64>)> {
    let visual = project(params, &encode_image(params, img)?)?;
    let logits = next_token_logits(params, &visual, &slot_context(params)?)?.mapv(|x| x.to_f64().unwrap_or(f64::NAN));
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.mapv(|x| (x - max).exp());
    let probs = &exp / exp.sum();
    Ok((probs, logits))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelReading {
    pub probability: f64,
    pub raw_logit: f64,
}

pub fn label_probability<T: Float>(params: &Parameters<T>, img: &RgbImage, class: DistortionClass) -> Result<LabelReading> {
    let id = params.config().vocab.class_id(class)? as usize;
    let (probs, logits) = slot_distribution(params, img)?;
    Ok(LabelReading {
        probability: probs[id],
        raw_logit: logits[id],
    })
}

/// Which embedding table supplies `L` for the tuned side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Each checkpoint's own embedding row.
    #[default]
    Evaluated,
    /// The initial checkpoint's row for both sides.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub tolerance: f64,
    pub label_source: LabelSource,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            label_source: LabelSource::Evaluated,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config(format!("probe.tolerance must be a finite non-negative number, got {}", self.tolerance)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub sample_id: String,
    pub class: DistortionClass,
    pub cos_init: f64,
    pub cos_tuned: f64,
    pub p_init: f64,
    pub p_tuned: f64,
    pub raw_logit_init: f64,
    pub raw_logit_tuned: f64,
    pub similarity_shift: f64,
    pub logit_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub count: usize,
    pub mean_similarity_shift: f64,
    pub mean_logit_shift: f64,
    pub positive_similarity_fraction: f64,
    pub positive_logit_fraction: f64,
}

impl ShiftSummary {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a ProbeRecord>) -> Self {
        let mut s = Self::default();
        let (mut sim, mut logit, mut pos_sim, mut pos_logit) = (0.0, 0.0, 0usize, 0usize);
        for r in records {
            s.count += 1;
            sim += r.similarity_shift;
            logit += r.logit_shift;
            pos_sim += usize::from(r.similarity_shift > 0.0);
            pos_logit += usize::from(r.logit_shift > 0.0);
        }
        if s.count > 0 {
            let n = s.count as f64;
            s.mean_similarity_shift = sim / n;
            s.mean_logit_shift = logit / n;
            s.positive_similarity_fraction = pos_sim as f64 / n;
            s.positive_logit_fraction = pos_logit as f64 / n;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeAggregate {
    /// Means over samples.
    pub overall: ShiftSummary,
    /// Unweighted means of the per-class means.
    pub class_mean_similarity_shift: f64,
    pub class_mean_logit_shift: f64,
    pub per_class: BTreeMap<DistortionClass, ShiftSummary>,
    pub excluded: usize,
}

impl ProbeAggregate {
    pub fn from_records(records: &[ProbeRecord], excluded: usize) -> Self {
        let mut per_class = BTreeMap::new();
        for class in DistortionClass::ALL {
            let s = ShiftSummary::of(records.iter().filter(|r| r.class == class));
            if s.count > 0 {
                per_class.insert(class, s);
            }
        }
        let k = per_class.len().max(1) as f64;
        Self {
            overall: ShiftSummary::of(records),
            class_mean_similarity_shift: per_class.values().map(|s| s.mean_similarity_shift).sum::<f64>() / k,
            class_mean_logit_shift: per_class.values().map(|s| s.mean_logit_shift).sum::<f64>() / k,
            per_class,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Text preceding the class-word slot when reading `p`.
    pub conditioning: String,
    pub label_source: LabelSource,
    pub tolerance: f64,
    pub aggregate: ProbeAggregate,
    pub records: Vec<ProbeRecord>,
}

struct Reading {
    cos: Option<f64>,
    label: LabelReading,
}

fn to_f64<T: Float>(a: &Array1<T>) -> Vec<f64> {
    a.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

fn read<T: Float>(params: &Parameters<T>, label_table: &Parameters<T>, img: &RgbImage, class: DistortionClass) -> Result<Reading> {
    let v = to_f64(&pooled_visual_embedding(params, img)?);
    let l = to_f64(&label_embedding(label_table, class)?);
    Ok(Reading {
        // A zero vector leaves the cosine undefined; the sample is excluded.
        cos: cosine(&v, &l).ok(),
        label: label_probability(params, img, class)?,
    })
}

/// Probes every `(id, image, class)` sample against both checkpoints.
pub fn probe_pair<T: Float>(
    init: &Parameters<T>,
    tuned: &Parameters<T>,
    samples: &[(String, RgbImage, DistortionClass)],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    config.validate()?;
    if init.config() != tuned.config() {
        return Err(Error::domain("probed checkpoints have different model configurations"));
    }
    let label_table = match config.label_source {
        LabelSource::Evaluated => tuned,
        LabelSource::Initial => init,
    };
    let tol = config.tolerance;
    let results: Vec<Result<Option<ProbeRecord>>> = parallel::install(|| {
        samples
            .par_iter()
            .map(|(id, img, class)| {
                let before = read(init, init, img, *class)?;
                let after = read(tuned, label_table, img, *class)?;
                let (Some(cos_init), Some(cos_tuned)) = (before.cos, after.cos) else {
                    return Ok(None);
                };
                let sim = relative_shift(cos_tuned, cos_init, tol);
                let logit = relative_shift(after.label.probability, before.label.probability, tol);
                Ok(sim.zip(logit).map(|(similarity_shift, logit_shift)| ProbeRecord {
                    sample_id: id.clone(),
                    class: *class,
                    cos_init,
                    cos_tuned,
                    p_init: before.label.probability,
                    p_tuned: after.label.probability,
                    raw_logit_init: before.label.raw_logit,
                    raw_logit_tuned: after.label.raw_logit,
                    similarity_shift,
                    logit_shift,
                }))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(rec) => records.push(rec),
            None => excluded += 1,
        }
    }
    Ok(ProbeReport {
        conditioning: format!("<image> <bos> {} {}", render_prompt(PromptMode::Finetune), ANSWER_PREFIX.to_lowercase()),
        label_source: config.label_source,
        tolerance: tol,
        aggregate: ProbeAggregate::from_records(&records, excluded),
        records,
    })
}

/// Long-format `(sample_id, phase, cosine, probability, raw_logit)` table, two rows per record.
pub fn joint_distribution_csv(records: &[ProbeRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::domain("no probe records to export"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "phase", "cosine", "probability", "raw_logit"])?;
    for r in records {
        for (phase, cos, p, logit) in [
            ("before", r.cos_init, r.p_init, r.raw_logit_init),
            ("after", r.cos_tuned, r.p_tuned, r.raw_logit_tuned),
        ] {
            w.write_record([r.sample_id.clone(), phase.to_string(), cos.to_string(), p.to_string(), logit.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::validation(format!("csv encoding: {e}")))
}
