//! Closed-set distortion classification: answer parsing, confusion matrices,
//! accuracy and the component-activation sweep.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, PromptMode};
use crate::distortion::DistortionClass;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{generate, ComponentMask, Float, LmActivation, Parameters};
use crate::parallel;
use crate::train::{train, TrainConfig};

/// Generation budget; covers the answer template with margin.
pub const MAX_NEW_TOKENS: usize = 16;

/// The single class word named in `text`, or `None` when it names zero or
/// several distinct classes.
pub fn parse_answer(text: &str) -> Option<DistortionClass> {
    let lower = text.to_lowercase();
    let found: BTreeSet<DistortionClass> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter_map(DistortionClass::from_word)
        .collect();
    match found.len() {
        1 => found.into_iter().next(),
        _ => None,
    }
}

pub const UNPARSEABLE: &str = "Unparseable";

/// Rows are true classes and columns predicted classes, both in
/// [`DistortionClass::ALL`] order, plus a final unparseable column.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 9]; 8],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: DistortionClass, predicted: Option<DistortionClass>) {
        let col = predicted.map_or(8, DistortionClass::index);
        self.counts[truth.index()][col] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, class: DistortionClass) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn unparseable(&self) -> u64 {
        self.counts.iter().map(|r| r[8]).sum()
    }

    pub fn recall(&self, class: DistortionClass) -> Option<f64> {
        let row = self.row_total(class);
        (row > 0).then(|| self.counts[class.index()][class.index()] as f64 / row as f64)
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = DistortionClass::ALL.iter().map(|c| c.title()).chain([UNPARSEABLE]).collect();
        let mut out = format!("true\\predicted,{}\n", names.join(","));
        for class in DistortionClass::ALL {
            let cells: Vec<String> = self.counts[class.index()].iter().map(u64::to_string).collect();
            out.push_str(&format!("{},{}\n", class.title(), cells.join(",")));
        }
        out
    }
}

/// Diagonal mass over total; unparseable answers always count as wrong.
pub fn accuracy(matrix: &ConfusionMatrix) -> Result<f64> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::domain("confusion matrix is empty"));
    }
    let diag: u64 = (0..8).map(|i| matrix.counts[i][i]).sum();
    Ok(diag as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub prompt_mode: PromptMode,
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_recall: BTreeMap<DistortionClass, f64>,
    pub unparseable: u64,
    pub matrix: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_matrix(checkpoint: &str, prompt_mode: PromptMode, matrix: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            checkpoint: checkpoint.to_string(),
            prompt_mode,
            samples: matrix.total() as usize,
            accuracy: accuracy(&matrix)?,
            per_class_recall: DistortionClass::ALL
                .into_iter()
                .filter_map(|c| matrix.recall(c).map(|r| (c, r)))
                .collect(),
            unparseable: matrix.unparseable(),
            matrix,
        })
    }
}

/// Per-sample generated answers, in input order.
pub fn generate_answers<T: Float>(params: &Parameters<T>, images: &[&RgbImage], mode: PromptMode) -> Result<Vec<String>> {
    let prompt = render_prompt(mode);
    parallel::install(|| {
        images
            .par_iter()
            .map(|img| generate(params, img, &prompt, MAX_NEW_TOKENS))
            .collect()
    })
}

pub fn evaluate<T: Float>(
    params: &Parameters<T>,
    data: &[(RgbImage, DistortionClass)],
    mode: PromptMode,
    checkpoint: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::domain("test split is empty"));
    }
    let images: Vec<&RgbImage> = data.iter().map(|(img, _)| img).collect();
    let answers = generate_answers(params, &images, mode)?;
    let mut matrix = ConfusionMatrix::default();
    for ((_, truth), answer) in data.iter().zip(&answers) {
        matrix.record(*truth, parse_answer(answer));
    }
    EvalReport::from_matrix(checkpoint, mode, matrix)
}

/// One row of the activation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepArm {
    pub name: String,
    /// `None` for the untrained baseline.
    pub mask: Option<ComponentMask>,
}

/// The six fine-tuning arms followed by the untrained baseline.
pub fn standard_arms() -> Vec<SweepArm> {
    let arm = |encoder, projector, lm| {
        let mask = ComponentMask { encoder, projector, lm };
        SweepArm {
            name: mask.label(),
            mask: Some(mask),
        }
    };
    vec![
        arm(true, false, LmActivation::None),
        arm(false, true, LmActivation::None),
        arm(false, false, LmActivation::Full),
        arm(true, true, LmActivation::None),
        arm(true, false, LmActivation::Partial(1)),
        arm(false, true, LmActivation::Full),
        SweepArm {
            name: "baseline".into(),
            mask: None,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct ArmOutcome<T> {
    pub arm: SweepArm,
    /// Trained parameters (the init itself for the baseline); `None` if training failed.
    pub params: Option<Parameters<T>>,
    pub losses: Vec<f64>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: String,
    pub encoder: bool,
    pub projector: bool,
    pub lm: String,
    pub prompt_mode: PromptMode,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

impl<T> ArmOutcome<T> {
    pub fn row(&self) -> SweepRow {
        let (encoder, projector, lm) = match self.arm.mask {
            Some(m) => (
                m.encoder,
                m.projector,
                match m.lm {
                    LmActivation::None => "-".to_string(),
                    LmActivation::Full => "full".to_string(),
                    LmActivation::Partial(k) => format!("partial({k})"),
                },
            ),
            None => (false, false, "-".to_string()),
        };
        SweepRow {
            arm: self.arm.name.clone(),
            encoder,
            projector,
            lm,
            prompt_mode: self.report.as_ref().map_or(arm_prompt(&self.arm), |r| r.prompt_mode),
            accuracy: self.report.as_ref().map(|r| r.accuracy),
            error: self.error.clone(),
        }
    }
}

/// Trained arms are asked with the training prompt, the baseline with the options suffix.
pub fn arm_prompt(arm: &SweepArm) -> PromptMode {
    if arm.mask.is_some() {
        PromptMode::Finetune
    } else {
        PromptMode::BaselineOptions
    }
}

/// Trains every arm from the same `init` and evaluates it on `test`.
/// A failing arm records its error; the remaining arms still run.
pub fn sweep_activation_arms<T: Float>(
    train_data: &[(RgbImage, DistortionClass)],
    test_data: &[(RgbImage, DistortionClass)],
    base_config: &TrainConfig,
    init: &Parameters<T>,
    arms: &[SweepArm],
) -> Vec<ArmOutcome<T>> {
    arms.iter()
        .map(|arm| {
            let trained = match arm.mask {
                None => Ok((init.clone(), Vec::new())),
                Some(mask) => {
                    let cfg = TrainConfig {
                        mask,
                        ..base_config.clone()
                    };
                    train(train_data, &cfg, init).map(|o| (o.params, o.losses))
                }
            };
            let evaluated = trained.and_then(|(params, losses)| {
                let report = evaluate(&params, test_data, arm_prompt(arm), &arm.name)?;
                Ok((params, losses, report))
            });
            match evaluated {
                Ok((params, losses, report)) => ArmOutcome {
                    arm: arm.clone(),
                    params: Some(params),
                    losses,
                    report: Some(report),
                    error: None,
                },
                Err(e) => ArmOutcome {
                    arm: arm.clone(),
                    params: None,
                    losses: Vec::new(),
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("arm,encoder,projector,lm,prompt_mode,accuracy,error\n");
    for r in rows {
        let mode = match r.prompt_mode {
            PromptMode::Finetune => "finetune",
            PromptMode::BaselineOptions => "baseline-options",
        };
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{},\"{}\"\n",
            r.arm,
            r.encoder,
            r.projector,
            r.lm,
            mode,
            r.accuracy.map_or(String::new(), |a| format!("{a:.6}")),
            r.error.clone().unwrap_or_default().replace('"', "'")
        ));
    }
    out
}
