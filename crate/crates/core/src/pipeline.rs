//! File-level experiment steps shared by the command-line tool and the
//! acceptance suite. Every step reads and writes under caller-supplied
//! directories and stamps its outputs with the configuration digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint, Provenance};
use crate::config::ExperimentConfig;
use crate::corpus::{build_corpus, import_external_manifest, parse_label_map, split_corpus, Manifest, PromptMode, Split, MANIFEST_FILE};
use crate::distortion::DistortionClass;
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, standard_arms, sweep_csv, EvalReport, SweepRow};
use crate::image::RgbImage;
use crate::model::{ComponentMask, Parameters};
use crate::probe::{joint_distribution_csv, probe_pair, ProbeAggregate, ProbeReport};
use crate::train::{self, grad_check, loss_csv, GradCheckReport};

pub const CHECKPOINT_FILE: &str = "model.plab";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PROBE_FILE: &str = "probe.json";
pub const JOINT_FILE: &str = "joint.csv";
pub const SWEEP_FILE: &str = "sweep.json";
pub const TABLE_FILE: &str = "table1.csv";
pub const REPORT_FILE: &str = "report.md";
pub const CORPUS_DIR: &str = "corpus";
pub const INIT_CHECKPOINT: &str = "ckpt0";
pub const ARMS_DIR: &str = "arms";

/// JSON payload wrapped with the digest of the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_digest: String,
    #[serde(flatten)]
    pub body: T,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, digest: &str, body: &T) -> Result<()> {
    let stamped = Stamped {
        config_digest: digest.to_string(),
        body,
    };
    write(path, (serde_json::to_string_pretty(&stamped)? + "\n").as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Stamped<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// CSV body preceded by a `# config_digest=...` comment line.
fn write_csv(path: &Path, digest: &str, body: &str) -> Result<()> {
    write(path, format!("# config_digest={digest}\n{body}").as_bytes())
}

/// Strips the digest comment from a CSV produced by this module.
pub fn csv_body(text: &str) -> &str {
    match text.strip_prefix("# config_digest=") {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

pub fn manifest_digest(manifest: &Manifest) -> Result<String> {
    Ok(hex::encode(Sha256::digest(manifest.to_json()?.as_bytes())))
}

/// A checkpoint argument names either the file or a directory holding [`CHECKPOINT_FILE`].
pub fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let ck = checkpoint::load(&checkpoint_path(path))?;
    ck.expect_config(&cfg.model)?;
    Ok(ck)
}

pub fn load_manifest(corpus_dir: &Path) -> Result<Manifest> {
    Manifest::load(&corpus_dir.join(MANIFEST_FILE))
}

/// Images, labels and ids of one split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub ids: Vec<String>,
    pub samples: Vec<(RgbImage, DistortionClass)>,
}

impl SplitData {
    pub fn load(corpus_dir: &Path, manifest: &Manifest, split: Split) -> Result<Self> {
        let part = manifest.split(split);
        if part.records.is_empty() {
            return Err(Error::validation(format!("the {split:?} split is empty; run `dataset split` first")));
        }
        let images = part.load_images(corpus_dir)?;
        Ok(Self {
            ids: part.records.iter().map(|r| r.id.clone()).collect(),
            samples: images.into_iter().zip(part.records.iter().map(|r| r.class)).collect(),
        })
    }

    pub fn with_ids(&self) -> Vec<(String, RgbImage, DistortionClass)> {
        self.ids
            .iter()
            .zip(&self.samples)
            .map(|(id, (img, c))| (id.clone(), img.clone(), *c))
            .collect()
    }
}

pub fn synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let c = &cfg.corpus;
    let mut manifest = build_corpus(c.count_per_class, c.image_size, c.seed, out_dir)?;
    manifest.config_digest = Some(cfg.digest());
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn split(cfg: &ExperimentConfig, corpus_dir: &Path) -> Result<Manifest> {
    let mut manifest = split_corpus(&load_manifest(corpus_dir)?, cfg.corpus.train_fraction, cfg.corpus.split_seed)?;
    manifest.config_digest = Some(cfg.digest());
    manifest.save(&corpus_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Imports an external CSV listing, splits it and writes the manifest to `out_dir`.
pub fn import(cfg: &ExperimentConfig, csv_path: &Path, label_map: &Path, out_dir: &Path) -> Result<Manifest> {
    let map_text = fs::read_to_string(label_map).map_err(|e| Error::io(label_map, e))?;
    let imported = import_external_manifest(csv_path, &parse_label_map(&map_text)?)?;
    let mut manifest = split_corpus(&imported, cfg.corpus.train_fraction, cfg.corpus.split_seed)?;
    manifest.config_digest = Some(cfg.digest());
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes the freshly initialized model to `out`.
pub fn init(cfg: &ExperimentConfig, out: &Path) -> Result<Parameters<f32>> {
    let params = Parameters::init(&cfg.model)?;
    let prov = Provenance {
        config_digest: Some(cfg.digest()),
        ..Provenance::default()
    };
    checkpoint::save(&checkpoint_path(out), &params, &prov)?;
    Ok(params)
}

fn train_to_dir(
    cfg: &ExperimentConfig,
    data: &SplitData,
    corpus_digest: &str,
    mask: ComponentMask,
    init: &Parameters<f32>,
    out_dir: &Path,
) -> Result<(Parameters<f32>, Vec<f64>)> {
    let tc = train::TrainConfig {
        mask,
        ..cfg.train.clone()
    };
    let outcome = train::train(&data.samples, &tc, init)?;
    let digest = cfg.digest();
    let prov = Provenance {
        iterations: tc.iterations,
        train: Some(tc),
        corpus_digest: Some(corpus_digest.to_string()),
        config_digest: Some(digest.clone()),
    };
    checkpoint::save(&out_dir.join(CHECKPOINT_FILE), &outcome.params, &prov)?;
    write_csv(&out_dir.join(LOSS_FILE), &digest, &loss_csv(&outcome.losses, &mask))?;
    Ok((outcome.params, outcome.losses))
}

/// Trains from `init` (or a fresh init) on the train split; writes checkpoint and loss trace into `out_dir`.
pub fn train(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    mask: Option<ComponentMask>,
    init: Option<&Path>,
    out_dir: &Path,
) -> Result<Parameters<f32>> {
    let mask = mask.unwrap_or(cfg.train.mask);
    if !mask.any() {
        return Err(Error::Config("activation mask selects no component".into()));
    }
    let manifest = load_manifest(corpus_dir)?;
    let data = SplitData::load(corpus_dir, &manifest, Split::Train)?;
    let start = match init {
        Some(p) => load_checkpoint(p, cfg)?.params,
        None => Parameters::init(&cfg.model)?,
    };
    Ok(train_to_dir(cfg, &data, &manifest_digest(&manifest)?, mask, &start, out_dir)?.0)
}

fn write_eval(report: &EvalReport, digest: &str, out_dir: &Path) -> Result<()> {
    write_json(&out_dir.join(EVAL_FILE), digest, report)?;
    write_csv(&out_dir.join(CONFUSION_FILE), digest, &report.matrix.to_csv())
}

pub fn eval(cfg: &ExperimentConfig, corpus_dir: &Path, ckpt: &Path, mode: Option<PromptMode>, out_dir: &Path) -> Result<EvalReport> {
    let params = load_checkpoint(ckpt, cfg)?.params;
    let test = SplitData::load(corpus_dir, &load_manifest(corpus_dir)?, Split::Test)?;
    let name = ckpt.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let report = evaluate(&params, &test.samples, mode.unwrap_or(cfg.eval.prompt_mode), &name)?;
    write_eval(&report, &cfg.digest(), out_dir)?;
    Ok(report)
}

fn write_probe(report: &ProbeReport, digest: &str, out_dir: &Path) -> Result<()> {
    write_json(&out_dir.join(PROBE_FILE), digest, report)?;
    if !report.records.is_empty() {
        write_csv(&out_dir.join(JOINT_FILE), digest, &joint_distribution_csv(&report.records)?)?;
    }
    Ok(())
}

pub fn probe(cfg: &ExperimentConfig, corpus_dir: &Path, init: &Path, tuned: &Path, out_dir: &Path) -> Result<ProbeReport> {
    let a = load_checkpoint(init, cfg)?.params;
    let b = load_checkpoint(tuned, cfg)?.params;
    let test = SplitData::load(corpus_dir, &load_manifest(corpus_dir)?, Split::Test)?;
    let report = probe_pair(&a, &b, &test.with_ids(), &cfg.probe)?;
    write_probe(&report, &cfg.digest(), out_dir)?;
    Ok(report)
}

pub fn gradcheck(cfg: &ExperimentConfig, tiny: bool, n_probes: usize, seed: u64, out: &Path) -> Result<GradCheckReport> {
    let model = if tiny { crate::model::ModelConfig::tiny() } else { cfg.model.clone() };
    let report = grad_check(&model, n_probes, seed)?;
    write_json(out, &cfg.digest(), &report)?;
    Ok(report)
}

/// Directory name of an arm: its mask label with `+` between components.
pub fn arm_dir_name(arm: &str) -> String {
    arm.replace(',', "+")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub corpus_digest: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rows: Vec<SweepRow>,
    /// Probe aggregates of each trained arm against the shared init.
    pub probes: BTreeMap<String, ProbeAggregate>,
}

/// Trains and evaluates every activation arm from one shared init.
///
/// Uses the corpus at `corpus_dir` when given, otherwise synthesizes and
/// splits one under `out_dir`.
pub fn sweep(cfg: &ExperimentConfig, corpus_dir: Option<&Path>, out_dir: &Path) -> Result<SweepSummary> {
    let digest = cfg.digest();
    let corpus_dir = match corpus_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out_dir.join(CORPUS_DIR);
            synth(cfg, &d)?;
            split(cfg, &d)?;
            d
        }
    };
    let manifest = load_manifest(&corpus_dir)?;
    let corpus_digest = manifest_digest(&manifest)?;
    let train_data = SplitData::load(&corpus_dir, &manifest, Split::Train)?;
    let test_data = SplitData::load(&corpus_dir, &manifest, Split::Test)?;
    let probe_samples = test_data.with_ids();
    let init_params = init(cfg, &out_dir.join(INIT_CHECKPOINT))?;

    let mut rows = Vec::new();
    let mut probes = BTreeMap::new();
    for arm in standard_arms() {
        let arm_dir = out_dir.join(ARMS_DIR).join(arm_dir_name(&arm.name));
        let outcome = (|| -> Result<(EvalReport, Option<ProbeReport>)> {
            let params = match arm.mask {
                Some(mask) => train_to_dir(cfg, &train_data, &corpus_digest, mask, &init_params, &arm_dir)?.0,
                None => init_params.clone(),
            };
            let report = evaluate(&params, &test_data.samples, eval::arm_prompt(&arm), &arm.name)?;
            write_eval(&report, &digest, &arm_dir)?;
            let probe = match arm.mask {
                Some(_) => {
                    let p = probe_pair(&init_params, &params, &probe_samples, &cfg.probe)?;
                    write_probe(&p, &digest, &arm_dir)?;
                    Some(p)
                }
                None => None,
            };
            Ok((report, probe))
        })();
        let (report, error) = match outcome {
            Ok((report, probe)) => {
                if let Some(p) = probe {
                    probes.insert(arm.name.clone(), p.aggregate);
                }
                (Some(report), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(
            eval::ArmOutcome::<f32> {
                arm,
                params: None,
                losses: Vec::new(),
                report,
                error,
            }
            .row(),
        );
    }

    let summary = SweepSummary {
        corpus_digest,
        train_samples: train_data.samples.len(),
        test_samples: test_data.samples.len(),
        rows,
        probes,
    };
    write_csv(&out_dir.join(TABLE_FILE), &digest, &sweep_csv(&summary.rows))?;
    write_json(&out_dir.join(SWEEP_FILE), &digest, &summary)?;
    write(&out_dir.join(REPORT_FILE), render_report(&digest, &summary).as_bytes())?;
    Ok(summary)
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Markdown with the accuracy table and the probe table side by side.
pub fn render_report(digest: &str, s: &SweepSummary) -> String {
    let mut out = format!(
        "# Activation sweep\n\nconfig digest: `{digest}`\ncorpus digest: `{}`\ntrain/test samples: {}/{}\n\n",
        s.corpus_digest, s.train_samples, s.test_samples
    );
    out.push_str("| fine-tuned modules | accuracy (%) | similarity shift (%) | logit shift (%) | positive similarity (%) | positive logit (%) |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in &s.rows {
        let p = s.probes.get(&r.arm);
        let acc = match &r.error {
            Some(e) => format!("failed: {e}"),
            None => pct(r.accuracy),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.arm,
            acc,
            pct(p.map(|p| p.overall.mean_similarity_shift)),
            pct(p.map(|p| p.overall.mean_logit_shift)),
            pct(p.map(|p| p.overall.positive_similarity_fraction)),
            pct(p.map(|p| p.overall.positive_logit_fraction)),
        ));
    }
    out.push_str(
        "\nShifts are relative changes against the shared initial checkpoint, averaged over test samples. \
         The label probability is read at the slot after the answer prefix \"the image has some\". \
         The baseline row is the untrained model asked with the options prompt.\n",
    );
    if s.probes.values().any(|p| p.excluded > 0) {
        out.push_str("\nSamples excluded for a near-zero baseline:");
        for (arm, p) in &s.probes {
            out.push_str(&format!(" {arm}={}", p.excluded));
        }
        out.push('\n');
    }
    out
}

/// Rebuilds the markdown report from a sweep directory.
pub fn report(sweep_dir: &Path, out: &Path) -> Result<String> {
    let stamped: Stamped<SweepSummary> = read_json(&sweep_dir.join(SWEEP_FILE))?;
    let text = render_report(&stamped.config_digest, &stamped.body);
    write(out, text.as_bytes())?;
    Ok(text)
}
