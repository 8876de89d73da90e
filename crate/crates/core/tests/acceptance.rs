//! Acceptance run over the full experiment surface.
//!
//! Prints one `criterion N: PASS|FAIL ...` line per criterion and exits
//! non-zero when any criterion fails. The learnability and sweep criteria
//! train on the default 5000-sample corpus and take a while.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use perceptlab::checkpoint::{self, Provenance};
use perceptlab::config::ExperimentConfig;
use perceptlab::corpus::{generate_base_image, BaseImageSpec, Generator, Manifest, Split, MANIFEST_FILE};
use perceptlab::distortion::{apply_distortion, laplacian_energy, severity_params, DistortionClass, DistortionSpec};
use perceptlab::image::RgbImage;
use perceptlab::model::{ComponentMask, ModelConfig};
use perceptlab::pipeline::{self, SplitData, ARMS_DIR, CHECKPOINT_FILE, CORPUS_DIR, INIT_CHECKPOINT, JOINT_FILE, PROBE_FILE};
use perceptlab::probe::{probe_pair, ProbeReport};
use perceptlab::train::{grad_check, smoothed_nll};
use perceptlab::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn gradient_fidelity() -> Result<Verdict> {
    let start = Instant::now();
    let report = grad_check(&ModelConfig::tiny(), 200, 0)?;
    let elapsed = start.elapsed();
    let components: Vec<_> = report.per_component.keys().map(|c| c.to_string()).collect();
    let pass = report.probes.len() >= 200
        && components.len() == 3
        && report.max_rel_error < 1e-4
        && elapsed < Duration::from_secs(120);
    Ok(Verdict::new(
        pass,
        format!(
            "{} coordinates over {}, max relative error {:.3e}, {:.1}s",
            report.probes.len(),
            components.join("/"),
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    ))
}

fn loss_identities() -> Result<Verdict> {
    let c = 40;
    let targets = [3u32, 17, 0, 39];
    let mask = [true; 4];
    let uniform = Array2::<f64>::zeros((4, c));
    let mut worst_uniform = 0f64;
    for eps in [0.0, 0.1, 0.3] {
        let l = smoothed_nll(&uniform, &targets, &mask, eps)?;
        worst_uniform = worst_uniform.max((l - (c as f64).ln()).abs());
    }
    let logits = Array2::from_shape_fn((4, c), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.37 - 1.5);
    let l0 = smoothed_nll(&logits, &targets, &mask, 0.0)?;
    let l1 = smoothed_nll(&logits, &targets, &mask, 0.05)?;
    let l2 = smoothed_nll(&logits, &targets, &mask, 0.1)?;
    let residual = (l1 - 0.5 * (l0 + l2)).abs();
    let hand = smoothed_nll(&ndarray::array![[2f64.ln(), 0.0]], &[0], &[true], 0.3)?;
    let direct = 0.7 * -(2f64 / 3.0).ln() + 0.15 * (-(2f64 / 3.0).ln() - (1f64 / 3.0).ln());
    let hand_err = (hand - direct).abs();
    let pass = worst_uniform < 1e-9 && residual < 1e-9 && hand_err < 1e-9 && (hand - 0.509438).abs() < 1e-6;
    Ok(Verdict::new(
        pass,
        format!("ln C error {worst_uniform:.1e}, affinity residual {residual:.1e}, hand case {hand:.6} (error {hand_err:.1e})"),
    ))
}

fn distortion_calibration() -> Result<Verdict> {
    let gray = RgbImage::filled(256, 256, [128, 128, 128])?;
    let mut worst_sigma = 0f64;
    for severity in 1..=5 {
        let target = severity_params(DistortionClass::Noise, severity)?.noise_sigma;
        for seed in 0..10 {
            let noisy = apply_distortion(&gray, &DistortionSpec::new(DistortionClass::Noise, severity, seed)?)?;
            let n = (256 * 256 * 3) as f64;
            let sigma = (noisy.l2_distance_sq(&gray) / n).sqrt() / 255.0;
            worst_sigma = worst_sigma.max((sigma - target).abs() / target);
        }
    }

    let textured = generate_base_image(&BaseImageSpec {
        generator: Generator::BandLimitedNoise,
        seed: 7,
        size: 64,
    })?;
    let energies = (1..=5)
        .map(|s| Ok(laplacian_energy(&apply_distortion(&textured, &DistortionSpec::new(DistortionClass::Blur, s, 0)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let decreasing = energies.windows(2).all(|w| w[1] < w[0]);

    let clean_same = apply_distortion(&textured, &DistortionSpec::clean())? == textured;
    let mut unchanged = Vec::new();
    for class in DistortionClass::ALL.into_iter().filter(|c| *c != DistortionClass::Clean) {
        for severity in 1..=5 {
            for seed in 0..3 {
                if apply_distortion(&textured, &DistortionSpec::new(class, severity, seed)?)? == textured {
                    unchanged.push(format!("{class}/{severity}/{seed}"));
                }
            }
        }
    }
    let pass = worst_sigma < 0.1 && decreasing && clean_same && unchanged.is_empty();
    Ok(Verdict::new(
        pass,
        format!(
            "worst noise sigma deviation {:.2}%, blur laplacian {:?}, clean identical {clean_same}, unchanged {unchanged:?}",
            100.0 * worst_sigma,
            energies.iter().map(|e| format!("{e:.5}")).collect::<Vec<_>>()
        ),
    ))
}

fn learnability(cfg: &ExperimentConfig, corpus: &Path, work: &Path) -> Result<Verdict> {
    let start = Instant::now();
    let mask = ComponentMask::parse("encoder,projector,lm")?;
    let out = work.join("all");
    pipeline::train(cfg, corpus, Some(mask), None, &out)?;
    let report = pipeline::eval(cfg, corpus, &out, None, &out)?;
    let elapsed = start.elapsed();
    let pass = report.samples == 1000 && report.accuracy >= 0.85 && elapsed <= Duration::from_secs(30 * 60);
    Ok(Verdict::new(
        pass,
        format!(
            "held-out accuracy {:.2}% on {} samples after {} iterations, {:.0}s",
            100.0 * report.accuracy,
            report.samples,
            cfg.train.iterations,
            elapsed.as_secs_f64()
        ),
    ))
}

fn baseline_margin(summary: &pipeline::SweepSummary) -> Verdict {
    let baseline = summary.rows.iter().find(|r| r.arm == "baseline").and_then(|r| r.accuracy);
    let Some(baseline) = baseline else {
        return Verdict::new(false, "baseline row missing");
    };
    let mut pass = baseline <= 0.30;
    let mut parts = vec![format!("baseline {:.2}%", 100.0 * baseline)];
    for row in summary.rows.iter().filter(|r| r.arm != "baseline") {
        match row.accuracy {
            Some(a) => {
                pass &= a - baseline >= 0.20;
                parts.push(format!("{} {:.2}%", row.arm, 100.0 * a));
            }
            None => {
                pass = false;
                parts.push(format!("{} failed", row.arm));
            }
        }
    }
    Verdict::new(pass, parts.join(", "))
}

fn probe_directions(cfg: &ExperimentConfig, corpus: &Path, sweep_dir: &Path, summary: &pipeline::SweepSummary) -> Result<Verdict> {
    let init = pipeline::load_checkpoint(&sweep_dir.join(INIT_CHECKPOINT), cfg)?.params;
    let test = SplitData::load(corpus, &pipeline::load_manifest(corpus)?, Split::Test)?;
    let own = probe_pair(&init, &init, &test.with_ids(), &cfg.probe)?;
    let self_max = own
        .records
        .iter()
        .map(|r| r.similarity_shift.abs().max(r.logit_shift.abs()))
        .fold(0f64, f64::max);
    let self_ok = !own.records.is_empty() && self_max < 1e-12;

    let (enc_ok, enc_text) = match summary.probes.get("encoder") {
        Some(p) => (
            p.overall.mean_similarity_shift > 0.0 && p.overall.positive_similarity_fraction >= 0.7,
            format!(
                "encoder similarity shift {:.3}% ({:.1}% positive)",
                100.0 * p.overall.mean_similarity_shift,
                100.0 * p.overall.positive_similarity_fraction
            ),
        ),
        None => (false, "encoder probe missing".into()),
    };
    let (proj_ok, proj_text) = match summary.probes.get("projector") {
        Some(p) => (
            p.overall.mean_logit_shift > 0.0,
            format!("projector logit shift {:.3}%", 100.0 * p.overall.mean_logit_shift),
        ),
        None => (false, "projector probe missing".into()),
    };
    Ok(Verdict::new(
        self_ok && enc_ok && proj_ok,
        format!("self-probe max shift {self_max:.1e}, {enc_text}, {proj_text}"),
    ))
}

fn freezing(cfg: &ExperimentConfig, sweep_dir: &Path) -> Result<Verdict> {
    let init = pipeline::load_checkpoint(&sweep_dir.join(INIT_CHECKPOINT), cfg)?.params;
    let mut violations = Vec::new();
    let mut checked = 0;
    for arm in perceptlab::eval::standard_arms() {
        let Some(mask) = arm.mask else { continue };
        let path = sweep_dir.join(ARMS_DIR).join(pipeline::arm_dir_name(&arm.name)).join(CHECKPOINT_FILE);
        let tuned = pipeline::load_checkpoint(&path, cfg)?.params;
        for (i, meta) in init.metas().iter().enumerate() {
            if mask.is_active(meta, cfg.model.lm_layers) {
                continue;
            }
            checked += 1;
            let same = init.get(i).iter().zip(tuned.get(i).iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                violations.push(format!("{}:{}", arm.name, meta.name));
            }
        }
    }
    Ok(Verdict::new(
        violations.is_empty() && checked > 0,
        format!("{checked} frozen tensors compared, violations {violations:?}"),
    ))
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| perceptlab::Error::io(&dir, e))? {
            let path = entry.map_err(|e| perceptlab::Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| perceptlab::Error::io(&path, e))?;
                out.insert(path.strip_prefix(root).unwrap_or(&path).to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

/// A small but complete configuration; two sweeps of it are compared file by file.
fn determinism_config() -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(
        r#"{
            "corpus": {"count_per_class": 10, "image_size": 32},
            "model": {"image_size": 32, "patch_size": 8, "encoder_dim": 32, "lm_dim": 32,
                      "encoder_layers": 1, "lm_layers": 2, "heads": 2, "n_visual_tokens": 8},
            "train": {"iterations": 40, "batch_size": 8}
        }"#,
    )
}

fn determinism(work: &Path) -> Result<Verdict> {
    let cfg = determinism_config()?;
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    pipeline::sweep(&cfg, None, &a)?;
    pipeline::sweep(&cfg, None, &b)?;
    let (fa, fb) = (files_under(&a)?, files_under(&b)?);
    let differing: Vec<_> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .chain(fb.keys().filter(|k| !fa.contains_key(*k)).map(|k| k.display().to_string()))
        .collect();
    let count = |ext: &str| fa.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    // Six trained arms plus the shared init.
    let checkpoints = count("plab") + usize::from(fa.contains_key(Path::new(INIT_CHECKPOINT)));
    let pass = differing.is_empty() && checkpoints == 7 && fa.contains_key(Path::new("report.md"));
    Ok(Verdict::new(
        pass,
        format!(
            "{} files compared ({} checkpoints, {} json, {} csv), differing {differing:?}",
            fa.len(),
            checkpoints,
            count("json"),
            count("csv")
        ),
    ))
}

fn round_trips(sweep_dir: &Path, corpus: &Path) -> Result<Verdict> {
    let ckpt_path = sweep_dir.join(INIT_CHECKPOINT);
    let original = fs::read(&ckpt_path).map_err(|e| perceptlab::Error::io(&ckpt_path, e))?;
    let loaded = checkpoint::decode(&original)?;
    let resaved = checkpoint::encode(&loaded.params, &loaded.provenance)?;
    let tuned_path = sweep_dir.join(ARMS_DIR).join("encoder").join(CHECKPOINT_FILE);
    let tuned_bytes = fs::read(&tuned_path).map_err(|e| perceptlab::Error::io(&tuned_path, e))?;
    let tuned = checkpoint::decode(&tuned_bytes)?;
    let ckpt_ok = resaved == original
        && checkpoint::encode(&tuned.params, &tuned.provenance)? == tuned_bytes
        && tuned.provenance != Provenance::default();

    let manifest_path = corpus.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| perceptlab::Error::io(&manifest_path, e))?;
    let manifest_ok = Manifest::from_json(&text)?.to_json()? == text;

    let probe: pipeline::Stamped<ProbeReport> = pipeline::read_json(&sweep_dir.join(ARMS_DIR).join("encoder").join(PROBE_FILE))?;
    let joint_path = sweep_dir.join(ARMS_DIR).join("encoder").join(JOINT_FILE);
    let joint = fs::read_to_string(&joint_path).map_err(|e| perceptlab::Error::io(&joint_path, e))?;
    let rows = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(joint.as_bytes())
        .records()
        .count();
    let test_size = Manifest::from_json(&text)?.split(Split::Test).records.len();
    let records = probe.body.records.len();
    let export_ok = test_size == 1000 && rows == 2 * records;
    Ok(Verdict::new(
        ckpt_ok && manifest_ok && export_ok,
        format!(
            "checkpoint resave identical {ckpt_ok}, manifest identity {manifest_ok}, {rows} export rows for {records} probe records on a {test_size}-sample test split"
        ),
    ))
}

fn run(name: &str, f: impl FnOnce() -> Result<Verdict>) -> Verdict {
    let start = Instant::now();
    let v = f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
    eprintln!("[{name} finished in {:.0}s]", start.elapsed().as_secs_f64());
    v
}

fn main() {
    // The pool reads this once; zero requests the single-thread default.
    std::env::set_var("PERCEPTLAB_THREADS", "0");
    let scratch = tempfile::tempdir().expect("temporary directory");
    let work = scratch.path();
    let cfg = ExperimentConfig::default();

    let mut verdicts = vec![
        (1, run("gradient fidelity", gradient_fidelity)),
        (2, run("loss identities", loss_identities)),
        (3, run("distortion calibration", distortion_calibration)),
    ];

    let sweep_dir = work.join("sweep");
    let corpus = sweep_dir.join(CORPUS_DIR);
    let sweep = run("default sweep", || {
        let summary = pipeline::sweep(&cfg, None, &sweep_dir)?;
        Ok(Verdict::new(true, serde_json::to_string(&summary.rows).unwrap_or_default()))
    });
    let summary = pipeline::read_json::<pipeline::SweepSummary>(&sweep_dir.join(pipeline::SWEEP_FILE)).map(|s| s.body);
    let sweep_failed = |what: &str| Verdict::new(false, format!("{what} unavailable, sweep failed: {}", sweep.detail));

    verdicts.push((4, run("learnability", || learnability(&cfg, &corpus, work))));
    verdicts.push((
        5,
        match &summary {
            Ok(s) => baseline_margin(s),
            Err(_) => sweep_failed("accuracy table"),
        },
    ));
    verdicts.push((
        6,
        match &summary {
            Ok(s) => run("probes", || probe_directions(&cfg, &corpus, &sweep_dir, s)),
            Err(_) => sweep_failed("probe aggregates"),
        },
    ));
    verdicts.push((7, run("freezing", || freezing(&cfg, &sweep_dir))));
    verdicts.push((8, run("determinism", || determinism(work))));
    verdicts.push((9, run("round trips", || round_trips(&sweep_dir, &corpus))));

    let mut failed = 0;
    for (id, v) in &verdicts {
        println!("criterion {id}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    // exit() skips destructors, so clean up explicitly.
    drop(scratch);
    if failed > 0 {
        std::process::exit(1);
    }
}
