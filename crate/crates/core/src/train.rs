//! Label-smoothed NLL training with AdamW and per-component activation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_answer, render_prompt, PromptMode};
use crate::distortion::DistortionClass;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{
    backward_sample, forward_sample, image_patches, lit, Gradients, Component, ComponentMask, Float, LmActivation, ModelConfig, Parameters,
    SampleInput, TensorKind,
};
use crate::parallel;
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Label-smoothing weight of the uniform term.
    pub epsilon_smooth: f64,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: ComponentMask,
    /// Learning-rate shape after warmup.
    pub schedule: LrSchedule,
    /// Randomly mirror each training image horizontally and/or vertically.
    pub flip_augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero at the last iteration.
    #[default]
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon_smooth: 0.1,
            lr: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.01,
            iterations: 3000,
            batch_size: 128,
            seed: 0,
            mask: ComponentMask::ALL,
            schedule: LrSchedule::Cosine,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.epsilon_smooth) {
            return bad("epsilon_smooth must lie in [0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be at least 1");
        }
        if !self.mask.any() {
            return bad("activation mask selects no component");
        }
        Ok(())
    }

    /// Learning rate at a zero-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.iterations.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn log_softmax_row<T: Float>(row: ndarray::ArrayView1<T>) -> Array1<f64> {
    let row: Vec<f64> = row.iter().map(|v| v.to_f64().expect("finite")).collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean over supervised rows of `(1-ε)(-log p(y)) + ε/C Σ_c (-log p(c))`,
/// with `C` the vocabulary (logit row) size.
pub fn smoothed_nll<T: Float>(logits: &Array2<T>, targets: &[u32], mask: &[bool], epsilon: f64) -> Result<f64> {
    Ok(smoothed_nll_with_grad(logits, targets, mask, epsilon)?.0)
}

/// Loss and its gradient with respect to the logits.
pub fn smoothed_nll_with_grad<T: Float>(
    logits: &Array2<T>,
    targets: &[u32],
    mask: &[bool],
    epsilon: f64,
) -> Result<(f64, Array2<T>)> {
    let (rows, classes) = logits.dim();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::domain(format!(
            "logits have {rows} rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let supervised = mask.iter().filter(|&&m| m).count();
    if supervised == 0 {
        return Err(Error::domain("supervision mask is empty"));
    }
    let c = classes as f64;
    let norm = 1.0 / supervised as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, classes));
    for (r, (&y, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let y = y as usize;
        if y >= classes {
            return Err(Error::domain(format!("target id {y} outside {classes} logits")));
        }
        let logp = log_softmax_row(logits.row(r));
        loss += (1.0 - epsilon) * -logp[y] + epsilon / c * -logp.sum();
        for (k, lp) in logp.iter().enumerate() {
            let target = epsilon / c + if k == y { 1.0 - epsilon } else { 0.0 };
            grad[[r, k]] = lit((lp.exp() - target) * norm);
        }
    }
    Ok((loss * norm, grad))
}

/// Patch rows of the image mirrored left-right and/or top-bottom.
///
/// Both mirrors map rows to rows and the 8-pixel block grid onto itself, so
/// every distortion class keeps its label.
pub fn flip_patches<T: Float>(config: &ModelConfig, patches: &Array2<T>, horizontal: bool, vertical: bool) -> Array2<T> {
    let (ps, per_row) = (config.patch_size, config.image_size / config.patch_size);
    let mut out = Array2::zeros(patches.raw_dim());
    for (pi, src) in patches.rows().into_iter().enumerate() {
        let (mut px, mut py) = (pi % per_row, pi / per_row);
        if horizontal {
            px = per_row - 1 - px;
        }
        if vertical {
            py = per_row - 1 - py;
        }
        let mut dst = out.row_mut(py * per_row + px);
        for y in 0..ps {
            let ty = if vertical { ps - 1 - y } else { y };
            for x in 0..ps {
                let tx = if horizontal { ps - 1 - x } else { x };
                for c in 0..3 {
                    dst[(ty * ps + tx) * 3 + c] = src[(y * ps + x) * 3 + c];
                }
            }
        }
    }
    out
}

const AUGMENT_STREAM: u64 = 0x666c_6970;

/// One tokenized training sequence: `<bos> prompt answer <eos>` with targets
/// shifted by one and supervision on the answer and `<eos>` only.
#[derive(Debug, Clone)]
pub struct TrainExample<T> {
    pub patches: Array2<T>,
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub supervised: Vec<bool>,
}

pub fn build_example<T: Float>(params: &Parameters<T>, img: &RgbImage, class: DistortionClass) -> Result<TrainExample<T>> {
    let vocab = &params.config().vocab;
    let mut seq = vec![vocab.bos()?];
    seq.extend(vocab.tokenize(&render_prompt(PromptMode::Finetune)));
    let prompt_len = seq.len();
    seq.extend(vocab.tokenize(&render_answer(class)));
    seq.push(vocab.eos()?);
    let ids = seq[..seq.len() - 1].to_vec();
    let targets = seq[1..].to_vec();
    // Row r predicts seq[r + 1]; the answer starts at seq[prompt_len].
    let supervised = (0..ids.len()).map(|r| r + 1 >= prompt_len).collect();
    Ok(TrainExample {
        patches: image_patches(params, img)?,
        ids,
        targets,
        supervised,
    })
}

/// Batch-mean loss and exact gradients for every tensor active under `mask`.
pub fn backward<T: Float>(
    params: &Parameters<T>,
    batch: &[TrainExample<T>],
    epsilon: f64,
    mask: &ComponentMask,
) -> Result<(f64, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_sample: Vec<Result<(f64, Gradients<T>)>> = parallel::install(|| {
        batch
            .par_iter()
            .map(|ex| {
                let (logits, trace) = forward_sample(params, &SampleInput { patches: &ex.patches, ids: &ex.ids })?;
                let (loss, mut dlogits) = smoothed_nll_with_grad(&logits, &ex.targets, &ex.supervised, epsilon)?;
                dlogits.mapv_inplace(|v| v * lit(scale));
                let mut g = Gradients::for_mask(params, mask);
                backward_sample(params, &trace, &dlogits, &mut g);
                Ok((loss, g))
            })
            .collect()
    });
    let mut total = Gradients::for_mask(params, mask);
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let loss = loss * scale;
    if !loss.is_finite() || !total.all_finite() {
        return Err(Error::Training {
            step: 0,
            message: format!("non-finite loss or gradient (loss = {loss})"),
        });
    }
    Ok((loss, total))
}

/// Batch-mean loss only.
pub fn batch_loss<T: Float>(params: &Parameters<T>, batch: &[TrainExample<T>], epsilon: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let (logits, _) = forward_sample(params, &SampleInput { patches: &ex.patches, ids: &ex.ids })?;
        total += smoothed_nll(&logits, &ex.targets, &ex.supervised, epsilon)?;
    }
    Ok(total / batch.len() as f64)
}

/// AdamW moments for the active tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Option<Array2<T>>>,
    pub second: Vec<Option<Array2<T>>>,
    pub step: u64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(params: &Parameters<T>, mask: &ComponentMask) -> Self {
        let slots: Vec<Option<Array2<T>>> = Gradients::for_mask(params, mask).slots().to_vec();
        Self {
            first: slots.clone(),
            second: slots,
            step: 0,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction. Weight decay applies to
/// weight matrices only (not biases, norms or embeddings).
pub fn adamw_step<T: Float>(
    params: &mut Parameters<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let keyed = |a: &[Option<Array2<T>>]| a.iter().map(Option::is_some).collect::<Vec<_>>();
    if keyed(grads.slots()) != keyed(&state.first) {
        return Err(Error::domain("gradient and optimizer state cover different tensors"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = lit::<T>(1.0 - b1.powi(t));
    let bc2 = lit::<T>(1.0 - b2.powi(t));
    let (b1, b2, eps) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(config.adam_eps));
    let lr_t = lit::<T>(lr);
    let one = T::one();
    for (i, g) in grads.slots().iter().enumerate() {
        let Some(g) = g else { continue };
        let decay = if params.metas()[i].kind == TensorKind::Weight {
            one - lr_t * lit::<T>(config.weight_decay)
        } else {
            one
        };
        let m = state.first[i].as_mut().expect("keyed state");
        let v = state.second[i].as_mut().expect("keyed state");
        let w = params.get_mut(i);
        ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *w = *w * decay - lr_t * update;
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: Parameters<T>,
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// Trains on `(image, class)` pairs. Each epoch visits a permutation seeded
/// from `config.seed` and the epoch number; batches wrap across epochs.
pub fn train<T: Float>(
    data: &[(RgbImage, DistortionClass)],
    config: &TrainConfig,
    init: &Parameters<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training split is empty"));
    }
    if let LmActivation::Partial(k) = config.mask.lm {
        if k > init.config().lm_layers {
            return Err(Error::Config(format!("lm-partial{k} exceeds the {} LM blocks", init.config().lm_layers)));
        }
    }
    let mut params = init.clone();
    let examples: Vec<TrainExample<T>> = parallel::install(|| {
        data.par_iter().map(|(img, class)| build_example(init, img, *class)).collect::<Result<_>>()
    })?;
    let mut state = OptimizerState::new(&params, &config.mask);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::rng::combine(config.seed, epoch)));
                epoch += 1;
                cursor = 0;
            }
            let mut ex = examples[order[cursor]].clone();
            if config.flip_augment {
                let bits = CounterRng::new(config.seed, AUGMENT_STREAM).bits((step * config.batch_size + batch.len()) as u64);
                ex.patches = flip_patches(init.config(), &ex.patches, bits & 1 == 1, bits & 2 == 2);
            }
            batch.push(ex);
            cursor += 1;
        }
        let (loss, grads) = backward(&params, &batch, config.epsilon_smooth, &config.mask).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training { step, message },
            other => other,
        })?;
        losses.push(loss);
        adamw_step(&mut params, &grads, &mut state, config, config.lr_at(step))?;
    }
    if !params.all_finite() {
        return Err(Error::Training {
            step: config.iterations,
            message: "parameters became non-finite".into(),
        });
    }
    Ok(TrainOutcome { params, losses })
}

/// Loss trace as CSV rows `step,loss,active_components`.
pub fn loss_csv(losses: &[f64], mask: &ComponentMask) -> String {
    let mut out = String::from("step,loss,active_components\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.9},\"{}\"\n", mask.label()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub component: Component,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub max_rel_error: f64,
    pub per_component: BTreeMap<Component, f64>,
    pub probes: Vec<CoordinateCheck>,
}

/// Step used by the central difference.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// A small random batch of two images for gradient checks.
fn grad_check_batch(params: &Parameters<f64>, seed: u64) -> Result<Vec<TrainExample<f64>>> {
    let n = params.config().image_size;
    let rng = CounterRng::new(seed, 0x6772_6164);
    (0..2u64)
        .map(|k| {
            let data = (0..n * n * 3).map(|i| (rng.uniform(k * 1_000_000 + i as u64) * 256.0) as u8).collect();
            let img = RgbImage::new(n, n, data)?;
            let class = DistortionClass::ALL[(rng.bits(9_000_000 + k) % 8) as usize];
            build_example(params, &img, class)
        })
        .collect()
}

/// Compares analytic gradients with central differences at explicit coordinates.
/// Every coordinate must belong to a tensor active under `mask`.
pub fn check_coordinates(
    params: &Parameters<f64>,
    batch: &[TrainExample<f64>],
    epsilon: f64,
    mask: &ComponentMask,
    coords: &[(usize, usize)],
) -> Result<Vec<CoordinateCheck>> {
    let lm_layers = params.config().lm_layers;
    for &(t, _) in coords {
        if !mask.is_active(&params.metas()[t], lm_layers) {
            return Err(Error::domain(format!(
                "tensor {} is inactive under mask {mask}",
                params.metas()[t].name
            )));
        }
    }
    let (_, grads) = backward(params, batch, epsilon, mask)?;
    let mut work = params.clone();
    coords
        .iter()
        .map(|&(t, idx)| {
            let meta = &params.metas()[t];
            let orig = params.get(t).as_slice().expect("standard layout")[idx];
            let set = |w: &mut Parameters<f64>, v: f64| w.get_mut(t).as_slice_mut().expect("standard layout")[idx] = v;
            set(&mut work, orig + GRAD_CHECK_STEP);
            let up = batch_loss(&work, batch, epsilon)?;
            set(&mut work, orig - GRAD_CHECK_STEP);
            let down = batch_loss(&work, batch, epsilon)?;
            set(&mut work, orig);
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let analytic = grads.get(t).expect("active tensor").as_slice().expect("standard layout")[idx];
            Ok(CoordinateCheck {
                tensor: meta.name.clone(),
                component: meta.component(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            })
        })
        .collect()
}

/// Samples `n_probes` coordinates round-robin over the three components (uniform
/// over scalars within a component) and checks them in `f64`.
pub fn grad_check(config: &ModelConfig, n_probes: usize, seed: u64) -> Result<GradCheckReport> {
    if n_probes == 0 {
        return Err(Error::domain("n_probes must be at least 1"));
    }
    let params = Parameters::<f64>::init(config)?;
    let batch = grad_check_batch(&params, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_component: Vec<Vec<(usize, usize)>> = Component::ALL
        .iter()
        .map(|&c| {
            params
                .metas()
                .iter()
                .enumerate()
                .filter(|(_, m)| m.component() == c)
                .flat_map(|(t, m)| (0..m.shape[0] * m.shape[1]).map(move |i| (t, i)))
                .collect()
        })
        .collect();
    let coords: Vec<(usize, usize)> = (0..n_probes)
        .map(|k| {
            let pool = &by_component[k % 3];
            pool[rng.random_range(0..pool.len())]
        })
        .collect();
    let probes = check_coordinates(&params, &batch, 0.1, &ComponentMask::ALL, &coords)?;
    let mut per_component = BTreeMap::new();
    for p in &probes {
        let e = per_component.entry(p.component).or_insert(0.0f64);
        *e = e.max(p.rel_error);
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: GRAD_CHECK_STEP,
        max_rel_error,
        per_component,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmActivation;
    use ndarray::array;

    fn tiny() -> Parameters<f64> {
        Parameters::init(&ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn patch_flips_match_image_flips() {
        let p = tiny();
        let n = p.config().image_size;
        let px = |x: usize, y: usize| [(x * 13 + y) as u8, (y * 7) as u8, (x * y) as u8];
        let build = |f: &dyn Fn(usize, usize) -> [u8; 3]| {
            let data = (0..n).flat_map(|y| (0..n).flat_map(move |x| f(x, y))).collect::<Vec<u8>>();
            crate::image::RgbImage::new(n, n, data).unwrap()
        };
        let base = image_patches(&p, &build(&px)).unwrap();
        let h = image_patches(&p, &build(&|x, y| px(n - 1 - x, y))).unwrap();
        let v = image_patches(&p, &build(&|x, y| px(x, n - 1 - y))).unwrap();
        assert_eq!(flip_patches(p.config(), &base, true, false), h);
        assert_eq!(flip_patches(p.config(), &base, false, true), v);
        let both = flip_patches(p.config(), &base, true, true);
        assert_eq!(flip_patches(p.config(), &both, true, true), base);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Array2::<f64>::zeros((3, 8));
        for eps in [0.0, 0.1, 0.3] {
            let l = smoothed_nll(&logits, &[1, 2, 3], &[true, true, true], eps).unwrap();
            assert!((l - 8f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_hand_case() {
        let logits = array![[2f64.ln(), 0.0]];
        let l = smoothed_nll(&logits, &[0], &[true], 0.3).unwrap();
        let direct = 0.7 * -(2.0f64 / 3.0).ln() + 0.15 * (-(2.0f64 / 3.0).ln() - (1.0f64 / 3.0).ln());
        assert!((l - direct).abs() < 1e-12);
        assert!((l - 0.509438).abs() < 1e-6);
    }

    #[test]
    fn confident_prediction_without_smoothing_vanishes() {
        let logits = array![[40.0, 0.0, 0.0]];
        assert!(smoothed_nll(&logits, &[0], &[true], 0.0).unwrap() < 1e-15);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let logits = Array2::<f64>::zeros((2, 4));
        assert!(matches!(smoothed_nll(&logits, &[0, 1], &[false, false], 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let logits = array![[1.0, 2.0], [5.0, -3.0]];
        let a = smoothed_nll(&logits, &[0, 1], &[true, false], 0.1).unwrap();
        let b = smoothed_nll(&logits.slice(ndarray::s![..1, ..]).to_owned(), &[0], &[true], 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn example_supervises_answer_only() {
        let p = tiny();
        let img = RgbImage::filled(16, 16, [10, 20, 30]).unwrap();
        let ex = build_example(&p, &img, DistortionClass::Noise).unwrap();
        let vocab = &p.config().vocab;
        let supervised: Vec<&str> = ex
            .targets
            .iter()
            .zip(&ex.supervised)
            .filter(|(_, &s)| s)
            .map(|(&t, _)| vocab.token(t).unwrap())
            .collect();
        assert_eq!(supervised, ["the", "image", "has", "some", "noise", ".", "<eos>"]);
    }

    #[test]
    fn gradient_keys_follow_mask() {
        let p = tiny();
        let batch = grad_check_batch(&p, 1).unwrap();
        let mask = ComponentMask::parse("encoder").unwrap();
        let (_, g) = backward(&p, &batch, 0.1, &mask).unwrap();
        let keys = g.keys(&p);
        let expected: Vec<&str> = p
            .metas()
            .iter()
            .filter(|m| m.component() == Component::Encoder)
            .map(|m| m.name.as_str())
            .collect();
        assert_eq!(keys, expected);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let p = tiny();
        let batch = grad_check_batch(&p, 2).unwrap();
        let (l1, g1) = backward(&p, &batch, 0.1, &ComponentMask::ALL).unwrap();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l2, g2) = backward(&p, &doubled, 0.1, &ComponentMask::ALL).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.slots().iter().zip(g2.slots()) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn central_differences_agree_in_every_component() {
        let report = grad_check(&ModelConfig::tiny(), 30, 5).unwrap();
        assert_eq!(report.per_component.len(), 3);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn inactive_coordinates_are_rejected() {
        let p = tiny();
        let batch = grad_check_batch(&p, 3).unwrap();
        let mask = ComponentMask::parse("projector").unwrap();
        let head = p.layout().head;
        assert!(matches!(
            check_coordinates(&p, &batch, 0.1, &mask, &[(head, 0)]),
            Err(Error::Domain(_))
        ));
        let pool = p.layout().pool;
        assert!(check_coordinates(&p, &batch, 0.1, &mask, &[(pool, 1)]).is_ok());
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        let cfg = ModelConfig::tiny();
        let mut p = Parameters::<f64>::init(&cfg).unwrap();
        let mask = ComponentMask::parse("lm").unwrap();
        let head = p.layout().head;
        p.get_mut(head)[[0, 0]] = 1.0;
        let mut grads = Gradients::for_mask(&p, &mask);
        let mut g = Array2::zeros(p.get(head).raw_dim());
        g[[0, 0]] = 0.5;
        grads.add(head, &g);
        let tc = TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            mask,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new(&p, &mask);
        let before = p.clone();
        adamw_step(&mut p, &grads, &mut state, &tc, tc.lr).unwrap();
        // Bias-corrected first step: m_hat = g, v_hat = g^2.
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-6);
        assert!((p.get(head)[[0, 0]] - expected).abs() < 1e-15);
        assert!((p.get(head)[[0, 0]] - 0.999).abs() < 1e-8);
        // Zero gradient without decay is a fixed point; frozen tensors never move.
        for i in 0..p.len() {
            if i == head {
                continue;
            }
            assert_eq!(p.get(i), before.get(i), "{}", p.metas()[i].name);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_rejects_mismatched_keys() {
        let mut p = tiny();
        let grads = Gradients::for_mask(&p, &ComponentMask::parse("encoder").unwrap());
        let mut state = OptimizerState::new(&p, &ComponentMask::parse("projector").unwrap());
        let tc = TrainConfig::default();
        assert!(matches!(adamw_step(&mut p, &grads, &mut state, &tc, 1e-3), Err(Error::Domain(_))));
    }

    fn toy_data() -> Vec<(RgbImage, DistortionClass)> {
        (0..4)
            .map(|k| {
                let img = RgbImage::filled(16, 16, [40 * k as u8, 100, 200 - 30 * k as u8]).unwrap();
                (img, DistortionClass::ALL[k])
            })
            .collect()
    }

    #[test]
    fn zero_lr_is_a_null_update() {
        let p = tiny().cast::<f32>();
        let tc = TrainConfig {
            lr: 0.0,
            iterations: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(&toy_data(), &tc, &p).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_respects_freezing() {
        let p = tiny().cast::<f32>();
        let mask = ComponentMask {
            encoder: true,
            projector: false,
            lm: LmActivation::Partial(1),
        };
        let tc = TrainConfig {
            iterations: 5,
            batch_size: 3,
            lr: 1e-3,
            mask,
            ..TrainConfig::default()
        };
        let a = train(&toy_data(), &tc, &p).unwrap();
        let b = train(&toy_data(), &tc, &p).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        for (i, m) in p.metas().iter().enumerate() {
            let moved = a.params.get(i) != p.get(i);
            if !mask.is_active(m, 2) {
                assert!(!moved, "{} moved while frozen", m.name);
            }
        }
    }

    #[test]
    fn smoothing_is_affine_in_epsilon() {
        let logits = array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]];
        let l: Vec<f64> = [0.0, 0.05, 0.1]
            .iter()
            .map(|&e| smoothed_nll(&logits, &[2, 0], &[true, true], e).unwrap())
            .collect();
        assert!(((l[2] - l[1]) - (l[1] - l[0])).abs() < 1e-12);
    }
}
