use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::layers::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    NormCache,
};
use super::{BlockIx, Float, LinearIx, NormIx, Parameters, Stage};
use crate::corpus::IMAGE_PLACEHOLDER;
use crate::distortion::DistortionClass;
use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Per-tensor gradient slots; inactive tensors have no slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Array2<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn for_mask(params: &Parameters<T>, mask: &super::ComponentMask) -> Self {
        let lm_layers = params.config().lm_layers;
        Self {
            slots: params
                .metas()
                .iter()
                .map(|m| mask.is_active(m, lm_layers).then(|| Array2::zeros((m.shape[0], m.shape[1]))))
                .collect(),
        }
    }

    pub fn wants(&self, i: usize) -> bool {
        self.slots[i].is_some()
    }

    pub fn get(&self, i: usize) -> Option<&Array2<T>> {
        self.slots[i].as_ref()
    }

    pub fn slots(&self) -> &[Option<Array2<T>>] {
        &self.slots
    }

    pub fn add(&mut self, i: usize, g: &Array2<T>) {
        if let Some(slot) = self.slots[i].as_mut() {
            *slot += g;
        }
    }

    fn add_opt(&mut self, i: usize, g: Option<Array2<T>>) {
        if let Some(g) = g {
            self.add(i, &g);
        }
    }

    /// Adds `other` slot by slot; both must come from the same mask.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for s in self.slots.iter_mut().flatten() {
            s.mapv_inplace(|v| v * k);
        }
    }

    /// Names of tensors that carry a gradient, in schema order.
    pub fn keys<'a>(&self, params: &'a Parameters<T>) -> Vec<&'a str> {
        params
            .metas()
            .iter()
            .zip(&self.slots)
            .filter(|(_, s)| s.is_some())
            .map(|(m, _)| m.name.as_str())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

struct BlockTrace<T> {
    ln1: NormCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    att: Array2<T>,
    ln2: NormCache<T>,
    m: Array2<T>,
    h_pre: Array2<T>,
    h_act: Array2<T>,
}

fn lin<T: Float>(p: &Parameters<T>, ix: LinearIx, x: &ArrayView2<T>) -> Array2<T> {
    linear(x, p.get(ix.weight), p.get(ix.bias))
}

fn norm<T: Float>(p: &Parameters<T>, ix: NormIx, x: &Array2<T>) -> (Array2<T>, NormCache<T>) {
    layer_norm(x, p.get(ix.gamma), p.get(ix.beta))
}

fn block_forward<T: Float>(p: &Parameters<T>, ix: &BlockIx, x: Array2<T>, causal: bool) -> (Array2<T>, BlockTrace<T>) {
    let heads = p.config().heads;
    let (a, ln1) = norm(p, ix.ln1, &x);
    let q = lin(p, ix.query, &a.view());
    let k = lin(p, ix.key, &a.view());
    let v = lin(p, ix.value, &a.view());
    let (att, probs) = attention(&q, &k, &v, heads, causal);
    let mid = &x + &lin(p, ix.out, &att.view());
    let (m, ln2) = norm(p, ix.ln2, &mid);
    let h_pre = lin(p, ix.fc1, &m.view());
    let h_act = gelu(&h_pre);
    let y = &mid + &lin(p, ix.fc2, &h_act.view());
    let trace = BlockTrace {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        att,
        ln2,
        m,
        h_pre,
        h_act,
    };
    (y, trace)
}

fn linear_back<T: Float>(
    p: &Parameters<T>,
    ix: LinearIx,
    x: &ArrayView2<T>,
    dy: &Array2<T>,
    grads: &mut Gradients<T>,
    want_params: bool,
) -> Array2<T> {
    let g = linear_backward(x, p.get(ix.weight), dy, true, want_params);
    grads.add_opt(ix.weight, g.dw);
    grads.add_opt(ix.bias, g.db);
    g.dx.expect("requested dx")
}

/// Backward through one block; returns the input gradient when `want_dx`.
fn block_backward<T: Float>(
    p: &Parameters<T>,
    ix: &BlockIx,
    t: &BlockTrace<T>,
    dy: &Array2<T>,
    want_dx: bool,
    grads: &mut Gradients<T>,
) -> Option<Array2<T>> {
    let want_params = grads.wants(ix.query.weight);
    if !want_params && !want_dx {
        return None;
    }
    let d_act = linear_back(p, ix.fc2, &t.h_act.view(), dy, grads, want_params);
    let d_pre = gelu_backward(&t.h_pre, &d_act);
    let d_m = linear_back(p, ix.fc1, &t.m.view(), &d_pre, grads, want_params);
    let n2 = layer_norm_backward(&d_m, &t.ln2, p.get(ix.ln2.gamma));
    if want_params {
        grads.add(ix.ln2.gamma, &n2.dgamma);
        grads.add(ix.ln2.beta, &n2.dbeta);
    }
    let d_mid = dy + &n2.dx;
    let d_att = linear_back(p, ix.out, &t.att.view(), &d_mid, grads, want_params);
    let (dq, dk, dv) = attention_backward(&d_att, &t.q, &t.k, &t.v, &t.probs);
    let mut d_a = linear_back(p, ix.query, &t.a.view(), &dq, grads, want_params);
    d_a += &linear_back(p, ix.key, &t.a.view(), &dk, grads, want_params);
    d_a += &linear_back(p, ix.value, &t.a.view(), &dv, grads, want_params);
    let n1 = layer_norm_backward(&d_a, &t.ln1, p.get(ix.ln1.gamma));
    if want_params {
        grads.add(ix.ln1.gamma, &n1.dgamma);
        grads.add(ix.ln1.beta, &n1.dbeta);
    }
    want_dx.then(|| d_mid + n1.dx)
}

/// Splits an image into `(n_patches, patch_size² · 3)` rows scaled to [-1, 1].
pub fn image_patches<T: Float>(params: &Parameters<T>, img: &RgbImage) -> Result<Array2<T>> {
    let cfg = params.config();
    if img.width() != cfg.image_size || img.height() != cfg.image_size {
        return Err(Error::domain(format!(
            "image is {}x{}, model expects {}x{}",
            img.width(),
            img.height(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let (ps, per_row) = (cfg.patch_size, cfg.image_size / cfg.patch_size);
    let mut out = Array2::zeros((cfg.n_patches(), cfg.patch_dim()));
    let data = img.data();
    let (two, one) = (T::one() + T::one(), T::one());
    for (pi, mut row) in out.rows_mut().into_iter().enumerate() {
        let (px, py) = ((pi % per_row) * ps, (pi / per_row) * ps);
        let mut j = 0;
        for y in py..py + ps {
            for x in px..px + ps {
                for c in 0..3 {
                    let v = T::from_u8(data[(y * cfg.image_size + x) * 3 + c]).expect("u8 fits") / super::lit(255.0);
                    row[j] = two * v - one;
                    j += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inputs for one training or evaluation sequence.
pub struct SampleInput<'a, T> {
    pub patches: &'a Array2<T>,
    pub ids: &'a [u32],
}

pub struct ForwardTrace<T> {
    patches: Array2<T>,
    encoder: Vec<BlockTrace<T>>,
    features: Array2<T>,
    pooled: Array2<T>,
    lm: Vec<BlockTrace<T>>,
    final_norm: NormCache<T>,
    normed: Array2<T>,
    ids: Vec<u32>,
}

fn encoder_forward<T: Float>(p: &Parameters<T>, patches: &Array2<T>, trace: Option<&mut Vec<BlockTrace<T>>>) -> Array2<T> {
    let l = p.layout();
    let mut x = lin(p, l.patch, &patches.view()) + p.get(l.encoder_pos);
    let mut traces = Vec::new();
    for b in &l.encoder_blocks {
        let (y, t) = block_forward(p, b, x, false);
        traces.push(t);
        x = y;
    }
    if let Some(out) = trace {
        *out = traces;
    }
    x
}

fn projector_forward<T: Float>(p: &Parameters<T>, features: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let l = p.layout();
    let pooled = p.get(l.pool).dot(features);
    let visual = lin(p, l.projection, &pooled.view());
    (pooled, visual)
}

fn check_sequence<T: Float>(p: &Parameters<T>, ids: &[u32]) -> Result<()> {
    let cfg = p.config();
    let total = cfg.n_visual_tokens + ids.len();
    if ids.is_empty() {
        return Err(Error::domain("text sequence is empty"));
    }
    if total > cfg.max_seq_len {
        return Err(Error::domain(format!(
            "sequence of {total} positions exceeds the maximum of {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab.len()) {
        return Err(Error::domain(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Runs the LM stack; returns `(final-normed hidden states, block traces, norm cache)`.
fn lm_forward<T: Float>(p: &Parameters<T>, visual: &Array2<T>, ids: &[u32]) -> (Array2<T>, Vec<BlockTrace<T>>, NormCache<T>) {
    let l = p.layout();
    let emb = p.get(l.token_embedding);
    let text = emb.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
    let n = visual.nrows() + ids.len();
    let mut x = concatenate![Axis(0), visual.view(), text.view()];
    x += &p.get(l.lm_pos).slice(s![..n, ..]);
    let mut traces = Vec::with_capacity(l.lm_blocks.len());
    for b in &l.lm_blocks {
        let (y, t) = block_forward(p, b, x, true);
        traces.push(t);
        x = y;
    }
    let (normed, cache) = norm(p, l.final_norm, &x);
    (normed, traces, cache)
}

fn head<T: Float>(p: &Parameters<T>, normed: &Array2<T>) -> Array2<T> {
    let nv = p.config().n_visual_tokens;
    normed.slice(s![nv.., ..]).dot(p.get(p.layout().head))
}

/// Patch features `(n_patches, encoder_dim)` for an image.
pub fn encode_image<T: Float>(params: &Parameters<T>, img: &RgbImage) -> Result<Array2<T>> {
    let patches = image_patches(params, img)?;
    Ok(encoder_forward(params, &patches, None))
}

/// Visual tokens `(n_visual_tokens, lm_dim)` from patch features.
pub fn project<T: Float>(params: &Parameters<T>, features: &Array2<T>) -> Result<Array2<T>> {
    let cfg = params.config();
    if features.dim() != (cfg.n_patches(), cfg.encoder_dim) {
        return Err(Error::domain(format!(
            "patch features have shape {:?}, expected ({}, {})",
            features.dim(),
            cfg.n_patches(),
            cfg.encoder_dim
        )));
    }
    Ok(projector_forward(params, features).1)
}

/// Vocabulary logits for every text position of `[visual ; ids]`.
pub fn forward<T: Float>(params: &Parameters<T>, visual: &Array2<T>, ids: &[u32]) -> Result<Array2<T>> {
    let cfg = params.config();
    if visual.dim() != (cfg.n_visual_tokens, cfg.lm_dim) {
        return Err(Error::domain(format!("visual tokens have shape {:?}", visual.dim())));
    }
    check_sequence(params, ids)?;
    let (normed, _, _) = lm_forward(params, visual, ids);
    Ok(head(params, &normed))
}

/// Logits for the token following `ids`.
pub fn next_token_logits<T: Float>(params: &Parameters<T>, visual: &Array2<T>, ids: &[u32]) -> Result<Array1<T>> {
    let logits = forward(params, visual, ids)?;
    Ok(logits.row(logits.nrows() - 1).to_owned())
}

/// Full forward pass keeping everything the backward pass needs.
pub fn forward_sample<T: Float>(params: &Parameters<T>, input: &SampleInput<'_, T>) -> Result<(Array2<T>, ForwardTrace<T>)> {
    check_sequence(params, input.ids)?;
    let mut enc_traces = Vec::new();
    let features = encoder_forward(params, input.patches, Some(&mut enc_traces));
    let (pooled, visual) = projector_forward(params, &features);
    let (normed, lm, final_norm) = lm_forward(params, &visual, input.ids);
    let logits = head(params, &normed);
    Ok((
        logits,
        ForwardTrace {
            patches: input.patches.clone(),
            encoder: enc_traces,
            features,
            pooled,
            lm,
            final_norm,
            normed,
            ids: input.ids.to_vec(),
        },
    ))
}

/// Accumulates gradients of `Σ dlogits ⊙ logits` into the active slots of `grads`.
pub fn backward_sample<T: Float>(params: &Parameters<T>, trace: &ForwardTrace<T>, dlogits: &Array2<T>, grads: &mut Gradients<T>) {
    let l = params.layout();
    let nv = params.config().n_visual_tokens;
    let active = |stage: Stage| params.metas().iter().enumerate().any(|(i, m)| m.stage == stage && grads.wants(i));
    let enc_on = active(Stage::Encoder);
    let proj_on = active(Stage::Projector);
    let input_on = active(Stage::LmInput);
    let visual_needed = enc_on || proj_on;
    // Lowest LM block whose parameters need gradients.
    let lowest_block = (0..l.lm_blocks.len()).find(|&i| active(Stage::LmBlock(i)));
    let need_below = |i: usize| visual_needed || input_on || lowest_block.is_some_and(|b| b < i);

    let text_rows = s![nv.., ..];
    let normed_text = trace.normed.slice(text_rows);
    if grads.wants(l.head) {
        grads.add(l.head, &normed_text.t().dot(dlogits));
    }
    if !(visual_needed || input_on || lowest_block.is_some() || grads.wants(l.final_norm.gamma)) {
        return;
    }
    let mut d_normed = Array2::zeros(trace.normed.raw_dim());
    d_normed.slice_mut(text_rows).assign(&dlogits.dot(&params.get(l.head).t()));
    let fnb = layer_norm_backward(&d_normed, &trace.final_norm, params.get(l.final_norm.gamma));
    grads.add(l.final_norm.gamma, &fnb.dgamma);
    grads.add(l.final_norm.beta, &fnb.dbeta);

    let mut dx = fnb.dx;
    for (i, (b, t)) in l.lm_blocks.iter().zip(&trace.lm).enumerate().rev() {
        if lowest_block.is_none_or(|lb| i < lb) && !need_below(i + 1) {
            return;
        }
        match block_backward(params, b, t, &dx, need_below(i), grads) {
            Some(d) => dx = d,
            None => return,
        }
    }

    if grads.wants(l.lm_pos) {
        let mut dpos = Array2::zeros(params.get(l.lm_pos).raw_dim());
        dpos.slice_mut(s![..dx.nrows(), ..]).assign(&dx);
        grads.add(l.lm_pos, &dpos);
    }
    if grads.wants(l.token_embedding) {
        let mut demb = Array2::zeros(params.get(l.token_embedding).raw_dim());
        for (r, &id) in trace.ids.iter().enumerate() {
            let mut row = demb.row_mut(id as usize);
            row += &dx.row(nv + r);
        }
        grads.add(l.token_embedding, &demb);
    }
    if !visual_needed {
        return;
    }

    let d_visual = dx.slice(s![..nv, ..]).to_owned();
    let d_pooled = linear_back(params, l.projection, &trace.pooled.view(), &d_visual, grads, proj_on);
    if proj_on {
        grads.add(l.pool, &d_pooled.dot(&trace.features.t()));
    }
    if !enc_on {
        return;
    }
    let mut dx = params.get(l.pool).t().dot(&d_pooled);
    for (b, t) in l.encoder_blocks.iter().zip(&trace.encoder).rev() {
        dx = block_backward(params, b, t, &dx, true, grads).expect("requested dx");
    }
    grads.add(l.encoder_pos, &dx);
    let g = linear_backward(&trace.patches.view(), params.get(l.patch.weight), &dx, false, true);
    grads.add_opt(l.patch.weight, g.dw);
    grads.add_opt(l.patch.bias, g.db);
}

/// Mean of the projected visual tokens.
pub fn pooled_visual_embedding<T: Float>(params: &Parameters<T>, img: &RgbImage) -> Result<Array1<T>> {
    let visual = project(params, &encode_image(params, img)?)?;
    Ok(visual.mean_axis(Axis(0)).expect("at least one visual token"))
}

/// Input-embedding row of a class word.
pub fn label_embedding<T: Float>(params: &Parameters<T>, class: DistortionClass) -> Result<Array1<T>> {
    let id = params.config().vocab.class_id(class)?;
    Ok(params.get(params.layout().token_embedding).row(id as usize).to_owned())
}

fn argmax<T: Float>(row: &Array1<T>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding after `<bos> prompt`; stops at `<eos>` or `max_new_tokens`.
pub fn generate<T: Float>(params: &Parameters<T>, img: &RgbImage, prompt: &str, max_new_tokens: usize) -> Result<String> {
    if !prompt.contains(IMAGE_PLACEHOLDER) {
        return Err(Error::domain(format!("prompt lacks the {IMAGE_PLACEHOLDER} placeholder")));
    }
    let vocab = &params.config().vocab;
    let visual = project(params, &encode_image(params, img)?)?;
    let mut ids = vec![vocab.bos()?];
    ids.extend(vocab.tokenize(prompt));
    let eos = vocab.eos()?;
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        let next = argmax(&next_token_logits(params, &visual, &ids)?);
        if next == eos {
            break;
        }
        generated.push(next);
        ids.push(next);
    }
    Ok(vocab.detokenize(&generated))
}
