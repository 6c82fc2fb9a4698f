//! Optimization loops: contrastive pretraining of the image/text pair,
//! fine-tuning through the frozen zero-shot head, the interpolation sweep,
//! and alignment of a new modality encoder to a frozen teacher.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::checkpoint::{interpolate, Checkpoint, Stage, META_SEED};
use crate::encoders::{Encoder, ProjectionHead, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::{zeroshot_score, Metric};
use crate::head::{default_logit_scale, ClassificationHead};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Name of the frozen temperature stored with image-encoder checkpoints.
pub const LOGIT_SCALE_TENSOR: &str = "logit_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub augment: bool,
    /// Fixed contrastive temperature for pretraining; defaults to `e^2.659`.
    #[serde(default)]
    pub logit_scale: Option<f64>,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        TrainConfig { batch_size: 64, epochs: 6, lr: 2e-3, warmup: 30, weight_decay: 0.01, seed, lambda: 0.0, augment: false, logit_scale: None }
    }

    pub fn finetune(seed: u64) -> Self {
        TrainConfig { batch_size: 64, epochs: 3, lr: 1e-3, warmup: 50, weight_decay: 0.5, seed, lambda: 0.0, augment: true, logit_scale: None }
    }

    pub fn align(seed: u64) -> Self {
        TrainConfig { batch_size: 64, epochs: 5, lr: 1e-3, warmup: 100, weight_decay: 0.01, seed, lambda: 0.05, augment: false, logit_scale: None }
    }

    pub fn probe(seed: u64) -> Self {
        TrainConfig { batch_size: 64, epochs: 20, lr: 1e-2, warmup: 10, weight_decay: 0.0, seed, lambda: 0.0, augment: false, logit_scale: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("lr and weight decay must be non-negative".into()));
        }
        if let Some(s) = self.logit_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("logit scale must be positive, got {s}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Linear warmup to `cfg.lr`, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup.min(total.saturating_sub(1));
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRole {
    Supported,
    Patching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub role: TaskRole,
    pub dataset: String,
    pub metric: Metric,
}

/// Decoupled weight decay Adam. Moments are kept in `f64` per tensor.
/// Decay applies to matrices only; vectors (biases, norms) are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, state: IndexMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every tensor of `params` whose gradient is named
    /// `{prefix}{name}`. Gradients without the prefix are ignored.
    pub fn step(&mut self, params: &mut Checkpoint, grads: &Gradients, prefix: &str, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gname, g) in grads.iter() {
            let Some(name) = gname.strip_prefix(prefix) else { continue };
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient {gname:?} has no parameter")))?;
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let wf = *w as f64;
                *w = (wf - lr * (mhat / (vhat.sqrt() + self.eps)) - lr * decay * wf) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub config: TrainConfig,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    fn new(stage: &str, cfg: &TrainConfig) -> Self {
        TrainLog { stage: stage.to_string(), config: cfg.clone(), steps: Vec::new() }
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    /// Mean loss over the last epoch's worth of steps.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        let per_epoch = self.steps.len() / self.config.epochs.max(1);
        let tail = &self.steps[self.steps.len().saturating_sub(per_epoch.max(1))..];
        (!tail.is_empty()).then(|| tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Shuffled minibatches for one epoch. The last partial batch is dropped
/// unless it is the only one.
fn epoch_batches(rng: &mut Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    if n <= batch {
        return vec![order];
    }
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    if n <= batch {
        1
    } else {
        n / batch
    }
}

/// Colour jitter, random grayscale and random 3x3 box blur on `[N, 3, H, W]`
/// images in `[0, 1]`. Output is clamped to `[0, 1]`.
pub fn augment_rgb(batch: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::shape("augment", format!("expected [N, C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let p = h * w;
    let mut out = batch.data().to_vec();
    for img in out.chunks_mut(c * p) {
        for ch in img.chunks_mut(p) {
            let gain = rng.range(0.8, 1.2) as f32;
            let bias = rng.range(-0.1, 0.1) as f32;
            ch.iter_mut().for_each(|v| *v = gain * *v + bias);
        }
        if rng.bernoulli(0.2) {
            for i in 0..p {
                let mean = (0..c).map(|k| img[k * p + i]).sum::<f32>() / c as f32;
                (0..c).for_each(|k| img[k * p + i] = mean);
            }
        }
        if rng.bernoulli(0.2) {
            for ch in img.chunks_mut(p) {
                let src = ch.to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let (mut sum, mut cnt) = (0.0f32, 0.0f32);
                        for yy in y.saturating_sub(1)..(y + 2).min(h) {
                            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                                sum += src[yy * w + xx];
                                cnt += 1.0;
                            }
                        }
                        ch[y * w + x] = sum / cnt;
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Tensor::new(s.to_vec(), out)
}

pub struct PretrainOutput {
    pub image: Encoder,
    pub text: TextEncoder,
    pub log: TrainLog,
}

/// Symmetric in-batch contrastive training of an image and a text encoder
/// on paired `images [N, C, H, W]` and `captions [N, L]`.
pub fn pretrain_contrastive(
    mut image: Encoder,
    mut text: TextEncoder,
    images: &Tensor,
    captions: &Tensor,
    cfg: &TrainConfig,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let n = images.rows();
    if captions.rows() != n {
        return Err(Error::InvalidArgument(format!("{n} images but {} captions", captions.rows())));
    }
    if cfg.batch_size < 2 || n < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs batches of at least two pairs".into()));
    }
    if image.embed_dim() != text.encoder.embed_dim() {
        return Err(Error::InvalidArgument("image and text embedding dims differ".into()));
    }
    let scale = cfg.logit_scale.unwrap_or_else(default_logit_scale);
    let mut opt_i = AdamW::new(cfg.weight_decay);
    let mut opt_t = AdamW::new(cfg.weight_decay);
    let mut rng = Rng::derive(cfg.seed, "pretrain/order");
    let total = cfg.epochs * steps_per_epoch(n, cfg.batch_size);
    let mut log = TrainLog::new("pretrain", cfg);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(&mut rng, n, cfg.batch_size) {
            let xi = image.tokenize_batch(&images.select_rows(&idx)?)?;
            let xt = text.encoder.tokenize_batch(&captions.select_rows(&idx)?)?;
            let mut g = Graph::new();
            let ii = g.input("images", &xi)?;
            let ti = g.input("captions", &xt)?;
            let ei = image.build(&mut g, ii, "i/", true)?;
            let et = text.encoder.build(&mut g, ti, "t/", true)?;
            let loss = contrastive_loss(&mut g, ei, et, scale)?;
            let lr = lr_at(step, total, cfg);
            let grads = g.backward(loss)?;
            opt_i.step(image.params_mut(), &grads, "i/", lr)?;
            opt_t.step(text.encoder.params_mut(), &grads, "t/", lr)?;
            log.steps.push(StepLog { step, lr, loss: g.scalar(loss), mse: None, ce: None });
            step += 1;
        }
    }
    for p in [image.params_mut(), text.encoder.params_mut()] {
        p.set_stage(Stage::Zeroshot);
        p.set_meta(META_SEED, cfg.seed.to_string());
    }
    if image.params().get(LOGIT_SCALE_TENSOR).is_none() {
        image.params_mut().insert(LOGIT_SCALE_TENSOR, Tensor::scalar(scale.ln() as f32))?;
    }
    Ok(PretrainOutput { image, text, log })
}

/// Logit scale recorded in an image checkpoint, if any.
pub fn checkpoint_logit_scale(ck: &Checkpoint) -> Option<f64> {
    ck.get(LOGIT_SCALE_TENSOR).map(|t| (t.data()[0] as f64).exp())
}

/// Symmetric in-batch InfoNCE on unnormalized `[B, D]` embeddings; row `i`
/// of each side is the positive for row `i` of the other.
pub fn contrastive_loss(g: &mut Graph, image: NodeId, text: NodeId, scale: f64) -> Result<NodeId> {
    let b = g.shape(image)[0];
    let ni = g.l2_normalize(image)?;
    let nt = g.l2_normalize(text)?;
    let targets: Vec<usize> = (0..b).collect();
    let s_it = g.matmul_t(ni, nt)?;
    let s_it = g.scale(s_it, scale)?;
    let s_ti = g.matmul_t(nt, ni)?;
    let s_ti = g.scale(s_ti, scale)?;
    let l1 = g.softmax_cross_entropy(s_it, &targets)?;
    let l2 = g.softmax_cross_entropy(s_ti, &targets)?;
    let sum = g.add(l1, l2)?;
    g.scale(sum, 0.5)
}

/// BCE from logits for multi-label targets, softmax cross-entropy otherwise.
pub fn head_loss(g: &mut Graph, logits: NodeId, labels: &Tensor, multilabel: bool) -> Result<NodeId> {
    if multilabel {
        let y = g.input("labels", labels)?;
        g.bce_with_logits(logits, y)
    } else {
        let t = crate::eval::class_ids(labels);
        g.softmax_cross_entropy(logits, &t)
    }
}

/// Trains the image encoder through the frozen head on `images`/`labels`.
/// Softmax cross-entropy for single-label data, per-class binary
/// cross-entropy from logits for multi-label data.
pub fn finetune_frozen_head(
    image: &Encoder,
    head: &ClassificationHead,
    images: &Tensor,
    labels: &Tensor,
    multilabel: bool,
    cfg: &TrainConfig,
) -> Result<(Encoder, TrainLog)> {
    cfg.validate()?;
    if head.dim() != image.embed_dim() {
        return Err(Error::shape(
            "finetune",
            format!("encoder dim {} vs head dim {}", image.embed_dim(), head.dim()),
        ));
    }
    if labels.rows() != images.rows() || labels.row_len() != head.num_classes() {
        return Err(Error::shape("finetune", "labels do not match images or head classes"));
    }
    let mut model = image.clone();
    let mut log = TrainLog::new("finetune", cfg);
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    let n = images.rows();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order = Rng::derive(cfg.seed, "finetune/order");
    let mut aug = Rng::derive(cfg.seed, "finetune/augment");
    let total = cfg.epochs * steps_per_epoch(n, cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(&mut order, n, cfg.batch_size) {
            let mut x = images.select_rows(&idx)?;
            if cfg.augment {
                x = augment_rgb(&x, &mut aug)?;
            }
            let tokens = model.tokenize_batch(&x)?;
            let mut g = Graph::new();
            let xi = g.input("images", &tokens)?;
            let e = model.build(&mut g, xi, "i/", true)?;
            let logits = head.build(&mut g, e)?;
            let loss = head_loss(&mut g, logits, &labels.select_rows(&idx)?, multilabel)?;
            let lr = lr_at(step, total, cfg);
            let grads = g.backward(loss)?;
            opt.step(model.params_mut(), &grads, "i/", lr)?;
            log.steps.push(StepLog { step, lr, loss: g.scalar(loss), mse: None, ce: None });
            step += 1;
        }
    }
    model.params_mut().set_stage(Stage::Finetuned);
    model.params_mut().set_meta(META_SEED, cfg.seed.to_string());
    Ok((model, log))
}

/// Validation data and head for one side of the sweep.
pub struct SweepTask<'a> {
    pub spec: TaskSpec,
    pub head: &'a ClassificationHead,
    pub images: &'a Tensor,
    pub labels: &'a Tensor,
}

impl SweepTask<'_> {
    pub fn score(&self, enc: &Encoder) -> Result<f64> {
        zeroshot_score(&enc.encode(self.images)?, self.head, self.labels, self.spec.metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub supported: f64,
    pub patching: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub chosen_alpha: f64,
    /// Set when no alpha met the supported-task constraint.
    pub warning: bool,
    pub delta: f64,
}

impl SweepResult {
    pub fn row(&self, alpha: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.alpha == alpha)
    }

    pub fn chosen(&self) -> &SweepRow {
        self.row(self.chosen_alpha).expect("chosen alpha is a grid point")
    }
}

/// `0.0, 0.1, ..., 1.0`
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Sorted, deduplicated grid; must lie in `[0, 1]` and include both ends.
pub fn normalize_grid(grid: &[f64]) -> Result<Vec<f64>> {
    let mut g = grid.to_vec();
    if g.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument(format!("alpha grid {grid:?} leaves [0, 1]")));
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    if g.first() != Some(&0.0) || g.last() != Some(&1.0) {
        return Err(Error::InvalidArgument("alpha grid must contain 0 and 1".into()));
    }
    Ok(g)
}

/// The alpha with the best patching metric among those keeping the
/// supported metric at or above `(1 - delta)` times its value at alpha 0.
/// Ties go to the smaller alpha. Falls back to 0 with a warning.
pub fn choose_alpha(rows: &[SweepRow], delta: f64) -> Result<(f64, bool)> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside [0, 1)")));
    }
    let base = rows
        .iter()
        .find(|r| r.alpha == 0.0)
        .ok_or_else(|| Error::InvalidArgument("sweep lacks alpha = 0".into()))?
        .supported;
    let floor = (1.0 - delta) * base;
    let mut best: Option<&SweepRow> = None;
    for r in rows.iter().filter(|r| r.supported >= floor) {
        if best.map_or(true, |b| r.patching > b.patching) {
            best = Some(r);
        }
    }
    Ok(match best {
        Some(r) => (r.alpha, false),
        None => (0.0, true),
    })
}

/// Scores both tasks at every grid alpha on `interpolate(zs, ft, alpha)`.
pub fn sweep_alpha(
    zs: &Encoder,
    ft: &Checkpoint,
    grid: &[f64],
    supported: &SweepTask,
    patching: &SweepTask,
    delta: f64,
) -> Result<SweepResult> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside [0, 1)")));
    }
    let grid = normalize_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let enc = zs.with_params(interpolate(zs.params(), ft, alpha)?)?;
        rows.push(SweepRow { alpha, supported: supported.score(&enc)?, patching: patching.score(&enc)? });
    }
    let (chosen_alpha, warning) = choose_alpha(&rows, delta)?;
    Ok(SweepResult { rows, chosen_alpha, warning, delta })
}

/// Weights of the two alignment terms. The objective is
/// `mse_weight * mse + lambda * ce`; `mse_weight = 0` drops the MSE term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLoss {
    pub mse_weight: f64,
}

impl Default for AlignLoss {
    fn default() -> Self {
        AlignLoss { mse_weight: 1.0 }
    }
}

/// Nodes of one alignment objective.
#[derive(Clone, Copy, Debug)]
pub struct AlignTerms {
    pub mse: NodeId,
    pub ce: NodeId,
    pub total: NodeId,
}

/// `mse_weight * mse(e, target) + lambda * head_loss(head(e))`.
#[allow(clippy::too_many_arguments)]
pub fn align_loss(
    g: &mut Graph,
    embeddings: NodeId,
    target: NodeId,
    head: &ClassificationHead,
    labels: &Tensor,
    multilabel: bool,
    lambda: f64,
    weights: AlignLoss,
) -> Result<AlignTerms> {
    let mse = g.mse_loss(embeddings, target)?;
    let logits = head.build(g, embeddings)?;
    let ce = head_loss(g, logits, labels, multilabel)?;
    let weighted_ce = g.scale(ce, lambda)?;
    let total = if weights.mse_weight == 1.0 {
        g.add(mse, weighted_ce)?
    } else {
        let m = g.scale(mse, weights.mse_weight)?;
        g.add(m, weighted_ce)?
    };
    Ok(AlignTerms { mse, ce, total })
}

pub struct AlignOutput {
    pub student: Encoder,
    pub projection: Option<ProjectionHead>,
    pub log: TrainLog,
}

impl AlignOutput {
    /// Student parameters with the projection head appended.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.student.params().clone();
        if let Some(p) = &self.projection {
            p.write_into(&mut ck)?;
        }
        Ok(ck)
    }

    pub fn embed(&self, inputs: &Tensor, target_dim: usize) -> Result<Tensor> {
        crate::encoders::encode_modality(&self.student, inputs, self.projection.as_ref(), target_dim)
    }
}

/// Trains `student` (plus `projection`) so that its embeddings of
/// `student_inputs` match the frozen teacher's embeddings of the paired
/// `teacher_inputs`, with the head's classification loss weighted by
/// `cfg.lambda`.
#[allow(clippy::too_many_arguments)]
pub fn align(
    teacher: &Encoder,
    mut student: Encoder,
    mut projection: Option<ProjectionHead>,
    head: &ClassificationHead,
    student_inputs: &Tensor,
    teacher_inputs: &Tensor,
    labels: &Tensor,
    multilabel: bool,
    cfg: &TrainConfig,
    loss: AlignLoss,
) -> Result<AlignOutput> {
    cfg.validate()?;
    let n = student_inputs.rows();
    if teacher_inputs.rows() != n || labels.rows() != n {
        return Err(Error::InvalidArgument(format!(
            "unpaired data: {n} student rows, {} teacher rows, {} label rows",
            teacher_inputs.rows(),
            labels.rows()
        )));
    }
    if !(loss.mse_weight >= 0.0) {
        return Err(Error::InvalidArgument("mse weight must be >= 0".into()));
    }
    let d = teacher.embed_dim();
    if head.dim() != d {
        return Err(Error::shape("align", format!("teacher dim {d} vs head dim {}", head.dim())));
    }
    match (&projection, student.embed_dim() == d) {
        (None, false) => {
            return Err(Error::InvalidArgument(format!(
                "student dim {} differs from teacher dim {d}; a projection head is required",
                student.embed_dim()
            )))
        }
        (Some(_), true) => return Err(Error::InvalidArgument("projection head given although dims match".into())),
        (Some(p), false) if p.d_in() != student.embed_dim() || p.d_out() != d => {
            return Err(Error::shape("align", "projection head dims do not bridge student and teacher"));
        }
        _ => {}
    }
    let targets = teacher.encode(teacher_inputs)?;
    let mut proj_ck = Checkpoint::new("projection", d);
    if let Some(p) = &projection {
        p.write_into(&mut proj_ck)?;
    }
    let mut opt_s = AdamW::new(cfg.weight_decay);
    let mut opt_p = AdamW::new(cfg.weight_decay);
    let mut order = Rng::derive(cfg.seed, "align/order");
    let total = cfg.epochs * steps_per_epoch(n, cfg.batch_size);
    let mut log = TrainLog::new("align", cfg);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(&mut order, n, cfg.batch_size) {
            let tokens = student.tokenize_batch(&student_inputs.select_rows(&idx)?)?;
            let mut g = Graph::new();
            let xi = g.input("inputs", &tokens)?;
            let target = g.input("teacher", &targets.select_rows(&idx)?)?;
            let raw = student.build(&mut g, xi, "s/", true)?;
            let e = match &projection {
                Some(p) => p.build(&mut g, raw, "p/", true)?,
                None => raw,
            };
            let terms = align_loss(&mut g, e, target, head, &labels.select_rows(&idx)?, multilabel, cfg.lambda, loss)?;
            let (mse, ce, total_node) = (terms.mse, terms.ce, terms.total);
            let lr = lr_at(step, total, cfg);
            let grads = g.backward(total_node)?;
            opt_s.step(student.params_mut(), &grads, "s/", lr)?;
            if projection.is_some() {
                opt_p.step(&mut proj_ck, &grads, "p/", lr)?;
            }
            log.steps.push(StepLog {
                step,
                lr,
                loss: g.scalar(total_node),
                mse: Some(g.scalar(mse)),
                ce: Some(g.scalar(ce)),
            });
            step += 1;
        }
    }
    if let Some(p) = projection.as_mut() {
        p.set(proj_ck.require("proj.w")?.clone(), proj_ck.require("proj.b")?.clone())?;
    }
    student.params_mut().set_stage(Stage::Aligned);
    student.params_mut().set_meta(META_SEED, cfg.seed.to_string());
    Ok(AlignOutput { student, projection, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, warmup: usize) -> TrainConfig {
        TrainConfig { lr, warmup, ..TrainConfig::finetune(0) }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(0.1, 10);
        assert_eq!(lr_at(10, 110, &c), 0.1);
        assert!(lr_at(110, 110, &c).abs() < 1e-15);
        assert!((lr_at(60, 110, &c) - 0.05).abs() < 1e-12);
        assert_eq!(lr_at(0, 110, &c), 0.0);
        assert!((lr_at(5, 110, &c) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn choose_alpha_rule() {
        let rows = |s: &[f64], p: &[f64], a: &[f64]| -> Vec<SweepRow> {
            a.iter().zip(s).zip(p).map(|((&alpha, &supported), &patching)| SweepRow { alpha, supported, patching }).collect()
        };
        let r = rows(&[0.90, 0.88, 0.50], &[0.10, 0.60, 0.80], &[0.0, 0.5, 1.0]);
        assert_eq!(choose_alpha(&r, 0.1).unwrap(), (0.5, false));
        let r = rows(&[0.9, 0.8, 0.7], &[0.1, 0.5, 0.9], &[0.0, 0.5, 1.0]);
        assert_eq!(choose_alpha(&r, 0.0).unwrap(), (0.0, false));
        assert!(choose_alpha(&r, 1.0).is_err());
    }

    #[test]
    fn grid_must_cover_endpoints() {
        assert!(normalize_grid(&[0.0, 0.5]).is_err());
        assert!(normalize_grid(&[0.0, 1.5, 1.0]).is_err());
        assert_eq!(normalize_grid(&[1.0, 0.0, 0.5, 0.5]).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn augment_stays_in_range_and_is_seeded() {
        let x = Tensor::new(vec![4, 3, 4, 4], (0..192).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let a = augment_rgb(&x, &mut Rng::new(5)).unwrap();
        let b = augment_rgb(&x, &mut Rng::new(5)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut ck = Checkpoint::new("t", 1);
        ck.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param("w", ck.get("w").unwrap(), true).unwrap();
        let l = g.mse_loss(w, w).unwrap();
        let s = g.scale(w, 3.0).unwrap();
        let loss = g.add(l, s).unwrap();
        let grads = g.backward(loss).unwrap();
        AdamW::new(0.0).step(&mut ck, &grads, "", 0.1).unwrap();
        assert!((ck.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }
}
