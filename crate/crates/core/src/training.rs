//! Training through time: loss, clipping, RMSProp, batch sampling with the
//! stop-and-go augmentations, and the two training stages.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{downsample_mask, downsample_nearest, flow_to_angle, VideoSample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelInput, ModelParams, ParamGroup};
use crate::params::{accumulate, zeros_like, ParamSet};
use crate::streams::{appearance_encode, motion_encode, HeadParams};
use crate::tensor::{channel_softmax2, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub clip_bound: f64,
    pub rho: f64,
    pub eps: f64,
    /// Frames per batch, also the unroll length.
    pub batch_frames: usize,
    pub iterations: usize,
    pub aug_fraction: f64,
    /// Share of augmented batches that freeze the tail rather than the head.
    pub stop_share: f64,
    pub freeze_len: usize,
    /// Square crop side in pixels; 0 keeps full frames.
    pub crop: usize,
    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,
    pub log_every: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_decay: 0.95,
            weight_decay: 0.005,
            clip_bound: 50.0,
            rho: 0.9,
            eps: 1e-8,
            batch_frames: 14,
            iterations: 2000,
            aug_fraction: 0.2,
            stop_share: 0.5,
            freeze_len: 5,
            crop: 48,
            pretrain_iterations: 1000,
            pretrain_lr: 3e-3,
            log_every: 10,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("clip_bound", self.clip_bound),
            ("rho", self.rho),
            ("eps", self.eps),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.rho >= 1.0 {
            return bad(format!("rho must be below 1, got {}", self.rho));
        }
        for (k, v) in [("aug_fraction", self.aug_fraction), ("stop_share", self.stop_share)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.batch_frames < 2 {
            return bad(format!("batch_frames must be at least 2, got {}", self.batch_frames));
        }
        if self.aug_fraction > 0.0 && self.freeze_len >= self.batch_frames {
            return bad(format!(
                "freeze_len {} leaves no moving frames in batches of {}",
                self.freeze_len, self.batch_frames
            ));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("lr_decay".into(), self.lr_decay.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("clip_bound".into(), self.clip_bound.to_string()),
            ("rho".into(), self.rho.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("batch_frames".into(), self.batch_frames.to_string()),
            ("iterations".into(), self.iterations.to_string()),
            ("aug_fraction".into(), self.aug_fraction.to_string()),
            ("stop_share".into(), self.stop_share.to_string()),
            ("freeze_len".into(), self.freeze_len.to_string()),
            ("crop".into(), self.crop.to_string()),
            ("pretrain_iterations".into(), self.pretrain_iterations.to_string()),
            ("pretrain_lr".into(), self.pretrain_lr.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("rng_seed".into(), self.rng_seed.to_string()),
        ]
    }

    /// Applies one `key = value` setting; `false` for keys not owned here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_bound" => self.clip_bound = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch_frames" => self.batch_frames = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "aug_fraction" => self.aug_fraction = parse(key, value)?,
            "stop_share" => self.stop_share = parse(key, value)?,
            "freeze_len" => self.freeze_len = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "pretrain_iterations" => self.pretrain_iterations = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "rng_seed" => self.rng_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `lr0 * decay^epoch`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi(epoch.min(i32::MAX as usize) as i32)
}

/// Xavier-uniform kernel: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let [out, inp, kh, kw] = shape[..] else {
        return Err(Error::shape(
            "xavier_init",
            format!("expected a [out, in, k, k] kernel, got {shape:?}"),
        ));
    };
    let fan_in = inp * kh * kw;
    let fan_out = out * kh * kw;
    if fan_in + fan_out == 0 {
        return Err(Error::shape("xavier_init", "empty kernel"));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound))))
}

fn check_binary<T: Scalar>(gt: &Tensor<T>) -> Result<()> {
    if gt.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(Error::Invalid("ground-truth mask is not binary".into()))
    }
}

const P_FLOOR: f64 = 1e-7;

/// Mean binary cross-entropy of the object channel over all pixels and
/// frames, and its gradient with respect to the two-channel logits.
pub fn bce_loss<T: Scalar>(probs: &[Tensor<T>], gt: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)> {
    if probs.len() != gt.len() || probs.is_empty() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} predictions for {} masks", probs.len(), gt.len()),
        ));
    }
    let mut count = 0usize;
    for (p, y) in probs.iter().zip(gt) {
        let (c, h, w) = p.dims3()?;
        if c != 2 || y.shape() != [1, h, w] {
            return Err(Error::shape(
                "bce_loss",
                format!("prediction {:?} vs mask {:?}", p.shape(), y.shape()),
            ));
        }
        check_binary(y)?;
        count += h * w;
    }
    let inv_n = T::one() / T::lit(count as f64);
    let (lo, hi) = (T::lit(P_FLOOR), T::lit(1.0 - P_FLOOR));
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(gt) {
        let plane = y.len();
        let obj = &p.data()[plane..];
        let mut g = vec![T::zero(); 2 * plane];
        for i in 0..plane {
            let (q, t) = (obj[i], y.data()[i]);
            let qc = q.max(lo).min(hi);
            total = total - (t * qc.ln() + (T::one() - t) * (T::one() - qc).ln());
            let d = (q - t) * inv_n;
            g[i] = -d;
            g[plane + i] = d;
        }
        grads.push(Tensor::new(p.shape(), g)?);
    }
    Ok((total * inv_n, grads))
}

/// Cross-entropy of a sigmoid output against a binary target, with the
/// gradient on the pre-activation.
pub fn bce_sigmoid<T: Scalar>(probs: &[Tensor<T>], gt: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)> {
    if probs.len() != gt.len() || probs.is_empty() {
        return Err(Error::shape("bce_sigmoid", "prediction and mask counts differ"));
    }
    let count: usize = probs.iter().map(Tensor::len).sum();
    let inv_n = T::one() / T::lit(count as f64);
    let (lo, hi) = (T::lit(P_FLOOR), T::lit(1.0 - P_FLOOR));
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(gt) {
        if p.shape() != y.shape() {
            return Err(Error::shape(
                "bce_sigmoid",
                format!("{:?} vs {:?}", p.shape(), y.shape()),
            ));
        }
        check_binary(y)?;
        for (&q, &t) in p.data().iter().zip(y.data()) {
            let qc = q.max(lo).min(hi);
            total = total - (t * qc.ln() + (T::one() - t) * (T::one() - qc).ln());
        }
        grads.push(p.zip_map(y, |q, t| (q - t) * inv_n)?);
    }
    Ok((total * inv_n, grads))
}

/// Clamps one tensor elementwise to `[-bound, bound]`.
pub fn clip_tensor<T: Scalar>(t: &mut Tensor<T>, bound: T) {
    for v in t.data_mut() {
        if *v > bound {
            *v = bound;
        } else if *v < -bound {
            *v = -bound;
        }
    }
}

pub fn clip_gradients<T: Scalar, P: ParamSet<T>>(grads: &mut P, bound: T) {
    for (_, t) in grads.named_mut() {
        clip_tensor(t, bound);
    }
}

/// RMSProp accumulators, one per parameter tensor, in `named()` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub rho: T,
    pub eps: T,
    pub names: Vec<String>,
    pub acc: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<P: ParamSet<T>>(params: &P, rho: T, eps: T) -> Self {
        let (names, acc) = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.zeros_like()))
            .unzip();
        OptimizerState { rho, eps, names, acc }
    }
}

/// `acc <- rho*acc + (1-rho)*g^2;  θ <- θ - lr*g/sqrt(acc+eps) - lr*wd*θ`.
pub fn rmsprop_update<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<T>,
    lr: T,
    weight_decay: T,
) -> Result<()> {
    rmsprop_update_where(params, grads, state, lr, weight_decay, |_| true)
}

/// As [`rmsprop_update`], touching only tensors whose name passes `select`.
pub fn rmsprop_update_where<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<T>,
    lr: T,
    weight_decay: T,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    let grads = grads.named();
    let params = params.named_mut();
    if params.len() != grads.len() || params.len() != state.acc.len() {
        return Err(Error::shape(
            "rmsprop_update",
            format!(
                "{} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                state.acc.len()
            ),
        ));
    }
    let (rho, eps) = (state.rho, state.eps);
    let one_m_rho = T::one() - rho;
    for (((name, p), (gname, g)), (sname, acc)) in params
        .into_iter()
        .zip(grads)
        .zip(state.names.iter().zip(state.acc.iter_mut()))
    {
        if name != gname || &name != sname || p.shape() != g.shape() || p.shape() != acc.shape() {
            return Err(Error::shape(
                "rmsprop_update",
                format!("'{name}' {:?} does not line up with '{gname}' / '{sname}'", p.shape()),
            ));
        }
        if !select(&name) {
            continue;
        }
        for ((w, &gv), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *a = rho * *a + one_m_rho * gv * gv;
            *w = *w - lr * gv / (*a + eps).sqrt() - lr * weight_decay * *w;
        }
    }
    Ok(())
}

/// `n` consecutive frames of one video, cropped and possibly mirrored.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub video: usize,
    pub start: usize,
    /// Top-left corner `(y, x)` of the crop window.
    pub crop: (usize, usize),
    pub flipped: bool,
    pub stride: usize,
    pub frames: Vec<Tensor>,
    pub flow: Vec<Tensor>,
    pub flow_angle: Vec<Tensor>,
    /// Full-resolution masks.
    pub masks: Vec<Tensor>,
    /// Replacement for the motion stream on the feature grid.
    pub motion_override: Option<Vec<Tensor>>,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn input(&self) -> ModelInput<'_, f32> {
        ModelInput {
            frames: &self.frames,
            flow_angle: &self.flow_angle,
            motion_override: self.motion_override.as_deref(),
        }
    }

    /// Targets on the prediction grid.
    pub fn grid_masks(&self) -> Result<Vec<Tensor>> {
        self.masks.iter().map(|m| downsample_mask(m, self.stride)).collect()
    }

    /// Mirror image of the batch; flow `dx` changes sign.
    pub fn flipped(&self) -> Result<BatchSample> {
        let flip = |v: &[Tensor]| v.iter().map(Tensor::flip_horizontal).collect::<Result<Vec<_>>>();
        let flow = self
            .flow
            .iter()
            .map(flip_flow)
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchSample {
            flipped: !self.flipped,
            frames: flip(&self.frames)?,
            flow_angle: flow.iter().map(flow_to_angle).collect(),
            flow,
            masks: flip(&self.masks)?,
            motion_override: self.motion_override.as_deref().map(flip).transpose()?,
            ..self.clone()
        })
    }
}

fn flip_flow(f: &Tensor) -> Result<Tensor> {
    let mut out = f.flip_horizontal()?;
    let plane = out.len() / 2;
    for v in &mut out.data_mut()[..plane] {
        *v = -*v;
    }
    Ok(out)
}

/// Random video, random `n`-frame window, one crop and one flip decision
/// shared by every frame.
pub fn make_batch<R: Rng>(
    dataset: &[VideoSample],
    cfg: &TrainConfig,
    stride: usize,
    rng: &mut R,
) -> Result<BatchSample> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let n = cfg.batch_frames;
    let video = rng.gen_range(0..dataset.len());
    let v = &dataset[video];
    if v.len() < n {
        return Err(Error::Invalid(format!(
            "video '{}' has {} frames, batches need {n}",
            v.name,
            v.len()
        )));
    }
    let (h, w) = v.dims()?;
    let (ch, cw) = if cfg.crop == 0 { (h, w) } else { (cfg.crop.min(h), cfg.crop.min(w)) };
    if ch % stride != 0 || cw % stride != 0 {
        return Err(Error::Config(format!(
            "crop {ch}x{cw} is not a multiple of stride {stride}"
        )));
    }
    let start = rng.gen_range(0..=v.len() - n);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(0.5);
    let crop = |t: &Tensor| t.crop(y0, x0, ch, cw);
    let range = start..start + n;
    let mut batch = BatchSample {
        video,
        start,
        crop: (y0, x0),
        flipped: false,
        stride,
        frames: v.frames[range.clone()].iter().map(crop).collect::<Result<_>>()?,
        flow_angle: Vec::new(),
        flow: v.flow[range.clone()].iter().map(crop).collect::<Result<_>>()?,
        masks: v.masks[range].iter().map(crop).collect::<Result<_>>()?,
        motion_override: None,
    };
    if flip {
        batch = batch.flipped()?;
    } else {
        batch.flow_angle = batch.flow.iter().map(flow_to_angle).collect();
    }
    Ok(batch)
}

fn override_from(batch: &BatchSample, absent: impl Fn(usize) -> bool) -> Result<Vec<Tensor>> {
    batch
        .masks
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let g = downsample_nearest(m, batch.stride)?;
            Ok(if absent(t) { g.zeros_like() } else { g })
        })
        .collect()
}

fn freeze_frames(batch: &mut BatchSample, source: usize, frozen: std::ops::Range<usize>) {
    for t in frozen {
        batch.frames[t] = batch.frames[source].clone();
        batch.masks[t] = batch.masks[source].clone();
        batch.flow[t] = batch.flow[t].zeros_like();
        batch.flow_angle[t] = batch.flow_angle[t].zeros_like();
    }
}

/// Freezes the last `freeze_len` frames on the frame before them. Motion is
/// replaced by the ground truth on the moving frames and by zeros on the
/// frozen ones.
pub fn augment_stop(batch: &BatchSample, freeze_len: usize) -> Result<BatchSample> {
    let n = batch.len();
    if freeze_len == 0 || freeze_len >= n {
        return Err(Error::Invalid(format!(
            "cannot freeze {freeze_len} of {n} frames"
        )));
    }
    let mut out = batch.clone();
    let src = n - freeze_len - 1;
    freeze_frames(&mut out, src, src + 1..n);
    out.motion_override = Some(override_from(&out, |t| t > src)?);
    Ok(out)
}

/// Mirror of [`augment_stop`] at the head of the batch.
pub fn augment_static_start(batch: &BatchSample, freeze_len: usize) -> Result<BatchSample> {
    let n = batch.len();
    if freeze_len == 0 || freeze_len >= n {
        return Err(Error::Invalid(format!(
            "cannot freeze {freeze_len} of {n} frames"
        )));
    }
    let mut out = batch.clone();
    freeze_frames(&mut out, freeze_len, 0..freeze_len);
    out.motion_override = Some(override_from(&out, |t| t < freeze_len)?);
    Ok(out)
}

/// A training batch with the configured share of stop-and-go augmentation.
pub fn sample_batch<R: Rng>(
    dataset: &[VideoSample],
    cfg: &TrainConfig,
    stride: usize,
    rng: &mut R,
) -> Result<BatchSample> {
    let batch = make_batch(dataset, cfg, stride, rng)?;
    if cfg.aug_fraction > 0.0 && rng.gen_bool(cfg.aug_fraction) {
        if rng.gen_bool(cfg.stop_share) {
            augment_stop(&batch, cfg.freeze_len)
        } else {
            augment_static_start(&batch, cfg.freeze_len)
        }
    } else {
        Ok(batch)
    }
}

/// Which parameters a training step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Memory, fuse and head; the stream encoders stay fixed.
    Memory,
    All,
}

/// One forward/backward/update cycle. Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    batch: &BatchSample,
    opt: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    lr: f64,
    scope: TrainScope,
) -> Result<f32> {
    let pass = params.forward(
        batch.input(),
        ForwardOptions {
            record_gates: false,
            keep_caches: true,
        },
    )?;
    let (loss, grad_logits) = bce_loss(&pass.probs, &batch.grid_masks()?)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} on video {} frames {}..{}",
            batch.video,
            batch.start,
            batch.start + batch.len()
        )));
    }
    let mut grads = params.backward(&pass, &grad_logits, scope == TrainScope::All)?;
    clip_gradients(&mut grads, cfg.clip_bound as f32);
    rmsprop_update_where(params, &grads, opt, lr as f32, cfg.weight_decay as f32, |name| {
        scope == TrainScope::All || ParamGroup::of(name) == ParamGroup::Memory
    })?;
    Ok(loss)
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f32,
    pub lr: f64,
}

impl fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} loss={:.6} lr={:.6e}", self.iteration, self.loss, self.lr)
    }
}

/// Trains with the stream encoders held fixed. One epoch is one pass worth
/// of batches over the dataset (`dataset.len()` iterations). Returns the
/// loss of every iteration.
pub fn train_memory(
    params: &mut ModelParams,
    dataset: &[VideoSample],
    cfg: &TrainConfig,
    scope: TrainScope,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut opt = OptimizerState::new(&*params, cfg.rho as f32, cfg.eps as f32);
    let per_epoch = dataset.len().max(1);
    let stride = params.config.stride;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let lr = lr_schedule(cfg, it / per_epoch);
        let batch = sample_batch(dataset, cfg, stride, &mut rng)?;
        let loss = train_step(params, &batch, &mut opt, cfg, lr, scope)?;
        losses.push(loss);
        on_record(&TrainRecord { iteration: it, loss, lr });
    }
    Ok(losses)
}

/// Per-frame target of the motion encoder: ground-truth pixels whose flow
/// differs from the frame's dominant (median) flow.
pub fn independent_motion(mask: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (_, h, w) = mask.dims3()?;
    if flow.shape() != [2, h, w] {
        return Err(Error::shape("independent_motion", "flow and mask differ in size"));
    }
    let n = h * w;
    let median = |s: &[f32]| {
        let mut v = s.to_vec();
        v.sort_by(f32::total_cmp);
        v[n / 2]
    };
    let (dx, dy) = flow.data().split_at(n);
    let (mx, my) = (median(dx), median(dy));
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        let moving = (dx[i] - mx).hypot(dy[i] - my) > 0.25;
        if moving && mask.data()[i] == 1.0 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Losses of one pretraining iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRecord {
    pub iteration: usize,
    pub appearance_loss: f32,
    pub motion_loss: f32,
    pub lr: f64,
}

impl fmt::Display for PretrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} loss={:.6} lr={:.6e} appearance_loss={:.6} motion_loss={:.6}",
            self.iteration,
            self.appearance_loss + self.motion_loss,
            self.lr,
            self.appearance_loss,
            self.motion_loss
        )
    }
}

/// Trains the stream encoders frame by frame: the appearance encoder with
/// a throwaway 1x1 readout predicting the object mask, the motion encoder
/// predicting the independently moving pixels.
pub fn pretrain_streams(
    params: &mut ModelParams,
    dataset: &[VideoSample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&PretrainRecord),
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_57a9e_a);
    let stride = params.config.stride;
    let mut readout = params.appearance.as_ref().map(|a| {
        let mut head = HeadParams::<f32>::zeros(a.output_channels());
        head.w = xavier_init(head.w.shape(), &mut rng).expect("kernel shape");
        head
    });
    let mut app_opt = params
        .appearance
        .as_ref()
        .map(|a| OptimizerState::new(a, cfg.rho as f32, cfg.eps as f32));
    let mut head_opt = readout
        .as_ref()
        .map(|h| OptimizerState::new(h, cfg.rho as f32, cfg.eps as f32));
    let mut motion_opt = params
        .motion
        .as_ref()
        .map(|m| OptimizerState::new(m, cfg.rho as f32, cfg.eps as f32));
    let per_epoch = dataset.len().max(1);
    let clip = cfg.clip_bound as f32;
    let wd = cfg.weight_decay as f32;
    let plain = TrainConfig {
        aug_fraction: 0.0,
        ..cfg.clone()
    };

    for it in 0..cfg.pretrain_iterations {
        let lr = cfg.pretrain_lr * cfg.lr_decay.powi((it / per_epoch) as i32);
        let batch = make_batch(dataset, &plain, stride, &mut rng)?;
        let targets = batch.grid_masks()?;
        let mut record = PretrainRecord {
            iteration: it,
            appearance_loss: 0.0,
            motion_loss: 0.0,
            lr,
        };

        if let (Some(app), Some(head)) = (params.appearance.as_mut(), readout.as_mut()) {
            let mut probs = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for f in &batch.frames {
                let (feat, cache) = appearance_encode(f, app)?;
                probs.push(channel_softmax2(&head.logits(&feat)?)?);
                caches.push(cache);
            }
            let (loss, grad_logits) = bce_loss(&probs, &targets)?;
            let mut g_app = zeros_like(app);
            let mut g_head = zeros_like(head);
            for (cache, g) in caches.iter().zip(&grad_logits) {
                let (g_feat, gh) = head.backward(cache.output(), g)?;
                accumulate(&mut g_head, &gh)?;
                accumulate(&mut g_app, &app.backward(cache, &g_feat)?)?;
            }
            clip_gradients(&mut g_app, clip);
            clip_gradients(&mut g_head, clip);
            rmsprop_update(app, &g_app, app_opt.as_mut().expect("paired"), lr as f32, wd)?;
            rmsprop_update(head, &g_head, head_opt.as_mut().expect("paired"), lr as f32, wd)?;
            record.appearance_loss = loss;
        }

        if let Some(motion) = params.motion.as_mut() {
            let mut probs = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            let mut goals = Vec::with_capacity(batch.len());
            for t in 0..batch.len() {
                let (m, cache) = motion_encode(&batch.flow_angle[t], motion)?;
                probs.push(m);
                caches.push(cache);
                let target = independent_motion(&batch.masks[t], &batch.flow[t])?;
                goals.push(downsample_mask(&target, stride)?);
            }
            let (loss, grad_pre) = bce_sigmoid(&probs, &goals)?;
            let mut g = zeros_like(motion);
            for (cache, gp) in caches.iter().zip(&grad_pre) {
                accumulate(&mut g, &motion.backward_preact(cache, gp)?)?;
            }
            clip_gradients(&mut g, clip);
            rmsprop_update(motion, &g, motion_opt.as_mut().expect("paired"), lr as f32, wd)?;
            record.motion_loss = loss;
        }

        let total = record.appearance_loss + record.motion_loss;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at iteration {it}")));
        }
        on_record(&record);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_costs_ln2() {
        let p = vec![Tensor::<f64>::full(&[2, 3, 3], 0.5)];
        let y = vec![Tensor::from_fn(&[1, 3, 3], |i| (i % 2) as f64)];
        let (loss, _) = bce_loss(&p, &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        let y = Tensor::<f64>::from_fn(&[1, 2, 2], |i| (i % 2) as f64);
        let mut p = Tensor::zeros(&[2, 2, 2]);
        for i in 0..4 {
            p.data_mut()[4 + i] = y.data()[i];
            p.data_mut()[i] = 1.0 - y.data()[i];
        }
        let (loss, _) = bce_loss(&[p], &[y]).unwrap();
        assert!(loss < 1e-5);
    }

    #[test]
    fn non_binary_target_rejected() {
        let p = vec![Tensor::<f32>::full(&[2, 1, 1], 0.5)];
        assert!(bce_loss(&p, &[Tensor::full(&[1, 1, 1], 0.3)]).is_err());
    }

    #[test]
    fn clip_cases() {
        let mut t = Tensor::<f32>::new(&[4], vec![100.0, -100.0, 3.0, -50.0]).unwrap();
        clip_tensor(&mut t, 50.0);
        assert_eq!(t.data(), &[50.0, -50.0, 3.0, -50.0]);
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(&cfg, 0), 1e-4);
        assert!((lr_schedule(&cfg, 2) - 9.025e-5).abs() < 1e-18);
        for e in 0..100 {
            assert!(lr_schedule(&cfg, e + 1) <= lr_schedule(&cfg, e));
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = HeadParams::<f64>::zeros(1);
        p.w = Tensor::full(&[2, 1, 1, 1], 2.0);
        let g = zeros_like(&p);
        let mut st = OptimizerState::new(&p, 0.9, 1e-8);
        rmsprop_update(&mut p, &g, &mut st, 0.1, 0.005).unwrap();
        assert!((p.w.data()[0] - (2.0 - 0.1 * 0.005 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn stop_augmentation_freezes_tail() {
        let v = crate::dataio::generate_video(
            &crate::dataio::SynthOptions::default().sample("a", 1).unwrap(),
        )
        .unwrap();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = make_batch(&[v], &cfg, 4, &mut rng).unwrap();
        let s = augment_stop(&b, 5).unwrap();
        for t in 9..14 {
            assert_eq!(s.frames[t], s.frames[8]);
        }
        let o = s.motion_override.as_ref().unwrap();
        assert_eq!(o[3], downsample_nearest(&s.masks[3], 4).unwrap());
        assert_eq!(o[12].max_abs(), 0.0);
        let h = augment_static_start(&b, 5).unwrap();
        for t in 0..5 {
            assert_eq!(h.frames[t], h.frames[5]);
        }
        assert_eq!(h.len(), 14);
    }
}
