//! Loss, optimiser, learning-rate schedule, augmentation and the training
//! loop.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dbsfnet::{predict_mask, DbSfNet, MaskImage, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::kem::{kem_transform, FeatureStack, KemConfig};
use crate::metrics::{confusion, metrics_from_confusion, ConfusionCounts};
use crate::ndtensor::{softmax_channels, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Cosine decay ends at `lr0 * LR_FLOOR_FRACTION`.
pub const LR_FLOOR_FRACTION: f64 = 0.01;

/// Mean per-pixel softmax cross-entropy and its gradient w.r.t. the logits.
pub fn loss(logits: &Tensor, mask: &MaskImage) -> Result<(f64, Tensor)> {
    weighted_loss(logits, mask, 1.0)
}

/// Cross-entropy with foreground pixels weighted by `fg_weight`, normalised
/// by the total weight. `fg_weight = 1` is the plain mean.
pub fn weighted_loss(logits: &Tensor, mask: &MaskImage, fg_weight: f64) -> Result<(f64, Tensor)> {
    let (k, h, w) = logits.dims3()?;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::shape(
            "loss",
            format!("logits {h}×{w} vs mask {}×{}", mask.height, mask.width),
        ));
    }
    let probs = softmax_channels(logits)?;
    let hw = h * w;
    let weights: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m == 1 { fg_weight } else { 1.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut grad = probs.clone();
    let mut l = 0.0;
    for (i, &m) in mask.data().iter().enumerate() {
        let target = m as usize;
        // log-softmax straight from the logits keeps confident pixels exact
        let max = (0..k)
            .map(|c| logits.data()[c * hw + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..k)
                .map(|c| (logits.data()[c * hw + i] - max).exp())
                .sum::<f64>()
                .ln();
        l += weights[i] * (lse - logits.data()[target * hw + i]);
        for c in 0..k {
            let g = &mut grad.data_mut()[c * hw + i];
            *g = weights[i] * (*g - (c == target) as u8 as f64) / total;
        }
    }
    Ok((l / total, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_prob: f64,
    pub rotate_prob: f64,
    pub erase_prob: f64,
    /// Speckle factors are `1 + U(−a, a)`.
    pub speckle_amplitude: f64,
    pub max_angle_deg: f64,
    /// Erased rectangle area as a fraction of the foreground bounding box.
    pub erase_min_fraction: f64,
    pub erase_max_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_prob: 0.2,
            rotate_prob: 0.5,
            erase_prob: 0.2,
            speckle_amplitude: 0.15,
            max_angle_deg: 20.0,
            erase_min_fraction: 0.05,
            erase_max_fraction: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            noise_prob: 0.0,
            rotate_prob: 0.0,
            erase_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise", self.noise_prob),
            ("rotate", self.rotate_prob),
            ("erase", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} probability {p} outside [0,1]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.speckle_amplitude) || self.max_angle_deg < 0.0 {
            return Err(Error::Config(
                "speckle amplitude must be in [0,1) and angle non-negative".into(),
            ));
        }
        if !(0.0 < self.erase_min_fraction
            && self.erase_min_fraction <= self.erase_max_fraction
            && self.erase_max_fraction <= 1.0)
        {
            return Err(Error::Config(
                "erase fractions must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Linear warmup length; `None` means 5% of `total_iters`.
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Loss weight of foreground pixels; 1 disables weighting.
    pub foreground_weight: f64,
    /// Validation interval in iterations; 0 evaluates only after the last.
    pub eval_every: usize,
    pub kem: KemConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            warmup_steps: None,
            batch_size: 12,
            total_iters: 8660,
            seed: 0,
            augment: AugmentConfig::default(),
            foreground_weight: 1.0,
            eval_every: 0,
            kem: KemConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(Error::Config(
                "batch_size and total_iters must be positive".into(),
            ));
        }
        if self.warmup() > self.total_iters {
            return Err(Error::Config("warmup longer than training".into()));
        }
        if !(self.foreground_weight > 0.0) {
            return Err(Error::Config("foreground weight must be positive".into()));
        }
        self.augment.validate()?;
        self.kem.validate()
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_iters / 20)
    }
}

/// Learning rate at `step ∈ [0, total_iters]`: linear ramp from 0 to `lr0`
/// over the warmup, then cosine decay from `lr0` to `lr0 / 100`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let warm = config.warmup();
    let total = config.total_iters;
    let lr0 = config.lr0;
    if step < warm {
        return lr0 * step as f64 / warm as f64;
    }
    if total <= warm {
        return lr0;
    }
    let p = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    let floor = lr0 * LR_FLOOR_FRACTION;
    floor + (lr0 - floor) * 0.5 * (1.0 + (PI * p).cos())
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            step: 0,
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
        }
    }

    /// Applies one update; non-finite gradients leave everything untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at optimiser step {}",
                self.step + 1
            )));
        }
        for (path, p) in params.iter() {
            let g = grads.get(path)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "{path}: gradient {:?} vs parameter {:?}",
                        g.shape(),
                        p.shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (path, p) in params.iter_mut() {
            let g = grads.get(path)?.data();
            let m = self
                .m
                .get_mut(path)
                .expect("moment mirrors parameters")
                .data_mut();
            let v = self
                .v
                .get_mut(path)
                .expect("moment mirrors parameters")
                .data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data_mut()[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Which augmentations fired for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentRecord {
    pub noise: bool,
    /// Clockwise angle in degrees.
    pub rotation: Option<f64>,
    /// `(top, left, height, width)` of the zeroed rectangle.
    pub erased: Option<(usize, usize, usize, usize)>,
}

impl AugmentRecord {
    pub fn any(&self) -> bool {
        self.noise || self.rotation.is_some() || self.erased.is_some()
    }
}

/// Reflects a continuous coordinate into `[0, n − 1]` without repeating the
/// edge sample.
fn reflect_coord(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let r = v.rem_euclid(period);
    if r > (n - 1) as f64 {
        period - r
    } else {
        r
    }
}

/// Rotates every channel clockwise by `deg` about the image centre;
/// bilinear sampling with reflected borders.
pub fn rotate_image(image: &Tensor, deg: f64) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let (s, co) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::image(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = reflect_coord(cy - dx * s + dy * co, h);
            let sx = reflect_coord(cx + dx * co + dy * s, w);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let v = (1.0 - fy)
                    * ((1.0 - fx) * image.at(ch, y0, x0) + fx * image.at(ch, y0, x1))
                    + fy * ((1.0 - fx) * image.at(ch, y1, x0) + fx * image.at(ch, y1, x1));
                out.set(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour counterpart of [`rotate_image`] for masks.
pub fn rotate_mask(mask: &MaskImage, deg: f64) -> MaskImage {
    let (h, w) = (mask.height, mask.width);
    let (s, co) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = MaskImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = reflect_coord(cy - dx * s + dy * co, h).round() as usize;
            let sx = reflect_coord(cx + dx * co + dy * s, w).round() as usize;
            out.set(y, x, mask.get(sy.min(h - 1), sx.min(w - 1)) == 1);
        }
    }
    out
}

/// `(top, left, height, width)` of the foreground, or the whole image when
/// the mask is empty.
fn foreground_bbox(mask: &MaskImage) -> (usize, usize, usize, usize) {
    let (mut t, mut l, mut b, mut r) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) == 1 {
                t = t.min(y);
                l = l.min(x);
                b = b.max(y);
                r = r.max(x);
            }
        }
    }
    if t == usize::MAX {
        (0, 0, mask.height, mask.width)
    } else {
        (t, l, b - t + 1, r - l + 1)
    }
}

/// Speckle noise, then rotation, then random erasing, each with its own
/// probability. The mask changes only under rotation.
pub fn augment<R: Rng>(
    image: &Tensor,
    mask: &MaskImage,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<(Tensor, MaskImage, AugmentRecord)> {
    let noise = rng.gen::<f64>() < config.noise_prob;
    let rotate = rng.gen::<f64>() < config.rotate_prob;
    let erase = rng.gen::<f64>() < config.erase_prob;
    let mut rec = AugmentRecord {
        noise,
        ..Default::default()
    };
    let mut img = image.clone();
    let mut msk = mask.clone();

    if noise {
        let a = config.speckle_amplitude;
        for v in img.data_mut() {
            let f = if a > 0.0 {
                1.0 + rng.gen_range(-a..a)
            } else {
                1.0
            };
            *v = (*v * f).clamp(0.0, 255.0);
        }
    }
    if rotate {
        let m = config.max_angle_deg;
        let deg = if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        img = rotate_image(&img, deg)?;
        msk = rotate_mask(&msk, deg);
        rec.rotation = Some(deg);
    }
    if erase {
        let (bt, bl, bh, bw) = foreground_bbox(&msk);
        let frac = rng.gen_range(config.erase_min_fraction..=config.erase_max_fraction);
        let eh = ((bh as f64 * frac.sqrt()).round() as usize).clamp(1, bh);
        let ew = ((bw as f64 * frac.sqrt()).round() as usize).clamp(1, bw);
        let top = bt + rng.gen_range(0..=bh - eh);
        let left = bl + rng.gen_range(0..=bw - ew);
        let (c, _, _) = img.dims3()?;
        for ch in 0..c {
            for y in top..top + eh {
                for x in left..left + ew {
                    img.set(ch, y, x, 0.0);
                }
            }
        }
        rec.erased = Some((top, left, eh, ew));
    }
    Ok((img, msk, rec))
}

/// One training or evaluation example with its cached feature stack.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub mask: MaskImage,
    pub feats: FeatureStack,
}

impl Sample {
    pub fn new(image: Tensor, mask: MaskImage, kem: &KemConfig) -> Result<Self> {
        let feats = kem_transform(&image, kem)?;
        Ok(Sample { image, mask, feats })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_csi: Option<f64>,
}

pub fn write_log_csv<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "step,lr,train_loss,val_loss,val_csi")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step,
            r.lr,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_csi)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped before `step`; the returned network holds the
    /// parameters after the last successful update.
    Diverged {
        step: usize,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: DbSfNet,
    pub log: Vec<LogRow>,
    pub status: TrainStatus,
}

/// Mean loss and pooled confusion over `samples` at the model threshold.
pub fn evaluate(net: &DbSfNet, samples: &[Sample]) -> Result<(f64, ConfusionCounts)> {
    let results: Vec<Result<(f64, ConfusionCounts)>> = samples
        .par_iter()
        .map(|s| {
            let logits = net.forward(&s.image, &s.feats)?;
            let (l, _) = loss(&logits, &s.mask)?;
            let c = confusion(
                &predict_mask(&logits, net.config().threshold)?,
                &s.mask,
                None,
            )?;
            Ok((l, c))
        })
        .collect();
    let mut total = 0.0;
    let mut counts = ConfusionCounts::default();
    for r in results {
        let (l, c) = r?;
        total += l;
        counts += c;
    }
    Ok((total / samples.len().max(1) as f64, counts))
}

fn sample_gradient(
    net: &DbSfNet,
    sample: &Sample,
    seed: u64,
    config: &TrainConfig,
) -> Result<(f64, ModelParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, mask, rec) = augment(&sample.image, &sample.mask, &mut rng, &config.augment)?;
    let recompute = rec.any() && net.config().uses_statistics();
    let fresh;
    let feats = if recompute {
        fresh = kem_transform(&image, &config.kem)?;
        &fresh
    } else {
        &sample.feats
    };
    let cache = net.forward_cached(&image, feats)?;
    let (l, d) = weighted_loss(&cache.logits, &mask, config.foreground_weight)?;
    Ok((l, net.backward(&cache, &d)?))
}

/// Trains a freshly initialised network. Samples within a minibatch run in
/// parallel; their gradients are summed in sample order, so results do not
/// depend on the thread count.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    let net = DbSfNet::new(model.clone(), config.seed)?;
    train_from(net, config, train_set, val_set)
}

pub fn train_from(
    mut net: DbSfNet,
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut adam = Adam::new(net.params());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.total_iters);

    for step in 0..config.total_iters {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                // reversed so that pop() walks a fresh permutation front to back
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                order.reverse();
            }
            batch.push((order.pop().expect("refilled above"), rng.gen::<u64>()));
        }
        let results: Vec<Result<(f64, ModelParams)>> = batch
            .par_iter()
            .map(|&(i, seed)| sample_gradient(&net, &train_set[i], seed, config))
            .collect();

        let mut grads: Option<ModelParams> = None;
        let mut batch_loss = 0.0;
        for r in results {
            let (l, g) = r?;
            batch_loss += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.accumulate(&g)?,
            }
        }
        let mut grads = grads.expect("batch_size > 0");
        let k = 1.0 / config.batch_size as f64;
        grads.scale(k);
        batch_loss *= k;

        // updates use the post-step rate so that no update has lr = 0
        let lr = lr_at(step + 1, config);
        if !batch_loss.is_finite() {
            let reason = format!("training loss {batch_loss} at iteration {step}");
            return Ok(TrainOutcome {
                net,
                log,
                status: TrainStatus::Diverged { step, reason },
            });
        }
        if let Err(e) = adam.step(net.params_mut(), &grads, lr) {
            return Ok(TrainOutcome {
                net,
                log,
                status: TrainStatus::Diverged {
                    step,
                    reason: e.to_string(),
                },
            });
        }

        let last = step + 1 == config.total_iters;
        let due = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        let (val_loss, val_csi) = if !val_set.is_empty() && (last || due) {
            let (vl, c) = evaluate(&net, val_set)?;
            (Some(vl), Some(metrics_from_confusion(c).csi))
        } else {
            (None, None)
        };
        log.push(LogRow {
            step: step + 1,
            lr,
            train_loss: batch_loss,
            val_loss,
            val_csi,
        });
    }
    Ok(TrainOutcome {
        net,
        log,
        status: TrainStatus::Completed,
    })
}
