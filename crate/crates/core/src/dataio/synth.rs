//! Procedural fog/cloud scenes.
//!
//! A dark, slightly blue sea carries soft-edged blobs of two kinds at similar
//! brightness: fog, whose texture is a blurred low-frequency field, and
//! cloud, which adds strong per-pixel grain on top. Only fog is labelled.
//! An event is a short sequence in which every blob drifts and slowly
//! changes size.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{save_image, save_mask, split_by_event, DatasetManifest, FogEvent, Frame};
use crate::dbsfnet::MaskImage;
use crate::error::{Error, Result};
use crate::kem::{feature_index, kem_transform_raw, reflect_index, FeatureStack, KemConfig};
use crate::ndtensor::Tensor;

/// Attempts before the homogeneity self-check gives up.
pub const MAX_ATTEMPTS: usize = 5;
/// Opacity above which a pixel counts as the interior of a blob.
pub const INTERIOR: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub size: usize,
    pub fog_blobs: usize,
    /// Mean blob radius as a fraction of the image side.
    pub fog_scale: f64,
    pub cloud_blobs: usize,
    pub cloud_scale: f64,
    pub sea_level: f64,
    pub fog_level: f64,
    pub cloud_level: f64,
    /// Amplitude of the smooth brightness variation inside fog and cloud.
    pub smooth_amplitude: f64,
    /// Amplitude of the per-pixel grain that only clouds carry.
    pub cloud_grain: f64,
    /// Gaussian blur of the smooth texture field, in pixels.
    pub blur_sigma: f64,
    pub noise_floor: f64,
    /// Blob displacement per frame, in pixels.
    pub drift: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            size: 64,
            fog_blobs: 2,
            fog_scale: 0.2,
            cloud_blobs: 2,
            cloud_scale: 0.16,
            sea_level: 60.0,
            fog_level: 185.0,
            cloud_level: 185.0,
            smooth_amplitude: 10.0,
            cloud_grain: 40.0,
            blur_sigma: 4.0,
            noise_floor: 2.0,
            drift: 1.5,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!(
                "scene size {} is too small",
                self.size
            )));
        }
        if self.blur_sigma < 0.0
            || self.noise_floor < 0.0
            || self.cloud_grain < 0.0
            || self.smooth_amplitude < 0.0
        {
            return Err(Error::Config(
                "texture amplitudes and blur must be non-negative".into(),
            ));
        }
        if !(self.fog_scale > 0.0 && self.cloud_scale > 0.0) {
            return Err(Error::Config("blob scales must be positive".into()));
        }
        Ok(())
    }
}

/// One rendered frame with the per-pixel opacities used to label it.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub image: Tensor,
    pub mask: MaskImage,
    pub fog_opacity: Vec<f64>,
    pub cloud_opacity: Vec<f64>,
    /// Unstandardised default-configuration features, from the self-check.
    pub raw_features: FeatureStack,
}

impl SynthFrame {
    pub fn is_fog_interior(&self, i: usize) -> bool {
        self.fog_opacity[i] > INTERIOR && self.cloud_opacity[i] < 1.0 - INTERIOR
    }

    pub fn is_cloud_interior(&self, i: usize) -> bool {
        self.cloud_opacity[i] > INTERIOR
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    harmonics: [(f64, f64); 3],
    vy: f64,
    vx: f64,
    growth: f64,
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, size: usize, scale: f64, drift: f64) -> Self {
        let n = size as f64;
        let heading = rng.gen_range(0.0..2.0 * PI);
        Blob {
            cy: rng.gen_range(0.15..0.85) * n,
            cx: rng.gen_range(0.15..0.85) * n,
            radius: scale * n * rng.gen_range(0.7..1.3),
            aspect: rng.gen_range(0.7..1.4),
            angle: rng.gen_range(0.0..PI),
            harmonics: [(); 3].map(|_| (rng.gen_range(0.0..0.12), rng.gen_range(0.0..2.0 * PI))),
            vy: drift * heading.sin(),
            vx: drift * heading.cos(),
            growth: rng.gen_range(-0.03..0.03),
        }
    }

    /// Opacity in `[0, 1]` with a soft edge about 1.5 px wide.
    fn opacity(&self, y: f64, x: f64, frame: usize) -> f64 {
        let f = frame as f64;
        let (dy, dx) = (y - (self.cy + self.vy * f), x - (self.cx + self.vx * f));
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.aspect.sqrt();
        let v = (-dx * s + dy * c) * self.aspect.sqrt();
        let d = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, p))| a * ((k + 2) as f64 * phi + p).cos())
            .sum();
        let r = self.radius * (1.0 + self.growth * f).max(0.2) * (1.0 + wobble);
        (0.5 + (r - d) / 3.0).clamp(0.0, 1.0)
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = (-r..=r)
                .map(|i| {
                    k[(i + r) as usize] * plane[y * width + reflect_index(x as isize + i, width)]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = (-r..=r)
                .map(|i| {
                    k[(i + r) as usize] * tmp[reflect_index(y as isize + i, height) * width + x]
                })
                .sum();
        }
    }
    out
}

/// Blurred white noise rescaled to zero mean and unit standard deviation.
fn smooth_field<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut f = gaussian_blur(&noise, n, n, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64)
        .sqrt()
        .max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    f
}

const SEA_TINT: [f64; 3] = [0.7, 0.95, 1.35];

fn render(
    p: &SceneParams,
    fog: &[Blob],
    cloud: &[Blob],
    frame: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, MaskImage, Vec<f64>, Vec<f64>) {
    let n = p.size;
    let opacity = |blobs: &[Blob]| -> Vec<f64> {
        (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64, (i % n) as f64);
                blobs
                    .iter()
                    .map(|b| b.opacity(y, x, frame))
                    .fold(0.0, f64::max)
            })
            .collect()
    };
    let a_fog = opacity(fog);
    let a_cloud = opacity(cloud);
    let sea_wave = smooth_field(rng, n, 2.0);
    let fog_tex = smooth_field(rng, n, p.blur_sigma);
    let cloud_tex = smooth_field(rng, n, p.blur_sigma);

    let mut img = Tensor::image(3, n, n);
    let mut mask = MaskImage::zeros(n, n);
    for i in 0..n * n {
        let sea = p.sea_level + 4.0 * sea_wave[i];
        let fog_v = p.fog_level + p.smooth_amplitude * fog_tex[i];
        let grain = if p.cloud_grain > 0.0 {
            p.cloud_grain * rng.gen_range(-1.0..1.0)
        } else {
            0.0
        };
        let cloud_v = p.cloud_level + p.smooth_amplitude * cloud_tex[i] + grain;
        for (c, tint) in SEA_TINT.iter().enumerate() {
            let under = sea * tint * (1.0 - a_fog[i]) + fog_v * a_fog[i];
            let v = under * (1.0 - a_cloud[i]) + cloud_v * a_cloud[i];
            let floor = if p.noise_floor > 0.0 {
                p.noise_floor * rng.gen_range(-1.0..1.0)
            } else {
                0.0
            };
            img.data_mut()[c * n * n + i] = (v + floor).clamp(0.0, 255.0);
        }
        mask.set(i / n, i % n, a_fog[i] > 0.5 && a_cloud[i] <= 0.5);
    }
    (img, mask, a_fog, a_cloud)
}

fn interior_homogeneity(f: &SynthFrame) -> (Option<f64>, Option<f64>) {
    let hom = f
        .raw_features
        .tensor()
        .channel(feature_index("homogeneity").expect("known feature"));
    let mean = |pick: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = (0..hom.len())
            .filter(|&i| pick(i))
            .map(|i| hom[i])
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (
        mean(&|i| f.is_fog_interior(i)),
        mean(&|i| f.is_cloud_interior(i)),
    )
}

/// Renders `frames` consecutive frames of one event. Every frame must show
/// higher mean homogeneity inside fog than inside cloud; otherwise the event
/// is redrawn, at most [`MAX_ATTEMPTS`] times.
pub fn synth_event(params: &SceneParams, frames: usize) -> Result<Vec<SynthFrame>> {
    params.validate()?;
    let kem = KemConfig {
        standardize: false,
        ..KemConfig::default()
    };
    for attempt in 0..MAX_ATTEMPTS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(
            params
                .seed
                .wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        );
        let fog: Vec<Blob> = (0..params.fog_blobs)
            .map(|_| Blob::random(&mut rng, params.size, params.fog_scale, params.drift))
            .collect();
        let cloud: Vec<Blob> = (0..params.cloud_blobs)
            .map(|_| Blob::random(&mut rng, params.size, params.cloud_scale, params.drift))
            .collect();
        let mut out = Vec::with_capacity(frames);
        let mut ok = true;
        for f in 0..frames {
            let (image, mask, fog_opacity, cloud_opacity) =
                render(params, &fog, &cloud, f, &mut rng);
            let raw_features = kem_transform_raw(&image, &kem)?;
            let frame = SynthFrame {
                image,
                mask,
                fog_opacity,
                cloud_opacity,
                raw_features,
            };
            if let (Some(h_fog), Some(h_cloud)) = interior_homogeneity(&frame) {
                if h_fog <= h_cloud {
                    ok = false;
                    break;
                }
            }
            out.push(frame);
        }
        if ok {
            return Ok(out);
        }
    }
    Err(Error::Config(format!(
        "scene parameters failed the fog/cloud homogeneity check {MAX_ATTEMPTS} times (seed {})",
        params.seed
    )))
}

/// A single frame.
pub fn synth_scene(params: &SceneParams) -> Result<SynthFrame> {
    Ok(synth_event(params, 1)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub events: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    /// Template for every event; blob counts and seeds vary per event.
    pub scene: SceneParams,
    pub max_fog_blobs: usize,
    pub max_cloud_blobs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            events: 40,
            frames: 8,
            size: 64,
            seed: 7,
            fractions: [0.6, 0.2, 0.2],
            scene: SceneParams::default(),
            max_fog_blobs: 3,
            max_cloud_blobs: 3,
        }
    }
}

/// Per-event scene parameters drawn from the configuration seed.
pub fn event_params(cfg: &SynthConfig) -> Vec<SceneParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.events)
        .map(|_| SceneParams {
            size: cfg.size,
            fog_blobs: rng.gen_range(1..=cfg.max_fog_blobs.max(1)),
            cloud_blobs: rng.gen_range(1..=cfg.max_cloud_blobs.max(1)),
            seed: rng.gen(),
            ..cfg.scene.clone()
        })
        .collect()
}

/// All events in memory, in event order.
pub fn synth_events(cfg: &SynthConfig) -> Result<Vec<Vec<SynthFrame>>> {
    if cfg.frames == 0 || cfg.frames > super::MAX_FRAMES_PER_EVENT {
        return Err(Error::Config(format!(
            "frames per event must be in 1..={}",
            super::MAX_FRAMES_PER_EVENT
        )));
    }
    event_params(cfg)
        .par_iter()
        .map(|p| synth_event(p, cfg.frames))
        .collect()
}

pub fn event_id(index: usize) -> String {
    format!("event{index:03}")
}

/// Writes every frame under `out_dir/{images,masks}` and returns the
/// event-split manifest with paths relative to `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let events = synth_events(cfg)?;
    let mut fog_events = Vec::with_capacity(events.len());
    for (ei, frames) in events.iter().enumerate() {
        let id = event_id(ei);
        let mut list = Vec::with_capacity(frames.len());
        for (fi, f) in frames.iter().enumerate() {
            let frame = Frame {
                image: format!("images/{id}_f{fi}.ppm").into(),
                mask: format!("masks/{id}_f{fi}.pgm").into(),
            };
            save_image(out_dir.join(&frame.image), &f.image)?;
            save_mask(out_dir.join(&frame.mask), &f.mask)?;
            list.push(frame);
        }
        fog_events.push(FogEvent {
            event_id: id,
            frames: list,
        });
    }
    split_by_event(fog_events, cfg.fractions, cfg.seed, cfg.size)
}
