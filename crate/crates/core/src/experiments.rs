//! Ablation variants and the identically seeded runner behind `fogstat ablate`.
//!
//! Toggle names:
//!
//! | toggle          | variant                                                |
//! |-----------------|--------------------------------------------------------|
//! | `complete`      | the base configuration unchanged                       |
//! | `base`          | visual branch only                                     |
//! | `base+<name>`   | one statistical channel, e.g. `base+energy`            |
//! | `no-fs`         | feature-selection gates removed                        |
//! | `block<k>`      | statistics fused only at the `k`-th decoder stage      |
//!
//! Decoder stages are counted in upsampling order, so `block1` is the deepest
//! scale.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::split_indices;
use crate::dataio::synth::{synth_events, SynthConfig};
use crate::dbsfnet::ModelConfig;
use crate::error::{Error, Result};
use crate::kem::{feature_index, standardize_channels, FeatureStack, KemConfig, FEATURE_NAMES};
use crate::metrics::metrics_from_confusion;
use crate::trainer::{evaluate, train, Sample, TrainConfig, TrainStatus};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// Builds one variant per toggle. An empty toggle list yields the single
/// `complete` baseline.
pub fn ablation_variants(base: &ModelConfig, toggles: &[String]) -> Result<Vec<Variant>> {
    if toggles.is_empty() {
        return Ok(vec![Variant {
            name: "complete".into(),
            model: base.clone(),
        }]);
    }
    let mut out: Vec<Variant> = Vec::with_capacity(toggles.len());
    for t in toggles {
        if out.iter().any(|v| &v.name == t) {
            return Err(Error::Config(format!("toggle {t:?} listed twice")));
        }
        let model = variant_config(base, t)?;
        model.validate()?;
        out.push(Variant {
            name: t.clone(),
            model,
        });
    }
    Ok(out)
}

fn variant_config(base: &ModelConfig, toggle: &str) -> Result<ModelConfig> {
    let mut m = base.clone();
    match toggle {
        "complete" => {}
        "base" => m.feature_channels.clear(),
        "no-fs" => m.feature_selection = false,
        _ => {
            if let Some(name) = toggle.strip_prefix("base+") {
                let idx = feature_index(name).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown feature {name:?}; expected one of {FEATURE_NAMES:?}"
                    ))
                })?;
                m.feature_channels = vec![idx];
            } else if let Some(k) = toggle
                .strip_prefix("block")
                .and_then(|k| k.parse::<usize>().ok())
            {
                if k == 0 || k > m.depth {
                    return Err(Error::Config(format!(
                        "{toggle}: block must be in 1..={}",
                        m.depth
                    )));
                }
                m.fusion_scales = Some(vec![m.depth + 1 - k]);
            } else {
                return Err(Error::Config(format!("unknown ablation toggle {toggle:?}")));
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub miou: f64,
    pub f1: f64,
    pub kappa: f64,
    pub csi: f64,
}

/// Trains every variant with the same `config` (hence the same seed and
/// batch order) and scores it on `test`.
pub fn run_ablation(
    variants: &[Variant],
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let outcome = train(&v.model, config, train_set, val_set)?;
            if let TrainStatus::Diverged { reason, .. } = outcome.status {
                return Err(Error::Numeric(format!("variant {}: {reason}", v.name)));
            }
            let (_, counts) = evaluate(&outcome.net, test_set)?;
            let r = metrics_from_confusion(counts);
            Ok(AblationRow {
                variant: v.name.clone(),
                miou: r.miou,
                f1: r.f1,
                kappa: r.kappa,
                csi: r.csi,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "variant,miou,f1,kappa,csi")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.miou, r.f1, r.kappa, r.csi
        )?;
    }
    Ok(())
}

/// Train, validation and test samples of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SampleSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates the synthetic dataset in memory and splits it by event exactly
/// as `synth_dataset` does on disk.
pub fn synthetic_splits(cfg: &SynthConfig, kem: &KemConfig) -> Result<SampleSplits> {
    let events = synth_events(cfg)?;
    let [tr, va, te] = split_indices(events.len(), cfg.fractions, cfg.seed)?;
    // the generator already computed raw default-geometry features
    let reuse =
        kem.patch == KemConfig::default().patch && kem.levels == KemConfig::default().levels;
    let load = |idx: &[usize]| -> Result<Vec<Sample>> {
        let frames: Vec<_> = idx.iter().flat_map(|&i| &events[i]).collect();
        frames
            .par_iter()
            .map(|f| {
                if !reuse {
                    return Sample::new(f.image.clone(), f.mask.clone(), kem);
                }
                let mut t = f.raw_features.tensor().clone();
                if kem.standardize {
                    standardize_channels(&mut t)?;
                }
                Ok(Sample {
                    image: f.image.clone(),
                    mask: f.mask.clone(),
                    feats: FeatureStack::new(t)?,
                })
            })
            .collect()
    };
    Ok(SampleSplits {
        train: load(&tr)?,
        val: load(&va)?,
        test: load(&te)?,
    })
}
