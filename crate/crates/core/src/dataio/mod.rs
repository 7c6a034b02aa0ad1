//! Dataset files, event-grouped splits and the synthetic scene generator.

mod pnm;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pnm::{
    load_image, load_mask, read_image_from, read_mask_from, save_image, save_mask, write_image_to,
    write_mask_to,
};

use crate::error::{Error, Result};
use crate::kem::KemConfig;
use crate::trainer::Sample;

/// Upper bound on frames per event (hourly captures of one day).
pub const MAX_FRAMES_PER_EVENT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Frames of one fog process; never split across partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FogEvent {
    pub event_id: String,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub splits: BTreeMap<Split, Vec<FogEvent>>,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn events(&self, split: Split) -> &[FogEvent] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn frames(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.events(split).iter().flat_map(|e| &e.frames)
    }

    /// Rejects repeated event ids, frames shared between events, and events
    /// without frames or with more than [`MAX_FRAMES_PER_EVENT`].
    pub fn validate(&self) -> Result<()> {
        let mut ids: BTreeMap<&str, Split> = BTreeMap::new();
        let mut files: BTreeMap<&Path, &str> = BTreeMap::new();
        for (&split, events) in &self.splits {
            for e in events {
                if let Some(prev) = ids.insert(&e.event_id, split) {
                    return Err(Error::Data(format!(
                        "event {:?} appears in both {} and {}",
                        e.event_id,
                        prev.name(),
                        split.name()
                    )));
                }
                if e.frames.is_empty() || e.frames.len() > MAX_FRAMES_PER_EVENT {
                    return Err(Error::Data(format!(
                        "event {:?} has {} frames",
                        e.event_id,
                        e.frames.len()
                    )));
                }
                for f in &e.frames {
                    for p in [&f.image, &f.mask] {
                        if let Some(other) = files.insert(p, &e.event_id) {
                            return Err(Error::Data(format!(
                                "file {} is shared by events {other:?} and {:?}",
                                p.display(),
                                e.event_id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Rewrites relative frame paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for f in self
            .splits
            .values_mut()
            .flatten()
            .flat_map(|e| e.frames.iter_mut())
        {
            for p in [&mut f.image, &mut f.mask] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// Reads and validates a manifest; relative frame paths are taken relative
/// to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    m.validate()?;
    m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Split sizes by largest remainder. `round(Σ fractions · n)` events are
/// assigned: floors first, then one each to the splits with the largest
/// fractional parts (earlier split on ties). Fractions summing to less than
/// one leave the remaining events out.
pub fn allocate(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || sum > 1.0 + 1e-9 || sum <= 0.0 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0,1] with a sum in (0,1]"
        )));
    }
    let exact = fractions.map(|f| f * n as f64);
    // nudge before flooring so 78/133 · 133 lands on 78, not 77.999…
    let mut sizes = exact.map(|x| (x + 1e-9).floor() as usize);
    let target = ((sum * n as f64).round() as usize).min(n);
    let mut rest = target.saturating_sub(sizes.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        (exact[b] - sizes[b] as f64)
            .total_cmp(&(exact[a] - sizes[a] as f64))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    Ok(sizes)
}

/// Event indices per split: a seeded permutation of `0..n` cut into sizes
/// from [`allocate`].
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if n < Split::ALL.len() {
        return Err(Error::Config(format!(
            "{n} events cannot fill {} splits",
            Split::ALL.len()
        )));
    }
    let sizes = allocate(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = order.into_iter();
    Ok(sizes.map(|k| it.by_ref().take(k).collect()))
}

/// Shuffles whole events with `seed` and cuts them into train/val/test
/// with sizes from [`allocate`].
pub fn split_by_event(
    events: Vec<FogEvent>,
    fractions: [f64; 3],
    seed: u64,
    image_size: usize,
) -> Result<DatasetManifest> {
    let parts = split_indices(events.len(), fractions, seed)?;
    let mut slots: Vec<Option<FogEvent>> = events.into_iter().map(Some).collect();
    let splits = Split::ALL
        .iter()
        .zip(parts)
        .map(|(&s, idx)| {
            (
                s,
                idx.into_iter()
                    .map(|i| slots[i].take().expect("indices are a permutation"))
                    .collect(),
            )
        })
        .collect();
    let m = DatasetManifest {
        splits,
        image_size,
        seed,
    };
    m.validate()?;
    Ok(m)
}

/// Loads every frame of `split` and computes its feature stack.
pub fn load_samples(
    manifest: &DatasetManifest,
    split: Split,
    kem: &KemConfig,
) -> Result<Vec<Sample>> {
    let frames: Vec<&Frame> = manifest.frames(split).collect();
    frames
        .par_iter()
        .map(|f| {
            let image = load_image(&f.image)?;
            let mask = load_mask(&f.mask)?;
            let (_, h, w) = image.dims3()?;
            if (h, w) != (mask.height, mask.width)
                || h != manifest.image_size
                || w != manifest.image_size
            {
                return Err(Error::Data(format!(
                    "{}: image {h}×{w}, mask {}×{}, manifest size {}",
                    f.image.display(),
                    mask.height,
                    mask.width,
                    manifest.image_size
                )));
            }
            Sample::new(image, mask, kem)
        })
        .collect()
}

/// Event ids per split, for reporting.
pub fn event_ids(manifest: &DatasetManifest) -> BTreeMap<Split, BTreeSet<String>> {
    manifest
        .splits
        .iter()
        .map(|(&s, evs)| (s, evs.iter().map(|e| e.event_id.clone()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(n: usize, frames: usize) -> Vec<FogEvent> {
        (0..n)
            .map(|i| FogEvent {
                event_id: format!("e{i:03}"),
                frames: (0..frames)
                    .map(|f| Frame {
                        image: format!("i{i}_{f}.ppm").into(),
                        mask: format!("m{i}_{f}.pgm").into(),
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(
            allocate(133, [78.0 / 133.0, 27.0 / 133.0, 27.0 / 133.0]).unwrap(),
            [78, 27, 27]
        );
        assert_eq!(allocate(3, [1.0 / 3.0; 3]).unwrap(), [1, 1, 1]);
        assert_eq!(allocate(40, [0.6, 0.2, 0.2]).unwrap(), [24, 8, 8]);
        assert_eq!(allocate(10, [0.55, 0.25, 0.2]).unwrap(), [6, 2, 2]);
        assert!(allocate(10, [0.5, 0.5, 0.5]).is_err());
        assert!(allocate(10, [0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn split_is_event_disjoint_and_seeded() {
        let m = split_by_event(
            events(133, 2),
            [78.0 / 133.0, 27.0 / 133.0, 27.0 / 133.0],
            5,
            64,
        )
        .unwrap();
        assert_eq!(Split::ALL.map(|s| m.events(s).len()), [78, 27, 27]);
        let ids = event_ids(&m);
        let all: BTreeSet<&String> = ids.values().flatten().collect();
        assert_eq!(all.len(), 132);
        assert_eq!(
            m,
            split_by_event(
                events(133, 2),
                [78.0 / 133.0, 27.0 / 133.0, 27.0 / 133.0],
                5,
                64
            )
            .unwrap()
        );
        assert_ne!(
            m,
            split_by_event(
                events(133, 2),
                [78.0 / 133.0, 27.0 / 133.0, 27.0 / 133.0],
                6,
                64
            )
            .unwrap()
        );

        let three = split_by_event(events(3, 1), [1.0 / 3.0; 3], 0, 64).unwrap();
        assert!(Split::ALL.iter().all(|&s| three.events(s).len() == 1));
        assert!(matches!(
            split_by_event(events(2, 1), [0.5, 0.25, 0.25], 0, 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_leakage() {
        let mut m = split_by_event(events(6, 2), [0.5, 0.25, 0.25], 1, 64).unwrap();
        let leaked = m.events(Split::Train)[0].clone();
        m.splits.get_mut(&Split::Test).unwrap().push(leaked.clone());
        assert!(m.validate().is_err());

        let mut m = split_by_event(events(6, 2), [0.5, 0.25, 0.25], 1, 64).unwrap();
        let mut renamed = leaked;
        renamed.event_id = "other".into();
        m.splits.get_mut(&Split::Val).unwrap().push(renamed);
        assert!(m.validate().is_err());

        let mut m = split_by_event(events(6, 2), [0.5, 0.25, 0.25], 1, 64).unwrap();
        m.splits.get_mut(&Split::Val).unwrap()[0].frames.clear();
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_json_schema_and_paths() {
        let m = split_by_event(events(3, 1), [1.0 / 3.0; 3], 2, 32).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["image_size"], 32);
        assert_eq!(v["seed"], 2);
        assert!(v["splits"]["train"][0]["event_id"].is_string());
        assert!(v["splits"]["val"][0]["frames"][0]["image"].is_string());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        save_manifest(&p, &m).unwrap();
        let back = load_manifest(&p).unwrap();
        let f = back.frames(Split::Test).next().unwrap();
        assert!(f.image.starts_with(dir.path()));
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Parse { .. })));
    }
}
