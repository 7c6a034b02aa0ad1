//! Knowledge extraction: per-pixel gray-level co-occurrence statistics.
//!
//! Every pixel of the grayscale image is the centre of a `t × t` patch. The
//! patch is quantised to each configured bit depth `α`, a symmetric
//! co-occurrence matrix is accumulated over four neighbour offsets, and eight
//! statistics are averaged over the levels. The result is an `8 × H × W`
//! [`FeatureStack`] with channels in [`FEATURE_NAMES`] order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

pub const NUM_FEATURES: usize = 8;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "mean",
    "variance",
    "homogeneity",
    "contrast",
    "dissimilarity",
    "entropy",
    "energy",
    "correlation",
];

/// `(row, col)` neighbour offsets: right, down, down-right, up-right.
pub const OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (-1, 1)];

/// Below this variance a level's correlation is defined as 1.
pub const CORRELATION_VARIANCE_GUARD: f64 = 1e-12;

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

/// Integer-valued grayscale image in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "gray_image",
                format!("{}×{} needs {} values", height, width, height * width),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

/// Channel mean of each pixel, rounded to the nearest integer gray value.
pub fn grayscale(image: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = image.dims3()?;
    if c == 0 {
        return Err(Error::shape("grayscale", "image has no channels"));
    }
    let data = (0..h * w)
        .map(|p| {
            let mean = (0..c).map(|ch| image.data()[ch * h * w + p]).sum::<f64>() / c as f64;
            mean.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(h, w, data)
}

/// Side length of the square patch centred on every pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct PatchSpec {
    side: usize,
}

impl PatchSpec {
    pub fn new(side: usize) -> Result<Self> {
        if side < 3 || side.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch side must be odd and >= 3, got {side}"
            )));
        }
        Ok(PatchSpec { side })
    }

    pub fn side(self) -> usize {
        self.side
    }

    pub fn radius(self) -> usize {
        self.side / 2
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { side: 7 }
    }
}

impl TryFrom<usize> for PatchSpec {
    type Error = Error;
    fn try_from(side: usize) -> Result<Self> {
        PatchSpec::new(side)
    }
}

impl From<PatchSpec> for usize {
    fn from(p: PatchSpec) -> usize {
        p.side
    }
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge
/// sample (`-1 → 1`, `n → n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Square grid of gray values, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub side: usize,
    pub values: Vec<u8>,
}

pub fn extract_patch(gray: &GrayImage, center: (usize, usize), spec: PatchSpec) -> Patch {
    let r = spec.radius() as isize;
    let mut values = Vec::with_capacity(spec.side() * spec.side());
    for dy in -r..=r {
        let row = reflect_index(center.0 as isize + dy, gray.height);
        for dx in -r..=r {
            let col = reflect_index(center.1 as isize + dx, gray.width);
            values.push(gray.get(row, col));
        }
    }
    Patch {
        side: spec.side(),
        values,
    }
}

/// Patch reduced to `2^alpha` gray levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedPatch {
    pub side: usize,
    pub alpha: u8,
    pub values: Vec<u8>,
}

impl QuantizedPatch {
    pub fn levels(&self) -> usize {
        1 << self.alpha
    }
}

fn check_alpha(alpha: u8) -> Result<()> {
    if !(1..=8).contains(&alpha) {
        return Err(Error::Config(format!(
            "gray level bit depth must be in 1..=8, got {alpha}"
        )));
    }
    Ok(())
}

/// `⌈(x + 1)·2^(α−8)⌉ − 1`, which for integer `x ≥ 0` is `⌊x / 2^(8−α)⌋`.
#[inline]
pub fn quantize(x: u8, alpha: u8) -> u8 {
    x >> (8 - alpha)
}

pub fn reduce_gray(patch: &Patch, alpha: u8) -> Result<QuantizedPatch> {
    check_alpha(alpha)?;
    Ok(QuantizedPatch {
        side: patch.side,
        alpha,
        values: patch.values.iter().map(|&v| quantize(v, alpha)).collect(),
    })
}

/// Symmetric pair counts per offset direction, before normalisation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoocCounts {
    pub levels: usize,
    /// `counts[d][m * levels + n]`; each unordered pair is counted both ways.
    pub counts: [Vec<u32>; 4],
}

impl CoocCounts {
    fn new(levels: usize) -> Self {
        let z = vec![0u32; levels * levels];
        CoocCounts {
            levels,
            counts: [z.clone(), z.clone(), z.clone(), z],
        }
    }

    #[inline]
    fn add_pair(&mut self, dir: usize, a: u8, b: u8) {
        let g = self.levels;
        self.counts[dir][a as usize * g + b as usize] += 1;
        self.counts[dir][b as usize * g + a as usize] += 1;
    }

    pub fn direction_total(&self, dir: usize) -> u64 {
        self.counts[dir].iter().map(|&c| c as u64).sum()
    }

    /// Per-direction probabilities averaged over the directions that had any
    /// valid pair. `None` when no direction had one.
    fn normalize_into(&self, q: &mut [f64]) -> bool {
        q.fill(0.0);
        let totals: Vec<u64> = (0..4).map(|d| self.direction_total(d)).collect();
        let active = totals.iter().filter(|&&t| t > 0).count();
        if active == 0 {
            let u = 1.0 / q.len() as f64;
            q.fill(u);
            return false;
        }
        for (d, &total) in totals.iter().enumerate() {
            if total == 0 {
                continue;
            }
            let t = total as f64;
            for (qi, &c) in q.iter_mut().zip(&self.counts[d]) {
                if c != 0 {
                    *qi += c as f64 / t;
                }
            }
        }
        let k = active as f64;
        for qi in q.iter_mut() {
            *qi /= k;
        }
        true
    }
}

pub fn cooccurrence_counts(patch: &QuantizedPatch) -> CoocCounts {
    let mut counts = CoocCounts::new(patch.levels());
    let t = patch.side as isize;
    for (dir, &(dr, dc)) in OFFSETS.iter().enumerate() {
        for i in 0..t {
            for j in 0..t {
                let (ni, nj) = (i + dr, j + dc);
                if ni < 0 || nj < 0 || ni >= t || nj >= t {
                    continue;
                }
                let a = patch.values[(i * t + j) as usize];
                let b = patch.values[(ni * t + nj) as usize];
                counts.add_pair(dir, a, b);
            }
        }
    }
    counts
}

/// Normalised, symmetric co-occurrence matrix at one gray level.
#[derive(Clone, Debug, PartialEq)]
pub struct CoocMatrix {
    pub alpha: u8,
    pub levels: usize,
    /// Row-major `levels × levels` pair probabilities.
    pub q: Vec<f64>,
    /// Set when the patch had no valid neighbour pair; `q` is then uniform.
    pub degenerate: bool,
}

impl CoocMatrix {
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.q[m * self.levels + n]
    }

    pub fn sum(&self) -> f64 {
        self.q.iter().sum()
    }
}

pub fn cooccurrence(patch: &QuantizedPatch) -> CoocMatrix {
    let counts = cooccurrence_counts(patch);
    let mut q = vec![0.0; counts.levels * counts.levels];
    let ok = counts.normalize_into(&mut q);
    CoocMatrix {
        alpha: patch.alpha,
        levels: counts.levels,
        q,
        degenerate: !ok,
    }
}

/// The eight statistics of a single normalised `g × g` matrix, accumulated
/// over `cells` (ascending indices of the non-zero entries).
fn level_stats<I>(q: &[f64], g: usize, cells: I) -> [f64; NUM_FEATURES]
where
    I: Iterator<Item = usize> + Clone,
{
    let shift = g.trailing_zeros();
    let low = g - 1;
    let mut mean = 0.0;
    for idx in cells.clone() {
        mean += (idx >> shift) as f64 * q[idx];
    }
    let (mut var, mut hom, mut con, mut dis, mut ent, mut energy, mut cov) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for idx in cells {
        let p = q[idx];
        let (mi, ni) = (idx >> shift, idx & low);
        let m = mi as f64;
        let n = ni as f64;
        let d = m - n;
        var += p * (m - mean) * (m - mean);
        hom += p / (1.0 + d * d);
        con += p * d * d;
        dis += p * d.abs();
        // q is symmetric: take each off-diagonal log once
        if mi < ni {
            ent -= 2.0 * (p * p.ln());
        } else if mi == ni {
            ent -= p * p.ln();
        }
        energy += p * p;
        cov += p * (m - mean) * (n - mean);
    }
    let corr = if var < CORRELATION_VARIANCE_GUARD {
        1.0
    } else {
        cov / var
    };
    [mean, var, hom, con, dis, ent, energy, corr]
}

/// Level-averaged statistics in [`FEATURE_NAMES`] order.
///
/// Each statistic is evaluated on every level's matrix with that level's own
/// mean and variance, then averaged over the levels.
pub fn features_from_cooc(mats: &[CoocMatrix]) -> [f64; NUM_FEATURES] {
    let mut acc = [0.0; NUM_FEATURES];
    for m in mats {
        let s = level_stats(&m.q, m.levels, (0..m.q.len()).filter(|&i| m.q[i] != 0.0));
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = mats.len().max(1) as f64;
    acc.map(|v| v / n)
}

/// Patch geometry, gray levels and input scaling for [`kem_transform`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KemConfig {
    pub patch: PatchSpec,
    pub levels: Vec<u8>,
    /// Standardise each channel to zero mean, unit variance over the image.
    pub standardize: bool,
}

impl Default for KemConfig {
    fn default() -> Self {
        KemConfig {
            patch: PatchSpec::default(),
            levels: vec![2, 3, 4],
            standardize: true,
        }
    }
}

impl KemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("at least one gray level is required".into()));
        }
        for &a in &self.levels {
            check_alpha(a)?;
        }
        PatchSpec::new(self.patch.side())?;
        Ok(())
    }
}

/// `8 × H × W` statistical feature image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack(Tensor);

impl FeatureStack {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != NUM_FEATURES {
            return Err(Error::shape(
                "feature_stack",
                format!("expected {NUM_FEATURES} channels, got {c}"),
            ));
        }
        Ok(FeatureStack(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn feature(&self, name: &str) -> Option<&[f64]> {
        feature_index(name).map(|i| self.0.channel(i))
    }

    /// Keeps only the listed channels, in the order given.
    pub fn select(&self, channels: &[usize]) -> Result<Tensor> {
        let (_, h, w) = self.0.dims3()?;
        let mut data = Vec::with_capacity(channels.len() * h * w);
        for &c in channels {
            if c >= NUM_FEATURES {
                return Err(Error::Config(format!("feature channel {c} out of range")));
            }
            data.extend_from_slice(self.0.channel(c));
        }
        Tensor::from_vec(&[channels.len(), h, w], data)
    }
}

/// Reflect-padded, per-level quantised copy of the gray image.
struct QuantizedPlanes {
    width: usize,
    planes: Vec<Vec<u8>>,
}

fn quantized_planes(gray: &GrayImage, radius: usize, levels: &[u8]) -> QuantizedPlanes {
    let pw = gray.width + 2 * radius;
    let ph = gray.height + 2 * radius;
    let mut padded = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let row = reflect_index(y as isize - radius as isize, gray.height);
        for x in 0..pw {
            let col = reflect_index(x as isize - radius as isize, gray.width);
            padded.push(gray.get(row, col));
        }
    }
    let planes = levels
        .iter()
        .map(|&a| padded.iter().map(|&v| quantize(v, a)).collect())
        .collect();
    QuantizedPlanes { width: pw, planes }
}

/// Per-level counts of a patch window sliding along one image row. Moving
/// one column right removes the pairs that touch the old left column and
/// adds those that touch the new right column. A bitmask of non-zero cells
/// yields them in ascending order for the statistics.
struct SlidingCooc {
    counts: CoocCounts,
    totals: [u64; 4],
    cell_sum: Vec<u32>,
    nonzero: Vec<u64>,
    cells: Vec<usize>,
    q: Vec<f64>,
}

impl SlidingCooc {
    fn new(levels: usize) -> Self {
        let n = levels * levels;
        SlidingCooc {
            counts: CoocCounts::new(levels),
            totals: [0; 4],
            cell_sum: vec![0; n],
            nonzero: vec![0; n.div_ceil(64)],
            cells: Vec::with_capacity(n),
            q: vec![0.0; n],
        }
    }

    #[inline]
    fn bump(&mut self, dir: usize, idx: usize, add: bool) {
        if add {
            self.counts.counts[dir][idx] += 1;
            if self.cell_sum[idx] == 0 {
                self.nonzero[idx >> 6] |= 1 << (idx & 63);
            }
            self.cell_sum[idx] += 1;
        } else {
            self.counts.counts[dir][idx] -= 1;
            self.cell_sum[idx] -= 1;
            if self.cell_sum[idx] == 0 {
                self.nonzero[idx >> 6] &= !(1 << (idx & 63));
            }
        }
    }

    #[inline]
    fn pair(&mut self, dir: usize, a: u8, b: u8, add: bool) {
        let g = self.counts.levels;
        self.bump(dir, a as usize * g + b as usize, add);
        self.bump(dir, b as usize * g + a as usize, add);
        if add {
            self.totals[dir] += 2;
        } else {
            self.totals[dir] -= 2;
        }
    }

    fn clear(&mut self) {
        for c in &mut self.counts.counts {
            c.fill(0);
        }
        self.totals = [0; 4];
        self.cell_sum.fill(0);
        self.nonzero.fill(0);
    }

    /// Same values as [`CoocCounts::normalize_into`] followed by
    /// [`level_stats`] over the non-zero cells.
    fn stats(&mut self) -> [f64; NUM_FEATURES] {
        let active = self.totals.iter().filter(|&&t| t > 0).count();
        if active == 0 {
            let ok = self.counts.normalize_into(&mut self.q);
            debug_assert!(!ok);
            return level_stats(&self.q, self.counts.levels, 0..self.q.len());
        }
        self.cells.clear();
        for (w, &word) in self.nonzero.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                self.cells.push(w * 64 + bits.trailing_zeros() as usize);
                bits &= bits - 1;
            }
        }
        let k = active as f64;
        for &i in &self.cells {
            let mut qi = 0.0;
            for (d, &total) in self.totals.iter().enumerate() {
                let c = self.counts.counts[d][i];
                if total > 0 && c != 0 {
                    qi += c as f64 / total as f64;
                }
            }
            self.q[i] = qi / k;
        }
        level_stats(&self.q, self.counts.levels, self.cells.iter().copied())
    }
}

fn row_features(
    planes: &QuantizedPlanes,
    levels: &[u8],
    side: usize,
    row: usize,
    width: usize,
) -> Vec<[f64; NUM_FEATURES]> {
    let mut scratch: Vec<SlidingCooc> = levels
        .iter()
        .map(|&a| SlidingCooc::new(1usize << a))
        .collect();
    let t = side as isize;
    let pw = planes.width;
    (0..width)
        .map(|col| {
            let mut acc = [0.0; NUM_FEATURES];
            for (li, sc) in scratch.iter_mut().enumerate() {
                let plane = &planes.planes[li];
                if col == 0 {
                    sc.clear();
                }
                for (dir, &(dr, dc)) in OFFSETS.iter().enumerate() {
                    for i in 0..t {
                        let ni = i + dr;
                        if ni < 0 || ni >= t {
                            continue;
                        }
                        let base = (row + i as usize) * pw + col;
                        let nbase = (row + ni as usize) * pw + col;
                        if col == 0 {
                            for j in 0..t - dc {
                                sc.pair(
                                    dir,
                                    plane[base + j as usize],
                                    plane[nbase + (j + dc) as usize],
                                    true,
                                );
                            }
                        } else if dc < t {
                            // window now spans columns col..col+t of the padded plane
                            sc.pair(dir, plane[base - 1], plane[nbase - 1 + dc as usize], false);
                            let j = (t - 1 - dc) as usize;
                            sc.pair(dir, plane[base + j], plane[nbase + j + dc as usize], true);
                        }
                    }
                }
                let s = sc.stats();
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v;
                }
            }
            let n = levels.len() as f64;
            acc.map(|v| v / n)
        })
        .collect()
}

/// Unstandardised feature stack; rows are processed in parallel on the
/// current rayon pool and each pixel's result is independent of scheduling.
pub fn kem_transform_raw(image: &Tensor, config: &KemConfig) -> Result<FeatureStack> {
    config.validate()?;
    let gray = grayscale(image)?;
    let (h, w) = (gray.height, gray.width);
    let planes = quantized_planes(&gray, config.patch.radius(), &config.levels);
    let rows: Vec<Vec<[f64; NUM_FEATURES]>> = (0..h)
        .into_par_iter()
        .map(|y| row_features(&planes, &config.levels, config.patch.side(), y, w))
        .collect();
    let mut out = Tensor::image(NUM_FEATURES, h, w);
    for (y, row) in rows.iter().enumerate() {
        for (x, f) in row.iter().enumerate() {
            for (c, &v) in f.iter().enumerate() {
                out.set(c, y, x, v);
            }
        }
    }
    FeatureStack::new(out)
}

/// Zero-mean, unit-variance per channel; constant channels become zero.
pub fn standardize_channels(t: &mut Tensor) -> Result<()> {
    let (c, _, _) = t.dims3()?;
    for ch in 0..c {
        let plane = t.channel_mut(ch);
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in plane.iter_mut() {
            *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
        }
    }
    Ok(())
}

/// Full transform: raw statistics, then optional per-channel standardisation.
pub fn kem_transform(image: &Tensor, config: &KemConfig) -> Result<FeatureStack> {
    let raw = kem_transform_raw(image, config)?;
    if !config.standardize {
        return Ok(raw);
    }
    let mut t = raw.into_tensor();
    standardize_channels(&mut t)?;
    FeatureStack::new(t)
}

/// [`kem_transform`] on a dedicated pool of `threads` workers.
pub fn kem_transform_with_threads(
    image: &Tensor,
    config: &KemConfig,
    threads: usize,
) -> Result<FeatureStack> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| kem_transform(image, config))
}
