//! Synthetic cardiac-style segmentation data and its binary file format.
//!
//! Each sample places a left-ventricle disk inside a myocardium annulus and
//! a right-ventricle crescent hugging the annulus, renders class-dependent
//! intensities over a smooth background field, and adds Gaussian noise.
//!
//! File layout (little-endian): 8-byte magic, `u32` version, `u32` sample
//! count, `u32` height, `u32` width, `u32` class count, `u64` generator seed,
//! then per sample `h*w` `f32` intensities followed by `h*w` `u8` labels.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::maps::LabelMask;
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["background", "RV", "Myo", "LV"];

/// Mean intensity per class, indexed by label.
pub const CLASS_INTENSITY: [f64; CLASS_COUNT] = [0.1, 0.6, 0.35, 0.85];
pub const NOISE_STD: f64 = 0.05;
pub const FIELD_AMPLITUDE: f64 = 0.05;
pub const MAX_ATTEMPTS: usize = 100;
/// Fewest pixels a class may occupy in an accepted sample.
pub const MIN_CLASS_PIXELS: usize = 8;

pub const MAGIC: &[u8; 8] = b"UUSEGDS\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 * 5 + 8;

/// Uniform ranges for the shape parameters, as fractions of `min(h, w)`
/// except `rv_overlap`, which is a fraction of the RV radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryRanges {
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    pub rv_radius: (f64, f64),
    /// RV centre sits at `r_myo + rv_overlap * r_rv` from the LV centre.
    pub rv_overlap: (f64, f64),
}

impl Default for GeometryRanges {
    fn default() -> Self {
        Self {
            lv_radius: (0.08, 0.13),
            myo_thickness: (0.05, 0.07),
            rv_radius: (0.12, 0.17),
            rv_overlap: (0.3, 0.6),
        }
    }
}

impl GeometryRanges {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_radius", self.rv_radius),
            ("rv_overlap", self.rv_overlap),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("range {name} = ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

/// One image (`1 x h x w`, values in `[0, 1]`) with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Vec<f32>,
    pub mask: LabelMask,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height(), self.width()],
            self.image.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Pixel fraction of each class.
    pub fn class_fractions(&self) -> [f64; CLASS_COUNT] {
        let mut counts = [0usize; CLASS_COUNT];
        for &l in self.mask.labels() {
            counts[l as usize] += 1;
        }
        let total = self.mask.labels().len() as f64;
        counts.map(|c| c as f64 / total)
    }
}

/// Samples the shape parameters for one attempt.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    lv_radius: f64,
    myo_radius: f64,
    rv_radius: f64,
    rv_distance: f64,
    rv_angle: f64,
}

impl Geometry {
    fn sample(rng: &mut impl Rng, scale: f64, ranges: &GeometryRanges) -> Self {
        let mut uniform = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let lv_radius = uniform(ranges.lv_radius) * scale;
        let myo_radius = lv_radius + uniform(ranges.myo_thickness) * scale;
        let rv_radius = uniform(ranges.rv_radius) * scale;
        let rv_distance = myo_radius + uniform(ranges.rv_overlap) * rv_radius;
        let rv_angle = uniform((0.0, 2.0 * PI));
        Self {
            lv_radius,
            myo_radius,
            rv_radius,
            rv_distance,
            rv_angle,
        }
    }

    /// Bounding box of all structures relative to the LV centre:
    /// `(min_x, max_x, min_y, max_y)`.
    fn extent(&self) -> (f64, f64, f64, f64) {
        let (rx, ry) = self.rv_offset();
        (
            (-self.myo_radius).min(rx - self.rv_radius),
            self.myo_radius.max(rx + self.rv_radius),
            (-self.myo_radius).min(ry - self.rv_radius),
            self.myo_radius.max(ry + self.rv_radius),
        )
    }

    fn rv_offset(&self) -> (f64, f64) {
        (
            self.rv_distance * self.rv_angle.cos(),
            self.rv_distance * self.rv_angle.sin(),
        )
    }
}

/// Generates one sample; identical seeds give bitwise-identical samples.
pub fn generate_sample(seed: u64, height: usize, width: usize, ranges: &GeometryRanges) -> Result<SegSample> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidArgument(format!(
            "images must be at least 32x32, got {height}x{width}"
        )));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = height.min(width) as f64;
    const MARGIN: f64 = 1.0;

    for _ in 0..MAX_ATTEMPTS {
        let geo = Geometry::sample(&mut rng, scale, ranges);
        let (min_x, max_x, min_y, max_y) = geo.extent();
        // Feasible LV centres keep every structure inside the frame.
        let (lo_x, hi_x) = (MARGIN - min_x, width as f64 - MARGIN - max_x);
        let (lo_y, hi_y) = (MARGIN - min_y, height as f64 - MARGIN - max_y);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        let cx = rng.gen_range(lo_x..hi_x);
        let cy = rng.gen_range(lo_y..hi_y);
        let labels = rasterize(&geo, cx, cy, height, width);
        let mask = LabelMask::new(height, width, CLASS_COUNT, labels)?;
        if (0..CLASS_COUNT).any(|c| mask.count(c) < MIN_CLASS_PIXELS) {
            continue;
        }
        let image = render(&mask, &mut rng);
        return Ok(SegSample { image, mask });
    }
    Err(Error::RetryExhausted { attempts: MAX_ATTEMPTS })
}

fn rasterize(geo: &Geometry, cx: f64, cy: f64, height: usize, width: usize) -> Vec<u8> {
    let (ox, oy) = geo.rv_offset();
    let (rx, ry) = (cx + ox, cy + oy);
    let mut labels = vec![BACKGROUND; height * width];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d_lv = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            let d_rv = ((px - rx).powi(2) + (py - ry).powi(2)).sqrt();
            labels[y * width + x] = if d_lv < geo.lv_radius {
                LV
            } else if d_lv < geo.myo_radius {
                MYO
            } else if d_rv < geo.rv_radius {
                RV
            } else {
                BACKGROUND
            };
        }
    }
    labels
}

fn render(mask: &LabelMask, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = (mask.height(), mask.width());
    let fx = rng.gen_range(0.5..2.0) * 2.0 * PI / w as f64;
    let fy = rng.gen_range(0.5..2.0) * 2.0 * PI / h as f64;
    let (phase_x, phase_y) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    mask.labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let field = FIELD_AMPLITUDE * (fx * x + phase_x).sin() * (fy * y + phase_y).cos();
            let v = CLASS_INTENSITY[l as usize] + field + noise.sample(rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A generated or loaded dataset together with its generator seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn generate(count: usize, seed: u64, height: usize, width: usize) -> Result<Self> {
        let ranges = GeometryRanges::default();
        let samples = (0..count)
            .map(|i| generate_sample(sample_seed(seed, i), height, width, &ranges))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(height, width)` shared by every sample.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = (first.height(), first.width());
        if self.samples.iter().any(|s| s.height() != h || s.width() != w || s.mask.classes() != first.mask.classes()) {
            return Err(Error::dim("samples differ in geometry"));
        }
        Ok((h, w))
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = dataset.geometry()?;
    let classes = dataset.samples[0].mask.classes();
    let plane = h * w;
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.len() * plane * 5);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, dataset.len() as u32, h as u32, w as u32, classes as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&dataset.seed.to_le_bytes());
    for s in &dataset.samples {
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(s.mask.labels());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "UUSEGDS",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()),
        });
    }
    let version = le_u32(&bytes, 8);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
            expected: VERSION,
        });
    }
    let count = le_u32(&bytes, 12) as usize;
    let (h, w) = (le_u32(&bytes, 16) as usize, le_u32(&bytes, 20) as usize);
    let classes = le_u32(&bytes, 24) as usize;
    let seed = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes"));
    if count == 0 || h == 0 || w == 0 || !(2..=256).contains(&classes) {
        return Err(Error::Corrupt {
            path: path.into(),
            detail: format!("header fields count={count} h={h} w={w} classes={classes}"),
        });
    }
    let plane = h * w;
    let record = plane * 5;
    let payload = bytes.len() - HEADER_LEN;
    let expected = count * record;
    if payload < expected {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("payload has {payload} bytes, header implies {expected}"),
        });
    }
    if payload > expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            detail: format!("payload has {payload} bytes, header implies {expected}"),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for rec in bytes[HEADER_LEN..].chunks_exact(record) {
        let image = rec[..plane * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = LabelMask::new(h, w, classes, rec[plane * 4..].to_vec()).map_err(|e| Error::Corrupt {
            path: path.into(),
            detail: e.to_string(),
        })?;
        samples.push(SegSample { image, mask });
    }
    Ok(Dataset { seed, samples })
}

/// Partition sizes: floors of `fraction * n`, with the remainder handed out
/// by largest fractional part (lower index first on ties).
fn partition_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Deterministic disjoint cover of `0..n` by seeded shuffle.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::InvalidArgument("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("fractions sum to {total}, not 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for size in partition_sizes(n, fractions) {
        parts.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(parts)
}

pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    Ok(split_indices(dataset.len(), fractions, seed)?
        .into_iter()
        .map(|idx| Dataset {
            seed: dataset.seed,
            samples: idx.into_iter().map(|i| dataset.samples[i].clone()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let r = GeometryRanges::default();
        let a = generate_sample(11, 64, 64, &r).unwrap();
        let b = generate_sample(11, 64, 64, &r).unwrap();
        assert_eq!(a, b);
        let bits = |s: &SegSample| s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, generate_sample(12, 64, 64, &r).unwrap());
    }

    #[test]
    fn background_is_the_majority() {
        for seed in 0..50 {
            let s = generate_sample(seed, 64, 64, &GeometryRanges::default()).unwrap();
            let f = s.class_fractions();
            assert!(f[0] > 0.5, "seed {seed}: {f:?}");
            assert!(f.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn rejects_small_frames_and_impossible_geometry() {
        assert!(generate_sample(0, 16, 64, &GeometryRanges::default()).is_err());
        let huge = GeometryRanges {
            lv_radius: (0.6, 0.7),
            ..GeometryRanges::default()
        };
        assert!(matches!(
            generate_sample(0, 32, 32, &huge),
            Err(Error::RetryExhausted { attempts: MAX_ATTEMPTS })
        ));
    }

    #[test]
    fn partition_sizes_floor_then_remainder() {
        assert_eq!(partition_sizes(100, &[0.8, 0.2]), vec![80, 20]);
        assert_eq!(partition_sizes(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
        assert_eq!(partition_sizes(7, &[1.0]), vec![7]);
    }

    #[test]
    fn split_argument_checks() {
        assert!(split_indices(0, &[1.0], 0).is_err());
        assert!(split_indices(5, &[0.5, 0.4], 0).is_err());
        assert!(split_indices(5, &[1.2, -0.2], 0).is_err());
    }
}
