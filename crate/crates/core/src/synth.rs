//! Synthetic hip phantoms with controlled Graf angles.
//!
//! Geometry: a rim point `R`, a near-vertical baseline direction `u`, and two
//! roof lines leaving `R` at `alpha` (rotated toward +x) and `beta` (rotated
//! toward -x) from `u`. Landmarks sit exactly on their lines. Rendering draws
//! the three segments and a blob per landmark on a dark background, then
//! applies multiplicative uniform speckle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_image_tgt, write_manifest, write_pgm, ImageSample, ManifestRow};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Point};
use crate::tensor::Tensor;
use crate::train::mix_seed;

/// Requested diagnostic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRequest {
    Normal,
    Abnormal,
    Any,
}

/// Normal iff `alpha > 60` and `beta < 77` (strict). Returns 1 for abnormal.
pub fn graf_label(alpha: f64, beta: f64) -> u8 {
    u8::from(!(alpha > 60.0 && beta < 77.0))
}

pub const ALPHA_RANGE: (f64, f64) = (50.0, 75.0);
pub const BETA_RANGE: (f64, f64) = (55.0, 90.0);
pub const MARGIN_PX: f64 = 10.0;
pub const DRAW_BUDGET: usize = 1000;

/// Free parameters of one phantom geometry, in a 128-pixel reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryParams {
    pub rim: Point,
    /// Baseline tilt from vertical, degrees.
    pub tilt_deg: f64,
    pub alpha_deg: f64,
    pub beta_deg: f64,
    /// Distances from the rim along each line: baseline (far, near), alpha line, beta line.
    pub offsets: [f64; 6],
}

impl GeometryParams {
    pub const NOMINAL_OFFSETS: [f64; 6] = [44.0, 16.0, 12.0, 36.0, 12.0, 32.0];

    /// Landmarks in a `size`-pixel image.
    pub fn landmarks(&self, size: usize) -> LandmarkSet {
        let s = size as f64 / 128.0;
        let t = self.tilt_deg.to_radians();
        // baseline direction: up (-y) tilted by t
        let u = Point::new(t.sin(), -t.cos());
        let rotate = |deg: f64| {
            let a = deg.to_radians();
            Point::new(u.x * a.cos() - u.y * a.sin(), u.x * a.sin() + u.y * a.cos())
        };
        // positive rotation turns the upward baseline toward +x in image coordinates
        let (da, db) = (rotate(self.alpha_deg), rotate(-self.beta_deg));
        let r = Point::new(self.rim.x * s, self.rim.y * s);
        let o = self.offsets.map(|v| v * s);
        LandmarkSet::new([
            r.add_scaled(u, -o[0]),
            r.add_scaled(u, -o[1]),
            r.add_scaled(da, o[2]),
            r.add_scaled(da, o[3]),
            r.add_scaled(db, o[4]),
            r.add_scaled(db, o[5]),
        ])
    }
}

/// A sampled geometry with its angles and label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledGeometry {
    pub landmarks: LandmarkSet,
    pub params: GeometryParams,
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub label: u8,
}

/// Rejection-samples angles until the requested class holds and all points
/// are at least [`MARGIN_PX`] inside the image.
pub fn sample_geometry(request: ClassRequest, rng: &mut impl Rng, size: usize) -> Result<SampledGeometry> {
    for _ in 0..DRAW_BUDGET {
        let alpha = rng.gen_range(ALPHA_RANGE.0..ALPHA_RANGE.1);
        let beta = rng.gen_range(BETA_RANGE.0..BETA_RANGE.1);
        let rim = Point::new(64.0 + rng.gen_range(-8.0..8.0), 64.0 + rng.gen_range(-6.0..6.0));
        let tilt = rng.gen_range(-5.0..5.0);
        let jitter = [3.0, 2.0, 2.0, 3.0, 2.0, 3.0];
        let mut offsets = GeometryParams::NOMINAL_OFFSETS;
        for (o, j) in offsets.iter_mut().zip(jitter) {
            *o += rng.gen_range(-j..j);
        }
        let label = graf_label(alpha, beta);
        let wanted = match request {
            ClassRequest::Normal => label == 0,
            ClassRequest::Abnormal => label == 1,
            ClassRequest::Any => true,
        };
        if !wanted {
            continue;
        }
        let params = GeometryParams { rim, tilt_deg: tilt, alpha_deg: alpha, beta_deg: beta, offsets };
        let landmarks = params.landmarks(size);
        if !landmarks.within(size, size, MARGIN_PX) {
            continue;
        }
        return Ok(SampledGeometry { landmarks, params, alpha_deg: alpha, beta_deg: beta, label });
    }
    Err(Error::Generation(format!(
        "no {request:?} geometry within {DRAW_BUDGET} draws"
    )))
}

/// Rendering intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    pub background: f32,
    pub line: f32,
    pub blob: f32,
    pub blob_sigma: f64,
    /// Multiplicative speckle amplitude.
    pub speckle: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self { background: 0.08, line: 0.55, blob: 0.95, blob_sigma: 2.0, speckle: 0.3 }
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / (ab.x * ab.x + ab.y * ab.y);
    p.dist(a.add_scaled(ab, t.clamp(0.0, 1.0)))
}

/// Noiseless structure map; speckle is applied by [`render_phantom`].
pub fn render_clean(landmarks: &LandmarkSet, size: usize, style: &RenderStyle) -> Tensor<f32> {
    let lines: Vec<(Point, Point)> = (0..3).map(|l| landmarks.line(l)).collect();
    let s = size as f64 / 128.0;
    let sigma = style.blob_sigma * s;
    Tensor::from_fn(&[1, size, size], |k| {
        let p = Point::new((k % size) as f64, (k / size) as f64);
        let mut v = style.background;
        for &(a, b) in &lines {
            // one-pixel core with a one-pixel linear falloff
            let d = segment_distance(p, a, b);
            let cover = (1.5 - d / s.max(1.0)).clamp(0.0, 1.0) as f32;
            v = v.max(style.background + (style.line - style.background) * cover);
        }
        for q in &landmarks.points {
            let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
            let g = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            v = v.max(style.background + (style.blob - style.background) * g);
        }
        v
    })
}

/// Clean render times `(1 + speckle * u)`, `u ~ U(-1, 1)`, clamped to `[0, 1]`.
pub fn render_phantom(landmarks: &LandmarkSet, rng: &mut impl Rng, size: usize, style: &RenderStyle) -> Tensor<f32> {
    let mut img = render_clean(landmarks, size, style);
    if style.speckle > 0.0 {
        for v in img.data_mut() {
            let u: f64 = rng.gen_range(-1.0..1.0);
            *v = ((*v as f64) * (1.0 + style.speckle * u)).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    /// Fraction of abnormal samples.
    pub balance: f64,
    pub spacing: f64,
    pub size: usize,
    pub seed: u64,
    /// Number of subject groups; 0 disables the group column.
    pub groups: usize,
    pub style: RenderStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 64, balance: 0.5, spacing: 0.1, size: 128, seed: 0, groups: 0, style: RenderStyle::default() }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synth.n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::Config("synth.balance must lie in [0, 1]".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config("synth.spacing must be positive".into()));
        }
        if self.size < 64 {
            return Err(Error::Config("synth.size must be at least 64".into()));
        }
        if !(0.0..1.0).contains(&self.style.speckle) {
            return Err(Error::Config("synth.speckle must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of abnormal samples, `round(n * balance)`.
    pub fn abnormal_count(&self) -> usize {
        (self.n as f64 * self.balance).round() as usize
    }
}

/// One generated sample with its record.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub sample: ImageSample,
    pub alpha_deg: f64,
    pub beta_deg: f64,
}

fn class_plan(config: &SynthConfig) -> Vec<ClassRequest> {
    let abnormal = config.abnormal_count();
    let mut plan: Vec<ClassRequest> = (0..config.n)
        .map(|i| if i < abnormal { ClassRequest::Abnormal } else { ClassRequest::Normal })
        .collect();
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, u64::MAX])));
    plan
}

/// Generates sample `index`; depends only on `(config, index)`.
pub fn generate_sample(config: &SynthConfig, index: usize, request: ClassRequest) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, index as u64]));
    let geo = sample_geometry(request, &mut rng, config.size)?;
    let image = render_phantom(&geo.landmarks, &mut rng, config.size, &config.style);
    let group = (config.groups > 0).then(|| format!("s{:03}", index * config.groups / config.n));
    Ok(Phantom {
        sample: ImageSample {
            name: format!("img_{index:04}.tgt"),
            image,
            landmarks: geo.landmarks,
            spacing: config.spacing,
            label: geo.label,
            group,
        },
        alpha_deg: geo.alpha_deg,
        beta_deg: geo.beta_deg,
    })
}

/// Generates the full set in memory.
pub fn generate(config: &SynthConfig) -> Result<Vec<Phantom>> {
    config.validate()?;
    class_plan(config)
        .into_iter()
        .enumerate()
        .map(|(i, req)| generate_sample(config, i, req))
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes `img_NNNN.tgt`, `img_NNNN.pgm` and `manifest.csv` into `out_dir`;
/// returns the manifest path.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let phantoms = generate(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(phantoms.len());
    for p in &phantoms {
        let s = &p.sample;
        write_image_tgt(&out_dir.join(&s.name), &s.image)?;
        write_pgm(&out_dir.join(s.name.replace(".tgt", ".pgm")), &s.image)?;
        rows.push(ManifestRow {
            file: s.name.clone(),
            landmarks: s.landmarks,
            label: s.label,
            alpha_deg: p.alpha_deg,
            beta_deg: p.beta_deg,
            spacing: s.spacing,
            group: s.group.clone(),
        });
    }
    let path = out_dir.join(MANIFEST_NAME);
    write_manifest(&path, &rows)?;
    Ok(path)
}
