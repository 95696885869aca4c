//! Synthetic blurry benchmarks, dataset IO, spectra and evaluation reports.

use crate::blur::{synthesize_blur_with, BlurOptions, ExposureSegment};
use crate::image::{Image, ImageError};
use crate::lie::{InterpolationMode, PoseSE3, TangentSE3};
use crate::metrics::{psnr, ssim_value};
use crate::rng::{derive_seed, SceneRng};
use crate::scene::{generate_scene, sh_color, GaussianScene, SceneError, SceneLayout, SceneRecipe};
use crate::splat::{CameraIntrinsics, PreparedFrame, RenderConfig};
use crate::train::{
    Dataset, InitPoint, PosesFile, TestView, TrainConfig, TrainError, TrainOutcome, TrainView,
};
use nalgebra::{Vector3, Vector6};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("render failed: {0}")]
    Render(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<ImageError> for HarnessError {
    fn from(e: ImageError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<SceneError> for HarnessError {
    fn from(e: SceneError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => HarnessError::InvalidArgument(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

fn render_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Render(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFamily {
    /// Orbit around the scene center; exposure follows the orbit.
    #[default]
    Arc,
    /// Orbit path with random rotational jitter during exposure.
    Shake,
    /// Approach along the viewing axis.
    Dolly,
}

pub const HOLDOUT_EVERY: usize = 7;

/// Training indices for 3, 6 and 9 views. The 9-view set extends the
/// 8 published entries with frame 12.
pub fn default_indices(views: usize) -> Option<Vec<usize>> {
    match views {
        3 => Some(vec![5, 15, 25]),
        6 => Some(vec![2, 5, 10, 15, 17, 25]),
        9 => Some(vec![1, 2, 5, 10, 12, 15, 17, 22, 25]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub recipe: SceneRecipe,
    pub trajectory: TrajectoryFamily,
    /// Arc/shake: radians swept during one exposure. Dolly: fraction of the
    /// camera distance.
    pub exposure: f64,
    pub frames: usize,
    pub views: usize,
    /// Overrides the default indices for `views`.
    pub indices: Option<Vec<usize>>,
    pub width: usize,
    pub height: usize,
    pub fov_x_deg: f64,
    /// Orbit sweep across all frames, radians.
    pub sweep: f64,
    pub radius: f64,
    pub dense_samples: usize,
    pub init_rot_noise_deg: f64,
    /// Fraction of the scene extent.
    pub init_trans_noise: f64,
    /// Fraction of primitives that seed an initial point.
    pub point_fraction: f64,
    /// Fraction of the scene extent.
    pub point_noise: f64,
    pub point_color_noise: f64,
    /// Extra points drawn uniformly in the scene bounds with gray color.
    pub random_points: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            recipe: SceneRecipe::new(7, 300, SceneLayout::ClusterField),
            trajectory: TrajectoryFamily::Arc,
            exposure: 0.06,
            frames: 30,
            views: 3,
            indices: None,
            width: 64,
            height: 48,
            fov_x_deg: 50.0,
            sweep: 0.9,
            radius: 4.5,
            dense_samples: 200,
            init_rot_noise_deg: 1.0,
            init_trans_noise: 0.005,
            point_fraction: 0.5,
            point_noise: 0.02,
            point_color_noise: 0.1,
            random_points: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl BenchmarkSpec {
    pub fn train_indices(&self) -> Result<Vec<usize>, HarnessError> {
        let idx = match &self.indices {
            Some(i) => i.clone(),
            None => default_indices(self.views).ok_or_else(|| {
                HarnessError::InvalidArgument(format!(
                    "no default indices for {} views; pass explicit indices",
                    self.views
                ))
            })?,
        };
        if idx.is_empty() {
            return Err(HarnessError::InvalidArgument("no training indices".into()));
        }
        for &i in &idx {
            if i >= self.frames {
                return Err(HarnessError::InvalidArgument(format!(
                    "index {i} outside {} frames",
                    self.frames
                )));
            }
            if i % HOLDOUT_EVERY == 0 {
                return Err(HarnessError::InvalidArgument(format!(
                    "index {i} is a held-out frame"
                )));
            }
        }
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != idx.len() {
            return Err(HarnessError::InvalidArgument("duplicate training index".into()));
        }
        Ok(idx)
    }

    pub fn split(&self) -> Result<Split, HarnessError> {
        Ok(Split {
            train: self.train_indices()?,
            test: (0..self.frames).step_by(HOLDOUT_EVERY).collect(),
        })
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, HarnessError> {
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_x_deg)
            .map_err(|e| HarnessError::InvalidArgument(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.frames < 2 || self.dense_samples == 0 {
            return Err(HarnessError::InvalidArgument(
                "need at least 2 frames and 1 dense sample".into(),
            ));
        }
        if !(self.exposure >= 0.0 && self.exposure.is_finite()) || !(self.radius > 0.0) {
            return Err(HarnessError::InvalidArgument(
                "exposure must be >= 0 and radius > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.point_fraction) {
            return Err(HarnessError::InvalidArgument("point_fraction must be in [0, 1]".into()));
        }
        if self.point_fraction == 0.0 && self.random_points == 0 {
            return Err(HarnessError::InvalidArgument("no initial points".into()));
        }
        self.intrinsics()?;
        self.train_indices()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        format!("{:016x}", crate::rng::hash_bytes(0xbe4c, text.as_bytes()))
    }
}

pub fn orbit_pose(target: &Vector3<f64>, radius: f64, angle: f64) -> PoseSE3 {
    let eye = target + Vector3::new(radius * angle.sin(), -0.15 * radius, -radius * angle.cos());
    PoseSE3::look_at(eye, *target, Vector3::new(0.0, -1.0, 0.0))
}

/// Exposure segment of every frame, in frame order.
pub fn trajectory(spec: &BenchmarkSpec, scene: &GaussianScene) -> Vec<ExposureSegment> {
    let target = scene.bounds().center();
    let mut rng = SceneRng::new(derive_seed(spec.seed, 10));
    let a = spec.exposure;
    (0..spec.frames)
        .map(|i| {
            let t = i as f64 / (spec.frames - 1) as f64;
            let phi = spec.sweep * (t - 0.5);
            let (start, end) = match spec.trajectory {
                TrajectoryFamily::Arc => (
                    orbit_pose(&target, spec.radius, phi - 0.5 * a),
                    orbit_pose(&target, spec.radius, phi + 0.5 * a),
                ),
                TrajectoryFamily::Shake => {
                    let mid = orbit_pose(&target, spec.radius, phi);
                    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
                    let d = TangentSE3::new(axis * (0.5 * a), Vector3::zeros());
                    (mid.retract_left(&d.scale(-1.0)), mid.retract_left(&d))
                }
                TrajectoryFamily::Dolly => {
                    let r = spec.radius * (1.2 - 0.4 * t);
                    let phi = 0.25 * spec.sweep * (t - 0.5);
                    (
                        orbit_pose(&target, r * (1.0 + 0.5 * a), phi),
                        orbit_pose(&target, r * (1.0 - 0.5 * a), phi),
                    )
                }
            };
            if a == 0.0 {
                return ExposureSegment::static_at(start, 1).expect("n >= 1");
            }
            ExposureSegment::new(start, end, spec.dense_samples).expect("n >= 1")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub frame: usize,
    /// Ground-truth midpoint pose.
    pub pose: PoseSE3,
    pub start: PoseSE3,
    pub end: PoseSE3,
    pub exposure: f64,
    /// Corrupted midpoint, present for training frames.
    pub init_pose: Option<PoseSE3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub config_hash: String,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<CameraFrame>,
}

/// A generated benchmark: the ground-truth scene, every frame, and the
/// training view of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub scene: GaussianScene,
    pub cameras: CamerasFile,
    pub split: Split,
    pub blurry: Vec<Image>,
    pub sharp: Vec<Image>,
    pub points: Vec<InitPoint>,
}

impl Benchmark {
    pub fn dataset(&self) -> Dataset {
        let train = self
            .split
            .train
            .iter()
            .map(|&f| TrainView {
                frame: f,
                blurry: self.blurry[f].clone(),
                init_pose: self.cameras.frames[f]
                    .init_pose
                    .unwrap_or(self.cameras.frames[f].pose),
            })
            .collect();
        let test = self
            .split
            .test
            .iter()
            .map(|&f| TestView {
                frame: f,
                pose: self.cameras.frames[f].pose,
                sharp: self.sharp[f].clone(),
            })
            .collect();
        Dataset {
            intrinsics: self.cameras.intrinsics,
            train,
            test,
            points: self.points.clone(),
        }
    }

    /// Ground-truth midpoint pose of every frame, indexed by frame number.
    pub fn gt_poses(&self) -> Vec<PoseSE3> {
        self.cameras.frames.iter().map(|c| c.pose).collect()
    }

    pub fn segment(&self, frame: usize) -> ExposureSegment {
        let c = &self.cameras.frames[frame];
        ExposureSegment::new(c.start, c.end, self.spec.dense_samples).expect("n >= 1")
    }
}

fn init_points(spec: &BenchmarkSpec, scene: &GaussianScene) -> Vec<InitPoint> {
    let mut rng = SceneRng::new(derive_seed(spec.seed, 11));
    let extent = scene.extent();
    let dir = Vector3::new(0.0, 0.0, -1.0);
    let mut points: Vec<InitPoint> = scene
        .gaussians
        .iter()
        .filter_map(|g| {
            if rng.uniform(0.0, 1.0) >= spec.point_fraction {
                return None;
            }
            let noise = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            let c = sh_color(&g.sh, 0, &dir);
            let mut color = [0.0; 3];
            for k in 0..3 {
                color[k] = (c[k] + spec.point_color_noise * rng.normal()).clamp(0.0, 1.0);
            }
            Some(InitPoint {
                position: g.mean + noise * (spec.point_noise * extent),
                color,
            })
        })
        .collect();
    let bounds = scene.bounds();
    for _ in 0..spec.random_points {
        let position = Vector3::from_fn(|i, _| rng.uniform(bounds.min[i], bounds.max[i]));
        let gray = (0.5 + spec.point_color_noise * rng.normal()).clamp(0.0, 1.0);
        points.push(InitPoint {
            position,
            color: [gray; 3],
        });
    }
    points
}

fn corrupt(pose: &PoseSE3, rng: &mut SceneRng, max_rot: f64, max_trans: f64) -> PoseSE3 {
    let unit = |rng: &mut SceneRng| Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
    let w = unit(rng) * (max_rot * rng.uniform(0.0, 1.0));
    let v = unit(rng) * (max_trans * rng.uniform(0.0, 1.0));
    // camera-frame perturbation, so the rotation pivots about the camera center
    *pose * PoseSE3::exp(&TangentSE3::from_vector(&Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)))
}

/// Renders sharp frames at the midpoints and dense blurry observations.
/// Images are snapped to the 16-bit grid so a saved dataset reloads exactly.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, HarnessError> {
    spec.validate()?;
    let scene = generate_scene(&spec.recipe)?;
    let intr = spec.intrinsics()?;
    let split = spec.split()?;
    let segs = trajectory(spec, &scene);
    let rcfg = RenderConfig::default();
    let opts = BlurOptions::default();
    let extent = scene.extent();
    let mut rng = SceneRng::new(derive_seed(spec.seed, 12));
    let mut frames = Vec::with_capacity(spec.frames);
    let mut blurry = Vec::with_capacity(spec.frames);
    let mut sharp = Vec::with_capacity(spec.frames);
    for (i, seg) in segs.iter().enumerate() {
        let mid = seg.midpoint(opts.interpolation);
        let s = PreparedFrame::new(&scene, &mid, &intr, &rcfg)
            .map_err(render_err)?
            .render()
            .color
            .clamp01()
            .quantize_u16();
        let b = if seg.start == seg.end {
            s.clone()
        } else {
            synthesize_blur_with(&scene, seg, &intr, &rcfg, &opts)
                .map_err(render_err)?
                .color
                .clamp01()
                .quantize_u16()
        };
        let init_pose = split.train.contains(&i).then(|| {
            corrupt(
                &mid,
                &mut rng,
                spec.init_rot_noise_deg.to_radians(),
                spec.init_trans_noise * extent,
            )
        });
        frames.push(CameraFrame {
            frame: i,
            pose: mid,
            start: seg.start,
            end: seg.end,
            exposure: spec.exposure,
            init_pose,
        });
        blurry.push(b);
        sharp.push(s);
    }
    let points = init_points(spec, &scene);
    Ok(Benchmark {
        cameras: CamerasFile {
            config_hash: spec.hash(),
            intrinsics: intr,
            frames,
        },
        spec: spec.clone(),
        scene,
        split,
        blurry,
        sharp,
        points,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| HarnessError::Data(format!("{}: {} at {}", path.display(), e.inner(), e.path())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PointsFile {
    config_hash: String,
    points: Vec<InitPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpecFile {
    config_hash: String,
    spec: BenchmarkSpec,
}

/// Writes the dataset directory.
pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<(), HarnessError> {
    for sub in ["images", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for (i, (bl, sh)) in b.blurry.iter().zip(&b.sharp).enumerate() {
        bl.write_png(dir.join(format!("images/blur_{i:04}.png")), true)?;
        sh.write_png(dir.join(format!("gt/sharp_{i:04}.png")), true)?;
    }
    let hash = b.spec.hash();
    write_json(&dir.join("cameras.json"), &b.cameras)?;
    write_json(&dir.join("split.json"), &b.split)?;
    write_json(
        &dir.join("points.json"),
        &PointsFile {
            config_hash: hash.clone(),
            points: b.points.clone(),
        },
    )?;
    write_json(
        &dir.join("benchmark.json"),
        &SpecFile {
            config_hash: hash,
            spec: b.spec.clone(),
        },
    )?;
    b.scene.save(dir.join("gt_scene.json"))?;
    Ok(())
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark, HarnessError> {
    let cameras: CamerasFile = read_json(&dir.join("cameras.json"))?;
    let split: Split = read_json(&dir.join("split.json"))?;
    let points: PointsFile = read_json(&dir.join("points.json"))?;
    let spec: SpecFile = read_json(&dir.join("benchmark.json"))?;
    let scene = GaussianScene::load(dir.join("gt_scene.json"))?;
    let n = cameras.frames.len();
    for &f in split.train.iter().chain(&split.test) {
        if f >= n {
            return Err(HarnessError::Data(format!("split index {f} outside {n} frames")));
        }
    }
    let mut blurry = Vec::with_capacity(n);
    let mut sharp = Vec::with_capacity(n);
    for i in 0..n {
        blurry.push(Image::read_png(dir.join(format!("images/blur_{i:04}.png")))?);
        sharp.push(Image::read_png(dir.join(format!("gt/sharp_{i:04}.png")))?);
    }
    Ok(Benchmark {
        spec: spec.spec,
        scene,
        cameras,
        split,
        blurry,
        sharp,
        points: points.points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub width: usize,
    pub height: usize,
    /// Row-major, DC at (width/2, height/2).
    pub log_magnitude: Vec<f64>,
    /// Mean power per integer-radius annulus, radius in cycles per image.
    pub radial: Vec<f64>,
    pub hf_ratio: f64,
}

impl SpectrumProfile {
    pub fn log_magnitude_image(&self) -> Image {
        Image::from_vec(self.width, self.height, 1, self.log_magnitude.clone())
            .expect("shape matches")
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrum of the luma channel. The mean is removed before the Hann
/// window and restored in the DC bin, so flat regions do not leak.
/// `hf_ratio` is the share of non-DC power whose normalized radius exceeds
/// half the Nyquist frequency.
pub fn radial_spectrum(img: &Image) -> SpectrumProfile {
    let g = img.luma();
    let (w, h) = (g.width(), g.height());
    let mean = g.mean();
    let (hx, hy) = (hann(w), hann(h));
    let mut buf: Vec<Complex<f64>> = (0..w * h)
        .map(|i| Complex::new((g.data()[i] - mean) * hx[i % w] * hy[i / w], 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fx = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        fx.process(row);
    }
    let fy = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        fy.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf[0] += Complex::new(mean * (w * h) as f64, 0.0);
    let signed = |k: usize, n: usize| if k < n.div_ceil(2) { k as i64 } else { k as i64 - n as i64 };
    let rmax = ((w / 2).pow(2) as f64 + (h / 2).pow(2) as f64).sqrt().round() as usize;
    let mut sums = vec![0.0; rmax + 1];
    let mut counts = vec![0usize; rmax + 1];
    let mut log_mag = vec![0.0; w * h];
    let (mut hf, mut ac) = (0.0, 0.0);
    for ky in 0..h {
        for kx in 0..w {
            let c = buf[ky * w + kx];
            let p = c.norm_sqr();
            let (sx, sy) = (signed(kx, w), signed(ky, h));
            let cx = (sx + (w / 2) as i64) as usize;
            let cy = (sy + (h / 2) as i64) as usize;
            if cx < w && cy < h {
                log_mag[cy * w + cx] = c.norm().ln_1p();
            }
            let r = ((sx * sx + sy * sy) as f64).sqrt().round() as usize;
            if r <= rmax {
                sums[r] += p;
                counts[r] += 1;
            }
            if sx != 0 || sy != 0 {
                let rho = ((sx as f64 / w as f64).powi(2) + (sy as f64 / h as f64).powi(2)).sqrt();
                ac += p;
                if rho > 0.25 {
                    hf += p;
                }
            }
        }
    }
    let radial = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
        .collect();
    SpectrumProfile {
        width: w,
        height: h,
        log_magnitude: log_mag,
        radial,
        hf_ratio: if ac > 0.0 { hf / ac } else { 0.0 },
    }
}

pub fn mean_hf_ratio(images: &[Image]) -> f64 {
    images.iter().map(|i| radial_spectrum(i).hf_ratio).sum::<f64>() / images.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEval {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub hf_ratio_render: f64,
    pub hf_ratio_gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: Option<String>,
    pub views: Vec<ViewEval>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_hf_ratio_render: f64,
    pub mean_hf_ratio_gt: f64,
    /// Mean radial power over the test views.
    pub radial_render: Vec<f64>,
    pub radial_gt: Vec<f64>,
}

pub const EVAL_REPORT_SCHEMA: &str = include_str!("../schema/eval_report.schema.json");

fn mean_profiles(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.iter().map(Vec::len).max().unwrap_or(0);
    (0..n)
        .map(|i| p.iter().map(|v| v.get(i).copied().unwrap_or(0.0)).sum::<f64>() / p.len() as f64)
        .collect()
}

/// Rigid transform `G` with `estimated[i] ≈ G * truth[i]`: the world-frame
/// drift shared by all optimized cameras. Averaged in the tangent space
/// around the first camera's estimate.
pub fn gauge_alignment(estimated: &[PoseSE3], truth: &[PoseSE3]) -> PoseSE3 {
    let per: Vec<PoseSE3> = estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| *e * t.inverse())
        .collect();
    let Some(g0) = per.first().copied() else {
        return PoseSE3::identity();
    };
    let mut mean = Vector6::zeros();
    for g in &per {
        mean += (g0.inverse() * *g).log().value.to_vector();
    }
    mean /= per.len() as f64;
    g0 * PoseSE3::exp(&TangentSE3::from_vector(&mean))
}

/// Gauge of a trained run. `frames[i]` is the frame of the optimized
/// segment `segments[i]`; `truth` holds the true cameras indexed by frame.
pub fn run_gauge(
    frames: &[usize],
    segments: &[ExposureSegment],
    truth: &[PoseSE3],
    mode: InterpolationMode,
) -> Result<PoseSE3, HarnessError> {
    let mut est = Vec::new();
    let mut gt = Vec::new();
    for (&f, s) in frames.iter().zip(segments) {
        let t = truth
            .get(f)
            .ok_or_else(|| HarnessError::Data(format!("no ground-truth camera for frame {f}")))?;
        est.push(s.midpoint(mode));
        gt.push(*t);
    }
    Ok(gauge_alignment(&est, &gt))
}

/// Scores a training outcome on the held-out views after removing the
/// gauge of its optimized cameras.
pub fn eval_outcome(
    out: &TrainOutcome,
    data: &Dataset,
    cfg: &TrainConfig,
    truth: &[PoseSE3],
) -> Result<EvalReport, HarnessError> {
    let frames: Vec<usize> = data.train.iter().map(|v| v.frame).collect();
    let g = run_gauge(&frames, &out.segments, truth, cfg.blur.interpolation)?;
    eval_scene_aligned(&out.scene, data, &cfg.render, &g)
}

/// Renders the held-out views at their ground-truth poses and scores them.
pub fn eval_scene(
    scene: &GaussianScene,
    data: &Dataset,
    rcfg: &RenderConfig,
) -> Result<EvalReport, HarnessError> {
    eval_scene_aligned(scene, data, rcfg, &PoseSE3::identity())
}

/// Like [`eval_scene`], with every held-out pose moved by `alignment`
/// (see [`gauge_alignment`]).
pub fn eval_scene_aligned(
    scene: &GaussianScene,
    data: &Dataset,
    rcfg: &RenderConfig,
    alignment: &PoseSE3,
) -> Result<EvalReport, HarnessError> {
    if data.test.is_empty() {
        return Err(HarnessError::Data("dataset has no test views".into()));
    }
    let mut views = Vec::new();
    let mut pr = Vec::new();
    let mut pg = Vec::new();
    for t in &data.test {
        let pose = *alignment * t.pose;
        let img = PreparedFrame::new(scene, &pose, &data.intrinsics, rcfg)
            .map_err(render_err)?
            .render()
            .color
            .clamp01();
        let sr = radial_spectrum(&img);
        let sg = radial_spectrum(&t.sharp);
        views.push(ViewEval {
            frame: t.frame,
            psnr: psnr(&img, &t.sharp).map_err(render_err)?,
            ssim: ssim_value(&img, &t.sharp).map_err(render_err)?,
            hf_ratio_render: sr.hf_ratio,
            hf_ratio_gt: sg.hf_ratio,
        });
        pr.push(sr.radial);
        pg.push(sg.radial);
    }
    let n = views.len() as f64;
    let avg = |f: fn(&ViewEval) -> f64| views.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        config_hash: None,
        mean_psnr: avg(|v| v.psnr),
        mean_ssim: avg(|v| v.ssim),
        mean_hf_ratio_render: avg(|v| v.hf_ratio_render),
        mean_hf_ratio_gt: avg(|v| v.hf_ratio_gt),
        radial_render: mean_profiles(&pr),
        radial_gt: mean_profiles(&pg),
        views,
    })
}

/// Evaluates the checkpoint in a run directory. With `truth` (true cameras
/// indexed by frame) the held-out poses are aligned to the run's gauge.
pub fn eval_run(
    run_dir: &Path,
    data: &Dataset,
    truth: Option<&[PoseSE3]>,
) -> Result<EvalReport, HarnessError> {
    let ckpt = run_dir.join("scene.json");
    if !ckpt.exists() {
        return Err(HarnessError::Data(format!("missing checkpoint {}", ckpt.display())));
    }
    let scene = GaussianScene::load(&ckpt)?;
    let (rcfg, mode) = match std::fs::read_to_string(run_dir.join("config.json")) {
        Ok(text) => {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Data(format!("config.json: {e}")))?;
            let cfg: TrainConfig = serde_json::from_value(v["config"].clone())
                .map_err(|e| HarnessError::Data(format!("config.json: {e}")))?;
            (cfg.render, cfg.blur.interpolation)
        }
        Err(_) => (RenderConfig::default(), InterpolationMode::default()),
    };
    let poses = run_dir.join("poses.json");
    let p: Option<PosesFile> = if poses.exists() { Some(read_json(&poses)?) } else { None };
    let g = match (&p, truth) {
        (Some(p), Some(truth)) => {
            let frames: Vec<usize> = p.segments.iter().map(|r| r.frame).collect();
            let segs = p
                .segments
                .iter()
                .map(|r| ExposureSegment::new(r.start, r.end, r.n.max(1)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Data(format!("poses.json: {e}")))?;
            run_gauge(&frames, &segs, truth, mode)?
        }
        _ => PoseSE3::identity(),
    };
    let mut report = eval_scene_aligned(&scene, data, &rcfg, &g)?;
    report.config_hash = p.map(|p| p.config_hash);
    Ok(report)
}

pub fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frame     psnr    ssim  hf_render  hf_gt");
    for v in &r.views {
        let _ = writeln!(
            s,
            "{:5} {:8.3} {:7.4} {:10.4} {:6.4}",
            v.frame, v.psnr, v.ssim, v.hf_ratio_render, v.hf_ratio_gt
        );
    }
    let _ = writeln!(
        s,
        " mean {:8.3} {:7.4} {:10.4} {:6.4}",
        r.mean_psnr, r.mean_ssim, r.mean_hf_ratio_render, r.mean_hf_ratio_gt
    );
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStage {
    Baseline,
    Geo,
    Deblur,
    Depth,
}

impl AblationStage {
    pub const ALL: [AblationStage; 4] = [
        AblationStage::Baseline,
        AblationStage::Geo,
        AblationStage::Deblur,
        AblationStage::Depth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationStage::Baseline => "baseline",
            AblationStage::Geo => "+geo",
            AblationStage::Deblur => "+deblur",
            AblationStage::Depth => "+depth",
        }
    }

    /// Cumulative: each stage keeps the terms of the previous one. Weights
    /// switched on take their value from `full`.
    pub fn apply(self, full: &TrainConfig) -> TrainConfig {
        let mut c = full.clone();
        let rank = self as usize;
        if rank < 1 {
            c.lambda_geo = 0.0;
        }
        if rank < 2 {
            c.lambda_pr = 0.0;
        }
        if rank < 3 {
            c.lambda_reg = 0.0;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stage: AblationStage,
    pub seeds: Vec<u64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("stage        psnr     ssim\n");
    for r in rows {
        let _ = writeln!(s, "{:<10} {:7.3} {:8.4}", r.stage.label(), r.mean_psnr, r.mean_ssim);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            recipe: SceneRecipe::new(3, 120, SceneLayout::ClusterField),
            width: 32,
            height: 24,
            dense_samples: 40,
            ..Default::default()
        }
    }

    #[test]
    fn default_indices_avoid_holdout() {
        for v in [3, 6, 9] {
            let idx = default_indices(v).unwrap();
            assert_eq!(idx.len(), v);
            assert!(idx.iter().all(|i| i % HOLDOUT_EVERY != 0 && *i < 30));
        }
        assert_eq!(default_indices(3).unwrap(), vec![5, 15, 25]);
    }

    #[test]
    fn bad_indices_are_rejected() {
        let mut s = small_spec();
        s.indices = Some(vec![5, 14]);
        assert!(matches!(s.validate(), Err(HarnessError::InvalidArgument(_))));
        s.indices = Some(vec![5, 40]);
        assert!(s.validate().is_err());
        s.indices = Some(vec![5, 5]);
        assert!(s.validate().is_err());
        s.indices = None;
        s.views = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_exposure_gives_sharp_frames() {
        let mut s = small_spec();
        s.exposure = 0.0;
        s.frames = 8;
        s.indices = Some(vec![3, 5]);
        let b = build_benchmark(&s).unwrap();
        assert_eq!(b.blurry, b.sharp);
    }

    #[test]
    fn split_and_dataset_are_disjoint() {
        let mut s = small_spec();
        s.frames = 26;
        let b = build_benchmark(&s).unwrap();
        assert_eq!(b.split.test, vec![0, 7, 14, 21]);
        let d = b.dataset();
        d.validate().unwrap();
        assert_eq!(d.train.len(), 3);
        for v in &d.train {
            let gt = b.cameras.frames[v.frame].pose;
            let err = crate::lie::geodesic_distance(&gt, &v.init_pose);
            assert!(err > 0.0 && err < 0.05);
        }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let mut s = small_spec();
        s.frames = 26;
        let b = build_benchmark(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_benchmark(&b, dir.path()).unwrap();
        let back = load_benchmark(dir.path()).unwrap();
        assert_eq!(back, b);
        assert!(dir.path().join("images/blur_0005.png").exists());
        assert!(dir.path().join("gt/sharp_0025.png").exists());
    }

    #[test]
    fn constant_image_is_pure_dc() {
        let p = radial_spectrum(&Image::filled(32, 24, 3, 0.4));
        assert!(p.radial[0] > 0.0);
        let rest: f64 = p.radial[1..].iter().sum();
        assert!(rest <= 1e-24 * p.radial[0], "{rest}");
    }

    #[test]
    fn sinusoid_peaks_at_its_frequency() {
        for f in [3usize, 5, 9] {
            let img = Image::from_fn(64, 48, 1, |x, _, _| {
                0.5 + 0.3 * (2.0 * std::f64::consts::PI * f as f64 * x as f64 / 64.0).sin()
            });
            let p = radial_spectrum(&img);
            let peak = (1..p.radial.len())
                .max_by(|a, b| p.radial[*a].total_cmp(&p.radial[*b]))
                .unwrap();
            assert_eq!(peak, f);
        }
    }

    #[test]
    fn profile_is_non_negative_and_reaches_nyquist() {
        let mut rng = SceneRng::new(2);
        let img = Image::from_fn(40, 30, 3, |_, _, _| rng.uniform(0.0, 1.0));
        let p = radial_spectrum(&img);
        assert!(p.radial.iter().all(|v| *v >= 0.0));
        assert_eq!(p.radial.len(), 26);
        assert!(p.hf_ratio > 0.3 && p.hf_ratio < 1.0);
    }

    #[test]
    fn blur_lowers_hf_ratio() {
        let s = small_spec();
        let b = build_benchmark(&s).unwrap();
        assert!(mean_hf_ratio(&b.blurry) < mean_hf_ratio(&b.sharp));
    }

    #[test]
    fn ground_truth_evaluates_perfectly() {
        let mut s = small_spec();
        s.frames = 26;
        let b = build_benchmark(&s).unwrap();
        let mut d = b.dataset();
        // unquantized references, so the render matches exactly
        for t in &mut d.test {
            t.sharp = PreparedFrame::new(&b.scene, &t.pose, &d.intrinsics, &RenderConfig::default())
                .unwrap()
                .render()
                .color
                .clamp01();
        }
        let r = eval_scene(&b.scene, &d, &RenderConfig::default()).unwrap();
        assert_eq!(r.mean_psnr, 99.0);
        assert_eq!(r.mean_ssim, 1.0);
        let v = serde_json::to_value(&r).unwrap();
        let schema: serde_json::Value = serde_json::from_str(EVAL_REPORT_SCHEMA).unwrap();
        assert!(jsonschema::is_valid(&schema, &v));
        assert!(report_text(&r).contains("mean"));
    }

    #[test]
    fn eval_run_needs_checkpoint() {
        let mut s = small_spec();
        s.frames = 26;
        let d = build_benchmark(&s).unwrap().dataset();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(eval_run(dir.path(), &d, None), Err(HarnessError::Data(_))));
    }

    #[test]
    fn ablation_stages_are_cumulative() {
        let full = TrainConfig::default();
        let b = AblationStage::Baseline.apply(&full);
        assert_eq!((b.lambda_geo, b.lambda_pr, b.lambda_reg), (0.0, 0.0, 0.0));
        let g = AblationStage::Geo.apply(&full);
        assert_eq!((g.lambda_geo, g.lambda_pr, g.lambda_reg), (0.01, 0.0, 0.0));
        let d = AblationStage::Deblur.apply(&full);
        assert_eq!((d.lambda_geo, d.lambda_pr, d.lambda_reg), (0.01, 0.01, 0.0));
        assert_eq!(AblationStage::Depth.apply(&full), full);
    }
}
