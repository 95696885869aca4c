//! Joint optimization of the Gaussian scene and per-frame exposure segments.

use crate::blur::{
    blurry_loss, sample_params, synthesize_blur_backward, synthesize_blur_with, BlurLossWeights,
    BlurOptions, ExposureSegment,
};
use crate::explore::{
    baseline_score, explore, ExplorationConfig, ExploreBuffer, ExploreTrace, Reference,
};
use crate::image::Image;
use crate::lie::{interpolate_pose_with, interpolation_jacobians, PoseSE3, TangentSE3};
use crate::metrics::{psnr, ssim_value};
use crate::priors::{perceptual_loss, DeblurRequest, PriorProvider, ProviderError};
use crate::rng::{derive_seed, SceneRng};
use crate::scene::{logit, Gaussian, GaussianScene, SH_C0, SH_COEFFS};
use crate::splat::{CameraIntrinsics, PreparedFrame, RenderConfig, RenderGradients};
use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("prior provider failed: {0}")]
    Provider(#[from] ProviderError),
    #[error("render failed: {0}")]
    Render(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn render_err(e: impl std::fmt::Display) -> TrainError {
    TrainError::Render(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub frame: usize,
    pub blurry: Image,
    pub init_pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub frame: usize,
    pub pose: PoseSE3,
    pub sharp: Image,
}

/// Sparse colored points standing in for a structure-from-motion cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub train: Vec<TrainView>,
    pub test: Vec<TestView>,
    pub points: Vec<InitPoint>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.train.is_empty() {
            return Err(TrainError::Data("dataset has no training views".into()));
        }
        if self.points.is_empty() {
            return Err(TrainError::Data("dataset has no initial points".into()));
        }
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for v in &self.train {
            if v.blurry.width() != w || v.blurry.height() != h || v.blurry.channels() != 3 {
                return Err(TrainError::Data(format!("frame {} has the wrong shape", v.frame)));
            }
            if self.test.iter().any(|t| t.frame == v.frame) {
                return Err(TrainError::Data(format!(
                    "frame {} is both a training and a test view",
                    v.frame
                )));
            }
        }
        for t in &self.test {
            if t.sharp.width() != w || t.sharp.height() != h || t.sharp.channels() != 3 {
                return Err(TrainError::Data(format!("test frame {} has the wrong shape", t.frame)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianLr {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub sh: f64,
    /// Factor applied to `sh` for the degree-1 coefficients.
    pub sh_rest_factor: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        GaussianLr {
            position: 1.6e-4,
            sh: 2.5e-3,
            sh_rest_factor: 0.05,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

/// Which depth maps the smoothness term sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRegTarget {
    #[default]
    Generated,
    /// Every virtual pose of the sampled training frame.
    Training,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub gen_interval: usize,
    pub n_virtual: usize,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub lambda_pr: f64,
    pub lambda_geo: f64,
    pub lambda_reg: f64,
    pub pose_lr_start: f64,
    pub pose_lr_end: f64,
    pub lr: GaussianLr,
    pub exploration: ExplorationConfig,
    pub seed: u64,
    pub eval_interval: usize,
    pub prune_interval: usize,
    pub prune_opacity: f64,
    /// Half-size of the random split applied to coincident segment endpoints.
    pub pose_init_jitter: f64,
    pub optimize_poses: bool,
    pub depth_reg_target: DepthRegTarget,
    pub init_opacity: f64,
    pub blur: BlurOptions,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 7000,
            warmup_iters: 1500,
            gen_interval: 200,
            n_virtual: 10,
            lambda_l1: 0.8,
            lambda_ssim: 0.2,
            lambda_pr: 0.01,
            lambda_geo: 0.01,
            lambda_reg: 0.1,
            pose_lr_start: 5e-3,
            pose_lr_end: 5e-5,
            lr: GaussianLr::default(),
            exploration: ExplorationConfig::default(),
            seed: 0,
            eval_interval: 500,
            prune_interval: 500,
            prune_opacity: 0.005,
            pose_init_jitter: 1e-4,
            optimize_poses: true,
            depth_reg_target: DepthRegTarget::Generated,
            init_opacity: 0.1,
            blur: BlurOptions::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_iters == 0 || self.warmup_iters > self.total_iters {
            return bad(format!(
                "need 0 < total_iters and warmup_iters <= total_iters, got {} / {}",
                self.total_iters, self.warmup_iters
            ));
        }
        if self.gen_interval == 0 || self.n_virtual == 0 {
            return bad("gen_interval and n_virtual must be positive".into());
        }
        let lambdas = [
            self.lambda_l1,
            self.lambda_ssim,
            self.lambda_pr,
            self.lambda_geo,
            self.lambda_reg,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad(format!("loss weights must be finite and non-negative: {lambdas:?}"));
        }
        if !(self.pose_lr_end > 0.0 && self.pose_lr_start >= self.pose_lr_end) {
            return bad("pose learning rates need start >= end > 0".into());
        }
        let lr = &self.lr;
        if [lr.position, lr.sh, lr.sh_rest_factor, lr.opacity, lr.scale, lr.rotation]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("gaussian learning rates must be finite and non-negative".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must be in (0, 1)".into());
        }
        self.exploration
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn blur_weights(&self) -> BlurLossWeights {
        BlurLossWeights {
            l1: self.lambda_l1,
            ssim: self.lambda_ssim,
        }
    }

    /// Exponential decay from `pose_lr_start` to `pose_lr_end` over `total_iters`.
    pub fn pose_lr(&self, iter: usize) -> f64 {
        let f = (iter.min(self.total_iters) as f64) / self.total_iters as f64;
        self.pose_lr_start * (self.pose_lr_end / self.pose_lr_start).powf(f)
    }

    fn exploring(&self) -> bool {
        self.lambda_geo > 0.0
            || (self.lambda_reg > 0.0 && self.depth_reg_target != DepthRegTarget::Training)
    }

    fn needs_deblur(&self) -> bool {
        self.lambda_pr > 0.0 || self.exploring()
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::rng::hash_bytes(0x5eed, text.as_bytes()))
    }
}

/// Mean absolute forward difference in x plus in y, over the pixel count.
pub fn depth_reg_loss(depth: &Image) -> (f64, Image) {
    let (w, h) = (depth.width(), depth.height());
    let n = (w * h) as f64;
    let mut loss = 0.0;
    let mut adj = Image::new(w, h, 1);
    let d = depth.data();
    let sgn = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let g = d[i + 1] - d[i];
                loss += g.abs();
                let s = sgn(g) / n;
                adj.data_mut()[i + 1] += s;
                adj.data_mut()[i] -= s;
            }
            if y + 1 < h {
                let g = d[i + w] - d[i];
                loss += g.abs();
                let s = sgn(g) / n;
                adj.data_mut()[i + w] += s;
                adj.data_mut()[i] -= s;
            }
        }
    }
    (loss / n, adj)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub blurry: f64,
    pub pr: f64,
    pub geo: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pr: f64,
    pub geo: f64,
    pub reg: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossWeights {
            pr: cfg.lambda_pr,
            geo: cfg.lambda_geo,
            reg: cfg.lambda_reg,
        }
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.blurry + w.pr * c.pr + w.geo * c.geo + w.reg * c.reg
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Advances the moments and returns the additive update.
    pub fn step(&mut self, grads: &[f64], lr: f64) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = vec![0.0; grads.len()];
        for i in 0..grads.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            out[i] = -lr * mh / (vh.sqrt() + self.eps);
        }
        out
    }

    /// Keeps the moments of the items flagged in `keep`, each `stride` long.
    pub fn retain(&mut self, keep: &[bool], stride: usize) {
        let filter = |v: &[f64]| -> Vec<f64> {
            v.chunks(stride)
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }
}

const SH_STRIDE: usize = SH_COEFFS * 3;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamGroups {
    pub position: Adam,
    pub log_scale: Adam,
    pub rotation: Adam,
    pub opacity: Adam,
    pub sh: Adam,
    pub poses: Adam,
}

impl AdamGroups {
    pub fn new(gaussians: usize, frames: usize) -> Self {
        AdamGroups {
            position: Adam::new(3 * gaussians),
            log_scale: Adam::new(3 * gaussians),
            rotation: Adam::new(3 * gaussians),
            opacity: Adam::new(gaussians),
            sh: Adam::new(SH_STRIDE * gaussians),
            poses: Adam::new(12 * frames),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub scene: RenderGradients,
    /// (start, end) per training frame.
    pub poses: Vec<(TangentSE3, TangentSE3)>,
}

impl Gradients {
    pub fn zeros(gaussians: usize, frames: usize) -> Self {
        Gradients {
            scene: RenderGradients::zeros(gaussians),
            poses: vec![(TangentSE3::zero(), TangentSE3::zero()); frames],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.scene.is_finite()
            && self
                .poses
                .iter()
                .all(|(a, b)| a.is_finite() && b.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    pub sh_rest: f64,
    pub pose: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedView {
    pub pose: PoseSE3,
    pub fixed: Image,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub losses: LossComponents,
    pub heldout_psnr: Option<f64>,
    pub heldout_ssim: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,L_blurry,L_pr,L_geo,L_reg,heldout_psnr,heldout_ssim";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.losses.blurry,
            r.losses.pr,
            r.losses.geo,
            r.losses.reg,
            opt(r.heldout_psnr),
            opt(r.heldout_ssim)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub scene: GaussianScene,
    pub segments: Vec<ExposureSegment>,
    pub adam: AdamGroups,
    pub generated: Vec<GeneratedView>,
    pub explore_buffer: ExploreBuffer,
    pub iteration: usize,
    pub metrics: Vec<MetricRow>,
}

/// Applies one Adam update to every parameter group. Returns false (and
/// leaves everything untouched) when any gradient is non-finite.
pub fn adam_step(state: &mut TrainState, grads: &Gradients, lr: &LearningRates) -> bool {
    if !grads.is_finite() {
        log::warn!("iteration {}: non-finite gradient, step skipped", state.iteration);
        return false;
    }
    let gs = &grads.scene.gaussians;
    let flat3 = |f: &dyn Fn(usize) -> Vector3<f64>| -> Vec<f64> {
        (0..gs.len()).flat_map(|i| f(i).iter().copied().collect::<Vec<_>>()).collect()
    };
    let a = &mut state.adam;
    let d_pos = a.position.step(&flat3(&|i| gs[i].mean), lr.position);
    let d_scale = a.log_scale.step(&flat3(&|i| gs[i].log_scale), lr.log_scale);
    let d_rot = a.rotation.step(&flat3(&|i| gs[i].rotation), 1.0);
    let d_op = a
        .opacity
        .step(&gs.iter().map(|g| g.opacity_logit).collect::<Vec<_>>(), lr.opacity);
    let sh_flat: Vec<f64> = gs.iter().flat_map(|g| g.sh.iter().flatten().copied()).collect();
    let d_sh = a.sh.step(&sh_flat, 1.0);
    for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
        for k in 0..3 {
            g.mean[k] += d_pos[3 * i + k];
            g.log_scale[k] += d_scale[3 * i + k];
        }
        let step = Vector3::new(d_rot[3 * i], d_rot[3 * i + 1], d_rot[3 * i + 2]) * lr.rotation;
        g.rotation = crate::lie::Rotation::exp(&step) * g.rotation;
        g.opacity_logit += d_op[i];
        for c in 0..SH_COEFFS {
            let rate = if c == 0 { lr.sh } else { lr.sh_rest };
            for ch in 0..3 {
                g.sh[c][ch] += rate * d_sh[SH_STRIDE * i + 3 * c + ch];
            }
        }
    }
    let pose_flat: Vec<f64> = grads
        .poses
        .iter()
        .flat_map(|(s, e)| {
            let mut v = s.to_vector().as_slice().to_vec();
            v.extend_from_slice(e.to_vector().as_slice());
            v
        })
        .collect();
    let d_pose = a.poses.step(&pose_flat, lr.pose);
    for (f, seg) in state.segments.iter_mut().enumerate() {
        let ds = Vector6::from_column_slice(&d_pose[12 * f..12 * f + 6]);
        let de = Vector6::from_column_slice(&d_pose[12 * f + 6..12 * f + 12]);
        seg.start = seg.start.retract_left(&TangentSE3::from_vector(&ds));
        seg.end = seg.end.retract_left(&TangentSE3::from_vector(&de));
    }
    true
}

/// Drops primitives below the opacity floor together with their moments.
/// Returns how many were removed.
pub fn prune(state: &mut TrainState, min_opacity: f64) -> usize {
    let keep: Vec<bool> = state
        .scene
        .gaussians
        .iter()
        .map(|g| g.opacity() >= min_opacity)
        .collect();
    let removed = keep.iter().filter(|k| !**k).count();
    if removed == 0 || removed == keep.len() {
        return 0;
    }
    let mut it = keep.iter();
    state.scene.gaussians.retain(|_| *it.next().unwrap());
    let a = &mut state.adam;
    a.position.retain(&keep, 3);
    a.log_scale.retain(&keep, 3);
    a.rotation.retain(&keep, 3);
    a.opacity.retain(&keep, 1);
    a.sh.retain(&keep, SH_STRIDE);
    removed
}

/// Isotropic primitives at the points, sized by the mean distance to the
/// three nearest neighbors.
pub fn init_scene(points: &[InitPoint], opacity: f64) -> Result<GaussianScene, TrainError> {
    if points.is_empty() {
        return Err(TrainError::Data("no initial points".into()));
    }
    let gs = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q.position - p.position).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            let k = d.len().min(3);
            let scale = if k == 0 {
                0.1
            } else {
                (d[..k].iter().sum::<f64>() / k as f64).max(1e-3)
            };
            let mut g = Gaussian::isotropic(p.position, scale, opacity, [0.0; 3]);
            for c in 0..3 {
                g.sh[0][c] = p.color[c] / SH_C0;
            }
            g.opacity_logit = logit(opacity);
            g
        })
        .collect();
    GaussianScene::new(gs, 1).map_err(|e| TrainError::Data(e.to_string()))
}

fn points_extent(points: &[InitPoint]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p.position);
        hi = hi.sup(&p.position);
    }
    (0.5 * (hi - lo).norm()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub skipped_steps: usize,
    pub pruned: usize,
    pub explore_rounds: Vec<ExploreTrace>,
    pub explore_failures: usize,
    pub generated_views: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scene: GaussianScene,
    pub segments: Vec<ExposureSegment>,
    pub report: TrainReport,
}

/// Held-out PSNR and SSIM, each averaged over the test views.
pub fn evaluate_heldout(
    scene: &GaussianScene,
    data: &Dataset,
    rcfg: &RenderConfig,
) -> Result<Option<(f64, f64)>, TrainError> {
    if data.test.is_empty() {
        return Ok(None);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for t in &data.test {
        let img = PreparedFrame::new(scene, &t.pose, &data.intrinsics, rcfg)
            .map_err(render_err)?
            .render()
            .color
            .clamp01();
        p += psnr(&img, &t.sharp).map_err(render_err)?;
        s += ssim_value(&img, &t.sharp).map_err(render_err)?;
    }
    let n = data.test.len() as f64;
    Ok(Some((p / n, s / n)))
}

fn split_pose_grad(
    seg: &ExposureSegment,
    u: f64,
    g: &TangentSE3,
    opts: &BlurOptions,
) -> (TangentSE3, TangentSE3) {
    let (js, je) = interpolation_jacobians(&seg.start, &seg.end, u, opts.interpolation);
    let v = g.to_vector();
    (
        TangentSE3::from_vector(&(js.transpose() * v)),
        TangentSE3::from_vector(&(je.transpose() * v)),
    )
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Dataset,
    provider: Option<&'a dyn PriorProvider>,
    pub state: TrainState,
    deblurred: Vec<Image>,
    extent: f64,
    frame_rng: SceneRng,
    gen_rng: SceneRng,
    order: Vec<usize>,
    cursor: usize,
    report: TrainReport,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a Dataset,
        cfg: TrainConfig,
        provider: Option<&'a dyn PriorProvider>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        data.validate()?;
        let scene = init_scene(&data.points, cfg.init_opacity)?;
        let mut jitter = SceneRng::new(derive_seed(cfg.seed, 3));
        let segments = data
            .train
            .iter()
            .map(|v| {
                // coincident endpoints get identical gradients forever; split them slightly
                let j = cfg.pose_init_jitter;
                let d = TangentSE3::from_vector(&Vector6::from_fn(|_, _| jitter.uniform(-j, j)));
                ExposureSegment::new(
                    v.init_pose.retract_left(&d.scale(-1.0)),
                    v.init_pose.retract_left(&d),
                    cfg.n_virtual,
                )
                .map_err(|e| TrainError::Config(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut deblurred = Vec::new();
        if cfg.needs_deblur() {
            let p = provider.ok_or_else(|| {
                TrainError::Config("this configuration needs a prior provider".into())
            })?;
            if !p.capabilities().deblur {
                return Err(ProviderError::Unsupported("deblur").into());
            }
            for v in &data.train {
                let req = DeblurRequest {
                    image: v.blurry.clone(),
                    frame: Some(v.frame),
                    pose: Some(v.init_pose),
                };
                deblurred.push(p.deblur(&req)?);
            }
        }
        let n = scene.len();
        let state = TrainState {
            adam: AdamGroups::new(n, data.train.len()),
            scene,
            segments,
            generated: Vec::new(),
            explore_buffer: ExploreBuffer::default(),
            iteration: 0,
            metrics: Vec::new(),
        };
        Ok(Trainer {
            extent: points_extent(&data.points),
            frame_rng: SceneRng::new(derive_seed(cfg.seed, 1)),
            gen_rng: SceneRng::new(derive_seed(cfg.seed, 2)),
            cfg,
            data,
            provider,
            state,
            deblurred,
            order: Vec::new(),
            cursor: 0,
            report: TrainReport {
                metrics: Vec::new(),
                skipped_steps: 0,
                pruned: 0,
                explore_rounds: Vec::new(),
                explore_failures: 0,
                generated_views: 0,
            },
        })
    }

    pub fn deblurred_targets(&self) -> &[Image] {
        &self.deblurred
    }

    fn next_frame(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.train.len()).collect();
            self.frame_rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn midpoint(&self, f: usize) -> PoseSE3 {
        self.state.segments[f].midpoint(self.cfg.blur.interpolation)
    }

    fn learning_rates(&self, iter: usize) -> LearningRates {
        let lr = &self.cfg.lr;
        LearningRates {
            position: lr.position * self.extent,
            log_scale: lr.scale,
            rotation: lr.rotation,
            opacity: lr.opacity,
            sh: lr.sh,
            sh_rest: lr.sh * lr.sh_rest_factor,
            pose: if self.cfg.optimize_poses {
                self.cfg.pose_lr(iter)
            } else {
                0.0
            },
        }
    }

    /// Blurry photometric term for frame `f`, plus the optional smoothness
    /// term on its virtual-pose depth maps.
    fn frame_terms(&self, f: usize, grads: &mut Gradients, out: &mut LossComponents) -> Result<(), TrainError> {
        let seg = &self.state.segments[f];
        let k = &self.data.intrinsics;
        let blur = synthesize_blur_with(&self.state.scene, seg, k, &self.cfg.render, &self.cfg.blur)
            .map_err(render_err)?;
        let (lb, adj) = blurry_loss(&blur.color, &self.data.train[f].blurry, &self.cfg.blur_weights())
            .map_err(render_err)?;
        out.blurry = lb;
        let g = synthesize_blur_backward(&self.state.scene, seg, k, &self.cfg.render, &self.cfg.blur, &adj, None)
            .map_err(render_err)?;
        grads.scene.accumulate(&g.scene, 1.0);
        grads.poses[f].0 += g.start;
        grads.poses[f].1 += g.end;
        if self.cfg.lambda_reg > 0.0 && self.cfg.depth_reg_target != DepthRegTarget::Generated {
            let us = sample_params(seg.n, self.cfg.blur.spacing);
            let zero = Image::new(k.width, k.height, 3);
            let mut total = 0.0;
            for &u in &us {
                let pose = interpolate_pose_with(&seg.start, &seg.end, u, self.cfg.blur.interpolation).value;
                let frame = PreparedFrame::new(&self.state.scene, &pose, k, &self.cfg.render).map_err(render_err)?;
                let (l, a) = depth_reg_loss(&frame.render().depth);
                total += l / us.len() as f64;
                let gr = frame
                    .backward(&zero, Some(&a.scale(self.cfg.lambda_reg / us.len() as f64)))
                    .map_err(render_err)?;
                let (gs, ge) = split_pose_grad(seg, u, &gr.pose, &self.cfg.blur);
                grads.scene.accumulate(&gr, 1.0);
                grads.poses[f].0 += gs;
                grads.poses[f].1 += ge;
            }
            out.reg += total;
        }
        Ok(())
    }

    /// Perceptual term between the midpoint render and the cached deblurred target.
    fn prior_term(&self, f: usize, grads: &mut Gradients, out: &mut LossComponents) -> Result<(), TrainError> {
        if self.cfg.lambda_pr <= 0.0 {
            return Ok(());
        }
        let seg = &self.state.segments[f];
        let mid = self.midpoint(f);
        let frame = PreparedFrame::new(&self.state.scene, &mid, &self.data.intrinsics, &self.cfg.render)
            .map_err(render_err)?;
        let (l, adj) = perceptual_loss(&frame.render().color, &self.deblurred[f]).map_err(render_err)?;
        out.pr = l;
        let g = frame
            .backward(&adj.scale(self.cfg.lambda_pr), None)
            .map_err(render_err)?;
        let (gs, ge) = split_pose_grad(seg, 0.5, &g.pose, &self.cfg.blur);
        grads.scene.accumulate(&g, 1.0);
        grads.poses[f].0 += gs;
        grads.poses[f].1 += ge;
        Ok(())
    }

    /// Perceptual and smoothness terms on one generated view. Generated
    /// poses are fixed, so only the scene receives gradients.
    fn generated_term(&mut self, grads: &mut Gradients, out: &mut LossComponents) -> Result<(), TrainError> {
        if self.state.generated.is_empty() || !self.cfg.exploring() {
            return Ok(());
        }
        let i = self.gen_rng.below(self.state.generated.len());
        let view = &self.state.generated[i];
        let frame = PreparedFrame::new(&self.state.scene, &view.pose, &self.data.intrinsics, &self.cfg.render)
            .map_err(render_err)?;
        let r = frame.render();
        let mut d_color = Image::new(r.color.width(), r.color.height(), 3);
        if self.cfg.lambda_geo > 0.0 {
            let (l, adj) = perceptual_loss(&r.color, &view.fixed).map_err(render_err)?;
            out.geo = l;
            d_color = adj.scale(self.cfg.lambda_geo * view.weight);
        }
        let mut d_depth = None;
        if self.cfg.lambda_reg > 0.0 && self.cfg.depth_reg_target != DepthRegTarget::Training {
            let (l, adj) = depth_reg_loss(&r.depth);
            out.reg += l;
            d_depth = Some(adj.scale(self.cfg.lambda_reg * view.weight));
        }
        let g = frame.backward(&d_color, d_depth.as_ref()).map_err(render_err)?;
        grads.scene.accumulate(&g, 1.0);
        Ok(())
    }

    fn references(&self) -> Vec<Reference> {
        (0..self.data.train.len())
            .map(|f| Reference {
                pose: self.midpoint(f),
                image: self.deblurred[f].clone(),
            })
            .collect()
    }

    /// One exploration round. Provider failures skip the round.
    pub fn explore_round(&mut self) {
        let Some(provider) = self.provider else {
            return;
        };
        let refs = self.references();
        let train_poses: Vec<PoseSE3> = refs.iter().map(|r| r.pose).collect();
        if self.state.explore_buffer.poses.is_empty() {
            self.state.explore_buffer.poses = train_poses.clone();
        }
        let k = &self.data.intrinsics;
        let rc = &self.cfg.render;
        let ec = &self.cfg.exploration;
        let base = match baseline_score(&self.state.scene, provider, &train_poses, &refs, k, rc, ec.t0) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("exploration skipped: {e}");
                self.report.explore_failures += 1;
                return;
            }
        };
        match explore(&self.state.scene, provider, &mut self.state.explore_buffer, &refs, base, ec, k, rc) {
            Ok(round) => {
                for c in round.accepted() {
                    if let Some(fixed) = &c.fixed {
                        self.state.generated.push(GeneratedView {
                            pose: c.pose,
                            fixed: fixed.clone(),
                            weight: 1.0,
                        });
                    }
                }
                self.report.explore_rounds.push(round.trace());
            }
            Err(e) => {
                log::warn!("exploration skipped: {e}");
                self.report.explore_failures += 1;
            }
        }
    }

    /// Runs one iteration and returns its losses.
    pub fn step(&mut self) -> Result<LossComponents, TrainError> {
        self.state.iteration += 1;
        let it = self.state.iteration;
        let cfg = &self.cfg;
        if cfg.exploring() && it > cfg.warmup_iters && (it - cfg.warmup_iters - 1) % cfg.gen_interval == 0 {
            self.explore_round();
        }
        let f = self.next_frame();
        let mut grads = Gradients::zeros(self.state.scene.len(), self.data.train.len());
        let mut losses = LossComponents::default();
        self.frame_terms(f, &mut grads, &mut losses)?;
        self.prior_term(f, &mut grads, &mut losses)?;
        self.generated_term(&mut grads, &mut losses)?;
        let lr = self.learning_rates(it);
        if !adam_step(&mut self.state, &grads, &lr) {
            self.report.skipped_steps += 1;
        }
        if self.cfg.prune_interval > 0 && it % self.cfg.prune_interval == 0 {
            self.report.pruned += prune(&mut self.state, self.cfg.prune_opacity);
        }
        let (mut hp, mut hs) = (None, None);
        let eval_now = it == self.cfg.total_iters
            || (self.cfg.eval_interval > 0 && it % self.cfg.eval_interval == 0);
        if eval_now {
            if let Some((p, s)) = evaluate_heldout(&self.state.scene, self.data, &self.cfg.render)? {
                hp = Some(p);
                hs = Some(s);
            }
        }
        self.state.metrics.push(MetricRow {
            iter: it,
            losses,
            heldout_psnr: hp,
            heldout_ssim: hs,
        });
        Ok(losses)
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        while self.state.iteration < self.cfg.total_iters {
            self.step()?;
        }
        self.report.metrics = std::mem::take(&mut self.state.metrics);
        self.report.generated_views = self.state.generated.len();
        Ok(TrainOutcome {
            scene: self.state.scene,
            segments: self.state.segments,
            report: self.report,
        })
    }
}

pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    provider: Option<&dyn PriorProvider>,
) -> Result<TrainOutcome, TrainError> {
    Trainer::new(data, cfg.clone(), provider)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub frame: usize,
    pub start: PoseSE3,
    pub end: PoseSE3,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub config_hash: String,
    pub segments: Vec<SegmentRecord>,
}

/// Writes scene.json, poses.json, metrics.csv and config.json into `dir`.
pub fn write_run_dir(
    dir: &Path,
    data: &Dataset,
    cfg: &TrainConfig,
    out: &TrainOutcome,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    out.scene
        .save(dir.join("scene.json"))
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let poses = PosesFile {
        config_hash: cfg.hash(),
        segments: data
            .train
            .iter()
            .zip(&out.segments)
            .map(|(v, s)| SegmentRecord {
                frame: v.frame,
                start: s.start,
                end: s.end,
                n: s.n,
            })
            .collect(),
    };
    std::fs::write(
        dir.join("poses.json"),
        serde_json::to_string_pretty(&poses).expect("poses serialize"),
    )?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&out.report.metrics))?;
    let snapshot = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&snapshot).expect("config serializes"),
    )?;
    std::fs::write(
        dir.join("explore_trace.json"),
        serde_json::to_string_pretty(&out.report.explore_rounds).expect("trace serializes"),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentFitConfig {
    pub iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub jitter: f64,
    pub seed: u64,
    pub weights: BlurLossWeights,
    pub blur: BlurOptions,
    pub render: RenderConfig,
}

impl Default for SegmentFitConfig {
    fn default() -> Self {
        SegmentFitConfig {
            iters: 3000,
            lr_start: 5e-3,
            lr_end: 5e-5,
            jitter: 1e-4,
            seed: 0,
            weights: BlurLossWeights::default(),
            blur: BlurOptions::default(),
            render: RenderConfig::default(),
        }
    }
}

/// Recovers one frame's exposure segment against a fixed scene from the
/// blurry photometric loss alone, starting from a static segment at `init`.
/// Returns the segment and the per-iteration loss.
pub fn fit_segment(
    scene: &GaussianScene,
    intr: &CameraIntrinsics,
    blurry: &Image,
    init: &PoseSE3,
    n: usize,
    cfg: &SegmentFitConfig,
) -> Result<(ExposureSegment, Vec<f64>), TrainError> {
    if cfg.iters == 0 || !(cfg.lr_end > 0.0 && cfg.lr_start >= cfg.lr_end) {
        return Err(TrainError::Config("segment fit needs iters > 0 and lr_start >= lr_end > 0".into()));
    }
    let mut rng = SceneRng::new(derive_seed(cfg.seed, 3));
    let d = TangentSE3::from_vector(&Vector6::from_fn(|_, _| rng.uniform(-cfg.jitter, cfg.jitter)));
    let mut seg = ExposureSegment::new(init.retract_left(&d.scale(-1.0)), init.retract_left(&d), n)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut adam = Adam::new(12);
    let mut history = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let blur = synthesize_blur_with(scene, &seg, intr, &cfg.render, &cfg.blur).map_err(render_err)?;
        let (l, adj) = blurry_loss(&blur.color, blurry, &cfg.weights).map_err(render_err)?;
        history.push(l);
        let g = synthesize_blur_backward(scene, &seg, intr, &cfg.render, &cfg.blur, &adj, None)
            .map_err(render_err)?;
        if !(g.start.is_finite() && g.end.is_finite()) {
            continue;
        }
        let mut flat = g.start.to_vector().as_slice().to_vec();
        flat.extend_from_slice(g.end.to_vector().as_slice());
        let lr = cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(it as f64 / cfg.iters as f64);
        let step = adam.step(&flat, lr);
        seg.start = seg.start.retract_left(&TangentSE3::from_vector(&Vector6::from_column_slice(&step[..6])));
        seg.end = seg.end.retract_left(&TangentSE3::from_vector(&Vector6::from_column_slice(&step[6..])));
    }
    Ok((seg, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::GroundTruthOracle;
    use crate::scene::{generate_scene, SceneLayout, SceneRecipe};
    use std::sync::Arc;

    fn tiny_dataset() -> (Dataset, Arc<GaussianScene>) {
        let scene = Arc::new(generate_scene(&SceneRecipe::new(4, 60, SceneLayout::TexturedWall)).unwrap());
        let k = CameraIntrinsics::from_fov(24, 18, 60.0).unwrap();
        let center = scene.bounds().center();
        let pose_at = |i: usize| {
            let a = 0.15 * i as f64 - 0.3;
            PoseSE3::look_at(
                center + Vector3::new(4.0 * a.sin(), 0.0, -4.0 * a.cos()),
                center,
                Vector3::new(0.0, -1.0, 0.0),
            )
        };
        let rc = RenderConfig::default();
        let train = (0..4)
            .map(|i| {
                let p = pose_at(i);
                let q = p.retract_left(&TangentSE3::new(Vector3::zeros(), Vector3::new(0.05, 0.0, 0.0)));
                let seg = ExposureSegment::new(p, q, 8).unwrap();
                TrainView {
                    frame: i,
                    blurry: synthesize_blur_with(&scene, &seg, &k, &rc, &BlurOptions::default())
                        .unwrap()
                        .color
                        .clamp01(),
                    init_pose: seg.midpoint(Default::default()),
                }
            })
            .collect();
        let test = vec![TestView {
            frame: 4,
            pose: pose_at(4),
            sharp: PreparedFrame::new(&scene, &pose_at(4), &k, &rc).unwrap().render().color.clamp01(),
        }];
        let points = scene
            .gaussians
            .iter()
            .step_by(2)
            .map(|g| InitPoint {
                position: g.mean + Vector3::new(0.02, -0.01, 0.01),
                color: [0.5, 0.5, 0.5],
            })
            .collect();
        (
            Dataset {
                intrinsics: k,
                train,
                test,
                points,
            },
            scene,
        )
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = [1.0, -2.0, 0.5];
        let mut x = [0.0; 3];
        let mut adam = Adam::new(3);
        for _ in 0..500 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * (x[i] - target[i])).collect();
            let d = adam.step(&g, 1e-2);
            for i in 0..3 {
                x[i] += d[i];
            }
        }
        for i in 0..3 {
            assert!((x[i] - target[i]).abs() < 5e-2, "{x:?}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut adam = Adam::new(2);
        let d = adam.step(&[3.0, -0.01], 0.1);
        assert!((d[0] + 0.1).abs() < 1e-12 && (d[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn adam_retain_keeps_selected_moments() {
        let mut adam = Adam::new(6);
        adam.step(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.1);
        adam.retain(&[true, false, true], 2);
        assert_eq!(adam.m.len(), 4);
        assert!((adam.m[2] - 0.5).abs() < 1e-12 && (adam.m[3] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pose_lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.pose_lr(0), 5e-3);
        assert!((cfg.pose_lr(7000) - 5e-5).abs() < 1e-18);
        assert!((cfg.pose_lr(3500) - 5e-4).abs() < 1e-15);
        assert!((cfg.pose_lr(9000) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn depth_reg_of_ramp_is_closed_form() {
        let (w, h) = (7, 5);
        let depth = Image::from_fn(w, h, 1, |x, y, _| 2.0 + 0.3 * x as f64 - 0.1 * y as f64);
        let (l, _) = depth_reg_loss(&depth);
        let expect = (0.3 * ((w - 1) * h) as f64 + 0.1 * (w * (h - 1)) as f64) / (w * h) as f64;
        assert!((l - expect).abs() < 1e-12);
        assert_eq!(depth_reg_loss(&Image::filled(w, h, 1, 3.0)).0, 0.0);
    }

    #[test]
    fn depth_reg_gradient_matches_finite_differences() {
        let mut rng = SceneRng::new(9);
        let depth = Image::from_fn(6, 5, 1, |_, _, _| rng.uniform(1.0, 3.0));
        let (_, adj) = depth_reg_loss(&depth);
        let h = 1e-7;
        for i in 0..depth.len() {
            let mut p = depth.clone();
            p.data_mut()[i] += h;
            let mut m = depth.clone();
            m.data_mut()[i] -= h;
            let fd = (depth_reg_loss(&p).0 - depth_reg_loss(&m).0) / (2.0 * h);
            assert!((fd - adj.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", adj.data()[i]);
        }
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let c = LossComponents {
            blurry: 1.0,
            pr: 2.0,
            geo: 3.0,
            reg: 4.0,
        };
        let w = LossWeights {
            pr: 0.01,
            geo: 0.02,
            reg: 0.1,
        };
        assert!((total_loss(&c, &w) - (1.0 + 0.02 + 0.06 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.warmup_iters = 8000;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let mut c = TrainConfig::default();
        c.lambda_geo = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.pose_lr_end = 1.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let e = serde_json::from_str::<TrainConfig>(r#"{"total_iter": 5}"#);
        assert!(e.is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_provider_is_a_config_error() {
        let (data, _) = tiny_dataset();
        let cfg = TrainConfig::default();
        assert!(matches!(Trainer::new(&data, cfg, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let (data, _) = tiny_dataset();
        let cfg = TrainConfig {
            lambda_pr: 0.0,
            lambda_geo: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(&data, cfg, None).unwrap();
        let before = t.state.clone();
        let mut g = Gradients::zeros(t.state.scene.len(), data.train.len());
        g.scene.gaussians[0].mean.x = f64::NAN;
        let lr = t.learning_rates(1);
        assert!(!adam_step(&mut t.state, &g, &lr));
        assert_eq!(t.state.scene, before.scene);
        assert_eq!(t.state.adam, before.adam);
    }

    #[test]
    fn prune_drops_moments_with_primitives() {
        let (data, _) = tiny_dataset();
        let cfg = TrainConfig {
            lambda_pr: 0.0,
            lambda_geo: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(&data, cfg, None).unwrap();
        let n = t.state.scene.len();
        t.state.scene.gaussians[1].opacity_logit = logit(1e-4);
        t.state.adam.opacity.m[2] = 7.0;
        assert_eq!(prune(&mut t.state, 0.005), 1);
        assert_eq!(t.state.scene.len(), n - 1);
        assert_eq!(t.state.adam.sh.m.len(), SH_STRIDE * (n - 1));
        assert_eq!(t.state.adam.opacity.m[1], 7.0);
    }

    #[test]
    fn init_jitter_splits_endpoints_symmetrically() {
        let (data, _) = tiny_dataset();
        let cfg = TrainConfig {
            lambda_pr: 0.0,
            lambda_geo: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let t = Trainer::new(&data, cfg, None).unwrap();
        for (seg, v) in t.state.segments.iter().zip(&data.train) {
            assert!(seg.start != seg.end);
            let mid = seg.midpoint(Default::default());
            assert!(crate::lie::geodesic_distance(&mid, &v.init_pose) < 1e-7);
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, scene) = tiny_dataset();
        let k = data.intrinsics;
        let frames: Vec<PoseSE3> = data.train.iter().map(|v| v.init_pose).collect();
        let oracle = GroundTruthOracle::new(scene, k, frames);
        let cfg = TrainConfig {
            total_iters: 60,
            warmup_iters: 20,
            gen_interval: 20,
            n_virtual: 4,
            eval_interval: 30,
            seed: 11,
            ..Default::default()
        };
        let a = train(&data, &cfg, Some(&oracle)).unwrap();
        let b = train(&data, &cfg, Some(&oracle)).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.segments, b.segments);
        assert_eq!(metrics_csv(&a.report.metrics), metrics_csv(&b.report.metrics));
        assert_eq!(a.report.metrics.len(), 60);
        assert!(a.report.metrics[29].heldout_psnr.is_some());
        assert!(a.report.metrics[30].heldout_psnr.is_none());
        assert_eq!(a.report.explore_rounds.len(), 2);
        let m = &a.report.metrics;
        let head: f64 = m[..10].iter().map(|r| r.losses.blurry).sum();
        let tail: f64 = m[50..].iter().map(|r| r.losses.blurry).sum();
        assert!(tail < head, "{head} -> {tail}");
        let csv = metrics_csv(m);
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 61);
    }

    #[test]
    fn generated_targets_are_owned_copies() {
        // the fixed image is stored by value, so later edits to what the
        // provider returned cannot reach back into the loss
        let (data, scene) = tiny_dataset();
        let frames: Vec<PoseSE3> = data.train.iter().map(|v| v.init_pose).collect();
        let oracle = GroundTruthOracle::new(scene, data.intrinsics, frames);
        let cfg = TrainConfig {
            lambda_pr: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(&data, cfg, Some(&oracle)).unwrap();
        let mut provided = Image::filled(24, 18, 3, 0.4);
        t.state.generated.push(GeneratedView {
            pose: data.train[0].init_pose,
            fixed: provided.clone(),
            weight: 1.0,
        });
        let run = |t: &mut Trainer| {
            let mut g = Gradients::zeros(t.state.scene.len(), data.train.len());
            let mut l = LossComponents::default();
            t.gen_rng = SceneRng::new(0);
            t.generated_term(&mut g, &mut l).unwrap();
            (g, l)
        };
        let first = run(&mut t);
        provided.data_mut().fill(0.9);
        let second = run(&mut t);
        assert_eq!(first, second);
        assert!(first.1.geo > 0.0);
        assert!(first.0.poses.iter().all(|(s, e)| *s == TangentSE3::zero() && *e == TangentSE3::zero()));
    }

    #[test]
    fn segment_fit_reduces_photometric_loss() {
        let (data, scene) = tiny_dataset();
        let k = data.intrinsics;
        let p = data.train[0].init_pose;
        let q = p.retract_left(&TangentSE3::new(Vector3::new(0.0, 0.04, 0.0), Vector3::new(0.3, 0.0, 0.0)));
        let seg = ExposureSegment::new(p, q, 8).unwrap();
        let blurry = synthesize_blur_with(&scene, &seg, &k, &RenderConfig::default(), &BlurOptions::default())
            .unwrap()
            .color;
        let cfg = SegmentFitConfig {
            iters: 200,
            ..Default::default()
        };
        let init = seg.midpoint(Default::default());
        let (_, hist) = fit_segment(&scene, &k, &blurry, &init, 8, &cfg).unwrap();
        assert!(hist[199] < 0.5 * hist[0], "{} -> {}", hist[0], hist[199]);
    }

    #[test]
    fn run_dir_has_expected_files() {
        let (data, _) = tiny_dataset();
        let cfg = TrainConfig {
            total_iters: 3,
            warmup_iters: 0,
            lambda_pr: 0.0,
            lambda_geo: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        let out = train(&data, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &data, &cfg, &out).unwrap();
        for f in ["scene.json", "poses.json", "metrics.csv", "config.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let poses: PosesFile =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("poses.json")).unwrap()).unwrap();
        assert_eq!(poses.config_hash, cfg.hash());
        assert_eq!(poses.segments.len(), 4);
        let back = GaussianScene::load(dir.path().join("scene.json")).unwrap();
        assert_eq!(back, out.scene);
    }
}
