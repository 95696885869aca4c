//! Motion blur as the mean of sharp renders along an exposure trajectory,
//! plus the photometric losses used on blurry observations.

use crate::image::Image;
use crate::lie::{interpolate_pose_with, interpolation_jacobians, InterpolationMode, PoseSE3, TangentSE3};
use crate::scene::GaussianScene;
use crate::splat::{CameraIntrinsics, PreparedFrame, RenderConfig, RenderGradients, SplatError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlurError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Render(#[from] SplatError),
}

/// Where the virtual exposure samples sit on `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSpacing {
    /// `u_i = i / (n - 1)`; a single sample sits at the midpoint.
    #[default]
    Inclusive,
    /// `u_i = (i + 0.5) / n`.
    Open,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurOptions {
    pub spacing: SampleSpacing,
    pub interpolation: InterpolationMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureSegment {
    pub start: PoseSE3,
    pub end: PoseSE3,
    pub n: usize,
}

impl ExposureSegment {
    pub fn new(start: PoseSE3, end: PoseSE3, n: usize) -> Result<Self, BlurError> {
        if n == 0 {
            return Err(BlurError::InvalidArgument("segment needs at least one sample".into()));
        }
        Ok(ExposureSegment { start, end, n })
    }

    pub fn static_at(pose: PoseSE3, n: usize) -> Result<Self, BlurError> {
        ExposureSegment::new(pose, pose, n)
    }

    pub fn midpoint(&self, mode: InterpolationMode) -> PoseSE3 {
        interpolate_pose_with(&self.start, &self.end, 0.5, mode).value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurLossWeights {
    pub l1: f64,
    pub ssim: f64,
}

impl Default for BlurLossWeights {
    fn default() -> Self {
        BlurLossWeights { l1: 0.8, ssim: 0.2 }
    }
}

pub fn sample_params(n: usize, spacing: SampleSpacing) -> Vec<f64> {
    match (spacing, n) {
        (_, 0) => Vec::new(),
        (SampleSpacing::Inclusive, 1) => vec![0.5],
        (SampleSpacing::Inclusive, _) => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        (SampleSpacing::Open, _) => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
    }
}

pub fn virtual_poses(seg: &ExposureSegment) -> Vec<PoseSE3> {
    virtual_poses_with(seg, &BlurOptions::default())
}

pub fn virtual_poses_with(seg: &ExposureSegment, opts: &BlurOptions) -> Vec<PoseSE3> {
    sample_params(seg.n, opts.spacing)
        .into_iter()
        .map(|u| interpolate_pose_with(&seg.start, &seg.end, u, opts.interpolation).value)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlurRender {
    pub color: Image,
    pub depth: Image,
}

pub fn synthesize_blur(
    scene: &GaussianScene,
    seg: &ExposureSegment,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<BlurRender, BlurError> {
    synthesize_blur_with(scene, seg, intr, cfg, &BlurOptions::default())
}

pub fn synthesize_blur_with(
    scene: &GaussianScene,
    seg: &ExposureSegment,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    opts: &BlurOptions,
) -> Result<BlurRender, BlurError> {
    if seg.n == 0 {
        return Err(BlurError::InvalidArgument("segment needs at least one sample".into()));
    }
    if seg.start == seg.end {
        // every sample is the same render; skip the averaging round-off
        let out = PreparedFrame::new(scene, &seg.start, intr, cfg)?.render();
        return Ok(BlurRender {
            color: out.color,
            depth: out.depth,
        });
    }
    let poses = virtual_poses_with(seg, opts);
    let mut color = Image::new(intr.width, intr.height, 3);
    let mut depth = Image::new(intr.width, intr.height, 1);
    for pose in &poses {
        let out = PreparedFrame::new(scene, pose, intr, cfg)?.render();
        color.add_assign(&out.color);
        depth.add_assign(&out.depth);
    }
    if poses.len() > 1 {
        let k = 1.0 / poses.len() as f64;
        color = color.scale(k);
        depth = depth.scale(k);
    }
    Ok(BlurRender { color, depth })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGradients {
    /// Scene gradients; the pose field is unused and left at zero.
    pub scene: RenderGradients,
    pub start: TangentSE3,
    pub end: TangentSE3,
}

/// Gradients of a loss on the blurred image with respect to the scene and to
/// left perturbations of both trajectory endpoints.
pub fn synthesize_blur_backward(
    scene: &GaussianScene,
    seg: &ExposureSegment,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    opts: &BlurOptions,
    d_color: &Image,
    d_depth: Option<&Image>,
) -> Result<SegmentGradients, BlurError> {
    let us = sample_params(seg.n, opts.spacing);
    if us.is_empty() {
        return Err(BlurError::InvalidArgument("segment needs at least one sample".into()));
    }
    let k = 1.0 / us.len() as f64;
    let dc = d_color.scale(k);
    let dd = d_depth.map(|d| d.scale(k));
    let mut out = SegmentGradients {
        scene: RenderGradients::zeros(scene.len()),
        start: TangentSE3::zero(),
        end: TangentSE3::zero(),
    };
    for &u in &us {
        let pose = interpolate_pose_with(&seg.start, &seg.end, u, opts.interpolation).value;
        let g = PreparedFrame::new(scene, &pose, intr, cfg)?.backward(&dc, dd.as_ref())?;
        let (js, je) = interpolation_jacobians(&seg.start, &seg.end, u, opts.interpolation);
        let gp = g.pose.to_vector();
        out.start += TangentSE3::from_vector(&(js.transpose() * gp));
        out.end += TangentSE3::from_vector(&(je.transpose() * gp));
        out.scene.accumulate(&g, 1.0);
    }
    out.scene.pose = TangentSE3::zero();
    Ok(out)
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable window filter on a single-channel plane. Near the border the
/// window is truncated and renormalized. With `transpose` the adjoint map is
/// applied instead.
fn window_filter(plane: &[f64], w: usize, h: usize, transpose: bool) -> Vec<f64> {
    let k = ssim_kernel();
    let r = SSIM_RADIUS as isize;
    let norm = |i: usize, len: usize| -> f64 {
        (-r..=r)
            .filter(|d| {
                let j = i as isize + d;
                j >= 0 && j < len as isize
            })
            .map(|d| k[(d + r) as usize])
            .sum()
    };
    let zx: Vec<f64> = (0..w).map(|x| norm(x, w)).collect();
    let zy: Vec<f64> = (0..h).map(|y| norm(y, h)).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        let (len, z) = if horizontal { (w, &zx) } else { (h, &zy) };
        for y in 0..h {
            for x in 0..w {
                let i = if horizontal { x } else { y };
                let mut acc = 0.0;
                for d in -r..=r {
                    let j = i as isize + d;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    let j = j as usize;
                    let v = if horizontal { src[y * w + j] } else { src[j * w + x] };
                    // forward normalizes by the output position, transpose by the input one
                    let zz = if transpose { z[j] } else { z[i] };
                    acc += k[(d + r) as usize] * v / zz;
                }
                dst[y * w + x] = acc;
            }
        }
        dst
    };
    if transpose {
        pass(&pass(plane, false), true)
    } else {
        pass(&pass(plane, true), false)
    }
}

struct SsimParts {
    value: f64,
    map: Image,
    grad: Option<Image>,
}

fn ssim_parts(a: &Image, b: &Image, want_grad: bool) -> Result<SsimParts, BlurError> {
    if !a.same_shape(b) || a.is_empty() {
        return Err(BlurError::InvalidArgument(format!(
            "ssim needs equal non-empty shapes, got {}x{}x{} and {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let np = w * h;
    let mut map = Image::new(w, h, 1);
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    let mut total = 0.0;
    let scale = 1.0 / (np * ch) as f64;
    for c in 0..ch {
        let x = a.channel(c).into_vec();
        let y = b.channel(c).into_vec();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = window_filter(&x, w, h, false);
        let my = window_filter(&y, w, h, false);
        let mxx = window_filter(&xx, w, h, false);
        let myy = window_filter(&yy, w, h, false);
        let mxy = window_filter(&xy, w, h, false);
        let mut ga = vec![0.0; np];
        let mut gb = vec![0.0; np];
        let mut gc = vec![0.0; np];
        for p in 0..np {
            let vx = mxx[p] - mx[p] * mx[p];
            let vy = myy[p] - my[p] * my[p];
            let cxy = mxy[p] - mx[p] * my[p];
            let n1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            map.data_mut()[p] += s / ch as f64;
            total += s;
            if want_grad {
                let ds_dmx = 2.0 * my[p] * n2 / (d1 * d2) - s * 2.0 * mx[p] / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                ga[p] = scale * (ds_dmx - 2.0 * mx[p] * ds_dvx - my[p] * ds_dcxy);
                gb[p] = scale * ds_dvx;
                gc[p] = scale * ds_dcxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ta = window_filter(&ga, w, h, true);
            let tb = window_filter(&gb, w, h, true);
            let tc = window_filter(&gc, w, h, true);
            for p in 0..np {
                g.data_mut()[p * ch + c] = ta[p] + 2.0 * x[p] * tb[p] + y[p] * tc[p];
            }
        }
    }
    Ok(SsimParts {
        value: total / (np * ch) as f64,
        map,
        grad,
    })
}

/// Channel-averaged SSIM and its per-pixel map.
pub fn ssim(a: &Image, b: &Image) -> Result<(f64, Image), BlurError> {
    let p = ssim_parts(a, b, false)?;
    Ok((p.value, p.map))
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), BlurError> {
    let p = ssim_parts(a, b, true)?;
    Ok((p.value, p.grad.expect("gradient requested")))
}

/// `l1 * mean|pred - target| + ssim * (1 - SSIM)` and its gradient in `pred`.
pub fn blurry_loss(
    pred: &Image,
    target: &Image,
    w: &BlurLossWeights,
) -> Result<(f64, Image), BlurError> {
    if !(w.l1 >= 0.0 && w.ssim >= 0.0) {
        return Err(BlurError::InvalidArgument("loss weights must be non-negative".into()));
    }
    if !pred.same_shape(target) {
        return Err(BlurError::InvalidArgument("prediction and target shapes differ".into()));
    }
    let n = pred.len() as f64;
    let mut l1 = 0.0;
    let mut adj = pred.zip_map(target, |p, t| {
        let d = p - t;
        l1 += d.abs();
        w.l1 * sign(d) / n
    });
    let mut loss = w.l1 * l1 / n;
    if w.ssim > 0.0 {
        let (s, g) = ssim_with_grad(pred, target)?;
        loss += w.ssim * (1.0 - s);
        adj.add_assign(&g.scale(-w.ssim));
    }
    Ok((loss, adj))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
