//! Prior boundary: a fixed multi-scale feature extractor, the perceptual
//! distance built on it, and the provider protocol for deblur/repair priors.

use crate::image::Image;
use crate::lie::PoseSE3;
use crate::rng::{hash_f64s, SceneRng};
use crate::scene::GaussianScene;
use crate::splat::{render, CameraIntrinsics, RenderConfig};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

pub const PYRAMID_LEVELS: usize = 3;
pub const FEATURE_CHANNELS: usize = 4;
pub const MIN_FEATURE_SIZE: usize = 16;
pub const DEFAULT_T0: u32 = 199;

const BLUR_SIGMA: f64 = 1.0;
const BLUR_RADIUS: usize = 3;
const GRAD_EPS: f64 = 1e-3;
/// Per-channel (mean, std) used to whiten features: three color channels,
/// then gradient magnitude.
const FEATURE_NORM: [(f64, f64); FEATURE_CHANNELS] =
    [(0.45, 0.25), (0.45, 0.25), (0.45, 0.25), (0.15, 0.2)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One pyramid level: `channels` planes of `width * height` values, planar.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub levels: Vec<FeatureLevel>,
}

impl FeatureMap {
    pub fn element_count(&self) -> usize {
        self.levels.iter().map(|l| l.data.len()).sum()
    }
}

fn blur_kernel() -> [f64; 2 * BLUR_RADIUS + 1] {
    let mut k = [0.0; 2 * BLUR_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - BLUR_RADIUS as f64;
        *v = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur with a renormalized truncated window at the
/// border, or its adjoint.
fn blur_plane(src: &[f64], w: usize, h: usize, transpose: bool) -> Vec<f64> {
    let k = blur_kernel();
    let r = BLUR_RADIUS as isize;
    let norms = |len: usize| -> Vec<f64> {
        (0..len as isize)
            .map(|i| {
                (-r..=r)
                    .filter(|d| (0..len as isize).contains(&(i + d)))
                    .map(|d| k[(d + r) as usize])
                    .sum()
            })
            .collect()
    };
    let (zx, zy) = (norms(w), norms(h));
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let (len, z) = if horizontal { (w, &zx) } else { (h, &zy) };
        let mut dst = vec![0.0; src.len()];
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
                    let zz = if transpose { z[j] } else { z[i] };
                    acc += k[(d + r) as usize] * v / zz;
                }
                dst[y * w + x] = acc;
            }
        }
        dst
    };
    if transpose {
        pass(&pass(src, false), true)
    } else {
        pass(&pass(src, true), false)
    }
}

fn downsample(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = src[(2 * y) * w + 2 * x];
        }
    }
    (out, nw, nh)
}

fn upsample_adjoint(src: &[f64], nw: usize, nh: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..nh {
        for x in 0..nw {
            out[(2 * y) * w + 2 * x] = src[y * nw + x];
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses (scaled by 1/8) on interior pixels; the 1-pixel border is zero.
fn sobel(luma: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (j, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for i in 0..3 {
                    let v = luma[(y + j - 1) * w + x + i - 1];
                    sx += rx[i] * v;
                    sy += ry[i] * v;
                }
            }
            gx[y * w + x] = sx / 8.0;
            gy[y * w + x] = sy / 8.0;
        }
    }
    (gx, gy)
}

fn sobel_adjoint(dgx: &[f64], dgy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (a, b) = (dgx[y * w + x] / 8.0, dgy[y * w + x] / 8.0);
            for j in 0..3 {
                for i in 0..3 {
                    out[(y + j - 1) * w + x + i - 1] += SOBEL_X[j][i] * a + SOBEL_Y[j][i] * b;
                }
            }
        }
    }
    out
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Everything the forward pass produces that the adjoint needs.
struct Pyramid {
    /// Color planes per level (3 planes each).
    color: Vec<[Vec<f64>; 3]>,
    sizes: Vec<(usize, usize)>,
    grads: Vec<(Vec<f64>, Vec<f64>)>,
    features: FeatureMap,
}

fn color_planes(img: &Image) -> Result<[Vec<f64>; 3], PriorError> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_FEATURE_SIZE || h < MIN_FEATURE_SIZE {
        return Err(PriorError::InvalidArgument(format!(
            "feature extraction needs at least {MIN_FEATURE_SIZE}x{MIN_FEATURE_SIZE}, got {w}x{h}"
        )));
    }
    let pick = |c: usize| img.channel(c.min(img.channels() - 1)).into_vec();
    match img.channels() {
        1 | 3 | 4 => Ok([pick(0), pick(1), pick(2)]),
        c => Err(PriorError::InvalidArgument(format!("unsupported channel count {c}"))),
    }
}

fn build_pyramid(img: &Image) -> Result<Pyramid, PriorError> {
    let mut planes = color_planes(img)?;
    let (mut w, mut h) = (img.width(), img.height());
    let mut out = Pyramid {
        color: Vec::new(),
        sizes: Vec::new(),
        grads: Vec::new(),
        features: FeatureMap { levels: Vec::new() },
    };
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            let mut next: [Vec<f64>; 3] = Default::default();
            let (mut nw, mut nh) = (w, h);
            for c in 0..3 {
                let b = blur_plane(&planes[c], w, h, false);
                (next[c], nw, nh) = downsample(&b, w, h);
            }
            planes = next;
            (w, h) = (nw, nh);
        }
        let luma: Vec<f64> = (0..w * h)
            .map(|i| (0..3).map(|c| LUMA[c] * planes[c][i]).sum())
            .collect();
        let (gx, gy) = sobel(&luma, w, h);
        let mut data = Vec::with_capacity(FEATURE_CHANNELS * w * h);
        for (c, plane) in planes.iter().enumerate() {
            let (m, s) = FEATURE_NORM[c];
            data.extend(plane.iter().map(|v| (v - m) / s));
        }
        let (m, s) = FEATURE_NORM[3];
        data.extend(
            gx.iter()
                .zip(&gy)
                .map(|(a, b)| (((a * a + b * b + GRAD_EPS * GRAD_EPS).sqrt() - GRAD_EPS) - m) / s),
        );
        out.features.levels.push(FeatureLevel {
            level,
            width: w,
            height: h,
            channels: FEATURE_CHANNELS,
            data,
        });
        out.color.push(planes.clone());
        out.sizes.push((w, h));
        out.grads.push((gx, gy));
    }
    Ok(out)
}

pub fn extract_features(img: &Image) -> Result<FeatureMap, PriorError> {
    Ok(build_pyramid(img)?.features)
}

/// Sum of squared feature differences over the element count, and its
/// gradient with respect to `a`. `b` is a constant target.
pub fn perceptual_loss(a: &Image, b_fixed: &Image) -> Result<(f64, Image), PriorError> {
    if !a.same_shape(b_fixed) {
        return Err(PriorError::InvalidArgument("perceptual loss needs equal shapes".into()));
    }
    let pa = build_pyramid(a)?;
    let fb = extract_features(b_fixed)?;
    let count = pa.features.element_count() as f64;
    let mut loss = 0.0;
    // gradient w.r.t. the color planes of each level, filled from coarse to fine
    let mut carry: Option<[Vec<f64>; 3]> = None;
    for level in (0..PYRAMID_LEVELS).rev() {
        let (w, h) = pa.sizes[level];
        let np = w * h;
        let fa = &pa.features.levels[level].data;
        let fbl = &fb.levels[level].data;
        let diff: Vec<f64> = fa.iter().zip(fbl).map(|(x, y)| x - y).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        let mut g: [Vec<f64>; 3] = Default::default();
        for c in 0..3 {
            g[c] = diff[c * np..(c + 1) * np]
                .iter()
                .map(|d| 2.0 * d / (count * FEATURE_NORM[c].1))
                .collect();
        }
        // gradient-magnitude channel back to luma
        let (gx, gy) = &pa.grads[level];
        let s = FEATURE_NORM[3].1;
        let mut dgx = vec![0.0; np];
        let mut dgy = vec![0.0; np];
        for i in 0..np {
            let dm = 2.0 * diff[3 * np + i] / (count * s);
            let r = (gx[i] * gx[i] + gy[i] * gy[i] + GRAD_EPS * GRAD_EPS).sqrt();
            dgx[i] = dm * gx[i] / r;
            dgy[i] = dm * gy[i] / r;
        }
        let dluma = sobel_adjoint(&dgx, &dgy, w, h);
        for c in 0..3 {
            for i in 0..np {
                g[c][i] += LUMA[c] * dluma[i];
            }
        }
        if let Some(coarse) = carry.take() {
            let (cw, ch) = pa.sizes[level + 1];
            for c in 0..3 {
                let up = upsample_adjoint(&coarse[c], cw, ch, w, h);
                let back = blur_plane(&up, w, h, true);
                for i in 0..np {
                    g[c][i] += back[i];
                }
            }
        }
        carry = Some(g);
    }
    let g0 = carry.expect("at least one level");
    let mut adj = Image::new(a.width(), a.height(), a.channels());
    let n0 = a.width() * a.height();
    for i in 0..n0 {
        match a.channels() {
            1 => adj.data_mut()[i] = g0[0][i] + g0[1][i] + g0[2][i],
            ch => {
                for c in 0..3 {
                    adj.data_mut()[i * ch + c] = g0[c][i];
                }
            }
        }
    }
    Ok((loss / count, adj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub deblur: bool,
    pub repair: bool,
    pub features: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeblurRequest {
    pub image: Image,
    /// Dataset frame index, when the provider can resolve it.
    pub frame: Option<usize>,
    /// Exposure midpoint estimate.
    pub pose: Option<PoseSE3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairRequest {
    pub image: Image,
    pub reference: Image,
    pub t0: u32,
    pub pose: PoseSE3,
}

impl RepairRequest {
    pub fn new(image: Image, reference: Image, pose: PoseSE3) -> Self {
        RepairRequest {
            image,
            reference,
            t0: DEFAULT_T0,
            pose,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("provider timed out")]
    Timeout,
    #[error("provider failed: {0}")]
    Internal(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Timeout | ProviderError::Transport { retryable: true, .. }
        )
    }
}

pub trait PriorProvider: Send + Sync {
    fn identity(&self) -> String;
    fn capabilities(&self) -> Capabilities;
    fn deblur(&self, req: &DeblurRequest) -> Result<Image, ProviderError>;
    fn repair(&self, req: &RepairRequest) -> Result<Image, ProviderError>;
}

impl<P: PriorProvider + ?Sized> PriorProvider for Arc<P> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn deblur(&self, req: &DeblurRequest) -> Result<Image, ProviderError> {
        (**self).deblur(req)
    }
    fn repair(&self, req: &RepairRequest) -> Result<Image, ProviderError> {
        (**self).repair(req)
    }
}

/// Clamped to [0, 1] and rounded to 16-bit levels, so 16-bit PNG transport
/// is lossless.
fn finalize(img: Image) -> Image {
    img.clamp01().quantize_u16()
}

/// Perfect priors: sharp renders of the ground-truth scene.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    scene: Arc<GaussianScene>,
    intr: CameraIntrinsics,
    cfg: RenderConfig,
    /// Ground-truth exposure midpoints, indexed by dataset frame.
    frames: Vec<PoseSE3>,
}

impl GroundTruthOracle {
    pub fn new(scene: Arc<GaussianScene>, intr: CameraIntrinsics, frames: Vec<PoseSE3>) -> Self {
        GroundTruthOracle {
            scene,
            intr,
            cfg: RenderConfig::default(),
            frames,
        }
    }

    pub fn scene(&self) -> &GaussianScene {
        &self.scene
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intr
    }

    pub fn render_at(&self, pose: &PoseSE3) -> Result<Image, ProviderError> {
        render(&self.scene, pose, &self.intr, &self.cfg)
            .map(|o| finalize(o.color))
            .map_err(|e| ProviderError::Internal(e.to_string()))
    }

    fn check_shape(&self, img: &Image) -> Result<(), ProviderError> {
        if img.width() != self.intr.width || img.height() != self.intr.height {
            return Err(ProviderError::InvalidRequest(format!(
                "image is {}x{}, provider renders {}x{}",
                img.width(),
                img.height(),
                self.intr.width,
                self.intr.height
            )));
        }
        Ok(())
    }

    fn deblur_pose(&self, req: &DeblurRequest) -> Result<PoseSE3, ProviderError> {
        self.check_shape(&req.image)?;
        match (req.frame, req.pose) {
            (Some(i), _) => self.frames.get(i).copied().ok_or_else(|| {
                ProviderError::InvalidRequest(format!(
                    "frame {i} out of range ({} frames)",
                    self.frames.len()
                ))
            }),
            (None, Some(p)) => Ok(p),
            (None, None) => Err(ProviderError::InvalidRequest(
                "deblur needs a frame index or a pose".into(),
            )),
        }
    }
}

impl PriorProvider for GroundTruthOracle {
    fn identity(&self) -> String {
        "oracle".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deblur: true,
            repair: true,
            features: false,
        }
    }

    fn deblur(&self, req: &DeblurRequest) -> Result<Image, ProviderError> {
        let pose = self.deblur_pose(req)?;
        self.render_at(&pose)
    }

    fn repair(&self, req: &RepairRequest) -> Result<Image, ProviderError> {
        self.check_shape(&req.image)?;
        if !req.reference.same_shape(&req.image) {
            return Err(ProviderError::InvalidRequest(
                "reference and image shapes differ".into(),
            ));
        }
        self.render_at(&req.pose)
    }
}

/// The ground-truth oracle plus zero-mean Gaussian pixel noise. The noise
/// stream is a pure function of (seed, request kind, pose).
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    inner: GroundTruthOracle,
    sigma: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(inner: GroundTruthOracle, sigma: f64, seed: u64) -> Result<Self, PriorError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(PriorError::InvalidArgument(format!("noise sigma {sigma}")));
        }
        Ok(NoisyOracle { inner, sigma, seed })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn perturb(&self, img: Image, kind: u64, pose: &PoseSE3) -> Image {
        if self.sigma == 0.0 {
            return img;
        }
        let q = pose.rotation.quaternion();
        let t = pose.translation;
        let mut rng = SceneRng::new(hash_f64s(
            self.seed ^ kind,
            &[q[0], q[1], q[2], q[3], t.x, t.y, t.z],
        ));
        finalize(img.map(|v| v + self.sigma * rng.normal()))
    }
}

impl PriorProvider for NoisyOracle {
    fn identity(&self) -> String {
        format!("noisy:{}", self.sigma)
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn deblur(&self, req: &DeblurRequest) -> Result<Image, ProviderError> {
        let pose = self.inner.deblur_pose(req)?;
        Ok(self.perturb(self.inner.render_at(&pose)?, 1, &pose))
    }

    fn repair(&self, req: &RepairRequest) -> Result<Image, ProviderError> {
        let clean = self.inner.repair(req)?;
        Ok(self.perturb(clean, 2, &req.pose))
    }
}
