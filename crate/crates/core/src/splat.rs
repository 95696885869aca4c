//! Tile-based Gaussian rasterizer with exact reverse-mode gradients.
//!
//! Conventions: the pose is camera-to-world, the camera looks down +z with
//! x right and y down, and pixel `(px, py)` is sampled at its center
//! `(px + 0.5, py + 0.5)`. Gaussians are sorted once per frame by view depth
//! (ties broken by scene index) and blended strictly front to back, so the
//! output does not depend on how tiles are scheduled.
//!
//! The pose gradient is reported for a left perturbation `exp(delta) * pose`.

use crate::image::Image;
use crate::par::map_indices;
use crate::lie::{skew_trace_grad, PoseSE3, TangentSE3};
use crate::scene::{coeff_count, sh_basis, sh_basis_grad, Gaussian, GaussianScene, SH_COEFFS};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplatError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, SplatError> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point and square pixels from a horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self, SplatError> {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        CameraIntrinsics::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            0.05,
            100.0,
        )
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.near > 0.0
            && self.near < self.far
            && self.width >= 8
            && self.height >= 8
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SplatError::InvalidArgument(format!(
                "invalid intrinsics {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Added to the screen-space covariance diagonal, in pixels^2.
    pub cov2d_floor: f64,
    pub tile_size: usize,
    /// Whether the pose gradient includes the path through the projection
    /// Jacobian's dependence on the camera-space mean.
    pub pose_grad_through_jacobian: bool,
    /// Blending along a pixel stops once transmittance falls below this.
    /// Zero composites every primitive.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            alpha_max: 0.999,
            alpha_min: 1.0 / 255.0,
            cov2d_floor: 0.3,
            tile_size: 16,
            pose_grad_through_jacobian: true,
            min_transmittance: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Image,
    pub alpha: Image,
    pub stats: RenderStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Left-perturbation tangent of the primitive's rotation.
    pub rotation: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl GaussianGrad {
    pub fn add_scaled(&mut self, o: &GaussianGrad, k: f64) {
        self.mean += o.mean * k;
        self.log_scale += o.log_scale * k;
        self.rotation += o.rotation * k;
        self.opacity_logit += o.opacity_logit * k;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            for c in 0..3 {
                a[c] += b[c] * k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: TangentSE3,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        RenderGradients {
            gaussians: vec![GaussianGrad::default(); n],
            pose: TangentSE3::zero(),
        }
    }

    /// `self += k * other`, pose included.
    pub fn accumulate(&mut self, other: &RenderGradients, k: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.add_scaled(b, k);
        }
        self.pose += other.pose.scale(k);
    }

    pub fn is_finite(&self) -> bool {
        self.pose.is_finite() && self.gaussians.iter().all(GaussianGrad::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub valid: bool,
}

/// Intermediate quantities of one projected primitive, kept for the backward pass.
#[derive(Debug, Clone)]
struct Projected {
    w: Matrix3<f64>,
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    mean2d: Vector2<f64>,
    cov2d: Matrix2<f64>,
}

fn project_inner(
    g: &Gaussian,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Option<Projected> {
    let w = pose.rotation.matrix().transpose();
    let p_cam = w * (g.mean - pose.translation);
    let z = p_cam.z;
    if !(z > intr.near && z < intr.far) {
        return None;
    }
    let (x, y) = (p_cam.x, p_cam.y);
    let jac = Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * y / (z * z),
    );
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * cfg.cov2d_floor;
    let mean2d = Vector2::new(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy);
    Some(Projected {
        w,
        p_cam,
        jac,
        cov_cam,
        mean2d,
        cov2d,
    })
}

/// Screen-space footprint of one primitive. Culling is a result, not an error.
pub fn project(
    g: &Gaussian,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Projection {
    match project_inner(g, pose, intr, cfg) {
        Some(p) => Projection {
            mean2d: p.mean2d,
            cov2d: p.cov2d,
            depth: p.p_cam.z,
            valid: true,
        },
        None => {
            let p_cam = pose.inverse().transform_point(&g.mean);
            Projection {
                mean2d: Vector2::zeros(),
                cov2d: Matrix2::zeros(),
                depth: p_cam.z,
                valid: false,
            }
        }
    }
}

/// Per-splat data touched in the per-pixel loops.
#[derive(Debug, Clone, Copy)]
struct Splat {
    mx: f64,
    my: f64,
    ca: f64,
    cb: f64,
    cc: f64,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    /// Pixel-center rectangle outside which alpha < alpha_min.
    rect: [f64; 4],
    /// Slightly below ln(alpha_min / opacity); lower powers skip the exp.
    power_floor: f64,
}

#[derive(Debug, Clone)]
struct SplatMeta {
    index: usize,
    proj: Projected,
    raw_color: [f64; 3],
    dir: Vector3<f64>,
    view_dist: f64,
}

/// Everything about one (scene, pose, intrinsics) triple that the forward and
/// backward passes share.
pub struct PreparedFrame<'a> {
    scene: &'a GaussianScene,
    pose: PoseSE3,
    intr: CameraIntrinsics,
    cfg: RenderConfig,
    splats: Vec<Splat>,
    meta: Vec<SplatMeta>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    stats: RenderStats,
}

#[derive(Clone, Copy)]
struct Contribution {
    splat: u32,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
}

const GRAD_WIDTH: usize = 10;

impl<'a> PreparedFrame<'a> {
    pub fn new(
        scene: &'a GaussianScene,
        pose: &PoseSE3,
        intr: &CameraIntrinsics,
        cfg: &RenderConfig,
    ) -> Result<Self, SplatError> {
        if scene.is_empty() {
            return Err(SplatError::InvalidArgument("scene has no primitives".into()));
        }
        intr.validate()?;
        if cfg.tile_size == 0 {
            return Err(SplatError::InvalidArgument("tile size must be positive".into()));
        }
        let mut stats = RenderStats::default();
        let mut entries: Vec<(Splat, SplatMeta, [usize; 4])> = Vec::new();
        let ts = cfg.tile_size;
        let tiles_x = intr.width.div_ceil(ts);
        let tiles_y = intr.height.div_ceil(ts);
        let n_coeffs = coeff_count(scene.sh_degree);
        for (index, g) in scene.gaussians.iter().enumerate() {
            let Some(proj) = project_inner(g, pose, intr, cfg) else {
                stats.culled += 1;
                continue;
            };
            let opacity = g.opacity();
            if opacity * cfg.alpha_max.min(1.0) < cfg.alpha_min {
                stats.culled += 1;
                continue;
            }
            let cov = proj.cov2d;
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            if !(det > 1e-12) || !det.is_finite() {
                stats.degenerate += 1;
                continue;
            }
            let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
            // alpha >= alpha_min only within this many standard deviations
            let cutoff = (2.0 * (opacity / cfg.alpha_min).ln()).max(0.0).sqrt().max(3.0);
            let rx = cutoff * cov[(0, 0)].sqrt();
            let ry = cutoff * cov[(1, 1)].sqrt();
            let (mx, my) = (proj.mean2d.x, proj.mean2d.y);
            // pixel centers sit at +0.5
            let x0 = (mx - rx - 0.5).ceil().max(0.0);
            let x1 = (mx + rx - 0.5).floor().min(intr.width as f64 - 1.0);
            let y0 = (my - ry - 0.5).ceil().max(0.0);
            let y1 = (my + ry - 0.5).floor().min(intr.height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                stats.culled += 1;
                continue;
            }
            let tile_rect = [
                x0 as usize / ts,
                (x1 as usize / ts).min(tiles_x - 1),
                y0 as usize / ts,
                (y1 as usize / ts).min(tiles_y - 1),
            ];
            let v = g.mean - pose.translation;
            let view_dist = v.norm();
            let dir = v / view_dist;
            let basis = sh_basis(&dir);
            let mut raw = [0.0; 3];
            for (k, b) in basis.iter().enumerate().take(n_coeffs) {
                for c in 0..3 {
                    raw[c] += g.sh[k][c] * b;
                }
            }
            let splat = Splat {
                mx,
                my,
                ca: conic[(0, 0)],
                cb: conic[(0, 1)],
                cc: conic[(1, 1)],
                opacity,
                color: raw.map(|c| c.clamp(0.0, 1.0)),
                depth: proj.p_cam.z,
                rect: [x0 + 0.5, x1 + 0.5, y0 + 0.5, y1 + 0.5],
                power_floor: (cfg.alpha_min / opacity).ln() - 1e-9,
            };
            entries.push((
                splat,
                SplatMeta {
                    index,
                    proj,
                    raw_color: raw,
                    dir,
                    view_dist,
                },
                tile_rect,
            ));
            stats.visible += 1;
        }
        entries.sort_by(|a, b| {
            a.0.depth
                .total_cmp(&b.0.depth)
                .then(a.1.index.cmp(&b.1.index))
        });
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        let mut splats = Vec::with_capacity(entries.len());
        let mut meta = Vec::with_capacity(entries.len());
        for (i, (s, m, r)) in entries.into_iter().enumerate() {
            for ty in r[2]..=r[3] {
                for tx in r[0]..=r[1] {
                    tiles[ty * tiles_x + tx].push(i as u32);
                }
            }
            splats.push(s);
            meta.push(m);
        }
        Ok(PreparedFrame {
            scene,
            pose: *pose,
            intr: *intr,
            cfg: *cfg,
            splats,
            meta,
            tiles,
            tiles_x,
            stats,
        })
    }

    pub fn stats(&self) -> RenderStats {
        self.stats
    }

    fn tile_bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let ts = self.cfg.tile_size;
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        (
            tx * ts,
            ((tx + 1) * ts).min(self.intr.width),
            ty * ts,
            ((ty + 1) * ts).min(self.intr.height),
        )
    }

    #[inline]
    fn alpha_at(&self, s: &Splat, px: f64, py: f64) -> Option<(f64, f64, bool)> {
        if px < s.rect[0] || px > s.rect[1] || py < s.rect[2] || py > s.rect[3] {
            return None;
        }
        let dx = px - s.mx;
        let dy = py - s.my;
        let power = -0.5 * (s.ca * dx * dx + 2.0 * s.cb * dx * dy + s.cc * dy * dy);
        if power > 0.0 || power < s.power_floor {
            return None;
        }
        let gauss = power.exp();
        let a = s.opacity * gauss;
        if a < self.cfg.alpha_min {
            return None;
        }
        if a > self.cfg.alpha_max {
            Some((self.cfg.alpha_max, gauss, true))
        } else {
            Some((a, gauss, false))
        }
    }

    pub fn render(&self) -> RenderOutput {
        let (w, h) = (self.intr.width, self.intr.height);
        let n_tiles = self.tiles.len();
        // (pixel index, rgb, depth, alpha) per tile
        let tile_out: Vec<Vec<(usize, [f64; 3], f64, f64)>> = map_indices(n_tiles, |t| {
            let (x0, x1, y0, y1) = self.tile_bounds(t);
            let list = &self.tiles[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                    let mut trans = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut depth = 0.0;
                    for &si in list {
                        let s = &self.splats[si as usize];
                        if let Some((a, _, _)) = self.alpha_at(s, fx, fy) {
                            let wgt = trans * a;
                            for c in 0..3 {
                                rgb[c] += wgt * s.color[c];
                            }
                            depth += wgt * s.depth;
                            trans *= 1.0 - a;
                            if trans < self.cfg.min_transmittance {
                                break;
                            }
                        }
                    }
                    out.push((py * w + px, rgb, depth, 1.0 - trans));
                }
            }
            out
        });
        let mut color = Image::new(w, h, 3);
        let mut depth = Image::new(w, h, 1);
        let mut alpha = Image::new(w, h, 1);
        for tile in tile_out {
            for (p, rgb, d, a) in tile {
                color.data_mut()[3 * p..3 * p + 3].copy_from_slice(&rgb);
                depth.data_mut()[p] = d;
                alpha.data_mut()[p] = a;
            }
        }
        RenderOutput {
            color,
            depth,
            alpha,
            stats: self.stats,
        }
    }

    /// Reverse pass for adjoints on the color and (optionally) depth images.
    pub fn backward(
        &self,
        d_color: &Image,
        d_depth: Option<&Image>,
    ) -> Result<RenderGradients, SplatError> {
        let (w, h) = (self.intr.width, self.intr.height);
        if d_color.width() != w || d_color.height() != h || d_color.channels() != 3 {
            return Err(SplatError::InvalidArgument(
                "color adjoint shape does not match the render".into(),
            ));
        }
        if let Some(dd) = d_depth {
            if dd.width() != w || dd.height() != h || dd.channels() != 1 {
                return Err(SplatError::InvalidArgument(
                    "depth adjoint shape does not match the render".into(),
                ));
            }
        }
        let n_tiles = self.tiles.len();
        let per_tile: Vec<Vec<[f64; GRAD_WIDTH]>> = map_indices(n_tiles, |t| {
            let (x0, x1, y0, y1) = self.tile_bounds(t);
            let list = &self.tiles[t];
            let mut acc = vec![[0.0; GRAD_WIDTH]; list.len()];
            let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
            for py in y0..y1 {
                for px in x0..x1 {
                    let p = py * w + px;
                    let gc = [
                        d_color.data()[3 * p],
                        d_color.data()[3 * p + 1],
                        d_color.data()[3 * p + 2],
                    ];
                    let gd = d_depth.map_or(0.0, |d| d.data()[p]);
                    if gc == [0.0; 3] && gd == 0.0 {
                        continue;
                    }
                    let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                    contribs.clear();
                    let mut trans = 1.0;
                    for (local, &si) in list.iter().enumerate() {
                        let s = &self.splats[si as usize];
                        if let Some((a, gauss, clamped)) = self.alpha_at(s, fx, fy) {
                            contribs.push(Contribution {
                                splat: local as u32,
                                alpha: a,
                                gauss,
                                clamped,
                                transmittance: trans,
                            });
                            trans *= 1.0 - a;
                            if trans < self.cfg.min_transmittance {
                                break;
                            }
                        }
                    }
                    let mut behind_c = [0.0; 3];
                    let mut behind_d = 0.0;
                    for k in contribs.iter().rev() {
                        let local = k.splat as usize;
                        let s = &self.splats[list[local] as usize];
                        let wgt = k.transmittance * k.alpha;
                        let g = &mut acc[local];
                        for c in 0..3 {
                            g[5 + c] += wgt * gc[c];
                        }
                        g[8] += wgt * gd;
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            d_alpha += gc[c] * (s.color[c] - behind_c[c]);
                        }
                        d_alpha += gd * (s.depth - behind_d);
                        d_alpha *= k.transmittance;
                        for c in 0..3 {
                            behind_c[c] = k.alpha * s.color[c] + (1.0 - k.alpha) * behind_c[c];
                        }
                        behind_d = k.alpha * s.depth + (1.0 - k.alpha) * behind_d;
                        if k.clamped {
                            continue;
                        }
                        g[9] += d_alpha * k.gauss;
                        let d_power = d_alpha * k.alpha;
                        let dx = fx - s.mx;
                        let dy = fy - s.my;
                        g[0] += d_power * (s.ca * dx + s.cb * dy);
                        g[1] += d_power * (s.cb * dx + s.cc * dy);
                        g[2] += d_power * (-0.5 * dx * dx);
                        g[3] += d_power * (-dx * dy);
                        g[4] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        });
        // fixed tile-order reduction keeps results independent of scheduling
        let mut splat_grads = vec![[0.0; GRAD_WIDTH]; self.splats.len()];
        for (t, acc) in per_tile.iter().enumerate() {
            for (local, g) in acc.iter().enumerate() {
                let dst = &mut splat_grads[self.tiles[t][local] as usize];
                for i in 0..GRAD_WIDTH {
                    dst[i] += g[i];
                }
            }
        }
        let mut out = RenderGradients::zeros(self.scene.len());
        for (si, g) in splat_grads.iter().enumerate() {
            self.chain_splat(si, g, &mut out);
        }
        Ok(out)
    }

    /// Propagates one splat's screen-space gradients back to its parameters
    /// and to the camera pose.
    fn chain_splat(&self, si: usize, g: &[f64; GRAD_WIDTH], out: &mut RenderGradients) {
        let m = &self.meta[si];
        let gauss = &self.scene.gaussians[m.index];
        let s = &self.splats[si];
        let p = &m.proj;
        let (fx, fy) = (self.intr.fx, self.intr.fy);
        let (x, y, z) = (p.p_cam.x, p.p_cam.y, p.p_cam.z);
        let grad = &mut out.gaussians[m.index];

        // conic -> screen covariance
        let conic = Matrix2::new(s.ca, s.cb, s.cb, s.cc);
        let g_conic = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
        let g_cov2d = -conic * g_conic * conic;
        // screen covariance -> camera covariance and projection Jacobian
        let g_cov_cam = p.jac.transpose() * g_cov2d * p.jac;
        let g_jac = 2.0 * g_cov2d * p.jac * p.cov_cam;
        // camera covariance -> world covariance and view rotation
        let cov = gauss.covariance();
        let g_cov = p.w.transpose() * g_cov_cam * p.w;
        let g_w_cov = 2.0 * g_cov_cam * p.w * cov;
        // world covariance -> scale and rotation
        let r = gauss.rotation.matrix();
        let scale = gauss.scale();
        let mmat = r * Matrix3::from_diagonal(&scale);
        let g_m = 2.0 * g_cov * mmat;
        let rt_gm = r.transpose() * g_m;
        for i in 0..3 {
            grad.log_scale[i] += rt_gm[(i, i)] * scale[i];
        }
        let g_r = g_m * Matrix3::from_diagonal(&scale);
        grad.rotation += skew_trace_grad(&(r * g_r.transpose()));

        // camera-space mean: through the pixel mean, the depth, and the Jacobian
        let g_pc_direct = Vector3::new(
            g[0] * fx / z,
            g[1] * fy / z,
            -g[0] * fx * x / (z * z) - g[1] * fy * y / (z * z) + g[8],
        );
        let g_pc_jac = Vector3::new(
            -fx / (z * z) * g_jac[(0, 2)],
            -fy / (z * z) * g_jac[(1, 2)],
            -fx / (z * z) * g_jac[(0, 0)] + 2.0 * fx * x / (z * z * z) * g_jac[(0, 2)]
                - fy / (z * z) * g_jac[(1, 1)]
                + 2.0 * fy * y / (z * z * z) * g_jac[(1, 2)],
        );
        let wt = p.w.transpose();
        let g_mean_pc = wt * (g_pc_direct + g_pc_jac);
        grad.mean += g_mean_pc;
        let g_pc_pose = if self.cfg.pose_grad_through_jacobian {
            g_mean_pc
        } else {
            wt * g_pc_direct
        };

        // color -> SH coefficients and viewing direction
        let mut g_raw = [0.0; 3];
        for c in 0..3 {
            if m.raw_color[c] > 0.0 && m.raw_color[c] < 1.0 {
                g_raw[c] = g[5 + c];
            }
        }
        let n_coeffs = coeff_count(self.scene.sh_degree);
        let basis = sh_basis(&m.dir);
        for k in 0..n_coeffs {
            for c in 0..3 {
                grad.sh[k][c] += basis[k] * g_raw[c];
            }
        }
        let mut g_v = Vector3::zeros();
        if n_coeffs > 1 {
            let bgrad = sh_basis_grad();
            let mut g_dir = Vector3::zeros();
            for k in 1..n_coeffs {
                let w: f64 = (0..3).map(|c| g_raw[c] * gauss.sh[k][c]).sum();
                g_dir += bgrad[k] * w;
            }
            g_v = (g_dir - m.dir * m.dir.dot(&g_dir)) / m.view_dist;
            grad.mean += g_v;
        }

        grad.opacity_logit += g[9] * s.opacity * (1.0 - s.opacity);

        // pose, left perturbation exp(delta) * T
        let t = self.pose.translation;
        let d_nu = -g_pc_pose - g_v;
        let d_omega = g_pc_pose.cross(&gauss.mean) + g_v.cross(&t)
            - skew_trace_grad(&(g_w_cov.transpose() * p.w));
        out.pose += TangentSE3::new(d_omega, d_nu);
    }
}

pub fn render(
    scene: &GaussianScene,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<RenderOutput, SplatError> {
    Ok(PreparedFrame::new(scene, pose, intr, cfg)?.render())
}

pub fn render_backward(
    scene: &GaussianScene,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    d_color: &Image,
    d_depth: Option<&Image>,
) -> Result<RenderGradients, SplatError> {
    PreparedFrame::new(scene, pose, intr, cfg)?.backward(d_color, d_depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rotation;
    use crate::rng::SceneRng;
    use crate::scene::{logit, SH_C0};

    fn cam() -> (PoseSE3, CameraIntrinsics) {
        let pose = PoseSE3::look_at(
            Vector3::new(0.3, -0.2, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        );
        (pose, CameraIntrinsics::from_fov(40, 30, 50.0).unwrap())
    }

    fn random_scene(seed: u64, n: usize) -> GaussianScene {
        let mut rng = SceneRng::new(seed);
        let gs = (0..n)
            .map(|_| {
                let mut g = Gaussian::isotropic(
                    Vector3::new(
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-0.8, 0.8),
                        rng.uniform(-0.8, 0.8),
                    ),
                    0.3,
                    rng.uniform(0.3, 0.8),
                    [0.5; 3],
                );
                g.log_scale = Vector3::new(
                    rng.uniform(-1.8, -0.8),
                    rng.uniform(-1.8, -0.8),
                    rng.uniform(-1.8, -0.8),
                );
                g.rotation = rng.rotation();
                for c in 0..3 {
                    g.sh[0][c] = rng.uniform(0.3, 0.7) / SH_C0;
                    for k in 1..4 {
                        g.sh[k][c] = rng.uniform(-0.2, 0.2);
                    }
                }
                g
            })
            .collect();
        GaussianScene::new(gs, 1).unwrap()
    }

    fn weights(seed: u64, w: usize, h: usize) -> (Image, Image) {
        let mut rng = SceneRng::new(seed);
        let c = Image::from_fn(w, h, 3, |_, _, _| rng.uniform(-1.0, 1.0));
        let d = Image::from_fn(w, h, 1, |_, _, _| rng.uniform(-0.2, 0.2));
        (c, d)
    }

    fn loss(scene: &GaussianScene, pose: &PoseSE3, k: &CameraIntrinsics, wc: &Image, wd: &Image) -> f64 {
        let out = render(scene, pose, k, &RenderConfig::default()).unwrap();
        let a: f64 = out.color.data().iter().zip(wc.data()).map(|(x, y)| x * y).sum();
        let b: f64 = out.depth.data().iter().zip(wd.data()).map(|(x, y)| x * y).sum();
        a + b
    }

    fn assert_close(name: &str, analytic: f64, numeric: f64) {
        let tol = 2e-5 * (1.0 + numeric.abs());
        assert!(
            (analytic - numeric).abs() < tol,
            "{name}: analytic {analytic} numeric {numeric}"
        );
    }

    #[test]
    fn centered_projection_matches_closed_form() {
        let k = CameraIntrinsics::new(100.0, 80.0, 32.0, 24.0, 64, 48, 0.1, 50.0).unwrap();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 4.0), 0.5, 0.9, [0.5; 3]);
        let p = project(&g, &PoseSE3::identity(), &k, &RenderConfig::default());
        assert!(p.valid);
        assert!((p.mean2d - Vector2::new(32.0, 24.0)).norm() < 1e-12);
        assert!((p.cov2d[(0, 0)] - (100.0f64 * 0.5 / 4.0).powi(2) - 0.3).abs() < 1e-9);
        assert!((p.cov2d[(1, 1)] - (80.0f64 * 0.5 / 4.0).powi(2) - 0.3).abs() < 1e-9);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!(p.depth, 4.0);
    }

    #[test]
    fn behind_camera_is_culled_not_an_error() {
        let (_, k) = cam();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.5, 0.9, [0.5; 3]);
        let scene = GaussianScene::new(vec![g], 1).unwrap();
        let out = render(&scene, &PoseSE3::identity(), &k, &RenderConfig::default()).unwrap();
        assert_eq!(out.stats.culled, 1);
        assert!(out.color.data().iter().all(|&v| v == 0.0));
        assert!(out.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_scene_is_rejected() {
        let (pose, k) = cam();
        let scene = GaussianScene::new(vec![], 1).unwrap();
        assert!(render(&scene, &pose, &k, &RenderConfig::default()).is_err());
    }

    #[test]
    fn single_opaque_gaussian_center_pixel() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.5, 16.5, 33, 33, 0.1, 50.0).unwrap();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.6, [0.2, 0.4, 0.8]);
        let scene = GaussianScene::new(vec![g], 0).unwrap();
        let out = render(&scene, &PoseSE3::identity(), &k, &RenderConfig::default()).unwrap();
        let c = [out.color.get(16, 16, 0), out.color.get(16, 16, 1), out.color.get(16, 16, 2)];
        for (got, want) in c.iter().zip([0.2, 0.4, 0.8]) {
            assert!((got - 0.6 * want).abs() < 1e-9, "{got}");
        }
        assert!((out.alpha.get(16, 16, 0) - 0.6).abs() < 1e-12);
        assert!((out.depth.get(16, 16, 0) - 0.6 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn front_gaussian_occludes_back() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.5, 16.5, 33, 33, 0.1, 50.0).unwrap();
        let front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.3, 0.99, [1.0, 0.0, 0.0]);
        let back = Gaussian::isotropic(Vector3::new(0.0, 0.0, 4.0), 0.6, 0.99, [0.0, 0.0, 1.0]);
        let a = GaussianScene::new(vec![back.clone(), front.clone()], 0).unwrap();
        let b = GaussianScene::new(vec![front, back], 0).unwrap();
        let cfg = RenderConfig::default();
        let ra = render(&a, &PoseSE3::identity(), &k, &cfg).unwrap();
        let rb = render(&b, &PoseSE3::identity(), &k, &cfg).unwrap();
        assert_eq!(ra.color, rb.color);
        assert!(ra.color.get(16, 16, 0) > 0.95);
        assert!(ra.color.get(16, 16, 2) < 0.01);
    }

    #[test]
    fn alpha_conservation_and_bounds() {
        let (pose, k) = cam();
        let scene = random_scene(3, 30);
        let out = render(&scene, &pose, &k, &RenderConfig::default()).unwrap();
        for (c, a) in out.color.data().chunks(3).zip(out.alpha.data()) {
            assert!((0.0..=1.0).contains(a));
            for v in c {
                assert!(*v >= 0.0 && *v <= *a + 1e-12);
            }
        }
    }

    #[test]
    fn tile_size_does_not_change_the_image() {
        let (pose, k) = cam();
        let scene = random_scene(4, 25);
        let a = render(&scene, &pose, &k, &RenderConfig::default()).unwrap();
        let cfg = RenderConfig {
            tile_size: 7,
            ..RenderConfig::default()
        };
        let b = render(&scene, &pose, &k, &cfg).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn backward_is_deterministic() {
        let (pose, k) = cam();
        let scene = random_scene(5, 20);
        let (wc, wd) = weights(9, k.width, k.height);
        let cfg = RenderConfig::default();
        let a = render_backward(&scene, &pose, &k, &cfg, &wc, Some(&wd)).unwrap();
        let b = render_backward(&scene, &pose, &k, &cfg, &wc, Some(&wd)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (pose, k) = cam();
        let scene = random_scene(11, 8);
        let (wc, wd) = weights(12, k.width, k.height);
        let grads =
            render_backward(&scene, &pose, &k, &RenderConfig::default(), &wc, Some(&wd)).unwrap();
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> GaussianScene| {
            (loss(&f(h), &pose, &k, &wc, &wd) - loss(&f(-h), &pose, &k, &wc, &wd)) / (2.0 * h)
        };
        for i in 0..scene.len() {
            let g = &grads.gaussians[i];
            for a in 0..3 {
                let n = fd(&|e| {
                    let mut s = scene.clone();
                    s.gaussians[i].mean[a] += e;
                    s
                });
                assert_close(&format!("mean[{i}][{a}]"), g.mean[a], n);
                let n = fd(&|e| {
                    let mut s = scene.clone();
                    s.gaussians[i].log_scale[a] += e;
                    s
                });
                assert_close(&format!("log_scale[{i}][{a}]"), g.log_scale[a], n);
                let n = fd(&|e| {
                    let mut s = scene.clone();
                    let mut d = Vector3::zeros();
                    d[a] = e;
                    s.gaussians[i].rotation = Rotation::exp(&d) * s.gaussians[i].rotation;
                    s
                });
                assert_close(&format!("rotation[{i}][{a}]"), g.rotation[a], n);
            }
            let n = fd(&|e| {
                let mut s = scene.clone();
                s.gaussians[i].opacity_logit += e;
                s
            });
            assert_close(&format!("opacity[{i}]"), g.opacity_logit, n);
            for kk in 0..4 {
                for c in 0..3 {
                    let n = fd(&|e| {
                        let mut s = scene.clone();
                        s.gaussians[i].sh[kk][c] += e;
                        s
                    });
                    assert_close(&format!("sh[{i}][{kk}][{c}]"), g.sh[kk][c], n);
                }
            }
        }
        let gp = grads.pose.to_vector();
        for a in 0..6 {
            let mut v = nalgebra::Vector6::zeros();
            v[a] = h;
            let plus = pose.retract_left(&TangentSE3::from_vector(&v));
            let minus = pose.retract_left(&TangentSE3::from_vector(&(-v)));
            let n = (loss(&scene, &plus, &k, &wc, &wd) - loss(&scene, &minus, &k, &wc, &wd))
                / (2.0 * h);
            assert_close(&format!("pose[{a}]"), gp[a], n);
        }
    }

    #[test]
    fn dropping_the_jacobian_path_changes_only_the_pose() {
        let (pose, k) = cam();
        let scene = random_scene(21, 6);
        let (wc, _) = weights(22, k.width, k.height);
        let full = render_backward(&scene, &pose, &k, &RenderConfig::default(), &wc, None).unwrap();
        let cfg = RenderConfig {
            pose_grad_through_jacobian: false,
            ..RenderConfig::default()
        };
        let part = render_backward(&scene, &pose, &k, &cfg, &wc, None).unwrap();
        assert_eq!(full.gaussians, part.gaussians);
        assert!((full.pose.to_vector() - part.pose.to_vector()).norm() > 0.0);
    }

    #[test]
    fn alpha_is_capped() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.5, 16.5, 33, 33, 0.1, 50.0).unwrap();
        let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.3, 0.5, [0.5; 3]);
        g.opacity_logit = logit(1.0 - 1e-9);
        let scene = GaussianScene::new(vec![g], 0).unwrap();
        let out = render(&scene, &PoseSE3::identity(), &k, &RenderConfig::default()).unwrap();
        assert_eq!(out.alpha.get(16, 16, 0), 1.0 - (1.0 - 0.999));
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let (pose, k) = cam();
        let scene = random_scene(6, 10);
        let zero = Image::new(k.width, k.height, 3);
        let g = render_backward(&scene, &pose, &k, &RenderConfig::default(), &zero, None).unwrap();
        assert_eq!(g, RenderGradients::zeros(scene.len()));
    }

    #[test]
    fn two_primitives_match_hand_compositing() {
        let k = CameraIntrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32, 0.1, 50.0).unwrap();
        let a = Gaussian::isotropic(Vector3::new(0.2, 0.0, 3.0), 0.5, 0.7, [0.9, 0.2, 0.1]);
        let b = Gaussian::isotropic(Vector3::new(-0.3, 0.1, 5.0), 0.9, 0.8, [0.1, 0.3, 0.9]);
        let scene = GaussianScene::new(vec![b.clone(), a.clone()], 0).unwrap();
        let cfg = RenderConfig::default();
        let out = render(&scene, &PoseSE3::identity(), &k, &cfg).unwrap();
        let weight = |g: &Gaussian, px: f64, py: f64| {
            let p = project(g, &PoseSE3::identity(), &k, &cfg);
            let inv = p.cov2d.try_inverse().unwrap();
            let d = Vector2::new(px, py) - p.mean2d;
            let al = (g.opacity() * (-0.5 * d.dot(&(inv * d))).exp()).min(0.999);
            if al < 1.0 / 255.0 {
                0.0
            } else {
                al
            }
        };
        for (px, py) in [(16, 16), (18, 15), (10, 17), (20, 20), (5, 25)] {
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            let (wa, wb) = (weight(&a, fx, fy), weight(&b, fx, fy));
            for c in 0..3 {
                let ca = a.sh[0][c] * SH_C0;
                let cb = b.sh[0][c] * SH_C0;
                let want = wa * ca + (1.0 - wa) * wb * cb;
                assert!((out.color.get(px, py, c) - want).abs() < 1e-12);
            }
            let d = wa * 3.0 + (1.0 - wa) * wb * 5.0;
            assert!((out.depth.get(px, py, 0) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn twenty_gaussian_finite_difference_sweep() {
        let pose = PoseSE3::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        );
        let k = CameraIntrinsics::from_fov(32, 32, 55.0).unwrap();
        let scene = random_scene(31, 20);
        let (wc, wd) = weights(32, 32, 32);
        let grads =
            render_backward(&scene, &pose, &k, &RenderConfig::default(), &wc, Some(&wd)).unwrap();
        let h = 1e-4;
        let mut total = 0;
        let mut pass = 0;
        let mut check = |a: f64, n: f64| {
            total += 1;
            if (a - n).abs() < 1e-7 || (a - n).abs() < 1e-3 * n.abs() {
                pass += 1;
            } else {
                eprintln!("fd mismatch {total}: analytic {a} numeric {n}");
            }
        };
        for i in 0..scene.len() {
            for a in 0..3 {
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.gaussians[i].mean[a] += h;
                m.gaussians[i].mean[a] -= h;
                let n = (loss(&p, &pose, &k, &wc, &wd) - loss(&m, &pose, &k, &wc, &wd)) / (2.0 * h);
                check(grads.gaussians[i].mean[a], n);
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.gaussians[i].log_scale[a] += h;
                m.gaussians[i].log_scale[a] -= h;
                let n = (loss(&p, &pose, &k, &wc, &wd) - loss(&m, &pose, &k, &wc, &wd)) / (2.0 * h);
                check(grads.gaussians[i].log_scale[a], n);
            }
            for a in 0..3 {
                let mut d = Vector3::zeros();
                d[a] = h;
                let mut p = scene.clone();
                let mut m = scene.clone();
                p.gaussians[i].rotation = Rotation::exp(&d) * p.gaussians[i].rotation;
                m.gaussians[i].rotation = Rotation::exp(&-d) * m.gaussians[i].rotation;
                let n = (loss(&p, &pose, &k, &wc, &wd) - loss(&m, &pose, &k, &wc, &wd)) / (2.0 * h);
                check(grads.gaussians[i].rotation[a], n);
            }
            let mut p = scene.clone();
            let mut m = scene.clone();
            p.gaussians[i].opacity_logit += h;
            m.gaussians[i].opacity_logit -= h;
            let n = (loss(&p, &pose, &k, &wc, &wd) - loss(&m, &pose, &k, &wc, &wd)) / (2.0 * h);
            check(grads.gaussians[i].opacity_logit, n);
            for kk in 0..4 {
                for c in 0..3 {
                    let mut p = scene.clone();
                    let mut m = scene.clone();
                    p.gaussians[i].sh[kk][c] += h;
                    m.gaussians[i].sh[kk][c] -= h;
                    let n = (loss(&p, &pose, &k, &wc, &wd) - loss(&m, &pose, &k, &wc, &wd)) / (2.0 * h);
                    check(grads.gaussians[i].sh[kk][c], n);
                }
            }
        }
        let gp = grads.pose.to_vector();
        for a in 0..6 {
            let mut v = nalgebra::Vector6::zeros();
            v[a] = h;
            let plus = pose.retract_left(&TangentSE3::from_vector(&v));
            let minus = pose.retract_left(&TangentSE3::from_vector(&(-v)));
            let n = (loss(&scene, &plus, &k, &wc, &wd) - loss(&scene, &minus, &k, &wc, &wd)) / (2.0 * h);
            check(gp[a], n);
        }
        assert!(pass as f64 >= 0.99 * total as f64, "{pass}/{total}");
    }

    #[test]
    fn pose_x_gradient_sign_matches_slope() {
        let (pose, k) = cam();
        let scene = random_scene(41, 15);
        let n = (k.width * k.height * 3) as f64;
        let adj = Image::filled(k.width, k.height, 3, 1.0 / n);
        let g = render_backward(&scene, &pose, &k, &RenderConfig::default(), &adj, None).unwrap();
        let mean = |p: &PoseSE3| render(&scene, p, &k, &RenderConfig::default()).unwrap().color.mean();
        let step = TangentSE3::new(Vector3::zeros(), Vector3::new(1e-3, 0.0, 0.0));
        let slope = (mean(&pose.retract_left(&step)) - mean(&pose.retract_left(&step.scale(-1.0))))
            / 2e-3;
        assert!(slope.abs() > 1e-6);
        assert_eq!(g.pose.nu.x.signum(), slope.signum());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn weights_and_transmittance_sum_to_one(seed in 0u64..10_000) {
                let (pose, k) = cam();
                let mut scene = random_scene(seed, 12);
                scene.sh_degree = 0;
                for g in &mut scene.gaussians {
                    g.sh[0] = [1.0 / SH_C0; 3];
                }
                let out = render(&scene, &pose, &k, &RenderConfig::default()).unwrap();
                for (c, a) in out.color.data().chunks(3).zip(out.alpha.data()) {
                    prop_assert!((c[0] + (1.0 - a) - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn raising_front_opacity_never_lowers_its_weight(seed in 0u64..10_000, bump in 0.01f64..3.0) {
                let (pose, k) = cam();
                let mut scene = random_scene(seed, 8);
                scene.sh_degree = 0;
                let front = (0..scene.len())
                    .min_by(|&a, &b| {
                        let za = project(&scene.gaussians[a], &pose, &k, &RenderConfig::default()).depth;
                        let zb = project(&scene.gaussians[b], &pose, &k, &RenderConfig::default()).depth;
                        za.total_cmp(&zb)
                    })
                    .unwrap();
                for (i, g) in scene.gaussians.iter_mut().enumerate() {
                    g.sh[0] = if i == front { [1.0 / SH_C0, 0.0, 0.0] } else { [0.0, 0.0, 1.0 / SH_C0] };
                }
                let before = render(&scene, &pose, &k, &RenderConfig::default()).unwrap();
                scene.gaussians[front].opacity_logit += bump;
                let after = render(&scene, &pose, &k, &RenderConfig::default()).unwrap();
                for (a, b) in after.color.data().chunks(3).zip(before.color.data().chunks(3)) {
                    prop_assert!(a[0] >= b[0]);
                }
            }
        }
    }
}
