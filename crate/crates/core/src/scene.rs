//! Gaussian primitives, spherical-harmonic color, synthetic scene recipes and
//! the `scene.json` format.
//!
//! Scale is stored as a log and opacity as a logit, so any unconstrained
//! parameter update leaves a valid primitive behind.

use crate::lie::{LieError, Rotation};
use crate::rng::SceneRng;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Number of SH coefficients stored per color channel (degree 1).
pub const SH_COEFFS: usize = 4;

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported scene format version {found} (expected {SCENE_FORMAT_VERSION})")]
    UnsupportedVersion { found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<LieError> for SceneError {
    fn from(e: LieError) -> Self {
        SceneError::InvalidArgument(e.to_string())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Rotation,
    pub opacity_logit: f64,
    /// `sh[k][channel]`; only `sh[0]` is used at degree 0.
    pub sh: [[f64; 3]; SH_COEFFS],
}

impl Gaussian {
    /// Isotropic primitive with a flat color.
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[0] = rgb.map(|c| c / SH_C0);
        Gaussian {
            mean,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Rotation::identity(),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation.matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Real SH basis up to degree 1 at a unit direction.
pub fn sh_basis(dir: &Vector3<f64>) -> [f64; SH_COEFFS] {
    [SH_C0, -SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]
}

/// Gradients of the degree-1 basis functions with respect to the direction.
pub fn sh_basis_grad() -> [Vector3<f64>; SH_COEFFS] {
    [
        Vector3::zeros(),
        Vector3::new(0.0, -SH_C1, 0.0),
        Vector3::new(0.0, 0.0, SH_C1),
        Vector3::new(-SH_C1, 0.0, 0.0),
    ]
}

/// Unclamped color; `dir` must already be unit length.
pub fn sh_color(sh: &[[f64; 3]; SH_COEFFS], degree: u8, dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(dir);
    let n = coeff_count(degree);
    let mut out = [0.0; 3];
    for (k, b) in basis.iter().enumerate().take(n) {
        for c in 0..3 {
            out[c] += sh[k][c] * b;
        }
    }
    out
}

pub fn coeff_count(degree: u8) -> usize {
    if degree == 0 {
        1
    } else {
        SH_COEFFS
    }
}

pub fn sh_eval(
    sh: &[[f64; 3]; SH_COEFFS],
    degree: u8,
    dir: &Vector3<f64>,
) -> Result<[f64; 3], SceneError> {
    if degree > 1 {
        return Err(SceneError::InvalidArgument(format!(
            "SH degree {degree} not supported"
        )));
    }
    if !dir.iter().all(|v| v.is_finite()) || (dir.norm() - 1.0).abs() > 1e-6 {
        return Err(SceneError::InvalidArgument(format!(
            "direction {dir:?} is not unit length"
        )));
    }
    Ok(sh_color(sh, degree, dir))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    /// Half of the box diagonal.
    pub fn extent(&self) -> f64 {
        0.5 * (self.max - self.min).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: u8,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: u8) -> Result<Self, SceneError> {
        if sh_degree > 1 {
            return Err(SceneError::InvalidArgument(format!(
                "SH degree {sh_degree} not supported"
            )));
        }
        Ok(GaussianScene {
            gaussians,
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            min = min.inf(&g.mean);
            max = max.sup(&g.mean);
        }
        if self.gaussians.is_empty() {
            min = Vector3::zeros();
            max = Vector3::zeros();
        }
        Aabb { min, max }
    }

    pub fn extent(&self) -> f64 {
        self.bounds().extent()
    }

    pub fn to_json(&self) -> String {
        let file = SceneFileRef {
            version: SCENE_FORMAT_VERSION,
            sh_degree: self.sh_degree,
            bounds: self.bounds(),
            gaussians: &self.gaussians,
        };
        serde_json::to_string_pretty(&file).expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SceneError::Parse {
            path: ".".into(),
            message: e.to_string(),
        })?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCENE_FORMAT_VERSION) => {}
            Some(v) => return Err(SceneError::UnsupportedVersion { found: v }),
            None => {
                return Err(SceneError::Parse {
                    path: "version".into(),
                    message: "missing or not an unsigned integer".into(),
                })
            }
        }
        let file: SceneFile = serde_path_to_error::deserialize(value).map_err(|e| SceneError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let scene = GaussianScene::new(file.gaussians, file.sh_degree)?;
        for (i, g) in scene.gaussians.iter().enumerate() {
            if !g.is_finite() {
                return Err(SceneError::Parse {
                    path: format!("gaussians[{i}]"),
                    message: "non-finite parameter".into(),
                });
            }
            if !file.bounds.contains(&g.mean) {
                return Err(SceneError::Parse {
                    path: format!("gaussians[{i}].mean"),
                    message: "outside declared bounds".into(),
                });
            }
        }
        Ok(scene)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        GaussianScene::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct SceneFileRef<'a> {
    version: u32,
    sh_degree: u8,
    bounds: Aabb,
    gaussians: &'a [Gaussian],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[allow(dead_code)]
    version: u32,
    sh_degree: u8,
    bounds: Aabb,
    gaussians: Vec<Gaussian>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneLayout {
    /// Primitives scattered through the cube `[-1, 1]^3`.
    Box,
    /// Thin, high-contrast strokes on the plane `z = 0`.
    TexturedWall,
    /// Clusters in front of a covering textured backdrop at `z = 1`.
    ClusterField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorScheme {
    #[default]
    Vivid,
    Muted,
    Gray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecipe {
    pub seed: u64,
    pub count: usize,
    pub layout: SceneLayout,
    #[serde(default)]
    pub colors: ColorScheme,
    #[serde(default = "default_sh_degree")]
    pub sh_degree: u8,
}

fn default_sh_degree() -> u8 {
    1
}

impl SceneRecipe {
    pub fn new(seed: u64, count: usize, layout: SceneLayout) -> Self {
        SceneRecipe {
            seed,
            count,
            layout,
            colors: ColorScheme::Vivid,
            sh_degree: 1,
        }
    }
}

fn random_color(rng: &mut SceneRng, scheme: ColorScheme) -> [f64; 3] {
    match scheme {
        ColorScheme::Vivid => {
            let h = rng.uniform(0.0, 6.0);
            let v = rng.uniform(0.55, 0.95);
            let s = rng.uniform(0.5, 0.9);
            let f = h - h.floor();
            let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
            match h as u32 {
                0 => [v, t, p],
                1 => [q, v, p],
                2 => [p, v, t],
                3 => [p, q, v],
                4 => [t, p, v],
                _ => [v, p, q],
            }
        }
        ColorScheme::Muted => [
            rng.uniform(0.25, 0.75),
            rng.uniform(0.25, 0.75),
            rng.uniform(0.25, 0.75),
        ],
        ColorScheme::Gray => [rng.uniform(0.1, 0.9); 3],
    }
}

fn make_gaussian(
    rng: &mut SceneRng,
    mean: Vector3<f64>,
    scale: Vector3<f64>,
    rotation: Rotation,
    opacity: f64,
    recipe: &SceneRecipe,
) -> Gaussian {
    let rgb = random_color(rng, recipe.colors);
    let mut sh = [[0.0; 3]; SH_COEFFS];
    sh[0] = rgb.map(|c| c / SH_C0);
    if recipe.sh_degree > 0 {
        for coeffs in sh.iter_mut().skip(1) {
            for c in coeffs.iter_mut() {
                *c = rng.uniform(-0.08, 0.08);
            }
        }
    }
    Gaussian {
        mean,
        log_scale: scale.map(f64::ln),
        rotation,
        opacity_logit: logit(opacity),
        sh,
    }
}

fn about_z(angle: f64) -> Rotation {
    Rotation::exp(&Vector3::new(0.0, 0.0, angle))
}

fn wall_stroke(
    rng: &mut SceneRng,
    recipe: &SceneRecipe,
    half: (f64, f64),
    z: f64,
    long: (f64, f64),
    short: (f64, f64),
) -> Gaussian {
    let mean = Vector3::new(
        rng.uniform(-half.0, half.0),
        rng.uniform(-half.1, half.1),
        z + rng.normal() * 0.01,
    );
    let scale = Vector3::new(
        rng.uniform(long.0, long.1),
        rng.uniform(short.0, short.1),
        0.004,
    );
    let rot = about_z(rng.uniform(0.0, std::f64::consts::PI));
    let opacity = rng.uniform(0.8, 0.98);
    make_gaussian(rng, mean, scale, rot, opacity, recipe)
}

/// Deterministic synthetic scene. Same recipe, same bits, on every platform.
pub fn generate_scene(recipe: &SceneRecipe) -> Result<GaussianScene, SceneError> {
    if recipe.count == 0 {
        return Err(SceneError::InvalidArgument(
            "primitive count must be at least 1".into(),
        ));
    }
    let mut rng = SceneRng::new(recipe.seed);
    let mut gaussians = Vec::with_capacity(recipe.count);
    match recipe.layout {
        SceneLayout::Box => {
            for _ in 0..recipe.count {
                let mean = if recipe.count == 1 {
                    Vector3::zeros()
                } else {
                    Vector3::new(
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-1.0, 1.0),
                    )
                };
                let scale = Vector3::new(
                    rng.uniform(0.04, 0.15),
                    rng.uniform(0.04, 0.15),
                    rng.uniform(0.04, 0.15),
                );
                let rot = rng.rotation();
                let opacity = rng.uniform(0.6, 0.95);
                gaussians.push(make_gaussian(&mut rng, mean, scale, rot, opacity, recipe));
            }
        }
        SceneLayout::TexturedWall => {
            for _ in 0..recipe.count {
                gaussians.push(wall_stroke(
                    &mut rng,
                    recipe,
                    (1.6, 1.2),
                    0.0,
                    (0.03, 0.12),
                    (0.006, 0.02),
                ));
            }
        }
        SceneLayout::ClusterField => {
            let backdrop = (recipe.count * 2).div_ceil(5);
            for _ in 0..backdrop {
                gaussians.push(wall_stroke(
                    &mut rng,
                    recipe,
                    (2.2, 1.7),
                    1.0,
                    (0.15, 0.35),
                    (0.05, 0.15),
                ));
            }
            let rest = recipe.count - backdrop;
            let clusters = (rest / 30).clamp(1, 8);
            let centers: Vec<Vector3<f64>> = (0..clusters)
                .map(|_| {
                    Vector3::new(
                        rng.uniform(-0.9, 0.9),
                        rng.uniform(-0.7, 0.7),
                        rng.uniform(-0.8, 0.4),
                    )
                })
                .collect();
            for i in 0..rest {
                let c = centers[i % clusters];
                let mean = c + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.15;
                let scale = if rng.uniform(0.0, 1.0) < 0.5 {
                    Vector3::new(
                        rng.uniform(0.04, 0.12),
                        rng.uniform(0.008, 0.02),
                        rng.uniform(0.008, 0.02),
                    )
                } else {
                    Vector3::new(
                        rng.uniform(0.03, 0.08),
                        rng.uniform(0.03, 0.08),
                        rng.uniform(0.03, 0.08),
                    )
                };
                let rot = rng.rotation();
                let opacity = rng.uniform(0.7, 0.97);
                gaussians.push(make_gaussian(&mut rng, mean, scale, rot, opacity, recipe));
            }
        }
    }
    GaussianScene::new(gaussians, recipe.sh_degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use std::f64::consts::PI;

    fn random_gaussian(rng: &mut SceneRng) -> Gaussian {
        let mut g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3]);
        g.log_scale = Vector3::new(rng.uniform(-4.0, 1.0), rng.uniform(-4.0, 1.0), rng.uniform(-4.0, 1.0));
        g.rotation = rng.rotation();
        g
    }

    #[test]
    fn covariance_identity() {
        let g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3]);
        assert!((g.covariance() - Matrix3::identity()).amax() < 1e-15);
    }

    #[test]
    fn covariance_quarter_turn() {
        let mut g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3]);
        g.log_scale = Vector3::new(2f64.ln(), 0.0, 0.0);
        g.rotation = Rotation::exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((g.covariance() - expect).amax() < 1e-14);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = SceneRng::new(4);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let mut ev: Vec<f64> = SymmetricEigen::new(g.covariance()).eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = g.log_scale.iter().map(|s| (2.0 * s).exp()).collect();
            ev.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&want) {
                assert_relative_eq!(*a, *b, max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn covariance_is_positive_definite() {
        let mut rng = SceneRng::new(5);
        for _ in 0..100_000 {
            let g = random_gaussian(&mut rng);
            assert!(g.covariance().cholesky().is_some());
        }
    }

    #[test]
    fn sh_degree_zero_is_constant() {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[0] = [1.0, 2.0, 3.0];
        sh[2] = [5.0; 3];
        for d in [Vector3::x(), Vector3::z(), Vector3::new(1.0, 1.0, 1.0).normalize()] {
            let c = sh_eval(&sh, 0, &d).unwrap();
            assert_relative_eq!(c[1], 2.0 * SH_C0);
        }
    }

    #[test]
    fn sh_z_term_is_odd() {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[2] = [0.7, -0.1, 0.3];
        let d = Vector3::new(0.3, -0.4, 0.5).normalize();
        let flipped = Vector3::new(d.x, d.y, -d.z);
        let a = sh_eval(&sh, 1, &d).unwrap();
        let b = sh_eval(&sh, 1, &flipped).unwrap();
        for c in 0..3 {
            assert_relative_eq!(a[c], -b[c], epsilon = 1e-15);
        }
    }

    #[test]
    fn sh_matches_polynomial_oracle() {
        let mut rng = SceneRng::new(9);
        for _ in 0..50 {
            let mut sh = [[0.0; 3]; SH_COEFFS];
            for k in sh.iter_mut() {
                for c in k.iter_mut() {
                    *c = rng.uniform(-1.0, 1.0);
                }
            }
            let d = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
            // 1/(2 sqrt(pi)) and sqrt(3/(4 pi)) with the usual sign convention
            let y00 = 0.5 / PI.sqrt();
            let y1 = (3.0 / (4.0 * PI)).sqrt();
            let got = sh_eval(&sh, 1, &d).unwrap();
            for c in 0..3 {
                let want = sh[0][c] * y00 - sh[1][c] * y1 * d.y + sh[2][c] * y1 * d.z - sh[3][c] * y1 * d.x;
                assert_relative_eq!(got[c], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn sh_rejects_bad_direction() {
        let sh = [[0.0; 3]; SH_COEFFS];
        assert!(sh_eval(&sh, 1, &Vector3::new(0.0, 0.0, 2.0)).is_err());
        assert!(sh_eval(&sh, 2, &Vector3::z()).is_err());
    }

    #[test]
    fn single_box_gaussian_sits_at_center() {
        let s = generate_scene(&SceneRecipe::new(1, 1, SceneLayout::Box)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.gaussians[0].mean, Vector3::zeros());
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(matches!(
            generate_scene(&SceneRecipe::new(1, 0, SceneLayout::Box)),
            Err(SceneError::InvalidArgument(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        for layout in [SceneLayout::Box, SceneLayout::TexturedWall, SceneLayout::ClusterField] {
            let r = SceneRecipe::new(42, 120, layout);
            assert_eq!(generate_scene(&r).unwrap().to_json(), generate_scene(&r).unwrap().to_json());
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let s = generate_scene(&SceneRecipe::new(3, 64, SceneLayout::ClusterField)).unwrap();
        let text = s.to_json();
        let back = GaussianScene::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn malformed_field_names_its_path() {
        let s = generate_scene(&SceneRecipe::new(3, 4, SceneLayout::Box)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        v["gaussians"][2]["opacity_logit"] = serde_json::json!("high");
        match GaussianScene::from_json(&v.to_string()) {
            Err(SceneError::Parse { path, .. }) => assert_eq!(path, "gaussians[2].opacity_logit"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let s = generate_scene(&SceneRecipe::new(3, 4, SceneLayout::Box)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        v["version"] = serde_json::json!(7);
        assert!(matches!(
            GaussianScene::from_json(&v.to_string()),
            Err(SceneError::UnsupportedVersion { found: 7 })
        ));
    }

    #[test]
    fn bounds_contain_all_means() {
        let s = generate_scene(&SceneRecipe::new(8, 300, SceneLayout::ClusterField)).unwrap();
        let b = s.bounds();
        assert!(s.gaussians.iter().all(|g| b.contains(&g.mean)));
    }
}
