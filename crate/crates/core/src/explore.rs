//! Consistency-guided view exploration: score candidate cameras by how much
//! the repair prior disagrees with the current render, relative to the
//! disagreement on training views, and keep the ones inside a band.

use crate::image::Image;
use crate::lie::{geodesic_distance, interpolate_pose, PoseSE3};
use crate::metrics::psnr;
use crate::par::map_indices;
use crate::priors::{PriorProvider, ProviderError, RepairRequest, DEFAULT_T0};
use crate::scene::GaussianScene;
use crate::splat::{render, CameraIntrinsics, RenderConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidates closer than this to an existing pose are dropped.
pub const DEDUP_DISTANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExploreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("baseline needs at least one training view")]
    NoTrainingViews,
    #[error("render failed: {0}")]
    Render(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    #[default]
    Psnr,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSign {
    /// `baseline - s`: how far the candidate's score drops below the baseline.
    #[default]
    Drop,
    /// `s - baseline`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdProfile {
    Synthetic,
    Outdoor,
}

impl ThresholdProfile {
    /// `(s_min, s_max)` in dB.
    pub fn band(self) -> (f64, f64) {
        match self {
            ThresholdProfile::Synthetic => (2.5, 8.5),
            ThresholdProfile::Outdoor => (4.5, 14.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub candidates_per_pair: usize,
    pub extrapolation_margin: f64,
    pub evaluator: Evaluator,
    pub sign: ScoreSign,
    pub t0: u32,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig::profile(ThresholdProfile::Synthetic)
    }
}

impl ExplorationConfig {
    pub fn profile(p: ThresholdProfile) -> Self {
        let (s_min, s_max) = p.band();
        ExplorationConfig {
            s_min,
            s_max,
            candidates_per_pair: 2,
            extrapolation_margin: 0.1,
            evaluator: Evaluator::Psnr,
            sign: ScoreSign::Drop,
            t0: DEFAULT_T0,
        }
    }

    pub fn validate(&self) -> Result<(), ExploreError> {
        if self.s_min.is_nan() || self.s_max.is_nan() || self.s_min > self.s_max {
            return Err(ExploreError::Config(format!(
                "band [{}, {}] is empty",
                self.s_min, self.s_max
            )));
        }
        if self.candidates_per_pair == 0 {
            return Err(ExploreError::Config("candidates_per_pair must be >= 1".into()));
        }
        if !(0.0..=0.2).contains(&self.extrapolation_margin) {
            return Err(ExploreError::Config(format!(
                "extrapolation margin {} outside [0, 0.2]",
                self.extrapolation_margin
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, raw: f64, baseline: f64) -> f64 {
        match self.sign {
            ScoreSign::Drop => baseline - raw,
            ScoreSign::Literal => raw - baseline,
        }
    }

    pub fn in_band(&self, normalized: f64) -> bool {
        self.s_min <= normalized && normalized <= self.s_max
    }
}

/// A deblurred training view used as the repair reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub pose: PoseSE3,
    pub image: Image,
}

/// Index of the reference whose pose is geodesically closest; ties go to the
/// lower index.
pub fn nearest_reference(refs: &[Reference], pose: &PoseSE3) -> Option<usize> {
    refs.iter()
        .enumerate()
        .map(|(i, r)| (i, geodesic_distance(&r.pose, pose)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub pose: PoseSE3,
    pub rendered: Image,
    pub fixed: Option<Image>,
    pub raw_score: Option<f64>,
    pub normalized: Option<f64>,
    pub accepted: bool,
    pub reference: Option<usize>,
    pub error: Option<String>,
}

fn render_color(
    scene: &GaussianScene,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<Image, ExploreError> {
    render(scene, pose, intr, cfg)
        .map(|o| o.color.clamp01())
        .map_err(|e| ExploreError::Render(e.to_string()))
}

fn consistency(
    provider: &dyn PriorProvider,
    rendered: &Image,
    reference: &Image,
    pose: &PoseSE3,
    t0: u32,
) -> Result<(Image, f64), ExploreError> {
    let req = RepairRequest {
        image: rendered.clone(),
        reference: reference.clone(),
        t0,
        pose: *pose,
    };
    let fixed = provider.repair(&req)?;
    let s = psnr(&fixed, rendered).map_err(|e| ExploreError::Render(e.to_string()))?;
    Ok((fixed, s))
}

/// Mean consistency score over the training views.
pub fn baseline_score(
    scene: &GaussianScene,
    provider: &dyn PriorProvider,
    training_poses: &[PoseSE3],
    references: &[Reference],
    intr: &CameraIntrinsics,
    rcfg: &RenderConfig,
    t0: u32,
) -> Result<f64, ExploreError> {
    if training_poses.is_empty() || references.is_empty() {
        return Err(ExploreError::NoTrainingViews);
    }
    let scores = map_indices(training_poses.len(), |i| {
        let pose = &training_poses[i];
        let rendered = render_color(scene, pose, intr, rcfg)?;
        let r = nearest_reference(references, pose).expect("non-empty references");
        consistency(provider, &rendered, &references[r].image, pose, t0).map(|(_, s)| s)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / training_poses.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn score_candidate(
    scene: &GaussianScene,
    provider: &dyn PriorProvider,
    pose: &PoseSE3,
    references: &[Reference],
    baseline: f64,
    cfg: &ExplorationConfig,
    intr: &CameraIntrinsics,
    rcfg: &RenderConfig,
) -> ScoredCandidate {
    let rendered = match render_color(scene, pose, intr, rcfg) {
        Ok(r) => r,
        Err(e) => {
            return ScoredCandidate {
                pose: *pose,
                rendered: Image::new(intr.width, intr.height, 3),
                fixed: None,
                raw_score: None,
                normalized: None,
                accepted: false,
                reference: None,
                error: Some(e.to_string()),
            }
        }
    };
    let reference = nearest_reference(references, pose);
    let scored = match reference {
        Some(r) => consistency(provider, &rendered, &references[r].image, pose, cfg.t0),
        None => Err(ExploreError::NoTrainingViews),
    };
    score_from(*pose, rendered, reference, scored, baseline, cfg)
}

/// Builds a candidate record from an already computed repair result.
pub fn score_from(
    pose: PoseSE3,
    rendered: Image,
    reference: Option<usize>,
    scored: Result<(Image, f64), ExploreError>,
    baseline: f64,
    cfg: &ExplorationConfig,
) -> ScoredCandidate {
    match scored {
        Ok((fixed, s)) => {
            let n = cfg.normalize(s, baseline);
            ScoredCandidate {
                pose,
                rendered,
                fixed: Some(fixed),
                raw_score: Some(s),
                normalized: Some(n),
                accepted: cfg.in_band(n),
                reference,
                error: None,
            }
        }
        Err(e) => {
            log::warn!("candidate left unscored: {e}");
            ScoredCandidate {
                pose,
                rendered,
                fixed: None,
                raw_score: None,
                normalized: None,
                accepted: false,
                reference,
                error: Some(e.to_string()),
            }
        }
    }
}

fn is_new(pose: &PoseSE3, seen: &[PoseSE3]) -> bool {
    seen.iter()
        .all(|p| geodesic_distance(p, pose) >= DEDUP_DISTANCE)
}

/// Interpolants and extrapolants for each adjacent pair of `poses`, minus
/// anything already in `poses` or generated earlier in the same call.
pub fn generate_candidates(poses: &[PoseSE3], cfg: &ExplorationConfig) -> Vec<PoseSE3> {
    if poses.len() < 2 {
        return Vec::new();
    }
    let c = cfg.candidates_per_pair;
    let m = cfg.extrapolation_margin;
    let mut us: Vec<f64> = (1..=c).map(|j| j as f64 / (c + 1) as f64).collect();
    us.push(-m);
    us.push(1.0 + m);
    let mut seen = poses.to_vec();
    let mut out = Vec::new();
    for pair in poses.windows(2) {
        for &u in &us {
            let p = interpolate_pose(&pair[0], &pair[1], u).value;
            if is_new(&p, &seen) {
                seen.push(p);
                out.push(p);
            }
        }
    }
    out
}

/// Pose list explored in insertion order: training poses first, then
/// accepted generated poses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExploreBuffer {
    pub poses: Vec<PoseSE3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreRound {
    pub baseline: f64,
    pub candidates: Vec<ScoredCandidate>,
}

impl ExploreRound {
    pub fn accepted(&self) -> impl Iterator<Item = &ScoredCandidate> {
        self.candidates.iter().filter(|c| c.accepted)
    }

    pub fn trace(&self) -> ExploreTrace {
        ExploreTrace {
            baseline: self.baseline,
            candidates: self
                .candidates
                .iter()
                .map(|c| TraceEntry {
                    pose: c.pose,
                    s: c.raw_score,
                    s_tilde: c.normalized,
                    accepted: c.accepted,
                    error: c.error.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub pose: PoseSE3,
    pub s: Option<f64>,
    pub s_tilde: Option<f64>,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreTrace {
    pub baseline: f64,
    pub candidates: Vec<TraceEntry>,
}

/// One exploration round. Every candidate is scored against the same scene
/// and baseline; accepted poses are appended to the buffer afterwards.
#[allow(clippy::too_many_arguments)]
pub fn explore(
    scene: &GaussianScene,
    provider: &dyn PriorProvider,
    buffer: &mut ExploreBuffer,
    references: &[Reference],
    baseline: f64,
    cfg: &ExplorationConfig,
    intr: &CameraIntrinsics,
    rcfg: &RenderConfig,
) -> Result<ExploreRound, ExploreError> {
    cfg.validate()?;
    let poses = generate_candidates(&buffer.poses, cfg);
    let candidates = map_indices(poses.len(), |i| {
        score_candidate(scene, provider, &poses[i], references, baseline, cfg, intr, rcfg)
    });
    for c in candidates.iter().filter(|c| c.accepted) {
        buffer.poses.push(c.pose);
    }
    Ok(ExploreRound {
        baseline,
        candidates,
    })
}
