//! Browser demo: motion blur along an orbit arc, its frequency spectrum, and
//! the band-pass test used to accept explored views.

use blursplat::blur::{synthesize_blur, ExposureSegment};
use blursplat::explore::{ExplorationConfig, ScoreSign};
use blursplat::harness::{orbit_pose, radial_spectrum};
use blursplat::image::Image;
use blursplat::scene::{generate_scene, GaussianScene, SceneLayout, SceneRecipe};
use blursplat::splat::{CameraIntrinsics, RenderConfig};
use nalgebra::Vector3;
use wasm_bindgen::prelude::*;

const FOV_X_DEG: f64 = 50.0;
const RADIUS: f64 = 4.5;

#[wasm_bindgen]
pub struct Demo {
    scene: GaussianScene,
    intr: CameraIntrinsics,
    target: Vector3<f64>,
}

impl Demo {
    pub fn create(seed: u64, count: usize, width: usize, height: usize) -> Result<Demo, String> {
        let recipe = SceneRecipe::new(seed, count, SceneLayout::ClusterField);
        let scene = generate_scene(&recipe).map_err(|e| e.to_string())?;
        let intr = CameraIntrinsics::from_fov(width, height, FOV_X_DEG).map_err(|e| e.to_string())?;
        let target = scene.bounds().center();
        Ok(Demo { scene, intr, target })
    }

    pub fn blurred_image(&self, angle: f64, exposure: f64, samples: usize) -> Result<Image, String> {
        let seg = ExposureSegment::new(
            orbit_pose(&self.target, RADIUS, angle - 0.5 * exposure),
            orbit_pose(&self.target, RADIUS, angle + 0.5 * exposure),
            samples.max(1),
        )
        .map_err(|e| e.to_string())?;
        let out = synthesize_blur(&self.scene, &seg, &self.intr, &RenderConfig::default())
            .map_err(|e| e.to_string())?;
        Ok(out.color.clamp01())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, count: u32, width: u32, height: u32) -> Result<Demo, JsValue> {
        Demo::create(seed.into(), count as usize, width as usize, height as usize)
            .map_err(|e| JsValue::from_str(&e))
    }

    pub fn width(&self) -> u32 {
        self.intr.width as u32
    }

    pub fn height(&self) -> u32 {
        self.intr.height as u32
    }

    /// RGBA8 pixels of the frame blurred over `exposure` radians of arc.
    pub fn blurred(&self, angle: f64, exposure: f64, samples: u32) -> Result<Vec<u8>, JsValue> {
        self.blurred_image(angle, exposure, samples as usize)
            .map(|img| img.to_rgba8())
            .map_err(|e| JsValue::from_str(&e))
    }

    pub fn spectrum(&self, angle: f64, exposure: f64, samples: u32) -> Result<Spectrum, JsValue> {
        let img = self
            .blurred_image(angle, exposure, samples as usize)
            .map_err(|e| JsValue::from_str(&e))?;
        Ok(Spectrum::of(&img))
    }
}

#[wasm_bindgen]
pub struct Spectrum {
    rgba: Vec<u8>,
    hf_ratio: f64,
    radial: Vec<f64>,
}

impl Spectrum {
    pub fn of(img: &Image) -> Spectrum {
        let p = radial_spectrum(img);
        let mag = p.log_magnitude_image();
        let peak = mag.data().iter().cloned().fold(0.0, f64::max);
        let norm = if peak > 0.0 { mag.scale(1.0 / peak) } else { mag };
        Spectrum {
            rgba: norm.to_rgba8(),
            hf_ratio: p.hf_ratio,
            radial: p.radial,
        }
    }
}

#[wasm_bindgen]
impl Spectrum {
    /// Centered log-magnitude, RGBA8.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn hf_ratio(&self) -> f64 {
        self.hf_ratio
    }

    pub fn radial(&self) -> Vec<f64> {
        self.radial.clone()
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandDecision {
    pub normalized: f64,
    pub accepted: bool,
}

/// Normalizes a candidate score against the training baseline and applies
/// the band. `literal_sign` uses score minus baseline instead of the drop.
#[wasm_bindgen]
pub fn band_pass(baseline: f64, score: f64, s_min: f64, s_max: f64, literal_sign: bool) -> BandDecision {
    let cfg = ExplorationConfig {
        s_min,
        s_max,
        sign: if literal_sign { ScoreSign::Literal } else { ScoreSign::Drop },
        ..Default::default()
    };
    let normalized = cfg.normalize(score, baseline);
    BandDecision {
        normalized,
        accepted: s_min <= s_max && cfg.in_band(normalized),
    }
}
