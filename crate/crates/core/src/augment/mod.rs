//! Augmentation: view pairs for the contrastive branch and the photometric
//! pipeline plus class mixing for self-training.

mod mix;
mod ops;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::Image;

pub use mix::{class_mix, class_mix_with, select_mix_classes, MixResult};
pub use ops::{
    apply_jitter, blur_with_sigma, gaussian_blur, gaussian_kernel, grayscale, hflip, photometric_jitter, resize, vflip,
    JitterDraw, JitterOp, JitterStrengths, MIN_BLUR_SIGMA,
};

pub const DEFAULT_BLUR_SIGMA: [f64; 2] = [0.15, 1.15];
pub const CROP_ATTEMPTS: usize = 10;

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// View-pair pipeline for the contrastive branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimAugConfig {
    pub crop_size: [usize; 2],
    /// Area fraction of the crop window.
    pub scale_range: [f64; 2],
    pub jitter: JitterStrengths,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for SimAugConfig {
    fn default() -> Self {
        Self {
            crop_size: [512, 512],
            scale_range: [0.6, 1.0],
            jitter: JitterStrengths::uniform(0.25),
            jitter_prob: 0.6,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl SimAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size.contains(&0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("scale_range {:?} must satisfy 0 < low <= high <= 1", self.scale_range)));
        }
        self.jitter.validate()?;
        for (n, p) in [
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
        ] {
            check_prob(n, p)?;
        }
        ops::validate_sigma_range(self.blur_sigma)
    }

    /// The same pipeline reduced to resized crops and flips.
    pub fn resize_flip_only(&self) -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..self.clone()
        }
    }
}

/// Square window in source-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Everything sampled for one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub crop: CropWindow,
    pub hflip: bool,
    pub vflip: bool,
    pub jitter: Option<JitterDraw>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

impl ViewParams {
    pub fn sample<R: Rng>(rng: &mut R, height: usize, width: usize, cfg: &SimAugConfig) -> Result<Self> {
        let crop = sample_crop(rng, height, width, cfg.scale_range)?;
        let hflip = rng.gen_bool(cfg.hflip_prob);
        let vflip = rng.gen_bool(cfg.vflip_prob);
        let jitter = rng.gen_bool(cfg.jitter_prob).then(|| JitterDraw::sample(rng, &cfg.jitter));
        let grayscale = rng.gen_bool(cfg.grayscale_prob);
        let blur_sigma = rng
            .gen_bool(cfg.blur_prob)
            .then(|| rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]));
        Ok(Self {
            crop,
            hflip,
            vflip,
            jitter,
            grayscale,
            blur_sigma,
        })
    }

    /// Crop, resize, flips, jitter, grayscale, blur.
    pub fn apply<T: Scalar>(&self, image: &Image<T>, out: [usize; 2]) -> Result<Image<T>> {
        let c = self.crop;
        let mut v = resize(&image.crop(c.top, c.left, c.size, c.size)?, out[0], out[1])?;
        if self.hflip {
            v = hflip(&v);
        }
        if self.vflip {
            v = vflip(&v);
        }
        if let Some(d) = &self.jitter {
            v = apply_jitter(&v, d)?;
        }
        if self.grayscale {
            v = grayscale(&v)?;
        }
        if let Some(s) = self.blur_sigma {
            v = blur_with_sigma(&v, s);
        }
        Ok(v)
    }
}

/// Square window whose area is a `scale` fraction of the largest square
/// that fits. Draws rounding to an empty window are retried.
fn sample_crop<R: Rng>(rng: &mut R, height: usize, width: usize, scale: [f64; 2]) -> Result<CropWindow> {
    let limit = height.min(width);
    let area = (limit * limit) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let s = if scale[0] < scale[1] { rng.gen_range(scale[0]..=scale[1]) } else { scale[0] };
        let size = (s * area).sqrt().round() as usize;
        if size >= 1 && size <= limit {
            let top = rng.gen_range(0..=height - size);
            let left = rng.gen_range(0..=width - size);
            return Ok(CropWindow { top, left, size });
        }
    }
    Err(Error::CropAttempts {
        attempts: CROP_ATTEMPTS,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<T> {
    pub view1: Image<T>,
    pub view2: Image<T>,
    pub provenance: [ViewParams; 2],
}

/// Two independent draws of the view pipeline on one image.
pub fn make_views<T: Scalar, R: Rng>(image: &Image<T>, cfg: &SimAugConfig, rng: &mut R) -> Result<ViewPair<T>> {
    cfg.validate()?;
    let p1 = ViewParams::sample(rng, image.height, image.width, cfg)?;
    let p2 = ViewParams::sample(rng, image.height, image.width, cfg)?;
    Ok(ViewPair {
        view1: p1.apply(image, cfg.crop_size)?,
        view2: p2.apply(image, cfg.crop_size)?,
        provenance: [p1, p2],
    })
}

/// Photometric pipeline applied to mixed images in the self-training branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StAugConfig {
    pub jitter: JitterStrengths,
    pub jitter_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub class_mix: bool,
}

impl Default for StAugConfig {
    fn default() -> Self {
        Self {
            jitter: JitterStrengths::uniform(0.2),
            jitter_prob: 0.8,
            blur_prob: 0.5,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            class_mix: true,
        }
    }
}

impl StAugConfig {
    pub fn validate(&self) -> Result<()> {
        self.jitter.validate()?;
        check_prob("jitter_prob", self.jitter_prob)?;
        check_prob("blur_prob", self.blur_prob)?;
        ops::validate_sigma_range(self.blur_sigma)
    }

    pub fn apply<T: Scalar, R: Rng>(&self, image: &Image<T>, rng: &mut R) -> Result<Image<T>> {
        let mut v = image.clone();
        if rng.gen_bool(self.jitter_prob) {
            v = apply_jitter(&v, &JitterDraw::sample(rng, &self.jitter))?;
        }
        if rng.gen_bool(self.blur_prob) {
            v = blur_with_sigma(&v, rng.gen_range(self.blur_sigma[0]..=self.blur_sigma[1]));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    fn cfg(size: usize) -> SimAugConfig {
        SimAugConfig {
            crop_size: [size, size],
            ..SimAugConfig::default()
        }
    }

    #[test]
    fn identity_pipeline() {
        let img = random(0, 16, 16);
        let c = SimAugConfig {
            scale_range: [1.0, 1.0],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            ..cfg(16)
        };
        let v = make_views(&img, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(v.view1, img);
        assert_eq!(v.view2, img);
    }

    #[test]
    fn deterministic_and_replayable() {
        let img = random(1, 20, 24);
        let a = make_views(&img, &cfg(16), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_views(&img, &cfg(16), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a.provenance).unwrap();
        let back: [ViewParams; 2] = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0].apply(&img, [16, 16]).unwrap(), a.view1);
        assert_eq!(back[1].apply(&img, [16, 16]).unwrap(), a.view2);
    }

    #[test]
    fn forced_blur_and_jitter_always_change_views() {
        let img = random(2, 16, 16);
        let c = SimAugConfig {
            jitter_prob: 1.0,
            blur_prob: 1.0,
            ..cfg(16)
        };
        for seed in 0..100 {
            let v = make_views(&img, &c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let diff = |a: &Image<f64>, b: &Image<f64>| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>();
            assert!(diff(&v.view1, &img) > 0.0);
            assert!(diff(&v.view2, &img) > 0.0);
            assert!(diff(&v.view1, &v.view2) > 0.0);
        }
    }

    #[test]
    fn range_and_shape_preserved() {
        let img = random(3, 30, 22);
        for seed in 0..50 {
            let v = make_views(&img, &cfg(12), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for view in [&v.view1, &v.view2] {
                assert_eq!((view.height, view.width), (12, 12));
                assert!(view.in_unit_range());
            }
        }
    }

    #[test]
    fn crop_errors_after_attempts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_crop(&mut rng, 1, 1, [0.1, 0.2]).unwrap_err();
        assert!(matches!(err, Error::CropAttempts { attempts: CROP_ATTEMPTS }));
    }

    #[test]
    fn config_validation() {
        assert!(SimAugConfig::default().validate().is_ok());
        assert!(SimAugConfig {
            scale_range: [0.9, 0.5],
            ..SimAugConfig::default()
        }
        .validate()
        .is_err());
        assert!(SimAugConfig {
            blur_prob: 1.5,
            ..SimAugConfig::default()
        }
        .validate()
        .is_err());
        let r = SimAugConfig::default().resize_flip_only();
        assert_eq!((r.jitter_prob, r.grayscale_prob, r.blur_prob), (0.0, 0.0, 0.0));
        assert!(StAugConfig::default().validate().is_ok());
    }
}
