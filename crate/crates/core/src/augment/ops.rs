//! Pixel-level primitives shared by both augmentation pipelines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear_plane, LerpTable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::Image;

/// Bilinear resize with half-pixel centers.
pub fn resize<T: Scalar>(image: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize to an empty image".into()));
    }
    if (out_h, out_w) == (image.height, image.width) {
        return Ok(image.clone());
    }
    let ty = LerpTable::<T>::new(image.height, out_h);
    let tx = LerpTable::<T>::new(image.width, out_w);
    let mut data = vec![T::zero(); image.channels * out_h * out_w];
    for c in 0..image.channels {
        bilinear_plane(image.plane(c), image.width, &mut data[c * out_h * out_w..(c + 1) * out_h * out_w], out_w, &ty, &tx);
    }
    Image::new(image.channels, out_h, out_w, data)
}

pub fn hflip<T: Scalar>(image: &Image<T>) -> Image<T> {
    let mut out = image.clone();
    for row in out.data.chunks_mut(image.width) {
        row.reverse();
    }
    out
}

pub fn vflip<T: Scalar>(image: &Image<T>) -> Image<T> {
    let mut out = image.clone();
    let (h, w) = (image.height, image.width);
    for c in 0..image.channels {
        let plane = out.plane_mut(c);
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
    out
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma<T: Scalar>(image: &Image<T>) -> Vec<T> {
    let hw = image.height * image.width;
    let w = LUMA.map(T::of);
    (0..hw)
        .map(|j| w[0] * image.data[j] + w[1] * image.data[hw + j] + w[2] * image.data[2 * hw + j])
        .collect()
}

fn require_rgb<T>(image: &Image<T>, op: &str) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Shape(format!("{op} needs 3 channels, got {}", image.channels)));
    }
    Ok(())
}

/// Luma replicated into all three channels.
pub fn grayscale<T: Scalar>(image: &Image<T>) -> Result<Image<T>> {
    require_rgb(image, "grayscale")?;
    let g = luma(image);
    let mut data = Vec::with_capacity(image.data.len());
    for _ in 0..3 {
        data.extend_from_slice(&g);
    }
    Image::new(3, image.height, image.width, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterStrengths {
    pub fn uniform(s: f64) -> Self {
        Self {
            brightness: s,
            contrast: s,
            saturation: s,
            hue: s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.brightness, self.contrast, self.saturation, self.hue];
        if all.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("jitter strengths must be finite and non-negative".into()));
        }
        if self.hue > 0.5 {
            return Err(Error::Config("hue strength is at most 0.5 turns".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Sampled jitter parameters; enough to replay the perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Offset in hue turns.
    pub hue: f64,
}

impl JitterDraw {
    pub fn identity() -> Self {
        Self {
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, s: &JitterStrengths) -> Self {
        use rand::seq::SliceRandom;
        let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
        order.shuffle(rng);
        let mut factor = |s: f64| if s > 0.0 { rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
        let brightness = factor(s.brightness);
        let contrast = factor(s.contrast);
        let saturation = factor(s.saturation);
        let hue = if s.hue > 0.0 { rng.gen_range(-s.hue..=s.hue) } else { 0.0 };
        Self {
            order,
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Applies a sampled jitter. Factors of exactly 1 (and a zero hue offset)
/// leave the image untouched.
pub fn apply_jitter<T: Scalar>(image: &Image<T>, d: &JitterDraw) -> Result<Image<T>> {
    require_rgb(image, "color jitter")?;
    let mut out = image.clone();
    let hw = image.height * image.width;
    for op in d.order {
        match op {
            JitterOp::Brightness if d.brightness != 1.0 => {
                let f = T::of(d.brightness);
                out.data.iter_mut().for_each(|v| *v = clamp_unit(*v * f));
            }
            JitterOp::Contrast if d.contrast != 1.0 => {
                let g = luma(&out);
                let mean = g.iter().copied().sum::<T>() / T::of(hw as f64);
                let f = T::of(d.contrast);
                out.data.iter_mut().for_each(|v| *v = clamp_unit((*v - mean) * f + mean));
            }
            JitterOp::Saturation if d.saturation != 1.0 => {
                let g = luma(&out);
                let f = T::of(d.saturation);
                for c in 0..3 {
                    for (v, &gv) in out.plane_mut(c).iter_mut().zip(&g) {
                        *v = clamp_unit((*v - gv) * f + gv);
                    }
                }
            }
            JitterOp::Hue if d.hue != 0.0 => {
                for j in 0..hw {
                    let rgb = [0, 1, 2].map(|c| out.data[c * hw + j].to_f64_lossy());
                    let (h, s, v) = rgb_to_hsv(rgb);
                    let shifted = hsv_to_rgb(((h + d.hue) % 1.0 + 1.0) % 1.0, s, v);
                    for c in 0..3 {
                        out.data[c * hw + j] = clamp_unit(T::of(shifted[c]));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Random brightness, contrast, saturation and hue perturbation.
pub fn photometric_jitter<T: Scalar, R: Rng>(image: &Image<T>, strengths: &JitterStrengths, rng: &mut R) -> Result<Image<T>> {
    strengths.validate()?;
    apply_jitter(image, &JitterDraw::sample(rng, strengths))
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Sigma below which blurring is skipped.
pub const MIN_BLUR_SIGMA: f64 = 0.1;

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn blur_with_sigma<T: Scalar>(image: &Image<T>, sigma: f64) -> Image<T> {
    if !(sigma >= MIN_BLUR_SIGMA) {
        return image.clone();
    }
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::of).collect();
    let r = (k.len() / 2) as isize;
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    let mut tmp = vec![T::zero(); h * w];
    for c in 0..image.channels {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * src[y * w + reflect(x as isize + t as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Blur with sigma drawn uniformly from `sigma_range`.
pub fn gaussian_blur<T: Scalar, R: Rng>(image: &Image<T>, sigma_range: [f64; 2], rng: &mut R) -> Result<Image<T>> {
    validate_sigma_range(sigma_range)?;
    let sigma = rng.gen_range(sigma_range[0]..=sigma_range[1]);
    Ok(blur_with_sigma(image, sigma))
}

pub(crate) fn validate_sigma_range(r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(Error::Config(format!("blur sigma range {r:?} must be positive and ordered")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let img = random(0, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(photometric_jitter(&img, &JitterStrengths::uniform(0.0), &mut rng).unwrap(), img);
    }

    #[test]
    fn brightness_replay_scales_and_clamps() {
        let img = random(2, 4, 4);
        let d = JitterDraw {
            brightness: 1.25,
            ..JitterDraw::identity()
        };
        let out = apply_jitter(&img, &d).unwrap();
        for (o, i) in out.data.iter().zip(&img.data) {
            assert_eq!(*o, (1.25 * i).min(1.0));
        }
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let (h, s, v) = rgb_to_hsv(c);
            let back = hsv_to_rgb(h, s, v);
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_constant_and_small_sigma() {
        let img = Image::filled(3, 6, 5, 0.3f64);
        let out = blur_with_sigma(&img, 0.9);
        assert!(out.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let r = random(4, 6, 6);
        assert_eq!(blur_with_sigma(&r, 0.05), r);
    }

    #[test]
    fn blur_matches_dense_kernel() {
        let (h, w) = (9, 11);
        let mut img = Image::filled(3, h, w, 0.0f64);
        img.data[4 * w + 6] = 1.0;
        let out = blur_with_sigma(&img, 1.0);
        let k = gaussian_kernel(1.0);
        let r = (k.len() / 2) as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut want = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = reflect(y + dy, h);
                        let sx = reflect(x + dx, w);
                        want += k[(dy + r) as usize] * k[(dx + r) as usize] * img.data[sy * w + sx];
                    }
                }
                assert!((out.data[y as usize * w + x as usize] - want).abs() < 1e-12);
            }
        }
        let total: f64 = out.plane(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flips_are_involutions() {
        let img = random(5, 4, 6);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        assert_eq!(vflip(&img).get(1, 0, 2), img.get(1, 3, 2));
        assert_eq!(hflip(&img).get(2, 1, 0), img.get(2, 1, 5));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = random(6, 5, 5);
        assert_eq!(resize(&img, 5, 5).unwrap(), img);
        let c = Image::filled(3, 4, 6, 0.7f64);
        assert!(resize(&c, 9, 3).unwrap().data.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn jitter_commutes_with_flips_and_stays_in_range(seed in 0u64..1000) {
            let img = random(seed, 6, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = JitterDraw::sample(&mut rng, &JitterStrengths::uniform(0.4));
            let a = hflip(&apply_jitter(&img, &d).unwrap());
            let b = apply_jitter(&hflip(&img), &d).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let v = vflip(&apply_jitter(&img, &d).unwrap());
            let w = apply_jitter(&vflip(&img), &d).unwrap();
            for (x, y) in v.data.iter().zip(&w.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(a.in_unit_range());
        }
    }
}
