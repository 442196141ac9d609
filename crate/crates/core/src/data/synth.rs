//! Paired-domain scene generator: textured background plus non-overlapping
//! rectangles, ellipses and bands, one class per shape kind. The target
//! domain gets fresh layouts and a per-channel photometric shift.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{build_manifest, DatasetManifest, ManifestMeta, ParentImage, Split, SplitRule};
use super::store::{Dataset, MemoryStore, Raster};
use super::tiling::TilingSpec;
use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};
use crate::types::{DomainTag, ShapeSpec};

/// `out[c] = gains[c] * ((1 - m) * in[c] + m * in[permutation[c]]) + biases[c]`,
/// clamped to [0, 1], where `m` is `permutation_weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometricShift {
    pub gains: Vec<f64>,
    pub biases: Vec<f64>,
    #[serde(default)]
    pub permutation: Option<Vec<usize>>,
    /// 1 when omitted.
    #[serde(default = "one")]
    pub permutation_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl PhotometricShift {
    pub fn identity(channels: usize) -> Self {
        Self {
            gains: vec![1.0; channels],
            biases: vec![0.0; channels],
            permutation: None,
            permutation_weight: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gains.iter().all(|&g| g == 1.0)
            && self.biases.iter().all(|&b| b == 0.0)
            && (self.permutation_weight == 0.0
                || self.permutation.as_ref().map_or(true, |p| p.iter().enumerate().all(|(i, &v)| i == v)))
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.gains.len() != channels || self.biases.len() != channels {
            return Err(Error::Config(format!("shift needs {channels} gains and biases")));
        }
        if self.gains.iter().any(|&g| !(g > 0.0 && g.is_finite())) || self.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("shift gains must be positive and finite".into()));
        }
        if !(0.0..=1.0).contains(&self.permutation_weight) {
            return Err(Error::Config("permutation_weight must lie in [0, 1]".into()));
        }
        if let Some(p) = &self.permutation {
            let mut seen = vec![false; channels];
            if p.len() != channels || p.iter().any(|&i| i >= channels || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::Config(format!("{p:?} is not a permutation of {channels} channels")));
            }
        }
        Ok(())
    }

    fn apply(&self, px: &[f64]) -> Vec<f64> {
        (0..px.len())
            .map(|c| {
                let mixed = match &self.permutation {
                    Some(p) => (1.0 - self.permutation_weight) * px[c] + self.permutation_weight * px[p[c]],
                    None => px[c],
                };
                (self.gains[c] * mixed + self.biases[c]).clamp(0.0, 1.0)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Training images per domain.
    pub num_images: usize,
    /// Held-out images per domain.
    pub num_test: usize,
    pub shape: ShapeSpec,
    pub shift: PhotometricShift,
    /// Fraction of the image covered by foreground shapes, in (0, 1].
    pub shape_density: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 400,
            num_test: 100,
            shape: ShapeSpec {
                height: 64,
                width: 64,
                channels: 3,
                num_classes: 4,
            },
            shift: PhotometricShift {
                gains: vec![1.1, 0.8, 1.0],
                biases: vec![-0.05, 0.12, 0.0],
                permutation: Some(vec![2, 0, 1]),
                permutation_weight: 0.5,
            },
            shape_density: 0.4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.shape.channels != 3 {
            return Err(Error::Unsupported("synthetic scenes are 3-channel".into()));
        }
        if !(self.shape_density > 0.0 && self.shape_density <= 1.0) {
            return Err(Error::Config(format!("shape_density {} outside (0, 1]", self.shape_density)));
        }
        self.shift.validate(self.shape.channels)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.shape.num_classes)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    let kind = ["rectangle", "ellipse", "band"][(c - 1) % 3];
                    match (c - 1) / 3 {
                        0 => kind.to_string(),
                        v => format!("{kind}{}", v + 1),
                    }
                }
            })
            .collect()
    }
}

/// One generated domain held in memory.
#[derive(Clone, Debug)]
pub struct SynthDomain {
    pub manifest: DatasetManifest,
    pub store: Arc<MemoryStore>,
}

impl SynthDomain {
    pub fn dataset(&self) -> Dataset {
        Dataset::new(self.manifest.clone(), self.store.clone())
    }

    /// Writes `images/`, `labels/` and `manifest.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.write_to(dir)?;
        let m = DatasetManifest {
            root: None,
            ..self.manifest.clone()
        };
        m.save(&dir.join("manifest.tsv"))
    }
}

pub fn synth_domain_pair(config: &SynthConfig) -> Result<(SynthDomain, SynthDomain)> {
    config.validate()?;
    let source = render_domain(config, DomainTag::Source, None)?;
    let target = render_domain(config, DomainTag::Target, Some(&config.shift))?;
    Ok((source, target))
}

fn render_domain(config: &SynthConfig, domain: DomainTag, shift: Option<&PhotometricShift>) -> Result<SynthDomain> {
    let sh = config.shape;
    let prefix = match domain {
        DomainTag::Source => "src",
        DomainTag::Target => "tgt",
    };
    let mut store = MemoryStore::new();
    let mut parents = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, count) in [(Split::Train, config.num_images), (Split::Test, config.num_test)] {
        for i in 0..count {
            let id = format!("{prefix}_{}_{i:05}", split.as_str());
            let mut rng = rng_for(config.seed, &[tag("synth"), tag(domain.as_str()), tag(split.as_str()), i as u64]);
            let scene = render_scene(&mut rng, sh, config.shape_density)?;
            store.insert(id.clone(), scene.into_raster(shift)?);
            parents.push(ParentImage {
                id: id.clone(),
                height: sh.height,
                width: sh.width,
            });
            match split {
                Split::Train => train.push(id),
                Split::Test => test.push(id),
            }
        }
    }
    let meta = ManifestMeta {
        domain,
        channels: sh.channels,
        class_names: config.class_names(),
        root: None,
    };
    // Scenes are rendered at tile size, so each parent is exactly one tile.
    let mut manifest = build_manifest(
        &parents,
        &TilingSpec::new(sh.height.min(sh.width), sh.height.min(sh.width))?,
        &SplitRule::Lists { train, test },
        meta,
    )?;
    manifest.shape = sh;
    Ok(SynthDomain {
        manifest,
        store: Arc::new(store),
    })
}

/// A rendered scene before quantization.
struct Scene {
    height: usize,
    width: usize,
    /// Interleaved RGB in [0, 1].
    rgb: Vec<f64>,
    label: Vec<u8>,
}

impl Scene {
    fn into_raster(self, shift: Option<&PhotometricShift>) -> Result<Raster> {
        let plane = self.height * self.width;
        let mut pixels = vec![0u8; 3 * plane];
        for j in 0..plane {
            let px = &self.rgb[3 * j..3 * j + 3];
            let px = match shift {
                Some(s) => s.apply(px),
                None => px.to_vec(),
            };
            for c in 0..3 {
                pixels[c * plane + j] = (px[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Raster::new(3, self.height, self.width, pixels, Some(self.label))
    }
}

const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.45, 0.50, 0.40],
    [0.70, 0.40, 0.35],
    [0.35, 0.60, 0.40],
    [0.50, 0.50, 0.62],
];
const COLOR_JITTER: f64 = 0.12;
const PIXEL_NOISE: f64 = 0.03;
const SHAPE_ATTEMPTS: usize = 60;
const SCENE_ATTEMPTS: usize = 20;

fn class_color(rng: &mut ChaCha8Rng, class: usize) -> [f64; 3] {
    let base = CLASS_COLORS[class % CLASS_COLORS.len()];
    base.map(|v| (v + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.05, 0.95))
}

#[derive(Clone, Copy)]
enum Kind {
    Rectangle,
    Ellipse,
    Band,
}

fn kind_of(class: usize) -> Kind {
    match (class - 1) % 3 {
        0 => Kind::Rectangle,
        1 => Kind::Ellipse,
        _ => Kind::Band,
    }
}

/// Candidate shape: its pixel mask and a texture value per pixel.
struct Candidate {
    pixels: Vec<(usize, usize)>,
    texture: Vec<f64>,
}

fn candidate(rng: &mut ChaCha8Rng, kind: Kind, variant: usize, h: usize, w: usize, area: f64) -> Option<Candidate> {
    let mut pixels = Vec::new();
    let mut texture = Vec::new();
    match kind {
        Kind::Rectangle => {
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let rh = ((area / aspect).sqrt().round() as usize).clamp(2, h.saturating_sub(2).max(2));
            let rw = ((area / rh as f64).round() as usize).clamp(2, w.saturating_sub(2).max(2));
            if rh + 2 > h || rw + 2 > w {
                return None;
            }
            let top = rng.gen_range(1..=h - rh - 1);
            let left = rng.gen_range(1..=w - rw - 1);
            let period = 3 + variant;
            for y in top..top + rh {
                for x in left..left + rw {
                    pixels.push((y, x));
                    let checker = ((y - top) / period + (x - left) / period) % 2;
                    texture.push(if checker == 0 { 1.0 } else { -1.0 });
                }
            }
        }
        Kind::Ellipse => {
            let aspect: f64 = rng.gen_range(0.6..1.6);
            let a = (area * aspect / std::f64::consts::PI).sqrt();
            let b = area / (std::f64::consts::PI * a);
            if 2.0 * a + 3.0 > w as f64 || 2.0 * b + 3.0 > h as f64 {
                return None;
            }
            let cx = rng.gen_range(a + 1.0..w as f64 - a - 1.0);
            let cy = rng.gen_range(b + 1.0..h as f64 - b - 1.0);
            let rings = 1.0 + variant as f64;
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 + 0.5 - cx) / a;
                    let dy = (y as f64 + 0.5 - cy) / b;
                    let r2 = dx * dx + dy * dy;
                    if r2 <= 1.0 {
                        pixels.push((y, x));
                        texture.push((std::f64::consts::PI * rings * r2).cos());
                    }
                }
            }
        }
        Kind::Band => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            let span = (h as f64 * s.abs() + w as f64 * c.abs()).max(1.0);
            let thick = (area / span).max(2.0);
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let reach = (span - thick) / 2.0;
            let offset = if reach > 0.0 { rng.gen_range(-reach..reach) } else { 0.0 };
            let period = 4.0 + variant as f64;
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let across = px * s - py * c;
                    let along = px * c + py * s;
                    if (across - offset).abs() <= thick / 2.0 {
                        pixels.push((y, x));
                        texture.push((2.0 * std::f64::consts::PI * along / period).sin());
                    }
                }
            }
        }
    }
    (!pixels.is_empty()).then_some(Candidate { pixels, texture })
}

fn render_scene(rng: &mut ChaCha8Rng, sh: ShapeSpec, density: f64) -> Result<Scene> {
    let (h, w) = (sh.height, sh.width);
    let shapes = sh.num_classes - 1;
    let target_area = density * (h * w) as f64 / shapes as f64;
    'scene: for _ in 0..SCENE_ATTEMPTS {
        let mut label = vec![0u8; h * w];
        let mut occupied = vec![false; h * w];
        let mut rgb = vec![0.0; 3 * h * w];

        let bg = class_color(rng, 0);
        let (fx, fy, phase): (f64, f64, f64) = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.0..6.3));
        for y in 0..h {
            for x in 0..w {
                let t = 0.08 * ((x as f64 * fx + phase).sin() + (y as f64 * fy - phase).cos()) / 2.0;
                for c in 0..3 {
                    rgb[3 * (y * w + x) + c] = bg[c] + t;
                }
            }
        }

        // Bands span the image, so they go down first.
        let mut order: Vec<usize> = (1..sh.num_classes).collect();
        order.sort_by_key(|&c| !matches!(kind_of(c), Kind::Band));
        for class in order {
            let variant = (class - 1) / 3;
            let area = target_area * rng.gen_range(0.7..1.3);
            let mut placed = None;
            for _ in 0..SHAPE_ATTEMPTS {
                let Some(cand) = candidate(rng, kind_of(class), variant, h, w, area) else { continue };
                let clear = cand.pixels.iter().all(|&(y, x)| {
                    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
                    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                    (y0..=y1).all(|yy| (x0..=x1).all(|xx| !occupied[yy * w + xx]))
                });
                if clear {
                    placed = Some(cand);
                    break;
                }
            }
            let Some(cand) = placed else { continue 'scene };
            let color = class_color(rng, class);
            let amp = 0.12;
            for (&(y, x), &t) in cand.pixels.iter().zip(&cand.texture) {
                let j = y * w + x;
                occupied[j] = true;
                label[j] = class as u8;
                for c in 0..3 {
                    rgb[3 * j + c] = color[c] + amp * t;
                }
            }
        }
        for v in rgb.iter_mut() {
            *v = (*v + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
        }
        return Ok(Scene { height: h, width: w, rgb, label });
    }
    Err(Error::Placement {
        attempts: SCENE_ATTEMPTS * SHAPE_ATTEMPTS,
        density,
    })
}
