use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::DynamicImage;

use super::manifest::{DatasetManifest, ParentImage, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DomainSample, DomainTag, Image, LabelMap};

/// A decoded parent image: 8-bit planar pixels plus an optional label plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Arc<Vec<u8>>,
    pub label: Option<Arc<Vec<u8>>>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>, label: Option<Vec<u8>>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "raster {channels}x{height}x{width} given {} bytes",
                pixels.len()
            )));
        }
        if label.as_ref().is_some_and(|l| l.len() != height * width) {
            return Err(Error::Shape("label plane size differs from raster".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels: Arc::new(pixels),
            label: label.map(Arc::new),
        })
    }
}

pub trait RasterStore: Debug + Send + Sync {
    fn load(&self, parent: &str) -> Result<Raster>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryStore {
    rasters: BTreeMap<String, Raster>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, raster: Raster) {
        self.rasters.insert(id.into(), raster);
    }

    pub fn get(&self, id: &str) -> Option<&Raster> {
        self.rasters.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Raster)> {
        self.rasters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }

    /// Writes every raster under `root` in the directory layout.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for (id, r) in &self.rasters {
            write_raster(root, id, r)?;
        }
        Ok(())
    }
}

impl RasterStore for MemoryStore {
    fn load(&self, parent: &str) -> Result<Raster> {
        self.rasters
            .get(parent)
            .cloned()
            .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("<memory>/{parent}"))))
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// `images/<id>.png` and `labels/<id>.png` under one root. The most recently
/// decoded parent is kept, since consecutive tiles usually share it.
#[derive(Debug)]
pub struct DirectoryStore {
    root: PathBuf,
    last: Mutex<Option<(String, Raster)>>,
}

impl DirectoryStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            last: Mutex::new(None),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn image_path(&self, id: &str) -> Option<PathBuf> {
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.root.join("images").join(format!("{id}.{ext}")))
            .find(|p| p.exists())
    }

    /// Parent images with their sizes, sorted by id. Only headers are read.
    pub fn scan(&self) -> Result<Vec<ParentImage>> {
        let dir = self.root.join("images");
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir));
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::CorruptRaster {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            out.push(ParentImage {
                id: id.to_string(),
                height: h as usize,
                width: w as usize,
            });
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::CorruptRaster {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

fn first_channel(img: DynamicImage) -> Vec<u8> {
    match img {
        DynamicImage::ImageLuma8(b) => b.into_raw(),
        DynamicImage::ImageLumaA8(b) => b.into_raw().chunks(2).map(|p| p[0]).collect(),
        other => other.into_rgb8().into_raw().chunks(3).map(|p| p[0]).collect(),
    }
}

impl RasterStore for DirectoryStore {
    fn load(&self, parent: &str) -> Result<Raster> {
        if let Some((id, r)) = self.last.lock().ok().and_then(|g| g.clone()) {
            if id == parent {
                return Ok(r);
            }
        }
        let path = self
            .image_path(parent)
            .ok_or_else(|| Error::MissingFile(self.root.join("images").join(format!("{parent}.png"))))?;
        let rgb = decode(&path)?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let inter = rgb.into_raw();
        let mut planar = vec![0u8; inter.len()];
        for (j, px) in inter.chunks(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + j] = px[c];
            }
        }
        let label_path = self.root.join("labels").join(format!("{parent}.png"));
        let label = if label_path.exists() {
            let img = decode(&label_path)?;
            let (lw, lh) = (img.width() as usize, img.height() as usize);
            if (lh, lw) != (h, w) {
                return Err(Error::LabelMismatch {
                    id: parent.to_string(),
                    image_h: h,
                    image_w: w,
                    label_h: lh,
                    label_w: lw,
                });
            }
            Some(first_channel(img))
        } else {
            None
        };
        let r = Raster::new(3, h, w, planar, label)?;
        if let Ok(mut g) = self.last.lock() {
            *g = Some((parent.to_string(), r.clone()));
        }
        Ok(r)
    }
}

/// Writes `images/<id>.png` (RGB) and, when present, `labels/<id>.png` (gray).
pub fn write_raster(root: &Path, id: &str, r: &Raster) -> Result<()> {
    if r.channels != 3 {
        return Err(Error::Unsupported(format!("{}-channel rasters", r.channels)));
    }
    for sub in ["images", "labels"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let plane = r.height * r.width;
    let mut inter = vec![0u8; r.pixels.len()];
    for j in 0..plane {
        for c in 0..3 {
            inter[j * 3 + c] = r.pixels[c * plane + j];
        }
    }
    let save = |path: PathBuf, data: &[u8], color: image::ExtendedColorType| {
        image::save_buffer(&path, data, r.width as u32, r.height as u32, color).map_err(|e| Error::CorruptRaster {
            path: path.clone(),
            reason: e.to_string(),
        })
    };
    save(root.join("images").join(format!("{id}.png")), &inter, image::ExtendedColorType::Rgb8)?;
    if let Some(label) = &r.label {
        save(root.join("labels").join(format!("{id}.png")), label, image::ExtendedColorType::L8)?;
    }
    Ok(())
}

/// Whether loaded target samples keep their ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Source samples carry labels; target samples never do.
    Train,
    /// Labels are attached whenever they exist.
    Eval,
}

/// A manifest together with the store its parents are read from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    store: Arc<dyn RasterStore>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, store: Arc<dyn RasterStore>) -> Self {
        Self { manifest, store }
    }

    /// Loads a manifest file and reads rasters from its root directory.
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest.root.clone().unwrap_or_else(|| PathBuf::from("."));
        Ok(Self::new(manifest, Arc::new(DirectoryStore::new(root))))
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn split(&self, split: Split) -> Self {
        Self {
            manifest: self.manifest.split(split),
            store: self.store.clone(),
        }
    }

    pub fn load_sample<T: Scalar>(&self, index: usize, mode: LoadMode) -> Result<DomainSample<T>> {
        load_sample(self, index, mode)
    }

    /// Every sample, in manifest order.
    pub fn load_all<T: Scalar>(&self, mode: LoadMode) -> Result<Vec<DomainSample<T>>> {
        (0..self.len()).map(|i| self.load_sample(i, mode)).collect()
    }
}

/// The crop at entry `index`, scaled to [0, 1].
pub fn load_sample<T: Scalar>(ds: &Dataset, index: usize, mode: LoadMode) -> Result<DomainSample<T>> {
    let m = &ds.manifest;
    let e = m.entry(index)?;
    let r = ds.store.load(&e.parent)?;
    if r.channels != m.shape.channels {
        return Err(Error::Shape(format!(
            "{} has {} channels, manifest expects {}",
            e.parent, r.channels, m.shape.channels
        )));
    }
    let crop = m.crop();
    if e.row + crop > r.height || e.col + crop > r.width {
        return Err(Error::Shape(format!(
            "tile {} overruns its {}x{} parent",
            e.sample_id(),
            r.height,
            r.width
        )));
    }
    let mut bytes = Vec::with_capacity(r.channels * crop * crop);
    for c in 0..r.channels {
        for y in e.row..e.row + crop {
            let start = (c * r.height + y) * r.width + e.col;
            bytes.extend_from_slice(&r.pixels[start..start + crop]);
        }
    }
    let image = Image::<T>::from_u8_planar(r.channels, crop, crop, &bytes)?;
    let want_label = match (mode, m.domain) {
        (LoadMode::Train, DomainTag::Source) => true,
        (LoadMode::Train, DomainTag::Target) => false,
        (LoadMode::Eval, _) => r.label.is_some(),
    };
    let label = if want_label {
        let data = r.label.as_ref().ok_or_else(|| Error::Unlabeled(e.parent.clone()))?;
        let full = LabelMap::new(r.height, r.width, data.to_vec())?;
        let l = full.crop(e.row, e.col, crop, crop)?;
        l.validate(m.shape.num_classes)?;
        Some(l)
    } else {
        None
    };
    DomainSample::new(e.sample_id(), m.domain, image, label)
}
