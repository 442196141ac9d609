//! Domain types shared across data, augmentation, model and loss code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reserved label for void/boundary pixels. Skipped by metrics and losses.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl ShapeSpec {
    pub fn new(height: usize, width: usize, channels: usize, num_classes: usize) -> Result<Self> {
        let s = Self {
            height,
            width,
            channels,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!("shape dimensions must be positive: {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("at most {IGNORE_LABEL} classes supported")));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(Error::Config(format!("unknown domain tag {other:?}"))),
        }
    }
}

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_u8_planar(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(channels, height, width, bytes.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect())
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Rectangular sub-window, all channels.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Self::new(self.channels, height, width, data)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }
}

/// Stacks images into an `[N, C, H, W]` tensor.
pub fn batch_images<T: Scalar>(images: &[&Image<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        if !im.same_shape(first) {
            return Err(Error::Shape("images in a batch must share a shape".into()));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data)
}

/// Dense class-id map; [`IGNORE_LABEL`] marks pixels without a label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape("label crop outside map".into()));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + width]);
        }
        Self::new(height, width, data)
    }

    /// Checks every entry is a valid class id or [`IGNORE_LABEL`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes) {
            Some(&id) => Err(Error::ClassOutOfRange { id, num_classes }),
            None => Ok(()),
        }
    }

    /// Sorted distinct class ids, ignore excluded.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..IGNORE_LABEL).filter(|&c| seen[c as usize]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample<T> {
    pub id: String,
    pub domain: DomainTag,
    pub image: Image<T>,
    pub label: Option<LabelMap>,
}

impl<T: Scalar> DomainSample<T> {
    pub fn new(id: impl Into<String>, domain: DomainTag, image: Image<T>, label: Option<LabelMap>) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &label {
            if l.height != image.height || l.width != image.width {
                return Err(Error::LabelMismatch {
                    id,
                    image_h: image.height,
                    image_w: image.width,
                    label_h: l.height,
                    label_w: l.width,
                });
            }
        }
        Ok(Self {
            id,
            domain,
            image,
            label,
        })
    }
}

/// Per-pixel class probabilities, stored `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField<T> {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ProbabilityField<T> {
    /// Wraps values after checking range and per-pixel normalization.
    pub fn new(num_classes: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        let f = Self {
            num_classes,
            height,
            width,
            values,
        };
        if f.values.len() != num_classes * height * width {
            return Err(Error::Shape("probability field size".into()));
        }
        f.check(1e-5)?;
        Ok(f)
    }

    /// Per-pixel softmax of class scores laid out `[C, H, W]`.
    pub fn from_logits(num_classes: usize, height: usize, width: usize, logits: &[T]) -> Result<Self> {
        let hw = height * width;
        if logits.len() != num_classes * hw {
            return Err(Error::Shape("logit field size".into()));
        }
        let mut values = vec![T::zero(); logits.len()];
        for j in 0..hw {
            let mx = (0..num_classes).map(|c| logits[c * hw + j]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..num_classes {
                let e = (logits[c * hw + j] - mx).exp();
                values[c * hw + j] = e;
                z += e;
            }
            for c in 0..num_classes {
                values[c * hw + j] /= z;
            }
        }
        Ok(Self {
            num_classes,
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn prob(&self, c: usize, y: usize, x: usize) -> T {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Class probabilities at flat pixel index `j`.
    pub fn pixel(&self, j: usize) -> impl Iterator<Item = T> + '_ {
        let hw = self.height * self.width;
        (0..self.num_classes).map(move |c| self.values[c * hw + j])
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        let hw = self.height * self.width;
        for j in 0..hw {
            let mut s = 0.0;
            for p in self.pixel(j) {
                let p = p.to_f64_lossy();
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Shape(format!("probability {p} outside [0, 1]")));
                }
                s += p;
            }
            if (s - 1.0).abs() > tol {
                return Err(Error::Shape(format!("pixel {j} probabilities sum to {s}")));
            }
        }
        Ok(())
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let hw = self.height * self.width;
        let data = (0..hw)
            .map(|j| {
                let mut best = 0;
                let mut best_p = self.values[j];
                for c in 1..self.num_classes {
                    let p = self.values[c * hw + j];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }
}
