//! Student segmentation network, EMA teacher and contrastive heads.

mod backbone;
mod heads;
mod params;

use std::ops::Deref;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{batch_images, Image, ProbabilityField, ShapeSpec};

pub use backbone::{backbone_by_name, Backbone, TinyBackbone};
pub use heads::ContrastiveHeads;
pub use params::{apply_bn_updates, Bound, Init, ParamStore, Session, BN_MOMENTUM, NORM_EPS};

/// Architecture choices shared by the student, the teacher and the heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: String,
    pub widths: [usize; 4],
    pub decode_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny".into(),
            widths: [16, 32, 64, 128],
            decode_dim: 32,
            proj_hidden: 256,
            proj_dim: 128,
            pred_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || [self.decode_dim, self.proj_hidden, self.proj_dim, self.pred_hidden].contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone plus a multi-scale fusion decode head.
#[derive(Clone, Debug)]
pub struct SegmentationModel<T: Scalar> {
    shape: ShapeSpec,
    config: ModelConfig,
    backbone: Arc<dyn Backbone<T>>,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

impl<T: Scalar> SegmentationModel<T> {
    /// Builds the named architecture with weights drawn from `seed`.
    pub fn new(shape: ShapeSpec, config: ModelConfig, seed: u64) -> Result<Self> {
        shape.validate()?;
        config.validate()?;
        let backbone: Arc<dyn Backbone<T>> = backbone_by_name(&config.backbone, shape.channels, config.widths)?.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        backbone.init(&mut init, &mut params, &mut buffers);
        let d = config.decode_dim;
        for (i, &w) in backbone.widths().iter().enumerate() {
            init.conv(&mut params, &format!("decode.proj{}", i + 1), d, w, 1, false);
        }
        init.conv(&mut params, "decode.fuse", d, 4 * d, 1, false);
        Init::norm(&mut params, "decode.fuse_bn", d);
        Init::bn_buffers(&mut buffers, "decode.fuse_bn", d);
        init.conv(&mut params, "decode.classifier", shape.num_classes, d, 1, true);
        Ok(Self {
            shape,
            config,
            backbone,
            params,
            buffers,
        })
    }

    pub fn shape(&self) -> &ShapeSpec {
        &self.shape
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone_name(&self) -> &str {
        self.backbone.name()
    }

    pub fn backbone_widths(&self) -> [usize; 4] {
        self.backbone.widths()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Zeroes the classifier so every pixel scores all classes equally.
    pub fn zero_classifier(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("decode.classifier.") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn bind(&self, s: &mut Session<T>, trainable: bool) -> Bound {
        Bound::bind(&mut s.graph, &self.params, trainable)
    }

    /// Backbone feature pyramid.
    pub fn features(&self, s: &mut Session<T>, b: &Bound, x: Var) -> Result<[Var; 4]> {
        let xs = s.graph.value(x).shape();
        if xs.len() != 4 || xs[1] != self.shape.channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got input {:?}",
                self.shape.channels, xs
            )));
        }
        self.backbone.forward(s, b, &self.buffers, x)
    }

    /// Per-pixel class scores `[N, C, H, W]` at the input resolution.
    pub fn logits(&self, s: &mut Session<T>, b: &Bound, x: Var) -> Result<Var> {
        let (h, w) = {
            let xs = s.graph.value(x).shape();
            (xs.get(2).copied().unwrap_or(0), xs.get(3).copied().unwrap_or(0))
        };
        let feats = self.features(s, b, x)?;
        let (h1, w1) = {
            let fs = s.graph.value(feats[0]).shape();
            (fs[2], fs[3])
        };
        let mut parts = Vec::with_capacity(4);
        for (i, &f) in feats.iter().enumerate().rev() {
            let mut e = s.conv(b, &format!("decode.proj{}", i + 1), f, 1, 0, false)?;
            let es = s.graph.value(e).shape();
            if es[2] != h1 || es[3] != w1 {
                e = s.graph.upsample(e, h1, w1)?;
            }
            parts.push(e);
        }
        let cat = s.graph.concat_channels(&parts)?;
        let fused = s.conv(b, "decode.fuse", cat, 1, 0, false)?;
        let fused = s.batch_norm(b, &self.buffers, "decode.fuse_bn", fused)?;
        let fused = s.graph.relu(fused);
        let scores = s.conv(b, "decode.classifier", fused, 1, 0, true)?;
        s.graph.upsample(scores, h, w)
    }

    /// Evaluation-mode probabilities for a batch `[N, C, H, W]`.
    pub fn predict_tensor(&self, batch: Tensor<T>) -> Result<Vec<ProbabilityField<T>>> {
        let mut s = Session::new(false);
        let b = self.bind(&mut s, false);
        let x = s.graph.constant(batch);
        let logits = self.logits(&mut s, &b, x)?;
        let out = s.graph.value(logits);
        let (n, c, h, w) = (out.dim(0), out.dim(1), out.dim(2), out.dim(3));
        (0..n)
            .map(|i| ProbabilityField::from_logits(c, h, w, &out.data()[i * c * h * w..(i + 1) * c * h * w]))
            .collect()
    }

    pub fn predict(&self, images: &[&Image<T>]) -> Result<Vec<ProbabilityField<T>>> {
        self.predict_tensor(batch_images(images)?)
    }

    pub fn forward_segmentation(&self, image: &Image<T>) -> Result<ProbabilityField<T>> {
        if image.channels != self.shape.channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, image has {}",
                self.shape.channels, image.channels
            )));
        }
        Ok(self.predict(&[image])?.remove(0))
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) {
        apply_bn_updates(&mut self.buffers, updates);
    }
}

/// EMA copy of a student. Only [`ema_update`] changes its weights.
#[derive(Clone, Debug)]
pub struct TeacherModel<T: Scalar>(SegmentationModel<T>);

impl<T: Scalar> Deref for TeacherModel<T> {
    type Target = SegmentationModel<T>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl<T: Scalar> TeacherModel<T> {
    /// Rebuilds a teacher from stored tensors; used when restoring checkpoints.
    pub fn from_parts(template: &SegmentationModel<T>, params: ParamStore<T>, buffers: ParamStore<T>) -> Result<Self> {
        let (only_teacher, only_student) = params.name_difference(&template.params);
        if !only_teacher.is_empty() || !only_student.is_empty() {
            return Err(Error::ParameterMismatch { only_teacher, only_student });
        }
        let mut m = template.clone();
        m.params = params;
        m.buffers = buffers;
        Ok(Self(m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.99 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("ema alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Independent copy of the student's weights and statistics.
pub fn init_teacher_from_student<T: Scalar>(student: &SegmentationModel<T>) -> TeacherModel<T> {
    TeacherModel(student.clone())
}

/// `teacher = alpha * teacher + (1 - alpha) * student` for every parameter.
/// Normalization statistics are copied from the student.
pub fn ema_update<T: Scalar>(teacher: &mut TeacherModel<T>, student: &SegmentationModel<T>, config: &EmaConfig) -> Result<()> {
    config.validate()?;
    let (only_teacher, only_student) = teacher.0.params.name_difference(&student.params);
    if !only_teacher.is_empty() || !only_student.is_empty() {
        return Err(Error::ParameterMismatch { only_teacher, only_student });
    }
    for (name, t) in teacher.0.params.iter() {
        if t.shape() != student.params.get(name)?.shape() {
            return Err(Error::Shape(format!("ema: parameter {name} differs in shape")));
        }
    }
    let a = T::of(config.alpha);
    let b = T::of(1.0 - config.alpha);
    for (name, t) in teacher.0.params.iter_mut() {
        let s = student.params.get(name)?;
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    teacher.0.buffers = student.buffers.clone();
    Ok(())
}

/// The built-in small encoder with its decode head.
pub fn tiny_backbone<T: Scalar>(shape: ShapeSpec, config: &ModelConfig, seed: u64) -> Result<SegmentationModel<T>> {
    let config = ModelConfig {
        backbone: "tiny".into(),
        ..config.clone()
    };
    SegmentationModel::new(shape, config, seed)
}
