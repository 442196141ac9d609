use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::{batch_images, Image};

use super::params::{apply_bn_updates, Bound, Init, ParamStore, Session, NORM_EPS};
use super::SegmentationModel;

/// Projection and prediction MLPs on top of the student's pooled last-stage
/// features. The heads own no backbone weights: every forward takes the
/// student and reads its parameters, so both branches train one encoder.
#[derive(Clone, Debug)]
pub struct ContrastiveHeads<T: Scalar> {
    in_dim: usize,
    proj_dim: usize,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

impl<T: Scalar> ContrastiveHeads<T> {
    pub fn new(student: &SegmentationModel<T>, seed: u64) -> Self {
        let cfg = student.config();
        let in_dim = student.backbone_widths()[3];
        let (hid, d, ph) = (cfg.proj_hidden, cfg.proj_dim, cfg.pred_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for (i, (dout, din)) in [(hid, in_dim), (hid, hid), (d, hid)].into_iter().enumerate() {
            init.linear(&mut params, &format!("proj.fc{}", i + 1), dout, din, false);
            Init::norm(&mut params, &format!("proj.bn{}", i + 1), dout);
            Init::bn_buffers(&mut buffers, &format!("proj.bn{}", i + 1), dout);
        }
        init.linear(&mut params, "pred.fc1", ph, d, false);
        Init::norm(&mut params, "pred.bn1", ph);
        Init::bn_buffers(&mut buffers, "pred.bn1", ph);
        init.linear(&mut params, "pred.fc2", d, ph, true);
        Self {
            in_dim,
            proj_dim: d,
            params,
            buffers,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Replaces the prediction head by one computing the identity in
    /// evaluation mode: hidden width `2d`, `relu(z) - relu(-z) = z`.
    pub fn set_identity_prediction(&mut self) {
        let d = self.proj_dim;
        let eye = |r: usize, c: usize| if r == c { T::one() } else { T::zero() };
        let w1 = Tensor::from_fn(&[2 * d, d], |i| {
            let (r, c) = (i / d, i % d);
            if r < d {
                eye(r, c)
            } else {
                -eye(r - d, c)
            }
        });
        let w2 = Tensor::from_fn(&[d, 2 * d], |i| {
            let (r, c) = (i / (2 * d), i % (2 * d));
            if c < d {
                eye(r, c)
            } else {
                -eye(r, c - d)
            }
        });
        self.params.insert("pred.fc1.weight", w1);
        self.params.insert("pred.bn1.weight", Tensor::full(&[2 * d], T::one()));
        self.params.insert("pred.bn1.bias", Tensor::zeros(&[2 * d]));
        self.params.insert("pred.fc2.weight", w2);
        self.params.insert("pred.fc2.bias", Tensor::zeros(&[d]));
        self.buffers.insert("pred.bn1.running_mean", Tensor::zeros(&[2 * d]));
        self.buffers
            .insert("pred.bn1.running_var", Tensor::full(&[2 * d], T::one() - T::of(NORM_EPS)));
    }

    pub fn bind(&self, s: &mut Session<T>, trainable: bool) -> Bound {
        Bound::bind(&mut s.graph, &self.params, trainable)
    }

    /// `(z, p)` for a batch of views `[N, C, H, W]`, each `[N, d]`.
    pub fn embed(
        &self,
        s: &mut Session<T>,
        heads: &Bound,
        student: &SegmentationModel<T>,
        student_vars: &Bound,
        views: Var,
    ) -> Result<(Var, Var)> {
        let feats = student.features(s, student_vars, views)?;
        let mut h = s.graph.global_avg_pool(feats[3])?;
        for i in 1..=3 {
            h = s.linear(heads, &format!("proj.fc{i}"), h, false)?;
            h = s.batch_norm(heads, &self.buffers, &format!("proj.bn{i}"), h)?;
            if i < 3 {
                h = s.graph.relu(h);
            }
        }
        let z = h;
        let q = s.linear(heads, "pred.fc1", z, false)?;
        let q = s.batch_norm(heads, &self.buffers, "pred.bn1", q)?;
        let q = s.graph.relu(q);
        let p = s.linear(heads, "pred.fc2", q, true)?;
        Ok((z, p))
    }

    /// Evaluation-mode `(z, p)` for one view.
    pub fn forward_contrastive(&self, student: &SegmentationModel<T>, view: &Image<T>) -> Result<(Vec<T>, Vec<T>)> {
        let sh = student.shape();
        if view.channels != sh.channels || view.height != sh.height || view.width != sh.width {
            return Err(Error::Shape(format!(
                "view is {}x{}x{}, expected {}x{}x{}",
                view.channels, view.height, view.width, sh.channels, sh.height, sh.width
            )));
        }
        let mut s = Session::new(false);
        let sb = student.bind(&mut s, false);
        let hb = self.bind(&mut s, false);
        let x = s.graph.constant(batch_images(&[view])?);
        let (z, p) = self.embed(&mut s, &hb, student, &sb, x)?;
        Ok((s.graph.value(z).data().to_vec(), s.graph.value(p).data().to_vec()))
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) {
        apply_bn_updates(&mut self.buffers, updates);
    }
}
