//! Training loop, run artifacts and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::augment::{class_mix, make_views, MixResult};
use crate::autograd::Var;
use crate::checkpoint::{meta_template, Checkpoint, ModelParts};
use crate::config::{resolve_datasets, Datasets, TrainConfig};
use crate::data::{Dataset, DomainCycler, LoadMode};
use crate::error::{Error, Result};
use crate::loss::{contrastive_loss_graph, pixel_ce_graph, total_loss, LossBreakdown, PseudoLabelBundle};
use crate::metrics::{summarize, summarize_named, ConfusionMatrix, MetricReport};
use crate::model::{ema_update, init_teacher_from_student, ContrastiveHeads, ParamStore, SegmentationModel, Session, TeacherModel};
use crate::optim::{AdamW, ParamGroup};
use crate::scalar::Scalar;
use crate::schedule::lr_factor;
use crate::seed::{derive_seed, rng_for, tag};
use crate::tensor::Tensor;
use crate::types::{batch_images, DomainSample, Image, LabelMap, ShapeSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const METRICS_HEADER: &str = "step,L_S,L_T,L_CLR,L_total,q_mean,lr";

const STUDENT: &str = "student.";
const HEADS: &str = "heads.";
const TEACHER: &str = "teacher.";

/// Student, teacher, heads, optimizer and counters. Every random draw of a
/// step derives from `(seed, step)`, so this is the complete resume state.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub student: SegmentationModel<T>,
    pub teacher: TeacherModel<T>,
    pub heads: ContrastiveHeads<T>,
    pub optimizer: AdamW<T>,
    /// Completed updates.
    pub step: u64,
    pub seed: u64,
    /// Best evaluation mIoU and the step it was reached at.
    pub best: Option<(f64, u64)>,
}

/// One metrics row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub losses: LossBreakdown,
    pub q_mean: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, l.source, l.target, l.contrastive, l.total, self.q_mean, self.lr
        )
    }
}

fn build_optimizer<T: Scalar>(
    cfg: &TrainConfig,
    student: &SegmentationModel<T>,
    heads: &ContrastiveHeads<T>,
    teacher: &TeacherModel<T>,
) -> Result<AdamW<T>> {
    let (mut backbone, mut rest) = (Vec::new(), Vec::new());
    for name in student.params.names() {
        let q = format!("{STUDENT}{name}");
        if name.starts_with("backbone.") {
            backbone.push(q);
        } else {
            rest.push(q);
        }
    }
    rest.extend(heads.params.names().map(|n| format!("{HEADS}{n}")));
    let opt = AdamW::new(
        &cfg.optim,
        vec![
            ParamGroup { name: "backbone".into(), lr: cfg.optim.lr_backbone, params: backbone },
            ParamGroup { name: "heads".into(), lr: cfg.optim.lr_heads, params: rest },
        ],
    )?;
    if let Some(n) = teacher.params.names().map(|n| format!("{TEACHER}{n}")).find(|n| opt.manages(n)) {
        return Err(Error::Config(format!("teacher parameter {n} is managed by the optimizer")));
    }
    for name in opt.param_names() {
        let want = if name.contains("backbone.") { cfg.optim.lr_backbone } else { cfg.optim.lr_heads };
        if opt.base_lr(name)? != want {
            return Err(Error::Config(format!("parameter {name} is in the wrong learning rate group")));
        }
    }
    Ok(opt)
}

fn replace_store<T: Scalar>(dst: &mut ParamStore<T>, src: ParamStore<T>, what: &str) -> Result<()> {
    let (only_src, only_dst) = src.name_difference(dst);
    if !only_src.is_empty() || !only_dst.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{what}: stored tensors {only_src:?} / expected tensors {only_dst:?} do not line up"
        )));
    }
    for (name, t) in src.iter() {
        if t.shape() != dst.get(name)?.shape() {
            return Err(Error::Checkpoint(format!("{what}: tensor {name} has shape {:?}", t.shape())));
        }
    }
    *dst = src;
    Ok(())
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig, shape: ShapeSpec) -> Result<Self> {
        let seed = cfg.run.seed;
        let student = SegmentationModel::new(shape, cfg.model.clone(), derive_seed(seed, &[tag("student")]))?;
        let teacher = init_teacher_from_student(&student);
        let heads = ContrastiveHeads::new(&student, derive_seed(seed, &[tag("heads")]));
        let optimizer = build_optimizer(cfg, &student, &heads, &teacher)?;
        Ok(Self { student, teacher, heads, optimizer, step: 0, seed, best: None })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, class_names: Vec<String>) -> Checkpoint<T> {
        let mut meta = meta_template::<T>(self.student.config().clone(), *self.student.shape(), class_names);
        meta.config_hash = cfg.hash();
        meta.step = self.step;
        meta.seed = self.seed;
        meta.best_miou = self.best.map(|b| b.0);
        meta.best_step = self.best.map(|b| b.1);
        let parts = |params: &ParamStore<T>, buffers: &ParamStore<T>| ModelParts { params: params.clone(), buffers: buffers.clone() };
        Checkpoint {
            meta,
            student: parts(&self.student.params, &self.student.buffers),
            teacher: parts(&self.teacher.params, &self.teacher.buffers),
            heads: parts(&self.heads.params, &self.heads.buffers),
            optimizer: self.optimizer.state().clone(),
        }
    }

    /// Restores a state written by [`TrainState::to_checkpoint`] under the same config.
    pub fn from_checkpoint(cfg: &TrainConfig, ck: Checkpoint<T>) -> Result<Self> {
        if ck.meta.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written by config {} but the current config is {}",
                ck.meta.config_hash,
                cfg.hash()
            )));
        }
        let mut state = Self::new(cfg, ck.meta.shape)?;
        replace_store(&mut state.student.params, ck.student.params, "student")?;
        replace_store(&mut state.student.buffers, ck.student.buffers, "student")?;
        state.teacher = TeacherModel::from_parts(&state.student, ck.teacher.params, ck.teacher.buffers)?;
        replace_store(&mut state.heads.params, ck.heads.params, "heads")?;
        replace_store(&mut state.heads.buffers, ck.heads.buffers, "heads")?;
        state.optimizer.set_state(ck.optimizer)?;
        state.step = ck.meta.step;
        state.seed = ck.meta.seed;
        state.best = ck.meta.best_miou.zip(ck.meta.best_step);
        Ok(state)
    }
}

fn add_weighted<T: Scalar>(s: &mut Session<T>, acc: Var, term: Var, weight: f64) -> Result<Var> {
    let scaled = s.graph.scale(term, T::of(weight));
    s.graph.add(acc, scaled)
}

fn scalar_value<T: Scalar>(s: &Session<T>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| s.graph.value(v).item().to_f64_lossy())
}

/// One update of student and heads followed by the teacher EMA. Nothing is
/// modified when the loss is not finite.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    source: &[DomainSample<T>],
    target: &[DomainSample<T>],
) -> Result<StepLog> {
    if source.len() != cfg.run.batch_source || target.len() != cfg.run.batch_target {
        return Err(Error::Shape(format!(
            "batches of {}+{} samples, configured {}+{}",
            source.len(),
            target.len(),
            cfg.run.batch_source,
            cfg.run.batch_target
        )));
    }
    let step = state.step;
    let seed = state.seed;
    let weights = cfg.loss.weights();
    let (use_target, use_clr) = (weights.beta > 0.0, weights.gamma > 0.0);
    let mut s = Session::<T>::new(true);
    let sb = state.student.bind(&mut s, true);

    let mut src_targets = Vec::new();
    for d in source {
        let label = d.label.as_ref().ok_or_else(|| Error::Unlabeled(d.id.clone()))?;
        src_targets.extend_from_slice(&label.data);
    }
    let src_images: Vec<&Image<T>> = source.iter().map(|d| &d.image).collect();
    let xs = s.graph.constant(batch_images(&src_images)?);
    let src_logits = state.student.logits(&mut s, &sb, xs)?;
    let ones = vec![T::one(); src_targets.len()];
    let l_s = pixel_ce_graph(&mut s.graph, src_logits, &src_targets, &ones)?;

    let mut q_mean = 0.0;
    let mut l_t = None;
    if use_target {
        let clean: Vec<&Image<T>> = target.iter().map(|d| &d.image).collect();
        let teacher_probs = state.teacher.predict(&clean)?;
        let mut mixed = Vec::with_capacity(target.len());
        let mut mixed_targets = Vec::new();
        let mut pixel_w = Vec::new();
        for (i, probs) in teacher_probs.iter().enumerate() {
            let bundle = PseudoLabelBundle::from_teacher(probs, T::of(cfg.loss.tau))?;
            q_mean += bundle.quality.to_f64_lossy() / target.len() as f64;
            let mut rng = rng_for(seed, &[tag("mix"), step, i as u64]);
            let mix = if cfg.augment.st.class_mix {
                class_mix(&source[i % source.len()], &target[i].image, &bundle.labels, &mut rng)?
            } else {
                let n = bundle.labels.data.len();
                MixResult { image: target[i].image.clone(), label: bundle.labels.clone(), mask: vec![false; n], classes: Vec::new() }
            };
            mixed.push(cfg.augment.st.apply(&mix.image, &mut rng)?);
            pixel_w.extend(mix.mask.iter().map(|&m| if m { T::one() } else { bundle.quality }));
            mixed_targets.extend_from_slice(&mix.label.data);
        }
        let refs: Vec<&Image<T>> = mixed.iter().collect();
        let xm = s.graph.constant(batch_images(&refs)?);
        let mixed_logits = state.student.logits(&mut s, &sb, xm)?;
        l_t = pixel_ce_graph(&mut s.graph, mixed_logits, &mixed_targets, &pixel_w)?;
    }

    let mut l_clr = None;
    let hb = use_clr.then(|| state.heads.bind(&mut s, true));
    if let Some(hb) = &hb {
        let (mut v1, mut v2) = (Vec::with_capacity(target.len()), Vec::with_capacity(target.len()));
        for (i, d) in target.iter().enumerate() {
            let mut rng = rng_for(seed, &[tag("views"), step, i as u64]);
            let pair = make_views(&d.image, &cfg.augment.sim, &mut rng)?;
            v1.push(pair.view1);
            v2.push(pair.view2);
        }
        let x1 = s.graph.constant(batch_images(&v1.iter().collect::<Vec<_>>())?);
        let x2 = s.graph.constant(batch_images(&v2.iter().collect::<Vec<_>>())?);
        let (z1, p1) = state.heads.embed(&mut s, hb, &state.student, &sb, x1)?;
        let (z2, p2) = state.heads.embed(&mut s, hb, &state.student, &sb, x2)?;
        l_clr = Some(contrastive_loss_graph(&mut s.graph, p1, z1, p2, z2)?);
    }

    let losses = total_loss(scalar_value(&s, l_s), scalar_value(&s, l_t), scalar_value(&s, l_clr), weights)?;
    let mut total = l_s;
    for (term, w) in [(l_t, weights.beta), (l_clr, weights.gamma)] {
        if let Some(term) = term {
            total = Some(match total {
                Some(acc) => add_weighted(&mut s, acc, term, w)?,
                None => s.graph.scale(term, T::of(w)),
            });
        }
    }
    let total_value = scalar_value(&s, total);
    if !total_value.is_finite() {
        return Err(Error::NonFinite("L_total".into()));
    }

    let factor = lr_factor(step, &cfg.schedule);
    let mut updates: Vec<(bool, String, Tensor<T>)> = Vec::new();
    if let Some(total) = total {
        let grads = s.graph.backward(total)?;
        for (name, v) in sb.iter() {
            if let Some(g) = grads.get(v) {
                updates.push((true, name.to_string(), g.clone()));
            }
        }
        if let Some(hb) = &hb {
            for (name, v) in hb.iter() {
                if let Some(g) = grads.get(v) {
                    updates.push((false, name.to_string(), g.clone()));
                }
            }
        }
    }
    if let Some((_, name, _)) = updates.iter().find(|(_, _, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    for (is_student, name, g) in &updates {
        let (store, prefix) = if *is_student {
            (&mut state.student.params, STUDENT)
        } else {
            (&mut state.heads.params, HEADS)
        };
        state.optimizer.update(&format!("{prefix}{name}"), store.get_mut(name)?, g, factor)?;
    }
    let bn = s.take_bn_updates();
    state.student.apply_bn_updates(&bn);
    state.heads.apply_bn_updates(&bn);
    ema_update(&mut state.teacher, &state.student, &cfg.ema())?;
    state.step += 1;
    Ok(StepLog { step, losses, q_mean, lr: cfg.optim.lr_backbone * factor })
}

/// A training run bound to its datasets and per-domain cyclers.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub data: Datasets,
    pub state: TrainState<T>,
    source_cycle: DomainCycler,
    target_cycle: DomainCycler,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, data: Datasets) -> Result<Self> {
        config.validate()?;
        let shape = check_datasets(&data)?;
        let state = TrainState::new(&config, shape)?;
        Ok(Self::assemble(config, data, state))
    }

    pub fn resume(config: TrainConfig, data: Datasets, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let shape = check_datasets(&data)?;
        let ck = Checkpoint::load(checkpoint)?;
        if ck.meta.shape != shape {
            return Err(Error::Checkpoint(format!("checkpoint shape {:?} differs from data shape {shape:?}", ck.meta.shape)));
        }
        let state = TrainState::from_checkpoint(&config, ck)?;
        Ok(Self::assemble(config, data, state))
    }

    fn assemble(config: TrainConfig, data: Datasets, state: TrainState<T>) -> Self {
        let seed = config.run.seed;
        let source_cycle = DomainCycler::new(data.source.len(), derive_seed(seed, &[tag("cycle"), tag("source")]));
        let target_cycle = DomainCycler::new(data.target.len(), derive_seed(seed, &[tag("cycle"), tag("target")]));
        Self { config, data, state, source_cycle, target_cycle }
    }

    /// Manifest indices of the source and target batches for `step`.
    pub fn batch_indices(&mut self, step: u64) -> (Vec<usize>, Vec<usize>) {
        (
            self.source_cycle.batch(step, self.config.run.batch_source),
            self.target_cycle.batch(step, self.config.run.batch_target),
        )
    }

    pub fn load_batches(&mut self, step: u64) -> Result<(Vec<DomainSample<T>>, Vec<DomainSample<T>>)> {
        let (si, ti) = self.batch_indices(step);
        let src = si.iter().map(|&i| self.data.source.load_sample(i, LoadMode::Train)).collect::<Result<_>>()?;
        let tgt = ti.iter().map(|&i| self.data.target.load_sample(i, LoadMode::Train)).collect::<Result<_>>()?;
        Ok((src, tgt))
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let (src, tgt) = self.load_batches(self.state.step)?;
        train_step(&mut self.state, &self.config, &src, &tgt)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.data.source.manifest.class_names.clone()
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        self.state.to_checkpoint(&self.config, self.class_names())
    }
}

fn check_datasets(data: &Datasets) -> Result<ShapeSpec> {
    let shape = data.source.manifest.shape;
    if data.target.manifest.shape != shape {
        return Err(Error::Shape(format!(
            "source shape {shape:?} differs from target shape {:?}",
            data.target.manifest.shape
        )));
    }
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Config("training needs non-empty source and target train splits".into()));
    }
    if let Some(e) = &data.eval {
        if e.manifest.shape.num_classes != shape.num_classes || e.manifest.shape.channels != shape.channels {
            return Err(Error::Shape("evaluation manifest does not match the training shape".into()));
        }
    }
    Ok(shape)
}

/// Student evaluation over every tile of a labeled dataset.
pub fn evaluate<T: Scalar>(model: &SegmentationModel<T>, ds: &Dataset, batch: usize) -> Result<MetricReport> {
    let k = model.shape().num_classes;
    if ds.manifest.shape.num_classes != k {
        return Err(Error::Shape(format!(
            "manifest has {} classes, model predicts {k}",
            ds.manifest.shape.num_classes
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    let batch = batch.max(1);
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch).min(ds.len());
        let samples: Vec<DomainSample<T>> = (start..end).map(|i| ds.load_sample(i, LoadMode::Eval)).collect::<Result<_>>()?;
        let labels: Vec<&LabelMap> = samples
            .iter()
            .map(|d| d.label.as_ref().ok_or_else(|| Error::Unlabeled(d.id.clone())))
            .collect::<Result<_>>()?;
        let images: Vec<&Image<T>> = samples.iter().map(|d| &d.image).collect();
        for (probs, label) in model.predict(&images)?.iter().zip(labels) {
            cm.update(&probs.argmax(), label)?;
        }
        start = end;
    }
    let names = &ds.manifest.class_names;
    Ok(if names.len() == k { summarize_named(&cm, names.clone()) } else { summarize(&cm) })
}

/// Loads the student of a checkpoint directory.
pub fn load_student<T: Scalar>(dir: &Path) -> Result<SegmentationModel<T>> {
    let ck = Checkpoint::<T>::load(dir)?;
    let mut model = SegmentationModel::new(ck.meta.shape, ck.meta.arch.clone(), 0)?;
    replace_store(&mut model.params, ck.student.params, "student")?;
    replace_store(&mut model.buffers, ck.student.buffers, "student")?;
    Ok(model)
}

pub fn evaluate_checkpoint<T: Scalar>(dir: &Path, ds: &Dataset, batch: usize) -> Result<MetricReport> {
    evaluate(&load_student::<T>(dir)?, ds, batch)
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Pause once this step is reached: only `latest` is written.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub steps: u64,
    pub final_report: Option<MetricReport>,
    pub best: Option<(f64, u64)>,
    pub artifacts: Vec<PathBuf>,
}

pub fn checkpoint_dir(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(name)
}

/// Keeps the header and the rows whose leading step field is below `keep_below`.
fn truncate_log(path: &Path, header: Option<&str>, keep_below: u64, step_of: impl Fn(&str) -> Option<u64>) -> Result<()> {
    let mut kept = Vec::new();
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if Some(line.as_str()) == header {
                continue;
            }
            if step_of(&line).is_some_and(|s| s < keep_below) {
                kept.push(line);
            }
        }
    }
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(h);
        text.push('\n');
    }
    for l in kept {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn csv_step(line: &str) -> Option<u64> {
    line.split(',').next()?.parse().ok()
}

fn event_step(line: &str) -> Option<u64> {
    line.split_whitespace().next()?.strip_prefix("step=")?.parse().ok()
}

fn run_eval<T: Scalar>(trainer: &mut Trainer<T>, out: &Path, artifacts: &mut Vec<PathBuf>) -> Result<Option<MetricReport>> {
    let Some(ds) = &trainer.data.eval else {
        return Ok(None);
    };
    let n = trainer.state.step;
    let report = evaluate(&trainer.state.student, ds, trainer.config.run.eval_batch)?;
    let path = out.join("reports").join(format!("eval_step{n:06}.json"));
    fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(out, e))?;
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    artifacts.push(path);
    let (miou, mf1) = (report.mean_iou.unwrap_or(0.0), report.mean_f1.unwrap_or(0.0));
    append_line(&out.join(EVENTS_FILE), &format!("step={n} miou={miou:.4} mf1={mf1:.4}"))?;
    log::info!("step {n}: mIoU {:.2} mF1 {:.2}", 100.0 * miou, 100.0 * mf1);
    if trainer.state.best.map_or(true, |(b, _)| miou > b) {
        trainer.state.best = Some((miou, n));
        let dir = checkpoint_dir(out, "best");
        trainer.checkpoint().save(&dir)?;
    }
    Ok(Some(report))
}

/// Runs the configured number of steps, writing `metrics.csv`, `events.log`,
/// `reports/` and `checkpoints/{latest,best,final}` under `opts.out_dir`.
pub fn fit<T: Scalar>(config: TrainConfig, data: Datasets, opts: &FitOptions) -> Result<FitSummary> {
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match &opts.resume {
        Some(dir) => Trainer::<T>::resume(config, data, dir)?,
        None => Trainer::<T>::new(config, data)?,
    };
    let start = trainer.state.step;
    let metrics = out.join(METRICS_FILE);
    let events = out.join(EVENTS_FILE);
    truncate_log(&metrics, Some(METRICS_HEADER), start, csv_step)?;
    truncate_log(&events, None, start + 1, event_step)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, trainer.config.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    let mut artifacts = vec![metrics.clone(), events.clone(), cfg_path];

    let total = trainer.config.schedule.total_iters;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let (eval_every, ckpt_every) = (trainer.config.run.eval_every, trainer.config.run.checkpoint_every);
    let mut csv = OpenOptions::new().append(true).open(&metrics).map_err(|e| Error::io(&metrics, e))?;
    while trainer.state.step < end {
        let log = match trainer.step() {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                let dir = checkpoint_dir(out, "diagnostics");
                trainer.checkpoint().save(&dir)?;
                log::error!("non-finite loss at step {}; state saved to {}", trainer.state.step, dir.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", log.csv_row()).map_err(|e| Error::io(&metrics, e))?;
        let n = trainer.state.step;
        if n % 50 == 0 {
            log::info!("step {n}/{total}: L_total {:.4} q {:.3}", log.losses.total, log.q_mean);
        }
        if eval_every > 0 && n % eval_every == 0 && n < total {
            run_eval(&mut trainer, out, &mut artifacts)?;
        }
        if ckpt_every > 0 && n % ckpt_every == 0 && n < total {
            trainer.checkpoint().save(&checkpoint_dir(out, "latest"))?;
        }
    }
    csv.flush().map_err(|e| Error::io(&metrics, e))?;
    if end < total {
        let dir = checkpoint_dir(out, "latest");
        trainer.checkpoint().save(&dir)?;
        artifacts.push(dir);
        return Ok(FitSummary { steps: trainer.state.step, final_report: None, best: trainer.state.best, artifacts });
    }
    let final_report = if total > start || start == 0 { run_eval(&mut trainer, out, &mut artifacts)? } else { None };
    let ck = trainer.checkpoint();
    for name in ["final", "latest"] {
        let dir = checkpoint_dir(out, name);
        ck.save(&dir)?;
        artifacts.push(dir);
    }
    if trainer.state.best.is_some() {
        artifacts.push(checkpoint_dir(out, "best"));
    }
    Ok(FitSummary { steps: trainer.state.step, final_report, best: trainer.state.best, artifacts })
}

/// Resolves the datasets named by the config and runs [`fit`].
pub fn fit_config<T: Scalar>(config: TrainConfig, opts: &FitOptions) -> Result<FitSummary> {
    config.validate()?;
    let data = resolve_datasets(&config.data)?;
    fit::<T>(config, data, opts)
}
