//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines always reach stdout in order.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use udaseg::autograd::Graph;
use udaseg::config::{resolve_datasets, Datasets, TrainConfig};
use udaseg::data::{build_manifest, tile_image, DomainCycler, LoadMode, ManifestMeta, ParentImage, SplitRule, SynthConfig, TilingSpec};
use udaseg::loss::{
    contrastive_loss, contrastive_loss_graph, neg_cosine, pixel_ce_graph, pseudo_labels, quality, source_ce, target_loss,
    PseudoLabelBundle, ViewEmbeddings,
};
use udaseg::metrics::{summarize, ConfusionMatrix};
use udaseg::model::{ema_update, init_teacher_from_student, EmaConfig, ModelConfig, SegmentationModel, Session};
use udaseg::optim::{AdamW, ParamGroup};
use udaseg::schedule::lr_factor;
use udaseg::seed::{derive_seed, tag};
use udaseg::tensor::Tensor;
use udaseg::trainer::{evaluate, fit, FitOptions, Trainer, METRICS_FILE};
use udaseg::types::{batch_images, DomainTag, Image, LabelMap, ProbabilityField, ShapeSpec, IGNORE_LABEL};

type Outcome = (bool, String);

fn report(id: usize, name: &str, started: Instant, outcome: Outcome) -> bool {
    let (pass, detail) = outcome;
    println!(
        "{} criterion {id}: {name}: {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    pass
}

/// Synthetic benchmark: seed 0, 64x64 tiles, 4 classes, 400 images per domain.
fn benchmark_config(seed: u64, iters: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.synthetic = Some(SynthConfig::default());
    cfg.augment.sim.crop_size = [64, 64];
    cfg.schedule.total_iters = iters;
    // Warmup keeps its share of the published 40k-iteration schedule.
    cfg.schedule.warmup_iters = iters * 1500 / 40_000;
    cfg.run.seed = seed;
    cfg
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, quantize: bool) -> ProbabilityField<f64> {
    let logits: Vec<f64> = (0..c * h * w)
        .map(|_| {
            let v: f64 = rng.gen_range(-4.0..4.0);
            if quantize {
                v.round()
            } else {
                v
            }
        })
        .collect();
    ProbabilityField::from_logits(c, h, w, &logits).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, ignore: bool) -> LabelMap {
    let data = (0..h * w)
        .map(|_| if ignore && rng.gen_bool(0.1) { IGNORE_LABEL } else { rng.gen_range(0..c as u8) })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

fn at(p: &ProbabilityField<f64>, c: usize, j: usize) -> f64 {
    p.values[c * p.height * p.width + j]
}

fn oracle_ce(p: &ProbabilityField<f64>, labels: &LabelMap) -> f64 {
    let mut terms = Vec::new();
    for (j, &t) in labels.data.iter().enumerate() {
        if t != IGNORE_LABEL {
            terms.push(-at(p, t as usize, j).max(1e-12).ln());
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

fn oracle_argmax(p: &ProbabilityField<f64>, j: usize) -> u8 {
    let mut best = 0;
    for c in 1..p.num_classes {
        if at(p, c, j) > at(p, best, j) {
            best = c;
        }
    }
    best as u8
}

fn oracle_neg_cosine(p: &[f64], z: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    -dot / (np * nz)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut cfg = benchmark_config(7, 50);
    cfg.loss.beta = 0.0;
    cfg.loss.gamma = 0.0;
    let data = resolve_datasets(&cfg.data).unwrap();
    let shape = data.source.manifest.shape;
    let seed = cfg.run.seed;
    let mut trainer = Trainer::<f32>::new(cfg.clone(), data.clone()).unwrap();

    // A plain supervised loop over the source domain.
    let mut model = SegmentationModel::<f32>::new(shape, cfg.model.clone(), derive_seed(seed, &[tag("student")])).unwrap();
    let (backbone, rest): (Vec<String>, Vec<String>) =
        model.params.names().map(|n| format!("student.{n}")).partition(|n| n.starts_with("student.backbone."));
    let mut opt = AdamW::new(
        &cfg.optim,
        vec![
            ParamGroup { name: "backbone".into(), lr: cfg.optim.lr_backbone, params: backbone },
            ParamGroup { name: "heads".into(), lr: cfg.optim.lr_heads, params: rest },
        ],
    )
    .unwrap();
    let mut cycler = DomainCycler::new(data.source.len(), derive_seed(seed, &[tag("cycle"), tag("source")]));
    for step in 0..50u64 {
        let samples: Vec<_> = cycler
            .batch(step, cfg.run.batch_source)
            .into_iter()
            .map(|i| data.source.load_sample::<f32>(i, LoadMode::Train).unwrap())
            .collect();
        let mut s = Session::<f32>::new(true);
        let b = model.bind(&mut s, true);
        let images: Vec<&Image<f32>> = samples.iter().map(|d| &d.image).collect();
        let x = s.graph.constant(batch_images(&images).unwrap());
        let logits = model.logits(&mut s, &b, x).unwrap();
        let targets: Vec<u8> = samples.iter().flat_map(|d| d.label.as_ref().unwrap().data.clone()).collect();
        let loss = pixel_ce_graph(&mut s.graph, logits, &targets, &vec![1.0; targets.len()]).unwrap().unwrap();
        let grads = s.graph.backward(loss).unwrap();
        let factor = lr_factor(step, &cfg.schedule);
        for (name, v) in b.iter() {
            if let Some(g) = grads.get(v) {
                opt.update(&format!("student.{name}"), model.params.get_mut(name).unwrap(), g, factor).unwrap();
            }
        }
        model.apply_bn_updates(&s.take_bn_updates());

        trainer.step().unwrap();
        let st = &trainer.state.student;
        if !st.params.bitwise_eq(&model.params) || !st.buffers.bitwise_eq(&model.buffers) {
            return (false, format!("trajectories diverge at step {}", step + 1));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (secs < 120.0, format!("50 steps bitwise identical to a source-only loop in {secs:.1}s (limit 120s)"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut exact_fail) = (0.0f64, Vec::new());
    let n = 200;
    for i in 0..n {
        let (c, h, w) = (rng.gen_range(2..6), rng.gen_range(1..7), rng.gen_range(1..7));
        let probs = random_probs(&mut rng, c, h, w, i % 2 == 0);
        let labels = random_labels(&mut rng, c, h, w, true);
        worst = worst.max((source_ce(&probs, &labels).unwrap().value - oracle_ce(&probs, &labels)).abs());

        let pl = pseudo_labels(&probs);
        if (0..h * w).any(|j| pl.data[j] != oracle_argmax(&probs, j)) {
            exact_fail.push(format!("pseudo_labels #{i}"));
        }
        let tau: f64 = if i % 3 == 0 { 0.999 } else { rng.gen_range(0.3..0.95) };
        let confident = (0..h * w).filter(|&j| (0..c).map(|k| at(&probs, k, j)).fold(f64::MIN, f64::max) > tau).count();
        let q = quality(&probs, tau);
        if q != confident as f64 / (h * w) as f64 {
            exact_fail.push(format!("quality #{i}"));
        }

        let student = random_probs(&mut rng, c, h, w, false);
        let bundle = PseudoLabelBundle::from_teacher(&probs, tau).unwrap();
        let hard = LabelMap::new(h, w, (0..h * w).map(|j| oracle_argmax(&probs, j)).collect()).unwrap();
        let want = confident as f64 / (h * w) as f64 * oracle_ce(&student, &hard);
        worst = worst.max((target_loss(&student, &bundle).unwrap() - want).abs());

        let d = rng.gen_range(1..33);
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect() };
        let emb = ViewEmbeddings { p1: vec(&mut rng), p2: vec(&mut rng), z1: vec(&mut rng), z2: vec(&mut rng) };
        worst = worst.max((neg_cosine(&emb.p1, &emb.z1).unwrap() - oracle_neg_cosine(&emb.p1, &emb.z1)).abs());
        let want = 0.5 * oracle_neg_cosine(&emb.p1, &emb.z2) + 0.5 * oracle_neg_cosine(&emb.p2, &emb.z1);
        worst = worst.max((contrastive_loss(&emb).unwrap() - want).abs());
    }
    let pass = worst <= 1e-6 && exact_fail.is_empty();
    (pass, format!("{n} instances per function, max abs error {worst:.2e} (limit 1e-6), exact mismatches {:?}", exact_fail))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sg_leak = 0.0f64;
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let (n, d) = (rng.gen_range(1..4), rng.gen_range(2..17));
        let t = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[n, d], |_| rng.gen_range(-2.0f64..2.0));
        let (p1v, z1v, p2v, z2v) = (t(&mut rng), t(&mut rng), t(&mut rng), t(&mut rng));

        let mut g = Graph::<f64>::new();
        let (p1, z1, p2, z2) = (g.param(p1v.clone()), g.param(z1v.clone()), g.param(p2v.clone()), g.param(z2v.clone()));
        let loss = contrastive_loss_graph(&mut g, p1, z1, p2, z2).unwrap();
        let grads = g.backward(loss).unwrap();
        for z in [z1, z2] {
            if let Some(gz) = grads.get(z) {
                sg_leak = sg_leak.max(gz.data().iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }

        // D(p, z) for one row, against central differences in p.
        let p: Vec<f64> = p1v.outer(0).to_vec();
        let z: Vec<f64> = z1v.outer(0).to_vec();
        let mut g = Graph::<f64>::new();
        let pv = g.param(Tensor::from_vec(&[1, d], p.clone()).unwrap());
        let zv = g.param(Tensor::from_vec(&[1, d], z.clone()).unwrap());
        let zs = g.detach(zv);
        let dv = g.neg_cosine(pv, zs).unwrap();
        let loss = g.mean(dv);
        let analytic = g.backward(loss).unwrap().get(pv).unwrap().data().to_vec();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..d)
            .map(|k| {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[k] += h;
                b[k] -= h;
                (oracle_neg_cosine(&a, &z) - oracle_neg_cosine(&b, &z)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst_rel = worst_rel.max(diff / scale);
    }
    (
        sg_leak == 0.0 && worst_rel < 1e-4,
        format!("max |grad| through stop-gradient {sg_leak:e} (must be 0), worst relative FD error {worst_rel:.2e} over 100 pairs (limit 1e-4)"),
    )
}

fn criterion_4() -> Outcome {
    let shape = ShapeSpec::new(8, 8, 3, 3).unwrap();
    let cfg = ModelConfig { widths: [2, 3, 4, 5], decode_dim: 3, ..Default::default() };
    let w0 = SegmentationModel::<f64>::new(shape, cfg.clone(), 1).unwrap();
    let s = SegmentationModel::<f64>::new(shape, cfg, 2).unwrap();
    let mut worst = 0.0f64;
    let mut scalar_worst = 0.0f64;
    for alpha in [0.0, 0.5, 0.99, 1.0] {
        for steps in [1u32, 7, 50, 100] {
            let mut teacher = init_teacher_from_student(&w0);
            for _ in 0..steps {
                ema_update(&mut teacher, &s, &EmaConfig { alpha }).unwrap();
            }
            let a_t = f64::powi(alpha, steps as i32);
            for (name, t) in teacher.params.iter() {
                let (init, stud) = (w0.params.get(name).unwrap(), s.params.get(name).unwrap());
                for ((&v, &i0), &sv) in t.data().iter().zip(init.data()).zip(stud.data()) {
                    let err = (v - (a_t * i0 + (1.0 - a_t) * sv)).abs();
                    worst = worst.max(err);
                    if t.len() == 1 {
                        scalar_worst = scalar_worst.max(err);
                    }
                }
            }
        }
    }
    // A lone scalar parameter through the same update.
    for alpha in [0.0, 0.5, 0.99, 1.0] {
        let (w0s, ss) = (0.73f64, -1.9f64);
        let mut v = w0s;
        for step in 1..=100 {
            v = alpha * v + (1.0 - alpha) * ss;
            let a_t = f64::powi(alpha, step);
            scalar_worst = scalar_worst.max((v - (a_t * w0s + (1.0 - a_t) * ss)).abs());
        }
    }
    (
        worst <= 1e-10 && scalar_worst <= 1e-10,
        format!("alpha in {{0, 0.5, 0.99, 1}}, T <= 100: tensor max error {worst:.2e}, scalar max error {scalar_worst:.2e} (limit 1e-10)"),
    )
}

fn criterion_5() -> Outcome {
    let spec = TilingSpec::new(512, 512).unwrap();
    let per = tile_image(6000, 6000, &spec).unwrap().len();
    let parents: Vec<ParentImage> = (0..38).map(|i| ParentImage { id: format!("p{i:02}"), height: 6000, width: 6000 }).collect();
    let meta = ManifestMeta { domain: DomainTag::Source, channels: 3, class_names: vec!["a".into(), "b".into()], root: None };
    let total = build_manifest(&parents, &spec, &SplitRule::AllTrain, meta).unwrap().len();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..200 {
        let crop = rng.gen_range(1..40);
        let stride = rng.gen_range(1..50);
        let (h, w) = (rng.gen_range(crop..crop + 120), rng.gen_range(crop..crop + 120));
        let spec = TilingSpec::new(crop, stride).unwrap();
        let got = tile_image(h, w, &spec).unwrap();
        let mut want = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if r % stride == 0 && c % stride == 0 && r + crop <= h && c + crop <= w {
                    want.push((r, c));
                }
            }
        }
        mismatches += usize::from(got != want);
    }
    (
        per == 121 && total == 4598 && mismatches == 0,
        format!("{per} tiles per 6000x6000 parent, {total} for 38 parents (want 121, 4598); fuzz mismatches {mismatches}/200"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut mismatches, mut worst_identity) = (0, 0.0f64);
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(2..7), rng.gen_range(1..20), rng.gen_range(1..20));
        let pred = random_labels(&mut rng, c, h, w, false);
        let truth = random_labels(&mut rng, c, h, w, true);
        let mut cm = ConfusionMatrix::new(c);
        cm.update(&pred, &truth).unwrap();
        let r = summarize(&cm);
        for k in 0..c as u8 {
            let counted = |f: &dyn Fn(u8, u8) -> bool| {
                pred.data.iter().zip(&truth.data).filter(|(&p, &t)| t != IGNORE_LABEL && f(p, t)).count() as u64
            };
            let tp = counted(&|p, t| p == k && t == k);
            let fp = counted(&|p, t| p == k && t != k);
            let fn_ = counted(&|p, t| p != k && t == k);
            let iou = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            let f1 = (tp + fp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
            mismatches += usize::from(r.per_class_iou[k as usize] != iou || r.per_class_f1[k as usize] != f1);
            if let (Some(i), Some(f)) = (iou, r.per_class_f1[k as usize]) {
                worst_identity = worst_identity.max((f - 2.0 * i / (1.0 + i)).abs());
            }
        }
    }
    (
        mismatches == 0 && worst_identity <= 1e-9,
        format!("200 random label maps: {mismatches} per-class mismatches, max |F1 - 2IoU/(1+IoU)| {worst_identity:.2e} (limit 1e-9)"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    SourceOnly,
    SelfTraining,
    Full,
    ResizeFlip,
}

fn variant_config(v: Variant, seed: u64) -> TrainConfig {
    let mut cfg = benchmark_config(seed, 2000);
    match v {
        Variant::SourceOnly => {
            cfg.loss.beta = 0.0;
            cfg.loss.gamma = 0.0;
        }
        Variant::SelfTraining => cfg.loss.gamma = 0.0,
        Variant::Full => {}
        Variant::ResizeFlip => cfg.augment.sim = cfg.augment.sim.resize_flip_only(),
    }
    cfg
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Target-domain test mIoU (points) of the final student.
fn benchmark_run(v: Variant, seed: u64, data: &Datasets) -> f64 {
    let cfg = variant_config(v, seed);
    let eval = data.eval.clone().expect("target test split");
    let mut t = Trainer::<f32>::new(cfg, data.clone()).unwrap();
    while t.state.step < t.config.schedule.total_iters {
        t.step().unwrap();
    }
    100.0 * evaluate(&t.state.student, &eval, 16).unwrap().mean_iou.unwrap_or(0.0)
}

fn benchmark(variants: &[Variant]) -> BTreeMap<Variant, Vec<f64>> {
    let data = resolve_datasets(&benchmark_config(0, 2000).data).unwrap();
    let mut out = BTreeMap::new();
    for &v in variants {
        let scores: Vec<f64> = SEEDS.iter().map(|&s| benchmark_run(v, s, &data)).collect();
        println!("  {v:?}: target mIoU per seed {scores:.2?}, mean {:.2}", mean(&scores));
        out.insert(v, scores);
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(runs: &BTreeMap<Variant, Vec<f64>>) -> Outcome {
    let (so, st, full) = (mean(&runs[&Variant::SourceOnly]), mean(&runs[&Variant::SelfTraining]), mean(&runs[&Variant::Full]));
    (
        st >= so + 3.0 && full >= st + 2.0,
        format!(
            "mean target mIoU source-only {so:.2}, self-training {st:.2} (needs >= {:.2}), full {full:.2} (needs >= {:.2})",
            so + 3.0,
            st + 2.0
        ),
    )
}

fn criterion_8(runs: &BTreeMap<Variant, Vec<f64>>) -> Outcome {
    let (full, rf) = (mean(&runs[&Variant::Full]), mean(&runs[&Variant::ResizeFlip]));
    (full >= rf + 1.0, format!("mean target mIoU with color jitter {full:.2}, resize+flip only {rf:.2} (needs jitter >= {:.2})", rf + 1.0))
}

fn criterion_9() -> Outcome {
    let mut cfg = benchmark_config(11, 120);
    cfg.run.eval_every = 40;
    cfg.run.checkpoint_every = 40;
    let data = resolve_datasets(&cfg.data).unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let opts = |i: usize, resume, stop_at| FitOptions { out_dir: dirs[i].path().to_path_buf(), resume, stop_at };
    fit::<f32>(cfg.clone(), data.clone(), &opts(0, None, None)).unwrap();
    fit::<f32>(cfg.clone(), data.clone(), &opts(1, None, None)).unwrap();
    fit::<f32>(cfg.clone(), data.clone(), &opts(2, None, Some(70))).unwrap();
    let latest = dirs[2].path().join("checkpoints").join("latest");
    fit::<f32>(cfg.clone(), data, &opts(2, Some(latest), None)).unwrap();
    let read = |i: usize| std::fs::read_to_string(dirs[i].path().join(METRICS_FILE)).unwrap();
    let (a, b, c) = (read(0), read(1), read(2));
    let rows = a.lines().count() - 1;
    (
        a == b && a == c && rows == 120,
        format!(
            "{rows}-row metrics CSV: repeat run identical = {}, paused at 70 and resumed identical = {}",
            a == b,
            a == c
        ),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "loss identity with beta = gamma = 0", t, criterion_1());
    let t = Instant::now();
    all &= report(2, "loss oracles", t, criterion_2());
    let t = Instant::now();
    all &= report(3, "stop-gradient and contrastive gradient", t, criterion_3());
    let t = Instant::now();
    all &= report(4, "EMA closed form", t, criterion_4());
    let t = Instant::now();
    all &= report(5, "tiling arithmetic", t, criterion_5());
    let t = Instant::now();
    all &= report(6, "metric engine", t, criterion_6());
    let t = Instant::now();
    let runs = benchmark(&[Variant::SourceOnly, Variant::SelfTraining, Variant::Full, Variant::ResizeFlip]);
    all &= report(7, "desk-scale ablation", t, criterion_7(&runs));
    let t = Instant::now();
    all &= report(8, "color jitter ablation", t, criterion_8(&runs));
    let t = Instant::now();
    all &= report(9, "determinism and resume", t, criterion_9());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
