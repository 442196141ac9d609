use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use udaseg::config::{digest, resolve_datasets, Datasets, TrainConfig};
use udaseg::data::{
    build_manifest, synth_domain_pair, Dataset, DirectoryStore, LoadMode, ManifestMeta, Split,
    SplitRule, SynthConfig, TilingSpec,
};
use udaseg::metrics::MetricReport;
use udaseg::report::{overlay, write_report, MetricsLog, Palette, ReportInputs, RgbImage};
use udaseg::trainer::{evaluate, fit, load_student, FitOptions, METRICS_FILE};
use udaseg::types::{DomainTag, ShapeSpec};

pub const CACHE_ENV: &str = "UDASEG_CACHE";

/// Subcommand names that may appear as tables in the `--config` file.
const SECTIONS: [&str; 5] = ["prepare-data", "synth", "train", "eval", "report"];

pub struct Global {
    pub seed: Option<u64>,
    pub force: bool,
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CommandResult {
    pub exit_code: u8,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn success(summary: String, artifacts: Vec<PathBuf>) -> Self {
        Self { exit_code: 0, artifacts, summary }
    }

    pub fn failure(err: anyhow::Error) -> Self {
        Self { exit_code: 1, artifacts: Vec::new(), summary: format!("error: {err:#}") }
    }

    pub fn print(&self) {
        if self.exit_code != 0 {
            eprintln!("{}", self.summary);
            return;
        }
        println!("{}", self.summary);
        for a in &self.artifacts {
            println!("  {}", a.display());
        }
    }
}

/// Fills every unset flag from the matching key of the config file.
macro_rules! fill {
    ($flags:ident, $file:ident; $($f:ident),+) => {
        $( if $flags.$f.is_none() { $flags.$f = $file.$f.take(); } )+
    };
}

fn read_table(global: &Global) -> Result<toml::Table> {
    let Some(path) = &global.config else { return Ok(toml::Table::new()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>().with_context(|| format!("parsing {}", path.display()))
}

fn section<A: DeserializeOwned + Default>(table: &toml::Table, name: &str) -> Result<A> {
    match table.get(name) {
        None => Ok(A::default()),
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| anyhow::anyhow!("[{name}]: {}", e.message())),
    }
}

fn need<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.with_context(|| format!("missing --{flag} (flag or config key `{flag}`)"))
}

/// Refuses to touch existing outputs unless `force`; with `force` they are removed.
fn claim(paths: &[PathBuf], force: bool) -> Result<()> {
    for p in paths.iter().filter(|p| p.exists()) {
        if !force {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
        if p.is_dir() {
            fs::remove_dir_all(p)
        } else {
            fs::remove_file(p)
        }
        .with_context(|| format!("removing {}", p.display()))?;
    }
    Ok(())
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading split list {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| Path::new(l).file_stem().and_then(|s| s.to_str()).unwrap_or(l).to_string())
        .collect())
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PrepareArgs {
    /// Directory holding `images/` and optionally `labels/`.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Tile side in pixels.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Window step in pixels; defaults to the crop.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Parent ids for the training split, one per line.
    #[arg(long)]
    pub train_list: Option<PathBuf>,
    /// Parent ids for the test split, one per line.
    #[arg(long)]
    pub test_list: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated class names; defaults to the six ISPRS classes.
    #[arg(long)]
    pub classes: Option<String>,
    /// `source` or `target`.
    #[arg(long)]
    pub domain: Option<String>,
}

pub fn prepare_data(global: &Global, mut a: PrepareArgs) -> Result<CommandResult> {
    let mut file: PrepareArgs = section(&read_table(global)?, "prepare-data")?;
    fill!(a, file; root, crop, stride, train_list, test_list, out, classes, domain);
    let root = need(a.root, "root")?;
    let out = need(a.out, "out")?;
    let crop = a.crop.unwrap_or(512);
    let spec = TilingSpec::new(crop, a.stride.unwrap_or(crop))?;
    let domain: DomainTag = a.domain.as_deref().unwrap_or("source").parse()?;
    let class_names: Vec<String> = match &a.classes {
        Some(s) => s.split(',').map(|n| n.trim().to_string()).collect(),
        None => Palette::isprs().entries.into_iter().map(|(_, n)| n).collect(),
    };
    if !root.is_dir() {
        bail!("dataset root {} is not a readable directory", root.display());
    }

    let store = DirectoryStore::new(&root);
    let parents = if root.join("images").is_dir() { store.scan()? } else { Vec::new() };
    if parents.is_empty() {
        log::warn!("no images found under {}; writing an empty manifest", root.join("images").display());
    }
    for p in &parents {
        if spec.stride > p.height || spec.stride > p.width {
            bail!("image {}: stride {} exceeds its {}x{} size", p.id, spec.stride, p.height, p.width);
        }
    }
    let rule = match (&a.train_list, &a.test_list) {
        (None, None) => SplitRule::AllTrain,
        (train, test) => SplitRule::Lists {
            train: train.as_deref().map(read_id_list).transpose()?.unwrap_or_default(),
            test: test.as_deref().map(read_id_list).transpose()?.unwrap_or_default(),
        },
    };
    let root_abs = fs::canonicalize(&root).with_context(|| format!("resolving {}", root.display()))?;
    let meta = ManifestMeta { domain, channels: 3, class_names, root: Some(root_abs) };
    let manifest = build_manifest(&parents, &spec, &rule, meta)?;

    let manifest_path = out.join("manifest.tsv");
    let summary_path = out.join("summary.toml");
    claim(&[manifest_path.clone(), summary_path.clone()], global.force)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    manifest.save(&manifest_path)?;
    let (train, test) = (manifest.count(Split::Train), manifest.count(Split::Test));
    let mut summary = toml::Table::new();
    summary.insert("parents".into(), (parents.len() as i64).into());
    summary.insert("crop".into(), (spec.crop as i64).into());
    summary.insert("stride".into(), (spec.stride as i64).into());
    summary.insert("train_tiles".into(), (train as i64).into());
    summary.insert("test_tiles".into(), (test as i64).into());
    fs::write(&summary_path, toml::to_string(&summary)?).with_context(|| format!("writing {}", summary_path.display()))?;
    Ok(CommandResult::success(
        format!(
            "{} parent images, crop {} stride {}: {train} train tiles, {test} test tiles, {} total",
            parents.len(),
            spec.crop,
            spec.stride,
            manifest.len()
        ),
        vec![manifest_path, summary_path],
    ))
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training images per domain.
    #[arg(long)]
    pub num_images: Option<usize>,
    /// Held-out images per domain.
    #[arg(long)]
    pub num_test: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of classes, background included.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Fraction of each image covered by shapes.
    #[arg(long)]
    pub density: Option<f64>,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        let size = self.size.unwrap_or(d.shape.height);
        let cfg = SynthConfig {
            seed,
            num_images: self.num_images.unwrap_or(d.num_images),
            num_test: self.num_test.unwrap_or(d.num_test),
            shape: ShapeSpec::new(size, size, 3, self.classes.unwrap_or(d.shape.num_classes))?,
            shape_density: self.density.unwrap_or(d.shape_density),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Desk-scale run configuration over a materialized synthetic pair.
pub fn synthetic_train_config(synth: &SynthConfig) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.source = Some("source/manifest.tsv".into());
    cfg.data.target = Some("target/manifest.tsv".into());
    cfg.augment.sim.crop_size = [synth.shape.height, synth.shape.width];
    cfg.schedule.total_iters = 2000;
    cfg.schedule.warmup_iters = 75;
    cfg.run.seed = synth.seed;
    cfg.run.eval_every = 500;
    cfg.run.checkpoint_every = 500;
    cfg
}

pub fn synth(global: &Global, mut a: SynthArgs) -> Result<CommandResult> {
    let mut file: SynthArgs = section(&read_table(global)?, "synth")?;
    fill!(a, file; out, num_images, num_test, size, classes, density);
    let out = need(a.out.clone(), "out")?;
    let cfg = a.config(global.seed.unwrap_or(0))?;
    let (src_dir, tgt_dir, cfg_path) = (out.join("source"), out.join("target"), out.join("train.toml"));
    claim(&[src_dir.clone(), tgt_dir.clone(), cfg_path.clone()], global.force)?;
    let (source, target) = synth_domain_pair(&cfg)?;
    source.write(&src_dir)?;
    target.write(&tgt_dir)?;
    fs::write(&cfg_path, synthetic_train_config(&cfg).to_toml_string()?)
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    Ok(CommandResult::success(
        format!(
            "synthetic pair (seed {}): {} source and {} target tiles of {}x{}, {} classes",
            cfg.seed,
            source.manifest.len(),
            target.manifest.len(),
            cfg.shape.height,
            cfg.shape.width,
            cfg.shape.num_classes
        ),
        vec![src_dir.join("manifest.tsv"), tgt_dir.join("manifest.tsv"), cfg_path],
    ))
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Run directory for metrics, reports and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured total iterations.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Pause after this step, leaving a resumable `checkpoints/latest`.
    #[arg(long)]
    pub stop_at: Option<u64>,
}

/// Files `fit` writes at the top of a run directory.
const RUN_OUTPUTS: [&str; 5] = [METRICS_FILE, "events.log", "config.toml", "checkpoints", "reports"];

pub fn train(global: &Global, mut a: TrainArgs) -> Result<CommandResult> {
    let Some(path) = &global.config else { bail!("train needs --config <run configuration>") };
    let mut table = read_table(global)?;
    let mut file: TrainArgs = section(&table, "train")?;
    fill!(a, file; out, resume, iters, stop_at);
    for s in SECTIONS {
        table.remove(s);
    }
    let mut cfg = TrainConfig::from_toml_str(&toml::to_string(&table)?)
        .with_context(|| path.display().to_string())?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
    if let Some(seed) = global.seed {
        cfg.run.seed = seed;
    }
    if let Some(n) = a.iters {
        cfg.schedule.total_iters = n;
    }
    cfg.validate()?;
    let out = need(a.out, "out")?;

    if a.resume.is_none() {
        let outputs: Vec<PathBuf> = RUN_OUTPUTS.iter().map(|n| out.join(n)).collect();
        claim(&outputs, global.force)?;
    }
    let data = match (std::env::var_os(CACHE_ENV), &cfg.data.synthetic) {
        (Some(cache), Some(s)) => cached_synthetic(Path::new(&cache), s, cfg.data.eval.as_deref())?,
        _ => resolve_datasets(&cfg.data)?,
    };
    let summary = fit::<f32>(cfg, data, &FitOptions { out_dir: out.clone(), resume: a.resume, stop_at: a.stop_at })?;
    let score = summary
        .final_report
        .as_ref()
        .and_then(|r| r.mean_iou)
        .map_or_else(|| "no final evaluation".to_string(), |m| format!("final mIoU {:.2}", 100.0 * m));
    let best = summary.best.map_or_else(String::new, |(m, s)| format!(", best {:.2} at step {s}", 100.0 * m));
    Ok(CommandResult::success(
        format!("trained to step {} in {}: {score}{best}", summary.steps, out.display()),
        summary.artifacts,
    ))
}

/// Materializes the synthetic pair once under `<cache>/synth/<digest>` and
/// reads it back from disk.
pub fn cached_synthetic(cache: &Path, s: &SynthConfig, eval: Option<&Path>) -> Result<Datasets> {
    let dir = cache.join("synth").join(digest(s));
    if !dir.join("target").join("manifest.tsv").exists() {
        let tmp = cache.join("synth").join(format!(".{}.tmp-{}", digest(s), std::process::id()));
        let (source, target) = synth_domain_pair(s)?;
        source.write(&tmp.join("source"))?;
        target.write(&tmp.join("target"))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::rename(&tmp, &dir).with_context(|| format!("moving cache into {}", dir.display()))?;
        log::info!("cached synthetic data in {}", dir.display());
    }
    let source = Dataset::open(&dir.join("source").join("manifest.tsv"))?;
    let target = Dataset::open(&dir.join("target").join("manifest.tsv"))?;
    let eval = match eval {
        Some(p) => Dataset::open(p)?,
        None => target.split(Split::Test),
    };
    Ok(Datasets {
        source: source.split(Split::Train),
        target: target.split(Split::Train),
        eval: Some(eval).filter(|d| !d.is_empty()),
    })
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train`, `test` or `all` (default).
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
}

fn split_of(ds: Dataset, split: Option<&str>) -> Result<Dataset> {
    Ok(match split {
        None | Some("all") => ds,
        Some(s) => ds.split(s.parse()?),
    })
}

pub fn eval(global: &Global, mut a: EvalArgs) -> Result<CommandResult> {
    let mut file: EvalArgs = section(&read_table(global)?, "eval")?;
    fill!(a, file; checkpoint, manifest, out, split, batch);
    let ckpt = need(a.checkpoint, "checkpoint")?;
    let manifest = need(a.manifest, "manifest")?;
    let out = need(a.out, "out")?;
    claim(std::slice::from_ref(&out), global.force)?;
    let ds = split_of(Dataset::open(&manifest)?, a.split.as_deref())?;
    let model = load_student::<f32>(&ckpt)?;
    let report = evaluate(&model, &ds, a.batch.unwrap_or(8))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report.table());
    let miou = report.mean_iou.map_or_else(|| "-".to_string(), |m| format!("{:.2}", 100.0 * m));
    Ok(CommandResult::success(format!("evaluated {} tiles: mIoU {miou}", ds.len()), vec![out]))
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ReportArgs {
    /// Training metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Evaluation reports (JSON); the last one is charted.
    #[arg(long, num_args = 1..)]
    pub evals: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Palette file of `index r g b name` lines; defaults to ISPRS colours.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Checkpoint whose predictions are overlaid.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Tiles to overlay predictions on.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of overlays.
    #[arg(long)]
    pub overlays: Option<usize>,
    /// Opacity of the class colours, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
}

pub fn report(global: &Global, mut a: ReportArgs) -> Result<CommandResult> {
    let mut file: ReportArgs = section(&read_table(global)?, "report")?;
    fill!(a, file; metrics, out, palette, checkpoint, manifest, overlays, alpha);
    if a.evals.is_empty() {
        a.evals = std::mem::take(&mut file.evals);
    }
    let out = need(a.out, "out")?;
    let palette = match &a.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::isprs(),
    };
    let metrics = a.metrics.as_deref().map(MetricsLog::load).transpose()?;
    let evals = a
        .evals
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
            Ok((label, MetricReport::from_json(&text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let overlays = match (&a.checkpoint, &a.manifest) {
        (Some(c), Some(m)) => {
            let alpha = a.alpha.unwrap_or(0.5);
            if !(0.0..=1.0).contains(&alpha) {
                bail!("--alpha must lie in [0, 1], got {alpha}");
            }
            render_overlays(c, &Dataset::open(m)?, &palette, a.overlays.unwrap_or(4), alpha)?
        }
        (None, None) => Vec::new(),
        _ => bail!("overlays need both --checkpoint and --manifest"),
    };
    claim(&[out.join("index.html")], global.force)?;
    let files = write_report(&ReportInputs { metrics, evals, overlays }, &palette, &out)?;
    Ok(CommandResult::success(format!("report with {} files in {}", files.len(), out.display()), files))
}

fn render_overlays(
    ckpt: &Path,
    ds: &Dataset,
    palette: &Palette,
    count: usize,
    alpha: f64,
) -> Result<Vec<(String, RgbImage)>> {
    let model = load_student::<f32>(ckpt)?;
    let mut out = Vec::new();
    for i in 0..count.min(ds.len()) {
        let sample = ds.load_sample::<f32>(i, LoadMode::Eval)?;
        let pred = model.forward_segmentation(&sample.image)?.argmax();
        out.push((sample.id.clone(), overlay(&sample.image, &pred, palette, alpha)?));
    }
    Ok(out)
}
