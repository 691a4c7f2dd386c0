//! Command-line front end. Every command is deterministic in its inputs and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, NetworkConfig};
use crate::data::dataset::{list_ids, read_label_png, write_label_png};
use crate::data::gt::{derive_gt_eg, derive_gt_loc};
use crate::data::palette::Palette;
use crate::data::synth::{synth_fixture, SceneSpec};
use crate::data::{load_sample, read_split, write_sample, SplitEntry, SplitTag};
use crate::error::{Error, Result};
use crate::gradcheck::{self, DEFAULT_EPS, FAIL_THRESHOLD};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::net::Model;
use crate::params::ParamStore;
use crate::train::{overfit, OverfitOptions};

#[derive(Parser, Debug)]
#[command(name = "lasnet", version, about = "RGB-thermal semantic segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write freshly initialised parameters.
    Init {
        #[command(flatten)]
        net: NetArgs,
        /// Parameter file to create.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment every sample under a dataset root.
    Infer {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output directory; receives `color/<id>.png` and `labels/<id>.png`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON array of `[r, g, b]` class colours.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Score predictions against the ground truth.
    Eval {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Run the network with these parameters.
        #[arg(long, conflicts_with = "pred")]
        params: Option<PathBuf>,
        /// Read predicted label PNGs `<dir>/<id>.png` instead.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitFilter::All)]
        split: SplitFilter,
        /// Evaluate only shard `i` of `n` (ids taken round-robin), e.g. `0/2`.
        #[arg(long)]
        shard: Option<String>,
        /// Directory for `report.json` and `report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine the confusion matrices of several JSON reports.
    MergeReports {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the network to a few samples and record the loss trace.
    Overfit {
        #[command(flatten)]
        net: NetArgs,
        /// Dataset to memorise; a synthetic 64×96 scene is used when absent.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Split manifest restricting the samples.
        #[arg(long)]
        list: Option<PathBuf>,
        /// Number of optimisation steps.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        edge_radius: Option<usize>,
        /// Keep dropout active during fitting.
        #[arg(long)]
        dropout: bool,
        /// Output directory for `params.bin`, `trace.csv` and `summary.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        net: NetArgs,
        /// Check the loss terms alone on random prediction maps.
        #[arg(long)]
        losses_only: bool,
        /// Input height and width.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Number of random parameter entries to perturb.
        #[arg(long, default_value_t = 50)]
        coords: usize,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Write location and edge targets for every label map.
    DeriveGt {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        edge_radius: Option<usize>,
        /// Output directory; receives `loc/<id>.png` and `edge/<id>.png` (values 0/1).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Colour a label PNG.
    Render {
        /// Single-channel label PNG.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with a `test.txt` manifest.
    Synth {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitFilter {
    All,
    Day,
    Night,
}

/// Network and run options shared by most commands.
#[derive(Args, Debug, Clone, Default)]
pub struct NetArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub lambda_loc: Option<f64>,
    /// Replace the location module with summation fusion.
    #[arg(long)]
    pub no_clm: bool,
    /// Replace the activation modules with summation fusion.
    #[arg(long)]
    pub no_cam: bool,
    /// Replace the edge module with summation fusion.
    #[arg(long)]
    pub no_esm: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset root containing `rgb/`, `thermal/` and `labels/`.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Split manifest (`id [day|night]` per line); defaults to every label file.
    #[arg(long)]
    pub list: Option<PathBuf>,
}

/// Contents of the `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: Option<NetworkConfig>,
    pub root: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub edge_radius: Option<usize>,
}

/// Options after merging the config file with command-line flags.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub network: NetworkConfig,
    pub file: RunConfig,
    pub seed: u64,
}

impl NetArgs {
    pub fn resolve(&self) -> Result<Resolved> {
        let file = match &self.config {
            None => RunConfig::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
        };
        let mut network = file.network.clone().unwrap_or_else(NetworkConfig::desk);
        if let Some(c) = self.classes {
            network.num_classes = c;
        }
        if let Some(l) = self.lambda_loc {
            network.lambda_loc = l;
        }
        let Ablation { use_clm, use_cam, use_esm } = network.ablation;
        network.ablation = Ablation {
            use_clm: use_clm && !self.no_clm,
            use_cam: use_cam && !self.no_cam,
            use_esm: use_esm && !self.no_esm,
        };
        let seed = self.seed.or(file.seed).unwrap_or(network.seed);
        network.seed = seed;
        network.validate()?;
        Ok(Resolved { network, file, seed })
    }
}

fn required(flag: &str, value: Option<PathBuf>, fallback: &Option<PathBuf>) -> Result<PathBuf> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn entries(root: &Path, list: &Option<PathBuf>) -> Result<Vec<SplitEntry>> {
    match list {
        Some(path) => read_split(path),
        None => Ok(list_ids(root)?
            .into_iter()
            .map(|id| SplitEntry { id, tag: None })
            .collect()),
    }
}

fn load_palette(path: &Option<PathBuf>, num_classes: usize) -> Result<Palette> {
    let palette = match path {
        Some(p) => Palette::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Palette::mfnet(),
    };
    if palette.len() < num_classes {
        return Err(Error::Config(format!(
            "palette has {} colours for {num_classes} classes; pass --palette",
            palette.len()
        )));
    }
    Ok(palette)
}

fn load_model(network: NetworkConfig, params: &Path) -> Result<Model> {
    Model::new(network, ParamStore::load(params)?)
}

fn parse_shard(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--shard expects `index/count`, got {s:?}"));
    let (i, n) = s.split_once('/').ok_or_else(bad)?;
    let (i, n): (usize, usize) = (i.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?);
    if n == 0 || i >= n {
        return Err(bad());
    }
    Ok((i, n))
}

/// Runs one command; the returned text is printed to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Init { net, out } => {
            let r = net.resolve()?;
            let out = required("out", out, &r.file.params)?;
            let model = Model::init(r.network, r.seed)?;
            write_file(&out, model.params.to_bytes())?;
            Ok(format!("wrote {} tensors ({} values) to {}\n", model.params.len(), model.params.numel(), out.display()))
        }
        Command::Infer { net, data, params, out, palette } => {
            let r = net.resolve()?;
            let root = required("root", data.root, &r.file.root)?;
            let params = required("params", params, &r.file.params)?;
            let out = required("out", out, &r.file.out)?;
            let palette = load_palette(&palette, r.network.num_classes)?;
            let model = load_model(r.network, &params)?;
            let entries = entries(&root, &data.list)?;
            let mut log = String::new();
            for e in &entries {
                let sample = load_sample(&root, &e.id, model.config.num_classes)?;
                let pred = model.predict(&sample.rgb, &sample.tir)?;
                write_label_png(&pred, &out.join("labels").join(format!("{}.png", e.id)))?;
                write_file(&out.join("color").join(format!("{}.png", e.id)), palette.render_png(&pred)?)?;
                writeln!(log, "{}", e.id).expect("string write");
            }
            writeln!(log, "segmented {} samples into {}", entries.len(), out.display()).expect("string write");
            Ok(log)
        }
        Command::Eval { net, data, params, pred, split, shard, out } => {
            let r = net.resolve()?;
            let root = required("root", data.root, &r.file.root)?;
            let c = r.network.num_classes;
            let model = match (&pred, params.or(r.file.params.clone())) {
                (Some(_), _) => None,
                (None, Some(p)) => Some(load_model(r.network.clone(), &p)?),
                (None, None) => return Err(Error::Config("eval needs --params or --pred".into())),
            };
            let mut entries = entries(&root, &data.list)?;
            if let Some(s) = shard {
                let (i, n) = parse_shard(&s)?;
                entries = entries.into_iter().enumerate().filter(|(k, _)| k % n == i).map(|(_, e)| e).collect();
            }
            let wanted = |tag: Option<SplitTag>| match split {
                SplitFilter::All => true,
                SplitFilter::Day => tag == Some(SplitTag::Day),
                SplitFilter::Night => tag == Some(SplitTag::Night),
            };
            entries.retain(|e| wanted(e.tag));
            if entries.is_empty() {
                return Err(Error::Config("no samples to evaluate".into()));
            }
            let mut total = ConfusionMatrix::new(c);
            let mut day = ConfusionMatrix::new(c);
            let mut night = ConfusionMatrix::new(c);
            for e in &entries {
                let (prediction, gt) = match (&pred, &model) {
                    (Some(dir), _) => {
                        let gt = read_label_png(&root.join("labels").join(format!("{}.png", e.id)))?;
                        (read_label_png(&dir.join(format!("{}.png", e.id)))?, gt)
                    }
                    (None, Some(m)) => {
                        let s = load_sample(&root, &e.id, c)?;
                        (m.predict(&s.rgb, &s.tir)?, s.gt_sem)
                    }
                    (None, None) => unreachable!("checked above"),
                };
                let mut cm = ConfusionMatrix::new(c);
                cm.accumulate(&prediction, &gt)?;
                total.merge(&cm)?;
                match e.tag {
                    Some(SplitTag::Day) => day.merge(&cm)?,
                    Some(SplitTag::Night) => night.merge(&cm)?,
                    None => {}
                }
            }
            let tag = match split {
                SplitFilter::All => None,
                SplitFilter::Day => Some("day"),
                SplitFilter::Night => Some("night"),
            };
            let mut reports = vec![("report", EvalReport::from_matrix(&total, tag))];
            if split == SplitFilter::All {
                for (name, cm) in [("day", &day), ("night", &night)] {
                    if cm.total() > 0 {
                        reports.push((name, EvalReport::from_matrix(cm, Some(name))));
                    }
                }
            }
            emit_reports(&reports, out.as_deref())
        }
        Command::MergeReports { reports, out } => {
            let mut merged: Option<ConfusionMatrix> = None;
            for path in &reports {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let report: EvalReport =
                    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let cm = ConfusionMatrix::from_counts(report.confusion)?;
                match &mut merged {
                    None => merged = Some(cm),
                    Some(m) => m.merge(&cm)?,
                }
            }
            let cm = merged.expect("clap requires one report");
            emit_reports(&[("report", EvalReport::from_matrix(&cm, None))], out.as_deref())
        }
        Command::Overfit { net, root, list, epochs, lr, edge_radius, dropout, out } => {
            let r = net.resolve()?;
            let out = required("out", out, &r.file.out)?;
            let opts = OverfitOptions {
                steps: epochs.or(r.file.epochs).unwrap_or(300),
                lr: lr.or(r.file.lr).unwrap_or(1e-3),
                seed: r.seed,
                edge_radius: edge_radius.or(r.file.edge_radius).unwrap_or(1),
                dropout,
            };
            if !opts.lr.is_finite() || opts.lr < 0.0 {
                return Err(Error::Config(format!("learning rate {} must be finite and non-negative", opts.lr)));
            }
            let samples = match root.or(r.file.root.clone()) {
                Some(root) => entries(&root, &list)?
                    .iter()
                    .map(|e| load_sample(&root, &e.id, r.network.num_classes))
                    .collect::<Result<Vec<_>>>()?,
                None => {
                    let spec = SceneSpec {
                        num_classes: r.network.num_classes,
                        shapes: 3.min(r.network.num_classes - 1),
                        ..SceneSpec::default()
                    };
                    vec![synth_fixture(&spec, r.seed)?.sample]
                }
            };
            if samples.is_empty() {
                return Err(Error::Config("no samples to fit".into()));
            }
            let mut model = Model::init(r.network, r.seed)?;
            let mut trace = String::from("step,loc,eg,sem2,sem_ce,sem_lovasz,total\n");
            let report = overfit(&mut model, &samples, &opts, |step, b| {
                writeln!(trace, "{step},{},{},{},{},{},{}", b.loc, b.eg, b.sem2, b.sem_ce, b.sem_lovasz, b.total)
                    .expect("string write");
            })?;
            write_file(&out.join("trace.csv"), &trace)?;
            write_file(&out.join("params.bin"), model.params.to_bytes())?;
            let summary = serde_json::json!({
                "steps": opts.steps,
                "lr": opts.lr,
                "seed": opts.seed,
                "initial_loss": report.initial_total(),
                "final_loss": report.final_loss,
                "loss_ratio": report.final_loss.total / report.initial_total(),
                "pixel_accuracy": report.pixel_accuracy,
            });
            write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
            Ok(format!(
                "steps {} initial loss {:.6} final loss {:.6} ratio {:.4} pixel accuracy {:.2}%\n",
                opts.steps,
                report.initial_total(),
                report.final_loss.total,
                report.final_loss.total / report.initial_total(),
                100.0 * report.pixel_accuracy
            ))
        }
        Command::Gradcheck { net, losses_only, size, coords, eps } => {
            let r = net.resolve()?;
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("--eps {eps} must be positive")));
            }
            let report = if losses_only {
                gradcheck::losses_check(r.network.lambda_loc, eps, r.seed)?
            } else {
                if size > 64 {
                    return Err(Error::Config(format!("--size {size} is too large for a finite-difference check")));
                }
                gradcheck::network_check(&r.network, size, coords, eps, r.seed)?
            };
            let line = format!(
                "{} check: {} coordinates ({} skipped near kinks), max relative error {:.3e}\n",
                if losses_only { "loss" } else { "network" },
                report.checked,
                report.skipped,
                report.max_relative_error
            );
            if !(report.max_relative_error <= FAIL_THRESHOLD) {
                return Err(Error::CheckFailed(format!(
                    "max relative error {:.3e} exceeds {FAIL_THRESHOLD:e}",
                    report.max_relative_error
                )));
            }
            Ok(line)
        }
        Command::DeriveGt { data, edge_radius, out, net } => {
            let r = net.resolve()?;
            let root = required("root", data.root, &r.file.root)?;
            let out = required("out", out, &r.file.out)?;
            let radius = edge_radius.or(r.file.edge_radius).unwrap_or(1);
            if radius == 0 {
                return Err(Error::Config("--edge-radius must be at least 1".into()));
            }
            let entries = entries(&root, &data.list)?;
            for e in &entries {
                let sem = read_label_png(&root.join("labels").join(format!("{}.png", e.id)))?;
                sem.check_classes(r.network.num_classes)?;
                let name = format!("{}.png", e.id);
                write_label_png(&derive_gt_loc(&sem), &out.join("loc").join(&name))?;
                write_label_png(&derive_gt_eg(&sem, radius), &out.join("edge").join(&name))?;
            }
            Ok(format!("derived targets for {} samples\n", entries.len()))
        }
        Command::Render { labels, out, palette } => {
            let map = read_label_png(&labels)?;
            let max = map.data().iter().copied().max().map_or(0, usize::from);
            let palette = load_palette(&palette, max + 1)?;
            write_file(&out, palette.render_png(&map)?)?;
            Ok(format!("wrote {}\n", out.display()))
        }
        Command::Synth { net, out, count, shapes, height, width } => {
            let r = net.resolve()?;
            let out = required("out", out, &r.file.out)?;
            let spec = SceneSpec {
                height,
                width,
                shapes,
                num_classes: r.network.num_classes,
                ..SceneSpec::default()
            };
            let mut manifest = String::new();
            for i in 0..count {
                let mut sample = synth_fixture(&spec, r.seed.wrapping_add(i as u64))?.sample;
                sample.id = format!("{i:04}");
                write_sample(&out, &sample)?;
                let tag = if i % 2 == 0 { "day" } else { "night" };
                writeln!(manifest, "{} {tag}", sample.id).expect("string write");
            }
            write_file(&out.join("test.txt"), &manifest)?;
            Ok(format!("wrote {count} samples to {}\n", out.display()))
        }
    }
}

fn emit_reports(reports: &[(&str, EvalReport)], out: Option<&Path>) -> Result<String> {
    let mut text = String::new();
    for (name, report) in reports {
        if let Some(dir) = out {
            write_file(&dir.join(format!("{name}.json")), report.to_json())?;
            write_file(&dir.join(format!("{name}.txt")), report.to_text())?;
        }
        text.push_str(&report.to_text());
    }
    Ok(text)
}

/// Caps the worker pool when `LASNET_THREADS` is set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("LASNET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LASNET_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Process exit status for an error: 2 for environment problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io_or_config() {
        2
    } else {
        1
    }
}
