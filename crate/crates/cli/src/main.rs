//! `mdf3d`: harmonize, inspect, train, evaluate and ablate multi-dataset
//! detectors.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdf3d_core::config::Config;
use mdf3d_core::datasets::{
    generate_frame, harmonize_frame, read_frame_dir, size_histograms, write_frame, DatasetSpec, DropCounter, Frame,
    HarmonizeCounts, COMMON_CLASSES,
};
use mdf3d_core::encoder::POINT_FEATURES;
use mdf3d_core::train::experiment::{
    ablation_runner, matrix_from_config, preset_spec, run, score, score_domain, train_joint, Domain, DomainPreset,
    Experiment, RunConfig, StepRecord, TEST_SEED_OFFSET,
};
use mdf3d_core::train::{load_checkpoint, save_checkpoint, ApMetric, Checkpoint, EvalReport, TrainMode};
use mdf3d_core::Range3D;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mdf3d", version, about = "Multi-dataset LiDAR 3D detection toolkit")]
struct Cli {
    /// Root for relative dataset directories in configs.
    #[arg(long, global = true, env = "MDF3D_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Parent of the per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop frames to a dataset's range and shift them to its ground plane.
    Harmonize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        dataset_spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the vertical origin shift.
        #[arg(long)]
        no_origin_shift: bool,
    },
    /// Box size histograms and per-channel point statistics as CSV.
    Stats {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        /// Taxonomy for KITTI labels; defaults to the common classes.
        #[arg(long)]
        dataset_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        bin_width: f64,
        #[arg(long, default_value_t = 8.0)]
        max_size: f64,
    },
    /// Write synthetic frames for a dataset spec with a synthetic section.
    Generate {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        dataset_spec: Option<PathBuf>,
        /// Built-in domain `a` or `b`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Generate held-out frames (seeds from the test offset).
        #[arg(long)]
        test: bool,
    },
    /// Train from a config file; writes the loss log, report and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on one dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Frame directory; defaults to synthetic held-out frames of the spec.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Spec of a dataset the checkpoint was not trained on.
        #[arg(long)]
        dataset_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        test_frames: usize,
        /// Route the dataset through this training dataset's statistics and head.
        #[arg(long)]
        zero_shot_donor_head: Option<String>,
    },
    /// Train every configuration of a matrix under every seed.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    /// `name=fraction` of a dataset's training frames to keep (repeatable).
    #[arg(long, value_parser = parse_subsample)]
    subsample: Vec<(String, f64)>,
}

fn parse_subsample(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, f) = s.split_once('=').ok_or("expected name=fraction")?;
    let f: f64 = f.parse().map_err(|e| format!("fraction `{f}`: {e}"))?;
    if !(f > 0.0 && f <= 1.0) {
        return Err(format!("fraction {f} not in (0,1]"));
    }
    Ok((name.to_string(), f))
}

impl Overrides {
    fn apply(&self, c: &mut Config) {
        for (name, f) in &self.subsample {
            c.set(&format!("train.subsample.{name}"), f);
        }
    }
}

/// Errors that should exit with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("usage error: {e}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Harmonize {
            input,
            dataset_spec,
            out,
            no_origin_shift,
        } => harmonize(input, dataset_spec, out, !no_origin_shift),
        Command::Stats {
            frames,
            out_csv,
            dataset_spec,
            bin_width,
            max_size,
        } => stats(frames, out_csv, dataset_spec.as_deref(), *bin_width, *max_size),
        Command::Generate {
            dataset_spec,
            preset,
            out,
            frames,
            test,
        } => generate(dataset_spec.as_deref(), preset.as_deref(), out, *frames, *test),
        Command::Train { config, overrides } => train(cli, config, overrides),
        Command::Eval {
            checkpoint,
            dataset,
            frames,
            dataset_spec,
            test_frames,
            zero_shot_donor_head,
        } => eval(
            cli,
            checkpoint,
            dataset,
            frames.as_deref(),
            dataset_spec.as_deref(),
            *test_frames,
            zero_shot_donor_head.as_deref(),
        ),
        Command::Ablate { matrix, overrides } => ablate(cli, matrix, overrides),
    }
}

fn load_spec(path: &Path) -> Result<DatasetSpec> {
    let c = Config::load(path)?;
    DatasetSpec::from_config(&c).with_context(|| format!("dataset spec {}", path.display()))
}

fn harmonize(input: &Path, spec_path: &Path, out: &Path, shift: bool) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let mut drops = DropCounter::default();
    let frames = read_frame_dir(input, &spec, 0, &mut drops)?;
    let mut counts = HarmonizeCounts::default();
    for f in &frames {
        let (h, c) = harmonize_frame(f, &spec, shift);
        counts += c;
        write_frame(out, &h)?;
    }
    println!("frames {}", frames.len());
    println!("points dropped {}", counts.points_dropped);
    println!("boxes dropped {}", counts.boxes_dropped);
    println!("labels dropped {}", drops.total());
    for (label, n) in &drops.by_label {
        println!("  {label} {n}");
    }
    Ok(())
}

fn stats(dir: &Path, out_csv: &Path, spec_path: Option<&Path>, bin_width: f64, max_size: f64) -> Result<()> {
    if !(bin_width > 0.0 && max_size > bin_width) {
        bail!(Usage(format!("bin width {bin_width} and max size {max_size}")));
    }
    let spec = match spec_path {
        Some(p) => load_spec(p)?,
        None => DatasetSpec::new("frames", Range3D::new([-1e4, 1e4], [-1e4, 1e4], [-1e4, 1e4])?),
    };
    let mut drops = DropCounter::default();
    let frames = read_frame_dir(dir, &spec, 0, &mut drops)?;
    let bins = (max_size / bin_width).round() as usize;
    let edges: Vec<f64> = (0..=bins).map(|k| k as f64 * bin_width).collect();
    let hist = size_histograms(&frames, &edges)?;
    let mut csv = String::from("kind,class,dim,lo,hi,value\n");
    let dims = ["l", "w", "h"];
    for h in &hist {
        let class = COMMON_CLASSES[h.class_id];
        for (d, dim) in dims.iter().enumerate() {
            for (k, n) in h.counts[d].iter().enumerate() {
                csv += &format!("hist,{class},{dim},{},{},{n}\n", edges[k], edges[k + 1]);
            }
            csv += &format!("underflow,{class},{dim},,{},{}\n", edges[0], h.underflow[d]);
            csv += &format!("overflow,{class},{dim},{},,{}\n", edges[bins], h.overflow[d]);
        }
    }
    let (mean, var) = channel_stats(&frames);
    for (c, name) in ["x", "y", "z", "intensity"].iter().enumerate().take(POINT_FEATURES) {
        csv += &format!("channel_mean,,{name},,,{}\n", mean[c]);
        csv += &format!("channel_var,,{name},,,{}\n", var[c]);
    }
    std::fs::write(out_csv, csv).with_context(|| format!("writing {}", out_csv.display()))?;
    let boxes: usize = frames.iter().map(|f| f.gt_boxes.len()).sum();
    println!("frames {} boxes {boxes} -> {}", frames.len(), out_csv.display());
    Ok(())
}

/// Mean and population variance of raw `x, y, z, intensity` over all points.
fn channel_stats(frames: &[Frame]) -> ([f64; 4], [f64; 4]) {
    let mut n = 0usize;
    let (mut sum, mut sq) = ([0.0; 4], [0.0; 4]);
    for f in frames {
        for (p, &i) in f.pc.xyz.iter().zip(&f.pc.intensity) {
            for (c, v) in [p[0], p[1], p[2], i].into_iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return ([0.0; 4], [0.0; 4]);
    }
    let mean = sum.map(|s| s / n as f64);
    let var = std::array::from_fn(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0));
    (mean, var)
}

fn generate(spec_path: Option<&Path>, preset: Option<&str>, out: &Path, n: usize, test: bool) -> Result<()> {
    let spec = match (spec_path, preset) {
        (Some(p), _) => load_spec(p)?,
        (None, Some("a")) => preset_spec(DomainPreset::A),
        (None, Some("b")) => preset_spec(DomainPreset::B),
        (None, Some(other)) => bail!(Usage(format!("unknown preset `{other}` (a or b)"))),
        (None, None) => bail!(Usage("--dataset-spec or --preset is required".into())),
    };
    let syn = spec
        .synthetic
        .as_ref()
        .with_context(|| format!("dataset `{}` has no synthetic section", spec.name))?;
    let offset = if test { TEST_SEED_OFFSET } else { 0 };
    for k in 0..n {
        let mut f = generate_frame(syn, 0, offset + k as u64)?;
        f.frame_id = format!("{k:06}");
        write_frame(out, &f)?;
    }
    std::fs::write(out.join("spec.txt"), spec.to_config_text())?;
    println!("wrote {n} frames of `{}` to {}", spec.name, out.display());
    Ok(())
}

/// Creates `<runs_dir>/<timestamp>-<command>`, suffixed when taken.
fn run_dir(cli: &Cli, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = cli.runs_dir.join(format!("{stamp}-{command}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Echoes every source file verbatim plus the resolved key set.
fn echo_config(dir: &Path, c: &Config) -> Result<()> {
    for (k, (name, text)) in c.sources().iter().enumerate() {
        let file = if k == 0 { "config.txt".to_string() } else { format!("config.include{k}.txt") };
        let header = if k == 0 { String::new() } else { format!("# {name}\n") };
        std::fs::write(dir.join(file), format!("{header}{text}"))?;
    }
    std::fs::write(dir.join("resolved.txt"), c.to_text())?;
    Ok(())
}

struct LossLog(BufWriter<File>);

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn record(&mut self, names: &[String], tag: Option<(&str, u64)>, r: &StepRecord) {
        let terms: serde_json::Map<String, serde_json::Value> = r
            .out
            .terms
            .iter()
            .map(|&(d, v)| (names.get(d).cloned().unwrap_or_else(|| d.to_string()), v.into()))
            .collect();
        let mut line = serde_json::json!({
            "phase": r.phase,
            "step": r.step,
            "loss": r.out.loss,
            "lr": r.out.lr,
            "terms": terms,
        });
        if let Some((config, seed)) = tag {
            line["config"] = config.into();
            line["seed"] = seed.into();
        }
        // a failed log line must not abort training; the final flush reports it
        let _ = writeln!(self.0, "{line}");
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

fn print_report(report: &EvalReport) {
    for e in &report.entries {
        println!(
            "{:<20} {:<10} AP_BEV {:6.2}  AP_3D {:6.2}  ({} gt)",
            e.dataset, COMMON_CLASSES[e.class_id], e.ap_bev, e.ap_3d, e.num_gt
        );
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<Config> {
    let mut c = Config::load(path).with_context(|| format!("config {}", path.display()))?;
    overrides.apply(&mut c);
    Ok(c)
}

fn train(cli: &Cli, path: &Path, overrides: &Overrides) -> Result<()> {
    let c = load_config(path, overrides)?;
    let exp = Experiment::from_config(&c, cli.data_root.as_deref())?;
    let dir = run_dir(cli, "train")?;
    echo_config(&dir, &c)?;
    let names: Vec<String> = exp.domains.iter().map(|d| d.spec.name.clone()).collect();
    let mut log = LossLog::create(&dir.join("loss.jsonl"))?;
    let name = c.get("name").unwrap_or("train").to_string();
    let report = if exp.train.mode == TrainMode::Scratch {
        let refs: Vec<&Domain> = exp.domains.iter().collect();
        let t = train_joint(&exp.model, &exp.train, &refs, &mut |r| log.record(&names, None, &r))?;
        let report = score(&t.model, &exp.domains, exp.zero_shot.as_ref())?;
        let ck = Checkpoint {
            model: t.model,
            optimizer: t.optimizer,
            train: exp.train.clone(),
        };
        save_checkpoint(&ck, &dir.join("checkpoint.bin"))?;
        report
    } else {
        let cfg = RunConfig {
            name: name.clone(),
            model: exp.model.clone(),
            train: exp.train.clone(),
        };
        run(&cfg, &exp.domains, exp.zero_shot.as_ref(), &mut |r| log.record(&names, None, &r))?
    };
    log.finish()?;
    std::fs::write(dir.join("report.csv"), report.to_csv(&name))?;
    print_report(&report);
    println!("run directory {}", dir.display());
    Ok(())
}

fn eval(
    cli: &Cli,
    checkpoint: &Path,
    dataset: &str,
    frames: Option<&Path>,
    spec_path: Option<&Path>,
    test_frames: usize,
    donor: Option<&str>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let model = &ck.model;
    let registered = model.cfg.dataset_index(dataset).ok();
    let spec = match (spec_path, registered) {
        (Some(p), _) => load_spec(p)?,
        (None, Some(i)) => model.cfg.datasets[i].clone(),
        (None, None) => bail!(Usage(format!(
            "dataset `{dataset}` is not in the checkpoint; pass --dataset-spec and --zero-shot-donor-head"
        ))),
    };
    if spec.name != dataset {
        bail!(Usage(format!("spec names `{}`, expected `{dataset}`", spec.name)));
    }
    let route = match (donor, registered) {
        (Some(d), _) => model.cfg.dataset_index(d)?,
        (None, Some(i)) => i,
        (None, None) => bail!(Usage(format!("`{dataset}` needs --zero-shot-donor-head"))),
    };
    let test = match frames {
        Some(dir) => read_frame_dir(dir, &spec, 0, &mut DropCounter::default())?,
        None => Domain::synthetic(spec.clone(), 0, test_frames)?.test,
    };
    let domain = Domain {
        spec,
        train: Vec::new(),
        test,
    };
    let label = if donor.is_some() { format!("{dataset}@zero-shot") } else { dataset.to_string() };
    let mut report = EvalReport::default();
    score_domain(model, &mut report, &domain, route, &label)?;

    let dir = run_dir(cli, "eval")?;
    let mut echo = format!("checkpoint = {}\ndataset = {dataset}\n", checkpoint.display());
    if let Some(d) = donor {
        echo += &format!("zero_shot_donor_head = {d}\n");
    }
    std::fs::write(dir.join("config.txt"), echo)?;
    std::fs::write(dir.join("report.csv"), report.to_csv("eval"))?;
    print_report(&report);
    println!("run directory {}", dir.display());
    Ok(())
}

fn ablate(cli: &Cli, path: &Path, overrides: &Overrides) -> Result<()> {
    let c = load_config(path, overrides)?;
    let (matrix, seeds) = match matrix_from_config(&c) {
        Ok(m) => m,
        Err(mdf3d_core::Error::Config(msg)) if c.get("ablation.configs").unwrap_or("").trim().is_empty() => {
            bail!(Usage(msg))
        }
        Err(e) => return Err(e.into()),
    };
    let exp = Experiment::from_config(&c, cli.data_root.as_deref())?;
    let dir = run_dir(cli, "ablate")?;
    echo_config(&dir, &c)?;
    let names: Vec<String> = exp.domains.iter().map(|d| d.spec.name.clone()).collect();
    let mut log = LossLog::create(&dir.join("loss.jsonl"))?;
    let report = ablation_runner(&matrix, &exp.domains, &seeds, exp.zero_shot.as_ref(), &mut |config, seed, r| {
        log.record(&names, Some((config, seed)), &r)
    })?;
    log.finish()?;
    std::fs::write(dir.join("ablation.csv"), report.to_csv())?;
    for cfg in &matrix {
        if let Some(m) = report.median(&cfg.name, None, 0, ApMetric::ThreeD) {
            println!("{:<20} median Car AP_3D {m:6.2}", cfg.name);
        }
    }
    println!("run directory {}", dir.display());
    Ok(())
}
