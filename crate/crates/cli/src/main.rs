use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use uaan::data::{generate_synthetic, load_clip, DatasetManifest, Split, SynthConfig};
use uaan::detector::{detect_clips, from_json_lines, to_json_lines, Thresholds};
use uaan::gradcheck::{gradcheck_final_loss, GradCheckOptions};
use uaan::metrics::{evaluate, EvalOptions};
use uaan::train::{loss_log_csv, train_from, Checkpoint, RunConfig, TrainState};

/// Open-set temporal action detection with evidential uncertainty.
#[derive(Parser)]
#[command(name = "uaan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset.
    GenSynth(GenSynthArgs),
    /// Train a model from a TOML or JSON run config.
    Train(TrainArgs),
    /// Run detection on clip files and print JSON lines.
    Detect(DetectArgs),
    /// Score detections against a manifest.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Training clips.
    #[arg(long, default_value_t = 64)]
    clips: usize,
    /// Test clips; defaults to the training count.
    #[arg(long)]
    test_clips: Option<usize>,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Clip files to run on.
    #[arg(long, num_args = 1.., required_unless_present = "manifest")]
    clip: Vec<PathBuf>,
    /// Run on every clip of a manifest instead.
    #[arg(long, conflicts_with = "clip")]
    manifest: Option<PathBuf>,
    /// Uncertainty threshold; defaults to the checkpoint's config.
    #[arg(long)]
    u_tau: Option<f64>,
    /// Actionness threshold; defaults to the checkpoint's config.
    #[arg(long)]
    a_tau: Option<f64>,
    #[arg(long)]
    nms_tiou: Option<f64>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6,0.7")]
    tiou: Vec<f64>,
    /// Overlap that ties a detection to a ground-truth segment.
    #[arg(long, default_value_t = 0.5)]
    ood_tiou: f64,
    #[arg(long, default_value_t = 0.5)]
    a_tau: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write `metric,value` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let base = SynthConfig {
        num_classes: a.classes,
        clips: a.clips,
        frames: a.frames,
        objects: a.objects,
        feature_dim: a.feature_dim,
        noise: a.noise,
        separation: a.separation,
        ..SynthConfig::default()
    };
    for (split, clips) in [(Split::Train, a.clips), (Split::Test, a.test_clips.unwrap_or(a.clips))] {
        let cfg = SynthConfig { split, clips, ..base.clone() };
        let data = generate_synthetic(&cfg, a.seed)?;
        data.write(&a.out_dir)?;
        println!("wrote {} {} clips to {}", clips, split.name(), a.out_dir.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = RunConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let manifest_path = config
        .train_manifest
        .clone()
        .context("config has no train_manifest")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    if manifest.split != Split::Train {
        bail!("{} is a {} manifest", manifest_path.display(), manifest.split.name());
    }
    let clips = manifest.load_clips(&manifest_path)?;
    fs::create_dir_all(&a.out)?;

    let state = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config.fingerprint() != config.fingerprint() {
                bail!("{} was trained with a different config", path.display());
            }
            ckpt.state
        }
        None => TrainState::fresh(&config)?,
    };
    println!(
        "training {} parameters on {} clips, epochs {}..={}",
        state.model.num_parameters(),
        clips.len(),
        state.epoch + 1,
        config.epochs
    );
    let start = Instant::now();
    let (state, log) = train_from(&config, &clips, state, |row| {
        println!(
            "epoch {:>3}  L_final {:.4}  L_total {:.4}  {:.1}s",
            row.epoch,
            row.final_loss,
            row.total,
            start.elapsed().as_secs_f64()
        );
    })?;

    let log_path = a.out.join("loss_log.csv");
    let csv = loss_log_csv(&log);
    if a.resume.is_some() && log_path.exists() {
        let body: String = csv.lines().skip(1).map(|l| format!("{l}\n")).collect();
        fs::OpenOptions::new().append(true).open(&log_path)?.write_all(body.as_bytes())?;
    } else {
        fs::write(&log_path, csv)?;
    }
    let ckpt = Checkpoint::new(config.clone(), state);
    ckpt.save(&a.out.join("checkpoint.ckpt"))?;
    println!("wrote {}", a.out.display());

    if let Some(test_path) = &config.test_manifest {
        let test = DatasetManifest::load(test_path)?;
        let clips = test.load_clips(test_path)?;
        let dets = detect_clips(ckpt.model(), clips.iter().map(|(c, _)| c), &config.thresholds)?;
        fs::write(a.out.join("detections.jsonl"), to_json_lines(&dets))?;
        let opts = EvalOptions {
            a_tau: config.thresholds.a_tau,
            ..EvalOptions::default()
        };
        let report = evaluate(&dets, &test, &opts)?;
        fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        print!("{}", report.table());
    }
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let defaults = ckpt.config.thresholds;
    let th = Thresholds {
        u_tau: a.u_tau.unwrap_or(defaults.u_tau),
        a_tau: a.a_tau.unwrap_or(defaults.a_tau),
        nms_tiou: a.nms_tiou.unwrap_or(defaults.nms_tiou),
    };
    let clips = match &a.manifest {
        Some(path) => DatasetManifest::load(path)?
            .load_clips(path)?
            .into_iter()
            .map(|(c, _)| c)
            .collect(),
        None => a
            .clip
            .iter()
            .map(|p| load_clip(p).map(|(c, _)| c).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<Vec<_>>>()?,
    };
    let text = to_json_lines(&detect_clips(ckpt.model(), &clips, &th)?);
    match &a.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let dets = from_json_lines(&read(&a.detections)?)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let opts = EvalOptions {
        tious: a.tiou,
        ood_tiou: a.ood_tiou,
        a_tau: a.a_tau,
    };
    let report = evaluate(&dets, &manifest, &opts)?;
    print!("{}", report.table());
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let start = Instant::now();
    let opts = GradCheckOptions {
        eps: a.eps,
        ..GradCheckOptions::default()
    };
    let report = gradcheck_final_loss(a.seed, opts)?;
    println!("{:<32} {:>6} {:>12}", "parameter", "size", "max rel err");
    for p in &report.params {
        println!("{:<32} {:>6} {:>12.3e}", p.name, p.size, p.max_rel_error);
    }
    let ok = report.max_rel_error < a.tolerance;
    println!(
        "max relative error {:.3e} (tolerance {:.0e}) in {:.2}s: {}",
        report.max_rel_error,
        a.tolerance,
        start.elapsed().as_secs_f64(),
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Detect(a) => detect(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
