use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use csil_core::baselines::Strategy;
use csil_core::doc::{degree_of_conflict, observed_mean_similarity, optimal_doc, similarity_matrix};
use csil_core::harness::{
    dataset_for, emit_report, load_checkpoint, run_with_models, save_checkpoint, Checkpoint, ExperimentConfig,
    ExperimentReport, ExtractorChoice, ReportFormat,
};
use csil_core::model::HeadKind;
use csil_core::signal::{make_dataset, save_dataset, write_manifest};

#[derive(Parser)]
#[command(name = "csil", version, about = "Channel-separated class-incremental learning on synthetic RF fingerprints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy through every stage and save its checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "csil")]
        strategy: Strategy,
    },
    /// Compare strategies on one schedule.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategy names; defaults to csil,finetune,lwf,ewc.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        /// Also write each strategy's final checkpoint.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Full CSIL against its no-CS, no-EWC and no-KD removals.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fingerprint conflict analysis of a checkpoint.
    Doc {
        checkpoint: PathBuf,
        /// Write the fingerprint similarity matrix here as CSV.
        #[arg(long)]
        similarity: Option<PathBuf>,
    },
    /// Synthesize a dataset container and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        devices: usize,
        #[arg(long, default_value_t = 200)]
        samples_per_device: usize,
        #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Device table as CSV; defaults to `out` with a `.csv` extension.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Extractor {
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    ZeroBias,
    Regular,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

/// Flags shared by the training commands. Anything given here overrides
/// the config file, which overrides the built-in defaults.
#[derive(Args)]
struct RunArgs {
    /// TOML file with `ExperimentConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    initial_devices: Option<usize>,
    #[arg(long)]
    increment: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    samples_per_device: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    /// Load this container instead of synthesizing data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    initial_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    l2_factor: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    extractor: Option<Extractor>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    ce_weight: Option<f64>,
    #[arg(long)]
    kd_weight: Option<f64>,
    #[arg(long)]
    ewc_weight: Option<f64>,
    /// Run csil without channel separation.
    #[arg(long)]
    no_cs: bool,
    #[arg(long)]
    no_kd: bool,
    #[arg(long)]
    no_ewc: bool,
    /// Keep old fingerprint blocks frozen in CSIL-family strategies.
    #[arg(long)]
    freeze_old_fingerprints: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
    /// Exit with status 2 if any invariant check failed.
    #[arg(long)]
    strict: bool,
}

/// Copies every `Some` flag onto the config field of the same name.
macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),+) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })+
    };
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        apply!(
            cfg,
            self,
            devices,
            initial_devices,
            increment,
            stages,
            samples_per_device,
            snr_db,
            initial_epochs,
            epochs,
            batch_size,
            learning_rate,
            momentum,
            l2_factor,
            temperature,
            hidden,
            features,
            ce_weight,
            kd_weight,
            ewc_weight,
            seed,
            output_dir
        );
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if let Some(e) = self.extractor {
            cfg.extractor = match e {
                Extractor::Mlp => ExtractorChoice::Mlp,
                Extractor::Cnn => ExtractorChoice::Cnn,
            };
        }
        if let Some(h) = self.head {
            cfg.head = match h {
                HeadArg::ZeroBias => HeadKind::ZeroBias,
                HeadArg::Regular => HeadKind::Regular,
            };
        }
        cfg.channel_separation &= !self.no_cs;
        cfg.kd &= !self.no_kd;
        cfg.ewc &= !self.no_ewc;
        cfg.train_old_fingerprints &= !self.freeze_old_fingerprints;
        Ok(cfg)
    }

    fn formats(&self) -> Vec<ReportFormat> {
        match self.format {
            Format::Csv => vec![ReportFormat::Csv],
            Format::Json => vec![ReportFormat::Json],
            Format::Both => vec![ReportFormat::Csv, ReportFormat::Json],
        }
    }
}

fn print_summary(report: &ExperimentReport) {
    println!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}",
        "strategy", "acc_avg", "acc_new", "acc_old", "forget"
    );
    for r in &report.strategies {
        let last = r.last();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{:<12} {:>9.2} {:>9.2} {:>9} {:>9}",
            r.strategy.name(),
            last.acc_avg,
            last.acc_new,
            fmt(last.acc_old),
            fmt(r.forgetting_per_stage())
        );
    }
    for v in &report.violations {
        eprintln!("invariant violated: {v}");
    }
}

fn run(cfg: &ExperimentConfig, args: &RunArgs, checkpoints: bool) -> Result<ExitCode> {
    cfg.validate()?;
    let ds = dataset_for(cfg).context("preparing dataset")?;
    let out = run_with_models(cfg, &ds)?;
    let written = emit_report(&out.report, &cfg.output_dir, &args.formats())?;
    print_summary(&out.report);
    if checkpoints {
        let (m0, c0) = &out.initial;
        let p = cfg.output_dir.join("checkpoint_stage0.json");
        save_checkpoint(&Checkpoint::new(None, m0.clone(), c0.clone()), &p)?;
        for (s, m, c) in &out.finals {
            let p = cfg.output_dir.join(format!("checkpoint_{}.json", s.name()));
            save_checkpoint(&Checkpoint::new(Some(*s), m.clone(), c.clone()), &p)?;
        }
    }
    println!("wrote {} report files to {}", written.len(), cfg.output_dir.display());
    if args.strict && !out.report.violations.is_empty() {
        eprintln!("{} invariant check(s) failed", out.report.violations.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn doc_report(path: &Path, similarity: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    let w = ckpt.model.class_weights();
    let c = w.rows();
    if let Some(s) = ckpt.strategy {
        println!("strategy   {s}");
    }
    println!("stage      {}", ckpt.context.stage);
    println!("classes    {c}");
    println!("doc        {:.6}", degree_of_conflict(w)?);
    if c >= 2 {
        println!("optimum    {:.6}", optimal_doc(c)?);
        println!("mean sim   {:.6} (optimum {:.6})", observed_mean_similarity(w)?, -1.0 / (c as f64 - 1.0));
    }
    let sim = similarity_matrix(w)?;
    let spans = &ckpt.context.channel_map.stages;
    for (k, span) in spans.iter().enumerate() {
        if span.classes.len() >= 2 {
            let block = w.slice_rows(span.classes.start, span.classes.end)?;
            println!("stage {k} doc {:.6} ({} classes)", degree_of_conflict(&block)?, span.classes.len());
        } else {
            println!("stage {k} single class");
        }
        for (j, other) in spans.iter().enumerate().skip(k + 1) {
            let m = sim.block_max_abs(span.classes.clone(), other.classes.clone());
            println!("  max |sim| stage {k} vs {j}: {m:e}");
        }
    }
    if let Some(p) = similarity {
        sim.save_csv(p)?;
        println!("similarity matrix written to {}", p.display());
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { run: args, strategy } => {
            let mut cfg = args.config()?;
            cfg.strategies = vec![strategy];
            run(&cfg, &args, true)
        }
        Command::Bench {
            run: args,
            strategies,
            checkpoints,
        } => {
            let mut cfg = args.config()?;
            if let Some(s) = strategies {
                cfg.strategies = s;
            }
            run(&cfg, &args, checkpoints)
        }
        Command::Ablate { run: args } => {
            let mut cfg = args.config()?;
            if !(cfg.channel_separation && cfg.kd && cfg.ewc) {
                bail!("ablate runs every removal itself; drop --no-cs/--no-kd/--no-ewc");
            }
            cfg.strategies = Strategy::ABLATION.to_vec();
            run(&cfg, &args, false)
        }
        Command::Doc { checkpoint, similarity } => {
            doc_report(&checkpoint, similarity.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData {
            out,
            devices,
            samples_per_device,
            snr_db,
            seed,
            manifest,
        } => {
            let ds = make_dataset(devices, samples_per_device, snr_db, seed)?;
            save_dataset(&ds, &out)?;
            let manifest = manifest.unwrap_or_else(|| out.with_extension("csv"));
            write_manifest(&ds, &manifest)?;
            println!(
                "{} devices, {} train / {} val samples -> {}",
                ds.device_count,
                ds.train.len(),
                ds.val.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
