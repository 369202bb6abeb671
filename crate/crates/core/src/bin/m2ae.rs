//! `m2ae`: data generation, pretraining, fingerprint extraction,
//! cross-modal reconstruction, linear probing and gradient auditing.
//!
//! Exit status is 0 on success, 2 for invalid input or configuration and 1
//! for any other failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use m2ae::config::RunConfig;
use m2ae::model::{load_checkpoint, Checkpoint, ModelParams};
use m2ae::numeric::Primitive;
use m2ae::probe::{
    evaluate_probe, extract_fingerprints, parse_labels_csv, probe_train_subjects, reconstruct_cross, Direction,
    FinetuneConfig, FingerprintSet, ProbeConfig, Setting, Source, Task,
};
use m2ae::signals::{generate_dataset, load_dataset, save_dataset, split_by_subject, Dataset, Split};
use m2ae::training::{gradcheck, output_paths, warm_start_init, GradcheckConfig, TrainMode, Trainer};

#[derive(Parser)]
#[command(name = "m2ae", version, about = "Cross-modal masked autoencoder for paired ECG/PPG segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired dataset and report its subject split.
    GenData(GenDataArgs),
    /// Pretrain a model and write metrics.csv, best.m2ck and last.m2ck.
    Pretrain(PretrainArgs),
    /// Write frozen-encoder fingerprints of every segment as CSV.
    Extract(ExtractArgs),
    /// Reconstruct one modality from the other on the test split.
    Reconstruct(ReconstructArgs),
    /// Fit a linear probe on fingerprints and report held-out metrics.
    Probe(ProbeArgs),
    /// Compare reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(m2ae::Error::from).with_context(|| path_context(path))?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    subjects: u32,
    #[arg(long)]
    pairs_per_subject: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training mode, overriding `train.mode`: cross_modal,
    /// single_modal_ecg or single_modal_ppg.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Continue from a last.m2ck written by an earlier run.
    #[arg(long, conflicts_with_all = ["warm_start_ecg", "warm_start_ppg"])]
    resume: Option<PathBuf>,
    /// Single-modal ECG checkpoint to initialize the ECG half from.
    #[arg(long, requires = "warm_start_ppg")]
    warm_start_ecg: Option<PathBuf>,
    /// Single-modal PPG checkpoint to initialize the PPG half from.
    #[arg(long, requires = "warm_start_ecg")]
    warm_start_ppg: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// ecg, ppg or paired.
    #[arg(long)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// ecg2ppg or ppg2ecg.
    #[arg(long)]
    direction: Direction,
    /// frozen or finetune.
    #[arg(long)]
    setting: Setting,
    /// Output directory for per-segment CSVs and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Split settings come from `data.*` keys.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = FinetuneConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    fingerprints: PathBuf,
    /// CSV with header subject_id,segment_index,label.
    #[arg(long)]
    labels: PathBuf,
    /// binary, multiclass or regression.
    #[arg(long)]
    task: Task,
    /// Metric report file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().l2)]
    l2: f64,
    /// Fraction of subjects held out for scoring.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GradcheckConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = GradcheckConfig::default().coords_per_block)]
    coords_per_block: usize,
    /// Scales the adjoint of one primitive, as PRIMITIVE or PRIMITIVE:FACTOR.
    #[arg(long, hide = true)]
    corrupt_adjoint: Option<String>,
}

fn path_context(path: &Path) -> String {
    format!("reading {}", path.display())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| path_context(path))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| path_context(path))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dataset = generate_dataset(args.subjects, args.pairs_per_subject, args.seed)?;
    let split = split_by_subject(&dataset, cfg.split, cfg.split_seed)?;
    save_dataset(&dataset, &args.out)?;
    println!("wrote {} pairs from {} subjects to {}", dataset.len(), args.subjects, args.out.display());
    let assignment = split.split.as_ref().expect("split assigned");
    for s in [Split::Train, Split::Valid, Split::Test] {
        let subjects = assignment.values().filter(|&&v| v == s).count();
        println!("{s}: {subjects} subjects, {} pairs", split.indices_in(s).len());
    }
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(mode) = args.mode {
        cfg.train.mode = mode;
    }
    let dataset = split_by_subject(&read_dataset(&args.data)?, cfg.split, cfg.split_seed)?;
    let mut trainer = if let Some(path) = &args.resume {
        Trainer::resume(&dataset, &read_checkpoint(path)?, cfg.train, cfg.loss, cfg.augment)?
    } else {
        let params = match (cfg.train.mode, &args.warm_start_ecg, &args.warm_start_ppg) {
            (TrainMode::CrossModal, Some(e), Some(p)) => {
                let fresh = ModelParams::init_cross_modal(cfg.model, cfg.train.seed)?;
                warm_start_init(&fresh, &read_checkpoint(e)?.params, &read_checkpoint(p)?.params)?
            }
            (_, Some(_), _) => bail!(m2ae::Error::InvalidInput("warm start needs train.mode = cross_modal".into())),
            (TrainMode::CrossModal, ..) => ModelParams::init_cross_modal(cfg.model, cfg.train.seed)?,
            (TrainMode::SingleModal(m), ..) => ModelParams::init_single_modal(cfg.model, m, cfg.train.seed)?,
        };
        Trainer::new(&dataset, params, cfg.train, cfg.loss, cfg.augment)?
    };
    fs::create_dir_all(&args.out)?;
    write(&args.out.join("config.txt"), cfg.to_text())?;
    let out = trainer.run(Some(&args.out))?;
    for r in &out.log {
        println!("epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}", r.epoch, r.lr, r.train.total, r.val_total);
    }
    let [metrics, best, last] = output_paths(&args.out);
    println!(
        "{} epochs{}; wrote {}, {} and {}",
        out.log.len(),
        if out.stopped_early { " (early stop)" } else { "" },
        metrics.display(),
        best.display(),
        last.display()
    );
    Ok(())
}

fn extract(args: &ExtractArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.ckpt)?;
    let dataset = read_dataset(&args.data)?;
    let set = extract_fingerprints(&ckpt.params, &dataset.pairs, args.source)?;
    write(&args.out, set.to_csv())?;
    println!("wrote {} fingerprints of dimension {} to {}", set.len(), set.d_enc(), args.out.display());
    Ok(())
}

fn reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let ckpt = read_checkpoint(&args.ckpt)?;
    let dataset = split_by_subject(&read_dataset(&args.data)?, cfg.split, cfg.split_seed)?;
    let part = |s: Split| dataset.indices_in(s).into_iter().map(|i| dataset.pairs[i].clone()).collect::<Vec<_>>();
    let (train, test) = (part(Split::Train), part(Split::Test));
    let ft = FinetuneConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
    };
    let finetune = (args.setting == Setting::DecoderFinetune).then_some((train.as_slice(), &ft));
    let result = reconstruct_cross(&ckpt.params, &test, args.direction, args.setting, finetune)?;
    fs::create_dir_all(&args.out)?;
    let mut report = format!(
        "{{\n  \"direction\": \"{}\",\n  \"setting\": \"{}\",\n  \"segments\": {},\n  \"mae\": {}\n}}\n",
        args.direction,
        args.setting,
        result.rows.len(),
        result.mae
    );
    for row in &result.rows {
        let name = format!("{}_{}_{}.csv", args.direction, row.subject_id, row.segment_index);
        write(&args.out.join(name), row.to_csv())?;
    }
    write(&args.out.join("report.txt"), &report)?;
    report.insert_str(0, &format!("{} test segments reconstructed\n", result.rows.len()));
    print!("{report}");
    Ok(())
}

fn probe(args: &ProbeArgs) -> Result<()> {
    let text = fs::read_to_string(&args.fingerprints).map_err(m2ae::Error::from)?;
    let set = FingerprintSet::from_csv(&text)?;
    let labels = parse_labels_csv(&fs::read_to_string(&args.labels).map_err(m2ae::Error::from)?)?;
    let train = probe_train_subjects(&set, args.test_fraction, args.seed)?;
    let config = ProbeConfig { l2: args.l2, seed: args.seed, ..ProbeConfig::default() };
    let outcome = evaluate_probe(&set, &labels, &train, args.task, &config)?;
    write(&args.out, outcome.test.to_string())?;
    println!(
        "{} probe on {} training and {} held-out rows ({} iterations)",
        args.task, outcome.train_rows, outcome.test_rows, outcome.model.iterations
    );
    for (name, value) in outcome.test.entries() {
        println!("  {name:<9} {value:.4}  (train {:.4})", outcome.train.get(name).unwrap_or(f64::NAN));
    }
    Ok(())
}

fn parse_fault(spec: &str) -> Result<(Primitive, f64)> {
    let (name, factor) = spec.split_once(':').unwrap_or((spec, "2"));
    let primitive: Primitive = name.parse()?;
    let factor: f64 = factor.parse().map_err(|_| m2ae::Error::InvalidValue {
        key: "corrupt-adjoint".into(),
        reason: format!("`{factor}` is not a number"),
    })?;
    Ok((primitive, factor))
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<bool> {
    let cfg = args.config.load()?;
    let fault = args.corrupt_adjoint.as_deref().map(parse_fault).transpose()?;
    let config = GradcheckConfig {
        model: cfg.model,
        batch_size: args.batch_size,
        coords_per_block: args.coords_per_block,
        seed: args.seed,
        weights: cfg.loss,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&config, fault)?;
    for b in &report.blocks {
        let verdict = if b.max_rel_error <= report.tolerance { "ok" } else { "FAIL" };
        println!(
            "{:<36} {:>5} coords  max rel {:.3e}  max abs {:.3e}  {verdict}",
            b.name, b.coords, b.max_rel_error, b.max_abs_error
        );
    }
    let failures = report.failures().len();
    println!(
        "{} blocks, max relative error {:.3e}, tolerance {:.0e}: {}",
        report.blocks.len(),
        report.max_rel_error(),
        report.tolerance,
        if failures == 0 { "PASS".to_string() } else { format!("FAIL ({failures} blocks)") }
    );
    Ok(failures == 0)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Pretrain(a) => pretrain(a)?,
        Command::Extract(a) => extract(a)?,
        Command::Reconstruct(a) => reconstruct(a)?,
        Command::Probe(a) => probe(a)?,
        Command::Gradcheck(a) => {
            if !gradcheck_cmd(a)? {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let input = err.chain().any(|e| e.downcast_ref::<m2ae::Error>().is_some_and(m2ae::Error::is_input_error));
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}
