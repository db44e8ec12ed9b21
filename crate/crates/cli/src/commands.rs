use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecgrecon::dataio::{
    build_pairs, load_weights, read_csv, save_weights, split_of, synth_generate, write_csv,
    DatasetPair, Manifest, Split, SynthConfig,
};
use ecgrecon::loss::LossParams;
use ecgrecon::masking::{apply_mask, mask_catalog, primer_mask, MaskConfig, MaskFile};
use ecgrecon::metrics::{
    evaluate, reports_to_csv, reports_to_summary_json, CopyPasteRecon, MetricScope, NoiseRecon,
    Reconstruct,
};
use ecgrecon::model::{Model, ModelConfig};
use ecgrecon::preprocess::{preprocess_record, PreprocessConfig};
use ecgrecon::train::{epoch_log_csv, train, TrainConfig};
use ecgrecon::EcgRecord;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ecgr",
    version,
    about = "12-lead ECG reconstruction pipeline: generate, mask, train, reconstruct, evaluate, report",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Worker threads for evaluation and training (default: ECGR_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: per-record CSVs, ground truth, manifest.
    Synth(SynthArgs),
    /// Apply a masking configuration to one record CSV.
    Mask(MaskArgs),
    /// Train the reconstruction model on a synth corpus.
    Train(TrainArgs),
    /// Reconstruct a masked CSV with the model or the CopyPaste baseline.
    Reconstruct(ReconstructArgs),
    /// Mask, reconstruct and score a corpus per configuration.
    Eval(EvalArgs),
    /// Render metric CSVs as a markdown table and SVG overlays.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of records.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (creates records/, ground_truth.json, manifest.json).
    #[arg(long)]
    out: PathBuf,
    /// Write raw source-rate records instead of preprocessed 512-point ones.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 50.0)]
    hr_min: f64,
    #[arg(long, default_value_t = 75.0)]
    hr_max: f64,
    #[arg(long, default_value_t = 0.36)]
    qt_min: f64,
    #[arg(long, default_value_t = 0.44)]
    qt_max: f64,
    #[arg(long, default_value_t = 0.10)]
    qrs_min: f64,
    #[arg(long, default_value_t = 0.14)]
    qrs_max: f64,
    #[arg(long, default_value_t = 0.012)]
    wander: f64,
    #[arg(long, default_value_t = 0.004)]
    noise: f64,
}

#[derive(Args)]
struct MaskArgs {
    /// Input record CSV (normalized, e.g. from `synth`).
    #[arg(long)]
    input: PathBuf,
    /// Mask name: C1..C5, C_I..C_V6, C_Rdm, C_real-life.
    #[arg(long)]
    config: String,
    /// Seed for the noise fill (and the C_Rdm window draw).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output masked CSV.
    #[arg(long)]
    out: PathBuf,
    /// Output mask JSON (defaults to <out>.mask.json).
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelSize {
    Desk,
    Default,
}

impl ModelSize {
    fn config(self) -> ModelConfig {
        match self {
            ModelSize::Desk => ModelConfig::desk(),
            ModelSize::Default => ModelConfig::default(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Mask configurations for training pairs: names or `all` (the 17-mask catalog).
    #[arg(long, default_value = "all")]
    configs: String,
    /// Composite loss weight; `inf` trains on the Pearson term alone;
    /// `sweep` trains one model per alpha in {0, 0.1, 0.5, 1, inf} and
    /// writes a comparison table next to the weights.
    #[arg(long, default_value = "0.1")]
    alpha: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weights file; the epoch log lands next to it as <out>.log.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    model: ModelSize,
    /// Checkpoint every N epochs into the weights file's directory.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Masked record CSV.
    #[arg(long)]
    input: PathBuf,
    /// Weights file (required for --method model).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Model)]
    method: Method,
    /// Mask JSON from the `mask` stage (required for --method copypaste).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    model: ModelSize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Model,
    Copypaste,
    Noise,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated mask names, or `all` for the 17-mask catalog.
    #[arg(long, default_value = "all")]
    configs: String,
    #[arg(long, value_enum, default_value_t = Method::Copypaste)]
    method: Method,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    model: ModelSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which manifest split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Score full leads or only the masked cells.
    #[arg(long, value_enum, default_value_t = ScopeArg::Full)]
    scope: ScopeArg,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Full,
    Masked,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric CSV from `eval`.
    #[arg(long)]
    metrics: PathBuf,
    /// Output directory for report.md and SVG plots.
    #[arg(long)]
    out: PathBuf,
    /// Original record CSV for signal overlays.
    #[arg(long)]
    original: Option<PathBuf>,
    /// Reconstructed record CSV for signal overlays.
    #[arg(long)]
    reconstructed: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .or_else(|| std::env::var("ECGR_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        
        ecgrecon::set_worker_threads(n);
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Mask(args) => cmd_mask(args),
        Command::Train(args) => cmd_train(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        num_records: args.n,
        heart_rate_bpm: (args.hr_min, args.hr_max),
        qt_s: (args.qt_min, args.qt_max),
        qrs_s: (args.qrs_min, args.qrs_max),
        baseline_wander_amp: args.wander,
        noise_std: args.noise,
        seed: args.seed,
        ..Default::default()
    };
    let (mut records, truth) = synth_generate(&config)?;
    if !args.raw {
        let pp = PreprocessConfig::default();
        records = records
            .iter()
            .map(|r| preprocess_record(r, &pp).map(|(rec, _)| rec))
            .collect::<ecgrecon::Result<_>>()?;
    }
    let records_dir = args.out.join("records");
    std::fs::create_dir_all(&records_dir)?;
    for record in &records {
        write_csv(record, &records_dir.join(format!("{}.csv", record.id)))?;
    }
    std::fs::write(
        args.out.join("ground_truth.json"),
        serde_json::to_string_pretty(&truth)?,
    )?;
    let manifest = Manifest::from_ids(records.iter().map(|r| r.id.as_str()));
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {} records to {} (train/val/test = {}/{}/{})",
        records.len(),
        args.out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn cmd_mask(args: MaskArgs) -> Result<()> {
    let record = read_csv(&args.input)?;
    if !record.is_normalized() {
        bail!(
            "input record is not normalized to [-1, 1]; run it through `synth` preprocessing first"
        );
    }
    let config = MaskConfig::parse(&args.config, args.seed)?;
    let mask = primer_mask(config, record.len())?;
    let masked = apply_mask(&record, &mask, args.seed)?;
    let mut out_record = record.clone();
    out_record.samples_mut().copy_from_slice(&masked.samples);
    write_csv(&out_record, &args.out)?;
    let mask_path = args
        .mask_out
        .unwrap_or_else(|| args.out.with_extension("mask.json"));
    std::fs::write(
        &mask_path,
        serde_json::to_string_pretty(&MaskFile::new(&config, &mask))?,
    )?;
    println!("wrote {} and {}", args.out.display(), mask_path.display());
    Ok(())
}

fn parse_configs(spec: &str, seed: u64) -> Result<Vec<MaskConfig>> {
    if spec == "all" {
        return Ok(mask_catalog());
    }
    spec.split(',')
        .map(|name| MaskConfig::parse(name.trim(), seed).map_err(Into::into))
        .collect()
}

fn parse_alpha(spec: &str) -> Result<LossParams> {
    if spec == "inf" || spec == "infinity" {
        return Ok(LossParams { pearson_only: true, ..Default::default() });
    }
    let alpha: f64 = spec.parse().context("--alpha expects a number or `inf`")?;
    Ok(LossParams { alpha, ..Default::default() })
}

fn load_corpus(dir: &Path) -> Result<(Vec<EcgRecord>, Manifest)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .context("manifest.json")?;
    let records_dir = dir.join("records");
    let mut ids: Vec<String> = manifest
        .train
        .iter()
        .chain(&manifest.val)
        .chain(&manifest.test)
        .cloned()
        .collect();
    ids.sort();
    let records: Result<Vec<EcgRecord>> = ids
        .iter()
        .map(|id| read_csv(&records_dir.join(format!("{id}.csv"))).map_err(Into::into))
        .collect();
    Ok((records?, manifest))
}

fn split_records(records: &[EcgRecord], split: SplitArg) -> Vec<EcgRecord> {
    records
        .iter()
        .filter(|r| match split {
            SplitArg::All => true,
            SplitArg::Train => split_of(&r.id) == Split::Train,
            SplitArg::Val => split_of(&r.id) == Split::Val,
            SplitArg::Test => split_of(&r.id) == Split::Test,
        })
        .cloned()
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (records, _) = load_corpus(&args.data)?;
    let train_recs = split_records(&records, SplitArg::Train);
    let val_recs = split_records(&records, SplitArg::Val);
    if train_recs.is_empty() {
        bail!("corpus has no training records");
    }
    let configs = parse_configs(&args.configs, args.seed)?;
    let pairs = build_pairs(&train_recs, &configs, args.seed)?;
    let val_pairs: Vec<DatasetPair> = build_pairs(&val_recs, &configs, args.seed)?;
    println!(
        "training on {} pairs ({} records x {} masks)",
        pairs.len(),
        train_recs.len(),
        configs.len(),
    );
    if args.alpha == "sweep" {
        return alpha_sweep(&args, &pairs, &val_pairs, &val_recs, &configs);
    }
    let loss = parse_alpha(&args.alpha)?;
    let (model, log) = train_one(&args, &pairs, &val_pairs, loss)?;
    save_weights(&model, &args.out)?;
    let log_path = log_path_for(&args.out);
    std::fs::write(&log_path, epoch_log_csv(&log))?;
    if let Some(last) = log.last() {
        println!(
            "final epoch {}: composite {:.6} mse {:.6} pearson {:.6}",
            last.epoch, last.composite, last.mse, last.pearson
        );
    }
    println!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

fn train_one(
    args: &TrainArgs,
    pairs: &[DatasetPair],
    val_pairs: &[DatasetPair],
    loss: LossParams,
) -> Result<(Model, Vec<ecgrecon::train::EpochLog>)> {
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        seed: args.seed,
        loss,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: if args.checkpoint_every > 0 {
            args.out.parent().map(|p| p.to_path_buf())
        } else {
            None
        },
        ..Default::default()
    };
    let mut model = Model::build(args.model.config(), args.seed)?;
    let (log, _) = train(&mut model, pairs, val_pairs, &config)?;
    Ok((model, log))
}

/// Trains one model per alpha in {0, 0.1, 0.5, 1, inf} and tabulates
/// validation-set PCC, RMSE, MAE and DTW per run.
fn alpha_sweep(
    args: &TrainArgs,
    pairs: &[DatasetPair],
    val_pairs: &[DatasetPair],
    val_recs: &[EcgRecord],
    configs: &[MaskConfig],
) -> Result<()> {
    if val_recs.is_empty() {
        bail!("alpha sweep needs a non-empty validation split");
    }
    let mut rows = Vec::new();
    for (label, loss) in [
        ("0", LossParams { alpha: 0.0, ..Default::default() }),
        ("0.1", LossParams { alpha: 0.1, ..Default::default() }),
        ("0.5", LossParams { alpha: 0.5, ..Default::default() }),
        ("1", LossParams { alpha: 1.0, ..Default::default() }),
        ("inf", LossParams { pearson_only: true, ..Default::default() }),
    ] {
        let (model, _) = train_one(args, pairs, val_pairs, loss)?;
        let weights = sweep_weights_path(&args.out, label);
        save_weights(&model, &weights)?;
        let reports = evaluate(&model, val_recs, configs, args.seed, MetricScope::FullLead)?;
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for report in &reports {
            for rec in &report.records {
                for lead in &rec.leads {
                    if lead.pcc.is_finite() {
                        sums[0] += lead.pcc;
                        sums[1] += lead.rmse;
                        sums[2] += lead.mae_mean;
                        sums[3] += lead.dtw;
                        count += 1;
                    }
                }
            }
        }
        let mean = |i: usize| sums[i] / count.max(1) as f64;
        println!(
            "alpha {label}: PCC {:.3} RMSE {:.3} MAE {:.3} DTW {:.3}",
            mean(0),
            mean(1),
            mean(2),
            mean(3)
        );
        rows.push(format!(
            "| {label} | {:.3} | {:.3} | {:.3} | {:.3} |",
            mean(0),
            mean(1),
            mean(2),
            mean(3)
        ));
    }
    let mut table = String::from(
        "# Alpha sweep (validation split)\n\n| alpha | PCC | RMSE | MAE | DTW |\n|---|---|---|---|---|\n",
    );
    table.push_str(&rows.join("\n"));
    table.push('\n');
    let table_path = args.out.with_extension("sweep.md");
    std::fs::write(&table_path, table)?;
    println!("wrote {} and per-alpha weights", table_path.display());
    Ok(())
}

fn sweep_weights_path(out: &Path, label: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}.alpha-{label}.{ext}"),
        None => format!("{stem}.alpha-{label}"),
    };
    out.with_file_name(name)
}

fn log_path_for(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".log.csv");
    weights.with_file_name(name)
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let record = read_csv(&args.input)?;
    let mask_file: Option<MaskFile> = match &args.mask {
        Some(path) => Some(serde_json::from_str(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let mask = match &mask_file {
        Some(f) => f.to_mask()?,
        None => ecgrecon::PrimerMask::full(record.len()),
    };
    let masked = ecgrecon::MaskedEcg {
        samples: record.samples().to_vec(),
        mask,
        source_id: record.id.clone(),
        sampling_rate: record.sampling_rate,
    };
    let recon = match args.method {
        Method::Copypaste => {
            if mask_file.is_none() {
                bail!("--method copypaste requires --mask <mask.json>");
            }
            CopyPasteRecon.reconstruct(&masked)?
        }
        Method::Noise => NoiseRecon { seed: 0 }.reconstruct(&masked)?,
        Method::Model => {
            let weights = args
                .weights
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--method model requires --weights"))?;
            let model = load_weights(weights, args.model.config())?;
            model.reconstruct(&masked)?
        }
    };
    write_csv(&recon, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (records, _) = load_corpus(&args.data)?;
    let subset = split_records(&records, args.split);
    if subset.is_empty() {
        bail!("no records in the requested split");
    }
    let configs = parse_configs(&args.configs, args.seed)?;
    let scope = match args.scope {
        ScopeArg::Full => MetricScope::FullLead,
        ScopeArg::Masked => MetricScope::MaskedOnly,
    };
    let model;
    let reconstructor: &dyn Reconstruct = match args.method {
        Method::Copypaste => &CopyPasteRecon,
        Method::Noise => &NoiseRecon { seed: args.seed },
        Method::Model => {
            let weights = args
                .weights
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--method model requires --weights"))?;
            model = load_weights(weights, args.model.config())?;
            &model
        }
    };
    let reports = evaluate(reconstructor, &subset, &configs, args.seed, scope)?;
    std::fs::write(&args.out_csv, reports_to_csv(&reports))?;
    if let Some(json) = &args.out_json {
        std::fs::write(json, reports_to_summary_json(&reports)?)?;
    }
    println!(
        "evaluated {} records x {} configs with {}; wrote {}",
        subset.len(),
        configs.len(),
        reconstructor.method_name(),
        args.out_csv.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let csv = std::fs::read_to_string(&args.metrics)?;
    let markdown = crate::report::metrics_markdown(&csv)?;
    let md_path = args.out.join("report.md");
    std::fs::write(&md_path, markdown)?;
    println!("wrote {}", md_path.display());
    if let (Some(orig), Some(recon)) = (&args.original, &args.reconstructed) {
        let original = read_csv(orig)?;
        let reconstructed = read_csv(recon)?;
        let svg = crate::report::overlay_svg(&original, &reconstructed)?;
        let svg_path = args.out.join(format!("overlay_{}.svg", reconstructed.id));
        std::fs::write(&svg_path, svg)?;
        println!("wrote {}", svg_path.display());
    }
    Ok(())
}
