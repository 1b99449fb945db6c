//! `triprec` command-line front end.
//!
//! Settings come from one TOML file (`--config`); flags override it. The
//! output directory is `--out-dir`, or `TRIPREC_OUT_DIR` when the flag is
//! absent.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use triprec::data::synth::{generate_synthetic, SynthSpec};
use triprec::data::{
    build_dataset, ingest_checkins, ingest_kg, load_dataset, save_dataset, CheckinFormat, Dataset, Split, TravelRecord,
};
use triprec::eval::{evaluate_model, evaluate_popularity, format_reports, MetricReport};
use triprec::plot::{case_panels, render_svg, CasePanel};
use triprec::rng::{stream_rng, Stream};
use triprec::train::{resume, run_ablation, train, Checkpoint, EpochLog, CHECKPOINT_FILE};
use triprec::{Execution, RunConfig, Variant};

#[derive(Parser)]
#[command(
    name = "triprec",
    version,
    about = "Out-of-town trip recommendation: data, training, evaluation"
)]
struct Cli {
    /// TOML run configuration. Flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for everything a command writes.
    #[arg(long, global = true, env = "TRIPREC_OUT_DIR", default_value = "triprec-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, normalize and split raw check-ins into `<out>/dataset`.
    Ingest(IngestArgs),
    /// Write a planted synthetic corpus and its processed dataset.
    GenSynth(SynthArgs),
    /// Train a model; checkpoints go to `<out>/checkpoint.json`.
    Train(TrainArgs),
    /// Score a checkpoint (and optionally the popularity baseline).
    Evaluate(EvalArgs),
    /// Recommend a trip for one user and print raw POI ids, one per line.
    Recommend(RecommendArgs),
    /// Train and score each variant at several seeds.
    Ablate(AblateArgs),
    /// Draw truth and recommendations for one record as SVG.
    PlotCase(PlotArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Processed dataset directory (defaults to `<out>/dataset` if present).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Raw check-in TSV, used when no processed dataset is given.
    #[arg(long)]
    checkins: Option<PathBuf>,
    /// Knowledge-graph TSV (`poi \t relation \t entity`).
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    pois_per_region: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    /// Category shift in the second half of every trip.
    #[arg(long)]
    drift: Option<usize>,
    /// Generator seed (independent of the training seed).
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Sequential => Execution::Sequential,
            ExecArg::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    /// full, wo_KS, wo_OD or wo_SI.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

#[derive(Args)]
struct EvalOverrides {
    #[arg(long)]
    top_p: Option<f64>,
    /// Comma-separated sampling seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Forbid repeated intermediate POIs.
    #[arg(long)]
    dedup: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainOverrides,
    /// Continue from `<out>/checkpoint.json`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eval: EvalOverrides,
    /// Checkpoint to score (defaults to `<out>/checkpoint.json`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also score the popularity baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct RecommendArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// User whose hometown history drives the recommendation.
    #[arg(long)]
    user: String,
    /// Raw origin POI id (defaults to the user's recorded trip).
    #[arg(long)]
    origin: Option<usize>,
    /// Raw destination POI id (defaults to the user's recorded trip).
    #[arg(long)]
    destination: Option<usize>,
    /// Trip length including both endpoints.
    #[arg(long)]
    stops: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long)]
    dedup: bool,
    /// Also write an SVG of the recommendation here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    eval: EvalOverrides,
    /// Comma-separated variants (default: all four).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Record to draw (defaults to the first record of the split).
    #[arg(long)]
    user: Option<String>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    /// SVG path (defaults to `<out>/case_<user>.svg`).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    let out = cli.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Ingest(a) => ingest(&mut cfg, &out, a),
        Command::GenSynth(a) => gen_synth(&mut cfg, &out, a),
        Command::Train(a) => run_train(&mut cfg, cli.config.is_some(), &out, a),
        Command::Evaluate(a) => evaluate(&cli.config, &out, a),
        Command::Recommend(a) => recommend(&out, a),
        Command::Ablate(a) => ablate(&mut cfg, &out, a),
        Command::PlotCase(a) => plot_case(&out, a),
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.dataset {
        cfg.data.dataset = Some(p.clone());
    }
    if let Some(p) = &a.checkins {
        cfg.data.checkins = Some(p.clone());
    }
    if let Some(p) = &a.kg {
        cfg.data.kg = Some(p.clone());
    }
    if let Some(s) = a.split_seed {
        cfg.data.split_seed = s;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainOverrides) {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(d) = a.dim {
        cfg.model.dim = d;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.optimizer.lr = lr;
    }
    if let Some(e) = a.execution {
        cfg.execution = e.into();
    }
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalOverrides) {
    if let Some(p) = a.top_p {
        cfg.eval.top_p = p;
    }
    if let Some(s) = &a.seeds {
        cfg.eval.seeds = s.clone();
    }
    if a.dedup {
        cfg.eval.dedup = true;
    }
}

/// Builds the dataset from raw files named in the config.
fn build_from_raw(cfg: &RunConfig) -> Result<Dataset> {
    let Some(path) = &cfg.data.checkins else {
        bail!("no check-in file given (use --checkins or [data].checkins)");
    };
    let checkins = ingest_checkins(path, CheckinFormat::Tsv).with_context(|| format!("reading {}", path.display()))?;
    let triples = match &cfg.data.kg {
        Some(kg) => ingest_kg(kg).with_context(|| format!("reading {}", kg.display()))?,
        None => Vec::new(),
    };
    Ok(build_dataset(
        &checkins,
        &triples,
        &cfg.data.filter,
        cfg.data.split_seed,
    )?)
}

/// The processed dataset from the config, raw files, or `<out>/dataset`.
fn load_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    if let Some(dir) = &cfg.data.dataset {
        return load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()));
    }
    if cfg.data.checkins.is_some() {
        return build_from_raw(cfg);
    }
    let fallback = out.join("dataset");
    if fallback.is_dir() {
        return load_dataset(&fallback).with_context(|| format!("loading dataset {}", fallback.display()));
    }
    bail!("no dataset: pass --dataset, --checkins, or run `ingest`/`gen-synth` first")
}

fn summarize_dataset(ds: &Dataset) -> String {
    format!(
        "{} POIs, {} regions, {} KG triples; records train/valid/test = {}/{}/{}",
        ds.num_pois(),
        ds.regions.len(),
        ds.kg.triples.len(),
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    )
}

fn ingest(cfg: &mut RunConfig, out: &Path, a: IngestArgs) -> Result<()> {
    apply_data(cfg, &a.data);
    cfg.validate()?;
    let ds = build_from_raw(cfg)?;
    let dir = out.join("dataset");
    save_dataset(&ds, &dir)?;
    println!("{}", summarize_dataset(&ds));
    println!("wrote {}", dir.display());
    Ok(())
}

fn gen_synth(cfg: &mut RunConfig, out: &Path, a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(v) = a.users {
        spec.users = v;
    }
    if let Some(v) = a.regions {
        spec.regions = v;
    }
    if let Some(v) = a.pois_per_region {
        spec.pois_per_region = v;
    }
    if let Some(v) = a.categories {
        spec.categories = v;
    }
    if let Some(v) = a.drift {
        spec.drift = v;
    }
    if let Some(v) = a.synth_seed {
        spec.seed = v;
    }
    if let Some(v) = a.split_seed {
        cfg.data.split_seed = v;
    }
    let synth = generate_synthetic(&spec)?;
    let checkins = out.join("checkins.tsv");
    let kg = out.join("kg.tsv");
    let truth = out.join("truth.json");
    fs::write(&checkins, synth.checkins_tsv())?;
    fs::write(&kg, synth.kg_tsv())?;
    fs::write(&truth, serde_json::to_string_pretty(&synth.truth)?)?;
    let ds = build_dataset(&synth.checkins, &synth.triples, &cfg.data.filter, cfg.data.split_seed)?;
    let dir = out.join("dataset");
    save_dataset(&ds, &dir)?;
    println!("{}", summarize_dataset(&ds));
    println!(
        "wrote {}, {}, {} and {}",
        checkins.display(),
        kg.display(),
        truth.display(),
        dir.display()
    );
    Ok(())
}

fn log_epoch(log: &EpochLog, sink: &mut fs::File) {
    eprintln!(
        "epoch {:>4}  transe {:>9.4}  static {:>10.4}  dynamic {:>12.4}  rec {:>8.4}  total {:>12.4}  select {:>8.4}{}",
        log.epoch,
        log.transe_loss,
        log.loss.l_s,
        log.loss.l_d,
        log.loss.l_r,
        log.loss.total,
        log.selection_metric,
        if log.improved { "  *" } else { "" }
    );
    if let Ok(line) = serde_json::to_string(log) {
        let _ = writeln!(sink, "{line}");
    }
}

fn run_train(cfg: &mut RunConfig, has_file: bool, out: &Path, a: TrainArgs) -> Result<()> {
    let previous = if a.resume {
        let path = out.join(CHECKPOINT_FILE);
        Some(Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?)
    } else {
        None
    };
    // Without a config file, a resumed run starts from the stored settings.
    if let (Some(ckpt), false) = (&previous, has_file) {
        *cfg = ckpt.config.clone();
    }
    apply_data(cfg, &a.data);
    apply_train(cfg, &a.train);
    cfg.validate()?;
    let ds = load_data(cfg, out)?;
    eprintln!("{}", summarize_dataset(&ds));
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let mut sink = fs::OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(out.join("train_log.jsonl"))?;
    let mut on_epoch = |log: &EpochLog| log_epoch(log, &mut sink);
    let ckpt = if let Some(ckpt) = previous {
        resume(ckpt, cfg, &ds, Some(out), &mut on_epoch)?
    } else {
        train(cfg, &ds, Some(out), &mut on_epoch)?
    };
    println!(
        "trained {} epochs; best epoch {} ({:?} = {})",
        ckpt.epoch,
        ckpt.best_epoch,
        ckpt.selection,
        ckpt.best_metric.map_or("n/a".to_string(), |m| format!("{m:.4}"))
    );
    println!("config hash {}", ckpt.config_hash);
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn load_checkpoint(out: &Path, path: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = path.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn write_reports(out: &Path, stem: &str, reports: &[MetricReport]) -> Result<()> {
    let text = format_reports(reports);
    print!("{text}");
    let txt = out.join(format!("{stem}.txt"));
    let json = out.join(format!("{stem}.json"));
    fs::write(&txt, &text)?;
    fs::write(&json, serde_json::to_string_pretty(reports)?)?;
    println!("wrote {} and {}", txt.display(), json.display());
    Ok(())
}

fn region_lists(ds: &Dataset) -> Vec<Vec<usize>> {
    ds.regions.iter().map(|r| r.pois.clone()).collect()
}

fn evaluate(config: &Option<PathBuf>, out: &Path, a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(out, &a.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    // A config file may change evaluation and data settings; the model's
    // own settings stay as trained.
    if let Some(path) = config {
        let file = RunConfig::load(path)?;
        cfg.eval = file.eval;
        cfg.data = file.data;
    }
    apply_data(&mut cfg, &a.data);
    apply_eval(&mut cfg, &a.eval);
    cfg.validate()?;
    let ds = load_data(&cfg, out)?;
    let split = split_name(a.split);
    let records = ds.split(a.split);
    let mut reports = vec![evaluate_model(
        &ckpt.best_model,
        records,
        &ckpt.best_model.variant().to_string(),
        split,
        cfg.eval.top_p,
        cfg.eval.dedup,
        &cfg.eval.seeds,
        &cfg.hash(),
        cfg.execution,
    )?];
    if a.baseline {
        let regions = region_lists(&ds);
        let lookup = |r: usize| {
            regions
                .get(r)
                .cloned()
                .ok_or_else(|| triprec::Error::InvalidInput(format!("unknown region {r}")))
        };
        reports.push(evaluate_popularity(&ds.train, records, lookup, split)?);
    }
    write_reports(out, &format!("eval_{split}"), &reports)
}

fn raw_to_index(ds: &Dataset, raw: usize) -> Result<usize> {
    ds.poi_index_by_raw()
        .get(&raw)
        .copied()
        .with_context(|| format!("POI {raw} is not in the dataset vocabulary"))
}

fn find_record<'a>(ds: &'a Dataset, user: &str) -> Result<&'a TravelRecord> {
    ds.find_user(user)
        .with_context(|| format!("user {user:?} has no travel record"))
}

fn recommend(out: &Path, a: RecommendArgs) -> Result<()> {
    let ckpt = load_checkpoint(out, &a.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    apply_data(&mut cfg, &a.data);
    let ds = load_data(&cfg, out)?;
    let record = find_record(&ds, &a.user)?;
    let q = record.query();
    let origin = a.origin.map(|r| raw_to_index(&ds, r)).transpose()?.unwrap_or(q.origin);
    let destination = a
        .destination
        .map(|r| raw_to_index(&ds, r))
        .transpose()?
        .unwrap_or(q.destination);
    let stops = a.stops.unwrap_or(q.stops);
    let region = ds.pois[origin].region;
    if ds.pois[destination].region != region {
        bail!("origin and destination lie in different regions");
    }
    let top_p = a.top_p.unwrap_or(cfg.eval.top_p);
    let mut rng = stream_rng(a.sample_seed, Stream::Sampling, 0, 0);
    let trip = ckpt.best_model.recommend_partial(
        &record.hometown,
        Some(origin),
        Some(destination),
        stops,
        region,
        top_p,
        a.dedup,
        &mut rng,
    )?;
    for &poi in &trip {
        println!("{}", ds.pois[poi].raw_id);
    }
    if let Some(path) = &a.plot {
        let panel = CasePanel {
            title: "recommendation".into(),
            truth: record.trip(),
            predicted: trip,
        };
        fs::write(path, render_svg(&ds, &[panel], &format!("user {}", record.user_id))?)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn ablate(cfg: &mut RunConfig, out: &Path, a: AblateArgs) -> Result<()> {
    apply_data(cfg, &a.data);
    apply_train(cfg, &a.train);
    apply_eval(cfg, &a.eval);
    cfg.validate()?;
    let ds = load_data(cfg, out)?;
    let variants = a.variants.unwrap_or_else(|| Variant::ALL.to_vec());
    let mut reports = Vec::new();
    for v in variants {
        eprintln!("training {v} at seeds {:?}", cfg.eval.seeds);
        let report = run_ablation(cfg, &ds, v, &cfg.eval.seeds, &mut |seed, log| {
            if log.improved {
                eprintln!(
                    "  {v} seed {seed} epoch {} select {:.4}",
                    log.epoch, log.selection_metric
                );
            }
        })?;
        reports.push(report);
    }
    write_reports(out, "ablation", &reports)
}

fn plot_case(out: &Path, a: PlotArgs) -> Result<()> {
    let ckpt = load_checkpoint(out, &a.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    apply_data(&mut cfg, &a.data);
    let ds = load_data(&cfg, out)?;
    let record = match &a.user {
        Some(u) => find_record(&ds, u)?,
        None => ds.split(a.split).first().context("the split has no records")?,
    };
    let top_p = a.top_p.unwrap_or(cfg.eval.top_p);
    let mut rng = stream_rng(a.sample_seed, Stream::Sampling, 0, 0);
    let panels = case_panels(&ckpt.best_model, record, top_p, cfg.eval.dedup, &mut rng)?;
    let svg = render_svg(&ds, &panels, &format!("user {}", record.user_id))?;
    let path = a
        .output
        .unwrap_or_else(|| out.join(format!("case_{}.svg", record.user_id)));
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
