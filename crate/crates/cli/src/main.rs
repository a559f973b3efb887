//! `osr-eval`: plan, score and sweep open-set evaluations from the shell.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use osr_eval::embedding_store::load_dump_file;
use osr_eval::experiments::{
    derive_seed, full_eval, materialize_negatives, streams, sweep_negatives, sweep_query_size, write_sweep_csv,
    SweepNegativeKind, SweepResult,
};
use osr_eval::metrics::{to_rounded_json, write_curve_csv, write_histogram_csv};
use osr_eval::negatives::{random_words, write_word_list, SIMPLE_WORD};
use osr_eval::protocol::build_plan;
use osr_eval::synth::{generate_detection_world, generate_world, separable_noise, DetectionWorldSpec, WorldSpec};
use osr_eval::{
    DatasetManifest, EmbeddingSource, Error, EvalConfig, EvalReport, Head, KeyedDump, ModelOutputs, NegativeKind,
    NegativeSpec, PlanFile, Result, ScoreSource,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "osr-eval", version, about = "Dual-pass open-set evaluation of vision-language models")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Base seed. Per-purpose seeds are derived as
    /// splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the per-image query sets for both passes.
    Plan(PlanArgs),
    /// Score model outputs against a plan and write the report.
    Score(ScoreArgs),
    /// Repeat evaluations over an axis of query sizes or negative counts.
    Sweep(SweepArgs),
    /// Generate a synthetic world with known geometry.
    Synth(SynthArgs),
    /// Re-render JSON and CSV files from a stored report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NegArg {
    None,
    SimpleWord,
    RandomWords,
    Zero,
    RandomEmbeddings,
}

impl From<NegArg> for NegativeKind {
    fn from(n: NegArg) -> Self {
        match n {
            NegArg::None => NegativeKind::None,
            NegArg::SimpleWord => NegativeKind::SimpleWord,
            NegArg::RandomWords => NegativeKind::RandomWords,
            NegArg::Zero => NegativeKind::ZeroEmbedding,
            NegArg::RandomEmbeddings => NegativeKind::RandomEmbeddings,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Softmax,
    Sigmoid,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Softmax => Head::Softmax,
            HeadArg::Sigmoid => Head::Sigmoid,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Dataset manifest (native JSON, COCO JSON or classification JSONL).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output plan path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    negatives: Option<NegArg>,
    /// Number of negatives for the random kinds.
    #[arg(long)]
    negative_count: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Image (or proposal) embedding dump.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Query label embedding dump.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Score-mode index (JSON lines of image_id, pass, dump).
    #[arg(long, conflicts_with_all = ["images", "queries"])]
    scores: Option<PathBuf>,
    /// Encoded negative words, for word negatives.
    #[arg(long)]
    words: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    histogram_bins: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated query sizes.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["negatives", "counts"])]
    query_sizes: Option<Vec<usize>>,
    /// Negative kind to sweep (random-words or random-embeddings).
    #[arg(long, value_enum)]
    negatives: Option<NegArg>,
    /// Comma-separated negative counts; 0 means no negatives.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Number of seeds per axis value.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    open_classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Per-component noise; defaults to the separable level.
    #[arg(long)]
    noise: Option<f64>,
    /// Random directions without a margin.
    #[arg(long)]
    overlapping: bool,
    /// Grid detection world instead of a classification world.
    #[arg(long, conflicts_with = "overlapping")]
    detection: bool,
    /// Images in a detection world.
    #[arg(long, default_value_t = 20)]
    image_count: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored report.json.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error[{}]: {e}", e.id());
            ExitCode::from(match e {
                Error::Coverage { .. } => 3,
                _ => 2,
            })
        }
        Err(_) => {
            eprintln!("error[internal]: unexpected failure");
            ExitCode::from(4)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let globals = RunConfig {
        workers: cli.workers,
        seed: cli.seed,
        ..Default::default()
    };
    let flags = match &cli.command {
        Command::Plan(a) => RunConfig {
            manifest: a.manifest.clone(),
            out: a.out.clone(),
            negatives: a.negatives.map(Into::into),
            negative_count: a.negative_count,
            ..globals
        },
        Command::Score(a) => RunConfig {
            manifest: a.manifest.clone(),
            plan: a.plan.clone(),
            images: a.images.clone(),
            queries: a.queries.clone(),
            scores: a.scores.clone(),
            words: a.words.clone(),
            out: a.out.clone(),
            temperature: a.temperature,
            head: a.head.map(Into::into),
            iou_threshold: a.iou_threshold,
            histogram_bins: a.histogram_bins,
            ..globals
        },
        Command::Sweep(a) => RunConfig {
            manifest: a.manifest.clone(),
            images: a.images.clone(),
            queries: a.queries.clone(),
            words: a.words.clone(),
            out: a.out.clone(),
            query_sizes: a.query_sizes.clone(),
            negatives: a.negatives.map(Into::into),
            counts: a.counts.clone(),
            seeds: a.seeds,
            temperature: a.temperature,
            head: a.head.map(Into::into),
            ..globals
        },
        Command::Synth(_) | Command::Report(_) => globals,
    };
    let cfg = base.merge(flags);
    cfg.validate()?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Plan(_) => plan(&cfg),
        Command::Score(_) => score(&cfg),
        Command::Sweep(_) => sweep(&cfg),
        Command::Synth(a) => synth(&a, cfg.seed()),
        Command::Report(a) => report(&a),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn negative_spec(cfg: &RunConfig) -> Result<NegativeSpec> {
    let kind = cfg.negatives.unwrap_or_default();
    let count = match kind {
        NegativeKind::None => 0,
        NegativeKind::SimpleWord | NegativeKind::ZeroEmbedding => cfg.negative_count.unwrap_or(1),
        NegativeKind::RandomWords | NegativeKind::RandomEmbeddings => *cfg.require(&cfg.negative_count, "negative-count")?,
    };
    let seed = match kind {
        NegativeKind::RandomWords | NegativeKind::RandomEmbeddings => derive_seed(cfg.seed(), streams::NEGATIVES, 0),
        _ => 0,
    };
    NegativeSpec::new(kind, count, seed)
}

fn plan(cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::load(cfg.require(&cfg.manifest, "manifest")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let spec = negative_spec(cfg)?;
    let plan = build_plan(&manifest, &spec)?;
    write_atomic(out, plan.to_json()?.as_bytes())?;
    // word negatives go through the text encoder; leave the list beside the plan
    let words = match spec.kind {
        NegativeKind::SimpleWord => Some(vec![SIMPLE_WORD.to_string()]),
        NegativeKind::RandomWords => Some(random_words(spec.count, spec.seed)),
        _ => None,
    };
    if let Some(words) = words {
        let path = out.with_file_name("negative_words.json");
        write_with(&path, |b| write_word_list(&words, b))?;
        println!("wrote {} (encode and pass as --words)", path.display());
    }
    println!("wrote {} ({} images)", out.display(), plan.images.len());
    Ok(())
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    let d = EvalConfig::default();
    EvalConfig {
        temperature: cfg.temperature.unwrap_or(d.temperature),
        head: cfg.head.unwrap_or(d.head),
        iou_threshold: cfg.iou_threshold.unwrap_or(d.iou_threshold),
        histogram_bins: cfg.histogram_bins.unwrap_or(d.histogram_bins),
    }
}

fn embedding_source(cfg: &RunConfig) -> Result<EmbeddingSource> {
    let images = KeyedDump::load(cfg.require(&cfg.images, "images")?)?;
    let queries = KeyedDump::load(cfg.require(&cfg.queries, "queries")?)?;
    for w in osr_eval::embedding_store::validate_dump(&queries.matrix, &queries.records) {
        log::warn!("queries: {w}");
    }
    EmbeddingSource::new(images, queries)
}

fn score(cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::load(cfg.require(&cfg.manifest, "manifest")?)?;
    let plan = PlanFile::load(cfg.require(&cfg.plan, "plan")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let ec = eval_config(cfg);
    let (mut report, recorded) = match &cfg.scores {
        Some(index) => {
            let src = ScoreSource::load_index(index)?;
            let r = full_eval(&plan, &manifest, &ModelOutputs::Scores(src), None, &ec)?;
            (r, plan.negatives.clone())
        }
        None => {
            let src = embedding_source(cfg)?;
            let words = cfg.words.as_ref().map(load_dump_file).transpose()?;
            let (neg, recorded) = materialize_negatives(&plan.negatives, &src, &plan.closed_query, words.as_ref())?;
            let r = full_eval(&plan, &manifest, &ModelOutputs::Embeddings(src), neg.as_ref(), &ec)?;
            (r, recorded)
        }
    };
    report.metadata.negatives = recorded;
    report.metadata.config = serde_json::to_value(cfg)?;
    write_report_files(&report, out)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn write_report_files(report: &EvalReport, out: &Path) -> Result<()> {
    write_atomic(&out.join("report.json"), report.to_json()?.as_bytes())?;
    for m in &report.measures {
        let name = m.measure.name();
        write_with(&out.join(format!("curve_{name}.csv")), |b| write_curve_csv(&m.curve, b))?;
        write_with(&out.join(format!("hist_{name}.csv")), |b| write_histogram_csv(&m.histogram, b))?;
    }
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::load(cfg.require(&cfg.manifest, "manifest")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let src = embedding_source(cfg)?;
    let ec = eval_config(cfg);
    let seeds: Vec<u64> = (0..cfg.seeds.unwrap_or(1) as u64)
        .map(|i| derive_seed(cfg.seed(), streams::REPLICATE, i))
        .collect();
    let results: Vec<SweepResult> = match (&cfg.query_sizes, cfg.negatives) {
        (Some(sizes), None) => sweep_query_size(&manifest, &src, sizes, &seeds, &ec)?,
        (None, Some(kind)) => {
            let kind = match kind {
                NegativeKind::RandomWords => SweepNegativeKind::RandomWords,
                NegativeKind::RandomEmbeddings => SweepNegativeKind::RandomEmbeddings,
                k => return Err(Error::Parameter(format!("cannot sweep counts of {k:?} negatives"))),
            };
            let counts = cfg.require(&cfg.counts, "counts")?;
            let words = cfg.words.as_ref().map(load_dump_file).transpose()?;
            sweep_negatives(&manifest, &src, kind, counts, &seeds, words.as_ref(), &ec)?
        }
        _ => {
            return Err(Error::Parameter(
                "give either --query-sizes or --negatives with --counts".into(),
            ))
        }
    };
    let config = serde_json::to_value(cfg)?;
    for r in &results {
        for (i, run) in r.runs.iter().enumerate() {
            if let Some(rep) = &run.report {
                let mut rep = rep.clone();
                rep.metadata.config = config.clone();
                let path = out.join("reports").join(format!("{}_{}_seed{i}.json", r.axis, r.value));
                write_atomic(&path, rep.to_json()?.as_bytes())?;
            }
        }
    }
    write_atomic(&out.join("sweep.json"), to_rounded_json(&results)?.as_bytes())?;
    write_with(&out.join("sweep.csv"), |b| write_sweep_csv(&results, b))?;
    for r in &results {
        let fmt = |k: &str| r.mean.get(k).map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} {:>5}  accuracy {}  aupr_softmax {}",
            r.axis,
            r.value,
            fmt("accuracy"),
            fmt("aupr_softmax")
        );
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let world_seed = derive_seed(seed, streams::SYNTH, 0);
    // generate into a sibling scratch directory, then move files into place
    let scratch = a.out.with_file_name(format!(
        ".{}.tmp{}",
        a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    if a.detection {
        let mut spec = DetectionWorldSpec::small(a.classes, a.image_count, world_seed);
        if let Some(n) = a.noise {
            spec.noise_std = n;
        }
        generate_detection_world(&spec)?.write(&scratch)?;
    } else {
        let spec = if a.overlapping {
            WorldSpec::overlapping(a.classes, a.dim, a.per_class, a.noise.unwrap_or(0.5), world_seed)
        } else {
            let mut s = WorldSpec::separable(a.classes, a.open_classes, a.dim, a.per_class, world_seed);
            s.noise_std = a.noise.unwrap_or_else(|| separable_noise(s.margin, s.dim));
            s
        };
        generate_world(&spec)?.write(&scratch)?;
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut names: Vec<_> = fs::read_dir(&scratch)
        .map_err(|e| io_err(&scratch, e))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| io_err(&scratch, e))?;
    names.sort();
    for n in names {
        let to = a.out.join(&n);
        fs::rename(scratch.join(&n), &to).map_err(|e| io_err(&to, e))?;
    }
    fs::remove_dir(&scratch).map_err(|e| io_err(&scratch, e))?;
    println!("wrote synthetic world to {}", a.out.display());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.report).map_err(|e| io_err(&a.report, e))?;
    let report = EvalReport::from_json(&text)?;
    write_report_files(&report, &a.out)?;
    print!("{}", report.summary_table());
    Ok(())
}
