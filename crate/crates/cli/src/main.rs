//! `xmash`: synthesize data, train, encode, search and evaluate.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use xmash::adversarial::{train_with, Mode, TrainConfig};
use xmash::dataio::{self, generate_synthetic, load_codes, load_features, save_codes, Dataset, Split, SyntheticConfig};
use xmash::eval::{default_ks, evaluate_task, write_pr_csv, write_topk_csv, EvalReport};
use xmash::graph::{build_knn_graph, Metric};
use xmash::index::{encode_corpus, search, write_results_csv};
use xmash::net::HashNet;
use xmash::{Direction, Error, Modality};

use manifest::{io_error, RunManifest};

const DISC_FILE: &str = "disc.xmn";
const GEN_FILE: &str = "gen.xmn";
const HISTORY_FILE: &str = "history.csv";
const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "xmash", version, about = "Unsupervised adversarial cross-modal hashing", args_override_self = true)]
struct Cli {
    /// Worker threads for parallel sections [env: XMASH_THREADS; default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a clustered synthetic paired dataset.
    Synth(SynthArgs),
    /// Train a hashing network.
    Train(TrainArgs),
    /// Encode features into packed binary codes.
    Encode(EncodeArgs),
    /// Rank database codes for every query code.
    Query(QueryArgs),
    /// Score trained runs on both retrieval tasks.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pairs: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    clusters: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    dim_img: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    dim_txt: u64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Minimum centroid distance, in units of sigma.
    #[arg(long, default_value_t = 6.0)]
    min_separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Baseline,
    BaselineGan,
    Ugach,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::BaselineGan => Mode::BaselineGan,
            ModeArg::Ugach => Mode::Ugach,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

/// How the dataset is split and preprocessed; shared by train, encode and eval.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SplitArgs {
    /// Fraction of pairs held out as queries.
    #[arg(long, default_value_t = 0.05)]
    query_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// L2-normalize every feature row before use.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    l2_normalize: bool,
}

impl SplitArgs {
    fn split(&self, n: usize) -> xmash::Result<Split> {
        Split::random(n, self.query_fraction, self.split_seed)
    }

    fn prepare(&self, data: Dataset) -> Dataset {
        if self.l2_normalize {
            data.l2_normalized()
        } else {
            data
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Dataset directory (image.xmh, text.xmh).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Ugach)]
    mode: ModeArg,
    /// Code length.
    #[arg(long, default_value_t = 16, value_parser = parse_bits)]
    bits: usize,
    #[arg(long, default_value_t = 4096, value_parser = positive)]
    dim_common: usize,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr0: f64,
    #[arg(long, default_value_t = 2, value_parser = positive)]
    lr_decay_every: usize,
    #[arg(long, default_value_t = 10.0)]
    lr_decay_factor: f64,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pool_size: usize,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    sample_count: usize,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    graph_k: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    graph_metric: MetricArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    include_self_pair: bool,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    reward_baseline: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    /// key = value file of defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode.into(),
            bits: self.bits,
            dim_common: self.dim_common,
            margin: self.margin,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr0: self.lr0,
            lr_decay_every: self.lr_decay_every,
            lr_decay_factor: self.lr_decay_factor,
            pool_size: self.pool_size,
            sample_count: self.sample_count,
            graph_k: self.graph_k,
            graph_metric: self.graph_metric.into(),
            include_self_pair: self.include_self_pair,
            reward_baseline: self.reward_baseline,
            seed: self.seed,
        }
    }
}

/// The part of a train manifest that eval needs back.
#[derive(Debug, Serialize, Deserialize)]
struct TrainEcho {
    train: TrainConfig,
    split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Subset {
    All,
    Db,
    Query,
}

#[derive(Debug, Args, Serialize)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file (.xmh).
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    modality: Modality,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    #[command(flatten)]
    split: SplitArgs,
    /// Fail unless the checkpoint produces codes of this length.
    #[arg(long, value_parser = parse_bits)]
    bits: Option<usize>,
    /// Output code file (.xmc).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct QueryArgs {
    /// Database codes (.xmc).
    #[arg(long)]
    db: PathBuf,
    /// Query codes (.xmc).
    #[arg(long)]
    queries: PathBuf,
    /// Results per query; the whole database when omitted.
    #[arg(long, value_parser = positive)]
    topk: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Labeled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Training output directory; repeat to compare runs.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn parse_bits(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(b @ (16 | 32 | 64 | 128)) => Ok(b),
        _ => Err(format!("{s} is not one of 16, 32, 64, 128")),
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("XMASH_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> xmash::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn create_file(path: &Path) -> xmash::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    [dataio::IMAGE_FILE, dataio::TEXT_FILE, dataio::LABEL_FILE]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect()
}

/// Manifest path for a single-file output: `out.xmc` -> `out.xmc.manifest.json`.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(manifest::FILE_NAME);
    out.with_file_name(name)
}

fn synth(a: &SynthArgs) -> xmash::Result<()> {
    let data = generate_synthetic(&SyntheticConfig {
        num_pairs: a.pairs as usize,
        num_clusters: a.clusters as usize,
        dim_image: a.dim_img as usize,
        dim_text: a.dim_txt as usize,
        noise_sigma: a.sigma,
        min_separation: a.min_separation,
        seed: a.seed,
    })?;
    data.save_dir(&a.out)?;
    let mut m = RunManifest::new("synth", a);
    for f in data_files(&a.out) {
        m.output(&f.file_name().unwrap().to_string_lossy(), &f)?;
    }
    m.write(&a.out.join(manifest::FILE_NAME))?;
    eprintln!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> xmash::Result<()> {
    let cfg = a.train_config();
    let data = a.split.prepare(Dataset::load_dir(&a.data)?);
    let split = a.split.split(data.len())?;
    let db = data.subset(&split.db)?;
    let gi = build_knn_graph(db.image(), cfg.graph_k, cfg.graph_metric)?;
    let gt = build_knn_graph(db.text(), cfg.graph_k, cfg.graph_metric)?;
    create_dir(&a.out)?;

    let history_path = a.out.join(HISTORY_FILE);
    let mut history = create_file(&history_path)?;
    writeln!(history, "epoch,lr,disc_loss,gen_mean_reward").map_err(|e| io_error(&history_path, e))?;
    let mut write_err = None;
    let mut completed = 0;
    let out = train_with(&data, &split, (&gi, &gt), &cfg, |r| {
        completed = r.epoch + 1;
        eprintln!("epoch {:>3}  {}", r.epoch, r.csv_line());
        if let Err(e) = writeln!(history, "{}", r.csv_line()) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} after {completed} completed epochs")),
        other => other,
    })?;
    if let Some(e) = write_err {
        return Err(io_error(&history_path, e));
    }
    history.flush().map_err(|e| io_error(&history_path, e))?;
    drop(history);

    let disc_path = a.out.join(DISC_FILE);
    let gen_path = a.out.join(GEN_FILE);
    out.disc.save(&disc_path)?;
    out.gen.save(&gen_path)?;

    let mut m = RunManifest::new(
        "train",
        serde_json::json!({ "data": a.data, "train": cfg, "split": a.split }),
    );
    for f in data_files(&a.data) {
        m.input(&f)?;
    }
    for (name, path) in [(DISC_FILE, &disc_path), (GEN_FILE, &gen_path), (HISTORY_FILE, &history_path)] {
        m.output(name, path)?;
    }
    m.write(&a.out.join(manifest::FILE_NAME))
}

fn encode(a: &EncodeArgs) -> xmash::Result<()> {
    let net = HashNet::load(&a.checkpoint)?;
    if let Some(bits) = a.bits {
        if bits != net.bits() {
            return Err(Error::DimensionMismatch {
                expected: bits,
                actual: net.bits(),
                context: "--bits vs checkpoint code length",
            });
        }
    }
    let mut features = load_features(&a.features)?;
    if a.split.l2_normalize {
        features = features.l2_normalized();
    }
    let features = match a.subset {
        Subset::All => features,
        Subset::Db => features.gather(&a.split.split(features.rows())?.db)?,
        Subset::Query => features.gather(&a.split.split(features.rows())?.query)?,
    };
    let codes = encode_corpus(&net, &features, a.modality)?;
    save_codes(&codes, &a.out)?;
    let mut m = RunManifest::new("encode", a);
    m.input(&a.checkpoint)?;
    m.input(&a.features)?;
    m.output(&a.out.file_name().unwrap_or_default().to_string_lossy(), &a.out)?;
    m.write(&sidecar(&a.out))
}

fn query(a: &QueryArgs) -> xmash::Result<()> {
    let db = load_codes(&a.db)?;
    let queries = load_codes(&a.queries)?;
    if db.bits() != queries.bits() {
        return Err(Error::DimensionMismatch {
            expected: db.bits(),
            actual: queries.bits(),
            context: "query code bits vs database code bits",
        });
    }
    let results = (0..queries.rows())
        .map(|q| Ok((q, search(&db, queries.row(q), a.topk)?)))
        .collect::<xmash::Result<Vec<_>>>()?;
    let mut out = create_file(&a.out)?;
    write_results_csv(&mut out, &results)
        .and_then(|()| out.flush())
        .map_err(|e| io_error(&a.out, e))?;
    drop(out);
    let mut m = RunManifest::new("query", a);
    m.input(&a.db)?;
    m.input(&a.queries)?;
    m.output(&a.out.file_name().unwrap_or_default().to_string_lossy(), &a.out)?;
    m.write(&sidecar(&a.out))
}

#[derive(Debug, Serialize)]
struct RunReport {
    run: PathBuf,
    mode: Mode,
    bits: usize,
    reports: Vec<EvalReport>,
}

fn task_tag(task: Direction) -> &'static str {
    match task {
        Direction::ImageToText => "i2t",
        Direction::TextToImage => "t2i",
    }
}

fn eval(a: &EvalArgs) -> xmash::Result<()> {
    let raw = Dataset::load_dir(&a.data)?;
    if raw.labels().is_none() {
        return Err(Error::MissingLabels);
    }
    create_dir(&a.out)?;
    let mut m = RunManifest::new("eval", a);
    for f in data_files(&a.data) {
        m.input(&f)?;
    }

    let mut runs = Vec::with_capacity(a.runs.len());
    for run in &a.runs {
        let run_manifest = RunManifest::read(&run.join(manifest::FILE_NAME))?;
        let echo: TrainEcho = serde_json::from_value(run_manifest.config).map_err(|e| {
            Error::InvalidArgument(format!("{}: not a train manifest: {e}", run.display()))
        })?;
        let disc_path = run.join(DISC_FILE);
        let net = HashNet::load(&disc_path)?;
        m.input(&disc_path)?;
        let data = echo.split.prepare(raw.clone());
        let split = echo.split.split(data.len())?;
        let ks = default_ks(split.db.len());
        let reports = Direction::BOTH
            .iter()
            .map(|&task| evaluate_task(&net, &data, &split, task, &ks))
            .collect::<xmash::Result<Vec<_>>>()?;
        for r in &reports {
            let stem = format!("{}_{}_{}", echo.train.mode, r.bits, task_tag(r.task));
            let pr = a.out.join(format!("pr_{stem}.csv"));
            let topk = a.out.join(format!("topk_{stem}.csv"));
            write_csv(&pr, |w| write_pr_csv(w, r))?;
            write_csv(&topk, |w| write_topk_csv(w, r))?;
            m.output(&format!("pr_{stem}.csv"), &pr)?;
            m.output(&format!("topk_{stem}.csv"), &topk)?;
        }
        runs.push(RunReport {
            run: run.clone(),
            mode: echo.train.mode,
            bits: echo.train.bits,
            reports,
        });
    }

    let report_path = a.out.join(REPORT_FILE);
    let mut json = serde_json::to_string_pretty(&runs).expect("reports serialize");
    json.push('\n');
    fs::write(&report_path, json).map_err(|e| io_error(&report_path, e))?;
    m.output(REPORT_FILE, &report_path)?;
    m.write(&a.out.join(manifest::FILE_NAME))?;
    print!("{}", map_table(&runs));
    Ok(())
}

fn write_csv(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> xmash::Result<()> {
    let mut w = create_file(path)?;
    body(&mut w).and_then(|()| w.flush()).map_err(|e| io_error(path, e))
}

/// One block per task; rows are modes, columns are code lengths.
fn map_table(runs: &[RunReport]) -> String {
    let mut bits: Vec<usize> = runs.iter().map(|r| r.bits).collect();
    bits.sort_unstable();
    bits.dedup();
    let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|m| runs.iter().any(|r| r.mode == *m)).collect();
    let mut cells: BTreeMap<(Direction, Mode, usize), f64> = BTreeMap::new();
    for run in runs {
        for rep in &run.reports {
            cells.insert((rep.task, run.mode, run.bits), rep.map);
        }
    }
    let mut out = String::new();
    for task in Direction::BOTH {
        out.push_str(&format!("MAP {task}\n{:<14}", "mode"));
        for b in &bits {
            out.push_str(&format!("{:>8}", format!("{b} bits")));
        }
        out.push('\n');
        for mode in &modes {
            out.push_str(&format!("{:<14}", mode.name()));
            for b in &bits {
                match cells.get(&(task, *mode, *b)) {
                    Some(v) => out.push_str(&format!("{v:>8.3}")),
                    None => out.push_str(&format!("{:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
