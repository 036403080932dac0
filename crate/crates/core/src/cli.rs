//! The `modse` command line: train, plan, analyze, gradcheck and gen-data.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 runtime or I/O,
//! 3 verification failure. Every successful command writes
//! `manifest.json` next to its outputs; outputs are written to temporary
//! files and renamed into place only once the command has succeeded.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytics::counts::{count_routing, render_ratio, CountTable};
use crate::analytics::difficult::{
    difficult_token_expert_distribution, difficult_token_table, mean_loss, table_csv, SizeClasses,
    DEFAULT_THRESHOLDS,
};
use crate::analytics::fixtures::{parse_difficult, trace_from_rank_counts};
use crate::analytics::heatmap::Heatmap;
use crate::analytics::trace::RoutingTrace;
use crate::checkpoint;
use crate::data::synthetic_corpus;
use crate::error::{Error, Result};
use crate::gradcheck::{run_all, GradcheckOptions, Scale};
use crate::moe::pairing::{build_paired_spec, ExpertRatios, PairedExpertSpec};
use crate::placement::{average_selected_hidden_size, evaluate_workload, plan, DeviceModel, Strategy};
use crate::train::{train, RunConfig, TrainOptions};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "modse", version = VERSION, about = "Diverse-size mixture-of-experts lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, checkpoints and an optional routing trace.
    Train(TrainArgs),
    /// Place experts on devices and report per-device parameters.
    Plan(PlanArgs),
    /// Routing count tables, difficult-token tables and heatmaps.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic grammar corpus.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `homogeneous` or `large:small,...` multiples of the model width.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Record routing snapshots of the evaluation split to trace.jsonl.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub devices: usize,
    #[arg(long, default_value = "pairwise")]
    pub strategy: String,
    #[arg(long)]
    pub ratios: Option<String>,
    /// Optional routing trace to evaluate the plan's workload against.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = "runs/plan")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Routing trace, JSONL or binary.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Count table CSV (`epoch,layer,rank,<sizes>…`).
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Difficult-token routing counts (`layer,rank,<sizes>…`).
    #[arg(long)]
    pub difficult_counts: Option<PathBuf>,
    /// Model width used to realize size labels of `--difficult-counts`.
    #[arg(long, default_value_t = 1536)]
    pub d_model: usize,
    #[arg(long)]
    pub losses_baseline: Option<PathBuf>,
    #[arg(long)]
    pub losses_modse: Option<PathBuf>,
    #[arg(long, default_value = "runs/analyze")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "micro")]
    pub scale: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub corrupt_grad: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4000)]
    pub lines: usize,
    #[arg(long, default_value = "corpus.txt")]
    pub out: PathBuf,
}

/// Failure class of a command, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io { .. } | Error::Data(_) | Error::EmptySupport | Error::Dimension { .. } => {
                Failure::Runtime(m)
            }
            _ => Failure::Usage(m),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    /// SHA-256 of every emitted file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

/// Files staged in memory and committed together on success.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn commit(
        self,
        argv: &[String],
        config: serde_json::Value,
        seed: Option<u64>,
        started: String,
    ) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut digests = BTreeMap::new();
        for (name, bytes) in &self.files {
            checkpoint::write_atomic(&self.dir.join(name), bytes)?;
            digests.insert(name.clone(), sha256_hex(bytes));
        }
        let manifest = RunManifest {
            command_line: argv.to_vec(),
            config,
            seed,
            version: VERSION.into(),
            started_at: started,
            finished_at: now(),
            outputs: digests,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        checkpoint::write_atomic(&self.dir.join("manifest.json"), &json)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> std::result::Result<(), Failure>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Failure::Usage(e.to_string()));
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a, &argv),
        Command::Plan(a) => cmd_plan(&a, &argv),
        Command::Analyze(a) => cmd_analyze(&a, &argv),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &argv),
        Command::GenData(a) => cmd_gen_data(&a, &argv),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("MODSE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message().trim_end());
            ExitCode::from(f.code())
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_train(a: &TrainArgs, argv: &[String]) -> std::result::Result<(), Failure> {
    let started = now();
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.model.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.train.steps = Some(n);
    }
    if let Some(r) = &a.ratios {
        cfg.model.expert_ratios = r.parse::<ExpertRatios>()?;
    }
    if let Some(al) = a.alpha {
        cfg.optimizer.alpha = al;
    }
    cfg.validate()?;
    let corpus = cfg.corpus()?;
    let initial = crate::model::Model::<f32>::init(&cfg.model)?;
    let mut metrics = String::new();
    let outcome = train(
        &cfg,
        &corpus,
        TrainOptions {
            trace: a.trace,
            final_eval: true,
        },
        |rec| {
            metrics.push_str(&serde_json::to_string(rec).expect("record serializes"));
            metrics.push('\n');
            Ok(())
        },
    )?;
    let mut out = Outputs::new(&a.out);
    out.add("metrics.jsonl", metrics);
    out.add("checkpoint-0.bin", checkpoint::to_bytes(&initial, 0)?);
    out.add("checkpoint.bin", checkpoint::to_bytes(&outcome.model, outcome.records.len())?);
    if let Some(ev) = &outcome.final_eval {
        let mut csv = String::from("token_index,loss\n");
        for (p, l) in ev.positions.iter().zip(&ev.token_losses) {
            csv.push_str(&format!("{p},{l}\n"));
        }
        out.add("losses.csv", csv);
        println!("final eval CE {:.4}", ev.mean_ce);
    }
    if let Some(tr) = &outcome.trace {
        out.add("trace.jsonl", tr.to_jsonl());
    }
    if let (Some(first), Some(last)) = (outcome.records.first(), outcome.records.last()) {
        println!(
            "steps {} train CE {:.4} -> {:.4}",
            outcome.records.len(),
            first.ce_loss,
            last.ce_loss
        );
    }
    let seed = cfg.model.seed;
    out.commit(argv, to_value(&cfg), Some(seed), started)?;
    Ok(())
}

pub fn cmd_plan(a: &PlanArgs, argv: &[String]) -> std::result::Result<(), Failure> {
    let started = now();
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(r) = &a.ratios {
        cfg.model.expert_ratios = r.parse::<ExpertRatios>()?;
    }
    let spec = cfg.model.expert_spec()?;
    let strategy: Strategy = a.strategy.parse()?;
    let devices = DeviceModel::new(a.devices)?;
    let p = plan(&spec, cfg.model.n_layers, &devices, strategy)?;
    for (d, n) in p.per_device_params.iter().enumerate() {
        println!("device {d}: {n} parameters");
    }
    let mut out = Outputs::new(&a.out);
    out.add("plan.json", serde_json::to_vec_pretty(&p).expect("plan serializes"));
    if let Some(path) = &a.trace {
        let trace = RoutingTrace::load(path)?;
        let report = evaluate_workload(&p, &trace, &spec)?;
        let avg = average_selected_hidden_size(&trace, &spec)?;
        println!("imbalance ratio {}", render_ratio(report.imbalance_ratio));
        println!("average selected hidden size {avg:.2}");
        let v = serde_json::json!({
            "per_device_tokens": report.per_device_tokens,
            "per_device_flop_proxy": report.per_device_flop_proxy,
            "imbalance_ratio": render_ratio(report.imbalance_ratio),
            "average_selected_hidden_size": avg,
        });
        out.add("workload.json", serde_json::to_vec_pretty(&v).expect("json"));
    }
    let config = serde_json::json!({
        "model": to_value(&cfg.model),
        "devices": a.devices,
        "strategy": strategy.to_string(),
    });
    out.commit(argv, config, None, started)?;
    Ok(())
}

fn read_losses(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut ids = Vec::new();
    let mut losses = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let bad = || Error::Alignment(format!("{}: malformed row {i}", path.display()));
        let rec = rec.map_err(|_| bad())?;
        ids.push(rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?);
        losses.push(rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?);
    }
    Ok((ids, losses))
}

/// Pairs descending size labels largest-with-smallest into a spec.
fn spec_from_labels(labels: &[String], d_model: usize) -> Result<PairedExpertSpec> {
    let mut r = labels
        .iter()
        .map(|l| l.parse::<f64>().map_err(|_| Error::Data(format!("size label {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    r.sort_by(|a, b| b.total_cmp(a));
    let n = r.len();
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("{n} size columns cannot form pairs")));
    }
    let pairs: Vec<(f64, f64)> = (0..n / 2).map(|i| (r[i], r[n - 1 - i])).collect();
    let h = ((pairs[0].0 + pairs[0].1) * d_model as f64 / 2.0).round() as usize;
    build_paired_spec(d_model, h, &pairs)
}

fn analysis_outputs(
    trace: &RoutingTrace,
    spec: &PairedExpertSpec,
    difficult: &BTreeSet<u64>,
    out: &mut Outputs,
    summary: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let report = difficult_token_expert_distribution(trace, difficult, spec, &SizeClasses::around_base(spec))?;
    out.add("difficult_distribution.csv", report.to_csv());
    println!(
        "difficult tokens {}: top1 sum(L) {} sum(S) {}; top1+2 sum(L) {} sum(S) {}",
        report.difficult_tokens,
        report.sum_large_top1,
        report.sum_small_top1,
        report.sum_large_top12,
        report.sum_small_top12
    );
    let rows = (0..report.top1_by_layer.len()).map(|l| format!("layer{l}")).collect();
    let heat = Heatmap::by_descending_size(rows, report.labels.clone(), report.top1_by_layer.clone(), &spec.expert_sizes)?;
    out.add("heatmap.csv", heat.to_csv());
    out.add("heatmap.svg", heat.to_svg());
    summary.insert("difficult_distribution".into(), to_value(&report));
    Ok(())
}

pub fn cmd_analyze(a: &AnalyzeArgs, argv: &[String]) -> std::result::Result<(), Failure> {
    let started = now();
    if a.trace.is_none() && a.counts.is_none() && a.difficult_counts.is_none() && a.losses_baseline.is_none() {
        return Err(Failure::Usage(
            "analyze needs --trace, --counts, --difficult-counts or loss files".into(),
        ));
    }
    let mut out = Outputs::new(&a.out);
    let mut summary = serde_json::Map::new();
    if let Some(path) = &a.counts {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = CountTable::from_csv(&text)?;
        out.add("counts.csv", table.to_csv());
        print_ratios(&table);
    }
    if let Some(path) = &a.difficult_counts {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (labels, rows) = parse_difficult(&text)?;
        let spec = spec_from_labels(&labels, a.d_model)?;
        let trace = trace_from_rank_counts(&spec, &labels, &rows, 0)?;
        let all: BTreeSet<u64> = trace.records.iter().map(|r| r.token).collect();
        analysis_outputs(&trace, &spec, &all, &mut out, &mut summary)?;
    }
    let losses = match (&a.losses_baseline, &a.losses_modse) {
        (Some(b), Some(m)) => {
            let (ids, base) = read_losses(b)?;
            let (ids_m, modse) = read_losses(m)?;
            if ids != ids_m {
                return Err(Error::Alignment("loss files cover different token indices".into()).into());
            }
            Some((ids, base, modse))
        }
        (None, None) => None,
        _ => return Err(Failure::Usage("--losses-baseline and --losses-modse go together".into())),
    };
    if let Some((_, base, modse)) = &losses {
        let mean = mean_loss(base)?;
        let mut thresholds: Vec<f64> = DEFAULT_THRESHOLDS[..5].to_vec();
        thresholds.push(mean);
        thresholds.sort_by(|x, y| y.total_cmp(x));
        thresholds.dedup();
        let rows = difficult_token_table(base, modse, &thresholds)?;
        out.add("threshold_table.csv", table_csv(&rows));
        summary.insert("baseline_mean_loss".into(), mean.into());
        summary.insert("threshold_table".into(), to_value(&rows));
    }
    if let Some(path) = &a.trace {
        let trace = RoutingTrace::load(path)?;
        if trace.records.is_empty() {
            return Err(Error::EmptyTrace.into());
        }
        let table = count_routing(&trace)?;
        out.add("counts.csv", table.to_csv());
        print_ratios(&table);
        let last = *trace.epochs().last().expect("non-empty");
        let snapshot = trace.epoch_subset(last);
        let spec = PairedExpertSpec::from_pairs(
            trace.header.d_model,
            (trace.header.expert_sizes[0] + trace.header.expert_sizes[1]) / 2,
            trace.header.expert_sizes.chunks(2).map(|c| (c[0], c[1])).collect(),
        )?;
        let difficult: BTreeSet<u64> = match &losses {
            Some((ids, base, _)) => crate::analytics::difficult::difficult_tokens(ids, base)?,
            None => snapshot.records.iter().map(|r| r.token).collect(),
        };
        analysis_outputs(&snapshot, &spec, &difficult, &mut out, &mut summary)?;
        summary.insert(
            "average_selected_hidden_size".into(),
            average_selected_hidden_size(&snapshot, &spec)?.into(),
        );
    }
    out.add(
        "summary.json",
        serde_json::to_vec_pretty(&serde_json::Value::Object(summary)).expect("json"),
    );
    let config = serde_json::json!({
        "trace": a.trace, "counts": a.counts, "difficult_counts": a.difficult_counts,
        "losses_baseline": a.losses_baseline, "losses_modse": a.losses_modse,
    });
    out.commit(argv, config, None, started)?;
    Ok(())
}

fn print_ratios(table: &CountTable) {
    for row in table.rows.values() {
        println!(
            "epoch {} layer {} rank {}: max/min {}",
            row.key.epoch,
            row.key.layer,
            row.key.rank,
            render_ratio(row.ratio())
        );
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs, argv: &[String]) -> std::result::Result<(), Failure> {
    let started = now();
    let scale: Scale = a.scale.parse()?;
    let opts = GradcheckOptions {
        scale,
        seed: a.seed,
        corrupt: a.corrupt_grad,
    };
    let results = run_all(&opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure::Verification(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )));
    }
    if let Some(dir) = &a.out {
        let mut out = Outputs::new(dir);
        out.add("gradcheck.json", serde_json::to_vec_pretty(&results).expect("json"));
        out.commit(argv, serde_json::json!({"scale": scale, "seed": a.seed}), Some(a.seed), started)?;
    }
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs, argv: &[String]) -> std::result::Result<(), Failure> {
    let started = now();
    let text = synthetic_corpus(a.seed, a.lines);
    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = a
        .out
        .file_name()
        .ok_or_else(|| Failure::Usage(format!("{} is not a file path", a.out.display())))?
        .to_string_lossy()
        .into_owned();
    let mut out = Outputs::new(&dir);
    out.add(&name, text);
    out.commit(argv, serde_json::json!({"lines": a.lines}), Some(a.seed), started)?;
    Ok(())
}
