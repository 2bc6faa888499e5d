//! Command-line front end and benchmark harness.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attention::{full_attention, AttentionInputs};
use crate::calibrate::{calibrate, FidelityEvaluator, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::metrics::{ground_truth_block_distribution, similarity, SIMILARITY_METHOD};
use crate::scoring::{HeadScorer, Pattern, SelectionConfig, Strategy};
use crate::selection::{block_prob_rows, build_mask, density, mask_from_probs, BlockMask};
use crate::sparse::{dense_blocked_attention, output_error, sparse_attention};
use crate::tensor::{decode_tensor, encode_tensor, Tensor};
use crate::workloads::{generate, WorkloadSpec};

#[derive(Debug, Parser)]
#[command(
    name = "xattn",
    version,
    about = "Block-sparse attention with antidiagonal block scoring"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate Q/K/V tensors from a workload spec.
    GenWorkload {
        /// Workload spec JSON.
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for q.xatn, k.xatn, v.xatn and workload.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-query-block tile score maps.
    Score(CommonArgs),
    /// Build block masks and print their density.
    Select(CommonArgs),
    /// Run block-sparse attention and compare it with dense attention.
    Attend {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of masks written by `select`; selection runs when absent.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        no_oracle: bool,
    },
    /// Pattern × stride × strategy grid of similarity, density and error.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 8, 16, 64])]
        strides: Vec<usize>,
    },
    /// Predict per-head minimum thresholds.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Additional calibration inputs.
        #[arg(long = "extra")]
        extra: Vec<PathBuf>,
        /// Reduction budget M.
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value_t = 0.9)]
        t_init: f64,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Time selection, sparse attention and dense attention.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

/// Input, selection overrides and output shared by the processing commands.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Workload spec JSON, or a directory holding q.xatn, k.xatn and v.xatn.
    pub input: PathBuf,
    /// Selection config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the workload seed and the random pattern seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub pattern: Option<String>,
    /// threshold, topk:K or topratio:R.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub causal: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub force_diag: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub force_first: Option<bool>,
    /// Worker threads; falls back to XATTN_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    /// Defaults, then the config file, then flags. An input workload spec
    /// supplies `causal` when neither the file nor a flag sets it.
    fn selection_config(&self, spec_causal: Option<bool>) -> Result<SelectionConfig> {
        let mut cfg = SelectionConfig::default();
        let mut causal_set = false;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            causal_set = value.get("causal").is_some();
            cfg = serde_json::from_value(value)?;
        }
        if !causal_set {
            if let Some(c) = spec_causal {
                cfg.causal = c;
            }
        }
        if let Some(b) = self.block_size {
            cfg.block_size = b;
        }
        if let Some(s) = self.stride {
            cfg.stride = s;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(p) = &self.pattern {
            cfg.pattern = p.parse()?;
        }
        if let (Some(seed), Pattern::Random { .. }) = (self.seed, cfg.pattern) {
            cfg.pattern = Pattern::Random { seed };
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse()?;
        }
        if let Some(c) = self.causal {
            cfg.causal = c;
        }
        if let Some(f) = self.force_diag {
            cfg.force_diagonal_block = f;
        }
        if let Some(f) = self.force_first {
            cfg.force_first_block = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn threads(&self) -> Result<usize> {
        if let Some(n) = self.threads {
            return positive_threads(n);
        }
        match std::env::var("XATTN_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("XATTN_THREADS=`{v}` is not a thread count")))
                .and_then(positive_threads),
            Err(_) => Ok(0),
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--out is required for this command".into()))
    }

    /// Heads with the causal flag of the effective config, plus the config.
    fn load(&self) -> Result<(Vec<AttentionInputs>, SelectionConfig, Option<u64>)> {
        let (heads, spec) = load_heads(&self.input, self.seed)?;
        let cfg = self.selection_config(spec.as_ref().map(|s| s.causal))?;
        let heads = heads.into_iter().map(|h| h.with_causal(cfg.causal)).collect();
        Ok((heads, cfg, spec.map(|s| s.seed).or(self.seed)))
    }
}

fn positive_threads(n: usize) -> Result<usize> {
    if n == 0 {
        Err(Error::InvalidConfig("thread count must be at least 1".into()))
    } else {
        Ok(n)
    }
}

/// Heads from a workload spec JSON (generated) or a tensor directory.
fn load_heads(input: &Path, seed: Option<u64>) -> Result<(Vec<AttentionInputs>, Option<WorkloadSpec>)> {
    if input.is_dir() {
        let read = |name: &str| -> Result<Vec<Tensor>> {
            let path = input.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let t = decode_tensor(&bytes)?;
            match t.dims().len() {
                2 => Ok(vec![t]),
                3 => t.unstack(),
                n => Err(Error::Shape(format!(
                    "{} has {n} dims, expected 2 or 3",
                    path.display()
                ))),
            }
        };
        let (q, k, v) = (read("q.xatn")?, read("k.xatn")?, read("v.xatn")?);
        if q.len() != k.len() || q.len() != v.len() {
            return Err(Error::Shape("q, k and v have different head counts".into()));
        }
        let heads = q
            .into_iter()
            .zip(k)
            .zip(v)
            .map(|((q, k), v)| AttentionInputs::new(q, k, v, true))
            .collect::<Result<Vec<_>>>()?;
        Ok((heads, None))
    } else {
        let mut spec = WorkloadSpec::load(input)?;
        if let Some(s) = seed {
            spec.seed = s;
        }
        Ok((generate(&spec)?, Some(spec)))
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One `bench` measurement, in CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    #[serde(rename = "L")]
    pub seq_len: usize,
    #[serde(rename = "B")]
    pub block_size: usize,
    #[serde(rename = "S")]
    pub stride: usize,
    pub tau: f64,
    pub pattern: String,
    pub strategy: String,
    pub head: usize,
    pub density: f64,
    pub select_time_ns: u64,
    pub attend_time_ns: u64,
    pub full_time_ns: u64,
    pub speedup: f64,
    pub output_error: f64,
    pub seed: u64,
    pub threads: usize,
}

pub const BENCH_COLUMNS: [&str; 15] = [
    "L",
    "B",
    "S",
    "tau",
    "pattern",
    "strategy",
    "head",
    "density",
    "select_time_ns",
    "attend_time_ns",
    "full_time_ns",
    "speedup",
    "output_error",
    "seed",
    "threads",
];

/// One `ablate` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRecord {
    pub head: usize,
    pub pattern: String,
    pub stride: usize,
    pub strategy: String,
    pub rank_correlation: f64,
    pub js_divergence: f64,
    pub density: f64,
    pub output_error: f64,
}

pub const ABLATION_COLUMNS: [&str; 8] = [
    "head",
    "pattern",
    "stride",
    "strategy",
    "rank_correlation",
    "js_divergence",
    "density",
    "output_error",
];

/// Median wall time in nanoseconds of `reps` runs after one warm-up run.
/// Returns the result of the last run.
pub fn time_median<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, u64)> {
    let mut last = f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        last = f()?;
        times.push(start.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2
    };
    Ok((last, median))
}

/// Strategy grid used by `ablate`: the configured strategy's family members
/// at their default parameters, in a fixed order.
fn ablation_strategies(cfg: &SelectionConfig, n_blocks: usize) -> [Strategy; 3] {
    let k = match cfg.strategy {
        Strategy::TopK(k) => k,
        _ => n_blocks.div_ceil(4).max(1),
    };
    let r = match cfg.strategy {
        Strategy::TopRatio(r) => r,
        _ => 0.25,
    };
    [Strategy::Threshold, Strategy::TopK(k), Strategy::TopRatio(r)]
}

fn ablation_patterns(cfg: &SelectionConfig, seed: Option<u64>) -> [Pattern; 4] {
    let seed = match cfg.pattern {
        Pattern::Random { seed } => seed,
        _ => seed.unwrap_or(0),
    };
    [
        Pattern::Antidiagonal,
        Pattern::Diagonal,
        Pattern::Random { seed },
        Pattern::FullSum,
    ]
}

fn cmd_gen_workload(spec: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = WorkloadSpec::load(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let heads = generate(&spec)?;
    ensure_dir(out)?;
    let stack =
        |f: fn(&AttentionInputs) -> &Tensor| Tensor::stack(&heads.iter().map(|h| f(h).clone()).collect::<Vec<_>>());
    write_atomic(&out.join("q.xatn"), &encode_tensor(&stack(AttentionInputs::q)?))?;
    write_atomic(&out.join("k.xatn"), &encode_tensor(&stack(AttentionInputs::k)?))?;
    write_atomic(&out.join("v.xatn"), &encode_tensor(&stack(AttentionInputs::v)?))?;
    write_json(&out.join("workload.json"), &spec)?;
    println!(
        "{}",
        serde_json::json!({"heads": heads.len(), "seq_len": spec.seq_len, "head_dim": spec.head_dim})
    );
    Ok(())
}

fn cmd_score(args: &CommonArgs) -> Result<()> {
    let (heads, cfg, _) = args.load()?;
    let out = args.out()?;
    ensure_dir(out)?;
    for (h, inp) in heads.iter().enumerate() {
        let scorer = HeadScorer::new(inp, &cfg)?;
        for b in 0..scorer.n_blocks() {
            let ts = scorer.score_block(b)?;
            write_atomic(&out.join(format!("head{h}_block{b}_raw.xatn")), &encode_tensor(&ts.raw))?;
            write_atomic(
                &out.join(format!("head{h}_block{b}_prob.xatn")),
                &encode_tensor(&ts.prob),
            )?;
        }
        println!("{}", serde_json::json!({"head": h, "query_blocks": scorer.n_blocks()}));
    }
    Ok(())
}

fn mask_path(dir: &Path, head: usize) -> PathBuf {
    dir.join(format!("mask_head{head}.xatn"))
}

fn cmd_select(args: &CommonArgs) -> Result<()> {
    let (heads, cfg, _) = args.load()?;
    let out = args.out()?;
    ensure_dir(out)?;
    for (h, inp) in heads.iter().enumerate() {
        let mask = build_mask(inp, &cfg)?;
        write_atomic(&mask_path(out, h), &mask.encode())?;
        println!(
            "{}",
            serde_json::json!({"head": h, "density": density(&mask, cfg.causal), "selected": mask.count()})
        );
    }
    Ok(())
}

fn cmd_attend(args: &CommonArgs, masks: Option<&Path>, no_oracle: bool) -> Result<()> {
    let (heads, cfg, _) = args.load()?;
    let mut outputs = Vec::with_capacity(heads.len());
    for (h, inp) in heads.iter().enumerate() {
        let mask = match masks {
            Some(dir) => {
                let m = BlockMask::load(mask_path(dir, h))?;
                m.validate(cfg.causal)?;
                m
            }
            None => build_mask(inp, &cfg)?,
        };
        let out = sparse_attention(inp, &mask, cfg.block_size)?;
        let mut line = serde_json::json!({"head": h, "density": density(&mask, cfg.causal)});
        if !no_oracle {
            line["output_error"] = output_error(&out, &full_attention(inp)?)?.into();
        }
        println!("{line}");
        outputs.push(out);
    }
    if let Some(path) = &args.out {
        write_atomic(path, &encode_tensor(&Tensor::stack(&outputs)?))?;
    }
    Ok(())
}

fn cmd_ablate(args: &CommonArgs, strides: &[usize]) -> Result<()> {
    let (heads, cfg, seed) = args.load()?;
    let out = args.out()?;
    let mut rows = Vec::new();
    for (h, inp) in heads.iter().enumerate() {
        let truth = ground_truth_block_distribution(inp, cfg.block_size)?;
        let full = full_attention(inp)?;
        let strategies = ablation_strategies(&cfg, truth.len());
        for pattern in ablation_patterns(&cfg, seed) {
            for &stride in strides {
                let base = SelectionConfig {
                    pattern,
                    stride,
                    ..cfg.clone()
                };
                base.validate()?;
                let probs = block_prob_rows(inp, &base)?;
                let (rho, js) = similarity(&probs, &truth, cfg.causal)?;
                for strategy in strategies {
                    let c = SelectionConfig {
                        strategy,
                        ..base.clone()
                    };
                    let mask = mask_from_probs(&probs, &c)?;
                    let err = output_error(&sparse_attention(inp, &mask, c.block_size)?, &full)?;
                    rows.push(AblationRecord {
                        head: h,
                        pattern: pattern.to_string(),
                        stride,
                        strategy: strategy.to_string(),
                        rank_correlation: rho,
                        js_divergence: js,
                        density: density(&mask, c.causal),
                        output_error: err,
                    });
                }
            }
        }
    }
    write_csv(out, &rows, &ABLATION_COLUMNS)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".method.json");
    write_json(Path::new(&sidecar), &SIMILARITY_METHOD)?;
    println!("{}", serde_json::json!({"rows": rows.len()}));
    Ok(())
}

fn cmd_calibrate(args: &CommonArgs, extra: &[PathBuf], budget: usize, t_init: f64, epsilon: f64) -> Result<()> {
    let (first, cfg, _) = args.load()?;
    let mut sets = vec![first];
    for path in extra {
        let (heads, _) = load_heads(path, args.seed)?;
        sets.push(heads.into_iter().map(|h| h.with_causal(cfg.causal)).collect());
    }
    let ev = FidelityEvaluator::new(sets, &cfg)?;
    let result = calibrate(&ev, budget, t_init, epsilon)?;
    let h = ev.n_heads();
    let report = serde_json::json!({
        "baseline_density": ev.density(&vec![t_init; h])?,
        "final_density": ev.density(&result.thresholds)?,
        "baseline_perf": result.baseline_perf,
        "final_perf": result.final_perf,
    });
    if let Some(out) = &args.out {
        write_json(out, &result)?;
    }
    println!("{report}");
    Ok(())
}

fn cmd_bench(args: &CommonArgs, reps: usize, threads: usize) -> Result<()> {
    if reps < 5 {
        return Err(Error::InvalidConfig(format!(
            "bench needs at least 5 repetitions, got {reps}"
        )));
    }
    let (heads, cfg, seed) = args.load()?;
    let out = args.out()?;
    let mut rows = Vec::new();
    for (h, inp) in heads.iter().enumerate() {
        let (mask, select_ns) = time_median(reps, || build_mask(inp, &cfg))?;
        let (sparse, attend_ns) = time_median(reps, || sparse_attention(inp, &mask, cfg.block_size))?;
        let (dense, full_ns) = time_median(reps, || dense_blocked_attention(inp, cfg.block_size))?;
        let rec = BenchRecord {
            seq_len: inp.seq_len(),
            block_size: cfg.block_size,
            stride: cfg.stride,
            tau: cfg.tau,
            pattern: cfg.pattern.to_string(),
            strategy: cfg.strategy.to_string(),
            head: h,
            density: density(&mask, cfg.causal),
            select_time_ns: select_ns,
            attend_time_ns: attend_ns,
            full_time_ns: full_ns,
            speedup: full_ns as f64 / (select_ns + attend_ns).max(1) as f64,
            output_error: output_error(&sparse, &dense)?,
            seed: seed.unwrap_or(0),
            threads,
        };
        println!("{}", serde_json::to_string(&rec)?);
        rows.push(rec);
    }
    write_csv(out, &rows, &BENCH_COLUMNS)
}

fn common(cmd: &Command) -> Option<&CommonArgs> {
    match cmd {
        Command::GenWorkload { .. } => None,
        Command::Score(c) | Command::Select(c) => Some(c),
        Command::Attend { common, .. }
        | Command::Ablate { common, .. }
        | Command::Calibrate { common, .. }
        | Command::Bench { common, .. } => Some(common),
    }
}

/// Run one parsed command inside a thread pool of the requested size.
pub fn execute(cli: &Cli) -> Result<()> {
    let requested = match common(&cli.command) {
        Some(c) => c.threads()?,
        None => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(requested)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| match &cli.command {
        Command::GenWorkload { spec, seed, out } => cmd_gen_workload(spec, *seed, out),
        Command::Score(c) => cmd_score(c),
        Command::Select(c) => cmd_select(c),
        Command::Attend {
            common,
            masks,
            no_oracle,
        } => cmd_attend(common, masks.as_deref(), *no_oracle),
        Command::Ablate { common, strides } => cmd_ablate(common, strides),
        Command::Calibrate {
            common,
            extra,
            budget,
            t_init,
            epsilon,
        } => cmd_calibrate(common, extra, *budget, *t_init, *epsilon),
        Command::Bench { common, reps } => cmd_bench(common, *reps, threads),
    })
}

/// Parse and run; returns the process exit code. Failures print one JSON
/// line `{"error": kind, "message": text}` to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": "usage", "message": e.to_string().trim_end()})
            );
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}
