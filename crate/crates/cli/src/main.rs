//! `mage`: decoding simulations, trace analyses and cost sweeps.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mage_core::config::{parse_cost_params, parse_sweep, FlatConfig, SimConfig};
use mage_core::costmodel::{
    step_latency, sweep, write_amortization_csv, write_breakdown_csv, CostParams, StepKind,
    SweepSpec,
};
use mage_core::decoder::{generate, DecodeConfig, DenoiseTrace, Generation, Method};
use mage_core::metrics::{method_recall, write_heatmap_csv, write_recall_csv};
use mage_core::trace::{
    method_recall_curves, plan_vs_oracle, read_jsonl, self_recall, skew_from_traces, write_jsonl,
    AnalysisParams, TraceFile, TRACE_MAGIC,
};
use mage_core::{build_model, MageError, ModelConfig};

#[derive(Parser)]
#[command(name = "mage", version, about = "Mask-guided sparse attention for block diffusion decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode with the toy model and write trace.jsonl, plans.txt and summary.csv.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (created if missing).
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a recall or skewness analysis on a binary or JSON-lines trace.
    Analyze {
        /// MAGETRACE1 file or JSON-lines trace from `simulate`.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        analysis: Analysis,
        /// Top-K size for oracle sets (binary traces).
        #[arg(long, default_value_t = 32)]
        k: usize,
        /// Minimum per-layer budget for the mask-guided plan (binary traces).
        #[arg(long, default_value_t = 8)]
        kmin: usize,
        /// Leading layers excluded from selection (binary traces).
        #[arg(long, default_value_t = 1)]
        exact_prefix: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the latency model; writes breakdown.csv and amortization.csv.
    Cost {
        /// TOML file with cost parameters (missing keys take defaults).
        #[arg(long)]
        params: Option<PathBuf>,
        /// TOML file with `contexts`, `budgets`, `kinds`.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Comma-separated context lengths (overrides the sweep file).
        #[arg(long, value_delimiter = ',')]
        contexts: Option<Vec<usize>>,
        /// Comma-separated budgets (overrides the sweep file).
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Convert between attention traces and JSON-lines traces.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Decode with the toy model and write every step's exact cache attention as MAGETRACE1.
    Export {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a MAGETRACE1 file and write a JSON-lines trace with oracle sets and coverage budgets.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        exact_prefix: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Recall,
    Skew,
    MethodRecall,
}

/// Config file plus flag overrides; flags win.
#[derive(Args)]
struct RunArgs {
    /// Flat TOML config: model field names plus method, k, k_min, tokens_per_step, num_blocks, prompt_len and baseline knobs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// exact | mage | quest | tidal | window | random | oracle
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    kmin: Option<usize>,
    #[arg(long)]
    tokens_per_step: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    skew_temperature: Option<f32>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    exact_layer_prefix: Option<usize>,
    #[arg(long)]
    page_size: Option<usize>,
    #[arg(long)]
    anchor_layer: Option<usize>,
    #[arg(long)]
    num_sinks: Option<usize>,
    #[arg(long)]
    window_size: Option<usize>,
    /// Governs model weights, prompt and random baselines.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<SimConfig, MageError> {
        let base = match &self.config {
            Some(p) => FlatConfig::parse(&read_text(p, true)?)?,
            None => FlatConfig::default(),
        };
        let flags = FlatConfig {
            method: self.method.clone(),
            k: self.k,
            k_min: self.kmin,
            tokens_per_step: self.tokens_per_step,
            num_blocks: self.blocks,
            prompt_len: self.prompt_len,
            skew_temperature: self.skew_temperature,
            num_layers: self.num_layers,
            block_size: self.block_size,
            exact_layer_prefix: self.exact_layer_prefix,
            page_size: self.page_size,
            anchor_layer: self.anchor_layer,
            num_sinks: self.num_sinks,
            window_size: self.window_size,
            seed: self.seed,
            ..Default::default()
        };
        base.overlay(&flags).resolve()
    }
}

fn read_text(path: &Path, is_config: bool) -> Result<String, MageError> {
    fs::read_to_string(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if is_config {
            MageError::Config(msg)
        } else {
            MageError::Data(msg)
        }
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, MageError> {
    fs::read(path).map_err(|e| MageError::Data(format!("{}: {e}", path.display())))
}

/// Write-temp-then-rename in the destination directory.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<(), MageError>) -> Result<(), MageError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| MageError::Io(e.to_string()))?;
    Ok(())
}

fn exit_code(e: &MageError) -> u8 {
    match e {
        MageError::Config(_) => 2,
        MageError::Data(_) | MageError::Parse { .. } | MageError::Io(_) | MageError::Metric(_) => 3,
        _ => 4,
    }
}

fn run_generation(sim: &SimConfig, keep_attention: bool) -> Result<Generation, MageError> {
    let model = build_model(&sim.model)?;
    let decode = DecodeConfig {
        keep_attention,
        ..sim.decode.clone()
    };
    generate(&model, &decode)
}

/// Cost parameters whose model dimensions match the toy model.
fn toy_cost_params(model: &ModelConfig) -> CostParams {
    CostParams {
        num_layers: model.num_layers,
        exact_layer_prefix: model.exact_layer_prefix,
        num_query_heads: model.num_query_heads,
        num_kv_heads: model.num_kv_heads,
        head_dim: model.head_dim,
        block_size: model.block_size,
        ..Default::default()
    }
}

/// Mean modeled step time over the run; each block pays its first step.
fn modeled_latency(sim: &SimConfig, traces: &[DenoiseTrace]) -> Result<f64, MageError> {
    let params = toy_cost_params(&sim.model);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in traces {
        for s in &t.steps {
            let n = s.context_len;
            let budget = s
                .plan
                .as_ref()
                .map_or(n, |p| (p.mean_planned_budget().round() as usize).min(n));
            let kind = match (&sim.decode.method, s.step) {
                (Method::Exact, _) => StepKind::Exact,
                (Method::Mage, 1) => StepKind::MageFirst,
                (Method::Baseline(b), _) => match b.source().as_str() {
                    "quest" => StepKind::Quest,
                    "tidal" => StepKind::Tidal,
                    _ => StepKind::MageRest,
                },
                _ => StepKind::MageRest,
            };
            total += step_latency(&params, n, budget, kind)?.total;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn mean_recall(traces: &[DenoiseTrace]) -> Result<Option<f64>, MageError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in traces {
        for s in &t.steps {
            if let (Some(plan), Some(oracle)) = (&s.plan, &s.oracle) {
                sum += method_recall(plan, oracle)?;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

fn cmd_simulate(run: &RunArgs, out: &Path) -> Result<(), MageError> {
    let sim = run.resolve()?;
    let generation = run_generation(&sim, false)?;
    let method = sim.decode.method.name();
    fs::create_dir_all(out)?;
    write_atomic(&out.join("trace.jsonl"), |w| write_jsonl(w, method, &generation.traces))?;
    write_atomic(&out.join("plans.txt"), |w| {
        for t in &generation.traces {
            for s in &t.steps {
                if let Some(p) = &s.plan {
                    writeln!(w, "## block {} step {}", t.block, s.step)?;
                    w.write_all(p.to_text().as_bytes())?;
                }
            }
        }
        Ok(())
    })?;
    let recall = mean_recall(&generation.traces)?;
    let latency = modeled_latency(&sim, &generation.traces)?;
    write_atomic(&out.join("summary.csv"), |w| {
        writeln!(w, "method,K,tokens_per_step,mean_recall,modeled_step_latency")?;
        let recall = recall.map(|r| format!("{r:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{method},{},{},{recall},{latency:.6}",
            sim.decode.k, sim.decode.tokens_per_step
        )?;
        Ok(())
    })
}

enum LoadedTrace {
    Binary(TraceFile),
    Lines(String, Vec<DenoiseTrace>),
}

fn load_trace(path: &Path) -> Result<LoadedTrace, MageError> {
    let bytes = read_bytes(path)?;
    // a cut-short header or another version still goes to the binary parser
    let binary = bytes.starts_with(b"MAGETRACE") || (!bytes.is_empty() && TRACE_MAGIC.starts_with(&bytes));
    if binary {
        Ok(LoadedTrace::Binary(TraceFile::from_bytes(&bytes)?))
    } else {
        let (method, traces) = read_jsonl(BufReader::new(&bytes[..]))?;
        Ok(LoadedTrace::Lines(method, traces))
    }
}

fn cmd_analyze(
    trace: &Path,
    analysis: Analysis,
    params: &AnalysisParams,
    out: &Path,
) -> Result<(), MageError> {
    let loaded = load_trace(trace)?;
    let (label, traces) = match loaded {
        LoadedTrace::Binary(f) => {
            if params.k == 0 {
                return Err(MageError::Config("k must be positive".into()));
            }
            (None, f.oracle_traces(params.k, params.exact_prefix)?)
        }
        LoadedTrace::Lines(method, traces) => (Some(method), traces),
    };
    match analysis {
        Analysis::Recall => {
            let curve = self_recall(&traces)?;
            write_atomic(out, |w| write_recall_csv(w, &[curve]))
        }
        Analysis::Skew => {
            let map = skew_from_traces(&traces)?;
            write_atomic(out, |w| write_heatmap_csv(w, &map))
        }
        Analysis::MethodRecall => {
            let curves = match label {
                None => method_recall_curves(&traces, params)?,
                Some(method) => vec![plan_vs_oracle(&traces, &method)?],
            };
            write_atomic(out, |w| write_recall_csv(w, &curves))
        }
    }
}

fn cmd_cost(
    params: Option<&Path>,
    sweep_file: Option<&Path>,
    contexts: Option<Vec<usize>>,
    budgets: Option<Vec<usize>>,
    out: &Path,
) -> Result<(), MageError> {
    let p = match params {
        Some(path) => parse_cost_params(&read_text(path, true)?)?,
        None => CostParams::default(),
    };
    let mut spec = match sweep_file {
        Some(path) => parse_sweep(&read_text(path, true)?)?,
        None => SweepSpec::default(),
    };
    if let Some(c) = contexts {
        spec.contexts = c;
    }
    if let Some(b) = budgets {
        spec.budgets = b;
    }
    if spec.contexts.is_empty() || spec.budgets.is_empty() {
        return Err(MageError::Config("sweep needs at least one context and budget".into()));
    }
    let (reports, amort) = sweep(&p, &spec)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("breakdown.csv"), |w| write_breakdown_csv(w, &reports))?;
    write_atomic(&out.join("amortization.csv"), |w| write_amortization_csv(w, &amort))
}

fn cmd_export(run: &RunArgs, out: &Path) -> Result<(), MageError> {
    let sim = run.resolve()?;
    let generation = run_generation(&sim, true)?;
    let steps: Vec<_> = generation
        .traces
        .iter()
        .flat_map(|t| t.attention.iter().cloned())
        .collect();
    let file = TraceFile::from_attention(sim.model.num_query_heads, sim.model.block_size, &steps)?;
    write_atomic(out, |w| file.write(w))
}

fn cmd_ingest(input: &Path, k: usize, exact_prefix: usize, out: &Path) -> Result<(), MageError> {
    if k == 0 {
        return Err(MageError::Config("k must be positive".into()));
    }
    let file = TraceFile::from_bytes(&read_bytes(input)?)?;
    let traces = file.oracle_traces(k, exact_prefix)?;
    write_atomic(out, |w| write_jsonl(w, "exact", &traces))
}

fn dispatch(cli: Cli) -> Result<(), MageError> {
    match cli.command {
        Command::Simulate { run, out } => cmd_simulate(&run, &out),
        Command::Analyze {
            trace,
            analysis,
            k,
            kmin,
            exact_prefix,
            seed,
            out,
        } => cmd_analyze(
            &trace,
            analysis,
            &AnalysisParams {
                k,
                k_min: kmin,
                exact_prefix,
                seed,
            },
            &out,
        ),
        Command::Cost {
            params,
            sweep,
            contexts,
            budgets,
            out,
        } => cmd_cost(params.as_deref(), sweep.as_deref(), contexts, budgets, &out),
        Command::Trace(TraceCommand::Export { run, out }) => cmd_export(&run, &out),
        Command::Trace(TraceCommand::Ingest {
            input,
            k,
            exact_prefix,
            out,
        }) => cmd_ingest(&input, k, exact_prefix, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mage: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
