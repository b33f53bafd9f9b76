//! Analytic step-latency model for sparse block decoding.
//!
//! Decoding is memory-bound: a layer's attention costs one kernel launch,
//! reading `n` KV entries at `bytes_per_kv_entry / bandwidth` each, and a
//! compute term `B·H_q·d·n / compute_rate`. Index selection is modeled as a
//! linear scan of the block's attention scores plus a fixed number of
//! kernel launches. For the first mask-guided step, per-layer selection runs
//! on a second stream and only the last layer's selection is exposed.
//!
//! Time units are whatever `bandwidth` and `launch_overhead` use (the
//! defaults are microseconds and bytes/µs). All checks are relative.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::metrics::csv_err;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Bytes per time unit.
    pub bandwidth: f64,
    /// Time per kernel launch.
    pub launch_overhead: f64,
    /// Flop-equivalents per time unit.
    pub compute_rate: f64,
    /// Bytes per stored element.
    pub element_size: f64,
    /// Non-attention time per layer (weights, MLP); 0 isolates attention.
    pub other_per_layer: f64,
    /// Kernel launches per layer for union formation and index selection.
    pub selection_kernels: f64,
    /// Compare cost per scanned score, in flop-equivalents.
    pub compare_flops: f64,
    pub num_layers: usize,
    pub exact_layer_prefix: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
    pub page_size: usize,
}

impl Default for CostParams {
    /// Roughly a 7B GQA model (28 layers, 28/4 heads, d=128) with 32-token
    /// blocks on an HBM3-class device, in microseconds.
    fn default() -> Self {
        Self {
            bandwidth: 3.35e6,
            launch_overhead: 5.0,
            compute_rate: 1.0e9,
            element_size: 2.0,
            other_per_layer: 12.0,
            selection_kernels: 4.0,
            compare_flops: 16.0,
            num_layers: 28,
            exact_layer_prefix: 1,
            num_query_heads: 28,
            num_kv_heads: 4,
            head_dim: 128,
            block_size: 32,
            page_size: 16,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth", self.bandwidth),
            ("launch_overhead", self.launch_overhead),
            ("compute_rate", self.compute_rate),
            ("element_size", self.element_size),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && !v.is_nan()) {
                return Err(MageError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("other_per_layer", self.other_per_layer),
            ("selection_kernels", self.selection_kernels),
            ("compare_flops", self.compare_flops),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MageError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        let counts = [
            ("num_layers", self.num_layers),
            ("num_query_heads", self.num_query_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("block_size", self.block_size),
            ("page_size", self.page_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MageError::Config(format!("{name} must be positive")));
            }
        }
        if self.exact_layer_prefix > self.num_layers {
            return Err(MageError::Config("exact_layer_prefix exceeds num_layers".into()));
        }
        Ok(())
    }

    /// `2·d·H_kv·element_size`: one position's keys and values in a layer.
    pub fn bytes_per_kv_entry(&self) -> f64 {
        2.0 * self.head_dim as f64 * self.num_kv_heads as f64 * self.element_size
    }

    pub fn planned_layers(&self) -> usize {
        self.num_layers - self.exact_layer_prefix
    }

    fn queries(&self) -> f64 {
        (self.block_size * self.num_query_heads) as f64
    }

    /// One layer's attention over `n` entries.
    pub fn attention_layer(&self, n: f64) -> f64 {
        self.launch_overhead
            + n * self.bytes_per_kv_entry() / self.bandwidth
            + self.queries() * self.head_dim as f64 * n / self.compute_rate
    }

    /// One layer's union formation and top-K selection over `n` entries.
    pub fn selection_layer(&self, n: f64) -> f64 {
        let scanned = self.queries() * n;
        self.selection_kernels * self.launch_overhead
            + scanned * self.element_size / self.bandwidth
            + scanned * self.compare_flops / self.compute_rate
    }

    /// Page-metadata read and bound scoring for one layer.
    pub fn quest_estimation_layer(&self, n: f64) -> f64 {
        let pages = (n / self.page_size as f64).ceil();
        let bytes = self.num_kv_heads as f64 * pages * 2.0 * self.head_dim as f64 * self.element_size;
        self.launch_overhead
            + bytes / self.bandwidth
            + self.queries() * pages * 2.0 * self.head_dim as f64 / self.compute_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Exact,
    MageFirst,
    MageRest,
    Quest,
    Tidal,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Exact => "exact",
            StepKind::MageFirst => "mage_first",
            StepKind::MageRest => "mage_rest",
            StepKind::Quest => "quest",
            StepKind::Tidal => "tidal",
        }
    }

    pub fn all() -> [StepKind; 5] {
        [
            StepKind::Exact,
            StepKind::MageFirst,
            StepKind::MageRest,
            StepKind::Quest,
            StepKind::Tidal,
        ]
    }
}

impl std::str::FromStr for StepKind {
    type Err = MageError;

    fn from_str(s: &str) -> Result<Self> {
        StepKind::all()
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MageError::Config(format!("unknown step kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    IndexSelection,
    Attention,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Main,
    /// Work issued on a second stream and overlapped with the main stream.
    Overlapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: Phase,
    pub stream: Stream,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub kind: StepKind,
    pub context_len: usize,
    pub budget: usize,
    pub phases: Vec<PhaseTime>,
    /// Wall time of the step after overlap.
    pub total: f64,
    pub speedup_vs_exact: f64,
}

impl LatencyReport {
    pub fn time(&self, phase: Phase, stream: Stream) -> f64 {
        self.phases
            .iter()
            .filter(|p| p.phase == phase && p.stream == stream)
            .map(|p| p.time)
            .sum()
    }

    pub fn main_stream(&self) -> f64 {
        self.phases
            .iter()
            .filter(|p| p.stream == Stream::Main)
            .map(|p| p.time)
            .sum()
    }
}

/// Two-lane overlap: `max(main, async) + serial_tail`.
pub fn overlap(main: f64, async_time: f64, serial_tail: f64) -> f64 {
    main.max(async_time) + serial_tail
}

fn exact_total(p: &CostParams, n: f64) -> f64 {
    p.num_layers as f64 * (p.attention_layer(n) + p.other_per_layer)
}

/// Latency of one denoising step of the given kind at context length `n`
/// with an average per-layer budget `budget`.
pub fn step_latency(p: &CostParams, n: usize, budget: usize, kind: StepKind) -> Result<LatencyReport> {
    p.validate()?;
    let sparse = !matches!(kind, StepKind::Exact | StepKind::MageFirst);
    if sparse && budget > n {
        return Err(MageError::Model(format!("budget {budget} exceeds context {n}")));
    }
    let nf = n as f64;
    let kf = budget as f64;
    let layers = p.num_layers as f64;
    let prefix = p.exact_layer_prefix as f64;
    let planned = p.planned_layers() as f64;
    let other = layers * p.other_per_layer;
    let ph = |phase, stream, time| PhaseTime { phase, stream, time };

    let (phases, total) = match kind {
        StepKind::Exact => {
            let attn = layers * p.attention_layer(nf);
            (
                vec![ph(Phase::Attention, Stream::Main, attn), ph(Phase::Other, Stream::Main, other)],
                attn + other,
            )
        }
        StepKind::MageRest => {
            let attn = prefix * p.attention_layer(nf) + planned * p.attention_layer(kf);
            (
                vec![ph(Phase::Attention, Stream::Main, attn), ph(Phase::Other, Stream::Main, other)],
                attn + other,
            )
        }
        StepKind::MageFirst => {
            let attn = layers * p.attention_layer(nf);
            let per_layer = p.selection_layer(nf);
            let (hidden, tail) = if p.planned_layers() == 0 {
                (0.0, 0.0)
            } else {
                ((planned - 1.0) * per_layer, per_layer)
            };
            let main = attn + other;
            (
                vec![
                    ph(Phase::Attention, Stream::Main, attn),
                    ph(Phase::Other, Stream::Main, other),
                    ph(Phase::IndexSelection, Stream::Overlapped, hidden),
                    ph(Phase::IndexSelection, Stream::Main, tail),
                ],
                overlap(main, hidden, tail),
            )
        }
        StepKind::Quest => {
            let est = planned * p.quest_estimation_layer(nf);
            let attn = prefix * p.attention_layer(nf) + planned * p.attention_layer(kf);
            (
                vec![
                    ph(Phase::IndexSelection, Stream::Main, est),
                    ph(Phase::Attention, Stream::Main, attn),
                    ph(Phase::Other, Stream::Main, other),
                ],
                est + attn + other,
            )
        }
        StepKind::Tidal => {
            let sel = if p.planned_layers() == 0 { 0.0 } else { p.selection_layer(nf) };
            let exact_layers = (prefix + 1.0).min(layers);
            let attn = exact_layers * p.attention_layer(nf) + (layers - exact_layers) * p.attention_layer(kf);
            (
                vec![
                    ph(Phase::IndexSelection, Stream::Main, sel),
                    ph(Phase::Attention, Stream::Main, attn),
                    ph(Phase::Other, Stream::Main, other),
                ],
                sel + attn + other,
            )
        }
    };
    Ok(LatencyReport {
        kind,
        context_len: n,
        budget,
        phases,
        total,
        speedup_vs_exact: exact_total(p, nf) / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakEven {
    Steps(u64),
    Never,
}

impl std::fmt::Display for BreakEven {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BreakEven::Steps(n) => write!(f, "{n}"),
            BreakEven::Never => f.write_str("no-break-even"),
        }
    }
}

/// Smallest step count `n ≥ 1` at which `first + (n−1)·rest < n·baseline`.
///
/// A first step no slower than the baseline needs no amortization and
/// breaks even at `n = 1`. `rest ≥ baseline` never breaks even.
pub fn break_even(baseline_step: f64, first_step: f64, rest_step: f64) -> BreakEven {
    if rest_step >= baseline_step {
        return BreakEven::Never;
    }
    if first_step <= baseline_step {
        return BreakEven::Steps(1);
    }
    let ratio = (first_step - rest_step) / (baseline_step - rest_step);
    let mut n = (ratio.floor() as u64).saturating_add(1).max(1);
    // guard the floor against rounding on either side
    let beats = |n: u64| first_step + (n - 1) as f64 * rest_step < n as f64 * baseline_step;
    while n > 1 && beats(n - 1) {
        n -= 1;
    }
    while !beats(n) {
        n += 1;
    }
    BreakEven::Steps(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub contexts: Vec<usize>,
    pub budgets: Vec<usize>,
    pub kinds: Vec<StepKind>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            contexts: vec![16384, 32768, 65536, 131072],
            budgets: vec![2048],
            kinds: StepKind::all().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmortizationRow {
    pub context_len: usize,
    pub k: usize,
    pub baseline: StepKind,
    pub baseline_step: f64,
    pub first_step: f64,
    pub rest_step: f64,
    pub break_even: BreakEven,
}

pub fn sweep(p: &CostParams, spec: &SweepSpec) -> Result<(Vec<LatencyReport>, Vec<AmortizationRow>)> {
    let mut reports = Vec::new();
    let mut amort = Vec::new();
    for &n in &spec.contexts {
        for &k in &spec.budgets {
            let k_eff = k.min(n);
            for &kind in &spec.kinds {
                reports.push(step_latency(p, n, k_eff, kind)?);
            }
            let first = step_latency(p, n, k_eff, StepKind::MageFirst)?.total;
            let rest = step_latency(p, n, k_eff, StepKind::MageRest)?.total;
            for baseline in [StepKind::Exact, StepKind::Quest, StepKind::Tidal] {
                let base = step_latency(p, n, k_eff, baseline)?.total;
                amort.push(AmortizationRow {
                    context_len: n,
                    k,
                    baseline,
                    baseline_step: base,
                    first_step: first,
                    rest_step: rest,
                    break_even: break_even(base, first, rest),
                });
            }
        }
    }
    Ok((reports, amort))
}

fn fmt_time(t: f64) -> String {
    format!("{t:.6}")
}

/// Columns `context_len,K,method,phase,stream,time`; each report also gets
/// a `total,wall` row carrying the overlapped step time.
pub fn write_breakdown_csv<W: Write>(out: W, reports: &[LatencyReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["context_len", "K", "method", "phase", "stream", "time"])
        .map_err(csv_err)?;
    for r in reports {
        let base = [r.context_len.to_string(), r.budget.to_string(), r.kind.as_str().to_string()];
        for p in &r.phases {
            let phase = match p.phase {
                Phase::IndexSelection => "index_selection",
                Phase::Attention => "attention",
                Phase::Other => "other",
            };
            let stream = match p.stream {
                Stream::Main => "main",
                Stream::Overlapped => "overlapped",
            };
            w.write_record(base.iter().cloned().chain([phase.into(), stream.into(), fmt_time(p.time)]))
                .map_err(csv_err)?;
        }
        w.write_record(base.iter().cloned().chain(["total".into(), "wall".into(), fmt_time(r.total)]))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `context_len,K,baseline,baseline_step,first_step,rest_step,break_even`.
pub fn write_amortization_csv<W: Write>(out: W, rows: &[AmortizationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "context_len",
        "K",
        "baseline",
        "baseline_step",
        "first_step",
        "rest_step",
        "break_even",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.context_len.to_string(),
            r.k.to_string(),
            r.baseline.as_str().to_string(),
            fmt_time(r.baseline_step),
            fmt_time(r.first_step),
            fmt_time(r.rest_step),
            r.break_even.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
