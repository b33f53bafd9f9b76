//! On-disk trace formats.
//!
//! Binary attention traces (`MAGETRACE1`) carry raw per-step cache
//! attention so the recall and skewness analyses can run on attention
//! exported from any model. Layout, all integers u32 little-endian:
//!
//! ```text
//! "MAGETRACE1"  L  H_q  H_kv  B  T  n_1 .. n_T
//! for each step t, layer ℓ:  H_q·B·n_t f32 LE, row-major (head, query, key)
//! ```
//!
//! Each row is a query's attention over the cache, renormalized to sum to 1.
//! Steps of consecutive blocks are told apart by their context length.
//!
//! JSON-lines traces hold one [`TraceRecord`] per denoising step.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::{oracle_plan, random_plan, window_plan};
use crate::decoder::{DenoiseTrace, StepRecord};
use crate::error::{MageError, Result};
use crate::mage::build_plan;
use crate::metrics::{
    mean_curve, plan_recall_curve, recall_curve, skew_heatmap_from_budgets, step_budgets,
    RecallCurve, SkewHeatmap,
};
use crate::plan::SelectionPlan;
use crate::tensor::Matrix;
use crate::toymodel::StepAttention;

pub const TRACE_MAGIC: &[u8; 10] = b"MAGETRACE1";
const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub context_len: usize,
    /// Per layer, `H_q·B·n` values.
    pub layers: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub block_size: usize,
    pub steps: Vec<TraceStep>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < len {
            return Err(MageError::parse(
                self.pos,
                format!("truncated {what}: need {len} bytes, {left} available ({} missing)", len - left),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn to_u32(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| MageError::Data(format!("{what} {v} does not fit in u32")))
}

impl TraceFile {
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    fn layer_len(&self, n: usize) -> usize {
        self.num_query_heads * self.block_size * n
    }

    /// Checks dimensions and that every row sums to 1 ± 1e-3.
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_query_heads == 0 || self.num_kv_heads == 0 || self.block_size == 0 {
            return Err(MageError::Data("trace dimensions must be positive".into()));
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(MageError::Data("query heads not a multiple of KV heads".into()));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.layers.len() != self.num_layers {
                return Err(MageError::Data(format!("step {}: {} layers", t + 1, step.layers.len())));
            }
            let n = step.context_len;
            for (l, data) in step.layers.iter().enumerate() {
                if data.len() != self.layer_len(n) {
                    return Err(MageError::Data(format!(
                        "step {} layer {l}: {} values, expected {}",
                        t + 1,
                        data.len(),
                        self.layer_len(n)
                    )));
                }
                if n == 0 {
                    continue;
                }
                for (r, row) in data.chunks(n).enumerate() {
                    let sum: f64 = row.iter().map(|&x| x as f64).sum();
                    if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) || row.iter().any(|&x| !(x >= 0.0)) {
                        return Err(MageError::Data(format!(
                            "step {} layer {l} row {r}: not a distribution (sum {sum})",
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        out.write_all(TRACE_MAGIC)?;
        for (v, what) in [
            (self.num_layers, "layers"),
            (self.num_query_heads, "query heads"),
            (self.num_kv_heads, "kv heads"),
            (self.block_size, "block size"),
            (self.steps.len(), "steps"),
        ] {
            out.write_all(&to_u32(v, what)?)?;
        }
        for s in &self.steps {
            out.write_all(&to_u32(s.context_len, "context length")?)?;
        }
        for s in &self.steps {
            for layer in &s.layers {
                let mut buf = Vec::with_capacity(layer.len() * 4);
                for x in layer {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write(&mut v)?;
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(TRACE_MAGIC.len(), "magic")?;
        if magic != TRACE_MAGIC {
            return Err(MageError::parse(0, "bad magic, expected MAGETRACE1"));
        }
        let dims_at = r.pos;
        let num_layers = r.u32("layer count")?;
        let num_query_heads = r.u32("query head count")?;
        let num_kv_heads = r.u32("kv head count")?;
        let block_size = r.u32("block size")?;
        let num_steps = r.u32("step count")?;
        if num_layers == 0 || num_query_heads == 0 || num_kv_heads == 0 || block_size == 0 {
            return Err(MageError::parse(dims_at, "zero dimension in header"));
        }
        if num_query_heads % num_kv_heads != 0 {
            return Err(MageError::parse(dims_at, "query heads not a multiple of KV heads"));
        }
        let lens_at = r.pos;
        let mut lens = Vec::with_capacity(num_steps.min(bytes.len() / 4));
        for _ in 0..num_steps {
            lens.push(r.u32("context length")?);
        }
        // Reject impossible sizes before allocating anything.
        let row_block = (num_query_heads as u128) * (block_size as u128) * (num_layers as u128) * 4;
        let needed: u128 = lens.iter().map(|&n| row_block * n as u128).sum();
        let left = (bytes.len() - r.pos) as u128;
        if needed > left {
            return Err(MageError::parse(
                r.pos,
                format!(
                    "truncated payload: header at {lens_at} declares {needed} bytes, {left} available ({} missing)",
                    needed - left
                ),
            ));
        }
        let mut steps = Vec::with_capacity(num_steps);
        for &n in &lens {
            let mut layers = Vec::with_capacity(num_layers);
            for _ in 0..num_layers {
                let count = num_query_heads * block_size * n;
                let start = r.pos;
                let raw = r.take(count * 4, "attention payload")?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                if n > 0 {
                    for (i, row) in data.chunks(n).enumerate() {
                        let sum: f64 = row.iter().map(|&x| x as f64).sum();
                        if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) || row.iter().any(|&x| !(x >= 0.0)) {
                            return Err(MageError::parse(
                                start + i * n * 4,
                                format!("attention row sums to {sum}, expected 1"),
                            ));
                        }
                    }
                }
                layers.push(data);
            }
            steps.push(TraceStep { context_len: n, layers });
        }
        if r.pos != bytes.len() {
            return Err(MageError::parse(
                r.pos,
                format!("{} trailing bytes after payload", bytes.len() - r.pos),
            ));
        }
        Ok(TraceFile {
            num_layers,
            num_query_heads,
            num_kv_heads,
            block_size,
            steps,
        })
    }

    /// Builds a trace from per-step exact cache attention.
    pub fn from_attention(
        num_query_heads: usize,
        block_size: usize,
        steps: &[StepAttention],
    ) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| MageError::Data("no attention to export; enable keep_attention".into()))?;
        let num_layers = first.num_layers();
        let num_kv_heads = first.num_kv_heads();
        if num_kv_heads == 0 || num_query_heads % num_kv_heads != 0 {
            return Err(MageError::Shape("query heads not a multiple of KV heads".into()));
        }
        let g = num_query_heads / num_kv_heads;
        let mut out = Vec::with_capacity(steps.len());
        for s in steps {
            let n = s.context_len();
            let mut layers = Vec::with_capacity(num_layers);
            for heads in &s.layers {
                let mut data = Vec::with_capacity(num_query_heads * block_size * n);
                for m in heads {
                    if m.rows() != g * block_size || m.cols() != n {
                        return Err(MageError::Shape("attention matrix shape mismatch".into()));
                    }
                    data.extend_from_slice(m.as_slice());
                }
                layers.push(data);
            }
            out.push(TraceStep { context_len: n, layers });
        }
        let file = TraceFile {
            num_layers,
            num_query_heads,
            num_kv_heads,
            block_size,
            steps: out,
        };
        file.validate()?;
        Ok(file)
    }

    /// Per-KV-head `G·B × n` matrices of step `t` (0-based).
    pub fn step_attention(&self, t: usize) -> Result<StepAttention> {
        let step = &self.steps[t];
        let n = step.context_len;
        let rows = self.group_size() * self.block_size;
        let layers = step
            .layers
            .iter()
            .map(|data| {
                data.chunks(rows * n.max(1))
                    .take(self.num_kv_heads)
                    .map(|c| {
                        if n == 0 {
                            Ok(Matrix::zeros(rows, 0))
                        } else {
                            Matrix::from_vec(rows, n, c.to_vec())
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StepAttention { layers })
    }

    /// Step ranges `[start, end)` of consecutive blocks, split where the
    /// context length changes.
    pub fn block_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 1..=self.steps.len() {
            if t == self.steps.len() || self.steps[t].context_len != self.steps[start].context_len {
                out.push((start, t));
                start = t;
            }
        }
        out
    }

    /// One synthetic trace per block with oracle top-`k` sets at every step
    /// and the attention attached.
    pub fn oracle_traces(&self, k: usize, exact_prefix: usize) -> Result<Vec<DenoiseTrace>> {
        self.block_ranges()
            .into_iter()
            .enumerate()
            .map(|(block, (s, e))| {
                let mut steps = Vec::with_capacity(e - s);
                let mut attention = Vec::with_capacity(e - s);
                for t in s..e {
                    let att = self.step_attention(t)?;
                    let mut rec = StepRecord::synthetic(t - s + 1, att.context_len(), Some(oracle_plan(&att, k, exact_prefix)?));
                    rec.coverage_budgets = Some(step_budgets(&att, crate::metrics::DEFAULT_COVERAGE)?);
                    steps.push(rec);
                    attention.push(att);
                }
                Ok(DenoiseTrace {
                    block,
                    k,
                    steps,
                    built_plan: None,
                    union_stats: None,
                    attention,
                })
            })
            .collect()
    }
}

/// Parameters for trace analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisParams {
    pub k: usize,
    pub k_min: usize,
    pub exact_prefix: usize,
    pub seed: u64,
}

/// Step-1 oracle against every later oracle, averaged over blocks.
pub fn self_recall(traces: &[DenoiseTrace]) -> Result<RecallCurve> {
    let curves = traces
        .iter()
        .map(|t| recall_curve(t, "oracle_step1"))
        .collect::<Result<Vec<_>>>()?;
    mean_curve(&curves)
}

/// Fixed step-1 plans (mask-guided, random, window) against per-step
/// oracles, averaged over blocks. Needs attention on the traces.
pub fn method_recall_curves(traces: &[DenoiseTrace], params: &AnalysisParams) -> Result<Vec<RecallCurve>> {
    let mut by_label: Vec<(String, Vec<RecallCurve>)> = ["mage", "random", "window"]
        .iter()
        .map(|l| (l.to_string(), Vec::new()))
        .collect();
    for trace in traces {
        let att = trace
            .attention
            .first()
            .ok_or_else(|| MageError::Metric("trace carries no attention".into()))?;
        let n = att.context_len();
        let (layers, heads) = (att.num_layers(), att.num_kv_heads());
        let k = params.k.min(n.max(1));
        let plans: [SelectionPlan; 3] = [
            build_plan(att, params.exact_prefix, params.k, params.k_min)?.0,
            random_plan(n, k, layers, heads, params.exact_prefix, params.seed ^ trace.block as u64),
            window_plan(n, 0, k, layers, heads, params.exact_prefix)?,
        ];
        for ((label, curves), plan) in by_label.iter_mut().zip(&plans) {
            curves.push(plan_recall_curve(plan, trace, label)?);
        }
    }
    by_label.into_iter().map(|(_, c)| mean_curve(&c)).collect()
}

/// Heatmap of per-step coverage budgets, averaging blocks step by step.
pub fn skew_from_traces(traces: &[DenoiseTrace]) -> Result<SkewHeatmap> {
    let first = traces
        .first()
        .ok_or_else(|| MageError::Metric("no traces".into()))?;
    let steps = first.steps.len();
    let mut acc: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut blocks = 0usize;
    for t in traces {
        if t.steps.len() != steps {
            // partial block (e.g. a trailing block cut short); skip it
            continue;
        }
        let budgets = t
            .steps
            .iter()
            .map(|s| {
                s.coverage_budgets.clone().ok_or_else(|| {
                    MageError::Metric(format!("step {} has no coverage budgets", s.step))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match &mut acc {
            None => acc = Some(budgets),
            Some(a) => {
                for (sa, sb) in a.iter_mut().zip(&budgets) {
                    for (la, lb) in sa.iter_mut().zip(sb) {
                        for (x, y) in la.iter_mut().zip(lb) {
                            *x += y;
                        }
                    }
                }
            }
        }
        blocks += 1;
    }
    let mut acc = acc.ok_or_else(|| MageError::Metric("no complete blocks".into()))?;
    for x in acc.iter_mut().flatten().flatten() {
        *x /= blocks as f64;
    }
    skew_heatmap_from_budgets(&acc)
}

/// One JSON-lines record per denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub block: usize,
    pub method: String,
    pub k: usize,
    #[serde(flatten)]
    pub record: StepRecord,
}

pub fn write_jsonl<W: Write>(mut out: W, method: &str, traces: &[DenoiseTrace]) -> Result<()> {
    for t in traces {
        for s in &t.steps {
            let rec = TraceRecord {
                block: t.block,
                method: method.to_string(),
                k: t.k,
                record: s.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| MageError::Data(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Reads records and regroups them into per-block traces (without
/// attention). Returns the method name of the first record.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<(String, Vec<DenoiseTrace>)> {
    let mut traces: Vec<DenoiseTrace> = Vec::new();
    let mut method = String::new();
    let mut offset = 0usize;
    for line in input.split(b'\n') {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let rec: TraceRecord = serde_json::from_slice(&line).map_err(|e| {
            MageError::parse(start + e.column().saturating_sub(1), format!("bad trace record: {e}"))
        })?;
        if method.is_empty() {
            method = rec.method.clone();
        }
        match traces.last_mut() {
            Some(t) if t.block == rec.block => t.steps.push(rec.record),
            _ => traces.push(DenoiseTrace {
                block: rec.block,
                k: rec.k,
                steps: vec![rec.record],
                built_plan: None,
                union_stats: None,
                attention: Vec::new(),
            }),
        }
    }
    if traces.is_empty() {
        return Err(MageError::parse(0, "empty trace"));
    }
    Ok((method, traces))
}

/// Recall of each step's own plan against that step's oracle. Steps that
/// ran exact (no plan) are skipped.
pub fn plan_vs_oracle(traces: &[DenoiseTrace], label: &str) -> Result<RecallCurve> {
    let curves = traces
        .iter()
        .map(|t| {
            let points = t
                .steps
                .iter()
                .filter_map(|s| s.plan.as_ref().map(|p| (s, p)))
                .map(|(s, plan)| {
                    let oracle = s
                        .oracle
                        .as_ref()
                        .ok_or_else(|| MageError::Metric(format!("step {} has no oracle sets", s.step)))?;
                    Ok((s.step, crate::metrics::method_recall(plan, oracle)?))
                })
                .collect::<Result<Vec<_>>>()?;
            if points.is_empty() {
                return Err(MageError::Metric(format!(
                    "block {} ran exact at every step; no plan to score",
                    t.block
                )));
            }
            Ok(RecallCurve {
                k: t.k,
                label: label.to_string(),
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_curve(&curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_file(steps: &[usize]) -> TraceFile {
        let (l, hq, hkv, b) = (2, 4, 2, 3);
        TraceFile {
            num_layers: l,
            num_query_heads: hq,
            num_kv_heads: hkv,
            block_size: b,
            steps: steps
                .iter()
                .map(|&n| TraceStep {
                    context_len: n,
                    layers: (0..l)
                        .map(|li| {
                            (0..hq * b)
                                .flat_map(|r| {
                                    // a peaked but valid distribution
                                    let hot = (r + li) % n;
                                    (0..n).map(move |j| {
                                        if j == hot {
                                            0.5 + 0.5 / n as f32
                                        } else {
                                            0.5 / n as f32
                                        }
                                    })
                                })
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn roundtrip() {
        let f = uniform_file(&[5, 5, 8]);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..10], b"MAGETRACE1");
        assert_eq!(bytes.len(), 10 + 5 * 4 + 3 * 4 + 2 * 4 * 3 * (5 + 5 + 8) * 4);
        assert_eq!(TraceFile::from_bytes(&bytes).unwrap(), f);
        assert_eq!(f.block_ranges(), vec![(0, 2), (2, 3)]);
    }

    #[test]
    fn truncation_names_missing_bytes() {
        let bytes = uniform_file(&[5]).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 7];
        match TraceFile::from_bytes(cut) {
            Err(MageError::Parse { offset, message }) => {
                assert_eq!(offset, 10 + 6 * 4);
                assert!(message.contains("7 missing"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        match TraceFile::from_bytes(&bytes[..12]) {
            Err(MageError::Parse { offset, message }) => {
                assert_eq!(offset, 10);
                assert!(message.contains("2 missing"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(TraceFile::from_bytes(b"NOTATRACE!"), Err(MageError::Parse { offset: 0, .. })));
    }

    #[test]
    fn bad_row_sum_reports_offset() {
        let mut bytes = uniform_file(&[4]).to_bytes().unwrap();
        let payload = 10 + 6 * 4;
        bytes[payload + 4 * 4..payload + 5 * 4].copy_from_slice(&3.0f32.to_le_bytes());
        match TraceFile::from_bytes(&bytes) {
            Err(MageError::Parse { offset, .. }) => assert_eq!(offset as usize, payload + 4 * 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn self_recall_starts_at_one() {
        let f = uniform_file(&[6, 6, 6]);
        let traces = f.oracle_traces(2, 1).unwrap();
        let c = self_recall(&traces).unwrap();
        assert_eq!(c.points[0].1, 1.0);
        assert!(c.points.iter().all(|p| p.1 == 1.0));
        let params = AnalysisParams {
            k: 2,
            k_min: 1,
            exact_prefix: 1,
            seed: 0,
        };
        assert_eq!(method_recall_curves(&traces, &params).unwrap().len(), 3);
        assert_eq!(skew_from_traces(&traces).unwrap().num_layers, 2);
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let f = uniform_file(&[6, 6, 9]);
        let traces: Vec<DenoiseTrace> = f
            .oracle_traces(2, 1)
            .unwrap()
            .into_iter()
            .map(|mut t| {
                t.attention.clear();
                t
            })
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, "oracle", &traces).unwrap();
        let (method, back) = read_jsonl(&buf[..]).unwrap();
        assert_eq!(method, "oracle");
        assert_eq!(back, traces);
        let bad = b"{\"block\":0}\n";
        assert!(matches!(read_jsonl(&bad[..]), Err(MageError::Parse { .. })));
    }
}
