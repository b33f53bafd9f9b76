//! Top-K recall and attention-skewness analyses.
//!
//! Recall compares a reference selection with another set: `|ref ∩ other| /
//! |ref|`. Skewness is proxied by the number of KV entries needed to reach a
//! coverage threshold (90% by default) of a query's attention.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::DenoiseTrace;
use crate::error::{MageError, Result};
use crate::plan::SelectionPlan;
use crate::tensor::Matrix;
use crate::toymodel::StepAttention;

pub const DEFAULT_COVERAGE: f64 = 0.9;
pub const PROGRESS_BUCKETS: usize = 10;

pub fn topk_recall(reference: &[usize], other: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MageError::Metric("recall against an empty reference set".into()));
    }
    let other: BTreeSet<usize> = other.iter().copied().collect();
    let reference: BTreeSet<usize> = reference.iter().copied().collect();
    let hit = reference.iter().filter(|i| other.contains(i)).count();
    Ok(hit as f64 / reference.len() as f64)
}

/// Smallest `m` such that the `m` largest probabilities sum to at least
/// `threshold`. Capped at the row length.
pub fn coverage_budget(row: &[f32], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MageError::Config(format!(
            "coverage threshold {threshold} outside (0, 1]"
        )));
    }
    if row.is_empty() {
        return Err(MageError::Metric("coverage budget of an empty row".into()));
    }
    if threshold >= 1.0 {
        return Ok(row.iter().filter(|&&p| p > 0.0).count().max(1));
    }
    let mut sorted: Vec<f64> = row.iter().map(|&p| p as f64).collect();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    // Measured against the row's own total so f32 rounding of the
    // probabilities cannot push the target out of reach.
    let target = threshold * sorted.iter().sum::<f64>() - 1e-9;
    let mut acc = 0.0;
    for (m, p) in sorted.iter().enumerate() {
        acc += p;
        if acc >= target {
            return Ok(m + 1);
        }
    }
    Ok(sorted.len())
}

/// Mean coverage budget over the rows of one head's `G·B × n` attention.
pub fn mean_coverage_budget(attn: &Matrix, threshold: f64) -> Result<f64> {
    if attn.rows() == 0 {
        return Err(MageError::Metric("no query rows".into()));
    }
    let mut sum = 0usize;
    for row in attn.iter_rows() {
        sum += coverage_budget(row, threshold)?;
    }
    Ok(sum as f64 / attn.rows() as f64)
}

/// Per-layer, per-head mean coverage budgets of one step.
pub fn step_budgets(step: &StepAttention, threshold: f64) -> Result<Vec<Vec<f64>>> {
    step.layers
        .iter()
        .map(|l| l.iter().map(|m| mean_coverage_budget(m, threshold)).collect())
        .collect()
}

/// Mean over planned layers and heads of `topk_recall(oracle, method)`.
pub fn method_recall(method: &SelectionPlan, oracle: &SelectionPlan) -> Result<f64> {
    if method.num_layers() != oracle.num_layers() || method.num_kv_heads() != oracle.num_kv_heads()
    {
        return Err(MageError::Metric(format!(
            "plan shapes differ: {}x{} vs {}x{}",
            method.num_layers(),
            method.num_kv_heads(),
            oracle.num_layers(),
            oracle.num_kv_heads()
        )));
    }
    let layers = oracle.planned_layers();
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in layers {
        for h in 0..oracle.num_kv_heads() {
            sum += topk_recall(oracle.indices(l, h), method.indices(l, h))?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MageError::Metric("no planned layers to compare".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub k: usize,
    pub label: String,
    /// `(step, recall)`, steps 1-based.
    pub points: Vec<(usize, f64)>,
}

/// Recall of the step-1 oracle selection against each step's oracle,
/// averaged over planned layers and heads.
pub fn recall_curve(trace: &DenoiseTrace, label: &str) -> Result<RecallCurve> {
    let oracles = trace_oracles(trace)?;
    let reference = oracles[0];
    let points = oracles
        .iter()
        .enumerate()
        .map(|(i, o)| Ok((i + 1, method_recall(o, reference)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallCurve {
        k: trace.k,
        label: label.to_string(),
        points,
    })
}

/// Recall of a fixed plan (e.g. the step-1 mask-guided plan) against each
/// step's oracle.
pub fn plan_recall_curve(plan: &SelectionPlan, trace: &DenoiseTrace, label: &str) -> Result<RecallCurve> {
    let points = trace_oracles(trace)?
        .iter()
        .enumerate()
        .map(|(i, o)| Ok((i + 1, method_recall(plan, o)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallCurve {
        k: trace.k,
        label: label.to_string(),
        points,
    })
}

fn trace_oracles(trace: &DenoiseTrace) -> Result<Vec<&SelectionPlan>> {
    if trace.steps.is_empty() {
        return Err(MageError::Metric("trace has no steps".into()));
    }
    trace
        .steps
        .iter()
        .map(|s| {
            s.oracle.as_ref().ok_or_else(|| {
                MageError::Metric(format!("step {} has no oracle sets; enable tracing", s.step))
            })
        })
        .collect()
}

/// Averages several curves with the same steps (e.g. one per block).
pub fn mean_curve(curves: &[RecallCurve]) -> Result<RecallCurve> {
    let first = curves
        .first()
        .ok_or_else(|| MageError::Metric("no curves to average".into()))?;
    let mut points = first.points.clone();
    for c in &curves[1..] {
        if c.points.len() != points.len() {
            return Err(MageError::Metric("curves have different step counts".into()));
        }
        for (p, q) in points.iter_mut().zip(&c.points) {
            p.1 += q.1;
        }
    }
    for p in &mut points {
        p.1 /= curves.len() as f64;
    }
    Ok(RecallCurve {
        k: first.k,
        label: first.label.clone(),
        points,
    })
}

/// Progress bucket of step `t` out of `total`: `⌈10·t/T⌉ − 1`.
pub fn progress_bucket(step: usize, total: usize) -> usize {
    ((PROGRESS_BUCKETS * step).div_ceil(total)).clamp(1, PROGRESS_BUCKETS) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewHeatmap {
    pub num_layers: usize,
    /// Occupied progress buckets, ascending.
    pub buckets: Vec<usize>,
    /// `raw[layer][bucket position]`: coverage budget averaged over KV heads
    /// (and over steps sharing a bucket).
    pub raw: Vec<Vec<f64>>,
    /// `raw` divided by its global maximum.
    pub normalized: Vec<Vec<f64>>,
    pub normalization: String,
}

/// Heatmap from per-step budgets `budgets[step][layer][head]`.
pub fn skew_heatmap_from_budgets(budgets: &[Vec<Vec<f64>>]) -> Result<SkewHeatmap> {
    let total = budgets.len();
    if total == 0 {
        return Err(MageError::Metric("no steps traced".into()));
    }
    let num_layers = budgets[0].len();
    let mut buckets: Vec<usize> = (1..=total).map(|t| progress_bucket(t, total)).collect();
    buckets.dedup();
    let mut sums = vec![vec![0.0; buckets.len()]; num_layers];
    let mut counts = vec![0usize; buckets.len()];
    for (i, step) in budgets.iter().enumerate() {
        if step.len() != num_layers {
            return Err(MageError::Metric(format!("step {} has a different layer count", i + 1)));
        }
        let b = progress_bucket(i + 1, total);
        let col = buckets.binary_search(&b).expect("bucket listed");
        counts[col] += 1;
        for (l, heads) in step.iter().enumerate() {
            if heads.is_empty() {
                return Err(MageError::Metric("layer without heads".into()));
            }
            sums[l][col] += heads.iter().sum::<f64>() / heads.len() as f64;
        }
    }
    let raw: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|row| row.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
        .collect();
    let max = raw.iter().flatten().copied().fold(0.0, f64::max);
    let normalized = raw
        .iter()
        .map(|row| row.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect())
        .collect();
    Ok(SkewHeatmap {
        num_layers,
        buckets,
        raw,
        normalized,
        normalization: "global_max".into(),
    })
}

pub fn skew_heatmap(steps: &[StepAttention], threshold: f64) -> Result<SkewHeatmap> {
    let budgets = steps
        .iter()
        .map(|s| step_budgets(s, threshold))
        .collect::<Result<Vec<_>>>()?;
    skew_heatmap_from_budgets(&budgets)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks). `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        None
    } else {
        Some(num / (da * db).sqrt())
    }
}

/// Rank correlation of the per-layer budget profile at each bucket against
/// the first bucket.
pub fn rank_stability(map: &SkewHeatmap) -> Vec<Option<f64>> {
    let column = |c: usize| map.raw.iter().map(|row| row[c]).collect::<Vec<_>>();
    let first = column(0);
    (0..map.buckets.len())
        .map(|c| spearman(&first, &column(c)))
        .collect()
}

pub fn write_recall_csv<W: Write>(out: W, curves: &[RecallCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "K", "recall", "label"])
        .map_err(csv_err)?;
    for c in curves {
        for (step, r) in &c.points {
            w.write_record([step.to_string(), c.k.to_string(), format!("{r:.6}"), c.label.clone()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_heatmap_csv<W: Write>(out: W, map: &SkewHeatmap) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "step_bucket", "value"])
        .map_err(csv_err)?;
    for (l, row) in map.normalized.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            w.write_record([l.to_string(), map.buckets[c].to_string(), format!("{v:.6}")])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> MageError {
    MageError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::StepRecord;
    use crate::plan::{PlanSource, SelectionPlan};

    #[test]
    fn recall_examples() {
        assert_eq!(topk_recall(&[1, 2, 3], &[3, 2, 1]).unwrap(), 1.0);
        assert_eq!(topk_recall(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(topk_recall(&[1, 2, 3, 4], &[2, 3, 4, 9]).unwrap(), 0.75);
        assert!(matches!(topk_recall(&[], &[1]), Err(MageError::Metric(_))));
    }

    #[test]
    fn coverage_budget_examples() {
        assert_eq!(coverage_budget(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap(), 3);
        assert_eq!(coverage_budget(&[0.1; 10], 0.9).unwrap(), 9);
        assert_eq!(coverage_budget(&[1.0, 0.0, 0.0], 1.0).unwrap(), 1);
        assert_eq!(coverage_budget(&[1.0, 0.0, 0.0], 0.3).unwrap(), 1);
        assert!(matches!(coverage_budget(&[1.0], 0.0), Err(MageError::Config(_))));
        assert!(matches!(coverage_budget(&[1.0], 1.1), Err(MageError::Config(_))));
    }

    #[test]
    fn coverage_budget_full_threshold_positive_row() {
        let row = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(coverage_budget(&row, 1.0).unwrap(), 4);
    }

    fn trace_with(oracles: Vec<Vec<usize>>) -> DenoiseTrace {
        let steps = oracles
            .into_iter()
            .enumerate()
            .map(|(i, idx)| {
                let mut o = SelectionPlan::full(PlanSource::Oracle, 2, 1, 10, 1);
                o.layers[1].budget = idx.len();
                o.layers[1].heads[0] = idx;
                StepRecord::synthetic(i + 1, 10, Some(o))
            })
            .collect();
        DenoiseTrace {
            block: 0,
            k: 4,
            steps,
            built_plan: None,
            union_stats: None,
            attention: Vec::new(),
        }
    }

    #[test]
    fn recall_curve_examples() {
        let t = trace_with(vec![vec![0, 1, 2, 3]; 3]);
        let c = recall_curve(&t, "x").unwrap();
        assert!(c.points.iter().all(|&(_, r)| r == 1.0));
        let t = trace_with(vec![vec![0, 1, 2, 3], vec![0, 1, 7, 8]]);
        let c = recall_curve(&t, "x").unwrap();
        assert_eq!(c.points, vec![(1, 1.0), (2, 0.5)]);
        let mut t = trace_with(vec![vec![0, 1, 2, 3]]);
        t.steps[0].oracle = None;
        assert!(matches!(recall_curve(&t, "x"), Err(MageError::Metric(_))));
    }

    #[test]
    fn method_recall_shape_mismatch() {
        let a = SelectionPlan::full(PlanSource::Mage, 2, 1, 5, 1);
        let b = SelectionPlan::full(PlanSource::Oracle, 3, 1, 5, 1);
        assert!(matches!(method_recall(&a, &b), Err(MageError::Metric(_))));
        assert_eq!(method_recall(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn heatmap_constant_and_delta() {
        let delta = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let step = StepAttention {
            layers: vec![vec![delta.clone()], vec![delta]],
        };
        let map = skew_heatmap(&[step.clone(), step.clone(), step], 0.9).unwrap();
        assert!(map.raw.iter().flatten().all(|&v| v == 1.0));
        assert!(map.normalized.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(map.buckets, vec![3, 6, 9]);
        assert!(matches!(skew_heatmap(&[], 0.9), Err(MageError::Metric(_))));
    }

    #[test]
    fn buckets() {
        assert_eq!(progress_bucket(1, 1), 9);
        assert_eq!(progress_bucket(1, 8), 1);
        assert_eq!(progress_bucket(8, 8), 9);
        assert_eq!(progress_bucket(1, 20), 0);
    }

    #[test]
    fn spearman_basic() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn recall_csv_header() {
        let mut buf = Vec::new();
        let c = RecallCurve {
            k: 4,
            label: "t".into(),
            points: vec![(1, 1.0)],
        };
        write_recall_csv(&mut buf, &[c]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,K,recall,label\n1,4,1.000000,t\n");
    }

    proptest::proptest! {
        #[test]
        fn recall_symmetric_equal_sizes(a in proptest::collection::btree_set(0usize..40, 5), b in proptest::collection::btree_set(0usize..40, 5)) {
            let a: Vec<usize> = a.into_iter().collect();
            let b: Vec<usize> = b.into_iter().collect();
            proptest::prop_assert_eq!(topk_recall(&a, &b).unwrap(), topk_recall(&b, &a).unwrap());
        }

        #[test]
        fn coverage_budget_monotone(raw in proptest::collection::vec(0.01f32..1.0, 1..30), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
            let s: f32 = raw.iter().sum();
            let row: Vec<f32> = raw.iter().map(|x| x / s).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            proptest::prop_assert!(coverage_budget(&row, lo).unwrap() <= coverage_budget(&row, hi).unwrap());
            proptest::prop_assert_eq!(coverage_budget(&row, 1.0).unwrap(), row.len());
        }
    }
}
