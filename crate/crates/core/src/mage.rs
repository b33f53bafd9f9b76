//! Mask-guided index selection.
//!
//! From the exact attention of the All-`[MASK]` block, each KV head collects
//! the union of its queries' top-K cache indices with vote counts, measures
//! how much attention mass that union captures, and turns union size and
//! coverage into a demand score `|U| · (1 − ln p)`. Layers then split a total
//! budget of `K · L_planned` in proportion to their scores (floored at
//! `K_min`), and each head keeps its most-voted union members, padding with
//! the most recent positions when the union is too small.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::plan::{LayerPlan, PlanSource, SelectionPlan};
use crate::tensor::Matrix;
use crate::toymodel::StepAttention;

/// Relative slack applied before flooring a budget share, so that shares
/// which are mathematically integral are not lost to rounding.
const FLOOR_SLACK: f64 = 1e-12;

/// Total order used for ranking: larger score first, then lower index.
#[inline]
fn by_score_desc(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Indices of the `min(k, n)` largest probabilities of `row`, ties going to
/// the lower index. Returned ascending.
pub fn per_query_topk(row: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(MageError::Config("top-K requires K >= 1".into()));
    }
    let n = row.len();
    if k >= n {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |&a: &usize, &b: &usize| by_score_desc((row[a] as f64, a), (row[b] as f64, b));
    idx.select_nth_unstable_by(k - 1, cmp);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Union of per-query top-K sets for one KV head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadUnion {
    /// Members of `U_h`, ascending.
    pub members: Vec<usize>,
    /// Votes of each member, aligned with `members`.
    pub votes: Vec<u32>,
}

impl HeadUnion {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn votes_of(&self, index: usize) -> u32 {
        self.members
            .binary_search(&index)
            .map_or(0, |p| self.votes[p])
    }
}

/// `attn` is `G·B × n`; every row a distribution over the cache.
pub fn form_union(attn: &Matrix, k: usize) -> Result<HeadUnion> {
    if attn.rows() == 0 || attn.cols() == 0 {
        return Err(MageError::Config("union formation needs nonempty attention".into()));
    }
    let mut counts = vec![0u32; attn.cols()];
    for row in attn.iter_rows() {
        for i in per_query_topk(row, k)? {
            counts[i] += 1;
        }
    }
    let (members, votes) = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i, c))
        .unzip();
    Ok(HeadUnion { members, votes })
}

/// Mean over rows of the attention mass on `union`. Clamped to at most 1
/// to absorb rounding.
pub fn coverage(attn: &Matrix, union: &[usize]) -> Result<f64> {
    if union.is_empty() {
        return Err(MageError::Selection("coverage of an empty union".into()));
    }
    if let Some(&bad) = union.iter().find(|&&i| i >= attn.cols()) {
        return Err(MageError::Selection(format!(
            "union member {bad} outside context of length {}",
            attn.cols()
        )));
    }
    if attn.rows() == 0 {
        return Err(MageError::Selection("coverage over zero queries".into()));
    }
    let total: f64 = attn
        .iter_rows()
        .map(|row| union.iter().map(|&i| row[i] as f64).sum::<f64>())
        .sum();
    Ok((total / attn.rows() as f64).min(1.0))
}

/// `union_size · (1 − ln p)`.
pub fn adjusted_score(union_size: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MageError::Domain(format!("coverage {p} outside (0, 1]")));
    }
    Ok(union_size as f64 * (1.0 - p.ln()))
}

/// `K^ℓ = max(K_min, ⌊s_ℓ / Σ s · K · L⌋)` with `L = scores.len()`. No
/// redistribution after the floor is applied.
pub fn allocate_budgets(scores: &[f64], k: usize, k_min: usize) -> Result<Vec<usize>> {
    if k_min == 0 || k < k_min {
        return Err(MageError::Config(format!(
            "need K >= K_min >= 1, got K={k}, K_min={k_min}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(MageError::Allocation("layer scores must be finite and >= 0".into()));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(MageError::Allocation("all layer scores are zero".into()));
    }
    let pool = (k * scores.len()) as f64;
    Ok(scores
        .iter()
        .map(|&s| {
            let share = s / total * pool;
            let floored = (share + share * FLOOR_SLACK).floor() as usize;
            floored.max(k_min)
        })
        .collect())
}

/// Final per-head index list of length `min(budget, n)`, ascending.
///
/// Union members are ranked by votes, then attention mass, then index. When
/// the budget exceeds the union, the most recent non-member positions fill
/// the remainder. `votes` and `mass` are aligned with `union`.
pub fn select_indices(
    union: &[usize],
    votes: &[u32],
    mass: &[f64],
    budget: usize,
    n: usize,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(MageError::Plan("cannot select from an empty context".into()));
    }
    if budget == 0 {
        return Err(MageError::Config("budget must be at least 1".into()));
    }
    if votes.len() != union.len() || mass.len() != union.len() {
        return Err(MageError::Shape("votes/mass not aligned with union".into()));
    }
    let mut out: Vec<usize> = if budget <= union.len() {
        let mut order: Vec<usize> = (0..union.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            votes[b]
                .cmp(&votes[a])
                .then(mass[b].total_cmp(&mass[a]))
                .then(union[a].cmp(&union[b]))
        });
        order[..budget].iter().map(|&p| union[p]).collect()
    } else {
        let target = budget.min(n);
        let mut sel = union.to_vec();
        let mut member = vec![false; n];
        for &u in union {
            member[u] = true;
        }
        for i in (0..n).rev() {
            if sel.len() >= target {
                break;
            }
            if !member[i] {
                sel.push(i);
            }
        }
        sel
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub union: HeadUnion,
    pub coverage: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub heads: Vec<HeadStats>,
    /// `max_h` of the head scores.
    pub score: f64,
}

/// Phase-1 statistics for every planned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionStats {
    pub layers: Vec<LayerStats>,
}

fn layer_stats(layer: usize, heads: &[Matrix], k: usize) -> Result<(LayerStats, Vec<Vec<f64>>)> {
    let mut stats = Vec::with_capacity(heads.len());
    let mut masses = Vec::with_capacity(heads.len());
    for attn in heads {
        let union = form_union(attn, k)?;
        let p = coverage(attn, &union.members)?;
        let score = adjusted_score(union.len(), p)?;
        let col = attn.column_sums();
        masses.push(union.members.iter().map(|&i| col[i]).collect());
        stats.push(HeadStats {
            union,
            coverage: p,
            score,
        });
    }
    let score = stats.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        LayerStats {
            layer,
            heads: stats,
            score,
        },
        masses,
    ))
}

/// Builds the reusable selection plan from the exact attention of the
/// first denoising step.
///
/// Layers below `exact_prefix` get the full index range; each planned layer
/// is processed independently, then budgets are allocated jointly.
pub fn build_plan(
    attn: &StepAttention,
    exact_prefix: usize,
    k: usize,
    k_min: usize,
) -> Result<(SelectionPlan, UnionStats)> {
    if k == 0 || k_min == 0 || k < k_min {
        return Err(MageError::Config(format!(
            "need K >= K_min >= 1, got K={k}, K_min={k_min}"
        )));
    }
    let num_layers = attn.num_layers();
    let heads = attn.num_kv_heads();
    let n = attn.context_len();
    if exact_prefix > num_layers {
        return Err(MageError::Config("exact prefix exceeds layer count".into()));
    }
    let mut plan = SelectionPlan::full(PlanSource::Mage, num_layers, heads, n, exact_prefix);
    plan.source = PlanSource::Mage;
    if n == 0 {
        for l in exact_prefix..num_layers {
            plan.layers[l].budget = k;
        }
        return Ok((plan, UnionStats { layers: Vec::new() }));
    }

    let per_layer: Vec<(LayerStats, Vec<Vec<f64>>)> = (exact_prefix..num_layers)
        .into_par_iter()
        .map(|l| layer_stats(l, &attn.layers[l], k))
        .collect::<Result<_>>()?;
    if per_layer.is_empty() {
        return Ok((plan, UnionStats { layers: Vec::new() }));
    }
    let scores: Vec<f64> = per_layer.iter().map(|(s, _)| s.score).collect();
    let budgets = allocate_budgets(&scores, k, k_min)?;

    for ((stats, masses), budget) in per_layer.iter().zip(&budgets) {
        let heads = stats
            .heads
            .iter()
            .zip(masses)
            .map(|(h, mass)| select_indices(&h.union.members, &h.union.votes, mass, *budget, n))
            .collect::<Result<Vec<_>>>()?;
        plan.layers[stats.layer] = LayerPlan {
            budget: *budget,
            heads,
        };
    }
    Ok((
        plan,
        UnionStats {
            layers: per_layer.into_iter().map(|(s, _)| s).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn topk_tie_break() {
        assert_eq!(per_query_topk(&[0.1, 0.5, 0.2, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(per_query_topk(&[0.3, 0.7], 5).unwrap(), vec![0, 1]);
        assert_eq!(per_query_topk(&[0.2; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(per_query_topk(&[1.0], 0), Err(MageError::Config(_))));
    }

    #[test]
    fn union_votes() {
        let a = m(&[&[0.4, 0.0, 0.1, 0.4, 0.0, 0.1], &[0.0, 0.1, 0.0, 0.5, 0.0, 0.4]]);
        let u = form_union(&a, 2).unwrap();
        assert_eq!(u.members, vec![0, 3, 5]);
        assert_eq!(u.votes, vec![1, 2, 1]);
        assert_eq!(u.votes_of(3), 2);
        assert_eq!(u.votes_of(1), 0);
    }

    #[test]
    fn union_identical_rows() {
        let row: &[f32] = &[0.1, 0.3, 0.05, 0.25, 0.3];
        let a = m(&[row, row, row, row]);
        let u = form_union(&a, 2).unwrap();
        assert_eq!(u.members, vec![1, 4]);
        assert!(u.votes.iter().all(|&v| v == 4));
        assert!(form_union(&Matrix::zeros(0, 3), 2).is_err());
    }

    #[test]
    fn coverage_examples() {
        let uni = m(&[&[0.1; 10], &[0.1; 10]]);
        assert!((coverage(&uni, &[0, 2, 4, 6, 8]).unwrap() - 0.5).abs() < 1e-6);
        let all: Vec<usize> = (0..10).collect();
        assert!((coverage(&uni, &all).unwrap() - 1.0).abs() < 1e-6);
        let one = m(&[&[0.7, 0.2, 0.1]]);
        assert!((coverage(&one, &[0]).unwrap() - 0.7).abs() < 1e-6);
        assert!(matches!(coverage(&one, &[]), Err(MageError::Selection(_))));
    }

    #[test]
    fn adjusted_score_examples() {
        assert!((adjusted_score(100, 1.0).unwrap() - 100.0).abs() < 1e-12);
        assert!((adjusted_score(50, (-1.0f64).exp()).unwrap() - 100.0).abs() < 1e-9);
        // 10 * (1 + ln 2), evaluated by hand
        assert!((adjusted_score(10, 0.5).unwrap() - 16.9315).abs() < 1e-3);
        assert!(matches!(adjusted_score(3, 0.0), Err(MageError::Domain(_))));
        assert!(matches!(adjusted_score(3, 1.5), Err(MageError::Domain(_))));
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_budgets(&[1.0; 4], 512, 64).unwrap(), vec![512; 4]);
        assert_eq!(allocate_budgets(&[300.0, 100.0], 512, 64).unwrap(), vec![768, 256]);
        assert_eq!(allocate_budgets(&[999.0, 1.0], 128, 64).unwrap(), vec![255, 64]);
        assert!(matches!(
            allocate_budgets(&[0.0, 0.0], 128, 64),
            Err(MageError::Allocation(_))
        ));
        assert!(matches!(allocate_budgets(&[1.0], 8, 16), Err(MageError::Config(_))));
    }

    #[test]
    fn allocation_equal_thirds_is_exact() {
        let s = 1.0 / 3.0;
        assert_eq!(allocate_budgets(&[s, s, s], 512, 1).unwrap(), vec![512; 3]);
    }

    #[test]
    fn select_examples() {
        let mass_of = |i: usize| [0.9, 0.0, 0.0, 1.5, 0.0, 0.2][i];
        let u = [0, 3, 5];
        let mass: Vec<f64> = u.iter().map(|&i| mass_of(i)).collect();
        assert_eq!(select_indices(&u, &[1, 2, 1], &mass, 2, 6).unwrap(), vec![0, 3]);
        assert_eq!(select_indices(&u, &[1, 2, 1], &mass, 3, 6).unwrap(), vec![0, 3, 5]);
        assert_eq!(
            select_indices(&[2, 4], &[1, 1], &[0.1, 0.1], 4, 10).unwrap(),
            vec![2, 4, 8, 9]
        );
        // recency fill skips members and stops at n
        assert_eq!(
            select_indices(&[2, 9], &[1, 1], &[0.1, 0.1], 20, 10).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        assert!(matches!(select_indices(&[], &[], &[], 2, 0), Err(MageError::Plan(_))));
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let r: Vec<f32> = (0..cols).map(|_| rng.random::<f32>().powi(4)).collect();
            let s: f32 = r.iter().sum();
            data.extend(r.into_iter().map(|x| x / s));
        }
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn union_matches_brute_force() {
        let a = random_matrix(8, 64, 3);
        let u = form_union(&a, 4).unwrap();
        let mut expect = std::collections::BTreeMap::new();
        for r in a.iter_rows() {
            let mut order: Vec<usize> = (0..r.len()).collect();
            order.sort_by(|&x, &y| r[y].partial_cmp(&r[x]).unwrap().then(x.cmp(&y)));
            for &i in &order[..4] {
                *expect.entry(i).or_insert(0u32) += 1;
            }
        }
        assert_eq!(u.members, expect.keys().copied().collect::<Vec<_>>());
        assert_eq!(u.votes, expect.values().copied().collect::<Vec<_>>());
    }

    #[test]
    fn plan_full_range_when_context_small() {
        let heads = vec![random_matrix(6, 10, 1), random_matrix(6, 10, 2)];
        let attn = StepAttention {
            layers: vec![heads.clone(), heads.clone(), heads],
        };
        let (plan, stats) = build_plan(&attn, 1, 16, 4).unwrap();
        assert_eq!(stats.layers.len(), 2);
        for l in 0..3 {
            for h in 0..2 {
                assert_eq!(plan.indices(l, h), (0..10).collect::<Vec<_>>().as_slice());
            }
        }
        plan.validate(Some(4)).unwrap();
    }

    proptest! {
        #[test]
        fn union_contains_each_topk(seed in 0u64..500, k in 1usize..8) {
            let a = random_matrix(6, 20, seed);
            let u = form_union(&a, k).unwrap();
            for r in a.iter_rows() {
                for i in per_query_topk(r, k).unwrap() {
                    prop_assert!(u.members.binary_search(&i).is_ok());
                }
            }
            prop_assert!(u.len() >= k.min(20) && u.len() <= 6 * k);
        }

        #[test]
        fn coverage_monotone(seed in 0u64..500, mask in proptest::collection::vec(any::<bool>(), 20)) {
            let a = random_matrix(5, 20, seed);
            let small: Vec<usize> = (0..20).filter(|&i| mask[i] && i % 2 == 0).collect();
            let big: Vec<usize> = (0..20).filter(|&i| mask[i]).collect();
            prop_assume!(!small.is_empty());
            prop_assert!(coverage(&a, &small).unwrap() <= coverage(&a, &big).unwrap());
        }

        #[test]
        fn topk_shift_invariant(raw in proptest::collection::vec(-20i32..20, 2..30), shift in -12i32..12, k in 1usize..6) {
            // quarter-integer grid keeps the shift exact in f32
            let logits: Vec<f32> = raw.iter().map(|&x| x as f32 / 4.0).collect();
            let shift = shift as f32 / 4.0;
            let soft = |xs: &[f32]| {
                let mut v = xs.to_vec();
                crate::tensor::softmax_in_place(&mut v);
                v
            };
            let shifted: Vec<f32> = logits.iter().map(|x| x + shift).collect();
            // equal logits stay equal after the shift, so ties resolve the same
            prop_assert_eq!(
                per_query_topk(&soft(&logits), k).unwrap(),
                per_query_topk(&soft(&shifted), k).unwrap()
            );
        }

        #[test]
        fn allocation_conservation(scores in proptest::collection::vec(1.0f64..100.0, 1..8), k in 16usize..256) {
            let b = allocate_budgets(&scores, k, 1).unwrap();
            let l = scores.len();
            let sum: usize = b.iter().sum();
            if b.iter().all(|&x| x > 1) {
                prop_assert!(sum <= k * l);
                prop_assert!(sum + l >= k * l);
            }
        }

        #[test]
        fn plan_deterministic(seed in 0u64..100) {
            let heads = vec![random_matrix(4, 30, seed), random_matrix(4, 30, seed + 1)];
            let attn = StepAttention { layers: vec![heads.clone(), heads.clone(), heads] };
            let a = build_plan(&attn, 1, 4, 2).unwrap();
            let b = build_plan(&attn, 1, 4, 2).unwrap();
            prop_assert_eq!(&a.0, &b.0);
            a.0.validate(Some(2)).unwrap();
        }
    }
}
