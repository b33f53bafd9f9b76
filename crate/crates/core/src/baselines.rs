//! AR-style sparse attention baselines adapted to block decoding.
//!
//! Block adaptation sums per-query scores over all queries of the block
//! that share a KV head. Quest and Tidal need per-layer inputs produced
//! inside the forward pass, so they are also available as
//! [`LayerSelector`]s that record the selections they made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::kvcache::PageMeta;
use crate::plan::{LayerPlan, PlanSource, SelectionPlan};
use crate::tensor::Matrix;
use crate::toymodel::{AttnTensor, LayerSelector, LayerView, ModelConfig, StepAttention};

pub const DEFAULT_PAGE_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum BaselineConfig {
    Quest { page_size: usize },
    Tidal { anchor_layer: usize },
    Window { num_sinks: usize, window_size: usize },
    Random { seed: u64 },
    Oracle,
}

impl BaselineConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        match *self {
            BaselineConfig::Quest { page_size } if page_size == 0 => {
                Err(MageError::Config("quest page_size must be positive".into()))
            }
            BaselineConfig::Tidal { anchor_layer }
                if anchor_layer < model.exact_layer_prefix || anchor_layer >= model.num_layers =>
            {
                Err(MageError::Config(format!(
                    "tidal anchor_layer {anchor_layer} must lie in {}..{}",
                    model.exact_layer_prefix, model.num_layers
                )))
            }
            BaselineConfig::Window {
                num_sinks,
                window_size,
            } if num_sinks + window_size == 0 => Err(MageError::Config(
                "window needs num_sinks + window_size >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn source(&self) -> PlanSource {
        match self {
            BaselineConfig::Quest { .. } => PlanSource::Quest,
            BaselineConfig::Tidal { .. } => PlanSource::Tidal,
            BaselineConfig::Window { .. } => PlanSource::Window,
            BaselineConfig::Random { .. } => PlanSource::Random,
            BaselineConfig::Oracle => PlanSource::Oracle,
        }
    }
}

/// Top-`k` indices by score (ties → lower index), ascending.
pub fn topk_by_mass(mass: &[f64], k: usize) -> Vec<usize> {
    let n = mass.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_unstable_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn plan_with(
    source: PlanSource,
    num_layers: usize,
    num_kv_heads: usize,
    n: usize,
    exact_prefix: usize,
    budget: usize,
    mut head: impl FnMut(usize, usize) -> Vec<usize>,
) -> SelectionPlan {
    let mut plan = SelectionPlan::full(source, num_layers, num_kv_heads, n, exact_prefix);
    for l in exact_prefix..num_layers {
        plan.layers[l] = LayerPlan {
            budget,
            heads: (0..num_kv_heads).map(|h| head(l, h)).collect(),
        };
    }
    plan
}

/// Upper bound on `q·k` for any key inside the page box:
/// `Σ_j max(q_j·min_j, q_j·max_j)`.
pub fn page_bound(q: &[f32], min: &[f32], max: &[f32]) -> f64 {
    q.iter()
        .zip(min.iter().zip(max))
        .map(|(&qj, (&lo, &hi))| ((qj * lo) as f64).max((qj * hi) as f64))
        .sum()
}

/// Quest selection for one KV head: pages ranked by summed bound over the
/// head's queries, taken until at least `k` tokens are covered, then the
/// lowest-ranked selected page is trimmed from its end to land on exactly
/// `k` tokens.
pub fn quest_head(
    queries: &[&[f32]],
    meta: &PageMeta,
    layer: usize,
    kv_head: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let n = meta.cache_len();
    if n == 0 {
        return Err(MageError::Plan("quest over an empty cache".into()));
    }
    if k >= n {
        return Ok((0..n).collect());
    }
    let importance: Vec<f64> = (0..meta.num_pages())
        .map(|p| {
            let (lo, hi) = (meta.min(layer, kv_head, p), meta.max(layer, kv_head, p));
            queries.iter().map(|q| page_bound(q, lo, hi)).sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_unstable_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut picked = Vec::new();
    let mut covered = 0;
    for p in order {
        if covered >= k {
            break;
        }
        covered += meta.page_range(p).len();
        picked.push(p);
    }
    let mut out = Vec::with_capacity(covered);
    let last = picked.len() - 1;
    for (i, &p) in picked.iter().enumerate() {
        let range = meta.page_range(p);
        if i == last {
            let keep = range.len() - (covered - k);
            out.extend(range.take(keep));
        } else {
            out.extend(range);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn group_queries<'a>(view: &'a LayerView<'_>, kv_head: usize) -> Vec<&'a [f32]> {
    let g = view.config.group_size();
    (0..g)
        .flat_map(|gi| (0..view.num_queries).map(move |q| (gi, q)))
        .map(|(gi, q)| view.query(q, kv_head * g + gi))
        .collect()
}

/// Quest plan from per-layer block queries. `queries[ℓ]` is laid out
/// `[query][q_head][dim]` as produced by the forward pass.
pub fn quest_plan(
    queries: &[Vec<f32>],
    config: &ModelConfig,
    meta: &PageMeta,
    k: usize,
) -> Result<SelectionPlan> {
    let n = meta.cache_len();
    if n == 0 {
        return Err(MageError::Plan("quest over an empty cache".into()));
    }
    if queries.len() != config.num_layers {
        return Err(MageError::Shape("need block queries for every layer".into()));
    }
    let d = config.head_dim;
    let g = config.group_size();
    let mut plan = SelectionPlan::full(
        PlanSource::Quest,
        config.num_layers,
        config.num_kv_heads,
        n,
        config.exact_layer_prefix,
    );
    for l in config.exact_layer_prefix..config.num_layers {
        let per_q = config.num_query_heads * d;
        if queries[l].is_empty() || queries[l].len() % per_q != 0 {
            return Err(MageError::Shape(format!("layer {l} queries have a ragged shape")));
        }
        let m = queries[l].len() / per_q;
        let heads = (0..config.num_kv_heads)
            .map(|h| {
                let qs: Vec<&[f32]> = (0..g)
                    .flat_map(|gi| (0..m).map(move |q| (gi, q)))
                    .map(|(gi, q)| &queries[l][(q * config.num_query_heads + h * g + gi) * d..][..d])
                    .collect();
                quest_head(&qs, meta, l, h, k)
            })
            .collect::<Result<Vec<_>>>()?;
        plan.layers[l] = LayerPlan { budget: k, heads };
    }
    Ok(plan)
}

/// Per KV head, the top-`k` cache indices by attention mass summed over the
/// head's queries.
fn head_topk(heads: &[Matrix], k: usize) -> Vec<Vec<usize>> {
    heads
        .iter()
        .map(|m| topk_by_mass(&m.column_sums(), k))
        .collect()
}

/// Reuses the anchor layer's selection on every planned layer.
/// `anchor[h]` is the anchor layer's `G·B × n` cache attention for head `h`.
pub fn tidal_plan(
    anchor: &[Matrix],
    k: usize,
    num_layers: usize,
    exact_prefix: usize,
) -> Result<SelectionPlan> {
    let n = anchor.first().map_or(0, Matrix::cols);
    if n == 0 {
        return Err(MageError::Plan("tidal over an empty cache".into()));
    }
    let sel = head_topk(anchor, k);
    Ok(plan_with(
        PlanSource::Tidal,
        num_layers,
        anchor.len(),
        n,
        exact_prefix,
        k,
        |_, h| sel[h].clone(),
    ))
}

/// Attention sinks plus the trailing window, identical on every layer/head.
pub fn window_plan(
    n: usize,
    num_sinks: usize,
    window_size: usize,
    num_layers: usize,
    num_kv_heads: usize,
    exact_prefix: usize,
) -> Result<SelectionPlan> {
    if n == 0 {
        return Err(MageError::Plan("window over an empty cache".into()));
    }
    if num_sinks + window_size == 0 {
        return Err(MageError::Config("window needs num_sinks + window_size >= 1".into()));
    }
    let sinks = num_sinks.min(n);
    let idx: Vec<usize> = (0..sinks)
        .chain(n.saturating_sub(window_size).max(sinks)..n)
        .collect();
    let budget = num_sinks + window_size;
    Ok(plan_with(
        PlanSource::Window,
        num_layers,
        num_kv_heads,
        n,
        exact_prefix,
        budget,
        |_, _| idx.clone(),
    ))
}

/// Ground-truth plan: per layer and KV head, top-`k` by summed exact
/// attention at the current step.
pub fn oracle_plan(step: &StepAttention, k: usize, exact_prefix: usize) -> Result<SelectionPlan> {
    if k == 0 {
        return Err(MageError::Config("oracle budget must be positive".into()));
    }
    let n = step.context_len();
    let per_layer: Vec<Vec<Vec<usize>>> = step.layers.iter().map(|l| head_topk(l, k)).collect();
    Ok(plan_with(
        PlanSource::Oracle,
        step.num_layers(),
        step.num_kv_heads(),
        n,
        exact_prefix,
        k,
        |l, h| per_layer[l][h].clone(),
    ))
}

/// Uniformly random `min(k, n)` indices per layer and head.
pub fn random_plan(
    n: usize,
    k: usize,
    num_layers: usize,
    num_kv_heads: usize,
    exact_prefix: usize,
    seed: u64,
) -> SelectionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan_with(
        PlanSource::Random,
        num_layers,
        num_kv_heads,
        n,
        exact_prefix,
        k,
        |_, _| {
            let mut v = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
            v.sort_unstable();
            v
        },
    )
}

/// Records what a selector chose per layer so the plan in force can be
/// traced after the forward pass.
#[derive(Debug, Clone, Default)]
pub struct Recorded {
    pub layers: Vec<Option<Vec<Vec<usize>>>>,
}

impl Recorded {
    fn put(&mut self, layer: usize, sel: &Option<Vec<Vec<usize>>>) {
        if self.layers.len() <= layer {
            self.layers.resize(layer + 1, None);
        }
        self.layers[layer] = sel.clone();
    }

    /// Plan in force: recorded layers as selected, everything else full.
    pub fn to_plan(
        &self,
        source: PlanSource,
        config: &ModelConfig,
        n: usize,
        budget: usize,
    ) -> SelectionPlan {
        let mut plan = SelectionPlan::full(
            source,
            config.num_layers,
            config.num_kv_heads,
            n,
            config.exact_layer_prefix,
        );
        for (l, sel) in self.layers.iter().enumerate() {
            if let Some(heads) = sel {
                plan.layers[l] = LayerPlan {
                    budget,
                    heads: heads.clone(),
                };
            }
        }
        plan
    }
}

/// Quest applied inside the forward pass, using each layer's live queries.
pub struct QuestSelector<'m> {
    pub meta: &'m PageMeta,
    pub k: usize,
    pub recorded: Recorded,
}

impl LayerSelector for QuestSelector<'_> {
    fn select(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<Vec<usize>>>> {
        if view.cache.is_empty() {
            return Ok(None);
        }
        let sel = (0..view.config.num_kv_heads)
            .map(|h| quest_head(&group_queries(view, h), self.meta, view.layer, h, self.k))
            .collect::<Result<Vec<_>>>()?;
        let sel = Some(sel);
        self.recorded.put(view.layer, &sel);
        Ok(sel)
    }
}

/// Tidal: the anchor layer runs exact, its top-K is reused by later layers.
/// Layers between the exact prefix and the anchor also run exact.
pub struct TidalSelector {
    pub anchor_layer: usize,
    pub k: usize,
    pub group: usize,
    pub num_kv_heads: usize,
    selection: Option<Vec<Vec<usize>>>,
    pub recorded: Recorded,
}

impl TidalSelector {
    pub fn new(anchor_layer: usize, k: usize, config: &ModelConfig) -> Self {
        Self {
            anchor_layer,
            k,
            group: config.group_size(),
            num_kv_heads: config.num_kv_heads,
            selection: None,
            recorded: Recorded::default(),
        }
    }
}

impl LayerSelector for TidalSelector {
    fn select(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<Vec<usize>>>> {
        if view.layer <= self.anchor_layer || view.cache.is_empty() {
            return Ok(None);
        }
        let sel = self.selection.clone();
        self.recorded.put(view.layer, &sel);
        Ok(sel)
    }

    fn observe(&mut self, layer: usize, attn: &AttnTensor) -> Result<()> {
        if layer == self.anchor_layer {
            let n = attn.keys - attn.queries;
            if n > 0 {
                let heads: Vec<Matrix> = (0..self.num_kv_heads)
                    .map(|h| attn.cache_distribution(h, self.group, n))
                    .collect();
                let sel = head_topk(&heads, self.k);
                self.recorded.put(layer, &Some(sel.clone()));
                self.selection = Some(sel);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::{build_page_meta, KvCache, KvSlab};

    #[test]
    fn quest_bound_example() {
        assert_eq!(page_bound(&[1.0, 1.0], &[1.0, -1.0], &[3.0, 2.0]), 5.0);
    }

    #[test]
    fn quest_page_size_one_is_token_topk() {
        let keys = vec![0.5, 1.0, -2.0, 0.3, 1.5, 1.5, 0.0, -1.0, 2.0, -0.5];
        let mut c = KvCache::new(1, 1, 2);
        c.append(&[KvSlab {
            len: 5,
            values: keys.clone(),
            keys: keys.clone(),
        }])
        .unwrap();
        let meta = build_page_meta(&c, 1).unwrap();
        let q1: &[f32] = &[1.0, 0.5];
        let q2: &[f32] = &[-0.2, 1.0];
        let got = quest_head(&[q1, q2], &meta, 0, 0, 2).unwrap();
        let scores: Vec<f64> = (0..5)
            .map(|i| {
                let k = c.key(0, i, 0);
                (crate::tensor::dot(q1, k) + crate::tensor::dot(q2, k)) as f64
            })
            .collect();
        assert_eq!(got, topk_by_mass(&scores, 2));
        for i in 0..5 {
            let k = c.key(0, i, 0);
            assert!(page_bound(q1, meta.min(0, 0, i), meta.max(0, 0, i)) >= crate::tensor::dot(q1, k) as f64 - 1e-6);
        }
    }

    #[test]
    fn quest_truncates_last_page() {
        let mut c = KvCache::new(1, 1, 1);
        // pages of 3: [1,1,1] [5,5,5] [2,2,2] [0,0]
        let keys = vec![1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 2.0, 2.0, 2.0, 0.0, 0.0];
        c.append(&[KvSlab {
            len: 11,
            values: keys.clone(),
            keys,
        }])
        .unwrap();
        let meta = build_page_meta(&c, 3).unwrap();
        let q: &[f32] = &[1.0];
        assert_eq!(quest_head(&[q], &meta, 0, 0, 4).unwrap(), vec![3, 4, 5, 6]);
        assert_eq!(quest_head(&[q], &meta, 0, 0, 20).unwrap().len(), 11);
    }

    #[test]
    fn window_examples() {
        let p = window_plan(10, 2, 3, 2, 1, 1).unwrap();
        assert_eq!(p.indices(1, 0), &[0, 1, 7, 8, 9]);
        p.validate(None).unwrap();
        let p = window_plan(10, 1, 20, 2, 1, 1).unwrap();
        assert_eq!(p.indices(1, 0).len(), 10);
        p.validate(None).unwrap();
        let p = window_plan(10, 0, 1, 2, 1, 1).unwrap();
        assert_eq!(p.indices(1, 0), &[9]);
        assert!(matches!(window_plan(0, 1, 1, 2, 1, 1), Err(MageError::Plan(_))));
    }

    fn mat(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tidal_uniform_takes_first_k() {
        let a = mat(&[&[0.25; 4], &[0.25; 4]]);
        let p = tidal_plan(&[a], 2, 3, 1).unwrap();
        assert_eq!(p.indices(1, 0), &[0, 1]);
        assert_eq!(p.indices(2, 0), &[0, 1]);
        assert_eq!(p.indices(0, 0), &[0, 1, 2, 3]);
    }

    #[test]
    fn oracle_concentrated() {
        let a = mat(&[&[0.0, 0.0, 1.0, 0.0], &[0.1, 0.0, 0.9, 0.0]]);
        let step = StepAttention {
            layers: vec![vec![a.clone()], vec![a]],
        };
        let p = oracle_plan(&step, 1, 1).unwrap();
        assert_eq!(p.indices(1, 0), &[2]);
        let full = oracle_plan(&step, 9, 1).unwrap();
        assert_eq!(full.indices(1, 0), &[0, 1, 2, 3]);
    }

    #[test]
    fn random_plan_valid_and_seeded() {
        let a = random_plan(50, 8, 3, 2, 1, 4);
        a.validate(None).unwrap();
        assert_eq!(a, random_plan(50, 8, 3, 2, 1, 4));
        assert_ne!(a, random_plan(50, 8, 3, 2, 1, 5));
    }

    #[test]
    fn tidal_anchor_validation() {
        let cfg = ModelConfig::default();
        assert!(BaselineConfig::Tidal { anchor_layer: 0 }.validate(&cfg).is_err());
        assert!(BaselineConfig::Tidal { anchor_layer: 1 }.validate(&cfg).is_ok());
        assert!(BaselineConfig::Tidal { anchor_layer: 4 }.validate(&cfg).is_err());
    }
}
