//! Seeded miniature block-diffusion transformer (forward only).
//!
//! Attention-only GQA stack: token embedding plus fixed sinusoidal
//! positions, pre-norm attention blocks with a residual stream, and an
//! unembedding. Every weight comes from a ChaCha stream keyed by the config
//! seed, so equal configs give bit-identical models.
//!
//! Block-internal attention is always exact. Cross-block attention over the
//! KV cache can be restricted per layer and KV head through a
//! [`LayerSelector`]; non-selected entries get exactly zero probability and
//! the softmax is renormalized over the selected set plus the block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::kvcache::{validate_indices, KvCache, KvSlab};
use crate::plan::SelectionPlan;
use crate::tensor::{dot, softmax_in_place, Matrix};

/// Standard deviation of the query projection bias. The bias adds a
/// query-independent component to every score, which is what makes the
/// important context positions shared across queries and denoising steps.
const QUERY_BIAS_SCALE: f32 = 1.0;

const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    /// Leading layers that always run exact attention.
    pub exact_layer_prefix: usize,
    /// Divides the pre-softmax scores; smaller values concentrate attention.
    pub skew_temperature: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            vocab_size: 64,
            block_size: 8,
            exact_layer_prefix: 1,
            skew_temperature: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_query_heads", self.num_query_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("block_size", self.block_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(MageError::Config(format!("{name} must be positive")));
            }
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(MageError::Config(format!(
                "num_query_heads {} is not a multiple of num_kv_heads {}",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if self.exact_layer_prefix == 0 || self.exact_layer_prefix > self.num_layers {
            return Err(MageError::Config(format!(
                "exact_layer_prefix {} must lie in 1..={}",
                self.exact_layer_prefix, self.num_layers
            )));
        }
        if !(self.skew_temperature.is_finite() && self.skew_temperature > 0.0) {
            return Err(MageError::Config(
                "skew_temperature must be a positive finite number".into(),
            ));
        }
        if self.vocab_size >= u32::MAX as usize {
            return Err(MageError::Config("vocab_size too large".into()));
        }
        Ok(())
    }

    /// Query heads per KV head (`G`).
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn model_dim(&self) -> usize {
        self.num_query_heads * self.head_dim
    }

    /// Reserved `[MASK]` id; it has an embedding row but is never predicted.
    pub fn mask_token(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn planned_layers(&self) -> usize {
        self.num_layers - self.exact_layer_prefix
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Vec<f32>,
    bq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Vec<f32>,
    unembed: Vec<f32>,
    layers: Vec<LayerWeights>,
}

/// One block of positions being denoised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockState {
    pub tokens: Vec<u32>,
    pub masked: Vec<bool>,
    pub positions: Vec<usize>,
}

impl BlockState {
    pub fn all_masked(start: usize, len: usize) -> Self {
        Self {
            tokens: vec![0; len],
            masked: vec![true; len],
            positions: (start..start + len).collect(),
        }
    }

    /// A fully decoded block, e.g. a prompt chunk.
    pub fn decoded(start: usize, tokens: Vec<u32>) -> Self {
        let len = tokens.len();
        Self {
            tokens,
            masked: vec![false; len],
            positions: (start..start + len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Token ids fed to the model, with `[MASK]` at masked positions.
    pub fn input_ids(&self, mask_token: u32) -> Vec<u32> {
        self.tokens
            .iter()
            .zip(&self.masked)
            .map(|(&t, &m)| if m { mask_token } else { t })
            .collect()
    }
}

/// Post-softmax attention of one layer, `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTensor {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub data: Vec<f32>,
}

impl AttnTensor {
    fn zeros(heads: usize, queries: usize, keys: usize) -> Self {
        Self {
            heads,
            queries,
            keys,
            data: vec![0.0; heads * queries * keys],
        }
    }

    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let o = (head * self.queries + query) * self.keys;
        &self.data[o..o + self.keys]
    }

    fn row_mut(&mut self, head: usize, query: usize) -> &mut [f32] {
        let o = (head * self.queries + query) * self.keys;
        &mut self.data[o..o + self.keys]
    }

    /// Attention of the `group` query heads sharing `kv_head` over the first
    /// `cache_len` keys, each row renormalized to a distribution over the
    /// cache. Rows are ordered `(query head in group, query)`, giving a
    /// `G·B × n` matrix.
    pub fn cache_distribution(&self, kv_head: usize, group: usize, cache_len: usize) -> Matrix {
        let rows = group * self.queries;
        let mut m = Matrix::zeros(rows, cache_len);
        for g in 0..group {
            let head = kv_head * group + g;
            for q in 0..self.queries {
                let src = &self.row(head, q)[..cache_len];
                let total: f32 = src.iter().sum();
                let dst = m.row_mut(g * self.queries + q);
                if total > 0.0 {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s / total;
                    }
                }
            }
        }
        m
    }

    pub fn max_abs_diff(&self, other: &AttnTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Exact attention restricted to the KV cache, per layer and KV head:
/// `layers[ℓ][h]` is a `G·B × n` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    pub layers: Vec<Vec<Matrix>>,
}

impl StepAttention {
    pub fn from_forward(attn: &[AttnTensor], config: &ModelConfig, cache_len: usize) -> Self {
        let g = config.group_size();
        StepAttention {
            layers: attn
                .iter()
                .map(|a| {
                    (0..config.num_kv_heads)
                        .map(|h| a.cache_distribution(h, g, cache_len))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_kv_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn context_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, Matrix::cols)
    }
}

pub struct ForwardOutput {
    /// `m × V` logits over real (non-mask) tokens.
    pub logits: Matrix,
    /// Per layer, `H_q × m × (n + m)`; columns `0..n` are cache positions.
    pub attn: Vec<AttnTensor>,
    /// Per layer keys/values of the block positions.
    pub new_kv: Vec<KvSlab>,
}

/// What a selector sees before a layer's attention runs.
pub struct LayerView<'a> {
    pub layer: usize,
    pub config: &'a ModelConfig,
    /// Block queries, `[query][q_head][dim]`, before score scaling.
    pub queries: &'a [f32],
    pub num_queries: usize,
    pub cache: &'a KvCache,
}

impl LayerView<'_> {
    pub fn query(&self, q: usize, head: usize) -> &[f32] {
        let d = self.config.head_dim;
        let o = (q * self.config.num_query_heads + head) * d;
        &self.queries[o..o + d]
    }
}

/// Chooses, per layer, which cache indices each KV head may read.
pub trait LayerSelector {
    /// Returns per-KV-head sorted cache indices, or `None` for exact
    /// attention. Only called for layers at or beyond the exact prefix.
    fn select(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<Vec<usize>>>>;

    /// Called with every layer's attention right after it is computed.
    fn observe(&mut self, _layer: usize, _attn: &AttnTensor) -> Result<()> {
        Ok(())
    }
}

/// Exact attention everywhere.
pub struct Dense;

impl LayerSelector for Dense {
    fn select(&mut self, _view: &LayerView<'_>) -> Result<Option<Vec<Vec<usize>>>> {
        Ok(None)
    }
}

impl LayerSelector for &SelectionPlan {
    fn select(&mut self, view: &LayerView<'_>) -> Result<Option<Vec<Vec<usize>>>> {
        let layer = self.layers.get(view.layer).ok_or_else(|| {
            MageError::Plan(format!("plan has no entry for layer {}", view.layer))
        })?;
        Ok(Some(layer.heads.clone()))
    }
}

fn matvec(w: &[f32], x: &[f32], out_dim: usize) -> Vec<f32> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|i| dot(&w[i * in_dim..(i + 1) * in_dim], x))
        .collect()
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn sinusoid(pos: usize, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
        })
        .collect()
}

/// Softmax attention of one query over the given key/value rows, writing
/// probabilities into `probs` and the weighted value sum into `out`.
fn attend(q: &[f32], keys: &[&[f32]], values: &[&[f32]], scale: f32, probs: &mut Vec<f32>, out: &mut [f32]) {
    probs.clear();
    probs.extend(keys.iter().map(|k| dot(q, k) * scale));
    softmax_in_place(probs);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, v) in probs.iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += p * x;
        }
    }
}

/// Per-layer projections of a run of tokens: `[pos][head][dim]` layouts.
struct Projected {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Attention-permission predicate for [`Model::forward_masked`]:
/// `(layer, query_head, query, key) -> allowed`.
pub type MaskFn<'a> = dyn Fn(usize, usize, usize, usize) -> bool + 'a;

pub struct MaskedOutput {
    pub logits: Matrix,
    /// Per layer, `H_q × S × S`.
    pub attn: Vec<AttnTensor>,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dm = config.model_dim();
    let qd = config.num_query_heads * config.head_dim;
    let kvd = config.num_kv_heads * config.head_dim;
    let mut normal = |len: usize, std: f32| -> Vec<f32> {
        (0..len)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect()
    };
    let proj_std = 1.0 / (dm as f32).sqrt();
    let embed = normal((config.vocab_size + 1) * dm, 1.0);
    let unembed = normal(config.vocab_size * dm, proj_std);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: normal(qd * dm, proj_std),
            bq: normal(qd, QUERY_BIAS_SCALE),
            wk: normal(kvd * dm, proj_std),
            wv: normal(kvd * dm, proj_std),
            wo: normal(dm * qd, 1.0 / (qd as f32).sqrt()),
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        embed,
        unembed,
        layers,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |xs: &[f32]| {
            for x in xs {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        };
        feed(&self.embed);
        feed(&self.unembed);
        for l in &self.layers {
            feed(&l.wq);
            feed(&l.bq);
            feed(&l.wk);
            feed(&l.wv);
            feed(&l.wo);
        }
        h
    }

    pub fn weights_finite(&self) -> bool {
        let all = [&self.embed, &self.unembed]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| [&l.wq, &l.bq, &l.wk, &l.wv, &l.wo]));
        all.flat_map(|w| w.iter()).all(|x| x.is_finite())
    }

    fn embed_tokens(&self, ids: &[u32], positions: &[usize]) -> Result<Vec<Vec<f32>>> {
        let dm = self.config.model_dim();
        ids.iter()
            .zip(positions)
            .map(|(&id, &pos)| {
                let id = id as usize;
                if id > self.config.vocab_size {
                    return Err(MageError::Shape(format!("token id {id} outside vocabulary")));
                }
                let row = &self.embed[id * dm..(id + 1) * dm];
                Ok(row.iter().zip(sinusoid(pos, dm)).map(|(e, p)| e + p).collect())
            })
            .collect()
    }

    fn project(&self, layer: usize, hidden: &[Vec<f32>]) -> Projected {
        let c = &self.config;
        let w = &self.layers[layer];
        let qd = c.num_query_heads * c.head_dim;
        let kvd = c.num_kv_heads * c.head_dim;
        let mut p = Projected {
            q: Vec::with_capacity(hidden.len() * qd),
            k: Vec::with_capacity(hidden.len() * kvd),
            v: Vec::with_capacity(hidden.len() * kvd),
        };
        for h in hidden {
            let x = rms_norm(h);
            let q = matvec(&w.wq, &x, qd);
            p.q.extend(q.iter().zip(&w.bq).map(|(a, b)| a + b));
            p.k.extend(matvec(&w.wk, &x, kvd));
            p.v.extend(matvec(&w.wv, &x, kvd));
        }
        p
    }

    fn score_scale(&self) -> f32 {
        1.0 / ((self.config.head_dim as f32).sqrt() * self.config.skew_temperature)
    }

    fn add_output(&self, layer: usize, hidden: &mut [Vec<f32>], heads_out: &[f32]) {
        let qd = self.config.num_query_heads * self.config.head_dim;
        let dm = self.config.model_dim();
        for (i, h) in hidden.iter_mut().enumerate() {
            let o = matvec(&self.layers[layer].wo, &heads_out[i * qd..(i + 1) * qd], dm);
            for (a, b) in h.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    fn logits(&self, hidden: &[Vec<f32>]) -> Matrix {
        let v = self.config.vocab_size;
        let mut m = Matrix::zeros(hidden.len(), v);
        for (i, h) in hidden.iter().enumerate() {
            let x = rms_norm(h);
            m.row_mut(i).copy_from_slice(&matvec(&self.unembed, &x, v));
        }
        m
    }

    /// Forward pass over one block attending to `cache`, with cross-block
    /// reads restricted by `selector` on layers past the exact prefix.
    pub fn forward_with(
        &self,
        cache: &KvCache,
        block: &BlockState,
        selector: &mut dyn LayerSelector,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if cache.num_layers() != c.num_layers
            || cache.num_kv_heads() != c.num_kv_heads
            || cache.head_dim() != c.head_dim
        {
            return Err(MageError::Shape("cache dimensions do not match model".into()));
        }
        if block.is_empty()
            || block.masked.len() != block.len()
            || block.positions.len() != block.len()
        {
            return Err(MageError::Shape("malformed block state".into()));
        }
        let m = block.len();
        let n = cache.len();
        let d = c.head_dim;
        let g = c.group_size();
        let scale = self.score_scale();
        let ids = block.input_ids(c.mask_token());
        let mut hidden = self.embed_tokens(&ids, &block.positions)?;
        let mut attn_out = Vec::with_capacity(c.num_layers);
        let mut new_kv = Vec::with_capacity(c.num_layers);
        let mut probs = Vec::new();

        for layer in 0..c.num_layers {
            let p = self.project(layer, &hidden);
            let selection = if layer < c.exact_layer_prefix {
                None
            } else {
                let view = LayerView {
                    layer,
                    config: c,
                    queries: &p.q,
                    num_queries: m,
                    cache,
                };
                selector.select(&view)?
            };
            if let Some(sel) = &selection {
                if sel.len() != c.num_kv_heads {
                    return Err(MageError::Plan(format!(
                        "layer {layer}: selection covers {} KV heads, model has {}",
                        sel.len(),
                        c.num_kv_heads
                    )));
                }
                if n == 0 && sel.iter().any(|s| !s.is_empty()) {
                    return Err(MageError::Plan(format!(
                        "layer {layer}: nonempty selection over an empty cache"
                    )));
                }
                for s in sel {
                    validate_indices(s, n)?;
                }
            }

            let mut tensor = AttnTensor::zeros(c.num_query_heads, m, n + m);
            let mut heads_out = vec![0.0f32; m * c.num_query_heads * d];
            for kv in 0..c.num_kv_heads {
                let cache_idx: Vec<usize> = match &selection {
                    Some(sel) => sel[kv].clone(),
                    None => (0..n).collect(),
                };
                let mut keys: Vec<&[f32]> = Vec::with_capacity(cache_idx.len() + m);
                let mut values: Vec<&[f32]> = Vec::with_capacity(cache_idx.len() + m);
                for &i in &cache_idx {
                    keys.push(cache.key(layer, i, kv));
                    values.push(cache.value(layer, i, kv));
                }
                for j in 0..m {
                    let o = (j * c.num_kv_heads + kv) * d;
                    keys.push(&p.k[o..o + d]);
                    values.push(&p.v[o..o + d]);
                }
                for gi in 0..g {
                    let head = kv * g + gi;
                    for qi in 0..m {
                        let qo = (qi * c.num_query_heads + head) * d;
                        let out = &mut heads_out[qo..qo + d];
                        attend(&p.q[qo..qo + d], &keys, &values, scale, &mut probs, out);
                        let row = tensor.row_mut(head, qi);
                        for (&i, &pr) in cache_idx.iter().zip(&probs) {
                            row[i] = pr;
                        }
                        row[n..].copy_from_slice(&probs[cache_idx.len()..]);
                    }
                }
            }
            selector.observe(layer, &tensor)?;
            attn_out.push(tensor);
            new_kv.push(KvSlab {
                len: m,
                keys: p.k,
                values: p.v,
            });
            self.add_output(layer, &mut hidden, &heads_out);
        }

        Ok(ForwardOutput {
            logits: self.logits(&hidden),
            attn: attn_out,
            new_kv,
        })
    }

    /// Self-contained forward over a token sequence with an explicit
    /// attention-permission predicate (no KV cache). Keys are visited in
    /// ascending position order, so two predicates that allow the same set
    /// give bit-identical results.
    pub fn forward_masked(
        &self,
        ids: &[u32],
        positions: &[usize],
        allowed: &MaskFn<'_>,
    ) -> Result<MaskedOutput> {
        let c = &self.config;
        if ids.len() != positions.len() || ids.is_empty() {
            return Err(MageError::Shape("ids and positions must be equal, nonempty".into()));
        }
        let s = ids.len();
        let d = c.head_dim;
        let g = c.group_size();
        let scale = self.score_scale();
        let mut hidden = self.embed_tokens(ids, positions)?;
        let mut attn_out = Vec::with_capacity(c.num_layers);
        let mut probs = Vec::new();
        for layer in 0..c.num_layers {
            let p = self.project(layer, &hidden);
            let mut tensor = AttnTensor::zeros(c.num_query_heads, s, s);
            let mut heads_out = vec![0.0f32; s * c.num_query_heads * d];
            for head in 0..c.num_query_heads {
                let kv = head / g;
                for qi in 0..s {
                    let key_idx: Vec<usize> =
                        (0..s).filter(|&kj| allowed(layer, head, qi, kj)).collect();
                    if key_idx.is_empty() {
                        return Err(MageError::Shape(format!(
                            "query {qi} of head {head} may attend to nothing"
                        )));
                    }
                    let keys: Vec<&[f32]> = key_idx
                        .iter()
                        .map(|&j| &p.k[(j * c.num_kv_heads + kv) * d..][..d])
                        .collect();
                    let values: Vec<&[f32]> = key_idx
                        .iter()
                        .map(|&j| &p.v[(j * c.num_kv_heads + kv) * d..][..d])
                        .collect();
                    let qo = (qi * c.num_query_heads + head) * d;
                    let out = &mut heads_out[qo..qo + d];
                    attend(&p.q[qo..qo + d], &keys, &values, scale, &mut probs, out);
                    let row = tensor.row_mut(head, qi);
                    for (&j, &pr) in key_idx.iter().zip(&probs) {
                        row[j] = pr;
                    }
                }
            }
            attn_out.push(tensor);
            self.add_output(layer, &mut hidden, &heads_out);
        }
        Ok(MaskedOutput {
            logits: self.logits(&hidden),
            attn: attn_out,
        })
    }
}

/// Forward over one block; `plan`, when present, restricts cross-block reads
/// of every layer past the exact prefix.
pub fn forward_block(
    model: &Model,
    cache: &KvCache,
    block: &BlockState,
    plan: Option<&SelectionPlan>,
) -> Result<ForwardOutput> {
    match plan {
        Some(mut p) => model.forward_with(cache, block, &mut p),
        None => model.forward_with(cache, block, &mut Dense),
    }
}

/// Deterministic pseudo-random prompt of `len` real tokens.
pub fn synth_prompt(config: &ModelConfig, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_70_6b_e5);
    (0..len)
        .map(|_| rng.random_range(0..config.vocab_size as u32))
        .collect()
}

/// Exact prefill of `tokens` into a fresh cache, in chunks of the block size.
pub fn prefill(model: &Model, tokens: &[u32]) -> Result<KvCache> {
    let c = model.config();
    let mut cache = KvCache::new(c.num_layers, c.num_kv_heads, c.head_dim);
    for (ci, chunk) in tokens.chunks(c.block_size).enumerate() {
        let block = BlockState::decoded(ci * c.block_size, chunk.to_vec());
        let out = forward_block(model, &cache, &block, None)?;
        cache.append(&out.new_kv)?;
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::PlanSource;

    fn setup(n: usize, cfg: ModelConfig) -> (Model, KvCache) {
        let model = build_model(&cfg).unwrap();
        let prompt = synth_prompt(&cfg, n, cfg.seed);
        let cache = prefill(&model, &prompt).unwrap();
        (model, cache)
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig {
            seed: 1,
            ..Default::default()
        };
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.weights_finite());
        let other = build_model(&ModelConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig {
            num_query_heads: 4,
            num_kv_heads: 4,
            ..Default::default()
        };
        assert_eq!(ok.group_size(), 1);
        assert!(build_model(&ok).is_ok());
        let bad = ModelConfig {
            num_query_heads: 4,
            num_kv_heads: 3,
            ..Default::default()
        };
        assert!(matches!(build_model(&bad), Err(MageError::Config(_))));
        let zero = ModelConfig {
            head_dim: 0,
            ..Default::default()
        };
        assert!(matches!(build_model(&zero), Err(MageError::Config(_))));
        let prefix = ModelConfig {
            exact_layer_prefix: 0,
            ..Default::default()
        };
        assert!(matches!(build_model(&prefix), Err(MageError::Config(_))));
    }

    #[test]
    fn empty_cache_attention_is_block_only() {
        let cfg = ModelConfig::default();
        let model = build_model(&cfg).unwrap();
        let cache = KvCache::new(cfg.num_layers, cfg.num_kv_heads, cfg.head_dim);
        let block = BlockState::all_masked(0, cfg.block_size);
        let out = forward_block(&model, &cache, &block, None).unwrap();
        for a in &out.attn {
            assert_eq!(a.keys, cfg.block_size);
            for h in 0..a.heads {
                for q in 0..a.queries {
                    let s: f32 = a.row(h, q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn full_plan_matches_dense() {
        let cfg = ModelConfig::default();
        let (model, cache) = setup(40, cfg.clone());
        let block = BlockState::all_masked(40, cfg.block_size);
        let dense = forward_block(&model, &cache, &block, None).unwrap();
        let plan = SelectionPlan::full(PlanSource::Full, cfg.num_layers, cfg.num_kv_heads, 40, 1);
        let sparse = forward_block(&model, &cache, &block, Some(&plan)).unwrap();
        assert!(dense.logits.max_abs_diff(&sparse.logits) <= 1e-6);
        for (a, b) in dense.attn.iter().zip(&sparse.attn) {
            assert!(a.max_abs_diff(b) <= 1e-6);
        }
    }

    #[test]
    fn sparse_rows_zero_outside_selection() {
        let cfg = ModelConfig::default();
        let (model, cache) = setup(24, cfg.clone());
        let block = BlockState::all_masked(24, cfg.block_size);
        let mut plan = SelectionPlan::full(PlanSource::Window, cfg.num_layers, cfg.num_kv_heads, 24, 1);
        for l in 1..cfg.num_layers {
            plan.layers[l].budget = 3;
            plan.layers[l].heads = vec![vec![0, 5, 23]; cfg.num_kv_heads];
        }
        let out = forward_block(&model, &cache, &block, Some(&plan)).unwrap();
        for l in 1..cfg.num_layers {
            let a = &out.attn[l];
            for h in 0..a.heads {
                for q in 0..a.queries {
                    let row = a.row(h, q);
                    for (i, &p) in row[..24].iter().enumerate() {
                        if ![0, 5, 23].contains(&i) {
                            assert_eq!(p, 0.0);
                        }
                    }
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                }
            }
        }
        let a0 = &out.attn[0];
        assert!(a0.row(0, 0)[1] > 0.0, "exact prefix layer ignores the plan");
    }

    #[test]
    fn plan_errors() {
        let cfg = ModelConfig::default();
        let (model, cache) = setup(8, cfg.clone());
        let block = BlockState::all_masked(8, cfg.block_size);
        let mut plan = SelectionPlan::full(PlanSource::Full, cfg.num_layers, cfg.num_kv_heads, 8, 1);
        plan.layers[2].heads[0] = vec![3, 9];
        assert!(matches!(
            forward_block(&model, &cache, &block, Some(&plan)),
            Err(MageError::Plan(_))
        ));
        let empty = KvCache::new(cfg.num_layers, cfg.num_kv_heads, cfg.head_dim);
        let plan = SelectionPlan::full(PlanSource::Full, cfg.num_layers, cfg.num_kv_heads, 1, 1);
        assert!(matches!(
            forward_block(&model, &empty, &block, Some(&plan)),
            Err(MageError::Plan(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig {
            seed: 5,
            ..Default::default()
        };
        let (model, cache) = setup(20, cfg.clone());
        let block = BlockState::all_masked(20, cfg.block_size);
        let a = forward_block(&model, &cache, &block, None).unwrap();
        let b = forward_block(&model, &cache, &block, None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn cache_distribution_rows_normalized() {
        let cfg = ModelConfig::default();
        let (model, cache) = setup(30, cfg.clone());
        let block = BlockState::all_masked(30, cfg.block_size);
        let out = forward_block(&model, &cache, &block, None).unwrap();
        let step = StepAttention::from_forward(&out.attn, &cfg, 30);
        assert_eq!(step.context_len(), 30);
        for layer in &step.layers {
            for m in layer {
                assert_eq!(m.rows(), cfg.group_size() * cfg.block_size);
                for r in m.iter_rows() {
                    assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
