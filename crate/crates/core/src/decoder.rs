//! Block-wise generation loop.
//!
//! Each block starts fully masked and is denoised over `T = ⌈B / tokens_per_step⌉`
//! steps, unmasking the most confident positions greedily. With the
//! mask-guided method the first step runs exact attention and builds a plan
//! that is reused verbatim for steps `2..T`; baselines rebuild their
//! selection every step. After the last step the decoded block is encoded
//! once more with exact attention and appended to the KV cache.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    oracle_plan, random_plan, window_plan, BaselineConfig, QuestSelector, TidalSelector,
};
use crate::error::{MageError, Result};
use crate::kvcache::{build_page_meta, KvCache};
use crate::mage::{build_plan, UnionStats};
use crate::metrics::{step_budgets, DEFAULT_COVERAGE};
use crate::plan::{PlanSource, SelectionPlan};
use crate::tensor::Matrix;
use crate::toymodel::{
    forward_block, prefill, synth_prompt, BlockState, ForwardOutput, Model, StepAttention,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Exact,
    Mage,
    Baseline(BaselineConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Mage => "mage",
            Method::Baseline(b) => b.source().as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub tokens_per_step: usize,
    /// Average per-layer budget `K`.
    pub k: usize,
    pub k_min: usize,
    pub method: Method,
    pub num_blocks: usize,
    pub prompt_len: usize,
    pub seed: u64,
    /// Run an exact forward at every step to record oracle top-K sets and
    /// coverage budgets.
    pub trace_oracle: bool,
    /// Keep every step's exact cache attention in memory (for trace export).
    pub keep_attention: bool,
    /// Keep every step's block logits in the trace records.
    pub keep_logits: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            tokens_per_step: 1,
            k: 32,
            k_min: 8,
            method: Method::Mage,
            num_blocks: 1,
            prompt_len: 256,
            seed: 0,
            trace_oracle: false,
            keep_attention: false,
            keep_logits: false,
        }
    }
}

impl DecodeConfig {
    pub fn steps(&self, block_size: usize) -> usize {
        block_size.div_ceil(self.tokens_per_step.max(1))
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.tokens_per_step == 0 {
            return Err(MageError::Config("tokens_per_step must be positive".into()));
        }
        if self.k == 0 || self.k_min == 0 || self.k < self.k_min {
            return Err(MageError::Config(format!(
                "need k >= k_min >= 1, got k={}, k_min={}",
                self.k, self.k_min
            )));
        }
        if self.num_blocks == 0 {
            return Err(MageError::Config("num_blocks must be at least 1".into()));
        }
        if let Method::Baseline(b) = &self.method {
            b.validate(model.config())?;
        }
        Ok(())
    }
}

/// One denoising step of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub context_len: usize,
    /// Selection that constrained this step; `None` means exact attention.
    pub plan: Option<SelectionPlan>,
    /// Oracle top-K sets from exact attention at this step.
    pub oracle: Option<SelectionPlan>,
    /// Mean 90%-coverage budget per layer and KV head at this step.
    pub coverage_budgets: Option<Vec<Vec<f64>>>,
    pub unmasked: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Confidence of every position still masked at the start of the step.
    pub confidence: Vec<Option<f32>>,
    /// KV entries read across all layers and KV heads.
    pub kv_entries_read: u64,
    pub layers_executed: usize,
    pub sparse_layers: usize,
    #[serde(skip)]
    pub logits: Option<Matrix>,
}

impl StepRecord {
    #[doc(hidden)]
    pub fn synthetic(step: usize, n: usize, oracle: Option<SelectionPlan>) -> Self {
        StepRecord {
            step,
            context_len: n,
            plan: None,
            oracle,
            coverage_budgets: None,
            unmasked: Vec::new(),
            tokens: Vec::new(),
            confidence: Vec::new(),
            kv_entries_read: 0,
            layers_executed: 0,
            sparse_layers: 0,
            logits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub block: usize,
    pub k: usize,
    pub steps: Vec<StepRecord>,
    /// Plan built from the first step (mask-guided method only).
    pub built_plan: Option<SelectionPlan>,
    pub union_stats: Option<UnionStats>,
    #[serde(skip)]
    pub attention: Vec<StepAttention>,
}

/// Confidence-ordered static unmasking.
///
/// Confidence is the max softmax probability; the `tokens_per_step` most
/// confident masked positions (ties → lower position) take their argmax
/// token (ties → lower id). Returns `(positions, tokens, confidence)` where
/// `confidence[i]` is set for every masked position.
pub fn unmask_step(
    logits: &Matrix,
    masked: &[bool],
    tokens_per_step: usize,
) -> Result<(Vec<usize>, Vec<u32>, Vec<Option<f32>>)> {
    if logits.rows() != masked.len() {
        return Err(MageError::Shape("logit rows do not match the block".into()));
    }
    if !masked.iter().any(|&m| m) {
        return Err(MageError::State("no masked positions left".into()));
    }
    if tokens_per_step == 0 {
        return Err(MageError::Config("tokens_per_step must be positive".into()));
    }
    let mut confidence = vec![None; masked.len()];
    let mut best = vec![0u32; masked.len()];
    for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        let row = logits.row(i);
        let mut arg = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[arg] {
                arg = j;
            }
        }
        let max = row[arg] as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        confidence[i] = Some((1.0 / z) as f32);
        best[i] = arg as u32;
    }
    let mut order: Vec<usize> = (0..masked.len()).filter(|&i| masked[i]).collect();
    order.sort_by(|&a, &b| {
        confidence[b]
            .unwrap()
            .total_cmp(&confidence[a].unwrap())
            .then(a.cmp(&b))
    });
    order.truncate(tokens_per_step);
    order.sort_unstable();
    let tokens = order.iter().map(|&i| best[i]).collect();
    Ok((order, tokens, confidence))
}

fn kv_reads(plan: Option<&SelectionPlan>, model: &Model, n: usize) -> (u64, usize) {
    let c = model.config();
    let mut total = 0u64;
    let mut sparse = 0usize;
    for l in 0..c.num_layers {
        match plan {
            Some(p) if l >= c.exact_layer_prefix => {
                sparse += 1;
                total += p.layers[l].heads.iter().map(|h| h.len() as u64).sum::<u64>();
            }
            _ => total += (n * c.num_kv_heads) as u64,
        }
    }
    (total, sparse)
}

/// Denoises one fully masked block on top of `cache`, then appends the
/// block's keys/values.
pub fn denoise_block(
    model: &Model,
    cache: &mut KvCache,
    config: &DecodeConfig,
    block_index: usize,
) -> Result<(BlockState, DenoiseTrace)> {
    let mc = model.config();
    let n = cache.len();
    let b = mc.block_size;
    let steps = config.steps(b);
    let mut block = BlockState::all_masked(n, b);
    let mut trace = DenoiseTrace {
        block: block_index,
        k: config.k,
        steps: Vec::with_capacity(steps),
        built_plan: None,
        union_stats: None,
        attention: Vec::new(),
    };
    let meta = match &config.method {
        Method::Baseline(BaselineConfig::Quest { page_size }) if n > 0 => {
            Some(build_page_meta(cache, *page_size)?)
        }
        _ => None,
    };
    let mut reused: Option<SelectionPlan> = None;

    for t in 1..=steps {
        let mut exact: Option<ForwardOutput> = None;
        let (out, plan) = match &config.method {
            Method::Exact => (forward_block(model, cache, &block, None)?, None),
            Method::Mage => {
                if t == 1 {
                    let out = forward_block(model, cache, &block, None)?;
                    let attn = StepAttention::from_forward(&out.attn, mc, n);
                    let (plan, stats) = build_plan(&attn, mc.exact_layer_prefix, config.k, config.k_min)?;
                    trace.built_plan = Some(plan.clone());
                    trace.union_stats = Some(stats);
                    reused = Some(plan);
                    (out, None)
                } else {
                    let plan = reused.clone().expect("plan built at step 1");
                    (forward_block(model, cache, &block, Some(&plan))?, Some(plan))
                }
            }
            Method::Baseline(base) => match base {
                _ if n == 0 => (forward_block(model, cache, &block, None)?, None),
                BaselineConfig::Quest { .. } => {
                    let mut sel = QuestSelector {
                        meta: meta.as_ref().expect("page meta for nonempty cache"),
                        k: config.k,
                        recorded: Default::default(),
                    };
                    let out = model.forward_with(cache, &block, &mut sel)?;
                    let plan = sel.recorded.to_plan(PlanSource::Quest, mc, n, config.k);
                    (out, Some(plan))
                }
                BaselineConfig::Tidal { anchor_layer } => {
                    let mut sel = TidalSelector::new(*anchor_layer, config.k, mc);
                    let out = model.forward_with(cache, &block, &mut sel)?;
                    let plan = sel.recorded.to_plan(PlanSource::Tidal, mc, n, config.k);
                    (out, Some(plan))
                }
                BaselineConfig::Window {
                    num_sinks,
                    window_size,
                } => {
                    let plan = window_plan(
                        n,
                        *num_sinks,
                        *window_size,
                        mc.num_layers,
                        mc.num_kv_heads,
                        mc.exact_layer_prefix,
                    )?;
                    (forward_block(model, cache, &block, Some(&plan))?, Some(plan))
                }
                BaselineConfig::Random { seed } => {
                    let step_seed = seed ^ ((block_index as u64) << 32) ^ t as u64;
                    let plan = random_plan(
                        n,
                        config.k,
                        mc.num_layers,
                        mc.num_kv_heads,
                        mc.exact_layer_prefix,
                        step_seed,
                    );
                    (forward_block(model, cache, &block, Some(&plan))?, Some(plan))
                }
                BaselineConfig::Oracle => {
                    let dense = forward_block(model, cache, &block, None)?;
                    let attn = StepAttention::from_forward(&dense.attn, mc, n);
                    let plan = oracle_plan(&attn, config.k, mc.exact_layer_prefix)?;
                    exact = Some(dense);
                    (forward_block(model, cache, &block, Some(&plan))?, Some(plan))
                }
            },
        };

        let mut oracle = None;
        let mut budgets = None;
        if (config.trace_oracle || config.keep_attention) && n > 0 {
            let dense_out;
            let dense = match (&plan, &exact) {
                (None, _) => &out,
                (Some(_), Some(e)) => e,
                (Some(_), None) => {
                    dense_out = forward_block(model, cache, &block, None)?;
                    &dense_out
                }
            };
            let attn = StepAttention::from_forward(&dense.attn, mc, n);
            if config.trace_oracle {
                oracle = Some(oracle_plan(&attn, config.k, mc.exact_layer_prefix)?);
                budgets = Some(step_budgets(&attn, DEFAULT_COVERAGE)?);
            }
            if config.keep_attention {
                trace.attention.push(attn);
            }
        }

        let (positions, tokens, confidence) =
            unmask_step(&out.logits, &block.masked, config.tokens_per_step)?;
        for (&p, &tok) in positions.iter().zip(&tokens) {
            block.tokens[p] = tok;
            block.masked[p] = false;
        }
        let (reads, sparse) = kv_reads(plan.as_ref(), model, n);
        trace.steps.push(StepRecord {
            step: t,
            context_len: n,
            plan,
            oracle,
            coverage_budgets: budgets,
            unmasked: positions,
            tokens,
            confidence,
            kv_entries_read: reads,
            layers_executed: mc.num_layers,
            sparse_layers: sparse,
            logits: config.keep_logits.then(|| out.logits.clone()),
        });
    }
    if block.num_masked() != 0 {
        return Err(MageError::State("block not fully decoded after T steps".into()));
    }

    let encoded = forward_block(model, cache, &block, None)?;
    cache.append(&encoded.new_kv)?;
    Ok((block, trace))
}

pub struct Generation {
    /// Prompt followed by every generated block.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub traces: Vec<DenoiseTrace>,
    pub cache: KvCache,
}

impl Generation {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Prefills a seeded synthetic prompt with exact attention and generates
/// `num_blocks` blocks left to right.
pub fn generate(model: &Model, config: &DecodeConfig) -> Result<Generation> {
    config.validate(model)?;
    let prompt = synth_prompt(model.config(), config.prompt_len, config.seed);
    generate_from(model, &prompt, config)
}

pub fn generate_from(model: &Model, prompt: &[u32], config: &DecodeConfig) -> Result<Generation> {
    config.validate(model)?;
    let mut cache = prefill(model, prompt)?;
    let mut tokens = prompt.to_vec();
    let mut traces = Vec::with_capacity(config.num_blocks);
    for bi in 0..config.num_blocks {
        let (block, trace) = denoise_block(model, &mut cache, config, bi)?;
        tokens.extend_from_slice(&block.tokens);
        traces.push(trace);
    }
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        traces,
        cache,
    })
}
