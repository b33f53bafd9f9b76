//! Python bindings: toy model decoding, plan construction, metrics, the
//! latency model and the distillation objective.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mage_core::config::FlatConfig;
use mage_core::costmodel::{self, CostParams, StepKind};
use mage_core::decoder::{generate, DenoiseTrace, Generation};
use mage_core::metrics::{self, method_recall};
use mage_core::tensor::Matrix;
use mage_core::trace::{self, AnalysisParams, TraceFile};
use mage_core::traindata;
use mage_core::{MageError, StepAttention};

create_exception!(mage, MageException, PyException);

fn py_err(e: MageError) -> PyErr {
    MageException::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

/// Result of a decoding run.
#[pyclass(frozen)]
struct Run {
    generation: Generation,
    method: String,
    k: usize,
}

#[pymethods]
impl Run {
    /// Prompt followed by the generated tokens.
    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.generation.tokens.clone()
    }

    #[getter]
    fn prompt_len(&self) -> usize {
        self.generation.prompt_len
    }

    #[getter]
    fn method(&self) -> &str {
        &self.method
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.generation.traces.len()
    }

    /// Per-step records as JSON lines (same format as `mage simulate`).
    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        trace::write_jsonl(&mut buf, &self.method, &self.generation.traces).map_err(py_err)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    /// Text dump of the selection plan used at each sparse step of `block`.
    fn plans(&self, block: usize) -> PyResult<Vec<String>> {
        Ok(self
            .block(block)?
            .steps
            .iter()
            .filter_map(|s| s.plan.as_ref().map(|p| p.to_text()))
            .collect())
    }

    /// Per-layer budgets of the plan built at step 1 (mask-guided runs).
    fn budgets(&self, block: usize) -> PyResult<Option<Vec<usize>>> {
        Ok(self
            .block(block)?
            .built_plan
            .as_ref()
            .map(|p| p.layers.iter().map(|l| l.budget).collect()))
    }

    /// `(step, recall)` of the step-1 oracle against each step's oracle.
    fn self_recall(&self, block: usize) -> PyResult<Vec<(usize, f64)>> {
        Ok(metrics::recall_curve(self.block(block)?, "self")
            .map_err(py_err)?
            .points)
    }

    /// `(step, recall)` of each sparse step's plan against that step's oracle.
    fn plan_recall(&self, block: usize) -> PyResult<Vec<(usize, f64)>> {
        let t = self.block(block)?;
        t.steps
            .iter()
            .filter_map(|s| Some((s.step, s.plan.as_ref()?, s.oracle.as_ref()?)))
            .map(|(step, p, o)| Ok((step, method_recall(p, o).map_err(py_err)?)))
            .collect()
    }

    /// Attention of every step as a `MAGETRACE1` byte string (needs
    /// `keep_attention=True`).
    fn trace_bytes<'py>(&self, py: Python<'py>, num_query_heads: usize, block_size: usize) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let steps: Vec<StepAttention> = self
            .generation
            .traces
            .iter()
            .flat_map(|t| t.attention.iter().cloned())
            .collect();
        let file = TraceFile::from_attention(num_query_heads, block_size, &steps).map_err(py_err)?;
        Ok(pyo3::types::PyBytes::new(py, &file.to_bytes().map_err(py_err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(method={}, k={}, blocks={}, tokens={})",
            self.method,
            self.k,
            self.generation.traces.len(),
            self.generation.tokens.len()
        )
    }
}

impl Run {
    fn block(&self, block: usize) -> PyResult<&DenoiseTrace> {
        self.generation
            .traces
            .get(block)
            .ok_or_else(|| MageException::new_err(format!("no block {block}")))
    }
}

/// Decode with the seeded toy model. Keyword names follow the flat config
/// keys accepted by `mage simulate --config`.
#[pyfunction]
#[pyo3(signature = (
    method = "mage", k = None, k_min = None, tokens_per_step = None, num_blocks = None,
    prompt_len = None, seed = None, num_layers = None, num_query_heads = None,
    num_kv_heads = None, head_dim = None, vocab_size = None, block_size = None,
    exact_layer_prefix = None, skew_temperature = None, page_size = None,
    anchor_layer = None, num_sinks = None, window_size = None, keep_attention = false
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    method: &str,
    k: Option<usize>,
    k_min: Option<usize>,
    tokens_per_step: Option<usize>,
    num_blocks: Option<usize>,
    prompt_len: Option<usize>,
    seed: Option<u64>,
    num_layers: Option<usize>,
    num_query_heads: Option<usize>,
    num_kv_heads: Option<usize>,
    head_dim: Option<usize>,
    vocab_size: Option<usize>,
    block_size: Option<usize>,
    exact_layer_prefix: Option<usize>,
    skew_temperature: Option<f32>,
    page_size: Option<usize>,
    anchor_layer: Option<usize>,
    num_sinks: Option<usize>,
    window_size: Option<usize>,
    keep_attention: bool,
) -> PyResult<Run> {
    let flat = FlatConfig {
        method: Some(method.to_string()),
        k,
        k_min,
        tokens_per_step,
        num_blocks,
        prompt_len,
        seed,
        num_layers,
        num_query_heads,
        num_kv_heads,
        head_dim,
        vocab_size,
        block_size,
        exact_layer_prefix,
        skew_temperature,
        page_size,
        anchor_layer,
        num_sinks,
        window_size,
    };
    let sim = flat.resolve().map_err(py_err)?;
    let model = mage_core::build_model(&sim.model).map_err(py_err)?;
    let mut decode = sim.decode.clone();
    decode.keep_attention = keep_attention;
    let generation = generate(&model, &decode).map_err(py_err)?;
    Ok(Run {
        generation,
        method: sim.decode.method.name().to_string(),
        k: sim.decode.k,
    })
}

/// Mask-guided plan from cache attention `attn[layer][kv_head][row][key]`.
/// Returns `(budgets, indices)` with `indices[layer][kv_head]`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn build_plan(
    attn: Vec<Vec<Vec<Vec<f32>>>>,
    exact_prefix: usize,
    k: usize,
    k_min: usize,
) -> PyResult<(Vec<usize>, Vec<Vec<Vec<usize>>>)> {
    let layers = attn
        .into_iter()
        .map(|heads| heads.into_iter().map(matrix).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    let (plan, _) = mage_core::mage::build_plan(&StepAttention { layers }, exact_prefix, k, k_min)
        .map_err(py_err)?;
    let budgets = plan.layers.iter().map(|l| l.budget).collect();
    let indices = plan.layers.into_iter().map(|l| l.heads).collect();
    Ok((budgets, indices))
}

#[pyfunction]
fn topk_recall(reference: Vec<usize>, other: Vec<usize>) -> PyResult<f64> {
    metrics::topk_recall(&reference, &other).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (row, threshold = 0.9))]
fn coverage_budget(row: Vec<f32>, threshold: f64) -> PyResult<usize> {
    metrics::coverage_budget(&row, threshold).map_err(py_err)
}

/// Smallest step count at which the mask-guided total undercuts the
/// baseline, or `None` when it never does.
#[pyfunction]
fn break_even(baseline_step: f64, first_step: f64, rest_step: f64) -> Option<u64> {
    match costmodel::break_even(baseline_step, first_step, rest_step) {
        costmodel::BreakEven::Steps(n) => Some(n),
        costmodel::BreakEven::Never => None,
    }
}

#[pyfunction]
fn overlap(main: f64, async_time: f64, serial_tail: f64) -> f64 {
    costmodel::overlap(main, async_time, serial_tail)
}

/// Modeled step latency. `params` may override any cost parameter by name.
#[pyfunction]
#[pyo3(signature = (context_len, budget, kind, params = None))]
fn step_latency<'py>(
    py: Python<'py>,
    context_len: usize,
    budget: usize,
    kind: &str,
    params: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut p = CostParams::default();
    if let Some(d) = params {
        for (key, value) in d.iter() {
            let key: String = key.extract()?;
            match key.as_str() {
                "bandwidth" => p.bandwidth = value.extract()?,
                "launch_overhead" => p.launch_overhead = value.extract()?,
                "compute_rate" => p.compute_rate = value.extract()?,
                "element_size" => p.element_size = value.extract()?,
                "other_per_layer" => p.other_per_layer = value.extract()?,
                "selection_kernels" => p.selection_kernels = value.extract()?,
                "compare_flops" => p.compare_flops = value.extract()?,
                "num_layers" => p.num_layers = value.extract()?,
                "exact_layer_prefix" => p.exact_layer_prefix = value.extract()?,
                "num_query_heads" => p.num_query_heads = value.extract()?,
                "num_kv_heads" => p.num_kv_heads = value.extract()?,
                "head_dim" => p.head_dim = value.extract()?,
                "block_size" => p.block_size = value.extract()?,
                "page_size" => p.page_size = value.extract()?,
                other => return Err(MageException::new_err(format!("unknown cost parameter `{other}`"))),
            }
        }
    }
    let kind: StepKind = kind.parse().map_err(py_err)?;
    let r = costmodel::step_latency(&p, context_len, budget, kind).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("total", r.total)?;
    out.set_item("speedup_vs_exact", r.speedup_vs_exact)?;
    let phases: Vec<(String, String, f64)> = r
        .phases
        .iter()
        .map(|ph| {
            let phase = format!("{:?}", ph.phase).to_lowercase();
            let stream = format!("{:?}", ph.stream).to_lowercase();
            (phase, stream, ph.time)
        })
        .collect();
    out.set_item("phases", phases)?;
    Ok(out)
}

#[pyfunction]
fn top_p_select(dist: Vec<f32>, p: f64) -> PyResult<Vec<usize>> {
    traindata::top_p_select(&dist, p).map_err(py_err)
}

#[pyfunction]
fn offset_block_causal_mask(num_blocks: usize, block_size: usize) -> PyResult<Vec<Vec<bool>>> {
    let m = traindata::offset_block_causal_mask(num_blocks, block_size).map_err(py_err)?;
    Ok((0..m.size()).map(|q| m.row(q).to_vec()).collect())
}

/// Returns `(ce, kl, total)`.
#[pyfunction]
fn distill_loss(
    student: Vec<Vec<f32>>,
    teacher: Vec<Vec<f32>>,
    targets: Vec<Option<u32>>,
    lam: f64,
    tau: f64,
) -> PyResult<(f64, f64, f64)> {
    let l = traindata::distill_loss(&matrix(student)?, &matrix(teacher)?, &targets, lam, tau)
        .map_err(py_err)?;
    Ok((l.ce, l.kl, l.total))
}

/// Recall curves (`recall`, `method-recall`) or heatmap rows (`skew`) from
/// a `MAGETRACE1` byte string.
#[pyfunction]
#[pyo3(signature = (data, analysis, k = 32, k_min = 8, exact_prefix = 1, seed = 0))]
fn analyze_trace(
    data: &[u8],
    analysis: &str,
    k: usize,
    k_min: usize,
    exact_prefix: usize,
    seed: u64,
) -> PyResult<Vec<(String, usize, f64)>> {
    let file = TraceFile::from_bytes(data).map_err(py_err)?;
    let traces = file.oracle_traces(k, exact_prefix).map_err(py_err)?;
    let curves = match analysis {
        "recall" => vec![trace::self_recall(&traces).map_err(py_err)?],
        "method-recall" => {
            let params = AnalysisParams {
                k,
                k_min,
                exact_prefix,
                seed,
            };
            trace::method_recall_curves(&traces, &params).map_err(py_err)?
        }
        "skew" => {
            let map = trace::skew_from_traces(&traces).map_err(py_err)?;
            return Ok(map
                .normalized
                .iter()
                .enumerate()
                .flat_map(|(l, row)| {
                    row.iter()
                        .zip(&map.buckets)
                        .map(move |(&v, &b)| (format!("layer{l}"), b, v))
                })
                .collect());
        }
        other => return Err(MageException::new_err(format!("unknown analysis `{other}`"))),
    };
    Ok(curves
        .into_iter()
        .flat_map(|c| {
            let label = c.label;
            c.points.into_iter().map(move |(s, r)| (label.clone(), s, r))
        })
        .collect())
}

#[pymodule]
fn mage(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MageError", m.py().get_type::<MageException>())?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(build_plan, m)?)?;
    m.add_function(wrap_pyfunction!(topk_recall, m)?)?;
    m.add_function(wrap_pyfunction!(coverage_budget, m)?)?;
    m.add_function(wrap_pyfunction!(break_even, m)?)?;
    m.add_function(wrap_pyfunction!(overlap, m)?)?;
    m.add_function(wrap_pyfunction!(step_latency, m)?)?;
    m.add_function(wrap_pyfunction!(top_p_select, m)?)?;
    m.add_function(wrap_pyfunction!(offset_block_causal_mask, m)?)?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_trace, m)?)?;
    Ok(())
}
