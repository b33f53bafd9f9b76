//! Per-layer KV index selections and their text serialization.
//!
//! Text format, one header line then one line per (layer, kv head):
//!
//! ```text
//! # mage-plan source=mage n=256 layers=4 kv_heads=2 exact_prefix=1
//! 0 0 256 0,1,2,...,255
//! 1 0 40 3,17,18,...
//! ```
//!
//! Columns are `layer head budget indices`; an empty index list is written
//! as `-`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::kvcache::validate_indices;

/// Which method produced a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Mage,
    Quest,
    Tidal,
    Window,
    Oracle,
    Random,
    Full,
}

impl PlanSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanSource::Mage => "mage",
            PlanSource::Quest => "quest",
            PlanSource::Tidal => "tidal",
            PlanSource::Window => "window",
            PlanSource::Oracle => "oracle",
            PlanSource::Random => "random",
            PlanSource::Full => "full",
        }
    }
}

impl fmt::Display for PlanSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanSource {
    type Err = MageError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mage" => PlanSource::Mage,
            "quest" => PlanSource::Quest,
            "tidal" => PlanSource::Tidal,
            "window" => PlanSource::Window,
            "oracle" => PlanSource::Oracle,
            "random" => PlanSource::Random,
            "full" => PlanSource::Full,
            other => return Err(MageError::Config(format!("unknown plan source `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Allocated budget `K^ℓ` shared by every KV head of the layer.
    pub budget: usize,
    /// Sorted cache indices per KV head.
    pub heads: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub source: PlanSource,
    /// Cache length the plan was built against.
    pub context_len: usize,
    /// Layers `< exact_prefix` always run exact attention and carry the
    /// full index range.
    pub exact_prefix: usize,
    pub layers: Vec<LayerPlan>,
}

impl SelectionPlan {
    /// A plan selecting every cached index on every layer.
    pub fn full(
        source: PlanSource,
        num_layers: usize,
        num_kv_heads: usize,
        n: usize,
        exact_prefix: usize,
    ) -> Self {
        let all: Vec<usize> = (0..n).collect();
        SelectionPlan {
            source,
            context_len: n,
            exact_prefix,
            layers: (0..num_layers)
                .map(|_| LayerPlan {
                    budget: n,
                    heads: vec![all.clone(); num_kv_heads],
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_kv_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn planned_layers(&self) -> std::ops::Range<usize> {
        self.exact_prefix.min(self.layers.len())..self.layers.len()
    }

    pub fn indices(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.layers[layer].heads[kv_head]
    }

    /// Checks the structural invariants: per-head lists strictly increasing,
    /// bounded by `n`, of length `min(budget, n)`, and every planned budget
    /// at least `k_min` when given.
    pub fn validate(&self, k_min: Option<usize>) -> Result<()> {
        let n = self.context_len;
        let heads = self.num_kv_heads();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != heads {
                return Err(MageError::Plan(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.heads.len()
                )));
            }
            for (h, idx) in layer.heads.iter().enumerate() {
                validate_indices(idx, n)
                    .map_err(|e| MageError::Plan(format!("layer {l} head {h}: {e}")))?;
                if idx.len() != layer.budget.min(n) {
                    return Err(MageError::Plan(format!(
                        "layer {l} head {h}: {} indices for budget {} and n={n}",
                        idx.len(),
                        layer.budget
                    )));
                }
            }
            if let Some(k_min) = k_min {
                if l >= self.exact_prefix && layer.budget < k_min {
                    return Err(MageError::Plan(format!(
                        "layer {l} budget {} below K_min {k_min}",
                        layer.budget
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean selected entries per planned layer and head.
    pub fn mean_planned_budget(&self) -> f64 {
        let r = self.planned_layers();
        if r.is_empty() {
            return self.context_len as f64;
        }
        let count = r.len();
        self.layers[r]
            .iter()
            .map(|l| l.budget.min(self.context_len) as f64)
            .sum::<f64>()
            / count as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# mage-plan source={} n={} layers={} kv_heads={} exact_prefix={}\n",
            self.source,
            self.context_len,
            self.num_layers(),
            self.num_kv_heads(),
            self.exact_prefix
        );
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, idx) in layer.heads.iter().enumerate() {
                let list = if idx.is_empty() {
                    "-".to_string()
                } else {
                    idx.iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                };
                out.push_str(&format!("{l} {h} {} {list}\n", layer.budget));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| MageError::parse(0, "empty plan text"))?;
        let fields = header
            .strip_prefix("# mage-plan ")
            .ok_or_else(|| MageError::parse(0, "missing `# mage-plan` header"))?;
        let mut source = None;
        let mut n = None;
        let mut num_layers = None;
        let mut kv_heads = None;
        let mut prefix = None;
        for kv in fields.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| MageError::parse(0, format!("bad header field `{kv}`")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| MageError::parse(0, format!("bad number in `{kv}`")))
            };
            match k {
                "source" => source = Some(v.parse::<PlanSource>()?),
                "n" => n = Some(num()?),
                "layers" => num_layers = Some(num()?),
                "kv_heads" => kv_heads = Some(num()?),
                "exact_prefix" => prefix = Some(num()?),
                _ => return Err(MageError::parse(0, format!("unknown header field `{k}`"))),
            }
        }
        let missing = |what: &str| MageError::parse(0, format!("header lacks `{what}`"));
        let num_layers = num_layers.ok_or_else(|| missing("layers"))?;
        let kv_heads = kv_heads.ok_or_else(|| missing("kv_heads"))?;
        let mut layers = vec![
            LayerPlan {
                budget: 0,
                heads: vec![Vec::new(); kv_heads],
            };
            num_layers
        ];
        let mut offset = header.len() as u64 + 1;
        for line in lines {
            let line_offset = offset;
            offset += line.len() as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| MageError::parse(line_offset as usize, m.to_string());
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(bad("expected `layer head budget indices`"));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let (l, h, budget) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
            if l >= num_layers || h >= kv_heads {
                return Err(bad("layer/head outside header dimensions"));
            }
            let idx = if parts[3] == "-" {
                Vec::new()
            } else {
                parts[3]
                    .split(',')
                    .map(parse)
                    .collect::<Result<Vec<_>>>()?
            };
            layers[l].budget = budget;
            layers[l].heads[h] = idx;
        }
        Ok(SelectionPlan {
            source: source.ok_or_else(|| missing("source"))?,
            context_len: n.ok_or_else(|| missing("n"))?,
            exact_prefix: prefix.ok_or_else(|| missing("exact_prefix"))?,
            layers,
        })
    }
}
