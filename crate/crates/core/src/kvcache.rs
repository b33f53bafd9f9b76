//! Append-only key/value cache with per-head indexed gather and page-level
//! min/max key metadata (used by the Quest baseline).
//!
//! Layout per layer is `[position][kv_head][dim]`, row-major.

use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};

/// Keys and values produced by one forward pass for a contiguous run of
/// positions, one slab per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvSlab {
    pub len: usize,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerStore {
    keys: Vec<f32>,
    values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    num_kv_heads: usize,
    head_dim: usize,
    len: usize,
    layers: Vec<LayerStore>,
}

impl KvCache {
    pub fn new(num_layers: usize, num_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            num_kv_heads,
            head_dim,
            len: 0,
            layers: vec![
                LayerStore {
                    keys: Vec::new(),
                    values: Vec::new(),
                };
                num_layers
            ],
        }
    }

    /// Number of cached token positions (`n`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Appends one slab per layer. All slabs must cover the same number of
    /// positions; existing entries are never touched.
    pub fn append(&mut self, slabs: &[KvSlab]) -> Result<()> {
        if slabs.len() != self.layers.len() {
            return Err(MageError::Shape(format!(
                "append got {} layer slabs, cache has {} layers",
                slabs.len(),
                self.layers.len()
            )));
        }
        let width = slabs.first().map_or(0, |s| s.len);
        let row = self.num_kv_heads * self.head_dim;
        for (l, s) in slabs.iter().enumerate() {
            if s.len != width {
                return Err(MageError::Shape(format!(
                    "layer {l} slab covers {} positions, layer 0 covers {width}",
                    s.len
                )));
            }
            if s.keys.len() != width * row || s.values.len() != width * row {
                return Err(MageError::Shape(format!(
                    "layer {l} slab payload does not match {width}x{}x{}",
                    self.num_kv_heads, self.head_dim
                )));
            }
        }
        for (store, s) in self.layers.iter_mut().zip(slabs) {
            store.keys.extend_from_slice(&s.keys);
            store.values.extend_from_slice(&s.values);
        }
        self.len += width;
        Ok(())
    }

    #[inline]
    fn offset(&self, pos: usize, kv_head: usize) -> usize {
        (pos * self.num_kv_heads + kv_head) * self.head_dim
    }

    #[inline]
    pub fn key(&self, layer: usize, pos: usize, kv_head: usize) -> &[f32] {
        let o = self.offset(pos, kv_head);
        &self.layers[layer].keys[o..o + self.head_dim]
    }

    #[inline]
    pub fn value(&self, layer: usize, pos: usize, kv_head: usize) -> &[f32] {
        let o = self.offset(pos, kv_head);
        &self.layers[layer].values[o..o + self.head_dim]
    }

    fn check_head(&self, layer: usize, kv_head: usize) -> Result<()> {
        if layer >= self.layers.len() || kv_head >= self.num_kv_heads {
            return Err(MageError::Plan(format!(
                "layer {layer} / kv head {kv_head} outside cache of {} layers x {} heads",
                self.layers.len(),
                self.num_kv_heads
            )));
        }
        Ok(())
    }

    /// Copies the keys and values at `indices` (strictly increasing, all
    /// `< len`) for one layer and KV head, returned as `m × d` row-major.
    pub fn gather(
        &self,
        layer: usize,
        kv_head: usize,
        indices: &[usize],
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        self.check_head(layer, kv_head)?;
        validate_indices(indices, self.len)?;
        let mut keys = Vec::with_capacity(indices.len() * self.head_dim);
        let mut values = Vec::with_capacity(indices.len() * self.head_dim);
        for &i in indices {
            keys.extend_from_slice(self.key(layer, i, kv_head));
            values.extend_from_slice(self.value(layer, i, kv_head));
        }
        Ok((keys, values))
    }

    /// Truncates to the first `len` positions. Only used to roll back
    /// speculative state in tests and tools; decoding never shrinks a cache.
    pub fn truncated(&self, len: usize) -> KvCache {
        let len = len.min(self.len);
        let row = self.num_kv_heads * self.head_dim;
        KvCache {
            num_kv_heads: self.num_kv_heads,
            head_dim: self.head_dim,
            len,
            layers: self
                .layers
                .iter()
                .map(|s| LayerStore {
                    keys: s.keys[..len * row].to_vec(),
                    values: s.values[..len * row].to_vec(),
                })
                .collect(),
        }
    }
}

/// Checks that `indices` is strictly increasing and bounded by `n`.
pub fn validate_indices(indices: &[usize], n: usize) -> Result<()> {
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            return Err(MageError::Plan(format!(
                "indices must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= n {
            return Err(MageError::Plan(format!(
                "index {last} out of range for cache of length {n}"
            )));
        }
    }
    Ok(())
}

/// Elementwise min/max key bounds for every page of `page_size` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PageMeta {
    page_size: usize,
    num_pages: usize,
    num_kv_heads: usize,
    head_dim: usize,
    cache_len: usize,
    /// `[layer][kv_head][page]` → (min, max), each `head_dim` long.
    bounds: Vec<Vec<Vec<(Vec<f32>, Vec<f32>)>>>,
}

impl PageMeta {
    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn num_pages(&self) -> usize {
        self.num_pages
    }

    pub fn cache_len(&self) -> usize {
        self.cache_len
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn min(&self, layer: usize, kv_head: usize, page: usize) -> &[f32] {
        &self.bounds[layer][kv_head][page].0
    }

    pub fn max(&self, layer: usize, kv_head: usize, page: usize) -> &[f32] {
        &self.bounds[layer][kv_head][page].1
    }

    /// Token positions covered by `page`; the last page may be partial.
    pub fn page_range(&self, page: usize) -> std::ops::Range<usize> {
        let start = page * self.page_size;
        start..((page + 1) * self.page_size).min(self.cache_len)
    }
}

pub fn build_page_meta(cache: &KvCache, page_size: usize) -> Result<PageMeta> {
    if page_size == 0 {
        return Err(MageError::Config("page size must be at least 1".into()));
    }
    let n = cache.len();
    let d = cache.head_dim();
    let num_pages = n.div_ceil(page_size);
    let bounds = (0..cache.num_layers())
        .map(|l| {
            (0..cache.num_kv_heads())
                .map(|h| {
                    (0..num_pages)
                        .map(|p| {
                            let mut lo = vec![f32::INFINITY; d];
                            let mut hi = vec![f32::NEG_INFINITY; d];
                            for pos in p * page_size..((p + 1) * page_size).min(n) {
                                for (j, &k) in cache.key(l, pos, h).iter().enumerate() {
                                    lo[j] = lo[j].min(k);
                                    hi[j] = hi[j].max(k);
                                }
                            }
                            (lo, hi)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(PageMeta {
        page_size,
        num_pages,
        num_kv_heads: cache.num_kv_heads(),
        head_dim: d,
        cache_len: n,
        bounds,
    })
}
