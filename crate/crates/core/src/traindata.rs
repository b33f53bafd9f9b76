//! Forward-only pieces of sparse-aware self-distillation.
//!
//! A training sequence is laid out as `[x0 ∥ xt]`: the clean text followed
//! by a noisy copy where each block has a random subset replaced by the mask
//! token. Noisy block `i` attends to itself and to the clean blocks strictly
//! before it. The student forward restricts that clean-context read to a
//! Top-P selection computed from an All-[MASK] exact pass; the teacher
//! forward is exact. The loss is cross-entropy plus a weighted KL between
//! the two at masked positions.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};
use crate::tensor::{log_softmax_f64, Matrix};
use crate::toymodel::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub x0: Vec<u32>,
    pub xt: Vec<u32>,
    pub mask_flags: Vec<bool>,
    pub block_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Trailing tokens dropped so the length is a multiple of the block size.
    pub truncated: usize,
}

impl TrainingPair {
    pub fn num_blocks(&self) -> usize {
        self.x0.len() / self.block_size
    }
}

/// Builds a clean/noisy pair. Each block masks `round(mask_ratio·B)`
/// positions drawn from a ChaCha stream keyed by `seed`.
pub fn make_training_pair(
    tokens: &[u32],
    block_size: usize,
    mask_ratio: f64,
    seed: u64,
    mask_token: u32,
) -> Result<TrainingPair> {
    if block_size == 0 {
        return Err(MageError::Config("block_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(MageError::Config(format!("mask_ratio {mask_ratio} outside [0, 1]")));
    }
    if tokens.is_empty() {
        return Err(MageError::Data("empty token sequence".into()));
    }
    let kept = tokens.len() / block_size * block_size;
    if kept == 0 {
        return Err(MageError::Data(format!(
            "{} tokens do not fill one block of {block_size}",
            tokens.len()
        )));
    }
    let x0 = tokens[..kept].to_vec();
    let per_block = ((mask_ratio * block_size as f64).round() as usize).min(block_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask_flags = vec![false; kept];
    for start in (0..kept).step_by(block_size) {
        for i in sample(&mut rng, block_size, per_block) {
            mask_flags[start + i] = true;
        }
    }
    let xt = x0
        .iter()
        .zip(&mask_flags)
        .map(|(&t, &m)| if m { mask_token } else { t })
        .collect();
    Ok(TrainingPair {
        x0,
        xt,
        mask_flags,
        block_size,
        mask_ratio,
        seed,
        truncated: tokens.len() - kept,
    })
}

/// Dense boolean attention mask, `allowed[q][k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    size: usize,
    data: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for q in 0..size {
            for k in 0..size {
                data.push(f(q, k));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.data[q * self.size + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.data[q * self.size..(q + 1) * self.size]
    }

    /// True when every permitted entry of `self` is permitted in `other`.
    pub fn is_submask_of(&self, other: &AttnMask) -> bool {
        self.size == other.size && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Dense 0/1 CSV, one row per query, no header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for q in 0..self.size {
            let line: Vec<&str> = self.row(q).iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Offset block-causal mask over `[x0 ∥ xt]`, `2·num_blocks·B` square.
pub fn offset_block_causal_mask(num_blocks: usize, block_size: usize) -> Result<AttnMask> {
    if num_blocks == 0 || block_size == 0 {
        return Err(MageError::Config("need at least one block of positive size".into()));
    }
    let half = num_blocks * block_size;
    Ok(AttnMask::from_fn(2 * half, |q, k| {
        offset_allowed(half, block_size, q, k)
    }))
}

fn offset_allowed(half: usize, b: usize, q: usize, k: usize) -> bool {
    match (q < half, k < half) {
        (true, true) => k / b <= q / b,
        (true, false) => false,
        (false, true) => k / b < (q - half) / b,
        (false, false) => (k - half) / b == (q - half) / b,
    }
}

/// Smallest set of highest-mass indices (ties → lower index) whose
/// cumulative mass reaches `p`, returned in ascending order. `p = 1` keeps
/// every index with positive mass.
pub fn top_p_select(dist: &[f32], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MageError::Config(format!("top-p threshold {p} outside (0, 1]")));
    }
    let total: f64 = dist.iter().map(|&x| x as f64).sum();
    if dist.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-4 {
        return Err(MageError::Domain(format!("not a distribution (sum {total})")));
    }
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut chosen = Vec::new();
    let mut cum = 0.0f64;
    for i in order {
        if p < 1.0 && cum >= p {
            break;
        }
        cum += dist[i] as f64;
        chosen.push(i);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

/// `ce + λ·kl` over the rows whose target is set. CE uses temperature 1,
/// the KL term `KL(softmax(s/τ) ∥ softmax(t/τ))` uses `τ` and is not
/// rescaled. No targeted rows gives an all-zero loss.
pub fn distill_loss(
    student: &Matrix,
    teacher: &Matrix,
    targets: &[Option<u32>],
    lambda: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    if student.rows() != teacher.rows() || student.cols() != teacher.cols() {
        return Err(MageError::Shape(format!(
            "student {}x{} vs teacher {}x{}",
            student.rows(),
            student.cols(),
            teacher.rows(),
            teacher.cols()
        )));
    }
    if targets.len() != student.rows() {
        return Err(MageError::Shape(format!(
            "{} targets for {} rows",
            targets.len(),
            student.rows()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) || !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(MageError::Config("need tau > 0 and lambda >= 0".into()));
    }
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let t = t as usize;
        if t >= student.cols() {
            return Err(MageError::Domain(format!("target {t} outside vocabulary")));
        }
        ce -= log_softmax_f64(student.row(r), 1.0)[t];
        kl += kl_divergence(student.row(r), teacher.row(r), tau);
        count += 1;
    }
    if count > 0 {
        ce /= count as f64;
        kl /= count as f64;
    }
    Ok(LossBreakdown {
        ce,
        kl,
        total: ce + lambda * kl,
        lambda,
        tau,
    })
}

/// `KL(softmax(p/τ) ∥ softmax(q/τ))`, clamped at zero against rounding.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32], tau: f64) -> f64 {
    let lp = log_softmax_f64(p_logits, tau);
    let lq = log_softmax_f64(q_logits, tau);
    lp.iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// Intermediate results of [`three_stage_forward`].
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    /// Stage-1 input: `xt` with every position replaced by the mask token.
    pub stage1_input: Vec<u32>,
    /// `selected[layer][kv_head][block]`: clean positions noisy block
    /// `block` may read at that layer. Empty for exact-prefix layers.
    pub selected: Vec<Vec<Vec<Vec<usize>>>>,
    /// Logits of the noisy half, `S × V`.
    pub student_logits: Matrix,
    pub teacher_logits: Matrix,
    pub num_blocks: usize,
    pub block_size: usize,
    pub exact_prefix: usize,
}

impl StageArtifacts {
    /// Stage-2 permission mask for one layer and KV head.
    pub fn sparse_mask(&self, layer: usize, kv_head: usize) -> AttnMask {
        let half = self.num_blocks * self.block_size;
        let b = self.block_size;
        let sets: Option<Vec<BTreeSet<usize>>> = (layer >= self.exact_prefix).then(|| {
            self.selected[layer][kv_head]
                .iter()
                .map(|s| s.iter().copied().collect())
                .collect()
        });
        AttnMask::from_fn(2 * half, |q, k| {
            if !offset_allowed(half, b, q, k) {
                return false;
            }
            match &sets {
                Some(sets) if q >= half && k < half => sets[(q - half) / b].contains(&k),
                _ => true,
            }
        })
    }
}

/// Index selection, sparse student forward and exact teacher forward on a
/// training pair, followed by the distillation loss at masked positions.
pub fn three_stage_forward(
    model: &Model,
    pair: &TrainingPair,
    p: f64,
    lambda: f64,
    tau: f64,
) -> Result<(LossBreakdown, StageArtifacts)> {
    let c = model.config();
    if pair.block_size != c.block_size {
        return Err(MageError::Shape(format!(
            "pair block size {} vs model block size {}",
            pair.block_size, c.block_size
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(MageError::Config(format!("top-p threshold {p} outside (0, 1]")));
    }
    let b = c.block_size;
    let nb = pair.num_blocks();
    let half = nb * b;
    if half == 0 || pair.xt.len() != half || pair.mask_flags.len() != half {
        return Err(MageError::Shape("malformed training pair".into()));
    }
    let g = c.group_size();
    let positions: Vec<usize> = (0..half).chain(0..half).collect();
    let dense = |_l: usize, _h: usize, q: usize, k: usize| offset_allowed(half, b, q, k);

    // Stage 1: exact pass with the noisy half fully masked.
    let stage1_input = vec![c.mask_token(); half];
    let ids1: Vec<u32> = pair.x0.iter().chain(&stage1_input).copied().collect();
    let (stage1, teacher) = rayon::join(
        || model.forward_masked(&ids1, &positions, &dense),
        || {
            let ids: Vec<u32> = pair.x0.iter().chain(&pair.xt).copied().collect();
            model.forward_masked(&ids, &positions, &dense)
        },
    );
    let stage1 = stage1?;
    let teacher = teacher?;

    let mut selected = vec![vec![vec![Vec::new(); nb]; c.num_kv_heads]; c.num_layers];
    for (layer, attn) in stage1.attn.iter().enumerate().skip(c.exact_layer_prefix) {
        for (kv, per_block) in selected[layer].iter_mut().enumerate() {
            for (blk, set) in per_block.iter_mut().enumerate() {
                let visible = blk * b;
                if visible == 0 {
                    continue;
                }
                let mut union = BTreeSet::new();
                for head in kv * g..(kv + 1) * g {
                    for q in 0..b {
                        let row = &attn.row(head, half + blk * b + q)[..visible];
                        let mass: f32 = row.iter().sum();
                        if mass <= 0.0 {
                            continue;
                        }
                        let dist: Vec<f32> = row.iter().map(|&x| x / mass).collect();
                        union.extend(top_p_select(&dist, p)?);
                    }
                }
                *set = union.into_iter().collect();
            }
        }
    }
    let sets: Vec<Vec<Vec<BTreeSet<usize>>>> = selected
        .iter()
        .map(|l| l.iter().map(|h| h.iter().map(|s| s.iter().copied().collect()).collect()).collect())
        .collect();

    // Stage 2: sparse clean-context reads for the noisy half.
    let sparse = |layer: usize, head: usize, q: usize, k: usize| {
        if !offset_allowed(half, b, q, k) {
            return false;
        }
        if layer < c.exact_layer_prefix || q < half || k >= half {
            return true;
        }
        sets[layer][head / g][(q - half) / b].contains(&k)
    };
    let ids2: Vec<u32> = pair.x0.iter().chain(&pair.xt).copied().collect();
    let student = model.forward_masked(&ids2, &positions, &sparse)?;

    let noisy_rows = |m: &Matrix| -> Result<Matrix> {
        Matrix::from_vec(half, m.cols(), m.as_slice()[half * m.cols()..].to_vec())
    };
    let student_logits = noisy_rows(&student.logits)?;
    let teacher_logits = noisy_rows(&teacher.logits)?;
    let targets: Vec<Option<u32>> = pair
        .x0
        .iter()
        .zip(&pair.mask_flags)
        .map(|(&t, &m)| m.then_some(t))
        .collect();
    let loss = distill_loss(&student_logits, &teacher_logits, &targets, lambda, tau)?;
    Ok((
        loss,
        StageArtifacts {
            stage1_input,
            selected,
            student_logits,
            teacher_logits,
            num_blocks: nb,
            block_size: b,
            exact_prefix: c.exact_layer_prefix,
        },
    ))
}

/// One JSON object per line.
pub fn write_pairs_jsonl<W: Write>(mut out: W, pairs: &[TrainingPair]) -> Result<()> {
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| MageError::Data(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{build_model, synth_prompt, ModelConfig};

    fn model(seed: u64) -> Model {
        build_model(&ModelConfig {
            exact_layer_prefix: 2,
            block_size: 4,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn pair_extremes_and_determinism() {
        let toks: Vec<u32> = (0..19).collect();
        let p0 = make_training_pair(&toks, 4, 0.0, 3, 99).unwrap();
        assert_eq!(p0.xt, p0.x0);
        assert_eq!(p0.truncated, 3);
        let p1 = make_training_pair(&toks, 4, 1.0, 3, 99).unwrap();
        assert!(p1.xt.iter().all(|&t| t == 99));
        let a = make_training_pair(&toks, 4, 0.5, 11, 99).unwrap();
        let b = make_training_pair(&toks, 4, 0.5, 11, 99).unwrap();
        assert_eq!(a, b);
        for blk in a.mask_flags.chunks(4) {
            assert_eq!(blk.iter().filter(|&&m| m).count(), 2);
        }
        assert!(matches!(make_training_pair(&[], 4, 0.5, 0, 99), Err(MageError::Data(_))));
        assert!(matches!(make_training_pair(&[1, 2], 4, 0.5, 0, 99), Err(MageError::Data(_))));
        assert!(matches!(make_training_pair(&toks, 4, 1.5, 0, 99), Err(MageError::Config(_))));
    }

    #[test]
    fn offset_mask_examples() {
        let m = offset_block_causal_mask(2, 1).unwrap();
        let rows: Vec<Vec<bool>> = (0..4).map(|q| m.row(q).to_vec()).collect();
        let t = true;
        let f = false;
        assert_eq!(
            rows,
            vec![vec![t, f, f, f], vec![t, t, f, f], vec![f, f, t, f], vec![t, f, f, t]]
        );
        let one = offset_block_causal_mask(1, 3).unwrap();
        for q in 3..6 {
            assert_eq!(one.row(q), &[f, f, f, t, t, t]);
        }
        for q in 0..one.size() {
            assert!(one.allowed(q, q));
        }
    }

    #[test]
    fn top_p_examples() {
        assert_eq!(top_p_select(&[0.5, 0.3, 0.15, 0.05], 0.8).unwrap(), vec![0, 1]);
        assert_eq!(top_p_select(&[0.5, 0.3, 0.2, 0.0], 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_p_select(&[0.2, 0.4, 0.4], 1e-9).unwrap(), vec![1]);
        assert!(matches!(top_p_select(&[1.0], 0.0), Err(MageError::Config(_))));
        assert!(matches!(top_p_select(&[0.5], 0.5), Err(MageError::Domain(_))));
    }

    #[test]
    fn loss_examples() {
        let zero = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let l = distill_loss(&zero, &zero, &[Some(0)], 0.5, 1.0).unwrap();
        assert!((l.ce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.kl, 0.0);
        assert_eq!(l.total, l.ce);
        let s = Matrix::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.0, 2.0, 0.5]]).unwrap();
        let l = distill_loss(&s, &t, &[Some(2)], 0.0, 2.0).unwrap();
        assert!(l.kl > 0.0);
        assert_eq!(l.total, l.ce);
        let none = distill_loss(&s, &t, &[None], 1.0, 1.0).unwrap();
        assert_eq!((none.ce, none.kl, none.total), (0.0, 0.0, 0.0));
        assert!(matches!(
            distill_loss(&s, &zero, &[Some(0)], 1.0, 1.0),
            Err(MageError::Shape(_))
        ));
    }

    #[test]
    fn full_coverage_student_matches_teacher() {
        let m = model(7);
        let toks = synth_prompt(m.config(), 16, 1);
        let pair = make_training_pair(&toks, 4, 0.5, 2, m.config().mask_token()).unwrap();
        let (loss, art) = three_stage_forward(&m, &pair, 1.0, 0.5, 1.0).unwrap();
        assert!(art.student_logits.max_abs_diff(&art.teacher_logits) < 1e-6);
        assert!(loss.kl < 1e-9);
        let dense = offset_block_causal_mask(4, 4).unwrap();
        for l in 0..m.config().num_layers {
            for h in 0..m.config().num_kv_heads {
                assert!(art.sparse_mask(l, h).is_submask_of(&dense));
            }
        }
    }

    #[test]
    fn kl_shrinks_toward_full_coverage() {
        let m = model(7);
        let toks = synth_prompt(m.config(), 24, 5);
        let pair = make_training_pair(&toks, 4, 0.5, 9, m.config().mask_token()).unwrap();
        let kls: Vec<f64> = [0.7, 0.9, 1.0]
            .iter()
            .map(|&p| three_stage_forward(&m, &pair, p, 1.0, 1.0).unwrap().0.kl)
            .collect();
        assert!(kls[0] > 0.0);
        assert!(kls.windows(2).all(|w| w[1] <= w[0]), "{kls:?}");
    }

    #[test]
    fn all_masked_pair_feeds_stage_one_unchanged() {
        let m = model(1);
        let toks = synth_prompt(m.config(), 8, 0);
        let pair = make_training_pair(&toks, 4, 1.0, 0, m.config().mask_token()).unwrap();
        let (_, art) = three_stage_forward(&m, &pair, 0.8, 1.0, 1.0).unwrap();
        assert_eq!(art.stage1_input, pair.xt);
    }

    #[test]
    fn unmasked_rows_do_not_matter() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.3, 0.2, 0.1]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
        let targets = [None, Some(1)];
        let base = distill_loss(&s, &t, &targets, 0.7, 1.5).unwrap();
        let s2 = Matrix::from_rows(&[vec![9.0, -3.0, 4.0], vec![0.3, 0.2, 0.1]]).unwrap();
        let t2 = Matrix::from_rows(&[vec![-5.0, 5.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(base, distill_loss(&s2, &t2, &targets, 0.7, 1.5).unwrap());
    }

    #[test]
    fn mask_csv_and_jsonl() {
        let m = offset_block_causal_mask(1, 1).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,0\n0,1\n");
        let pair = make_training_pair(&[1, 2], 2, 0.5, 0, 9).unwrap();
        let mut buf = Vec::new();
        write_pairs_jsonl(&mut buf, &[pair.clone()]).unwrap();
        let back: TrainingPair = serde_json::from_slice(buf.trim_ascii_end()).unwrap();
        assert_eq!(back, pair);
    }

    proptest::proptest! {
        #[test]
        fn kl_nonnegative(a in proptest::collection::vec(-8.0f32..8.0, 5), b in proptest::collection::vec(-8.0f32..8.0, 5), tau in 0.1f64..4.0) {
            proptest::prop_assert!(kl_divergence(&a, &b, tau) >= 0.0);
        }

        #[test]
        fn top_p_is_minimal(raw in proptest::collection::vec(0.0f32..1.0, 1..20), p in 0.01f64..1.0) {
            let total: f32 = raw.iter().sum();
            proptest::prop_assume!(total > 0.1);
            let dist: Vec<f32> = raw.iter().map(|x| x / total).collect();
            let sel = top_p_select(&dist, p).unwrap();
            let mass = |s: &[usize]| s.iter().map(|&i| dist[i] as f64).sum::<f64>();
            let m = mass(&sel);
            proptest::prop_assert!(m >= p - 1e-4 || sel.len() == dist.iter().filter(|&&x| x > 0.0).count());
            // dropping the smallest selected entry falls short
            if let Some(&min) = sel.iter().min_by(|&&a, &&b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))) {
                proptest::prop_assert!(m - (dist[min] as f64) < p);
            }
        }
    }
}
