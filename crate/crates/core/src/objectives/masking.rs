use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanMaskSpec {
    pub midpoint_prob: f64,
    pub span_len: usize,
}

impl Default for SpanMaskSpec {
    fn default() -> Self {
        SpanMaskSpec {
            midpoint_prob: 0.065,
            span_len: 10,
        }
    }
}

impl SpanMaskSpec {
    /// Expected masked fraction at positions at least one span from either end.
    pub fn interior_coverage(&self) -> f64 {
        1.0 - (1.0 - self.midpoint_prob).powi(self.span_len as i32)
    }
}

/// Every position is a span midpoint with probability `midpoint_prob`; the
/// span covers `[mid - span_len/2, mid - span_len/2 + span_len)`, clipped.
pub fn sample_span_mask(seq_len: usize, spec: &SpanMaskSpec, seed: u64) -> Result<Vec<bool>> {
    if spec.span_len == 0 || seq_len < spec.span_len {
        return Err(Error::Config(format!(
            "span mask needs seq_len >= span_len >= 1 (seq_len {seq_len}, span_len {})",
            spec.span_len
        )));
    }
    if !(0.0..=1.0).contains(&spec.midpoint_prob) {
        return Err(Error::Config(format!("midpoint_prob {} outside [0, 1]", spec.midpoint_prob)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; seq_len];
    let half = spec.span_len / 2;
    for mid in 0..seq_len {
        if rng.gen::<f64>() < spec.midpoint_prob {
            let start = mid.saturating_sub(half);
            let end = (mid + spec.span_len - half).min(seq_len);
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockMaskSpec {
    pub context_frac_range: (f64, f64),
    pub num_pred_blocks: usize,
    pub pred_frac_range: (f64, f64),
    pub min_context_tokens: usize,
    pub allow_overlap: bool,
}

impl Default for BlockMaskSpec {
    fn default() -> Self {
        BlockMaskSpec {
            context_frac_range: (0.85, 1.0),
            num_pred_blocks: 4,
            pred_frac_range: (0.15, 0.20),
            min_context_tokens: 64,
            allow_overlap: false,
        }
    }
}

/// Half-open token interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiBlockMask {
    /// The sampled context region before prediction blocks are removed.
    pub context_block: Block,
    /// Tokens the context encoder sees: the context region minus all
    /// prediction blocks, ascending.
    pub context_indices: Vec<usize>,
    pub pred_blocks: Vec<Block>,
    /// Whether the shrink-to-minimum fallback was needed.
    pub shrunk: bool,
}

impl MultiBlockMask {
    pub fn context_mask(&self, seq_len: usize) -> Vec<bool> {
        let mut m = vec![false; seq_len];
        for &i in &self.context_indices {
            m[i] = true;
        }
        m
    }

    pub fn pred_mask(&self, seq_len: usize) -> Vec<bool> {
        let mut m = vec![false; seq_len];
        for b in &self.pred_blocks {
            m[b.start..b.end()].iter_mut().for_each(|x| *x = true);
        }
        m
    }
}

const MAX_ATTEMPTS: usize = 100;

impl BlockMaskSpec {
    /// Inclusive block-length bounds `[ceil(lo * L), floor(hi * L)]`.
    pub fn pred_len_bounds(&self, seq_len: usize) -> (usize, usize) {
        let lo = (self.pred_frac_range.0 * seq_len as f64 - 1e-9).ceil() as usize;
        let hi = (self.pred_frac_range.1 * seq_len as f64 + 1e-9).floor() as usize;
        (lo.max(1), hi)
    }

    pub fn context_len_bounds(&self, seq_len: usize) -> (usize, usize) {
        let lo = (self.context_frac_range.0 * seq_len as f64 - 1e-9).ceil() as usize;
        let hi = (self.context_frac_range.1 * seq_len as f64 + 1e-9).floor() as usize;
        (lo.max(1), hi.min(seq_len))
    }

    fn validate(&self, seq_len: usize) -> Result<()> {
        let (plo, phi) = self.pred_len_bounds(seq_len);
        let (clo, chi) = self.context_len_bounds(seq_len);
        if self.num_pred_blocks == 0 || plo > phi || clo > chi {
            return Err(Error::Config(format!("block mask ranges empty at seq_len {seq_len}")));
        }
        if !self.allow_overlap && self.num_pred_blocks * plo > seq_len {
            return Err(Error::Config(format!(
                "{} disjoint blocks of {plo} tokens do not fit in {seq_len}",
                self.num_pred_blocks
            )));
        }
        Ok(())
    }
}

fn place(
    seq_len: usize,
    spec: &BlockMaskSpec,
    lens: &[usize],
    ctx_len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<MultiBlockMask> {
    let ctx_start = rng.gen_range(0..=seq_len - ctx_len);
    let context_block = Block {
        start: ctx_start,
        len: ctx_len,
    };
    let mut blocks: Vec<Block> = Vec::with_capacity(lens.len());
    for &len in lens {
        let starts: Vec<usize> = (0..=seq_len - len)
            .filter(|&s| {
                spec.allow_overlap
                    || blocks.iter().all(|b| s + len <= b.start || s >= b.end())
            })
            .collect();
        if starts.is_empty() {
            return None;
        }
        let start = starts[rng.gen_range(0..starts.len())];
        blocks.push(Block { start, len });
    }
    let context_indices: Vec<usize> = (context_block.start..context_block.end())
        .filter(|&i| !blocks.iter().any(|b| b.contains(i)))
        .collect();
    (context_indices.len() >= spec.min_context_tokens).then_some(MultiBlockMask {
        context_block,
        context_indices,
        pred_blocks: blocks,
        shrunk: false,
    })
}

/// JEPA multi-block geometry. Lengths and placements are rejection-sampled
/// up to 100 times; if no draw keeps `min_context_tokens` visible, every
/// prediction block is shrunk to the minimum length and sampling retried,
/// finishing with an evenly spaced deterministic layout.
pub fn sample_multiblock_mask(seq_len: usize, spec: &BlockMaskSpec, seed: u64) -> Result<MultiBlockMask> {
    spec.validate(seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (plo, phi) = spec.pred_len_bounds(seq_len);
    let (clo, chi) = spec.context_len_bounds(seq_len);
    for _ in 0..MAX_ATTEMPTS {
        let lens: Vec<usize> = (0..spec.num_pred_blocks).map(|_| rng.gen_range(plo..=phi)).collect();
        let ctx_len = rng.gen_range(clo..=chi);
        if let Some(m) = place(seq_len, spec, &lens, ctx_len, &mut rng) {
            return Ok(m);
        }
    }
    let lens = vec![plo; spec.num_pred_blocks];
    for _ in 0..MAX_ATTEMPTS {
        let ctx_len = rng.gen_range(clo..=chi);
        if let Some(mut m) = place(seq_len, spec, &lens, ctx_len, &mut rng) {
            m.shrunk = true;
            return Ok(m);
        }
    }
    let gap = seq_len / spec.num_pred_blocks;
    let pred_blocks: Vec<Block> = (0..spec.num_pred_blocks)
        .map(|i| Block { start: i * gap, len: plo })
        .collect();
    let context_block = Block { start: 0, len: chi };
    let context_indices: Vec<usize> = (0..chi)
        .filter(|&i| !pred_blocks.iter().any(|b| b.contains(i)))
        .collect();
    if context_indices.len() < spec.min_context_tokens {
        return Err(Error::Config(format!(
            "block mask infeasible at seq_len {seq_len}: at most {} context tokens remain, {} required",
            context_indices.len(),
            spec.min_context_tokens
        )));
    }
    Ok(MultiBlockMask {
        context_block,
        context_indices,
        pred_blocks,
        shrunk: true,
    })
}
