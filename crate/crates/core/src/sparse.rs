//! Block-sparse attention execution.
//!
//! Each query block walks its selected key blocks in ascending order with a
//! streaming softmax (running max, running normaliser, rescaled accumulator),
//! so per-row state is `O(d_h)` and no `L`-wide score row is materialised.

use rayon::prelude::*;

use crate::attention::{check_mask_grid, AttentionInputs};
use crate::error::{Error, Result};
use crate::selection::BlockMask;
use crate::tensor::{accumulate_rows, Rhs, Tensor};

/// Work actually performed by one sparse pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SparseStats {
    /// Query-key score evaluations, after causal clipping.
    pub score_evals: u64,
}

/// Exact attention restricted to the key blocks selected in `mask`.
pub fn sparse_attention(inp: &AttentionInputs, mask: &BlockMask, block_size: usize) -> Result<Tensor> {
    sparse_attention_with_stats(inp, mask, block_size).map(|(t, _)| t)
}

/// Dense attention through the same streaming kernel, with every causally
/// valid block selected. Used as the like-for-like timing baseline.
pub fn dense_blocked_attention(inp: &AttentionInputs, block_size: usize) -> Result<Tensor> {
    let n = inp.seq_len().div_ceil(block_size.max(1));
    sparse_attention(inp, &BlockMask::full(n, inp.causal()), block_size)
}

pub fn sparse_attention_with_stats(
    inp: &AttentionInputs,
    mask: &BlockMask,
    block_size: usize,
) -> Result<(Tensor, SparseStats)> {
    check_mask_grid(inp.seq_len(), mask, block_size)?;
    let l = inp.seq_len();
    let d = inp.head_dim();
    let mut out = vec![0.0f32; l * d];
    let evals = out
        .par_chunks_mut(block_size * d)
        .enumerate()
        .map(|(qb, out_block)| attend_query_block(inp, mask, block_size, qb, out_block))
        .collect::<Result<Vec<u64>>>()?;
    let stats = SparseStats {
        score_evals: evals.iter().sum(),
    };
    Ok((Tensor::new(vec![l, d], out)?, stats))
}

fn attend_query_block(
    inp: &AttentionInputs,
    mask: &BlockMask,
    block_size: usize,
    qb: usize,
    out: &mut [f32],
) -> Result<u64> {
    let l = inp.seq_len();
    let d = inp.head_dim();
    let causal = inp.causal();
    let scale = inp.logit_scale();
    let k = inp.k().data();
    let v = inp.v().data();
    let r0 = qb * block_size;
    let rows = out.len() / d;
    let q_blk = &inp.q().data()[r0 * d..(r0 + rows) * d];

    let mut run_max = vec![f32::NEG_INFINITY; rows];
    let mut run_sum = vec![0.0f32; rows];
    let mut scores = vec![0.0f32; rows * block_size];
    let mut evals = 0u64;

    for kb in mask.selected(qb) {
        let c0 = kb * block_size;
        let mut c1 = ((kb + 1) * block_size).min(l);
        if causal {
            c1 = c1.min(r0 + rows);
        }
        if c1 <= c0 {
            continue;
        }
        let w = c1 - c0;
        let tile = &mut scores[..rows * w];
        tile.fill(0.0);
        let keys = Rhs::NMajor(&k[c0 * d..c1 * d], d);
        accumulate_rows(q_blk, d, keys, 0..w, tile);

        for (r, row) in tile.chunks_mut(w).enumerate() {
            let i = r0 + r;
            let visible = if causal { (i + 1).saturating_sub(c0).min(w) } else { w };
            if visible == 0 {
                row.fill(0.0);
                continue;
            }
            evals += visible as u64;
            let (live, dead) = row.split_at_mut(visible);
            dead.fill(0.0);
            let mut blk_max = f32::NEG_INFINITY;
            for x in live.iter_mut() {
                *x *= scale;
                blk_max = blk_max.max(*x);
            }
            let new_max = run_max[r].max(blk_max);
            if new_max > run_max[r] && run_max[r] != f32::NEG_INFINITY {
                let corr = (run_max[r] - new_max).exp();
                run_sum[r] *= corr;
                for a in &mut out[r * d..(r + 1) * d] {
                    *a *= corr;
                }
            }
            run_max[r] = new_max;
            let mut sum = 0.0f32;
            for x in live.iter_mut() {
                *x = (*x - new_max).exp();
                sum += *x;
            }
            run_sum[r] += sum;
        }
        accumulate_rows(tile, w, Rhs::KMajor(&v[c0 * d..c1 * d], d), 0..d, out);
    }

    for r in 0..rows {
        if run_sum[r] == 0.0 {
            return Err(Error::EmptyDistribution(format!(
                "query row {} has no key in its selected blocks",
                r0 + r
            )));
        }
        let inv = run_sum[r];
        for a in &mut out[r * d..(r + 1) * d] {
            *a /= inv;
        }
    }
    Ok(evals)
}

/// Mean over rows of `‖sparse − full‖₂ / max(‖full‖₂, 1e-12)`.
pub fn output_error(sparse: &Tensor, full: &Tensor) -> Result<f64> {
    if sparse.dims() != full.dims() {
        return Err(Error::Shape(format!(
            "output shapes differ: {:?} vs {:?}",
            sparse.dims(),
            full.dims()
        )));
    }
    let d = full.cols();
    let rows = full.len() / d;
    let total: f64 = sparse
        .data()
        .chunks(d)
        .zip(full.data().chunks(d))
        .map(|(s, f)| {
            let diff: f64 = s.iter().zip(f).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            let norm: f64 = f.iter().map(|&b| (b as f64).powi(2)).sum();
            diff.sqrt() / norm.sqrt().max(1e-12)
        })
        .sum();
    Ok(total / rows as f64)
}
