//! Exact dense attention: the ground truth every sparse result is checked against.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::selection::BlockMask;
use crate::tensor::{accumulate_rows, softmax_in_place, Rhs, Tensor};

/// Query rows processed together when forming a score tile.
const ROW_CHUNK: usize = 8;

/// One attention head: `L × d_h` query, key and value matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    head_dim: usize,
    causal: bool,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Result<Self> {
        let (l, d) = q.matrix_dims()?;
        for (name, t) in [("K", &k), ("V", &v)] {
            if t.matrix_dims()? != (l, d) {
                return Err(Error::Shape(format!("{name} is {:?}, Q is [{l}, {d}]", t.dims())));
            }
        }
        Ok(AttentionInputs {
            q,
            k,
            v,
            head_dim: d,
            causal,
        })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    /// `1/√d_h`, the logit scale shared by every attention path.
    pub fn logit_scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }
}

/// Softmax probabilities for query rows `rows`, one `L`-wide row each.
///
/// `permit(i, j)` decides whether key `j` participates for query `i`; causal
/// masking is already folded in by the caller.
fn probability_rows<P>(inp: &AttentionInputs, rows: Range<usize>, permit: &P) -> Result<Vec<f32>>
where
    P: Fn(usize, usize) -> bool,
{
    let l = inp.seq_len();
    let d = inp.head_dim;
    let cols = if inp.causal { 0..rows.end } else { 0..l };
    let width = cols.len();
    let mut tile = vec![0.0f32; rows.len() * width];
    accumulate_rows(
        &inp.q.data()[rows.start * d..rows.end * d],
        d,
        Rhs::NMajor(inp.k.data(), d),
        cols,
        &mut tile,
    );

    let scale = inp.logit_scale();
    let mut probs = vec![0.0f32; rows.len() * l];
    let mut allowed = vec![false; width];
    for (r, i) in rows.enumerate() {
        let row = &mut probs[r * l..r * l + width];
        for (j, (dst, &s)) in row.iter_mut().zip(&tile[r * width..(r + 1) * width]).enumerate() {
            *dst = s * scale;
            allowed[j] = (!inp.causal || j <= i) && permit(i, j);
        }
        softmax_in_place(row, Some(&allowed))
            .map_err(|_| Error::EmptyDistribution(format!("query row {i} has no permitted key")))?;
    }
    Ok(probs)
}

fn attend_rows<P>(inp: &AttentionInputs, permit: P) -> Result<Tensor>
where
    P: Fn(usize, usize) -> bool + Sync,
{
    let l = inp.seq_len();
    let d = inp.head_dim;
    let v = inp.v.data();
    let mut out = vec![0.0f32; l * d];
    out.par_chunks_mut(ROW_CHUNK * d)
        .enumerate()
        .try_for_each(|(c, out_chunk)| -> Result<()> {
            let r0 = c * ROW_CHUNK;
            let rows = r0..(r0 + ROW_CHUNK).min(l);
            let probs = probability_rows(inp, rows, &permit)?;
            // Long rows lose several digits to rounding in f32, so the
            // reference accumulates in f64.
            let mut acc = vec![0.0f64; d];
            for (p_row, o_row) in probs.chunks(l).zip(out_chunk.chunks_mut(d)) {
                acc.fill(0.0);
                for (j, &p) in p_row.iter().enumerate() {
                    if p != 0.0 {
                        for (a, &vv) in acc.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                            *a += p as f64 * vv as f64;
                        }
                    }
                }
                for (o, a) in o_row.iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
            Ok(())
        })?;
    Tensor::new(vec![l, d], out)
}

/// `softmax(QKᵀ/√d_h) · V`, with an element-wise causal mask when the inputs are causal.
pub fn full_attention(inp: &AttentionInputs) -> Result<Tensor> {
    attend_rows(inp, |_, _| true)
}

/// Dense attention with keys outside the selected blocks masked out before the softmax.
pub fn dense_masked_attention(inp: &AttentionInputs, mask: &BlockMask, block_size: usize) -> Result<Tensor> {
    check_mask_grid(inp.seq_len(), mask, block_size)?;
    attend_rows(inp, |i, j| mask.get(i / block_size, j / block_size))
}

pub(crate) fn check_mask_grid(seq_len: usize, mask: &BlockMask, block_size: usize) -> Result<()> {
    if block_size == 0 {
        return Err(Error::InvalidConfig("block size must be positive".into()));
    }
    let n = seq_len.div_ceil(block_size);
    if mask.n_query_blocks() != n || mask.n_key_blocks() != n {
        return Err(Error::Shape(format!(
            "mask grid is {}×{}, L={seq_len} with B={block_size} needs {n}×{n}",
            mask.n_query_blocks(),
            mask.n_key_blocks()
        )));
    }
    Ok(())
}

/// Exact attention probability mass per (query block, key block), accumulated in `f64`.
///
/// Entry `[qb][kb]` is the sum of softmaxed attention weights over query rows
/// in block `qb` and keys in block `kb`; each row of the grid therefore sums
/// to the number of query rows in that block.
pub fn block_attention_mass(inp: &AttentionInputs, block_size: usize) -> Result<Vec<Vec<f64>>> {
    if block_size == 0 {
        return Err(Error::InvalidConfig("block size must be positive".into()));
    }
    let l = inp.seq_len();
    let n = l.div_ceil(block_size);
    (0..n)
        .into_par_iter()
        .map(|qb| {
            let mut sums = vec![0.0f64; n];
            let end = ((qb + 1) * block_size).min(l);
            let mut r0 = qb * block_size;
            while r0 < end {
                let r1 = (r0 + ROW_CHUNK).min(end);
                let probs = probability_rows(inp, r0..r1, &|_, _| true)?;
                for p_row in probs.chunks(l) {
                    for (j, &p) in p_row.iter().enumerate() {
                        sums[j / block_size] += p as f64;
                    }
                }
                r0 = r1;
            }
            Ok(sums)
        })
        .collect()
}
