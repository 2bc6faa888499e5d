//! Block probabilities, threshold / top-k / top-ratio selection and the block mask.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::scoring::{HeadScorer, SelectionConfig, Strategy, TileScoreMap};
use crate::tensor::{parse_file, write_header, DTYPE_U8};

/// Boolean grid over (query block, key block) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    n_query_blocks: usize,
    n_key_blocks: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(n_query_blocks: usize, n_key_blocks: usize, bits: Vec<bool>) -> Result<Self> {
        if n_query_blocks == 0 || n_key_blocks == 0 || bits.len() != n_query_blocks * n_key_blocks {
            return Err(Error::Shape(format!(
                "{} bits for a {n_query_blocks}×{n_key_blocks} grid",
                bits.len()
            )));
        }
        Ok(BlockMask {
            n_query_blocks,
            n_key_blocks,
            bits,
        })
    }

    /// `n × n` mask with every (causally valid) block selected.
    pub fn full(n: usize, causal: bool) -> Self {
        let bits = (0..n * n).map(|c| !causal || c % n <= c / n).collect();
        BlockMask {
            n_query_blocks: n,
            n_key_blocks: n,
            bits,
        }
    }

    /// Assemble a mask from per-query-block selected key blocks, in row order.
    pub fn from_rows(n_key_blocks: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut bits = vec![false; rows.len() * n_key_blocks];
        for (q, row) in rows.iter().enumerate() {
            for &k in row {
                if k >= n_key_blocks {
                    return Err(Error::Shape(format!("key block {k} out of range {n_key_blocks}")));
                }
                bits[q * n_key_blocks + k] = true;
            }
        }
        BlockMask::new(rows.len(), n_key_blocks, bits)
    }

    pub fn n_query_blocks(&self) -> usize {
        self.n_query_blocks
    }

    pub fn n_key_blocks(&self) -> usize {
        self.n_key_blocks
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n_key_blocks + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.bits[q * self.n_key_blocks + k] = value;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n_key_blocks..(q + 1) * self.n_key_blocks]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Selected key blocks of query block `q`, ascending.
    pub fn selected(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(q).iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Check block-level causality (when `causal`) and that no row is empty.
    pub fn validate(&self, causal: bool) -> Result<()> {
        for q in 0..self.n_query_blocks {
            if !self.row(q).iter().any(|&b| b) {
                return Err(Error::EmptyDistribution(format!("query block {q} selects nothing")));
            }
            if causal && self.selected(q).any(|k| k > q) {
                return Err(Error::InvalidConfig(format!("query block {q} selects a future block")));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(28 + self.bits.len());
        write_header(&mut buf, DTYPE_U8, &[self.n_query_blocks, self.n_key_blocks])
            .expect("writing to a Vec cannot fail");
        buf.extend(self.bits.iter().map(|&b| b as u8));
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (dtype, dims, payload) = parse_file(bytes)?;
        if dtype != DTYPE_U8 || dims.len() != 2 {
            return Err(Error::Format(format!(
                "block mask needs a 2-D u8 payload, got dtype {dtype} with dims {dims:?}"
            )));
        }
        let bits = payload
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        BlockMask::new(dims[0], dims[1], bits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        BlockMask::decode(&bytes)
    }
}

/// Aggregate tile probabilities into a distribution over key blocks.
///
/// Each unmasked tile row is a distribution; the block distribution is their
/// average, so it sums to one.
pub fn block_probs(ts: &TileScoreMap, block_size: usize, stride: usize) -> Vec<f64> {
    let n_tiles = ts.prob.cols();
    let tiles_per_block = block_size / stride;
    let n_blocks = n_tiles.div_ceil(tiles_per_block);
    let mut p = vec![0.0f64; n_blocks];
    let rows = ts.unmasked_rows();
    if rows == 0 {
        return p;
    }
    for row in ts.prob.data().chunks(n_tiles) {
        for (n, &v) in row.iter().enumerate() {
            p[n / tiles_per_block] += v as f64;
        }
    }
    for v in &mut p {
        *v /= rows as f64;
    }
    p
}

/// Block indices sorted by probability, highest first, ties to the lower index.
fn ranked(p: &[f64], candidates: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.min(p.len())).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

fn finish(chosen: &[bool]) -> Vec<usize> {
    chosen.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect()
}

/// Smallest superset of `forced` whose probability mass reaches `tau`.
///
/// Forced blocks count first; the rest are added greedily by descending
/// probability. Blocks with zero probability are never added, so `tau = 1`
/// selects exactly the blocks with positive mass.
pub fn find_blocks(p: &[f64], tau: f64, forced: &[usize]) -> Result<Vec<usize>> {
    if p.is_empty() {
        return Err(Error::EmptyDistribution("no blocks to select from".into()));
    }
    let mut chosen = vec![false; p.len()];
    let mut mass = 0.0f64;
    for &f in forced {
        if f < p.len() && !chosen[f] {
            chosen[f] = true;
            mass += p[f];
        }
    }
    let full = tau >= 1.0;
    for idx in ranked(p, p.len()) {
        if (!full && mass >= tau) || p[idx] <= 0.0 {
            break;
        }
        if !chosen[idx] {
            chosen[idx] = true;
            mass += p[idx];
        }
    }
    Ok(finish(&chosen))
}

fn select_top(p: &[f64], count: usize, forced: &[usize], n_valid: usize) -> Vec<usize> {
    let mut chosen = vec![false; p.len()];
    for idx in ranked(p, n_valid).into_iter().take(count) {
        chosen[idx] = true;
    }
    for &f in forced {
        if f < p.len() {
            chosen[f] = true;
        }
    }
    finish(&chosen)
}

/// The `k` most probable blocks among the first `n_valid`, plus `forced`.
pub fn select_topk(p: &[f64], k: usize, forced: &[usize], n_valid: usize) -> Vec<usize> {
    let n_valid = n_valid.min(p.len());
    select_top(p, k.min(n_valid), forced, n_valid)
}

/// The most probable `ceil(ratio · n_valid)` blocks among the first `n_valid`, plus `forced`.
pub fn select_topratio(p: &[f64], ratio: f64, forced: &[usize], n_valid: usize) -> Vec<usize> {
    let n_valid = n_valid.min(p.len());
    // The epsilon keeps products like 0.27 · 100 = 27.000000000000004 at 27.
    let count = ((ratio * n_valid as f64) - 1e-9).ceil().max(1.0) as usize;
    select_top(p, count.min(n_valid), forced, n_valid)
}

/// Query blocks scored together by [`block_prob_rows`].
const SCORE_GROUP: usize = 16;

/// Block probabilities for every query block of one head.
pub fn block_prob_rows(inp: &AttentionInputs, cfg: &SelectionConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.causal != inp.causal() {
        return Err(Error::InvalidConfig(format!(
            "selection causal={} but inputs causal={}",
            cfg.causal,
            inp.causal()
        )));
    }
    let scorer = HeadScorer::new(inp, cfg)?;
    let n = scorer.n_blocks();
    let groups: Vec<Range<usize>> = (0..n)
        .step_by(SCORE_GROUP)
        .map(|b| b..(b + SCORE_GROUP).min(n))
        .collect();
    let per_group = groups
        .into_par_iter()
        .map(|g| scorer.block_probs_run(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_group.into_iter().flatten().collect())
}

/// Apply the configured strategy and forced-block policy to precomputed block probabilities.
pub fn mask_from_probs(probs: &[Vec<f64>], cfg: &SelectionConfig) -> Result<BlockMask> {
    cfg.validate()?;
    let n = probs.len();
    let rows = probs
        .iter()
        .enumerate()
        .map(|(b, p)| {
            let mut forced = Vec::with_capacity(2);
            if cfg.force_diagonal_block {
                forced.push(b);
            }
            if cfg.force_first_block {
                forced.push(0);
            }
            let n_valid = if cfg.causal { b + 1 } else { n };
            let mut sel = match cfg.strategy {
                Strategy::Threshold => find_blocks(p, cfg.tau, &forced)?,
                Strategy::TopK(k) => select_topk(p, k, &forced, n_valid),
                Strategy::TopRatio(r) => select_topratio(p, r, &forced, n_valid),
            };
            sel.retain(|&k| k < n_valid);
            Ok(sel)
        })
        .collect::<Result<Vec<_>>>()?;
    BlockMask::from_rows(n, &rows)
}

/// Score, aggregate and select every query block of one head.
pub fn build_mask(inp: &AttentionInputs, cfg: &SelectionConfig) -> Result<BlockMask> {
    let probs = block_prob_rows(inp, cfg)?;
    mask_from_probs(&probs, cfg)
}

/// Selected blocks over causally valid blocks (all blocks when not causal).
pub fn density(mask: &BlockMask, causal: bool) -> f64 {
    let nq = mask.n_query_blocks();
    let nk = mask.n_key_blocks();
    let (mut selected, mut valid) = (0usize, 0usize);
    for q in 0..nq {
        for k in 0..nk {
            if !causal || k <= q {
                valid += 1;
                selected += mask.get(q, k) as usize;
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        selected as f64 / valid as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Pattern;
    use crate::tensor::Tensor;

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .unwrap()
    }

    fn inputs(l: usize, d: usize, causal: bool, seed: u64) -> AttentionInputs {
        AttentionInputs::new(mat(l, d, seed), mat(l, d, seed + 1), mat(l, d, seed + 2), causal).unwrap()
    }

    #[test]
    fn find_blocks_cumulative_example() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(find_blocks(&p, 0.9, &[]).unwrap(), vec![0, 1, 2]);
        assert_eq!(find_blocks(&p, 0.5, &[]).unwrap(), vec![0]);
        assert_eq!(find_blocks(&p, 0.9, &[3]).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(find_blocks(&p, 0.5, &[1]).unwrap(), vec![0, 1]);
        assert!(find_blocks(&[], 0.5, &[]).is_err());
    }

    #[test]
    fn find_blocks_full_mass_skips_zero_blocks() {
        let p = [0.4, 0.0, 0.35, 0.25, 0.0];
        assert_eq!(find_blocks(&p, 1.0, &[]).unwrap(), vec![0, 2, 3]);
        assert_eq!(find_blocks(&p, 1.0, &[4]).unwrap(), vec![0, 2, 3, 4]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let p = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(find_blocks(&p, 0.5, &[]).unwrap(), vec![0, 1]);
        assert_eq!(select_topk(&p, 1, &[], 4), vec![0]);
    }

    #[test]
    fn topk_and_topratio() {
        let p = [0.1, 0.4, 0.2, 0.3];
        assert_eq!(select_topk(&p, 4, &[], 4), vec![0, 1, 2, 3]);
        assert_eq!(select_topk(&p, 9, &[], 4), vec![0, 1, 2, 3]);
        assert_eq!(select_topk(&p, 1, &[], 4), vec![1]);
        assert_eq!(select_topk(&p, 1, &[0], 4), vec![0, 1]);
        assert_eq!(select_topk(&p, 2, &[], 3), vec![1, 2]);
        let flat = vec![0.01; 100];
        assert_eq!(select_topratio(&flat, 0.27, &[], 100).len(), 27);
        assert_eq!(select_topratio(&flat, 0.001, &[], 100).len(), 1);
        assert_eq!(select_topratio(&p, 0.5, &[], 4), vec![1, 3]);
    }

    #[test]
    fn block_probs_aggregation() {
        // Two tile rows over four tiles, two tiles per block.
        let prob = Tensor::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let ts = TileScoreMap {
            query_block: 0,
            raw: prob.clone(),
            prob,
            allowed: vec![true; 8],
        };
        assert_eq!(block_probs(&ts, 8, 4), vec![0.5, 0.5]);

        let prob = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let ts = TileScoreMap {
            query_block: 0,
            raw: prob.clone(),
            prob,
            allowed: vec![true; 8],
        };
        assert_eq!(block_probs(&ts, 8, 4), vec![0.0, 1.0]);
    }

    #[test]
    fn tau_one_causal_is_lower_triangular() {
        let inp = inputs(64, 8, true, 3);
        let cfg = SelectionConfig {
            block_size: 16,
            stride: 4,
            tau: 1.0,
            ..SelectionConfig::default()
        };
        let mask = build_mask(&inp, &cfg).unwrap();
        assert_eq!(mask, BlockMask::full(4, true));
        assert_eq!(density(&mask, true), 1.0);
    }

    #[test]
    fn single_block_mask() {
        for pattern in [Pattern::Antidiagonal, Pattern::Diagonal, Pattern::FullSum] {
            let inp = inputs(16, 4, false, 5);
            let cfg = SelectionConfig {
                block_size: 16,
                stride: 4,
                tau: 0.1,
                causal: false,
                force_diagonal_block: false,
                pattern,
                ..SelectionConfig::default()
            };
            let mask = build_mask(&inp, &cfg).unwrap();
            assert_eq!(mask, BlockMask::full(1, false));
        }
    }

    #[test]
    fn causal_mismatch_rejected() {
        let inp = inputs(16, 4, false, 5);
        let cfg = SelectionConfig {
            block_size: 8,
            stride: 4,
            ..SelectionConfig::default()
        };
        assert!(matches!(build_mask(&inp, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn density_closed_forms() {
        let n = 6;
        let rows: Vec<Vec<usize>> = (0..n).map(|q| vec![q]).collect();
        let diag = BlockMask::from_rows(n, &rows).unwrap();
        let want = n as f64 / (n * (n + 1) / 2) as f64;
        assert!((density(&diag, true) - want).abs() < 1e-15);
        assert_eq!(density(&BlockMask::full(n, true), true), 1.0);
        assert!((density(&diag, false) - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn mask_file_round_trip() {
        let mask = BlockMask::from_rows(3, &[vec![0], vec![0, 1], vec![2]]).unwrap();
        let bytes = mask.encode();
        assert_eq!(bytes[8], 2);
        assert_eq!(&bytes[28..], &[1, 0, 0, 1, 1, 0, 0, 0, 1]);
        assert_eq!(BlockMask::decode(&bytes).unwrap(), mask);
        let mut bad = bytes.clone();
        bad[30] = 3;
        assert!(matches!(BlockMask::decode(&bad), Err(Error::Format(_))));
        let tensor_bytes = crate::tensor::encode_tensor(&Tensor::zeros(vec![2, 2]).unwrap());
        assert!(BlockMask::decode(&tensor_bytes).is_err());
    }

    #[test]
    fn validate_catches_empty_and_future() {
        let mask = BlockMask::from_rows(2, &[vec![0], vec![]]).unwrap();
        assert!(mask.validate(true).is_err());
        let mask = BlockMask::from_rows(2, &[vec![1], vec![1]]).unwrap();
        assert!(mask.validate(true).is_err());
        assert!(mask.validate(false).is_ok());
    }
}
