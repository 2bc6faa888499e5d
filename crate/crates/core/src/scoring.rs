//! Tile importance scores.
//!
//! The score map `QKᵀ` is cut into `S × S` tiles. Each tile is summarised by
//! the sum of `S` of its entries, one per tile row and tile column. For the
//! antidiagonal pattern those are the entries with local coordinates
//! `(S-1-i, i)`. Reordering the `S` query rows of each tile (reversed) and
//! keeping the key rows in order turns all tile sums into one product of
//! `(S·d_h)`-wide rows, so scoring costs `1/S` of the dense score map.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::tensor::{accumulate_rows, softmax_in_place, Rhs, Tensor};

/// How the per-block selection budget is decided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Smallest set of blocks whose probability mass reaches `tau`.
    Threshold,
    /// The `K` most probable blocks.
    TopK(usize),
    /// The most probable `ceil(r · n_valid)` blocks.
    TopRatio(f64),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Threshold => write!(f, "threshold"),
            Strategy::TopK(k) => write!(f, "topk:{k}"),
            Strategy::TopRatio(r) => write!(f, "topratio:{r}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Parses `threshold`, `topk:K` or `topratio:R`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let bad = || Error::InvalidConfig(format!("bad strategy `{s}`"));
        match (name.to_ascii_lowercase().as_str(), param) {
            ("threshold", None) => Ok(Strategy::Threshold),
            ("topk", Some(p)) => p.parse().map(Strategy::TopK).map_err(|_| bad()),
            ("topratio", Some(p)) => p.parse().map(Strategy::TopRatio).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Which entries of each `S × S` tile are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Pattern {
    Antidiagonal,
    Diagonal,
    /// A seeded random permutation, shared by every tile of a run.
    Random {
        seed: u64,
    },
    /// All `S²` entries (mean pooling), rescaled to the magnitude of `S` entries.
    FullSum,
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Antidiagonal => "antidiagonal",
            Pattern::Diagonal => "diagonal",
            Pattern::Random { .. } => "random",
            Pattern::FullSum => "fullsum",
        }
    }

    /// For each tile column `i`, the tile row whose entry is summed.
    /// `None` for [`Pattern::FullSum`], which sums everything.
    pub fn row_offsets(&self, stride: usize) -> Option<Vec<usize>> {
        match *self {
            Pattern::Antidiagonal => Some((0..stride).map(|i| stride - 1 - i).collect()),
            Pattern::Diagonal => Some((0..stride).collect()),
            Pattern::Random { seed } => {
                let mut perm: Vec<usize> = (0..stride).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Some(perm)
            }
            Pattern::FullSum => None,
        }
    }

    /// Local `(row, col)` positions the pattern reads inside one tile.
    pub fn positions(&self, stride: usize) -> Vec<(usize, usize)> {
        match self.row_offsets(stride) {
            Some(rows) => rows.into_iter().enumerate().map(|(c, r)| (r, c)).collect(),
            None => (0..stride).flat_map(|r| (0..stride).map(move |c| (r, c))).collect(),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Random { seed } => write!(f, "random:{seed}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    /// Parses `antidiagonal`, `diagonal`, `random[:SEED]` or `fullsum`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        match (name.to_ascii_lowercase().as_str(), param) {
            ("antidiagonal", None) => Ok(Pattern::Antidiagonal),
            ("diagonal", None) => Ok(Pattern::Diagonal),
            ("fullsum", None) => Ok(Pattern::FullSum),
            ("random", None) => Ok(Pattern::Random { seed: 0 }),
            ("random", Some(p)) => p
                .parse()
                .map(|seed| Pattern::Random { seed })
                .map_err(|_| Error::InvalidConfig(format!("bad random seed in `{s}`"))),
            _ => Err(Error::InvalidConfig(format!("unknown pattern `{s}`"))),
        }
    }
}

impl TryFrom<String> for Pattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> String {
        p.to_string()
    }
}

/// Block size, stride, threshold and selection policy for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub block_size: usize,
    pub stride: usize,
    pub tau: f64,
    pub strategy: Strategy,
    pub pattern: Pattern,
    pub causal: bool,
    pub force_diagonal_block: bool,
    pub force_first_block: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            block_size: 128,
            stride: 8,
            tau: 0.9,
            strategy: Strategy::Threshold,
            pattern: Pattern::Antidiagonal,
            causal: true,
            force_diagonal_block: true,
            force_first_block: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.block_size < self.stride || !self.block_size.is_multiple_of(self.stride) {
            return bad(format!(
                "block size {} must be a positive multiple of stride {}",
                self.block_size, self.stride
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        match self.strategy {
            Strategy::TopK(0) => bad("top-k needs K >= 1".into()),
            Strategy::TopRatio(r) if !(r > 0.0 && r <= 1.0) => bad(format!("ratio {r} outside (0, 1]")),
            _ => Ok(()),
        }
    }

    /// Tile rows per block.
    pub fn tiles_per_block(&self) -> usize {
        self.block_size / self.stride
    }
}

/// Tile scores of one query block.
///
/// `raw` and `prob` are `(B/S) × (L_pad/S)`. `allowed` marks tiles that take
/// part in the softmax; the rest (strictly future tiles, tile rows made only
/// of padding) have `prob == 0` and `raw == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileScoreMap {
    pub query_block: usize,
    pub raw: Tensor,
    pub prob: Tensor,
    pub allowed: Vec<bool>,
}

impl TileScoreMap {
    /// Number of tile rows with at least one unmasked tile.
    pub fn unmasked_rows(&self) -> usize {
        let n = self.prob.cols();
        self.allowed.chunks(n).filter(|r| r.iter().any(|&a| a)).count()
    }
}

/// Precomputed reshaped operands for scoring every query block of one head.
pub struct HeadScorer<'a> {
    inp: &'a AttentionInputs,
    cfg: SelectionConfig,
    n_tiles: usize,
    width: usize,
    /// `n_tiles × width` reordered (or pooled) query rows.
    q_rows: Vec<f32>,
    /// `n_tiles × width` reshaped (or pooled) key rows.
    k_rows: Vec<f32>,
    scale: f32,
}

impl<'a> HeadScorer<'a> {
    pub fn new(inp: &'a AttentionInputs, cfg: &SelectionConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stride;
        let d = inp.head_dim();
        let l = inp.seq_len();
        let n_tiles = l.div_ceil(s);
        let q = inp.q().data();
        let k = inp.k().data();

        // Padded rows are zero, so they add nothing to real tile sums.
        let row = |data: &'a [f32], r: usize| -> Option<&'a [f32]> { (r < l).then(|| &data[r * d..(r + 1) * d]) };

        let (width, q_rows, k_rows) = match cfg.pattern.row_offsets(s) {
            Some(offsets) => {
                let width = s * d;
                let mut qr = vec![0.0f32; n_tiles * width];
                let mut kr = vec![0.0f32; n_tiles * width];
                for t in 0..n_tiles {
                    for (i, &off) in offsets.iter().enumerate() {
                        let dst = t * width + i * d;
                        if let Some(src) = row(q, t * s + off) {
                            qr[dst..dst + d].copy_from_slice(src);
                        }
                        if let Some(src) = row(k, t * s + i) {
                            kr[dst..dst + d].copy_from_slice(src);
                        }
                    }
                }
                (width, qr, kr)
            }
            None => {
                let mut qr = vec![0.0f32; n_tiles * d];
                let mut kr = vec![0.0f32; n_tiles * d];
                for t in 0..n_tiles {
                    for i in 0..s {
                        if let Some(src) = row(q, t * s + i) {
                            for (a, b) in qr[t * d..(t + 1) * d].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                        if let Some(src) = row(k, t * s + i) {
                            for (a, b) in kr[t * d..(t + 1) * d].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                }
                (d, qr, kr)
            }
        };

        let mut scale = 1.0 / ((d as f32).sqrt() * s as f32);
        if cfg.pattern == Pattern::FullSum {
            // Sum of S² entries brought to the magnitude of S entries.
            scale /= s as f32;
        }
        Ok(HeadScorer {
            inp,
            cfg: cfg.clone(),
            n_tiles,
            width,
            q_rows,
            k_rows,
            scale,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.inp.seq_len().div_ceil(self.cfg.block_size)
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn score_block(&self, b: usize) -> Result<TileScoreMap> {
        Ok(self.score_blocks(b..b + 1)?.remove(0))
    }

    /// Scaled tile products for the tile rows of a run of consecutive query
    /// blocks, computed with one product so the key operand is streamed once.
    /// Returns the first tile row, the number of live tile rows, the number of
    /// computed columns and the `live × cols` products.
    fn tile_products(&self, blocks: &Range<usize>) -> Result<(usize, usize, usize, Vec<f32>)> {
        let n_blocks = self.n_blocks();
        if blocks.is_empty() || blocks.end > n_blocks {
            return Err(Error::InvalidConfig(format!(
                "query blocks {blocks:?} out of range ({n_blocks} blocks)"
            )));
        }
        let rows_per_block = self.cfg.tiles_per_block();
        let n = self.n_tiles;
        let first = blocks.start * rows_per_block;
        // Tile rows that hold at least one real query.
        let live = n.saturating_sub(first).min(blocks.len() * rows_per_block);
        // Tile (t, n) is strictly in the future iff n > t.
        let cols = if self.cfg.causal { (first + live).min(n) } else { n };
        let mut tile = vec![0.0f32; live * cols];
        accumulate_rows(
            &self.q_rows[first * self.width..(first + live) * self.width],
            self.width,
            Rhs::NMajor(&self.k_rows, self.width),
            0..cols,
            &mut tile,
        );
        for x in &mut tile {
            *x *= self.scale;
        }
        Ok((first, live, cols, tile))
    }

    /// Number of tiles of tile row `t` that take part in its softmax.
    fn row_limit(&self, t: usize) -> usize {
        if self.cfg.causal {
            t + 1
        } else {
            self.n_tiles
        }
    }

    /// Tile scores for a run of consecutive query blocks.
    pub fn score_blocks(&self, blocks: Range<usize>) -> Result<Vec<TileScoreMap>> {
        let (first, _, cols, tile) = self.tile_products(&blocks)?;
        let rows_per_block = self.cfg.tiles_per_block();
        let n = self.n_tiles;
        blocks
            .map(|b| {
                let mut raw = vec![0.0f32; rows_per_block * n];
                let mut allowed = vec![false; rows_per_block * n];
                let mut prob = vec![0.0f32; rows_per_block * n];
                for m in 0..rows_per_block {
                    let t = b * rows_per_block + m;
                    if t >= n {
                        break;
                    }
                    let limit = self.row_limit(t);
                    let dst = m * n..m * n + limit;
                    raw[dst.clone()].copy_from_slice(&tile[(t - first) * cols..(t - first) * cols + limit]);
                    allowed[dst.clone()].fill(true);
                    prob[dst.clone()].copy_from_slice(&raw[dst.clone()]);
                    softmax_in_place(&mut prob[dst], None)?;
                }
                Ok(TileScoreMap {
                    query_block: b,
                    raw: Tensor::new(vec![rows_per_block, n], raw)?,
                    prob: Tensor::new(vec![rows_per_block, n], prob)?,
                    allowed,
                })
            })
            .collect()
    }

    /// Block probabilities for a run of query blocks without materialising
    /// the tile maps. Same values as [`crate::selection::block_probs`] on
    /// [`HeadScorer::score_blocks`].
    pub fn block_probs_run(&self, blocks: Range<usize>) -> Result<Vec<Vec<f64>>> {
        let (first, _, cols, mut tile) = self.tile_products(&blocks)?;
        let rows_per_block = self.cfg.tiles_per_block();
        let n = self.n_tiles;
        let n_key_blocks = n.div_ceil(rows_per_block);
        blocks
            .map(|b| {
                let mut p = vec![0.0f64; n_key_blocks];
                let mut rows = 0usize;
                for m in 0..rows_per_block {
                    let t = b * rows_per_block + m;
                    if t >= n {
                        break;
                    }
                    rows += 1;
                    let row = &mut tile[(t - first) * cols..(t - first) * cols + self.row_limit(t)];
                    softmax_in_place(row, None)?;
                    for (c, &v) in row.iter().enumerate() {
                        p[c / rows_per_block] += v as f64;
                    }
                }
                if rows > 0 {
                    for v in &mut p {
                        *v /= rows as f64;
                    }
                }
                Ok(p)
            })
            .collect()
    }
}

/// Strided antidiagonal tile scores for query block `b`.
pub fn antidiagonal_tile_scores(inp: &AttentionInputs, cfg: &SelectionConfig, b: usize) -> Result<TileScoreMap> {
    if cfg.pattern != Pattern::Antidiagonal {
        return Err(Error::InvalidConfig(format!(
            "antidiagonal scoring called with pattern {}",
            cfg.pattern
        )));
    }
    HeadScorer::new(inp, cfg)?.score_block(b)
}

/// Tile scores for the ablation baselines: diagonal, random permutation and full-sum pooling.
pub fn baseline_tile_scores(inp: &AttentionInputs, cfg: &SelectionConfig, b: usize) -> Result<TileScoreMap> {
    if cfg.pattern == Pattern::Antidiagonal {
        return Err(Error::InvalidConfig(
            "baseline scoring called with the antidiagonal pattern".into(),
        ));
    }
    HeadScorer::new(inp, cfg)?.score_block(b)
}

/// Whether a set of tile positions touches every row and every column of an `S × S` tile.
pub fn pattern_coverage_check(positions: &[(usize, usize)], stride: usize) -> bool {
    let mut rows = vec![false; stride];
    let mut cols = vec![false; stride];
    for &(r, c) in positions {
        if r >= stride || c >= stride {
            return false;
        }
        rows[r] = true;
        cols[c] = true;
    }
    rows.iter().chain(&cols).all(|&x| x)
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn cfg(b: usize, s: usize, causal: bool) -> SelectionConfig {
        SelectionConfig {
            block_size: b,
            stride: s,
            causal,
            ..SelectionConfig::default()
        }
    }

    #[test]
    fn tile_grid_shape_for_24_tokens() {
        let inp = inputs(24, 4, false, 1);
        let c = cfg(8, 4, false);
        let scorer = HeadScorer::new(&inp, &c).unwrap();
        assert_eq!(scorer.n_blocks(), 3);
        for b in 0..3 {
            let ts = scorer.score_block(b).unwrap();
            assert_eq!(ts.raw.dims(), &[2, 6]);
            assert_eq!(ts.prob.dims(), &[2, 6]);
        }
        assert!(scorer.score_block(3).is_err());
    }

    #[test]
    fn zero_queries_give_uniform_probabilities() {
        let q = Tensor::zeros(vec![16, 4]).unwrap();
        let inp = AttentionInputs::new(q, mat(16, 4, 2), mat(16, 4, 3), true).unwrap();
        let ts = antidiagonal_tile_scores(&inp, &cfg(8, 4, true), 1).unwrap();
        assert!(ts.raw.data().iter().all(|&v| v == 0.0));
        // Tile row t of block 1 sees t + 1 causal tiles.
        for m in 0..2 {
            let t = 2 + m;
            for n in 0..4 {
                let want = if n <= t { 1.0 / (t + 1) as f32 } else { 0.0 };
                assert!((ts.prob.get(m, n) - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn antidiagonal_matches_brute_force() {
        let (l, d, b, s) = (16, 8, 8, 4);
        let inp = inputs(l, d, false, 9);
        let c = cfg(b, s, false);
        for qb in 0..2 {
            let ts = antidiagonal_tile_scores(&inp, &c, qb).unwrap();
            for m in 0..b / s {
                for n in 0..l / s {
                    let mut want = 0.0f64;
                    for i in 0..l {
                        for j in 0..l {
                            let in_tile = i / s == qb * (b / s) + m && j / s == n;
                            if in_tile && (i % s) + (j % s) == s - 1 {
                                want += (0..d)
                                    .map(|t| inp.q().get(i, t) as f64 * inp.k().get(j, t) as f64)
                                    .sum::<f64>();
                            }
                        }
                    }
                    let got = ts.raw.get(m, n) as f64 * (d as f64).sqrt() * s as f64;
                    assert!((got - want).abs() < 1e-5, "tile ({m},{n}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn padding_rows_and_columns() {
        // L = 10 with S = 4 pads to 12; B = 8 gives 2 blocks, the second half empty.
        let inp = inputs(10, 4, false, 4);
        let c = cfg(8, 4, false);
        let ts = antidiagonal_tile_scores(&inp, &c, 1).unwrap();
        assert_eq!(ts.raw.dims(), &[2, 3]);
        assert_eq!(ts.unmasked_rows(), 1);
        assert!(ts.prob.row(1).iter().all(|&p| p == 0.0));
        let s: f32 = ts.prob.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diagonal_self_tile_scores_highest() {
        // Orthonormal distinct rows, Q = K.
        let l = 16;
        let e = Tensor::from_fn(l, l, |i, j| if i == j { 4.0 } else { 0.0 }).unwrap();
        let inp = AttentionInputs::new(e.clone(), e.clone(), e, false).unwrap();
        let c = SelectionConfig {
            pattern: Pattern::Diagonal,
            ..cfg(8, 4, false)
        };
        for qb in 0..2 {
            let ts = baseline_tile_scores(&inp, &c, qb).unwrap();
            for m in 0..2 {
                let own = qb * 2 + m;
                let row = ts.raw.row(m);
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(best, own);
            }
        }
    }

    #[test]
    fn random_pattern_is_reproducible_permutation() {
        let inp = inputs(32, 4, true, 2);
        let c = SelectionConfig {
            pattern: Pattern::Random { seed: 42 },
            ..cfg(16, 8, true)
        };
        let a = baseline_tile_scores(&inp, &c, 1).unwrap();
        let b = baseline_tile_scores(&inp, &c, 1).unwrap();
        assert_eq!(a, b);
        for seed in 0..50 {
            for s in [1, 2, 4, 8, 16] {
                let pos = Pattern::Random { seed }.positions(s);
                assert_eq!(pos.len(), s);
                assert!(pattern_coverage_check(&pos, s));
            }
        }
    }

    #[test]
    fn fullsum_is_pooled_mean() {
        let (l, d, s) = (8, 4, 4);
        let inp = inputs(l, d, false, 6);
        let c = SelectionConfig {
            pattern: Pattern::FullSum,
            ..cfg(8, s, false)
        };
        let ts = baseline_tile_scores(&inp, &c, 0).unwrap();
        for m in 0..2 {
            for n in 0..2 {
                let mut sum = 0.0f64;
                for i in m * s..(m + 1) * s {
                    for j in n * s..(n + 1) * s {
                        sum += (0..d)
                            .map(|t| inp.q().get(i, t) as f64 * inp.k().get(j, t) as f64)
                            .sum::<f64>();
                    }
                }
                let want = sum / (s * s) as f64 / (d as f64).sqrt();
                assert!((ts.raw.get(m, n) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coverage_check_cases() {
        let s = 4;
        assert!(pattern_coverage_check(&Pattern::Antidiagonal.positions(s), s));
        assert!(pattern_coverage_check(&Pattern::Diagonal.positions(s), s));
        let column: Vec<_> = (0..s).map(|i| (i, 0)).collect();
        assert!(!pattern_coverage_check(&column, s));
        assert!(pattern_coverage_check(&[(0, 0)], 1));
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(cfg(8, 3, true).validate().is_err());
        assert!(cfg(4, 8, true).validate().is_err());
        assert!(SelectionConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SelectionConfig {
            tau: 1.01,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SelectionConfig {
            strategy: Strategy::TopK(0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SelectionConfig {
            strategy: Strategy::TopRatio(1.5),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("topk:3".parse::<Strategy>().unwrap(), Strategy::TopK(3));
        assert_eq!("topratio:0.27".parse::<Strategy>().unwrap(), Strategy::TopRatio(0.27));
        assert!("topk".parse::<Strategy>().is_err());
        assert_eq!("random:7".parse::<Pattern>().unwrap(), Pattern::Random { seed: 7 });
        assert!("spiral".parse::<Pattern>().is_err());
    }
}
