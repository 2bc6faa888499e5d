//! Order and distribution similarity between pattern-based block scores and
//! the exact block attention mass.

use serde::Serialize;

use crate::attention::{block_attention_mass, AttentionInputs};
use crate::error::{Error, Result};
use crate::scoring::SelectionConfig;
use crate::selection::{block_prob_rows, density, mask_from_probs};

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va.sqrt() * vb.sqrt()))
}

/// Spearman rank correlation with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 points, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .map(|r| r.clamp(-1.0, 1.0))
        .ok_or_else(|| Error::UndefinedCorrelation("a ranking has zero variance".into()))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats; bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::InvalidDistribution(format!(
            "lengths {} and {} must match and be non-zero",
            p.len(),
            q.len()
        )));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let kl_to_mid = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a / ((a + b) / 2.0)).ln())
            .sum()
    };
    let js = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Exact softmaxed attention mass per (query block, key block).
pub fn block_sum_ground_truth(inp: &AttentionInputs, block_size: usize) -> Result<Vec<Vec<f64>>> {
    block_attention_mass(inp, block_size)
}

/// One row of a pattern similarity report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub pattern: String,
    pub stride: usize,
    pub rank_correlation: f64,
    pub js_divergence: f64,
    pub density: f64,
}

/// How the two sides of the comparison were formed; written alongside reports.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityMethod {
    pub selected: &'static str,
    pub full: &'static str,
    pub correlation: &'static str,
    pub divergence: &'static str,
}

pub const SIMILARITY_METHOD: SimilarityMethod = SimilarityMethod {
    selected: "pre-softmax pattern tile sums, softmax-normalized per tile row and averaged per query block into block probabilities",
    full: "post-softmax exact attention probabilities summed per block, divided by query rows in the block",
    correlation: "spearman over causally valid (query block, key block) pairs, average ranks for ties",
    divergence: "jensen-shannon in nats (upper bound ln 2 = 0.693147), averaged over query blocks",
};

/// Normalised ground-truth block distributions, one row per query block.
pub fn ground_truth_block_distribution(inp: &AttentionInputs, block_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut gt = block_sum_ground_truth(inp, block_size)?;
    for row in &mut gt {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(gt)
}

/// Order and distribution similarity of one set of block probabilities against the ground truth.
pub fn similarity(selected: &[Vec<f64>], truth: &[Vec<f64>], causal: bool) -> Result<(f64, f64)> {
    if selected.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} selected rows vs {} ground-truth rows",
            selected.len(),
            truth.len()
        )));
    }
    let mut flat_sel = Vec::new();
    let mut flat_gt = Vec::new();
    let mut js_total = 0.0;
    for (q, (s_row, g_row)) in selected.iter().zip(truth).enumerate() {
        let valid = if causal { q + 1 } else { s_row.len() };
        let s_valid = &s_row[..valid];
        let g_valid = &g_row[..valid];
        flat_sel.extend_from_slice(s_valid);
        flat_gt.extend_from_slice(g_valid);
        let s_sum: f64 = s_valid.iter().sum();
        let s_norm: Vec<f64> = s_valid.iter().map(|v| v / s_sum).collect();
        let g_sum: f64 = g_valid.iter().sum();
        let g_norm: Vec<f64> = g_valid.iter().map(|v| v / g_sum).collect();
        js_total += js_divergence(&s_norm, &g_norm)?;
    }
    let rho = rank_correlation(&flat_sel, &flat_gt)?;
    Ok((rho, js_total / selected.len() as f64))
}

/// Compare several scoring configurations on the same inputs.
pub fn pattern_similarity_report(inp: &AttentionInputs, configs: &[SelectionConfig]) -> Result<Vec<SimilarityRow>> {
    let mut truth_cache: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    configs
        .iter()
        .map(|cfg| {
            let truth = match truth_cache.iter().position(|(b, _)| *b == cfg.block_size) {
                Some(i) => &truth_cache[i].1,
                None => {
                    truth_cache.push((cfg.block_size, ground_truth_block_distribution(inp, cfg.block_size)?));
                    &truth_cache.last().unwrap().1
                }
            };
            let probs = block_prob_rows(inp, cfg)?;
            let (rho, js) = similarity(&probs, truth, cfg.causal)?;
            let mask = mask_from_probs(&probs, cfg)?;
            Ok(SimilarityRow {
                pattern: cfg.pattern.name().to_string(),
                stride: cfg.stride,
                rank_correlation: rho,
                js_divergence: js,
                density: density(&mask, cfg.causal),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Pattern;
    use crate::tensor::Tensor;

    #[test]
    fn spearman_hand_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((rank_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((rank_correlation(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        let b = [1.0, 3.0, 2.0, 4.0];
        assert!((rank_correlation(&a, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_ties_and_errors() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(matches!(
            rank_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(rank_correlation(&[1.0], &[1.0]).is_err());
        assert!(rank_correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn js_known_values() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let max = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((max - std::f64::consts::LN_2).abs() < 1e-9);
        // Direct evaluation with the mixture m = [0.7, 0.3].
        let want = 0.5 * (0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln())
            + 0.5 * (0.9 * (0.9f64 / 0.7).ln() + 0.1 * (0.1f64 / 0.3).ln());
        let got = js_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 4.0 - 2.0
        })
        .unwrap()
    }

    #[test]
    fn ground_truth_uniform_and_single_block() {
        let l = 12;
        let q = Tensor::zeros(vec![l, 4]).unwrap();
        let inp = AttentionInputs::new(q, mat(l, 4, 1), mat(l, 4, 2), false).unwrap();
        let gt = block_sum_ground_truth(&inp, 4).unwrap();
        for row in &gt {
            for v in row {
                assert!((v - 4.0 / 3.0 * 1.0).abs() < 1e-5);
            }
        }
        let whole = block_sum_ground_truth(&inp, l).unwrap();
        assert!((whole[0][0] - l as f64).abs() < 1e-5);
    }

    #[test]
    fn ground_truth_matches_elementwise_sum() {
        let (l, d, b) = (10, 4, 4);
        let inp = AttentionInputs::new(mat(l, d, 3), mat(l, d, 4), mat(l, d, 5), true).unwrap();
        let gt = block_sum_ground_truth(&inp, b).unwrap();
        let mut want = vec![vec![0.0f64; 3]; 3];
        for i in 0..l {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..d)
                        .map(|t| inp.q().get(i, t) as f64 * inp.k().get(j, t) as f64)
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            for (j, x) in logits.iter().enumerate() {
                want[i / b][j / b] += (x - m).exp() / z;
            }
        }
        for (g, w) in gt.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn fullsum_stride_one_reproduces_ground_truth() {
        let (l, d) = (32, 8);
        for causal in [false, true] {
            let inp = AttentionInputs::new(mat(l, d, 7), mat(l, d, 8), mat(l, d, 9), causal).unwrap();
            let cfg = SelectionConfig {
                block_size: 4,
                stride: 1,
                causal,
                pattern: Pattern::FullSum,
                ..SelectionConfig::default()
            };
            let anti = SelectionConfig {
                pattern: Pattern::Antidiagonal,
                ..cfg.clone()
            };
            let report = pattern_similarity_report(&inp, &[cfg, anti]).unwrap();
            assert_eq!(report.len(), 2);
            for row in &report {
                assert!((row.rank_correlation - 1.0).abs() < 1e-9, "{row:?}");
                assert!(row.js_divergence < 1e-9, "{row:?}");
            }
        }
    }
}
