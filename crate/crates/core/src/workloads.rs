//! Seeded synthetic attention heads with planted structure.
//!
//! Planted patterns share one construction: every query carries a component
//! of norm `√d_h` along some direction, and the keys that should be attended
//! carry `strength` along the same direction, so their logit is `strength`
//! while unrelated logits stay `O(strength/√d_h)` or smaller. The planted
//! positions then hold most of each row's mass as long as `L ≪ e^strength`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_strength() -> f32 {
    10.0
}

fn default_sink() -> usize {
    4
}

/// Structure planted in the attention map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Independent `N(0, 1/d_h)` queries and keys.
    Gaussian,
    /// Key columns attended by every query.
    Vertical {
        columns: Vec<usize>,
        #[serde(default = "default_strength")]
        strength: f32,
    },
    /// Query `i` attends key `i - offset`.
    Slash {
        offset: usize,
        #[serde(default = "default_strength")]
        strength: f32,
    },
    /// Vertical columns and a slash in the same head.
    VerticalSlash {
        columns: Vec<usize>,
        offset: usize,
        #[serde(default = "default_strength")]
        strength: f32,
    },
    /// The first `sink` keys plus the keys in the query's own and previous
    /// `window`-aligned chunk.
    SinkRecent {
        #[serde(default = "default_sink")]
        sink: usize,
        window: usize,
        #[serde(default = "default_strength")]
        strength: f32,
    },
    /// Queries attend keys in their own `width`-aligned chunk.
    BlockLocal {
        width: usize,
        #[serde(default = "default_strength")]
        strength: f32,
    },
}

/// Everything needed to regenerate a workload bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub kind: WorkloadKind,
    #[serde(alias = "L")]
    pub seq_len: usize,
    #[serde(alias = "d_h")]
    pub head_dim: usize,
    #[serde(alias = "H", default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub causal: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, seq_len: usize, head_dim: usize, heads: usize, seed: u64, causal: bool) -> Self {
        WorkloadSpec {
            kind,
            seq_len,
            head_dim,
            heads,
            seed,
            causal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let l = self.seq_len;
        if l == 0 || self.head_dim == 0 || self.heads == 0 {
            return bad(format!(
                "seq_len, head_dim and heads must be positive (got {l}, {}, {})",
                self.head_dim, self.heads
            ));
        }
        let strength_ok = |s: f32| s > 0.0 && s.is_finite();
        match &self.kind {
            WorkloadKind::Gaussian => Ok(()),
            WorkloadKind::Vertical { columns, strength } => {
                if columns.is_empty() || columns.iter().any(|&c| c >= l) {
                    return bad(format!("vertical columns {columns:?} must be non-empty and < {l}"));
                }
                if !strength_ok(*strength) {
                    return bad(format!("strength {strength} must be positive"));
                }
                Ok(())
            }
            WorkloadKind::Slash { offset, strength } => {
                if *offset >= l || !strength_ok(*strength) {
                    return bad(format!("slash offset {offset} must be < {l}, strength {strength} > 0"));
                }
                Ok(())
            }
            WorkloadKind::VerticalSlash {
                columns,
                offset,
                strength,
            } => {
                if columns.is_empty() || columns.iter().any(|&c| c >= l) || *offset >= l || !strength_ok(*strength) {
                    return bad("vertical_slash needs columns < L, offset < L and strength > 0".into());
                }
                if self.head_dim < 2 {
                    return bad("vertical_slash needs head_dim >= 2".into());
                }
                Ok(())
            }
            WorkloadKind::SinkRecent { sink, window, strength } => {
                if *sink > l || !(1..=l).contains(window) || !strength_ok(*strength) {
                    return bad(format!("sink {sink} and window {window} must lie in [1, {l}]"));
                }
                if self.head_dim < 3 {
                    return bad("sink_recent needs head_dim >= 3".into());
                }
                Ok(())
            }
            WorkloadKind::BlockLocal { width, strength } => {
                if !(1..=l).contains(width) || !strength_ok(*strength) {
                    return bad(format!("width {width} must lie in [1, {l}]"));
                }
                if self.head_dim < 2 {
                    return bad("block_local needs head_dim >= 2".into());
                }
                Ok(())
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: WorkloadSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        WorkloadSpec::from_json(&text)
    }
}

struct HeadRng(ChaCha8Rng);

impl HeadRng {
    fn new(seed: u64, head: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(head as u64);
        HeadRng(rng)
    }

    fn normal(&mut self) -> f32 {
        self.0.sample(StandardNormal)
    }

    fn gaussian(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| self.normal() * scale).collect()
    }

    /// Random unit vector supported on coordinates `lo..d`.
    fn unit(&mut self, d: usize, lo: usize) -> Vec<f32> {
        let mut v = vec![0.0f32; d];
        let mut norm = 0.0f32;
        while norm == 0.0 {
            for x in &mut v[lo..] {
                *x = self.normal();
            }
            norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Latent direction for chunk `c`: an orthonormal basis vector over
/// coordinates `lo..d` while there are enough of them, random otherwise.
fn chunk_latents(rng: &mut HeadRng, n_chunks: usize, d: usize, lo: usize) -> Vec<Vec<f32>> {
    let span = d - lo;
    (0..n_chunks)
        .map(|c| {
            if n_chunks <= span {
                let mut e = vec![0.0; d];
                e[lo + c] = 1.0;
                e
            } else {
                rng.unit(d, lo)
            }
        })
        .collect()
}

fn axpy(dst: &mut [f32], a: f32, x: &[f32]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn generate_head(spec: &WorkloadSpec, head: usize) -> Result<AttentionInputs> {
    let l = spec.seq_len;
    let d = spec.head_dim;
    let mut rng = HeadRng::new(spec.seed, head);
    let base = 1.0 / (d as f32).sqrt();
    let mut q = rng.gaussian(l * d, base);
    let mut k = rng.gaussian(l * d, base);
    let v = rng.gaussian(l * d, 1.0);
    let root_d = (d as f32).sqrt();

    // Every query gets √d_h along e_0, planted keys get `strength` along it.
    let plant_columns = |q: &mut [f32], k: &mut [f32], columns: &[usize], strength: f32| {
        for i in 0..l {
            q[i * d] = root_d;
        }
        for &j in columns {
            k[j * d..(j + 1) * d].fill(0.0);
            k[j * d] = strength;
        }
    };
    // Query rows point along their own unit direction; key i - offset copies it.
    let plant_slash = |rng: &mut HeadRng, q: &mut [f32], k: &mut [f32], offset: usize, strength: f32, lo: usize| {
        let dirs: Vec<Vec<f32>> = (0..l).map(|_| rng.unit(d, lo)).collect();
        for (i, u) in dirs.iter().enumerate() {
            q[i * d + lo..(i + 1) * d].fill(0.0);
            axpy(&mut q[i * d..(i + 1) * d], root_d, u);
            if i >= offset {
                let j = i - offset;
                k[j * d + lo..(j + 1) * d].fill(0.0);
                axpy(&mut k[j * d..(j + 1) * d], strength, u);
            }
        }
    };

    match &spec.kind {
        WorkloadKind::Gaussian => {}
        WorkloadKind::Vertical { columns, strength } => plant_columns(&mut q, &mut k, columns, *strength),
        WorkloadKind::Slash { offset, strength } => plant_slash(&mut rng, &mut q, &mut k, *offset, *strength, 0),
        WorkloadKind::VerticalSlash {
            columns,
            offset,
            strength,
        } => {
            plant_slash(&mut rng, &mut q, &mut k, *offset, *strength, 1);
            plant_columns(&mut q, &mut k, columns, *strength);
        }
        WorkloadKind::SinkRecent { sink, window, strength } => {
            let sinks: Vec<usize> = (0..*sink).collect();
            let n_chunks = l.div_ceil(*window);
            let z = chunk_latents(&mut rng, n_chunks, d, 1);
            for i in 0..l {
                let c = i / window;
                axpy(&mut q[i * d..(i + 1) * d], root_d, &z[c]);
                if c > 0 {
                    axpy(&mut q[i * d..(i + 1) * d], root_d, &z[c - 1]);
                }
                axpy(&mut k[i * d..(i + 1) * d], *strength, &z[c]);
            }
            plant_columns(&mut q, &mut k, &sinks, *strength);
        }
        WorkloadKind::BlockLocal { width, strength } => {
            let n_chunks = l.div_ceil(*width);
            let z = chunk_latents(&mut rng, n_chunks, d, 0);
            for i in 0..l {
                let c = i / width;
                axpy(&mut q[i * d..(i + 1) * d], root_d, &z[c]);
                axpy(&mut k[i * d..(i + 1) * d], *strength, &z[c]);
            }
        }
    }

    AttentionInputs::new(
        Tensor::new(vec![l, d], q)?,
        Tensor::new(vec![l, d], k)?,
        Tensor::new(vec![l, d], v)?,
        spec.causal,
    )
}

/// Generate one [`AttentionInputs`] per head. Pure in `spec`, seed included.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<AttentionInputs>> {
    spec.validate()?;
    (0..spec.heads).map(|h| generate_head(spec, h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::full_attention;

    fn spec(kind: WorkloadKind, l: usize, d: usize) -> WorkloadSpec {
        WorkloadSpec::new(kind, l, d, 2, 7, true)
    }

    #[test]
    fn deterministic_per_seed_and_distinct_heads() {
        let s = spec(WorkloadKind::Gaussian, 32, 8);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].q(), a[1].q());
        let other = WorkloadSpec { seed: 8, ..s };
        assert_ne!(generate(&other).unwrap()[0].q(), a[0].q());
    }

    #[test]
    fn json_round_trip_and_aliases() {
        let text = r#"{"kind":"vertical","columns":[17],"strength":10,"L":64,"d_h":16,"H":2,"seed":3,"causal":true}"#;
        let s = WorkloadSpec::from_json(text).unwrap();
        assert_eq!(
            s.kind,
            WorkloadKind::Vertical {
                columns: vec![17],
                strength: 10.0
            }
        );
        assert_eq!((s.seq_len, s.head_dim, s.heads), (64, 16, 2));
        let again = WorkloadSpec::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            spec(
                WorkloadKind::Vertical {
                    columns: vec![64],
                    strength: 10.0,
                },
                64,
                8,
            ),
            spec(
                WorkloadKind::Vertical {
                    columns: vec![],
                    strength: 10.0,
                },
                64,
                8,
            ),
            spec(
                WorkloadKind::Slash {
                    offset: 3,
                    strength: 0.0,
                },
                64,
                8,
            ),
            spec(
                WorkloadKind::BlockLocal {
                    width: 0,
                    strength: 10.0,
                },
                64,
                8,
            ),
            spec(
                WorkloadKind::SinkRecent {
                    sink: 2,
                    window: 65,
                    strength: 10.0,
                },
                64,
                8,
            ),
            spec(WorkloadKind::Gaussian, 0, 8),
        ];
        for s in bad {
            assert!(generate(&s).is_err(), "{s:?}");
        }
    }

    #[test]
    fn vertical_column_is_row_max() {
        let s = spec(
            WorkloadKind::Vertical {
                columns: vec![17],
                strength: 10.0,
            },
            64,
            16,
        );
        let inp = &generate(&s).unwrap()[0];
        let d = inp.head_dim();
        for i in 17..64 {
            let logit = |j: usize| (0..d).map(|t| inp.q().get(i, t) * inp.k().get(j, t)).sum::<f32>();
            let best = (0..=i).max_by(|&a, &b| logit(a).total_cmp(&logit(b))).unwrap();
            assert_eq!(best, 17, "row {i}");
        }
        // The attention output follows V[17] closely.
        let out = full_attention(inp).unwrap();
        let err: f32 = (0..d).map(|t| (out.get(40, t) - inp.v().get(17, t)).abs()).sum();
        assert!(err / (d as f32) < 0.05);
    }

    #[test]
    fn gaussian_score_mean_near_zero() {
        let (l, d) = (8, 16);
        let inp = &generate(&spec(WorkloadKind::Gaussian, l, d)).unwrap()[0];
        let mut sum = 0.0f64;
        for i in 0..l {
            for j in 0..l {
                sum += (0..d)
                    .map(|t| inp.q().get(i, t) as f64 * inp.k().get(j, t) as f64)
                    .sum::<f64>();
            }
        }
        let mean = sum / (l * l) as f64;
        // Each q·k has variance d · (1/d)² = 1/d.
        let sigma = (1.0 / d as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma / (l as f64));
    }

    #[test]
    fn block_local_chunks_dominate() {
        let s = spec(
            WorkloadKind::BlockLocal {
                width: 16,
                strength: 10.0,
            },
            64,
            16,
        );
        let inp = &generate(&s).unwrap()[0];
        let out = crate::metrics::block_sum_ground_truth(inp, 16).unwrap();
        for (q, row) in out.iter().enumerate() {
            assert!(row[q] > 0.9 * 16.0, "block {q}: {row:?}");
        }
    }
}
