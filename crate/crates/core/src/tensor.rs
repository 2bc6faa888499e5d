//! Dense row-major `f32` tensors, the matmul and masked softmax primitives
//! built on them, and the `XATN` binary file format.
//!
//! All reductions accumulate in `f32` in ascending index order, so results do
//! not depend on how work is split across threads.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes at the start of every tensor file.
pub const MAGIC: [u8; 4] = *b"XATN";
/// Current file format version.
pub const FORMAT_VERSION: u32 = 1;
/// dtype code for little-endian `f32` payloads.
pub const DTYPE_F32: u8 = 1;
/// dtype code for `u8` 0/1 payloads (block masks).
pub const DTYPE_U8: u8 = 2;

const MAX_NDIM: usize = 3;

/// Dense row-major tensor with one to three positive extents and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value at flat index {pos} is {}", data[pos])));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        validate_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Tensor {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Build a `rows × cols` matrix from a generator over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Build a matrix from nested rows, which must all have the same length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![n_rows, n_cols], rows.concat())
    }

    /// Stack equally shaped matrices into a 3-D tensor.
    pub fn stack(mats: &[Tensor]) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero matrices".into()))?;
        let (r, c) = first.matrix_dims()?;
        let mut data = Vec::with_capacity(mats.len() * r * c);
        for m in mats {
            if m.matrix_dims()? != (r, c) {
                return Err(Error::Shape(format!("stack of {:?} with {:?}", first.dims, m.dims)));
            }
            data.extend_from_slice(&m.data);
        }
        Tensor::new(vec![mats.len(), r, c], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected a matrix, got dims {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Matrix `h` of a 3-D tensor.
    pub fn slice_matrix(&self, h: usize) -> Result<Tensor> {
        match self.dims.as_slice() {
            &[n, r, c] if h < n => Ok(Tensor {
                dims: vec![r, c],
                data: self.data[h * r * c..(h + 1) * r * c].to_vec(),
            }),
            &[n, _, _] => Err(Error::Shape(format!("matrix index {h} out of range {n}"))),
            other => Err(Error::Shape(format!("expected 3 dims, got {other:?}"))),
        }
    }

    /// Split a 3-D tensor into its matrices.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        match self.dims.as_slice() {
            &[n, _, _] => (0..n).map(|h| self.slice_matrix(h)).collect(),
            other => Err(Error::Shape(format!("expected 3 dims, got {other:?}"))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims()?;
        Ok(Tensor {
            dims: vec![c, r],
            data: transpose_raw(&self.data, r, c),
        })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(Error::Shape(format!(
            "tensors have 1 to {MAX_NDIM} dims, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero-length extent in {dims:?}")));
    }
    Ok(())
}

/// Transpose a row-major `rows × cols` buffer.
pub(crate) fn transpose_raw(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Right operand of [`accumulate_rows`], a logical `k × n` matrix.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Rhs<'a> {
    /// Row-major `k × ld` storage: `(t, c)` lives at `data[t * ld + c]`.
    KMajor(&'a [f32], usize),
    /// Row-major `n × ld` storage, i.e. the transpose: `(t, c)` lives at `data[c * ld + t]`.
    NMajor(&'a [f32], usize),
}

impl Rhs<'_> {
    #[inline(always)]
    fn at(&self, t: usize, c: usize) -> f32 {
        match *self {
            Rhs::KMajor(d, ld) => d[t * ld + c],
            Rhs::NMajor(d, ld) => d[c * ld + t],
        }
    }

    fn check(&self, k: usize, cols: &Range<usize>) {
        let ok = match *self {
            Rhs::KMajor(d, ld) => d.len() >= (k - 1) * ld + cols.end,
            Rhs::NMajor(d, ld) => ld >= k && d.len() >= (cols.end - 1) * ld + k,
        };
        assert!(ok, "right operand too short");
    }

    /// Copy columns `c..c + nr` over rows `ts` into `pack`, `nr` values per row.
    #[inline(always)]
    fn pack(&self, ts: Range<usize>, c: usize, nr: usize, pack: &mut [f32]) {
        match *self {
            Rhs::KMajor(d, ld) => {
                for (i, t) in ts.enumerate() {
                    pack[i * nr..(i + 1) * nr].copy_from_slice(&d[t * ld + c..t * ld + c + nr]);
                }
            }
            Rhs::NMajor(d, ld) => {
                for j in 0..nr {
                    let src = &d[(c + j) * ld + ts.start..(c + j) * ld + ts.end];
                    for (i, &x) in src.iter().enumerate() {
                        pack[i * nr + j] = x;
                    }
                }
            }
        }
    }
}

/// `out[r][c - cols.start] += Σ_t a[r][t] · b[t][c]` for `c` in `cols`.
///
/// `a` holds `out.len() / cols.len()` rows of width `k`. Each output element
/// accumulates over `t` in ascending order, the summation order of a naive
/// dot product, so results are reproducible run to run. On CPUs with FMA the
/// multiply-adds are fused, which can change the last bits relative to
/// machines without it.
pub(crate) fn accumulate_rows(a: &[f32], k: usize, b: Rhs<'_>, cols: Range<usize>, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports AVX-512F and FMA, checked just above.
            unsafe { accumulate_rows_avx512(a, k, b, cols, out) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports AVX2 and FMA, checked just above.
            unsafe { accumulate_rows_avx2(a, k, b, cols, out) };
            return;
        }
    }
    accumulate_rows_generic::<4, 8, false>(a, k, b, cols, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn accumulate_rows_avx512(a: &[f32], k: usize, b: Rhs<'_>, cols: Range<usize>, out: &mut [f32]) {
    accumulate_rows_generic::<8, 32, true>(a, k, b, cols, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn accumulate_rows_avx2(a: &[f32], k: usize, b: Rhs<'_>, cols: Range<usize>, out: &mut [f32]) {
    accumulate_rows_generic::<4, 16, true>(a, k, b, cols, out);
}

const KC: usize = 128;
const MC: usize = 128;

/// Register-blocked driver; `MR × NR` is the block of output kept in registers.
#[inline(always)]
fn accumulate_rows_generic<const MR: usize, const NR: usize, const FUSED: bool>(
    a: &[f32],
    k: usize,
    b: Rhs<'_>,
    cols: Range<usize>,
    out: &mut [f32],
) {
    let width = cols.len();
    if width == 0 || k == 0 {
        return;
    }
    let n_rows = out.len() / width;
    assert_eq!(a.len(), n_rows * k, "left operand does not match output rows");
    b.check(k, &cols);
    // Rows are processed MC at a time and `t` KC at a time, so the slice of
    // `a` in use stays in L1. Each NR-wide column panel of `b` is copied into
    // a contiguous buffer and reused by every row group. Splitting `t` into chunks keeps the
    // ascending order of each element's sum.
    let kc = KC.min(k);
    let mut pack = vec![0.0f32; kc * NR];
    let full_cols = width - width % NR;
    for m0 in (0..n_rows).step_by(MC) {
        let m1 = (m0 + MC).min(n_rows);
        for k0 in (0..k).step_by(kc) {
            let k1 = (k0 + kc).min(k);
            for c in (0..full_cols).step_by(NR) {
                b.pack(k0..k1, cols.start + c, NR, &mut pack);
                let panel = &pack[..(k1 - k0) * NR];
                let mut r0 = m0;
                while r0 + MR <= m1 {
                    micro_tile::<MR, NR, FUSED>(a, k, panel, k0..k1, r0, out, width, c);
                    r0 += MR;
                }
                for r in r0..m1 {
                    let a_row = &a[r * k + k0..r * k + k1];
                    for (j, ov) in out[r * width + c..r * width + c + NR].iter_mut().enumerate() {
                        let mut acc = *ov;
                        for (t, &av) in a_row.iter().enumerate() {
                            acc = madd::<FUSED>(av, panel[t * NR + j], acc);
                        }
                        *ov = acc;
                    }
                }
            }
        }
        for r in m0..m1 {
            let a_row = &a[r * k..(r + 1) * k];
            for j in full_cols..width {
                let mut acc = out[r * width + j];
                for (t, &av) in a_row.iter().enumerate() {
                    acc = madd::<FUSED>(av, b.at(t, cols.start + j), acc);
                }
                out[r * width + j] = acc;
            }
        }
    }
}

#[inline(always)]
fn madd<const FUSED: bool>(a: f32, b: f32, acc: f32) -> f32 {
    if FUSED {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

/// One `MR × NR` block of output held in registers across the `t` chunk.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_tile<const MR: usize, const NR: usize, const FUSED: bool>(
    a: &[f32],
    k: usize,
    panel: &[f32],
    ts: Range<usize>,
    r0: usize,
    out: &mut [f32],
    width: usize,
    c: usize,
) {
    let mut acc = [[0.0f32; NR]; MR];
    for (i, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(r0 + i) * width + c..(r0 + i) * width + c + NR]);
    }
    let a_rows: [&[f32]; MR] = std::array::from_fn(|i| &a[(r0 + i) * k + ts.start..(r0 + i) * k + ts.end]);
    for (t, b) in panel.chunks_exact(NR).enumerate() {
        let b: &[f32; NR] = b.try_into().unwrap();
        for i in 0..MR {
            let av = a_rows[i][t];
            for j in 0..NR {
                acc[i][j] = madd::<FUSED>(av, b[j], acc[i][j]);
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        out[(r0 + i) * width + c..(r0 + i) * width + c + NR].copy_from_slice(row);
    }
}

/// `a · b_transposedᵀ`: `a` is `m × k`, `b_transposed` is `n × k`, result is `m × n`.
pub fn matmul(a: &Tensor, b_transposed: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (n, k2) = b_transposed.matrix_dims()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {m}×{k} by ({n}×{k2})ᵀ"
        )));
    }
    let mut out = vec![0.0; m * n];
    accumulate_rows(&a.data, k, Rhs::NMajor(&b_transposed.data, k), 0..n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of one row in place.
///
/// Entries with `allowed[j] == false` are excluded from the max and the sum
/// and come out exactly zero.
pub(crate) fn softmax_in_place(row: &mut [f32], allowed: Option<&[bool]>) -> Result<()> {
    let keep = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(Error::EmptyDistribution("softmax row has no unmasked entry".into()));
    }
    let mut sum = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v as f64;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
    Ok(())
}

/// Row-wise softmax of a matrix. `allowed`, when given, is a row-major
/// boolean grid of the same shape; `false` entries are masked to zero.
pub fn softmax_rows(scores: &Tensor, allowed: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = scores.matrix_dims()?;
    if let Some(a) = allowed {
        if a.len() != m * n {
            return Err(Error::Shape(format!("mask has {} cells, scores are {m}×{n}", a.len())));
        }
    }
    let mut data = scores.data.clone();
    for (i, row) in data.chunks_mut(n).enumerate() {
        softmax_in_place(row, allowed.map(|a| &a[i * n..(i + 1) * n]))
            .map_err(|_| Error::EmptyDistribution(format!("row {i} is fully masked")))?;
    }
    Tensor::new(vec![m, n], data)
}

pub(crate) fn write_header(w: &mut impl Write, dtype: u8, dims: &[usize]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype, dims.len() as u8])?;
    w.write_all(&0u16.to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

/// Parse a header and return `(dtype, dims, payload)`, checking that the
/// payload length matches the declared extents exactly.
pub(crate) fn parse_file(bytes: &[u8]) -> Result<(u8, Vec<usize>, &[u8])> {
    const FIXED: usize = 12;
    if bytes.len() < FIXED {
        return Err(Error::Format(format!(
            "file is {} bytes, header needs {FIXED}",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let ndim = bytes[9] as usize;
    if !(1..=MAX_NDIM).contains(&ndim) {
        return Err(Error::Format(format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let reserved = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
    if reserved != 0 {
        return Err(Error::Format(format!("reserved field is {reserved}, expected 0")));
    }
    let header_len = FIXED + 8 * ndim;
    if bytes.len() < header_len {
        return Err(Error::Format("truncated extents".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for d in 0..ndim {
        let off = FIXED + 8 * d;
        let ext = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let ext = usize::try_from(ext).map_err(|_| Error::Format(format!("extent {ext} too large")))?;
        if ext == 0 {
            return Err(Error::Format(format!("zero-length extent at axis {d}")));
        }
        count = count
            .checked_mul(ext)
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        dims.push(ext);
    }
    let elem = if dtype == DTYPE_F32 { 4 } else { 1 };
    let want = count
        .checked_mul(elem)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} need {want}",
            payload.len()
        )));
    }
    Ok((dtype, dims, payload))
}

/// Encode a tensor in the `XATN` format.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * t.dims.len() + 4 * t.data.len());
    write_header(&mut buf, DTYPE_F32, &t.dims).expect("writing to a Vec cannot fail");
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decode an `XATN` float32 tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (dtype, dims, payload) = parse_file(bytes)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("expected float32 dtype, got code {dtype}")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| match e {
        Error::NonFinite(m) => Error::Format(format!("non-finite payload: {m}")),
        other => other,
    })
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, bt: &Tensor) -> Vec<f32> {
        let (m, k) = a.matrix_dims().unwrap();
        let (n, _) = bt.matrix_dims().unwrap();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for t in 0..k {
                    s += a.get(i, t) * bt.get(j, t);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn lcg_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![3.0, 4.25]]).unwrap();
        // x · Iᵀ = x
        assert_eq!(matmul(&x, &id).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg_tensor(7, 5, 1);
        let bt = lcg_tensor(6, 5, 2);
        let got = matmul(&a, &bt).unwrap();
        assert_eq!(got.dims(), &[7, 6]);
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &bt)) {
            assert!((g - w).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = lcg_tensor(2, 3, 1);
        let b = lcg_tensor(2, 4, 1);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let s = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -5.0]]).unwrap();
        let p = softmax_rows(&s, None).unwrap();
        for v in &p.data()[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert_eq!(p.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let p = softmax_rows(&s, None).unwrap();
        let z: f64 = (1..=3).map(|x| (x as f64).exp()).sum();
        for (j, v) in p.data().iter().enumerate() {
            let want = ((j + 1) as f64).exp() / z;
            assert!((*v as f64 - want).abs() < 1e-7, "{v} vs {want}");
        }
    }

    #[test]
    fn softmax_masking() {
        let s = Tensor::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap();
        let p = softmax_rows(&s, Some(&[false, true, true])).unwrap();
        assert_eq!(p.row(0), &[0.0, 0.5, 0.5]);
        let err = softmax_rows(&s, Some(&[false, false, false]));
        assert!(matches!(err, Err(Error::EmptyDistribution(_))));
    }

    #[test]
    fn file_round_trip_and_layout() {
        let t = lcg_tensor(3, 4, 9);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[0..4], &[0x58, 0x41, 0x54, 0x4E]);
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 1, 2, 0, 0]);
        assert_eq!(&bytes[12..20], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16 + 48);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back.dims(), t.dims());
        let same = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.xatn");
        save_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
    }

    #[test]
    fn file_negative_cases() {
        let t = lcg_tensor(2, 2, 3);
        let good = encode_tensor(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Y';
        assert!(matches!(decode_tensor(&bad_magic), Err(Error::Format(_))));

        let mut bad_dtype = good.clone();
        bad_dtype[8] = 7;
        assert!(matches!(decode_tensor(&bad_dtype), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(decode_tensor(truncated), Err(Error::Format(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_tensor(&trailing), Err(Error::Format(_))));

        let mut zero_dim = good.clone();
        zero_dim[12..20].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(decode_tensor(&zero_dim), Err(Error::Format(_))));

        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&nan), Err(Error::Format(_))));

        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    }
}
