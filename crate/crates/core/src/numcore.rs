//! Dense numerics, seeded randomness and parameter flattening.
//!
//! Everything here is plain `f64` loops. Sizes stay small (d <= 512,
//! batch <= 512) so nothing needs BLAS.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default floor on the norm accepted by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite matrix entry at {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// `w * x + b` for a row-major `w`.
pub fn affine_forward(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols || b.len() != w.rows {
        return Err(Error::Shape(format!(
            "affine: w is {}x{}, b has {}, x has {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    Ok(matvec_bias(&w.data, b, x))
}

/// Row-major matvec plus bias on raw slices. Callers guarantee shapes.
pub(crate) fn matvec_bias(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| bias + dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    l2_normalize_eps(x, NORM_EPS)
}

pub fn l2_normalize_eps(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = norm(x);
    if !(n > eps) {
        return Err(Error::Degenerate { norm: n, eps });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Dot product of two embeddings; equals the cosine for unit-norm inputs.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine: dimensions {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(dot(a, b))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// A named tensor as held by an encoder before flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// All trainable parameters of one encoder as a flat vector plus a layout
/// mapping segments back to layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        validate_layout(&layout, values.len())?;
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.layout.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "layouts differ ({} vs {} segments, {} vs {} values)",
                self.layout.len(),
                other.layout.len(),
                self.len(),
                other.len()
            )))
        }
    }

    /// Same values rounded to the nearest `f32`, as they would come back
    /// from a checkpoint file.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            layout: self.layout.clone(),
        }
    }

    /// SHA-256 over the layout and the exact bit patterns of the values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.layout {
            h.update(s.name.as_bytes());
            h.update((s.offset as u64).to_le_bytes());
            h.update((s.len as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn validate_layout(layout: &[Segment], total: usize) -> Result<()> {
    let mut expected = 0usize;
    for s in layout {
        if s.offset != expected {
            return Err(Error::Layout(format!(
                "segment {} starts at {} but previous segment ended at {}",
                s.name, s.offset, expected
            )));
        }
        let numel: usize = s.shape.iter().product();
        if numel != s.len {
            return Err(Error::Layout(format!(
                "segment {} has shape {:?} ({} values) but length {}",
                s.name, s.shape, numel, s.len
            )));
        }
        expected += s.len;
    }
    if expected != total {
        return Err(Error::Layout(format!(
            "segments cover {} values, vector has {}",
            expected, total
        )));
    }
    Ok(())
}

pub fn flatten_params(tensors: &[NamedTensor]) -> Result<ParamVector> {
    let mut values = Vec::with_capacity(tensors.iter().map(|t| t.values.len()).sum());
    let mut layout = Vec::with_capacity(tensors.len());
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.values.len() {
            return Err(Error::Shape(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.values.len()
            )));
        }
        if layout.iter().any(|s: &Segment| s.name == t.name) {
            return Err(Error::Layout(format!("duplicate segment name {}", t.name)));
        }
        layout.push(Segment {
            name: t.name.clone(),
            offset: values.len(),
            len: numel,
            shape: t.shape.clone(),
        });
        values.extend_from_slice(&t.values);
    }
    Ok(ParamVector { values, layout })
}

pub fn unflatten_params(p: &ParamVector) -> Result<Vec<NamedTensor>> {
    validate_layout(&p.layout, p.values.len())?;
    Ok(p.layout
        .iter()
        .map(|s| NamedTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            values: p.values[s.offset..s.offset + s.len].to_vec(),
        })
        .collect())
}

/// Seeded ChaCha8 stream. Children created with [`SeededRng::fork`] depend
/// only on the parent seed and the fork key, never on how many values the
/// parent has drawn.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, key: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(key.wrapping_add(1))))
    }

    /// Fork keyed by a label, for readable call sites.
    pub fn fork_named(&self, label: &str) -> Self {
        let key = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.fork(key)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
