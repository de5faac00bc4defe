//! Dense row-major `f64` tensors, a SplitMix64 stream and a tagged
//! multiply-accumulate counter.
//!
//! Only matrix products are charged to the [`MacCounter`]; softmax,
//! activations and elementwise arithmetic count zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Fills a tensor in row-major order from `rng`, uniform in `[lo, hi)`.
    pub fn uniform(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| rng.next_uniform(lo, hi))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(op, &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| v * factor).collect();
        check_finite("scale", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Concatenates two matrices with equal row counts along the last axis.
    pub fn concat_last(&self, other: &Tensor) -> Result<Tensor> {
        let (m, a) = self.dims2("concat_last")?;
        let (m2, b) = other.dims2("concat_last")?;
        if m != m2 {
            return Err(Error::Shape {
                op: "concat_last",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            data.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        Ok(Tensor {
            shape: vec![m, a + b],
            data,
        })
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrix product `a · b`; charges `m·k·n` MACs to `tag`.
pub fn matmul<K: Ord + Copy>(
    a: &Tensor,
    b: &Tensor,
    counter: &mut MacCounter<K>,
    tag: K,
) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let out = &mut data[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    check_finite("matmul", &data)?;
    counter.add(tag, (m * k * n) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut data = x.data.clone();
    for row in data.chunks_mut(n).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Cosine similarity of the flattened operands, clamped to `[-1, 1]`.
pub fn cosine_flat(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_flat",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let na = dot(&a.data, &a.data);
    let nb = dot(&b.data, &b.data);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "zero-norm operand in cosine similarity".into(),
        ));
    }
    // sqrt(na·nb) keeps self-similarity at exactly 1.0
    let cos = dot(&a.data, &b.data) / (na * nb).sqrt();
    Ok(cos.clamp(-1.0, 1.0))
}

/// SplitMix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[lo, hi)` from the top 53 bits of the next output.
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidRange { lo, hi });
        }
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let v = lo + (hi - lo) * u;
        // rounding can land exactly on `hi` for narrow intervals
        Ok(if v < hi { v } else { lo })
    }
}

/// Multiply-accumulate counter with per-tag sub-counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacCounter<K: Ord> {
    total: u64,
    tagged: BTreeMap<K, u64>,
}

impl<K: Ord> Default for MacCounter<K> {
    fn default() -> Self {
        Self {
            total: 0,
            tagged: BTreeMap::new(),
        }
    }
}

impl<K: Ord + Copy> MacCounter<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tag: K, macs: u64) {
        self.total += macs;
        *self.tagged.entry(tag).or_insert(0) += macs;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, tag: &K) -> u64 {
        self.tagged.get(tag).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> &BTreeMap<K, u64> {
        &self.tagged
    }

    pub fn into_entries(self) -> BTreeMap<K, u64> {
        self.tagged
    }
}
