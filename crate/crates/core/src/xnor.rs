//! Bit-packed `{-1, +1}` linear algebra.
//!
//! A sign is stored as one bit (`1` for `+1`, `0` for `-1`). For two packed
//! vectors of length `n`, `xnor` sets a bit wherever the signs agree, so the
//! dot product is `agreements - disagreements = 2 * popcount(xnor) - n`.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WORD: usize = 64;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Packed sign tensor. The trailing axes from `split` onward form one
/// packed row; each row starts on a fresh word and unused high bits of its
/// last word are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

/// One packed row.
#[derive(Debug, Clone, Copy)]
pub struct BitRow<'a> {
    pub words: &'a [u64],
    pub len: usize,
}

/// Integer result tensor of the xnor kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl BitTensor {
    /// Packs `x`, treating `shape[split..]` as the row.
    pub fn pack_rows(x: &Tensor, split: usize) -> Result<Self> {
        let shape = x.shape().to_vec();
        if split >= shape.len() {
            return Err(Error::shape("pack_rows split", &[shape.len().saturating_sub(1)], &[split]));
        }
        let row_len: usize = shape[split..].iter().product();
        let rows = x.len() / row_len;
        let words_per_row = words_for(row_len);
        let mut words = vec![0u64; rows * words_per_row];
        for (index, &value) in x.data().iter().enumerate() {
            let bit = if value == 1.0 {
                1
            } else if value == -1.0 {
                0
            } else {
                return Err(Error::NonBinary { index, value });
            };
            let (r, c) = (index / row_len, index % row_len);
            words[r * words_per_row + c / WORD] |= bit << (c % WORD);
        }
        Ok(Self {
            shape,
            row_len,
            words_per_row,
            words,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.words.len() / self.words_per_row
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    /// Meaningful bits in the final word of each row.
    pub fn valid_bits(&self) -> usize {
        match self.row_len % WORD {
            0 => WORD,
            r => r,
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> BitRow<'_> {
        BitRow {
            words: &self.words[r * self.words_per_row..(r + 1) * self.words_per_row],
            len: self.row_len,
        }
    }

    #[inline]
    pub fn bit(&self, r: usize, c: usize) -> bool {
        (self.words[r * self.words_per_row + c / WORD] >> (c % WORD)) & 1 == 1
    }

    #[inline]
    fn bit_flat(&self, index: usize) -> bool {
        self.bit(index / self.row_len, index % self.row_len)
    }

    pub fn unpack(&self) -> Tensor {
        let len = self.rows() * self.row_len;
        Tensor::new(
            self.shape.clone(),
            (0..len).map(|i| if self.bit_flat(i) { 1.0 } else { -1.0 }).collect(),
        )
        .expect("packed shape is consistent")
    }

    /// Repacks a 2-D tensor by columns: the result has shape `[cols, rows]`.
    pub fn transpose_2d(&self) -> Result<Self> {
        if self.shape.len() != 2 || self.row_len != self.shape[1] {
            return Err(Error::shape("transpose_2d", &[0, 0], &self.shape));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let words_per_row = words_for(rows);
        let mut words = vec![0u64; cols * words_per_row];
        for r in 0..rows {
            for c in 0..cols {
                if self.bit(r, c) {
                    words[c * words_per_row + r / WORD] |= 1 << (r % WORD);
                }
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            row_len: rows,
            words_per_row,
            words,
        })
    }
}

/// Packs along the innermost axis.
pub fn pack_bits(x: &Tensor) -> Result<BitTensor> {
    BitTensor::pack_rows(x, x.rank() - 1)
}

/// Packs conv kernels `[O, C, kh, kw]` with one row per output channel.
pub fn pack_kernels(kernels: &Tensor) -> Result<BitTensor> {
    if kernels.rank() != 4 {
        return Err(Error::shape("pack_kernels", &[0, 0, 0, 0], kernels.shape()));
    }
    BitTensor::pack_rows(kernels, 1)
}

#[inline]
fn dot_words(a: &[u64], b: &[u64], len: usize) -> i64 {
    let last = a.len() - 1;
    let mut agree = 0u32;
    for i in 0..last {
        agree += (!(a[i] ^ b[i])).count_ones();
    }
    agree += (!(a[last] ^ b[last]) & tail_mask(len)).count_ones();
    2 * agree as i64 - len as i64
}

pub fn xnor_dot(a: BitRow<'_>, b: BitRow<'_>) -> Result<i64> {
    if a.len != b.len || a.words.len() != b.words.len() {
        return Err(Error::shape("xnor_dot", &[a.len], &[b.len]));
    }
    if a.len == 0 {
        return Ok(0);
    }
    Ok(dot_words(a.words, b.words, a.len))
}

/// `A (M x K) * B (K x N)` where both are packed row-wise.
pub fn xnor_gemm(a: &BitTensor, b: &BitTensor) -> Result<IntTensor> {
    if b.shape.len() != 2 {
        return Err(Error::shape("xnor_gemm rhs", &[a.row_len, 0], &b.shape));
    }
    xnor_gemm_transposed(a, &b.transpose_2d()?)
}

/// `A (M x K) * B` with `B` given as its transpose `(N x K)`, packed
/// row-wise so both operands stream along `K`.
pub fn xnor_gemm_transposed(a: &BitTensor, b_t: &BitTensor) -> Result<IntTensor> {
    if a.shape.len() != 2 || b_t.shape.len() != 2 || a.row_len != b_t.row_len {
        return Err(Error::shape("xnor_gemm", &a.shape, &b_t.shape));
    }
    let (m, n, k) = (a.rows(), b_t.rows(), a.row_len);
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let ra = a.row(i).words;
        for j in 0..n {
            data.push(dot_words(ra, b_t.row(j).words, k));
        }
    }
    Ok(IntTensor {
        shape: vec![m, n],
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// Binary convolution of `input [N, C, H, W]` with kernels packed by
/// [`pack_kernels`]. Padded positions are excluded from each window rather
/// than filled with `-1`, which matches zero padding in the float domain.
pub fn xnor_conv2d(
    input: &BitTensor,
    kernels: &BitTensor,
    kernel_shape: [usize; 4],
    geom: Conv2dGeometry,
) -> Result<IntTensor> {
    let [o, kc, kh, kw] = kernel_shape;
    if input.shape.len() != 4 {
        return Err(Error::shape("xnor_conv2d input", &[0, kc, 0, 0], &input.shape));
    }
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if kernels.shape != kernel_shape || kernels.row_len != kc * kh * kw {
        return Err(Error::shape("xnor_conv2d kernels", &kernel_shape, &kernels.shape));
    }
    if kc != c {
        return Err(Error::shape("xnor_conv2d channels", &[c], &[kc]));
    }
    if geom.stride == 0 || h + 2 * geom.padding < kh || w + 2 * geom.padding < kw {
        return Err(Error::shape("xnor_conv2d geometry", &[kh, kw], &[h + 2 * geom.padding, w + 2 * geom.padding]));
    }
    let oh = (h + 2 * geom.padding - kh) / geom.stride + 1;
    let ow = (w + 2 * geom.padding - kw) / geom.stride + 1;
    let len = kernels.row_len;
    let wpr = words_for(len);
    let plane = h * w;

    let mut patch = vec![0u64; wpr];
    let mut mask = vec![0u64; wpr];
    let mut data = vec![0i64; n * o * oh * ow];
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                patch.fill(0);
                mask.fill(0);
                let mut idx = 0;
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * geom.stride + ky) as isize - geom.padding as isize;
                            let ix = (x * geom.stride + kx) as isize - geom.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                let flat = ((b * c + ch) * plane) + iy as usize * w + ix as usize;
                                let bit = 1u64 << (idx % WORD);
                                mask[idx / WORD] |= bit;
                                if input.bit_flat(flat) {
                                    patch[idx / WORD] |= bit;
                                }
                            }
                            idx += 1;
                        }
                    }
                }
                let active: i64 = mask.iter().map(|m| m.count_ones() as i64).sum();
                for k in 0..o {
                    let kr = kernels.row(k).words;
                    let agree: i64 = patch
                        .iter()
                        .zip(kr)
                        .zip(&mask)
                        .map(|((p, q), m)| (!(p ^ q) & m).count_ones() as i64)
                        .sum();
                    data[((b * o + k) * oh + y) * ow + x] = 2 * agree - active;
                }
            }
        }
    }
    Ok(IntTensor {
        shape: vec![n, o, oh, ow],
        data,
    })
}

/// Plain `f64` GEMM, the baseline for [`bench_xnor`].
pub fn float_gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchRow {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub xnor_ns: u128,
    pub float_ns: u128,
}

/// Times packed xnor GEMM against float GEMM on random sign matrices.
/// Packing is excluded from the xnor timing.
pub fn bench_xnor(m: usize, ks: &[usize], n: usize, reps: usize, rng: &mut impl rand::Rng) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut signs = |len: usize| -> Vec<f64> {
            (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let a = signs(m * k);
        let b = signs(k * n);
        let pa = pack_bits(&Tensor::new(vec![m, k], a.clone())?)?;
        let pbt = pack_bits(&Tensor::new(vec![k, n], b.clone())?)?.transpose_2d()?;

        let start = Instant::now();
        let mut sink = 0i64;
        for _ in 0..reps {
            sink ^= xnor_gemm_transposed(&pa, &pbt)?.data[0];
        }
        let xnor_ns = start.elapsed().as_nanos() / reps.max(1) as u128;

        let start = Instant::now();
        let mut fsink = 0.0;
        for _ in 0..reps {
            fsink += float_gemm(&a, &b, m, k, n)[0];
        }
        let float_ns = start.elapsed().as_nanos() / reps.max(1) as u128;
        std::hint::black_box((sink, fsink));

        rows.push(BenchRow {
            m,
            k,
            n,
            xnor_ns,
            float_ns,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("M,K,N,xnor_ns,float_ns\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.m, r.k, r.n, r.xnor_ns, r.float_ns));
    }
    out
}
