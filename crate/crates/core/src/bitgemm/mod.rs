//! Fixed-point matrix products from bit planes.
//!
//! An `M`-bit unsigned integer vector `x` splits into planes `c_m(x)` with
//! `x = sum_m c_m(x) 2^m`. The dot product of an `M`-bit and a `K`-bit
//! vector is then
//!
//! ```text
//! x . y = sum_{m<M} sum_{k<K} 2^(m+k) popcount(c_m(x) & c_k(y))
//! ```
//!
//! so a GEMM costs `M * K` AND/popcount sweeps per output element.

mod bench;

pub use bench::{bench_gemm, fp32_gemm, spearman, write_bench_csv, BenchRow, BENCH_CSV_HEADER};

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;
pub const MAX_BITS: u32 = 8;

/// Bit-plane packed matrix of unsigned `bits`-bit integers.
///
/// `planes[m]` holds bit `m` of every element, row-major, each row padded
/// with zero bits to a whole number of words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bits: u32,
    words_per_row: usize,
    planes: Vec<Vec<u64>>,
}

impl BitMatrix {
    /// Packs a row-major `rows x cols` integer matrix.
    pub fn pack(ints: &[u32], rows: usize, cols: usize, bits: u32) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::Validation(format!("bit width {bits} outside 1..={MAX_BITS}")));
        }
        if rows == 0 || cols == 0 || ints.len() != rows * cols {
            return Err(Error::Dimension {
                op: "pack",
                lhs: vec![rows, cols],
                rhs: vec![ints.len()],
            });
        }
        let words_per_row = cols.div_ceil(WORD_BITS);
        let mut planes = vec![vec![0u64; rows * words_per_row]; bits as usize];
        for r in 0..rows {
            for c in 0..cols {
                let v = ints[r * cols + c];
                if v >> bits != 0 {
                    return Err(Error::Range {
                        index: (r, c),
                        value: v,
                        bits,
                    });
                }
                let word = r * words_per_row + c / WORD_BITS;
                let bit = c % WORD_BITS;
                for (m, plane) in planes.iter_mut().enumerate() {
                    plane[word] |= (((v >> m) & 1) as u64) << bit;
                }
            }
        }
        Ok(BitMatrix {
            rows,
            cols,
            bits,
            words_per_row,
            planes,
        })
    }

    /// Packs the transpose of a row-major `rows x cols` matrix, so that its
    /// columns become contiguous bit rows. This is the layout `bit_gemm`
    /// expects for the right operand.
    pub fn pack_transposed(ints: &[u32], rows: usize, cols: usize, bits: u32) -> Result<Self> {
        if ints.len() != rows * cols {
            return Err(Error::Dimension {
                op: "pack_transposed",
                lhs: vec![rows, cols],
                rhs: vec![ints.len()],
            });
        }
        let mut t = vec![0u32; ints.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = ints[r * cols + c];
            }
        }
        Self::pack(&t, cols, rows, bits).map_err(|e| match e {
            Error::Range { index, value, bits } => Error::Range {
                index: (index.1, index.0),
                value,
                bits,
            },
            other => other,
        })
    }

    pub fn unpack(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let word = r * self.words_per_row + c / WORD_BITS;
                let bit = c % WORD_BITS;
                out[r * self.cols + c] = self
                    .planes
                    .iter()
                    .enumerate()
                    .map(|(m, p)| (((p[word] >> bit) & 1) as u32) << m)
                    .sum();
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Words of plane `m` for row `r`.
    pub fn plane_row(&self, m: usize, r: usize) -> &[u64] {
        &self.planes[m][r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn row(&self, r: usize) -> BitRow<'_> {
        assert!(r < self.rows, "row {r} out of {}", self.rows);
        BitRow { matrix: self, row: r }
    }

    /// Row sums of the unpacked integers.
    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.rows)
            .map(|r| {
                (0..self.bits as usize)
                    .map(|m| {
                        let ones: u64 = self.plane_row(m, r).iter().map(|w| w.count_ones() as u64).sum();
                        ones << m
                    })
                    .sum()
            })
            .collect()
    }
}

/// One row of a [`BitMatrix`].
#[derive(Clone, Copy, Debug)]
pub struct BitRow<'a> {
    matrix: &'a BitMatrix,
    row: usize,
}

impl BitRow<'_> {
    pub fn len(&self) -> usize {
        self.matrix.cols
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.cols == 0
    }
}

#[inline(always)]
fn and_popcount(a: &[u64], b: &[u64]) -> u64 {
    let mut acc = 0u64;
    for (x, y) in a.iter().zip(b) {
        acc += (x & y).count_ones() as u64;
    }
    acc
}

#[inline(always)]
fn dot_planes(a: &BitMatrix, i: usize, b: &BitMatrix, j: usize) -> u64 {
    let mut acc = 0u64;
    for m in 0..a.bits as usize {
        let pa = a.plane_row(m, i);
        for k in 0..b.bits as usize {
            acc += and_popcount(pa, b.plane_row(k, j)) << (m + k);
        }
    }
    acc
}

/// Integer dot product of two equally long bit rows.
pub fn bit_dot(x: BitRow<'_>, y: BitRow<'_>) -> Result<u64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "bit_dot",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    Ok(dot_planes(x.matrix, x.row, y.matrix, y.row))
}

/// Tile edge shared by the bit kernel and the fp32 baseline.
pub(crate) const TILE: usize = 64;

#[inline(always)]
fn gemm_tiled(a: &BitMatrix, bt: &BitMatrix, out: &mut [u64]) {
    let (m, n) = (a.rows, bt.rows);
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                let row = &mut out[i * n..(i + 1) * n];
                for (j, c) in row.iter_mut().enumerate().take((j0 + TILE).min(n)).skip(j0) {
                    *c = dot_planes(a, i, bt, j);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vpopcntdq,popcnt")]
unsafe fn gemm_avx512(a: &BitMatrix, bt: &BitMatrix, out: &mut [u64]) {
    gemm_tiled(a, bt, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn gemm_popcnt(a: &BitMatrix, bt: &BitMatrix, out: &mut [u64]) {
    gemm_tiled(a, bt, out)
}

fn gemm_portable(a: &BitMatrix, bt: &BitMatrix, out: &mut [u64]) {
    gemm_tiled(a, bt, out)
}

/// Which popcount path [`bit_gemm`] takes on this machine.
pub fn kernel_name() -> &'static str {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512vpopcntdq") && is_x86_feature_detected!("avx512f") {
            return "avx512vpopcntdq";
        }
        if is_x86_feature_detected!("popcnt") {
            return "popcnt";
        }
    }
    "portable"
}

/// `C = A * B` where `a` is `m x p` and `bt` holds `B` transposed (`n x p`).
/// Returns `C` row-major, `m x n`.
pub fn bit_gemm(a: &BitMatrix, bt: &BitMatrix) -> Result<Vec<u64>> {
    if a.cols != bt.cols {
        return Err(Error::Dimension {
            op: "bit_gemm",
            lhs: vec![a.rows, a.cols],
            rhs: vec![bt.cols, bt.rows],
        });
    }
    let mut out = vec![0u64; a.rows * bt.rows];
    match kernel_name() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: the required CPU features were detected at runtime.
        "avx512vpopcntdq" => unsafe { gemm_avx512(a, bt, &mut out) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        "popcnt" => unsafe { gemm_popcnt(a, bt, &mut out) },
        _ => gemm_portable(a, bt, &mut out),
    }
    Ok(out)
}

/// Maps integer products of `i / (2^M - 1)` and `j / (2^K - 1)` levels back
/// to reals.
pub fn dequantize_product(c: &[u64], m_bits: u32, k_bits: u32) -> Vec<f64> {
    let denom = (((1u64 << m_bits) - 1) * ((1u64 << k_bits) - 1)) as f64;
    c.iter().map(|&v| v as f64 / denom).collect()
}

/// Real product of weights `w = 2q - 1` (codes of `q` in `q`) against
/// activations `a` (codes in `at`, stored transposed), computed from the
/// unsigned bit GEMM plus a per-column correction.
pub fn signed_weight_gemm(q: &BitMatrix, at: &BitMatrix) -> Result<Vec<f64>> {
    let c = bit_gemm(q, at)?;
    let prod = dequantize_product(&c, q.bits, at.bits);
    let act_scale = ((1u64 << at.bits) - 1) as f64;
    let col_sums: Vec<f64> = at.row_sums().iter().map(|&s| s as f64 / act_scale).collect();
    let n = at.rows;
    Ok(prod
        .iter()
        .enumerate()
        .map(|(idx, &p)| 2.0 * p - col_sums[idx % n])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn int_gemm(a: &[u32], b: &[u32], m: usize, p: usize, n: usize) -> Vec<u64> {
        let mut c = vec![0u64; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..p).map(|k| a[i * p + k] as u64 * b[k * n + j] as u64).sum();
            }
        }
        c
    }

    fn random_ints(rng: &mut ChaCha8Rng, len: usize, bits: u32) -> Vec<u32> {
        (0..len).map(|_| rng.gen_range(0..1u32 << bits)).collect()
    }

    #[test]
    fn pack_examples() {
        let m = BitMatrix::pack(&[3], 1, 1, 2).unwrap();
        assert_eq!(m.plane_row(0, 0), &[1]);
        assert_eq!(m.plane_row(1, 0), &[1]);

        let z = BitMatrix::pack(&[0; 12], 3, 4, 1).unwrap();
        assert!(z.planes.iter().flatten().all(|&w| w == 0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ints = random_ints(&mut rng, 35, 4);
        assert_eq!(BitMatrix::pack(&ints, 7, 5, 4).unwrap().unpack(), ints);
    }

    #[test]
    fn pack_range_error_names_index() {
        let err = BitMatrix::pack(&[1, 2, 3, 4], 2, 2, 2).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Range {
                    index: (1, 1),
                    value: 4,
                    bits: 2
                }
            ),
            "{err}"
        );
        let err = BitMatrix::pack_transposed(&[1, 9, 3, 2], 2, 2, 3).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Range {
                    index: (0, 1),
                    value: 9,
                    ..
                }
            ),
            "{err}"
        );
        assert!(BitMatrix::pack(&[0], 1, 1, 9).is_err());
    }

    #[test]
    fn dot_examples() {
        let x = BitMatrix::pack(&[3], 1, 1, 2).unwrap();
        let y = BitMatrix::pack(&[2], 1, 1, 2).unwrap();
        assert_eq!(bit_dot(x.row(0), y.row(0)).unwrap(), 6);

        let x = BitMatrix::pack(&[1, 2, 3], 1, 3, 2).unwrap();
        let y = BitMatrix::pack(&[3, 2, 1], 1, 3, 2).unwrap();
        assert_eq!(bit_dot(x.row(0), y.row(0)).unwrap(), 10);

        let zero = BitMatrix::pack(&[0, 0, 0], 1, 3, 2).unwrap();
        assert_eq!(bit_dot(x.row(0), zero.row(0)).unwrap(), 0);

        let short = BitMatrix::pack(&[1, 1], 1, 2, 2).unwrap();
        assert!(bit_dot(x.row(0), short.row(0)).is_err());
    }

    #[test]
    fn gemm_hand_case() {
        let a = [1, 2, 3, 0, 1, 1];
        let b = [1, 1, 2, 0];
        let pa = BitMatrix::pack(&a, 3, 2, 2).unwrap();
        let pb = BitMatrix::pack_transposed(&b, 2, 2, 2).unwrap();
        assert_eq!(bit_gemm(&pa, &pb).unwrap(), vec![5, 1, 3, 3, 3, 1]);
    }

    #[test]
    fn identity_times_b() {
        let n = 6;
        let eye: Vec<u32> = (0..n * n).map(|i| (i / n == i % n) as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_ints(&mut rng, n * n, 5);
        let c = bit_gemm(
            &BitMatrix::pack(&eye, n, n, 1).unwrap(),
            &BitMatrix::pack_transposed(&b, n, n, 5).unwrap(),
        )
        .unwrap();
        assert_eq!(c, b.iter().map(|&v| v as u64).collect::<Vec<_>>());
    }

    #[test]
    fn exhaustive_small_bit_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mb in 1..=4 {
            for kb in 1..=4 {
                let a = random_ints(&mut rng, 64, mb);
                let b = random_ints(&mut rng, 64, kb);
                let c = bit_gemm(
                    &BitMatrix::pack(&a, 8, 8, mb).unwrap(),
                    &BitMatrix::pack_transposed(&b, 8, 8, kb).unwrap(),
                )
                .unwrap();
                assert_eq!(c, int_gemm(&a, &b, 8, 8, 8), "M={mb} K={kb}");
            }
        }
    }

    #[test]
    fn gemm_dimension_mismatch() {
        let a = BitMatrix::pack(&[1; 6], 2, 3, 1).unwrap();
        let b = BitMatrix::pack(&[1; 4], 2, 2, 1).unwrap();
        assert!(matches!(bit_gemm(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_product(&[7], 1, 1), vec![7.0]);
        let d = dequantize_product(&[6], 2, 2);
        assert!((d[0] - 1.0 * (2.0 / 3.0)).abs() < 1e-15);
        let one = dequantize_product(&[5], 3, 2)[0];
        let two = dequantize_product(&[10], 3, 2)[0];
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn signed_weights_match_real_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, p, n) = (5, 70, 3);
        for (mb, kb) in [(1, 1), (2, 3), (4, 4)] {
            let q = random_ints(&mut rng, m * p, mb);
            let a = random_ints(&mut rng, p * n, kb);
            let got = signed_weight_gemm(
                &BitMatrix::pack(&q, m, p, mb).unwrap(),
                &BitMatrix::pack_transposed(&a, p, n, kb).unwrap(),
            )
            .unwrap();
            let ws = ((1u32 << mb) - 1) as f64;
            let as_ = ((1u32 << kb) - 1) as f64;
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..p)
                        .map(|k| (2.0 * q[i * p + k] as f64 / ws - 1.0) * (a[k * n + j] as f64 / as_))
                        .sum();
                    assert!((got[i * n + j] - want).abs() < 1e-9, "M={mb} K={kb}");
                }
            }
        }
        // w = 1, a = 1
        let one = signed_weight_gemm(
            &BitMatrix::pack(&[1], 1, 1, 1).unwrap(),
            &BitMatrix::pack(&[1], 1, 1, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(one, vec![1.0]);
        // middle code at 8 bits is within half a step of w = 0
        let mid = signed_weight_gemm(
            &BitMatrix::pack(&[128; 4], 1, 4, 8).unwrap(),
            &BitMatrix::pack(&[3; 4], 1, 4, 2).unwrap(),
        )
        .unwrap();
        assert!(mid[0].abs() < 4.0 / 255.0 + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pack_roundtrip(rows in 1usize..9, cols in 1usize..140, bits in 1u32..=8, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ints = random_ints(&mut rng, rows * cols, bits);
            let packed = BitMatrix::pack(&ints, rows, cols, bits).unwrap();
            prop_assert_eq!(packed.unpack(), ints);
            // padding bits stay zero
            let tail = cols % WORD_BITS;
            if tail != 0 {
                for plane in &packed.planes {
                    for r in 0..rows {
                        let last = plane[(r + 1) * packed.words_per_row - 1];
                        prop_assert_eq!(last >> tail, 0);
                    }
                }
            }
        }

        #[test]
        fn padding_neutral(p in 1usize..200, seed: u64) {
            // same data with and without extra zero columns gives the same product
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (3, 4);
            let a = random_ints(&mut rng, m * p, 3);
            let b = random_ints(&mut rng, p * n, 2);
            let c = bit_gemm(
                &BitMatrix::pack(&a, m, p, 3).unwrap(),
                &BitMatrix::pack_transposed(&b, p, n, 2).unwrap(),
            ).unwrap();
            prop_assert_eq!(c, int_gemm(&a, &b, m, p, n));
        }
    }
}
