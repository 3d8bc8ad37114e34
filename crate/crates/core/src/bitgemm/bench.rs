use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bit_gemm, BitMatrix, MAX_BITS, TILE};
use crate::error::{contract, Result};

pub const BENCH_CSV_HEADER: &str = "size,m_bits,k_bits,total_bits,median_ns,fp32_ns,speedup";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub m_bits: u32,
    pub k_bits: u32,
    pub total_bits: u32,
    pub median_ns: u128,
    pub fp32_ns: u128,
    pub speedup: f64,
}

#[inline(always)]
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

/// Baseline `C = A * B` with `a` row-major `m x p` and `bt` holding `B`
/// transposed (`n x p`), tiled exactly like [`bit_gemm`].
pub fn fp32_gemm(a: &[f32], bt: &[f32], m: usize, p: usize, n: usize, out: &mut [f32]) {
    assert_eq!(a.len(), m * p);
    assert_eq!(bt.len(), n * p);
    assert_eq!(out.len(), m * n);
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                let ra = &a[i * p..(i + 1) * p];
                for j in j0..(j0 + TILE).min(n) {
                    out[i * n + j] = dot8(ra, &bt[j * p..(j + 1) * p]);
                }
            }
        }
    }
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn time<F: FnMut()>(repeats: usize, mut f: F) -> u128 {
    median(
        (0..repeats)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_nanos()
            })
            .collect(),
    )
}

/// Times square `size x size x size` products for each bit pair against the
/// fp32 baseline. One row per `(size, M, K)`, in input order.
pub fn bench_gemm(sizes: &[usize], bit_pairs: &[(u32, u32)], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(contract(format!("repeats must be at least 3, got {repeats}")));
    }
    if let Some(s) = sizes.iter().find(|&&s| s < 64) {
        return Err(contract(format!("benchmark sizes must be at least 64, got {s}")));
    }
    if let Some(&(m, k)) = bit_pairs
        .iter()
        .find(|(m, k)| !(1..=MAX_BITS).contains(m) || !(1..=MAX_BITS).contains(k))
    {
        return Err(contract(format!("bit pair {m}x{k} outside 1..={MAX_BITS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len() * bit_pairs.len());
    for &size in sizes {
        let n2 = size * size;
        let a: Vec<f32> = (0..n2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0f32; n2];
        let fp32_ns = time(repeats, || {
            fp32_gemm(black_box(&a), black_box(&b), size, size, size, &mut c);
            black_box(&c);
        });
        for &(mb, kb) in bit_pairs {
            let ai: Vec<u32> = (0..n2).map(|_| rng.gen_range(0..1u32 << mb)).collect();
            let bi: Vec<u32> = (0..n2).map(|_| rng.gen_range(0..1u32 << kb)).collect();
            let pa = BitMatrix::pack(&ai, size, size, mb)?;
            let pb = BitMatrix::pack(&bi, size, size, kb)?;
            let median_ns = time(repeats, || {
                black_box(bit_gemm(black_box(&pa), black_box(&pb)).expect("shapes agree"));
            });
            rows.push(BenchRow {
                size,
                m_bits: mb,
                k_bits: kb,
                total_bits: mb * kb,
                median_ns,
                fp32_ns,
                speedup: fp32_ns as f64 / median_ns.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.m_bits.to_string(),
            r.k_bits.to_string(),
            r.total_bits.to_string(),
            r.median_ns.to_string(),
            r.fp32_ns.to_string(),
            format!("{:.4}", r.speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ranks with ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. NaN when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp32_matches_naive() {
        let (m, p, n) = (70, 13, 65);
        let a: Vec<f32> = (0..m * p).map(|i| (i % 7) as f32 - 3.0).collect();
        let bt: Vec<f32> = (0..n * p).map(|i| (i % 5) as f32 * 0.5).collect();
        let mut c = vec![0f32; m * n];
        fp32_gemm(&a, &bt, m, p, n, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..p).map(|k| a[i * p + k] * bt[j * p + k]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
    }

    #[test]
    fn row_count_and_csv() {
        let rows = bench_gemm(&[64, 128], &[(1, 1), (2, 3), (8, 8)], 3, 0).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[4].total_bits, 6);
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), BENCH_CSV_HEADER);
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn bench_rejects_bad_args() {
        assert!(bench_gemm(&[64], &[(1, 1)], 2, 0).is_err());
        assert!(bench_gemm(&[32], &[(1, 1)], 3, 0).is_err());
        assert!(bench_gemm(&[64], &[(9, 1)], 3, 0).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ties get average ranks: x ranks (1.5, 1.5, 3), y ranks (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.8660254037844386).abs() < 1e-12, "{r}");
    }
}
