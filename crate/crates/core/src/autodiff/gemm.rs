//! Row-major matrix products on top of `matrixmultiply`.
//!
//! Every kernel accumulates into `c` (β = 1). Slice lengths are checked
//! before the raw-pointer call, which is the only unsafe code in the crate.

fn dgemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64]) {
    assert!(c.len() >= m * n, "gemm output too short");
    let span = |rs: isize, cs: isize, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rs as usize) * (rows - 1) + (cs as usize) * (cols - 1) + 1
        }
    };
    assert!(a.0.len() >= span(a.1, a.2, m, k) && b.0.len() >= span(b.1, b.2, k, n), "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if k <= 4 && b.2 == 1 {
        // Shallow products (e.g. single-sample dense gradients) are rank-1
        // updates; packing would dominate.
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let x = a.0[i * a.1 as usize + p * a.2 as usize];
                let b_row = &b.0[p * b.1 as usize..p * b.1 as usize + n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += x * bv;
                }
            }
        }
        return;
    }
    if m <= 4 && a.2 == 1 && b.1 == 1 {
        // Few output rows against a transposed operand: contiguous dot products.
        for i in 0..m {
            let a_row = &a.0[i * a.1 as usize..i * a.1 as usize + k];
            for j in 0..n {
                let b_col = &b.0[j * b.2 as usize..j * b.2 as usize + k];
                c[i * n + j] += dot(a_row, b_col);
            }
        }
        return;
    }
    // SAFETY: every index the kernel touches lies within the spans checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent lanes let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×n] += a[m×k] · b[k×n]`, each output summed strictly in `p` order
/// with separate multiply and add roundings.
///
/// Forward convolution relies on this to match a naive loop bit for bit;
/// the register-blocked tiles never reorder the reduction.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if k <= 4 {
        dgemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), c);
        return;
    }
    let b = &b[..k * n];
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for r in 0..MR {
                acc[r].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for (p, b_row) in b.chunks_exact(n).enumerate() {
                let bv: [f64; NR] = b_row[j..j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    let x = rows[r][p];
                    for l in 0..NR {
                        acc[r][l] += x * bv[l];
                    }
                }
            }
            for r in 0..MR {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
            }
            j += NR;
        }
        for r in 0..MR {
            ordered_row(rows[r], b, n, j, &mut c[(i + r) * n..(i + r + 1) * n]);
        }
        i += MR;
    }
    for r in i..m {
        ordered_row(&a[r * k..(r + 1) * k], b, n, 0, &mut c[r * n..(r + 1) * n]);
    }
}

const MR: usize = 4;
const NR: usize = 4;

/// Columns `from..n` of one output row, same reduction order as the tiles.
fn ordered_row(a_row: &[f64], b: &[f64], n: usize, from: usize, c_row: &mut [f64]) {
    if from == n {
        return;
    }
    for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
        for (cv, &bv) in c_row[from..].iter_mut().zip(&b_row[from..]) {
            *cv += x * bv;
        }
    }
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    dgemm(k, m, n, (a, 1, k as isize), (b, n as isize, 1), c);
}

/// `c[m×k] += a[m×n] · bᵀ` with `b[k×n]`.
pub(crate) fn gemm_abt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    dgemm(m, n, k, (a, n as isize, 1), (b, 1, n as isize), c);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn ordered_kernel_is_bitwise_naive() {
        for (m, k, n) in [(5, 9, 13), (8, 27, 16), (3, 6, 2), (16, 48, 37)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut c);
            assert_eq!(c, naive(m, k, n, &a, &b));
        }
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for (m, k, n) in [(3, 5, 7), (9, 6, 17), (4, 3, 8), (13, 2, 33)] {
            check(m, k, n);
        }
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut c);
        close(&c, &expected);

        let at = transpose(m, k, &a);
        let mut c2 = vec![0.0; m * n];
        gemm_atb(k, m, n, &at, &b, &mut c2);
        close(&c2, &expected);

        let bt = transpose(k, n, &b);
        let mut c3 = vec![0.0; m * n];
        gemm_abt(m, k, n, &a, &bt, &mut c3);
        close(&c3, &expected);
    }

    fn close(got: &[f64], want: &[f64]) {
        for (x, y) in got.iter().zip(want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}
