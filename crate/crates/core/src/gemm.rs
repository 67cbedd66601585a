//! Register-blocked dense matrix product for the small shapes the Q-networks
//! use (batch 32, widths 10..64). All matrices are row-major.

use crate::nn::Real;

const MR: usize = 4;
const NR: usize = 16;

/// Left operand of a product, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Lhs<'a, T> {
    data: &'a [T],
    ld: usize,
    transposed: bool,
}

impl<'a, T: Real> Lhs<'a, T> {
    /// `data` holds an `m x k` matrix with row stride `ld`.
    pub(crate) fn normal(data: &'a [T], ld: usize) -> Self {
        Self {
            data,
            ld,
            transposed: false,
        }
    }

    /// `data` holds a `k x m` matrix with row stride `ld`, used as its transpose.
    pub(crate) fn transposed(data: &'a [T], ld: usize) -> Self {
        Self {
            data,
            ld,
            transposed: true,
        }
    }

    #[inline(always)]
    fn at(&self, row: usize, p: usize) -> T {
        if self.transposed {
            self.data[p * self.ld + row]
        } else {
            self.data[row * self.ld + p]
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`; `b` and `c` have row strides `n`.
pub(crate) fn gemm_acc<T: Real>(m: usize, n: usize, k: usize, a: Lhs<'_, T>, b: &[T], c: &mut [T]) {
    debug_assert!(b.len() >= k * n && c.len() >= m * n);
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;

    let mut panel = vec![T::zero(); k * MR];
    for i0 in (0..full_rows).step_by(MR) {
        for (p, slot) in panel.chunks_exact_mut(MR).enumerate() {
            for (r, v) in slot.iter_mut().enumerate() {
                *v = a.at(i0 + r, p);
            }
        }
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (av, brow) in panel.chunks_exact(MR).zip(b.chunks_exact(n)) {
                let bv: &[T; NR] = brow[j0..j0 + NR].try_into().unwrap();
                for r in 0..MR {
                    for col in 0..NR {
                        acc[r][col] += av[r] * bv[col];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let out = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        if full_cols < n {
            edge(i0..i0 + MR, full_cols..n, k, a, b, n, c);
        }
    }
    if full_rows < m {
        edge(full_rows..m, 0..n, k, a, b, n, c);
    }
}

fn edge<T: Real>(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    a: Lhs<'_, T>,
    b: &[T],
    n: usize,
    c: &mut [T],
) {
    for i in rows {
        let out = &mut c[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let ai = a.at(i, p);
            for (o, &bv) in out.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *o += ai * bv;
            }
        }
    }
}
