//! Banded kernels for the master-equation operator of a grid graph.
//!
//! With row-major cell numbering every nearest-neighbor edge joins indices at
//! most `n_x` apart, and elimination in index order keeps all fill-in inside
//! that band.

/// Square matrix storing only entries with `|i - j| <= bw`.
#[derive(Clone, Debug)]
pub(crate) struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub(crate) fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw);
        i * (2 * self.bw + 1) + j + self.bw - i
    }

    #[inline]
    pub(crate) fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.slot(i, j)]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j);
        self.data[k] = v;
    }

    /// Row `i` restricted to columns `lo..hi`.
    #[inline]
    fn row(&self, i: usize, lo: usize, hi: usize) -> &[f64] {
        let a = self.slot(i, lo);
        &self.data[a..a + (hi - lo)]
    }

    #[inline]
    fn row_mut(&mut self, i: usize, lo: usize, hi: usize) -> &mut [f64] {
        let a = self.slot(i, lo);
        &mut self.data[a..a + (hi - lo)]
    }
}

/// Stationary distribution of a continuous-time Markov chain by the
/// Grassmann-Taksar-Heyman state reduction.
///
/// `rates.get(i, j)` is the jump rate `i -> j` (`i != j`); the diagonal is
/// ignored. The chain must be irreducible. The elimination never subtracts,
/// so each entry of the result carries a small relative error even when the
/// distribution spans hundreds of orders of magnitude.
pub(crate) fn gth_stationary(mut rates: BandMatrix) -> Vec<f64> {
    let n = rates.n;
    let bw = rates.bw;
    let mut pivots = vec![0.0; n];
    let mut row_k = vec![0.0; bw];
    for k in (1..n).rev() {
        let lo = k.saturating_sub(bw);
        let width = k - lo;
        row_k[..width].copy_from_slice(rates.row(k, lo, k));
        let s: f64 = row_k[..width].iter().sum();
        pivots[k] = s;
        for i in lo..k {
            let f = rates.get(i, k) / s;
            if f == 0.0 {
                continue;
            }
            let diag = rates.get(i, i);
            for (x, &r) in rates.row_mut(i, lo, k).iter_mut().zip(&row_k[..width]) {
                *x += f * r;
            }
            // the diagonal is not part of the chain
            rates.set(i, i, diag);
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        let lo = k.saturating_sub(bw);
        let mut acc = 0.0;
        for (i, p) in pi.iter().enumerate().take(k).skip(lo) {
            acc += p * rates.get(i, k);
        }
        pi[k] = acc / pivots[k];
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    pi
}

/// In-place LU factorization without pivoting. Stable for the column
/// diagonally dominant matrices `I - dt Q` used by implicit propagation.
pub(crate) struct BandLu {
    lu: BandMatrix,
}

impl BandLu {
    pub(crate) fn factor(mut a: BandMatrix) -> Self {
        let n = a.n;
        let bw = a.bw;
        let mut pivot_row = vec![0.0; bw + 1];
        for k in 0..n {
            let hi = (k + bw + 1).min(n);
            let p = a.get(k, k);
            pivot_row[..hi - k].copy_from_slice(a.row(k, k, hi));
            for i in k + 1..hi {
                let l = a.get(i, k) / p;
                a.set(i, k, l);
                if l == 0.0 {
                    continue;
                }
                for (x, &u) in a.row_mut(i, k + 1, hi).iter_mut().zip(&pivot_row[1..hi - k]) {
                    *x -= l * u;
                }
            }
        }
        BandLu { lu: a }
    }

    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.lu.n;
        let bw = self.lu.bw;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let dot: f64 = self.lu.row(i, lo, i).iter().zip(&b[lo..i]).map(|(l, x)| l * x).sum();
            b[i] -= dot;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let dot: f64 = self.lu.row(i, i + 1, hi).iter().zip(&b[i + 1..hi]).map(|(u, x)| u * x).sum();
            b[i] = (b[i] - dot) / self.lu.get(i, i);
        }
    }
}
