//! Banded complex linear algebra for the per-mode radial operators.

use num_complex::Complex64;

/// Square band matrix with `KL` sub- and `KU` super-diagonals, row major.
///
/// Entry `(i, j)` with `i − KL ≤ j ≤ i + KU` lives at `data[i * width + (j + KL − i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    pub data: Vec<Complex64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![Complex64::new(0.0, 0.0); n * (kl + ku + 1)],
        }
    }

    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if j + self.kl < i || j > i + self.ku {
            return Complex64::new(0.0, 0.0);
        }
        self.data[i * self.width() + (j + self.kl - i)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        assert!(j + self.kl >= i && j <= i + self.ku, "({i}, {j}) outside band");
        let w = self.width();
        self.data[i * w + (j + self.kl - i)] = v;
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[Complex64], y: &mut [Complex64]) {
        let w = self.width();
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut acc = Complex64::new(0.0, 0.0);
            for j in lo..=hi {
                acc += row[j + self.kl - i] * x[j];
            }
            y[i] = acc;
        }
    }

    /// `a·self + b·I`.
    pub fn shifted(&self, a: Complex64, b: Complex64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= a;
        }
        for i in 0..self.n {
            let d = out.get(i, i) + b;
            out.set(i, i, d);
        }
        out
    }

    /// LU factorization with partial pivoting.
    pub fn factor(&self) -> Option<BandLu> {
        BandLu::new(self)
    }
}

/// LU factors of a band matrix; `U` carries `KL + KU` super-diagonals after pivoting.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    uw: usize,
    /// Rows of `U`, each `uw = KL + KU + 1` wide starting at the diagonal.
    u: Vec<Complex64>,
    /// Multipliers, `KL` per column.
    l: Vec<Complex64>,
    piv: Vec<usize>,
}

impl BandLu {
    fn new(a: &BandMatrix) -> Option<Self> {
        let n = a.n;
        let kl = a.kl;
        let uw = a.kl + a.ku + 1;
        // Work rows stored from the diagonal: row i holds columns i..i+uw.
        let mut rows: Vec<Vec<Complex64>> = Vec::with_capacity(n);
        let zero = Complex64::new(0.0, 0.0);
        // Row i of A in absolute columns [i−kl, i+ku]; keep a dense window per row.
        let mut dense: Vec<Vec<Complex64>> = (0..n)
            .map(|i| {
                let mut r = vec![zero; kl + uw];
                for j in i.saturating_sub(kl)..=(i + a.ku).min(n - 1) {
                    r[j + kl - i] = a.get(i, j);
                }
                r
            })
            .collect();
        // dense[i][c] is column i − kl + c.
        let mut l = vec![zero; n * kl.max(1)];
        let mut piv = vec![0; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let col = |i: usize| kl + k - i;
            let mut p = k;
            let mut best = dense[k][col(k)].norm();
            for i in k + 1..=last {
                let v = dense[i][col(i)].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            piv[k] = p;
            if p != k {
                // Align both rows to absolute columns k..k+uw before swapping.
                let rk: Vec<Complex64> = (0..uw).map(|c| get_abs(&dense[k], k, kl, k + c)).collect();
                let rp: Vec<Complex64> = (0..uw).map(|c| get_abs(&dense[p], p, kl, k + c)).collect();
                for c in 0..uw {
                    set_abs(&mut dense[k], k, kl, k + c, rp[c]);
                    set_abs(&mut dense[p], p, kl, k + c, rk[c]);
                }
            }
            let pivot = dense[k][col(k)];
            for i in k + 1..=last {
                let m = dense[i][col(i)] / pivot;
                l[k * kl.max(1) + (i - k - 1)] = m;
                if m != zero {
                    for c in 0..uw {
                        let j = k + c;
                        if j >= n {
                            break;
                        }
                        let v = get_abs(&dense[i], i, kl, j) - m * get_abs(&dense[k], k, kl, j);
                        set_abs(&mut dense[i], i, kl, j, v);
                    }
                }
                set_abs(&mut dense[i], i, kl, k, zero);
            }
            let row: Vec<Complex64> = (0..uw).map(|c| get_abs(&dense[k], k, kl, k + c)).collect();
            rows.push(row);
        }
        let mut u = Vec::with_capacity(n * uw);
        for r in rows {
            u.extend(r);
        }
        Some(Self { n, kl, uw, u, l, piv })
    }

    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &mut [Complex64]) {
        let n = self.n;
        let kl = self.kl;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                b[i] -= self.l[k * kl.max(1) + (i - k - 1)] * bk;
            }
        }
        for k in (0..n).rev() {
            let row = &self.u[k * self.uw..(k + 1) * self.uw];
            let mut acc = b[k];
            for c in 1..self.uw {
                let j = k + c;
                if j >= n {
                    break;
                }
                acc -= row[c] * b[j];
            }
            b[k] = acc / row[0];
        }
    }
}

// Row `i` stores columns `i − kl ..`; reach up to `i + kl + ku` is needed after
// pivoting, so the window holds `kl + uw` entries.
fn get_abs(row: &[Complex64], i: usize, kl: usize, j: usize) -> Complex64 {
    let c = j + kl;
    if c < i || c - i >= row.len() {
        Complex64::new(0.0, 0.0)
    } else {
        row[c - i]
    }
}

fn set_abs(row: &mut [Complex64], i: usize, kl: usize, j: usize, v: Complex64) {
    let c = j + kl - i;
    row[c] = v;
}

/// Fourth-order second-difference stencil with homogeneous Dirichlet ends,
/// as a symmetric pentadiagonal matrix on `n` interior points.
pub fn second_difference(n: usize, dr: f64) -> BandMatrix {
    let mut m = BandMatrix::zeros(n, 2, 2);
    let s = 1.0 / (12.0 * dr * dr);
    let c = |v: f64| Complex64::new(v * s, 0.0);
    for i in 0..n {
        m.set(i, i, c(-30.0));
        if i + 1 < n {
            m.set(i, i + 1, c(16.0));
            m.set(i + 1, i, c(16.0));
        }
        if i + 2 < n {
            m.set(i, i + 2, c(-1.0));
            m.set(i + 2, i, c(-1.0));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn dense(a: &BandMatrix) -> DMatrix<Complex64> {
        DMatrix::from_fn(a.n, a.n, |i, j| a.get(i, j))
    }

    fn random_band(n: usize, seed: u64) -> BandMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = BandMatrix::zeros(n, 2, 2);
        for i in 0..n {
            for j in i.saturating_sub(2)..=(i + 2).min(n - 1) {
                a.set(i, j, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            }
        }
        a
    }

    #[test]
    fn solve_matches_dense_solver() {
        for seed in 0..5 {
            let a = random_band(40, seed);
            let b: Vec<Complex64> = (0..40).map(|i| Complex64::new(i as f64, 1.0 - i as f64 * 0.1)).collect();
            let mut x = b.clone();
            a.factor().unwrap().solve(&mut x);
            let oracle = dense(&a).lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            for i in 0..40 {
                assert!((x[i] - oracle[i]).norm() < 1e-9 * (1.0 + oracle[i].norm()));
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let mut a = BandMatrix::zeros(3, 2, 2);
        a.set(0, 1, Complex64::new(1.0, 0.0));
        a.set(1, 0, Complex64::new(1.0, 0.0));
        a.set(2, 2, Complex64::new(2.0, 0.0));
        let mut x = vec![Complex64::new(3.0, 0.0), Complex64::new(4.0, 0.0), Complex64::new(2.0, 0.0)];
        a.factor().unwrap().solve(&mut x);
        assert!((x[0] - 4.0).norm() < 1e-14 && (x[1] - 3.0).norm() < 1e-14 && (x[2] - 1.0).norm() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        assert!(BandMatrix::zeros(4, 2, 2).factor().is_none());
    }

    #[test]
    fn stencil_is_fourth_order() {
        let err = |n: usize| {
            let l = std::f64::consts::PI;
            let dr = l / (n + 1) as f64;
            let d2 = second_difference(n, dr);
            let x: Vec<Complex64> = (0..n).map(|i| Complex64::new(((i + 1) as f64 * dr).sin(), 0.0)).collect();
            let mut y = vec![Complex64::new(0.0, 0.0); n];
            d2.mul_vec(&x, &mut y);
            // Skip the two rows next to each end, where the stencil sees the odd extension.
            (2..n - 2).map(|i| (y[i] + x[i]).norm()).fold(0.0, f64::max)
        };
        let ratio = err(100) / err(200);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn mul_then_solve_roundtrips(seed in 0u64..1000, n in 3usize..30) {
            let a = random_band(n, seed).shifted(Complex64::new(1.0, 0.0), Complex64::new(3.0, 0.5));
            let x: Vec<Complex64> = (0..n).map(|i| Complex64::new((i as f64).cos(), (i as f64).sin())).collect();
            let mut b = vec![Complex64::new(0.0, 0.0); n];
            a.mul_vec(&x, &mut b);
            a.factor().unwrap().solve(&mut b);
            for i in 0..n {
                prop_assert!((b[i] - x[i]).norm() < 1e-9);
            }
        }
    }
}
