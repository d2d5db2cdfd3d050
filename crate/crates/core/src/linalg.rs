//! Fixed-size helpers for the 1×1 and 2×2 covariance blocks, plus a small
//! dense Cholesky used by the joint mean updates.

use alloc::vec;
use alloc::vec::Vec;

/// Symmetric 2×2 matrix `[[s11, s12], [s12, s22]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 { s11: 1.0, s12: 0.0, s22: 1.0 };

    pub const fn new(s11: f64, s12: f64, s22: f64) -> Self {
        Sym2 { s11, s12, s22 }
    }

    pub const fn diag(a: f64, b: f64) -> Self {
        Sym2 { s11: a, s12: 0.0, s22: b }
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    pub fn is_finite(&self) -> bool {
        self.s11.is_finite() && self.s12.is_finite() && self.s22.is_finite()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.is_finite() && self.s11 > 0.0 && self.det() > 0.0
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if !(det > 0.0 && self.s11 > 0.0) {
            return None;
        }
        Some(Sym2 {
            s11: self.s22 / det,
            s12: -self.s12 / det,
            s22: self.s11 / det,
        })
    }

    /// Lower Cholesky factor `(l11, l21, l22)`.
    pub fn cholesky(&self) -> Option<(f64, f64, f64)> {
        if !self.is_positive_definite() {
            return None;
        }
        let l11 = libm::sqrt(self.s11);
        let l21 = self.s12 / l11;
        let l22 = libm::sqrt(self.s22 - l21 * l21);
        (l22 > 0.0).then_some((l11, l21, l22))
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: [f64; 2]) -> f64 {
        self.s11 * x[0] * x[0] + 2.0 * self.s12 * x[0] * x[1] + self.s22 * x[1] * x[1]
    }

    pub fn mul_vec(&self, x: [f64; 2]) -> [f64; 2] {
        [
            self.s11 * x[0] + self.s12 * x[1],
            self.s12 * x[0] + self.s22 * x[1],
        ]
    }

    pub fn add(&self, o: &Sym2) -> Sym2 {
        Sym2::new(self.s11 + o.s11, self.s12 + o.s12, self.s22 + o.s22)
    }

    pub fn scale(&self, k: f64) -> Sym2 {
        Sym2::new(self.s11 * k, self.s12 * k, self.s22 * k)
    }

    /// `tr(self · o)` for symmetric arguments.
    pub fn trace_product(&self, o: &Sym2) -> f64 {
        self.s11 * o.s11 + 2.0 * self.s12 * o.s12 + self.s22 * o.s22
    }

    /// Outer product `x xᵀ`.
    pub fn outer(x: [f64; 2]) -> Sym2 {
        Sym2::new(x[0] * x[0], x[0] * x[1], x[1] * x[1])
    }
}

/// Dense row-major square matrix of dimension `k`, for small `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub k: usize,
    pub a: Vec<f64>,
}

impl Dense {
    pub fn zeros(k: usize) -> Self {
        Dense { k, a: vec![0.0; k * k] }
    }

    pub fn identity_scaled(k: usize, v: f64) -> Self {
        let mut m = Self::zeros(k);
        for i in 0..k {
            m.a[i * k + i] = v;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.k + j]
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.k + j] += v;
    }

    /// In-place lower Cholesky factorisation. The strict upper triangle is
    /// zeroed. Returns `None` if the matrix is not positive definite.
    pub fn cholesky(mut self) -> Option<Dense> {
        let k = self.k;
        for j in 0..k {
            let mut d = self.a[j * k + j];
            for p in 0..j {
                d -= self.a[j * k + p] * self.a[j * k + p];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = libm::sqrt(d);
            self.a[j * k + j] = d;
            for i in (j + 1)..k {
                let mut s = self.a[i * k + j];
                for p in 0..j {
                    s -= self.a[i * k + p] * self.a[j * k + p];
                }
                self.a[i * k + j] = s / d;
            }
            for i in 0..j {
                self.a[i * k + j] = 0.0;
            }
        }
        Some(self)
    }

    /// Solve `L x = b` for lower-triangular `self`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut x = b.to_vec();
        for i in 0..k {
            let mut s = x[i];
            for p in 0..i {
                s -= self.a[i * k + p] * x[p];
            }
            x[i] = s / self.a[i * k + i];
        }
        x
    }

    /// Solve `Lᵀ x = b` for lower-triangular `self`.
    pub fn solve_upper_t(&self, b: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut x = b.to_vec();
        for i in (0..k).rev() {
            let mut s = x[i];
            for p in (i + 1)..k {
                s -= self.a[p * k + i] * x[p];
            }
            x[i] = s / self.a[i * k + i];
        }
        x
    }
}
