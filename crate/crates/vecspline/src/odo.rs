//! Scalar ordinary differential operators: real polynomials in the derivative
//! operator D, their roots, and causal Green's functions.

use nalgebra::{Complex, DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::{ExpPolyTerm, GeneralizedFunction};

/// A scalar differential operator `sum_n coeffs[n] D^n`, stored with ascending
/// coefficients and normalized so that the last coefficient is nonzero.
/// The zero operator has an empty coefficient list and degree -1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdoPoly {
    coeffs: Vec<f64>,
}

/// Clustered roots of an operator polynomial, with multiplicities.
#[derive(Clone, Debug)]
pub struct RootSet {
    pub roots: Vec<(Complex64, usize)>,
    pub leading_coeff: f64,
}

impl OdoPoly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        let mut p = Self { coeffs };
        p.normalize();
        p
    }

    pub fn zero() -> Self {
        Self { coeffs: vec![] }
    }

    pub fn identity() -> Self {
        Self { coeffs: vec![1.0] }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![c])
    }

    /// The operator `D^n`.
    pub fn derivative(n: usize) -> Self {
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        Self { coeffs: c }
    }

    fn normalize(&mut self) {
        while self.coeffs.last().is_some_and(|&c| c == 0.0) {
            self.coeffs.pop();
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Degree in D; -1 for the zero operator.
    pub fn degree(&self) -> i64 {
        self.coeffs.len() as i64 - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn leading_coeff(&self) -> f64 {
        *self.coeffs.last().unwrap_or(&0.0)
    }

    /// Operator composition = polynomial product.
    pub fn compose(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::new(out)
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![0.0; n];
        for (i, &a) in self.coeffs.iter().enumerate() {
            out[i] += a;
        }
        for (i, &b) in other.coeffs.iter().enumerate() {
            out[i] += b;
        }
        Self::new(out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(self.coeffs.iter().map(|&a| a * c).collect())
    }

    /// Formal adjoint: coefficient `n` picks up `(-1)^n`.
    pub fn adjoint(&self) -> Self {
        Self::new(
            self.coeffs
                .iter()
                .enumerate()
                .map(|(n, &a)| if n % 2 == 0 { a } else { -a })
                .collect(),
        )
    }

    /// Evaluates the symbol `p(s)` at a complex point.
    pub fn eval_symbol(&self, s: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = acc * s + c;
        }
        acc
    }

    /// Roots of the symbol as companion-matrix eigenvalues, clustered with the
    /// given tolerance (0 selects a spectral-radius-scaled default).
    pub fn roots(&self, cluster_tol: f64) -> Result<RootSet> {
        let n = self.degree();
        if n < 1 {
            return Err(Error::NoRoots(format!(
                "degree {n} operator has no roots"
            )));
        }
        let n = n as usize;
        let lead = self.leading_coeff();

        // deflate exact roots at zero (common D^k factors); this keeps the
        // companion matrix away from the nilpotent case, where the QR
        // eigenvalue iteration can fail to converge
        let zero_mult = self.coeffs.iter().take_while(|&&c| c == 0.0).count();
        let reduced = &self.coeffs[zero_mult..];
        let m = reduced.len() - 1;
        let mut vals: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); zero_mult];
        if m > 0 {
            let mut companion = DMatrix::<f64>::zeros(m, m);
            for i in 1..m {
                companion[(i, i - 1)] = 1.0;
            }
            for i in 0..m {
                companion[(i, m - 1)] = -reduced[i] / lead;
            }
            let schur = nalgebra::linalg::Schur::try_new(companion, 1e-14, 10_000)
                .ok_or_else(|| {
                    Error::NoRoots("eigenvalue iteration did not converge".into())
                })?;
            let eigs = schur.complex_eigenvalues();
            vals.extend(eigs.iter().map(|z| Complex64::new(z.re, z.im)));
        }
        debug_assert_eq!(vals.len(), n);
        Ok(RootSet {
            roots: cluster_roots(vals, cluster_tol),
            leading_coeff: lead,
        })
    }

    /// The unique causal Green's function.
    ///
    /// For degree >= 1 this is the causal exponential-polynomial determined by
    /// `g^(k)(0+) = 0` for `k <= deg-2` and `g^(deg-1)(0+) = 1/leading_coeff`.
    /// A nonzero constant operator yields the pure Dirac `delta / c`.
    pub fn causal_green(&self) -> Result<GeneralizedFunction> {
        if self.is_zero() {
            return Err(Error::ZeroOperator);
        }
        if self.degree() == 0 {
            return Ok(GeneralizedFunction::dirac(0.0, 0, 1.0 / self.coeffs[0]));
        }
        let root_set = self.roots(0.0)?;
        let n = self.degree() as usize;

        // basis functions t^j e^{alpha t} for each root; solve the confluent
        // Vandermonde system from the initial conditions at 0+
        let mut basis: Vec<(Complex64, u32)> = Vec::with_capacity(n);
        for &(alpha, mult) in &root_set.roots {
            for j in 0..mult {
                basis.push((alpha, j as u32));
            }
        }
        debug_assert_eq!(basis.len(), n);

        let mut mat = DMatrix::<Complex<f64>>::zeros(n, n);
        let mut rhs = DVector::<Complex<f64>>::zeros(n);
        for k in 0..n {
            for (col, &(alpha, j)) in basis.iter().enumerate() {
                // d^k/dt^k [t^j e^{alpha t}] at 0 = C(k,j) j! alpha^(k-j)
                let j = j as usize;
                if k < j {
                    continue;
                }
                let mut v = Complex64::new(1.0, 0.0);
                for i in 0..j {
                    v *= ((k - i) as f64) / ((j - i) as f64);
                }
                v *= (1..=j).map(|i| i as f64).product::<f64>();
                v *= alpha.powu((k - j) as u32);
                mat[(k, col)] = Complex::new(v.re, v.im);
            }
        }
        rhs[n - 1] = Complex::new(1.0 / root_set.leading_coeff, 0.0);

        let lu = mat.lu();
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem("confluent Vandermonde".into()))?;

        let terms = basis
            .iter()
            .zip(sol.iter())
            .map(|(&(alpha, power), c)| ExpPolyTerm {
                alpha,
                power,
                coeff: Complex64::new(c.re, c.im),
            })
            .collect();
        Ok(GeneralizedFunction::causal_piece(0.0, terms))
    }
}

/// Greedy clustering of complex values into (centroid, multiplicity) pairs,
/// with conjugate symmetry enforced. A nonpositive tolerance selects the
/// default `1e-7 * max(1, spectral radius)`.
pub fn cluster_roots(mut vals: Vec<Complex64>, cluster_tol: f64) -> Vec<(Complex64, usize)> {
    let radius = vals.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tol = if cluster_tol > 0.0 {
        cluster_tol
    } else {
        1e-7 * radius.max(1.0)
    };

    vals.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    let mut clusters: Vec<(Complex64, usize)> = Vec::new();
    for z in vals {
        if let Some((c, m)) = clusters
            .iter_mut()
            .find(|(c, m)| (*c - z).norm() <= tol * (*m as f64).max(1.0))
        {
            let mf = *m as f64;
            *c = (*c * mf + z) / (mf + 1.0);
            *m += 1;
        } else {
            clusters.push((z, 1));
        }
    }

    // conjugate pairing: snap near-real roots and symmetrize pairs
    for (c, _) in clusters.iter_mut() {
        if c.im.abs() <= tol {
            c.im = 0.0;
        }
    }
    let k = clusters.len();
    let mut paired = vec![false; k];
    for i in 0..k {
        if paired[i] || clusters[i].0.im == 0.0 {
            continue;
        }
        let target = clusters[i].0.conj();
        if let Some(j) = (0..k)
            .find(|&j| j != i && !paired[j] && (clusters[j].0 - target).norm() <= 2.0 * tol)
        {
            let sym = 0.5 * (clusters[i].0 + clusters[j].0.conj());
            clusters[i].0 = sym;
            clusters[j].0 = sym.conj();
            paired[i] = true;
            paired[j] = true;
        }
    }
    clusters.sort_by(|a, b| (a.0.re, a.0.im).partial_cmp(&(b.0.re, b.0.im)).unwrap());
    clusters
}
