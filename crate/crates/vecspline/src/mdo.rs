//! Matrix differential operators: determinant and adjugate over the operator
//! ring, causal Green's matrices via the adjugate route, null-space bases,
//! regularity bounds, first-order systems and the constant-matrix Smith
//! decomposition.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::{ExpPolyTerm, GeneralizedFunction, Support, MERGE_TOL};
use crate::odo::{cluster_roots, OdoPoly};

/// A matrix of scalar differential operators, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixOperator {
    rows: usize,
    cols: usize,
    entries: Vec<OdoPoly>,
}

/// Causal Green's matrix of an invertible MDO.
#[derive(Clone, Debug)]
pub struct GreensMatrix {
    pub dim: usize,
    entries: Vec<GeneralizedFunction>,
    pub det_op: OdoPoly,
    pub nullspace_dim: usize,
}

/// A basis of the null space of an invertible MDO: vector-valued smooth
/// exponential-polynomials (no Dirac parts).
#[derive(Clone, Debug)]
pub struct NullspaceBasis {
    pub dim_ambient: usize,
    pub basis: Vec<Vec<GeneralizedFunction>>,
}

/// Outcome of symbolically applying `L` to a candidate Green's matrix.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub max_smooth_residual: f64,
    pub max_dirac_deviation: f64,
    pub pass: bool,
}

/// Per-entry regularity lower bounds, or a note that the hypothesis fails.
#[derive(Clone, Debug)]
pub enum RegularityBound {
    NotApplicable(String),
    /// Row-major `dim x dim`; `None` marks order-0 (multiplication) entries
    /// for which the bound does not apply.
    Table(Vec<Option<i32>>),
}

/// Constant-matrix Smith decomposition `Q = S [I 0] T` with right inverse.
#[derive(Clone, Debug)]
pub struct SmithDecomposition {
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub q_dagger: DMatrix<f64>,
}

const VERIFY_TOL: f64 = 1e-8;

impl MatrixOperator {
    pub fn new(rows: usize, cols: usize, entries: Vec<OdoPoly>) -> Self {
        assert_eq!(entries.len(), rows * cols);
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn diagonal(ops: Vec<OdoPoly>) -> Self {
        let d = ops.len();
        let mut entries = vec![OdoPoly::zero(); d * d];
        for (i, op) in ops.into_iter().enumerate() {
            entries[i * d + i] = op;
        }
        Self::new(d, d, entries)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(vec![OdoPoly::identity(); dim])
    }

    /// The first-order operator `I D - A`.
    pub fn first_order(a: &DMatrix<f64>) -> Self {
        let d = a.nrows();
        assert_eq!(d, a.ncols());
        let mut entries = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                if r == c {
                    entries.push(OdoPoly::new(vec![-a[(r, c)], 1.0]));
                } else {
                    entries.push(OdoPoly::constant(-a[(r, c)]));
                }
            }
        }
        Self::new(d, d, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, r: usize, c: usize) -> &OdoPoly {
        &self.entries[r * self.cols + c]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Left multiplication by a constant matrix: `(A L)[r][c] = sum_d A[r][d] L[d][c]`.
    pub fn const_mul_left(&self, a: &DMatrix<f64>) -> Self {
        assert_eq!(a.ncols(), self.rows);
        let rows = a.nrows();
        let mut entries = Vec::with_capacity(rows * self.cols);
        for r in 0..rows {
            for c in 0..self.cols {
                let mut acc = OdoPoly::zero();
                for d in 0..self.rows {
                    acc = acc.add(&self.entry(d, c).scale(a[(r, d)]));
                }
                entries.push(acc);
            }
        }
        Self::new(rows, self.cols, entries)
    }

    fn minor(&self, drop_row: usize, drop_col: usize) -> Self {
        let mut entries = Vec::with_capacity((self.rows - 1) * (self.cols - 1));
        for r in 0..self.rows {
            if r == drop_row {
                continue;
            }
            for c in 0..self.cols {
                if c == drop_col {
                    continue;
                }
                entries.push(self.entry(r, c).clone());
            }
        }
        Self::new(self.rows - 1, self.cols - 1, entries)
    }

    /// Determinant over the operator ring: permutation expansion for small
    /// dimensions, cofactor expansion beyond.
    pub fn det(&self) -> Result<OdoPoly> {
        if !self.is_square() {
            return Err(Error::NonSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.det_unchecked())
    }

    fn det_unchecked(&self) -> OdoPoly {
        match self.rows {
            0 => OdoPoly::identity(),
            1 => self.entry(0, 0).clone(),
            d if d <= 4 => {
                let mut acc = OdoPoly::zero();
                permutations(d, &mut |perm, sign| {
                    let mut prod = OdoPoly::identity();
                    for (r, &c) in perm.iter().enumerate() {
                        prod = prod.compose(self.entry(r, c));
                        if prod.is_zero() {
                            return;
                        }
                    }
                    acc = acc.add(&prod.scale(sign));
                });
                acc
            }
            _ => {
                // cofactor expansion along the first row
                let mut acc = OdoPoly::zero();
                for c in 0..self.cols {
                    let e = self.entry(0, c);
                    if e.is_zero() {
                        continue;
                    }
                    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                    acc = acc.add(&e.compose(&self.minor(0, c).det_unchecked()).scale(sign));
                }
                acc
            }
        }
    }

    /// Adjugate: entry `(r,c) = (-1)^{r+c} det(L` with row `c`, column `r` removed`)`.
    pub fn adjugate(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::NonSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let d = self.rows;
        if d == 1 {
            return Ok(Self::identity(1));
        }
        let mut entries = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                entries.push(self.minor(c, r).det_unchecked().scale(sign));
            }
        }
        Ok(Self::new(d, d, entries))
    }

    /// Applies the MDO to a column of generalized functions.
    pub fn apply_column(&self, col: &[GeneralizedFunction]) -> Vec<GeneralizedFunction> {
        assert_eq!(col.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let mut acc = GeneralizedFunction::zero();
                for d in 0..self.cols {
                    if !self.entry(r, d).is_zero() {
                        acc = acc.add(&col[d].apply_odo(self.entry(r, d)));
                    }
                }
                acc
            })
            .collect()
    }

    /// Synthesizes the causal Green's matrix through the adjugate of `L`
    /// applied to the scalar Green's function of `det(L)`, and verifies it.
    pub fn greens_matrix(&self) -> Result<GreensMatrix> {
        let det = self.det()?;
        if det.is_zero() {
            return Err(Error::NonInvertible);
        }
        let g_scalar = det.causal_green()?;
        let adj = self.adjugate()?;
        let d = self.rows;
        let mut entries = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                entries.push(g_scalar.apply_odo(adj.entry(r, c)));
            }
        }
        let g = GreensMatrix {
            dim: d,
            entries,
            nullspace_dim: det.degree().max(0) as usize,
            det_op: det,
        };
        let report = self.verify_greens(&g);
        if !report.pass {
            return Err(Error::VerificationFailed(format!(
                "smooth residual {:.3e}, Dirac deviation {:.3e}",
                report.max_smooth_residual, report.max_dirac_deviation
            )));
        }
        Ok(g)
    }

    /// Symbolically applies `L` to `G` and measures the deviation from `I delta`.
    pub fn verify_greens(&self, g: &GreensMatrix) -> VerifyReport {
        let mut max_smooth = 0.0f64;
        let mut max_dirac = 0.0f64;
        for c in 0..g.dim {
            let col: Vec<GeneralizedFunction> = (0..g.dim).map(|r| g.entry(r, c).clone()).collect();
            let image = self.apply_column(&col);
            for (r, f) in image.iter().enumerate() {
                max_smooth = max_smooth.max(f.smooth_scale());
                let expect_identity = r == c;
                let mut seen_identity = false;
                for dt in &f.diracs {
                    if expect_identity
                        && dt.order == 0
                        && dt.location.abs() <= MERGE_TOL
                        && !seen_identity
                    {
                        max_dirac = max_dirac.max((dt.weight - 1.0).abs());
                        seen_identity = true;
                    } else {
                        max_dirac = max_dirac.max(dt.weight.abs());
                    }
                }
                if expect_identity && !seen_identity {
                    max_dirac = max_dirac.max(1.0);
                }
            }
        }
        VerifyReport {
            max_smooth_residual: max_smooth,
            max_dirac_deviation: max_dirac,
            pass: max_smooth <= VERIFY_TOL && max_dirac <= VERIFY_TOL,
        }
    }

    /// Regularity lower bounds of Green's-matrix entries when the row/column
    /// dominance hypothesis holds.
    pub fn regularity_bound(&self) -> Result<RegularityBound> {
        if !self.is_square() {
            return Err(Error::NonSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let d = self.rows;
        for i in 0..d {
            let nd = self.entry(i, i).degree();
            let row_ok = (0..d).all(|j| j == i || self.entry(i, j).degree() < nd);
            let col_ok = (0..d).all(|j| j == i || self.entry(j, i).degree() < nd);
            if !(row_ok || col_ok) {
                return Ok(RegularityBound::NotApplicable(format!(
                    "diagonal dominance fails at index {i}: neither row nor column orders \
                     are dominated by the diagonal order {nd}"
                )));
            }
        }
        let mut table = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                let n_cr = self.entry(c, r).degree();
                table.push(match n_cr {
                    n if n >= 2 => Some(n as i32 - 2),
                    1 => Some(-1),
                    _ => None, // order-0 entries are multiplications; no bound
                });
            }
        }
        Ok(RegularityBound::Table(table))
    }

    /// Numerical null-space basis: adjugate images of the scalar null space of
    /// `det(L)` placed in every coordinate slot, selected by column-pivoted
    /// orthogonalization on a sample grid and certified by applying `L`.
    pub fn nullspace_basis(&self) -> Result<NullspaceBasis> {
        let det = self.det()?;
        if det.is_zero() {
            return Err(Error::NonInvertible);
        }
        let n = det.degree() as usize;
        if n == 0 {
            return Ok(NullspaceBasis {
                dim_ambient: self.rows,
                basis: vec![],
            });
        }
        let scalars = scalar_nullspace(&det)?;
        let adj = self.adjugate()?;
        let d = self.rows;

        // sample each candidate on a fixed grid; the scalar null-space inputs
        // have unit-scale coefficients, so candidates that the adjugate nearly
        // annihilates show up as columns of negligible absolute norm
        let grid: Vec<f64> = (0..40).map(|i| -2.0 + 5.0 * (i as f64) / 39.0).collect();
        let m = grid.len() * d;
        let mut candidates: Vec<Vec<GeneralizedFunction>> = Vec::new();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for slot in 0..d {
            for q in &scalars {
                let cand: Vec<GeneralizedFunction> =
                    (0..d).map(|r| q.apply_odo(adj.entry(r, slot))).collect();
                let mut v = DVector::<f64>::zeros(m);
                for (gi, &t) in grid.iter().enumerate() {
                    for (ri, f) in cand.iter().enumerate() {
                        v[gi * d + ri] = f.evaluate_smooth(t);
                    }
                }
                let norm = v.norm();
                if norm <= 1e-8 {
                    continue;
                }
                cols.push(v / norm);
                candidates.push(cand);
            }
        }

        let mut selected: Vec<usize> = Vec::with_capacity(n);
        let mut residuals = cols.clone();
        for _ in 0..n {
            let (best, best_norm) = residuals
                .iter()
                .enumerate()
                .filter(|(i, _)| !selected.contains(i))
                .map(|(i, v)| (i, v.norm()))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .ok_or_else(|| Error::NullspaceExtraction("candidate pool exhausted".into()))?;
            if best_norm <= 1e-8 {
                return Err(Error::NullspaceExtraction(format!(
                    "only {} independent candidates found, need {n}",
                    selected.len()
                )));
            }
            let dir = residuals[best].clone() / best_norm;
            for (i, v) in residuals.iter_mut().enumerate() {
                if i != best && !selected.contains(&i) {
                    let proj = dir.dot(v);
                    *v -= proj * &dir;
                }
            }
            selected.push(best);
        }

        let basis: Vec<Vec<GeneralizedFunction>> = selected
            .iter()
            .map(|&i| candidates[i].clone())
            .collect();

        // certify each element symbolically
        for (k, q) in basis.iter().enumerate() {
            let scale = q
                .iter()
                .map(GeneralizedFunction::smooth_scale)
                .fold(0.0, f64::max)
                .max(1.0);
            let image = self.apply_column(q);
            for f in &image {
                if f.smooth_scale() > 1e-8 * scale || f.dirac_scale() > 1e-8 * scale {
                    return Err(Error::NullspaceExtraction(format!(
                        "candidate {k} fails L{{q}} = 0 (residual {:.3e})",
                        f.smooth_scale().max(f.dirac_scale())
                    )));
                }
            }
        }
        Ok(NullspaceBasis {
            dim_ambient: d,
            basis,
        })
    }
}

impl GreensMatrix {
    pub fn entry(&self, r: usize, c: usize) -> &GeneralizedFunction {
        &self.entries[r * self.dim + c]
    }

    pub fn column(&self, c: usize) -> Vec<GeneralizedFunction> {
        (0..self.dim).map(|r| self.entry(r, c).clone()).collect()
    }

    pub fn from_entries(
        dim: usize,
        entries: Vec<GeneralizedFunction>,
        det_op: OdoPoly,
    ) -> Self {
        assert_eq!(entries.len(), dim * dim);
        let nullspace_dim = det_op.degree().max(0) as usize;
        Self {
            dim,
            entries,
            det_op,
            nullspace_dim,
        }
    }

    /// Anti-causal adjoint Green's matrix: transpose and time-reverse.
    pub fn adjoint(&self) -> Self {
        let mut entries = Vec::with_capacity(self.dim * self.dim);
        for r in 0..self.dim {
            for c in 0..self.dim {
                entries.push(self.entry(c, r).reverse());
            }
        }
        Self {
            dim: self.dim,
            entries,
            det_op: self.det_op.adjoint(),
            nullspace_dim: self.nullspace_dim,
        }
    }

    /// Right multiplication by a constant matrix (`G * Q`), possibly rectangular.
    /// Returns the columns of the product.
    pub fn mul_const_right(&self, q: &DMatrix<f64>) -> Vec<Vec<GeneralizedFunction>> {
        assert_eq!(q.nrows(), self.dim);
        (0..q.ncols())
            .map(|c| {
                (0..self.dim)
                    .map(|r| {
                        let mut acc = GeneralizedFunction::zero();
                        for d in 0..self.dim {
                            if q[(d, c)] != 0.0 {
                                acc = acc.add(&self.entry(r, d).scale(q[(d, c)]));
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// Entry-wise multiplication on the right by `A^{-1}` (for stability checks).
    pub fn scale_entry(&mut self, r: usize, c: usize, f: GeneralizedFunction) {
        self.entries[r * self.dim + c] = f;
    }
}

/// Real basis of the null space of a scalar operator: `t^j e^{at} cos(bt)` and
/// `t^j e^{at} sin(bt)` for each root `a + ib` with `b >= 0`.
pub fn scalar_nullspace(det: &OdoPoly) -> Result<Vec<GeneralizedFunction>> {
    let root_set = det.roots(0.0)?;
    let mut out = Vec::new();
    for &(alpha, mult) in &root_set.roots {
        if alpha.im < 0.0 {
            continue; // conjugate partner covers it
        }
        for j in 0..mult as u32 {
            if alpha.im == 0.0 {
                out.push(GeneralizedFunction::whole_piece(
                    0.0,
                    vec![ExpPolyTerm {
                        alpha,
                        power: j,
                        coeff: Complex64::new(1.0, 0.0),
                    }],
                ));
            } else {
                // cos: (e^{alpha t} + e^{conj(alpha) t}) / 2
                out.push(GeneralizedFunction::whole_piece(
                    0.0,
                    vec![
                        ExpPolyTerm {
                            alpha,
                            power: j,
                            coeff: Complex64::new(0.5, 0.0),
                        },
                        ExpPolyTerm {
                            alpha: alpha.conj(),
                            power: j,
                            coeff: Complex64::new(0.5, 0.0),
                        },
                    ],
                ));
                // sin: (e^{alpha t} - e^{conj(alpha) t}) / 2i
                out.push(GeneralizedFunction::whole_piece(
                    0.0,
                    vec![
                        ExpPolyTerm {
                            alpha,
                            power: j,
                            coeff: Complex64::new(0.0, -0.5),
                        },
                        ExpPolyTerm {
                            alpha: alpha.conj(),
                            power: j,
                            coeff: Complex64::new(0.0, 0.5),
                        },
                    ],
                ));
            }
        }
    }
    Ok(out)
}

/// `u(t) e^{At}` in exponential-polynomial form via Putzer's recurrence.
pub fn firstorder_greens(a: &DMatrix<f64>) -> Result<GreensMatrix> {
    let d = a.nrows();
    assert_eq!(d, a.ncols());
    let det_op = MatrixOperator::first_order(a).det()?;
    if d == 0 {
        return Ok(GreensMatrix::from_entries(0, vec![], det_op));
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::NoRoots("eigenvalue iteration did not converge".into()))?;
    let eigs = schur.complex_eigenvalues();
    let vals: Vec<Complex64> = eigs.iter().map(|z| Complex64::new(z.re, z.im)).collect();
    let clustered = cluster_roots(vals, 0.0);
    let mut lambdas: Vec<Complex64> = Vec::with_capacity(d);
    for (z, m) in clustered {
        for _ in 0..m {
            lambdas.push(z);
        }
    }

    let ac = a.map(|x| Complex64::new(x, 0.0));
    let id = DMatrix::<Complex64>::identity(d, d);

    // P_0 = I, P_k = prod_{j<=k} (A - lambda_j I); r_1 = e^{lambda_1 t},
    // r_{k+1}' = lambda_{k+1} r_{k+1} + r_k with r_{k+1}(0) = 0
    let mut p = id.clone();
    let mut r: Vec<ExpPolyTerm> = vec![ExpPolyTerm {
        alpha: lambdas[0],
        power: 0,
        coeff: Complex64::new(1.0, 0.0),
    }];
    let mut entries_acc: Vec<Vec<ExpPolyTerm>> = vec![Vec::new(); d * d];
    for k in 0..d {
        if k > 0 {
            p *= &ac - &id * lambdas[k - 1];
            r = putzer_step(&r, lambdas[k]);
        }
        for i in 0..d {
            for j in 0..d {
                let w = p[(i, j)];
                if w.norm() == 0.0 {
                    continue;
                }
                for t in &r {
                    entries_acc[i * d + j].push(ExpPolyTerm {
                        alpha: t.alpha,
                        power: t.power,
                        coeff: t.coeff * w,
                    });
                }
            }
        }
    }
    let entries = entries_acc
        .into_iter()
        .map(|terms| GeneralizedFunction::causal_piece(0.0, terms))
        .collect();
    Ok(GreensMatrix::from_entries(d, entries, det_op))
}

/// Solves `r' = lambda r + f` with `r(0) = 0` for an exponential-polynomial `f`.
fn putzer_step(f: &[ExpPolyTerm], lambda: Complex64) -> Vec<ExpPolyTerm> {
    let mut out: Vec<ExpPolyTerm> = Vec::new();
    let mut value_at_zero = Complex64::new(0.0, 0.0);
    for term in f {
        if (term.alpha - lambda).norm() <= 1e-9 {
            // resonant: particular solution c t^{p+1} e^{lambda t} / (p+1)
            out.push(ExpPolyTerm {
                alpha: lambda,
                power: term.power + 1,
                coeff: term.coeff / (term.power as f64 + 1.0),
            });
        } else {
            let beta = term.alpha - lambda;
            let p = term.power as usize;
            let mut b = vec![Complex64::new(0.0, 0.0); p + 1];
            b[p] = term.coeff / beta;
            for i in (0..p).rev() {
                b[i] = -((i + 1) as f64) * b[i + 1] / beta;
            }
            value_at_zero += b[0];
            for (i, &bi) in b.iter().enumerate() {
                out.push(ExpPolyTerm {
                    alpha: term.alpha,
                    power: i as u32,
                    coeff: bi,
                });
            }
        }
    }
    if value_at_zero.norm() > 0.0 {
        out.push(ExpPolyTerm {
            alpha: lambda,
            power: 0,
            coeff: -value_at_zero,
        });
    }
    out
}

/// Numerical rank of the Kalman block matrix `[P, AP, ..., A^{D-1}P]`.
pub fn controllability_rank(a: &DMatrix<f64>, p: &DMatrix<f64>) -> usize {
    let d = a.nrows();
    let dp = p.ncols();
    let mut kalman = DMatrix::<f64>::zeros(d, d * dp);
    let mut block = p.clone();
    for k in 0..d {
        kalman.view_mut((0, k * dp), (d, dp)).copy_from(&block);
        block = a * &block;
    }
    let svd = kalman.svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax)
        .count()
}

/// Smith decomposition of a full-rank wide matrix by Gaussian elimination with
/// column pivoting: `Q = S [I 0] T`, with `Q_dagger = T^{-1} [I 0]^T S^{-1}`.
pub fn constant_smith(q: &DMatrix<f64>) -> Result<SmithDecomposition> {
    let dp = q.nrows();
    let d = q.ncols();
    assert!(dp <= d, "Q must be wide (D' <= D)");

    // E Q P = [I | B] with E invertible and P a column permutation
    let mut m = q.clone();
    let mut e = DMatrix::<f64>::identity(dp, dp);
    let mut perm: Vec<usize> = (0..d).collect();
    for k in 0..dp {
        // pivot: largest entry in the remaining block
        let (mut pr, mut pc, mut best) = (k, k, 0.0f64);
        for r in k..dp {
            for c in k..d {
                if m[(r, c)].abs() > best {
                    best = m[(r, c)].abs();
                    pr = r;
                    pc = c;
                }
            }
        }
        if best <= 1e-12 * q.amax().max(1.0) {
            return Err(Error::RankDeficient {
                rank: k,
                expected: dp,
            });
        }
        m.swap_rows(k, pr);
        e.swap_rows(k, pr);
        m.swap_columns(k, pc);
        perm.swap(k, pc);
        let piv = m[(k, k)];
        for c in 0..d {
            m[(k, c)] /= piv;
        }
        for c in 0..dp {
            e[(k, c)] /= piv;
        }
        for r in 0..dp {
            if r == k {
                continue;
            }
            let factor = m[(r, k)];
            if factor != 0.0 {
                for c in 0..d {
                    m[(r, c)] -= factor * m[(k, c)];
                }
                for c in 0..dp {
                    e[(r, c)] -= factor * e[(k, c)];
                }
            }
        }
    }

    // m = [I | B]; T = [[I, B], [0, I]] * P^{-1}
    let mut c_mat = DMatrix::<f64>::identity(d, d);
    for r in 0..dp {
        for c in dp..d {
            c_mat[(r, c)] = m[(r, c)];
        }
    }
    let mut p_inv = DMatrix::<f64>::zeros(d, d);
    for (new_col, &orig_col) in perm.iter().enumerate() {
        // column permutation: Q P has column new_col = original orig_col
        p_inv[(new_col, orig_col)] = 1.0;
    }
    let t = &c_mat * &p_inv;
    let s = e
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("S factor".into()))?;

    // Q_dagger = T^{-1} A^T S^{-1} = P^T C^{-1} [I;0] E
    let mut c_inv = DMatrix::<f64>::identity(d, d);
    for r in 0..dp {
        for c in dp..d {
            c_inv[(r, c)] = -m[(r, c)];
        }
    }
    let mut a_t = DMatrix::<f64>::zeros(d, dp);
    for i in 0..dp {
        a_t[(i, i)] = 1.0;
    }
    let q_dagger = p_inv.transpose() * c_inv * a_t * e;
    Ok(SmithDecomposition { s, t, q_dagger })
}

fn permutations(n: usize, visit: &mut impl FnMut(&[usize], f64)) {
    let mut perm: Vec<usize> = (0..n).collect();
    recurse_permute(&mut perm, 0, visit);
}

fn recurse_permute(perm: &mut Vec<usize>, depth: usize, visit: &mut impl FnMut(&[usize], f64)) {
    if depth == perm.len() {
        let sign = permutation_sign(perm);
        visit(perm, sign);
        return;
    }
    for i in depth..perm.len() {
        perm.swap(depth, i);
        recurse_permute(perm, depth + 1, visit);
        perm.swap(depth, i);
    }
}

fn permutation_sign(perm: &[usize]) -> f64 {
    let mut seen = vec![false; perm.len()];
    let mut sign = 1.0;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = perm[i];
            len += 1;
        }
        if len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

/// Checks that every entry of a Green's matrix is causal (no support at
/// negative offsets).
pub fn is_causal(g: &GreensMatrix) -> bool {
    for r in 0..g.dim {
        for c in 0..g.dim {
            let f = g.entry(r, c);
            for p in &f.pieces {
                match p.support {
                    Support::Causal if p.offset < -MERGE_TOL => return false,
                    Support::AntiCausal | Support::Whole => return false,
                    _ => {}
                }
            }
            for dt in &f.diracs {
                if dt.location < -MERGE_TOL {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d(n: usize) -> OdoPoly {
        OdoPoly::derivative(n)
    }

    fn damper_a() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, -1.0, 1.0, //
                0.0, 0.0, 1.0, -1.0,
            ],
        )
    }

    /// Closed-form matrix exponential of the two-mass damper system.
    fn damper_exp(t: f64) -> DMatrix<f64> {
        let hp = (1.0 + (-2.0 * t).exp()) / 2.0;
        let hm = (1.0 - (-2.0 * t).exp()) / 2.0;
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0,
                0.0,
                0.5 * (hm + t),
                0.5 * (-hm + t),
                0.0,
                1.0,
                0.5 * (-hm + t),
                0.5 * (hm + t),
                0.0,
                0.0,
                hp,
                hm,
                0.0,
                0.0,
                hm,
                hp,
            ],
        )
    }

    #[test]
    fn det_of_upper_triangular_is_product_of_diagonal() {
        let l = MatrixOperator::new(
            2,
            2,
            vec![d(2), d(4), OdoPoly::zero(), d(2)],
        );
        let det = l.det().unwrap();
        assert_eq!(det.coeffs(), d(4).coeffs());
    }

    #[test]
    fn greens_of_upper_triangular_operator() {
        let l = MatrixOperator::new(
            2,
            2,
            vec![d(2), d(4), OdoPoly::zero(), d(2)],
        );
        let g = l.greens_matrix().unwrap();
        assert_eq!(g.nullspace_dim, 4);
        // diagonal entries are the ramp t_+
        for t in [0.25, 1.0, 3.0] {
            assert_relative_eq!(g.entry(0, 0).evaluate_smooth(t), t, epsilon = 1e-10);
            assert_relative_eq!(g.entry(1, 1).evaluate_smooth(t), t, epsilon = 1e-10);
            assert_relative_eq!(g.entry(1, 0).evaluate_smooth(t), 0.0, epsilon = 1e-12);
        }
        // off-diagonal entry is -delta
        let f = g.entry(0, 1);
        assert!(f.smooth_scale() < 1e-12);
        assert_eq!(f.diracs.len(), 1);
        assert_eq!(f.diracs[0].order, 0);
        assert_relative_eq!(f.diracs[0].weight, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn damper_determinant_and_greens_match_closed_form() {
        let a = damper_a();
        let l = MatrixOperator::first_order(&a);
        let det = l.det().unwrap();
        // D^3 (D + 2)
        let expect = [0.0, 0.0, 0.0, 2.0, 1.0];
        assert_eq!(det.coeffs().len(), 5);
        for (c, e) in det.coeffs().iter().zip(expect.iter()) {
            assert_relative_eq!(c, e, epsilon = 1e-9);
        }
        let g = l.greens_matrix().unwrap();
        assert!(is_causal(&g));
        for t in [0.1, 0.5, 1.0, 2.5] {
            let m = damper_exp(t);
            for r in 0..4 {
                for c in 0..4 {
                    assert_relative_eq!(
                        g.entry(r, c).evaluate_smooth(t),
                        m[(r, c)],
                        epsilon = 1e-8
                    );
                }
            }
        }
        // no support on the negative axis
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(g.entry(r, c).evaluate_smooth(-0.7), 0.0);
            }
        }
    }

    #[test]
    fn putzer_exponential_agrees_with_adjugate_route() {
        let a = damper_a();
        let g_putzer = firstorder_greens(&a).unwrap();
        let g_adj = MatrixOperator::first_order(&a).greens_matrix().unwrap();
        for t in [0.2, 0.9, 1.7, 4.0] {
            for r in 0..4 {
                for c in 0..4 {
                    assert_relative_eq!(
                        g_putzer.entry(r, c).evaluate_smooth(t),
                        g_adj.entry(r, c).evaluate_smooth(t),
                        epsilon = 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn putzer_with_complex_spectrum() {
        // rotation + drift: eigenvalues -0.3 +/- 2i and 0.5
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[-0.3, -2.0, 0.0, 2.0, -0.3, 0.0, 0.0, 0.0, 0.5],
        );
        let g = firstorder_greens(&a).unwrap();
        for t in [0.3, 1.1, 2.4] {
            let m = (a.clone() * t).exp();
            for r in 0..3 {
                for c in 0..3 {
                    assert_relative_eq!(
                        g.entry(r, c).evaluate_smooth(t),
                        m[(r, c)],
                        epsilon = 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn verify_report_rejects_wrong_candidate() {
        let l = MatrixOperator::diagonal(vec![d(1), d(1)]);
        let g = l.greens_matrix().unwrap();
        // breaking one entry must trip the verifier
        let mut broken = g.clone();
        broken.scale_entry(0, 0, GeneralizedFunction::heaviside().scale(2.0));
        let report = l.verify_greens(&broken);
        assert!(!report.pass);
        assert!(report.max_dirac_deviation > 0.5);
    }

    #[test]
    fn adjoint_greens_is_transposed_time_reversal() {
        let a = damper_a();
        let g = MatrixOperator::first_order(&a).greens_matrix().unwrap();
        let gs = g.adjoint();
        for t in [0.4, 1.3] {
            for r in 0..4 {
                for c in 0..4 {
                    assert_relative_eq!(
                        gs.entry(r, c).evaluate_smooth(-t),
                        g.entry(c, r).evaluate_smooth(t),
                        epsilon = 1e-10
                    );
                }
            }
        }
        // anti-causal: vanishes on the open positive axis
        assert_eq!(gs.entry(2, 2).evaluate_smooth(0.5), 0.0);
        // the adjoint operator annihilates the adjoint Green's matrix away from 0
        let l_adj_op = {
            let l = MatrixOperator::first_order(&a);
            let mut entries = Vec::new();
            for r in 0..4 {
                for c in 0..4 {
                    entries.push(l.entry(c, r).adjoint());
                }
            }
            MatrixOperator::new(4, 4, entries)
        };
        let col: Vec<GeneralizedFunction> = (0..4).map(|r| gs.entry(r, 1).clone()).collect();
        let image = l_adj_op.apply_column(&col);
        for (r, f) in image.iter().enumerate() {
            assert!(f.smooth_scale() < 1e-8, "row {r}: {:?}", f.smooth_scale());
            for dt in &f.diracs {
                let expect = if r == 1 { 1.0 } else { 0.0 };
                assert_relative_eq!(dt.weight, expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn left_multiplication_by_constant_matrix() {
        // G_{AL} = G_L A^{-1}
        let a = damper_a();
        let l = MatrixOperator::first_order(&a);
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.5, 0.0, 0.0, //
                -1.0, 1.0, 0.0, 0.3, //
                0.0, 0.2, 1.5, 0.0, //
                0.4, 0.0, 0.0, 1.0,
            ],
        );
        let m_inv = m.clone().try_inverse().unwrap();
        let g_l = l.greens_matrix().unwrap();
        let g_ml = l.const_mul_left(&m).greens_matrix().unwrap();
        let product = g_l.mul_const_right(&m_inv);
        for t in [0.3, 1.2] {
            for r in 0..4 {
                for c in 0..4 {
                    assert_relative_eq!(
                        g_ml.entry(r, c).evaluate_smooth(t),
                        product[c][r].evaluate_smooth(t),
                        epsilon = 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn nullspace_basis_of_diagonal_operator() {
        let l = MatrixOperator::diagonal(vec![d(2), OdoPoly::new(vec![1.0, 1.0])]);
        let ns = l.nullspace_basis().unwrap();
        assert_eq!(ns.basis.len(), 3);
        // every element satisfies L q = 0 by construction; span must contain
        // (1,0), (t,0), (0,e^{-t}): verified through sampling rank
        let grid: Vec<f64> = (0..12).map(|i| -1.0 + 0.4 * i as f64).collect();
        let mut mat = DMatrix::<f64>::zeros(grid.len() * 2, 3);
        for (k, q) in ns.basis.iter().enumerate() {
            for (gi, &t) in grid.iter().enumerate() {
                for r in 0..2 {
                    mat[(gi * 2 + r, k)] = q[r].evaluate_smooth(t);
                }
            }
        }
        let rank = mat.svd(false, false).rank(1e-8);
        assert_eq!(rank, 3);
    }

    #[test]
    fn nullspace_basis_of_coupled_operator() {
        let a = damper_a();
        let l = MatrixOperator::first_order(&a);
        let ns = l.nullspace_basis().unwrap();
        assert_eq!(ns.basis.len(), 4);
    }

    #[test]
    fn regularity_bound_table() {
        let a = damper_a();
        let l = MatrixOperator::first_order(&a);
        match l.regularity_bound().unwrap() {
            RegularityBound::Table(t) => {
                // diagonal entries are order 1 -> bound -1
                assert_eq!(t[0], Some(-1));
                // order-0 off-diagonal entries carry no bound
                assert_eq!(t[1], None);
            }
            RegularityBound::NotApplicable(w) => panic!("unexpected: {w}"),
        }
        let bad = MatrixOperator::new(2, 2, vec![d(1), d(3), d(3), d(1)]);
        assert!(matches!(
            bad.regularity_bound().unwrap(),
            RegularityBound::NotApplicable(_)
        ));
    }

    #[test]
    fn controllability_rank_of_damper() {
        let a = damper_a();
        let p = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(controllability_rank(&a, &p), 3);
        // full actuation gives full rank
        let p2 = DMatrix::<f64>::identity(4, 4);
        assert_eq!(controllability_rank(&a, &p2), 4);
    }

    #[test]
    fn smith_decomposition_reconstructs_q() {
        let q = DMatrix::from_row_slice(
            2,
            4,
            &[0.0, 1.0, 2.0, -1.0, 3.0, 0.0, 0.5, 1.0],
        );
        let sd = constant_smith(&q).unwrap();
        // Q = S [I 0] T
        let mut pad = DMatrix::<f64>::zeros(2, 4);
        pad.view_mut((0, 0), (2, 2))
            .copy_from(&DMatrix::identity(2, 2));
        let recon = &sd.s * pad * &sd.t;
        assert_relative_eq!((recon - &q).norm(), 0.0, epsilon = 1e-10);
        // right inverse
        let prod = &q * &sd.q_dagger;
        assert_relative_eq!(
            (prod - DMatrix::<f64>::identity(2, 2)).norm(),
            0.0,
            epsilon = 1e-10
        );
        // T invertible
        assert!(sd.t.clone().try_inverse().is_some());
    }

    #[test]
    fn smith_rejects_rank_deficient_q() {
        let q = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 2.0, 4.0, 0.0, 0.0]);
        assert!(matches!(
            constant_smith(&q),
            Err(Error::RankDeficient { rank: 1, expected: 2 })
        ));
    }

    #[test]
    fn singular_operator_is_rejected() {
        // rows are operator-linearly dependent
        let l = MatrixOperator::new(2, 2, vec![d(1), d(2), d(2), d(3)]);
        assert!(matches!(l.greens_matrix(), Err(Error::NonInvertible)));
    }
}
