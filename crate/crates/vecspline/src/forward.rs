//! Measurement functionals, admissibility and injectivity checks, system
//! matrix assembly on the uniform Green's-atom grid, and deterministic
//! synthetic data generation.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::GeneralizedFunction;
use crate::mdo::{GreensMatrix, NullspaceBasis};
use crate::measure::VectorAtomicMeasure;

/// Relative tolerance target for quadrature functionals.
const QUAD_REL_TOL: f64 = 1e-8;

/// A single point-sampling functional `f -> c^T f(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub c: Vec<f64>,
    pub t: f64,
}

/// A weak*-continuous linear measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementFunctional {
    /// `c^T f(t)`.
    Sampling { c: Vec<f64>, t: f64 },
    /// `sum_i w_i c_i^T f(t_i)`.
    WeightedSum { terms: Vec<(f64, Sampling)> },
    /// `int_a^b w(t) f_d(t) dt` with `w` given by equally spaced samples on
    /// `[a, b]`, interpolated linearly.
    Quadrature {
        dim_index: usize,
        window: (f64, f64),
        weight_samples: Vec<f64>,
    },
}

/// Uniform knot grid `x_k = start + k h`, `k = 0..count`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Grid {
    pub fn knot(&self, k: usize) -> f64 {
        self.start + self.step * k as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.knot(k)).collect()
    }
}

/// Whether the dictionary uses the raw Green's columns or the `G Q^dagger`
/// reduction for a control operator `Q`.
#[derive(Clone, Debug)]
pub enum SystemMode {
    Full,
    QReduced(DMatrix<f64>),
}

/// Assembled discretization: `A` holds dictionary responses, `B` null-space
/// responses.
#[derive(Clone, Debug)]
pub struct SystemMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub grid: Grid,
    /// Number of dictionary columns per knot (`D`, or `D'` in reduced mode).
    pub d_ctrl: usize,
}

/// Outcome of the weak*-admissibility test for one functional.
#[derive(Clone, Debug)]
pub struct AdmissibilityReport {
    pub pass: bool,
    pub offenders: Vec<String>,
}

fn combine(col: &[GeneralizedFunction], c: &[f64]) -> GeneralizedFunction {
    let mut acc = GeneralizedFunction::zero();
    for (f, &w) in col.iter().zip(c) {
        if w != 0.0 {
            acc = acc.add(&f.scale(w));
        }
    }
    acc
}

/// Checks that the functional stays weak*-continuous against every dictionary
/// column: sampling combinations must be representable by functions (no Dirac
/// part), quadrature integrands locally bounded.
///
/// A bounded jump at the causal onset is tolerated for samplings: the
/// right-continuity convention gives the combination a well-defined value
/// everywhere, so it is still representable by a function.
pub fn admissibility_check_columns(
    columns: &[Vec<GeneralizedFunction>],
    nu: &MeasurementFunctional,
) -> AdmissibilityReport {
    let mut offenders = Vec::new();
    match nu {
        MeasurementFunctional::Sampling { c, .. } => {
            sampling_offenders(columns, c, &mut offenders);
        }
        MeasurementFunctional::WeightedSum { terms } => {
            for (_, s) in terms {
                sampling_offenders(columns, &s.c, &mut offenders);
            }
        }
        MeasurementFunctional::Quadrature { dim_index, .. } => {
            for (j, col) in columns.iter().enumerate() {
                let reg = col[*dim_index].regularity();
                if reg < -1 {
                    offenders.push(format!(
                        "entry ({dim_index},{j}) has regularity {reg} < -1"
                    ));
                }
            }
        }
    }
    AdmissibilityReport {
        pass: offenders.is_empty(),
        offenders,
    }
}

/// Admissibility against the raw Green's columns (full mode).
pub fn admissibility_check(g: &GreensMatrix, nu: &MeasurementFunctional) -> AdmissibilityReport {
    let columns: Vec<Vec<GeneralizedFunction>> = (0..g.dim).map(|d| g.column(d)).collect();
    admissibility_check_columns(&columns, nu)
}

fn sampling_offenders(
    columns: &[Vec<GeneralizedFunction>],
    c: &[f64],
    offenders: &mut Vec<String>,
) {
    if c.iter().all(|&x| x == 0.0) {
        offenders.push("zero sampling vector".into());
        return;
    }
    for (j, col) in columns.iter().enumerate() {
        assert_eq!(c.len(), col.len());
        let comb = combine(col, c);
        if !comb.diracs.is_empty() {
            offenders.push(format!(
                "combination c^T G[:, {j}] contains a Dirac part (regularity {})",
                comb.regularity()
            ));
        }
    }
}

/// Numerical rank test of the null-space response matrix (Assumption 3).
pub fn nullspace_injectivity_check(b: &DMatrix<f64>) -> bool {
    let n = b.ncols();
    if n == 0 {
        return true;
    }
    let svd = b.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return false;
    }
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax)
        .count();
    rank == n
}

/// Applies a functional to a vector-valued function given as `D` components.
pub fn apply_functional(nu: &MeasurementFunctional, col: &[GeneralizedFunction]) -> Result<f64> {
    match nu {
        MeasurementFunctional::Sampling { c, t } => combine(col, c).evaluate(*t),
        MeasurementFunctional::WeightedSum { terms } => {
            let mut acc = 0.0;
            for (w, s) in terms {
                acc += w * combine(col, &s.c).evaluate(s.t)?;
            }
            Ok(acc)
        }
        MeasurementFunctional::Quadrature {
            dim_index,
            window,
            weight_samples,
        } => {
            let f = &col[*dim_index];
            let (a, b) = *window;
            for d in &f.diracs {
                if d.location >= a && d.location <= b {
                    return Err(Error::DiracHit {
                        t: d.location,
                        location: d.location,
                        guard: 0.0,
                    });
                }
            }
            let mut breaks: Vec<f64> = f
                .boundaries()
                .into_iter()
                .filter(|&x| x > a && x < b)
                .collect();
            if weight_samples.len() > 2 {
                let h = (b - a) / (weight_samples.len() - 1) as f64;
                breaks.extend((1..weight_samples.len() - 1).map(|i| a + h * i as f64));
            }
            let w = |t: f64| interp_weight(weight_samples, a, b, t);
            adaptive_simpson(&|t| w(t) * f.evaluate_smooth(t), a, b, &breaks, QUAD_REL_TOL)
        }
    }
}

fn interp_weight(samples: &[f64], a: f64, b: f64, t: f64) -> f64 {
    match samples.len() {
        0 => 1.0,
        1 => samples[0],
        n => {
            let h = (b - a) / (n - 1) as f64;
            let pos = ((t - a) / h).clamp(0.0, (n - 1) as f64);
            let i = (pos.floor() as usize).min(n - 2);
            let frac = pos - i as f64;
            samples[i] * (1.0 - frac) + samples[i + 1] * frac
        }
    }
}

/// Adaptive composite Simpson quadrature with forced splits at `breaks`.
pub fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    breaks: &[f64],
    rel_tol: f64,
) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let mut cuts: Vec<f64> = vec![a];
    let mut sorted: Vec<f64> = breaks.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    for x in sorted {
        if x > *cuts.last().unwrap() + 1e-14 && x < b {
            cuts.push(x);
        }
    }
    cuts.push(b);
    let mut total = 0.0;
    let scale_hint: f64 = cuts
        .windows(2)
        .map(|w| (w[1] - w[0]) * f(0.5 * (w[0] + w[1])).abs())
        .sum::<f64>()
        .max(1e-300);
    for w in cuts.windows(2) {
        total += simpson_segment(f, w[0], w[1], rel_tol * scale_hint, 0)?;
    }
    Ok(total)
}

fn simpson_rule(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

fn simpson_segment(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
    depth: usize,
) -> Result<f64> {
    let whole = simpson_rule(f, a, b);
    let mid = 0.5 * (a + b);
    let left = simpson_rule(f, a, mid);
    let right = simpson_rule(f, mid, b);
    let err = (left + right - whole).abs() / 15.0;
    if err <= abs_tol.max(1e-15) || b - a < 1e-12 {
        return Ok(left + right + (left + right - whole) / 15.0);
    }
    if depth > 40 {
        return Err(Error::QuadratureFailure(format!(
            "max depth exceeded on [{a}, {b}], err {err:.3e}"
        )));
    }
    Ok(simpson_segment(f, a, mid, abs_tol / 2.0, depth + 1)?
        + simpson_segment(f, mid, b, abs_tol / 2.0, depth + 1)?)
}

/// Assembles the discretized system: `A[m, k*Dc + d]` is functional `m`
/// applied to dictionary column `d` shifted to knot `x_k`; `B[m, n]` is
/// functional `m` applied to null-space element `n`.
pub fn build_system(
    g: &GreensMatrix,
    basis: &NullspaceBasis,
    nus: &[MeasurementFunctional],
    grid: Grid,
    mode: &SystemMode,
) -> Result<SystemMatrices> {
    let columns: Vec<Vec<GeneralizedFunction>> = match mode {
        SystemMode::Full => (0..g.dim).map(|d| g.column(d)).collect(),
        SystemMode::QReduced(q_dagger) => g.mul_const_right(q_dagger),
    };
    for (i, nu) in nus.iter().enumerate() {
        let report = admissibility_check_columns(&columns, nu);
        if !report.pass {
            return Err(Error::Inadmissible {
                index: i,
                detail: report.offenders.join("; "),
            });
        }
    }
    let d_ctrl = columns.len();
    let m = nus.len();
    let mut a = DMatrix::<f64>::zeros(m, grid.count * d_ctrl);
    for (mi, nu) in nus.iter().enumerate() {
        for k in 0..grid.count {
            let x = grid.knot(k);
            for (d, col) in columns.iter().enumerate() {
                let shifted: Vec<GeneralizedFunction> =
                    col.iter().map(|f| f.shift(x)).collect();
                a[(mi, k * d_ctrl + d)] = apply_functional(nu, &shifted)?;
            }
        }
    }
    let n = basis.basis.len();
    let mut b = DMatrix::<f64>::zeros(m, n);
    for (mi, nu) in nus.iter().enumerate() {
        for (ni, q) in basis.basis.iter().enumerate() {
            b[(mi, ni)] = apply_functional(nu, q)?;
        }
    }
    Ok(SystemMatrices {
        a,
        b,
        grid,
        d_ctrl,
    })
}

/// The spline `f = G * m + sum_n q_n q_n(.)` as `D` symbolic components.
///
/// In reduced mode pass the `G Q^dagger` columns instead of `G`'s.
pub fn spline_components(
    columns: &[Vec<GeneralizedFunction>],
    basis: &NullspaceBasis,
    atoms: &VectorAtomicMeasure,
    q: &[f64],
) -> Vec<GeneralizedFunction> {
    let dim = basis.dim_ambient.max(columns.first().map_or(0, Vec::len));
    let mut out = vec![GeneralizedFunction::zero(); dim];
    for atom in &atoms.atoms {
        let col = &columns[atom.dim_index];
        for (r, f) in col.iter().enumerate() {
            out[r] = out[r].add(&f.shift(atom.location).scale(atom.amplitude));
        }
    }
    for (coef, elem) in q.iter().zip(&basis.basis) {
        if *coef != 0.0 {
            for (r, f) in elem.iter().enumerate() {
                out[r] = out[r].add(&f.scale(*coef));
            }
        }
    }
    out
}

/// Exact measurements of a ground-truth spline plus seeded Gaussian noise.
pub fn simulate_data(
    g: &GreensMatrix,
    basis: &NullspaceBasis,
    mode: &SystemMode,
    truth_atoms: &VectorAtomicMeasure,
    truth_q: &[f64],
    nus: &[MeasurementFunctional],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let columns: Vec<Vec<GeneralizedFunction>> = match mode {
        SystemMode::Full => (0..g.dim).map(|d| g.column(d)).collect(),
        SystemMode::QReduced(q_dagger) => g.mul_const_right(q_dagger),
    };
    for (i, nu) in nus.iter().enumerate() {
        let report = admissibility_check_columns(&columns, nu);
        if !report.pass {
            return Err(Error::Inadmissible {
                index: i,
                detail: report.offenders.join("; "),
            });
        }
    }
    let f = spline_components(&columns, basis, truth_atoms, truth_q);
    let mut y = Vec::with_capacity(nus.len());
    for nu in nus {
        y.push(apply_functional(nu, &f)?);
    }
    if noise_sigma > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::InvalidProblem(format!("bad noise sigma: {e}")))?;
        for v in &mut y {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(y)
}
