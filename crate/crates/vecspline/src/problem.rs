//! Problem-file schema and the command implementations behind the CLI:
//! operator analysis, admissibility checking, simulation + solving, and the
//! sparse-vs-smooth comparison.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::forward::{
    admissibility_check_columns, build_system, nullspace_injectivity_check, simulate_data, Grid,
    MeasurementFunctional, Sampling, SystemMode,
};
use crate::gf::GeneralizedFunction;
use crate::l2ref::{compare_l1_l2, l2_gram, l2_solve, SamplingSpec};
use crate::mdo::{
    constant_smith, controllability_rank, GreensMatrix, MatrixOperator, NullspaceBasis,
    RegularityBound,
};
use crate::measure::{Atom, NormSpec, VectorAtomicMeasure};
use crate::odo::OdoPoly;
use crate::solver::{dual_certificate, fista_solve, trim_and_audit, SolveConfig, SolveResult};

/// Exit codes: 0 success, 1 input error, 2 mathematical precondition failure,
/// 3 solver non-convergence.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdoSpec {
    pub dim: usize,
    /// `dim x dim` entries, row-major, each an ascending coefficient list.
    pub entries: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstOrderSpec {
    pub a: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
}

/// Exactly one of the three operator forms must be present.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdo: Option<MdoSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_order: Option<FirstOrderSpec>,
    /// Diagonal shorthand: one coefficient list per diagonal entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagonal: Option<Vec<Vec<f64>>>,
}

/// Measurement with 1-based `dim_index` in the file (converted internally).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasurementSpec {
    Sampling {
        c: Vec<f64>,
        t: f64,
    },
    WeightedSum {
        terms: Vec<(f64, Sampling)>,
    },
    Quadrature {
        dim_index: usize,
        window: (f64, f64),
        weight_samples: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthAtomSpec {
    pub location: f64,
    /// 1-based in the file.
    pub dim_index: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub atoms: Vec<TruthAtomSpec>,
    #[serde(default)]
    pub q: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    One(f64),
    Path(Vec<f64>),
}

impl LambdaSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            LambdaSpec::One(v) => vec![*v],
            LambdaSpec::Path(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_restart")]
    pub restart: bool,
    #[serde(default = "default_trim_threshold")]
    pub trim_threshold: f64,
    #[serde(default = "default_certificate_tol")]
    pub certificate_tol: f64,
}

fn default_max_iters() -> usize {
    50_000
}
fn default_rel_tol() -> f64 {
    1e-14
}
fn default_restart() -> bool {
    true
}
fn default_trim_threshold() -> f64 {
    1e-4
}
fn default_certificate_tol() -> f64 {
    1e-6
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            restart: default_restart(),
            trim_threshold: default_trim_threshold(),
            certificate_tol: default_certificate_tol(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub operator: OperatorSpec,
    /// Optional control matrix `Q` (`D' x D`) enabling the reduced mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_matrix: Option<Vec<Vec<f64>>>,
    pub measurements: Vec<MeasurementSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthSpec>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub norm: NormSpec,
    pub lambda: LambdaSpec,
    pub grid: Grid,
    #[serde(default)]
    pub solver: SolverSpec,
}

pub fn load_problem(path: &Path) -> Result<ProblemFile> {
    let text = fs::read_to_string(path)?;
    let problem: ProblemFile = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidProblem(format!("{}: {e}", path.display())))?;
    validate(&problem)?;
    Ok(problem)
}

fn validate(p: &ProblemFile) -> Result<()> {
    let forms = [
        p.operator.mdo.is_some(),
        p.operator.first_order.is_some(),
        p.operator.diagonal.is_some(),
    ]
    .iter()
    .filter(|&&b| b)
    .count();
    if forms != 1 {
        return Err(Error::InvalidProblem(format!(
            "exactly one operator form required, found {forms}"
        )));
    }
    if p.measurements.is_empty() {
        return Err(Error::InvalidProblem("no measurements".into()));
    }
    if p.grid.step <= 0.0 || p.grid.count == 0 {
        return Err(Error::InvalidProblem("grid needs step > 0, count > 0".into()));
    }
    for l in p.lambda.values() {
        if l <= 0.0 {
            return Err(Error::InvalidProblem("lambda must be > 0".into()));
        }
    }
    Ok(())
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidProblem("ragged or empty matrix".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Operator plus everything derivable from it.
pub struct BuiltOperator {
    pub op: MatrixOperator,
    pub greens: GreensMatrix,
    pub basis: NullspaceBasis,
    /// Input matrix `P` in first-order mode.
    pub p_ctrl: Option<DMatrix<f64>>,
    pub a_ctrl: Option<DMatrix<f64>>,
}

pub fn build_operator(p: &ProblemFile) -> Result<BuiltOperator> {
    let (op, p_ctrl, a_ctrl) = if let Some(m) = &p.operator.mdo {
        if m.entries.len() != m.dim || m.entries.iter().any(|r| r.len() != m.dim) {
            return Err(Error::InvalidProblem("mdo entries must be dim x dim".into()));
        }
        let entries: Vec<OdoPoly> = m
            .entries
            .iter()
            .flatten()
            .map(|c| OdoPoly::new(c.clone()))
            .collect();
        (MatrixOperator::new(m.dim, m.dim, entries), None, None)
    } else if let Some(f) = &p.operator.first_order {
        let a = to_matrix(&f.a)?;
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidProblem("first-order A must be square".into()));
        }
        let p_mat = f.p.as_deref().map(to_matrix).transpose()?;
        (MatrixOperator::first_order(&a), p_mat, Some(a))
    } else {
        let diag = p.operator.diagonal.as_ref().unwrap();
        let ops: Vec<OdoPoly> = diag.iter().map(|c| OdoPoly::new(c.clone())).collect();
        (MatrixOperator::diagonal(ops), None, None)
    };
    let greens = op.greens_matrix()?;
    let basis = op.nullspace_basis()?;
    Ok(BuiltOperator {
        op,
        greens,
        basis,
        p_ctrl,
        a_ctrl,
    })
}

/// Resolves the system mode, the effective dictionary columns, and `Q Q^dag`
/// diagnostics when a control matrix is present.
pub fn resolve_mode(p: &ProblemFile, built: &BuiltOperator) -> Result<(SystemMode, Option<DMatrix<f64>>)> {
    match &p.q_matrix {
        None => Ok((SystemMode::Full, None)),
        Some(rows) => {
            let q = to_matrix(rows)?;
            if q.ncols() != built.greens.dim {
                return Err(Error::InvalidProblem(format!(
                    "Q has {} columns, operator dimension is {}",
                    q.ncols(),
                    built.greens.dim
                )));
            }
            let smith = constant_smith(&q)?;
            Ok((SystemMode::QReduced(smith.q_dagger.clone()), Some(q)))
        }
    }
}

pub fn to_functionals(specs: &[MeasurementSpec], dim: usize) -> Result<Vec<MeasurementFunctional>> {
    specs
        .iter()
        .map(|s| match s {
            MeasurementSpec::Sampling { c, t } => {
                if c.len() != dim {
                    return Err(Error::InvalidProblem(format!(
                        "sampling weight vector has length {}, expected {dim}",
                        c.len()
                    )));
                }
                Ok(MeasurementFunctional::Sampling { c: c.clone(), t: *t })
            }
            MeasurementSpec::WeightedSum { terms } => Ok(MeasurementFunctional::WeightedSum {
                terms: terms.clone(),
            }),
            MeasurementSpec::Quadrature {
                dim_index,
                window,
                weight_samples,
            } => {
                if *dim_index == 0 || *dim_index > dim {
                    return Err(Error::InvalidProblem(format!(
                        "quadrature dim_index {dim_index} out of range 1..={dim}"
                    )));
                }
                Ok(MeasurementFunctional::Quadrature {
                    dim_index: dim_index - 1,
                    window: *window,
                    weight_samples: weight_samples.clone(),
                })
            }
        })
        .collect()
}

fn truth_measure(t: &TruthSpec, dim: usize) -> Result<VectorAtomicMeasure> {
    let atoms = t
        .atoms
        .iter()
        .map(|a| {
            if a.dim_index == 0 || a.dim_index > dim {
                return Err(Error::InvalidProblem(format!(
                    "truth atom dim_index {} out of range 1..={dim}",
                    a.dim_index
                )));
            }
            Ok(Atom {
                location: a.location,
                dim_index: a.dim_index - 1,
                amplitude: a.amplitude,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VectorAtomicMeasure::new(dim, atoms))
}

/// Measurement vector: provided data, or exact simulation from the truth.
pub fn obtain_data(
    p: &ProblemFile,
    built: &BuiltOperator,
    mode: &SystemMode,
    nus: &[MeasurementFunctional],
) -> Result<Vec<f64>> {
    match (&p.data, &p.truth) {
        (Some(y), _) => {
            if y.len() != nus.len() {
                return Err(Error::InvalidProblem(format!(
                    "data has {} entries, {} measurements declared",
                    y.len(),
                    nus.len()
                )));
            }
            Ok(y.clone())
        }
        (None, Some(truth)) => {
            let d_ctrl = match mode {
                SystemMode::Full => built.greens.dim,
                SystemMode::QReduced(qd) => qd.ncols(),
            };
            let atoms = truth_measure(truth, d_ctrl)?;
            let n = built.basis.basis.len();
            let mut q = truth.q.clone();
            q.resize(n, 0.0);
            simulate_data(
                &built.greens,
                &built.basis,
                mode,
                &atoms,
                &q,
                nus,
                p.noise_sigma,
                p.seed,
            )
        }
        (None, None) => Err(Error::InvalidProblem(
            "either `data` or `truth` is required".into(),
        )),
    }
}

fn describe_gf(f: &GeneralizedFunction) -> String {
    let mut parts = Vec::new();
    for p in &f.pieces {
        let terms: Vec<String> = p
            .terms
            .iter()
            .map(|t| {
                let coeff = if t.coeff.im.abs() > 1e-14 {
                    format!("({:+.6}{:+.6}i)", t.coeff.re, t.coeff.im)
                } else {
                    format!("{:+.6}", t.coeff.re)
                };
                let pw = match t.power {
                    0 => String::new(),
                    1 => "*t".into(),
                    k => format!("*t^{k}"),
                };
                let ex = if t.alpha.norm() > 1e-14 {
                    if t.alpha.im.abs() > 1e-14 {
                        format!("*exp(({:+.6}{:+.6}i)t)", t.alpha.re, t.alpha.im)
                    } else {
                        format!("*exp({:+.6}t)", t.alpha.re)
                    }
                } else {
                    String::new()
                };
                format!("{coeff}{pw}{ex}")
            })
            .collect();
        parts.push(format!(
            "{:?}@{:+.6}: {}",
            p.support,
            p.offset,
            terms.join(" ")
        ));
    }
    for d in &f.diracs {
        parts.push(format!(
            "{:+.6}*delta^({})(t{:+.6})",
            d.weight, d.order, -d.location
        ));
    }
    if parts.is_empty() {
        "0".into()
    } else {
        parts.join(" | ")
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn hash_matrix(ms: &[&DMatrix<f64>]) -> String {
    let mut h = DefaultHasher::new();
    for m in ms {
        m.nrows().hash(&mut h);
        m.ncols().hash(&mut h);
        for v in m.iter() {
            v.to_bits().hash(&mut h);
        }
    }
    format!("{:016x}", h.finish())
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Writes the operator analysis: determinant, null-space dimension, symbolic
/// entry descriptions, regularity table, verification report, CSV samples.
pub fn cmd_greens(p: &ProblemFile, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let built = build_operator(p)?;
    let g = &built.greens;
    let verify = built.op.verify_greens(g);
    let regularity = match built.op.regularity_bound()? {
        RegularityBound::NotApplicable(msg) => json!({ "not_applicable": msg }),
        RegularityBound::Table(t) => {
            let rows: Vec<Vec<serde_json::Value>> = (0..g.dim)
                .map(|r| {
                    (0..g.dim)
                        .map(|c| match t[r * g.dim + c] {
                            Some(v) => json!(v),
                            None => serde_json::Value::Null,
                        })
                        .collect()
                })
                .collect();
            json!(rows)
        }
    };
    let entries: Vec<Vec<String>> = (0..g.dim)
        .map(|r| (0..g.dim).map(|c| describe_gf(g.entry(r, c))).collect())
        .collect();
    let report = json!({
        "dim": g.dim,
        "det_coeffs": g.det_op.coeffs(),
        "nullspace_dim": g.nullspace_dim,
        "verify": {
            "max_smooth_residual": verify.max_smooth_residual,
            "max_dirac_deviation": verify.max_dirac_deviation,
            "pass": verify.pass,
        },
        "regularity": regularity,
        "entries": entries,
    });
    write_json(&out.join("greens.json"), &report)?;

    let mut csv = String::from("t");
    for r in 0..g.dim {
        for c in 0..g.dim {
            csv.push_str(&format!(",g_{}_{}", r + 1, c + 1));
        }
    }
    csv.push('\n');
    for t in p.grid.knots() {
        csv.push_str(&format!("{t:.17e}"));
        for r in 0..g.dim {
            for c in 0..g.dim {
                csv.push_str(&format!(",{:.17e}", g.entry(r, c).evaluate_smooth(t)));
            }
        }
        csv.push('\n');
    }
    fs::write(out.join("greens_samples.csv"), csv)?;
    if !verify.pass {
        return Err(Error::VerificationFailed(format!(
            "smooth residual {:.3e}, Dirac deviation {:.3e}",
            verify.max_smooth_residual, verify.max_dirac_deviation
        )));
    }
    Ok(())
}

/// Informational checks: per-functional admissibility, null-space
/// injectivity, controllability rank, Q full-rank.
pub fn cmd_check(p: &ProblemFile, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let built = build_operator(p)?;
    let (mode, q_opt) = resolve_mode(p, &built)?;
    let columns: Vec<Vec<GeneralizedFunction>> = match &mode {
        SystemMode::Full => (0..built.greens.dim).map(|d| built.greens.column(d)).collect(),
        SystemMode::QReduced(qd) => built.greens.mul_const_right(qd),
    };
    let nus = to_functionals(&p.measurements, built.greens.dim)?;

    let mut functional_reports = Vec::new();
    for (i, nu) in nus.iter().enumerate() {
        let rep = admissibility_check_columns(&columns, nu);
        let line = if rep.pass {
            format!("functional #{}: admissible", i + 1)
        } else {
            format!(
                "functional #{}: inadmissible ({})",
                i + 1,
                rep.offenders.join("; ")
            )
        };
        println!("{line}");
        functional_reports.push(json!({
            "index": i + 1,
            "pass": rep.pass,
            "offenders": rep.offenders,
        }));
    }

    // injectivity needs the assembled B; build without admissibility rejection
    let injectivity = {
        let mut b = DMatrix::<f64>::zeros(nus.len(), built.basis.basis.len());
        let mut ok = true;
        for (m, nu) in nus.iter().enumerate() {
            for (n, elem) in built.basis.basis.iter().enumerate() {
                match crate::forward::apply_functional(nu, elem) {
                    Ok(v) => b[(m, n)] = v,
                    Err(_) => ok = false,
                }
            }
        }
        ok && nullspace_injectivity_check(&b)
    };
    println!(
        "nullspace injectivity: {}",
        if injectivity { "pass" } else { "FAIL" }
    );

    let mut report = json!({
        "functionals": functional_reports,
        "nullspace_injectivity": injectivity,
    });

    if let (Some(a), Some(pm)) = (&built.a_ctrl, &built.p_ctrl) {
        let rank = controllability_rank(a, pm);
        let controllable = rank == a.nrows();
        println!(
            "controllability rank: {rank} ({})",
            if controllable {
                "controllable"
            } else {
                "not controllable"
            }
        );
        report["controllability"] = json!({ "rank": rank, "controllable": controllable });
    }
    if let Some(q) = &q_opt {
        let smith = constant_smith(q);
        let full_rank = smith.is_ok();
        println!(
            "Q full-rank: {}",
            if full_rank { "pass" } else { "FAIL (Assumption violated)" }
        );
        if let Ok(s) = &smith {
            let qqd = q * &s.q_dagger;
            let dev = (&qqd - DMatrix::<f64>::identity(q.nrows(), q.nrows())).amax();
            report["q_check"] = json!({ "full_rank": true, "qq_dagger_deviation": dev });
        } else {
            report["q_check"] = json!({ "full_rank": false });
        }
    }
    write_json(&out.join("check.json"), &report)?;
    Ok(())
}

/// Converts internal 0-based atom indices to the file convention (1-based).
fn externalize(result: &SolveResult) -> SolveResult {
    let atoms: Vec<Atom> = result
        .atoms
        .atoms
        .iter()
        .map(|a| Atom {
            dim_index: a.dim_index + 1,
            ..*a
        })
        .collect();
    SolveResult {
        atoms: VectorAtomicMeasure {
            dim: result.atoms.dim,
            atoms,
        },
        ..result.clone()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaResult {
    pub lambda: f64,
    pub result: SolveResult,
    pub certificate_pass: bool,
    pub a_norm: f64,
}

/// Solves for each lambda; writes `solve.json`, per-lambda reconstruction
/// CSVs, and returns the exit code (0 certified, 3 flagged non-convergence).
pub fn cmd_solve(p: &ProblemFile, out: &Path) -> Result<i32> {
    ensure_dir(out)?;
    let built = build_operator(p)?;
    let (mode, _) = resolve_mode(p, &built)?;
    let nus = to_functionals(&p.measurements, built.greens.dim)?;
    let y = obtain_data(p, &built, &mode, &nus)?;
    let mats = build_system(&built.greens, &built.basis, &nus, p.grid, &mode)?;
    let system_hash = hash_matrix(&[&mats.a, &mats.b]);

    let columns: Vec<Vec<GeneralizedFunction>> = match &mode {
        SystemMode::Full => (0..built.greens.dim).map(|d| built.greens.column(d)).collect(),
        SystemMode::QReduced(qd) => built.greens.mul_const_right(qd),
    };

    let mut all = Vec::new();
    let mut exit = EXIT_OK;
    for lambda in p.lambda.values() {
        let cfg = SolveConfig {
            lambda,
            norm: p.norm.clone(),
            max_iters: p.solver.max_iters,
            rel_tol: p.solver.rel_tol,
            restart: p.solver.restart,
            trim_threshold: p.solver.trim_threshold,
            certificate_tol: p.solver.certificate_tol,
        };
        let mut res = fista_solve(&mats, &y, &cfg)?;
        let cert = dual_certificate(&mats, &y, &res, &p.norm, lambda, cfg.certificate_tol);
        let cert_pass = cert.pass;
        res.certificate = Some(cert);
        let mut trimmed = trim_and_audit(&res, &cfg, mats.a.nrows(), mats.b.ncols(), p.grid.step);
        trimmed.a_raw = res.a_raw.clone();
        if !trimmed.converged || !cert_pass {
            exit = EXIT_NOT_CONVERGED;
        }
        let a_norm: f64 = trimmed.a_raw.iter().map(|v| v * v).sum::<f64>().sqrt();

        // reconstruction CSV on the grid
        let comp = crate::forward::spline_components(
            &columns,
            &built.basis,
            &trimmed.atoms,
            &trimmed.q,
        );
        let mut csv = String::from("t");
        for d in 0..comp.len() {
            csv.push_str(&format!(",f_{}", d + 1));
        }
        csv.push('\n');
        for t in p.grid.knots() {
            csv.push_str(&format!("{t:.17e}"));
            for f in &comp {
                csv.push_str(&format!(",{:.17e}", f.evaluate_smooth(t)));
            }
            csv.push('\n');
        }
        let tag = all.len();
        fs::write(out.join(format!("reconstruction_{tag}.csv")), csv)?;

        all.push(LambdaResult {
            lambda,
            result: externalize(&trimmed),
            certificate_pass: cert_pass,
            a_norm,
        });
    }

    let report = json!({
        "system_hash": system_hash,
        "m": mats.a.nrows(),
        "n": mats.b.ncols(),
        "results": all,
    });
    write_json(&out.join("solve.json"), &report)?;
    Ok(exit)
}

/// Runs both regularizations on identical data and writes the comparison.
pub fn cmd_compare(p: &ProblemFile, out: &Path) -> Result<i32> {
    ensure_dir(out)?;
    let built = build_operator(p)?;
    let (mode, _) = resolve_mode(p, &built)?;
    if !matches!(mode, SystemMode::Full) {
        return Err(Error::Unsupported(
            "compare runs on the full (non-reduced) dictionary".into(),
        ));
    }
    let samplings: Vec<SamplingSpec> = p
        .measurements
        .iter()
        .map(|m| match m {
            MeasurementSpec::Sampling { c, t } => Ok(SamplingSpec { c: c.clone(), t: *t }),
            _ => Err(Error::Unsupported(
                "compare requires sampling functionals only".into(),
            )),
        })
        .collect::<Result<_>>()?;

    let nus = to_functionals(&p.measurements, built.greens.dim)?;
    let y = obtain_data(p, &built, &mode, &nus)?;
    let mats = build_system(&built.greens, &built.basis, &nus, p.grid, &mode)?;
    let lambda = p.lambda.values()[0];
    let cfg = SolveConfig {
        lambda,
        norm: p.norm.clone(),
        max_iters: p.solver.max_iters,
        rel_tol: p.solver.rel_tol,
        restart: p.solver.restart,
        trim_threshold: p.solver.trim_threshold,
        certificate_tol: p.solver.certificate_tol,
    };
    let res = fista_solve(&mats, &y, &cfg)?;
    let trimmed = trim_and_audit(&res, &cfg, mats.a.nrows(), mats.b.ncols(), p.grid.step);

    let system = l2_gram(&built.greens, &built.basis, &samplings)?;
    let (alpha, beta) = l2_solve(&system.gram, &system.nullmat, &y, lambda)?;

    let grid: Vec<f64> = p.grid.knots();
    let report = compare_l1_l2(
        &built.greens,
        &built.basis,
        &system,
        &trimmed,
        &alpha,
        &beta,
        &y,
        &grid,
    )?;

    let payload = json!({
        "system_hash": hash_matrix(&[&mats.a, &mats.b, &system.gram, &system.nullmat]),
        "lambda": lambda,
        "report": report,
        "alpha": alpha,
        "beta": beta,
    });
    write_json(&out.join("compare.json"), &payload)?;

    let mut csv = String::from("t");
    let dim = built.greens.dim;
    for d in 0..dim {
        csv.push_str(&format!(",tv_{}", d + 1));
    }
    for d in 0..dim {
        csv.push_str(&format!(",l2_{}", d + 1));
    }
    csv.push('\n');
    for (i, t) in report.grid.iter().enumerate() {
        csv.push_str(&format!("{t:.17e}"));
        for d in 0..dim {
            csv.push_str(&format!(",{:.17e}", report.tv_reconstruction[d][i]));
        }
        for d in 0..dim {
            csv.push_str(&format!(",{:.17e}", report.l2_reconstruction[d][i]));
        }
        csv.push('\n');
    }
    fs::write(out.join("compare_curves.csv"), csv)?;
    Ok(EXIT_OK)
}

/// Maps an error to the CLI exit code contract.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Json(_) | Error::InvalidProblem(_) => EXIT_INPUT,
        Error::Divergence(_) => EXIT_NOT_CONVERGED,
        _ => EXIT_PRECONDITION,
    }
}

/// Applies CLI overrides to a loaded problem.
pub fn apply_overrides(p: &mut ProblemFile, seed: Option<u64>, grid_step: Option<f64>) {
    if let Some(s) = seed {
        p.seed = s;
    }
    if let Some(h) = grid_step {
        let span = p.grid.step * p.grid.count.saturating_sub(1) as f64;
        p.grid.step = h;
        p.grid.count = (span / h).round() as usize + 1;
    }
}

pub fn default_out_dir(problem_path: &Path) -> PathBuf {
    problem_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("out")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_problem(dir: &Path, name: &str, v: &serde_json::Value) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
        path
    }

    fn damper_problem() -> serde_json::Value {
        json!({
            "operator": {
                "first_order": {
                    "a": [[0,0,1,0],[0,0,0,1],[0,0,-1,1],[0,0,1,-1]],
                    "p": [[0],[0],[1],[0]]
                }
            },
            "q_matrix": [[0,0,1,0]],
            "measurements": [
                {"kind":"sampling","c":[1,0,0,0],"t":0.5},
                {"kind":"sampling","c":[1,0,0,0],"t":1.0},
                {"kind":"sampling","c":[1,0,0,0],"t":1.5},
                {"kind":"sampling","c":[1,0,0,0],"t":2.0},
                {"kind":"sampling","c":[0,1,0,0],"t":0.75},
                {"kind":"sampling","c":[0,1,0,0],"t":1.25},
                {"kind":"sampling","c":[0,1,0,0],"t":1.75},
                {"kind":"sampling","c":[0,1,0,0],"t":2.25}
            ],
            "truth": {
                "atoms": [{"location": 1.0, "dim_index": 1, "amplitude": 1.0}],
                "q": [0.0, 0.0, 0.0, 0.0]
            },
            "norm": {"family": "inner", "base": "l2"},
            "lambda": 1e-4,
            "grid": {"start": 0.0, "step": 0.1, "count": 26},
            "solver": {"max_iters": 20000, "rel_tol": 1e-13}
        })
    }

    #[test]
    fn schema_rejects_unknown_keys_and_double_operator() {
        let bad: std::result::Result<ProblemFile, _> = serde_json::from_value(json!({
            "operator": {"diagonal": [[0,1]]},
            "measurements": [{"kind":"sampling","c":[1],"t":1.0}],
            "norm": {"family":"inner","base":"l2"},
            "lambda": 0.1,
            "grid": {"start":0.0,"step":0.1,"count":5},
            "bogus": 1
        }));
        assert!(bad.is_err());

        let mut v = damper_problem();
        v["operator"]["diagonal"] = json!([[0,1]]);
        let p: ProblemFile = serde_json::from_value(v).unwrap();
        assert!(matches!(validate(&p), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn greens_on_damper_writes_golden_det() {
        let dir = tempdir().unwrap();
        let v = damper_problem();
        let path = write_problem(dir.path(), "p.json", &v);
        let p = load_problem(&path).unwrap();
        let out = dir.path().join("out");
        cmd_greens(&p, &out).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("greens.json")).unwrap()).unwrap();
        let det: Vec<f64> = serde_json::from_value(report["det_coeffs"].clone()).unwrap();
        assert_eq!(det.len(), 5);
        for (i, expect) in [0.0, 0.0, 0.0, 2.0, 1.0].iter().enumerate() {
            assert!((det[i] - expect).abs() < 1e-10, "det[{i}] = {}", det[i]);
        }
        assert_eq!(report["nullspace_dim"], 4);
        assert_eq!(report["verify"]["pass"], true);
        assert!(out.join("greens_samples.csv").exists());
    }

    #[test]
    fn noninvertible_operator_maps_to_exit_2() {
        let v = json!({
            "operator": {"mdo": {"dim": 2, "entries": [[[0,1],[0,1]],[[0,0],[0,0]]]}},
            "measurements": [{"kind":"sampling","c":[1,0],"t":1.0}],
            "norm": {"family":"inner","base":"l2"},
            "lambda": 0.1,
            "grid": {"start":0.0,"step":0.1,"count":5}
        });
        let p: ProblemFile = serde_json::from_value(v).unwrap();
        let dir = tempdir().unwrap();
        let err = cmd_greens(&p, dir.path()).unwrap_err();
        assert!(matches!(err, Error::NonInvertible));
        assert_eq!(exit_code_for(&err), EXIT_PRECONDITION);
    }

    #[test]
    fn malformed_json_maps_to_exit_1() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{ not json").unwrap();
        let err = load_problem(&path).unwrap_err();
        assert_eq!(exit_code_for(&err), EXIT_INPUT);
    }

    #[test]
    fn solve_rerun_is_byte_identical() {
        let dir = tempdir().unwrap();
        let path = write_problem(dir.path(), "p.json", &damper_problem());
        let p = load_problem(&path).unwrap();
        let out1 = dir.path().join("o1");
        let out2 = dir.path().join("o2");
        let c1 = cmd_solve(&p, &out1).unwrap();
        let c2 = cmd_solve(&p, &out2).unwrap();
        assert_eq!(c1, c2);
        let a = fs::read(out1.join("solve.json")).unwrap();
        let b = fs::read(out2.join("solve.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_path_reports_nonincreasing_a_norm() {
        let dir = tempdir().unwrap();
        let mut v = damper_problem();
        v["lambda"] = json!([1e-4, 1e-2, 1.0]);
        let path = write_problem(dir.path(), "p.json", &v);
        let p = load_problem(&path).unwrap();
        let out = dir.path().join("out");
        cmd_solve(&p, &out).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("solve.json")).unwrap()).unwrap();
        let results = report["results"].as_array().unwrap();
        assert_eq!(results.len(), 3);
        let norms: Vec<f64> = results
            .iter()
            .map(|r| r["a_norm"].as_f64().unwrap())
            .collect();
        assert!(norms[0] >= norms[1] - 1e-9 && norms[1] >= norms[2] - 1e-9, "{norms:?}");
    }

    #[test]
    fn check_reports_damper_controllability() {
        let dir = tempdir().unwrap();
        let path = write_problem(dir.path(), "p.json", &damper_problem());
        let p = load_problem(&path).unwrap();
        let out = dir.path().join("out");
        cmd_check(&p, &out).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("check.json")).unwrap()).unwrap();
        assert_eq!(report["controllability"]["rank"], 3);
        assert_eq!(report["controllability"]["controllable"], false);
        assert_eq!(report["nullspace_injectivity"], true);
        assert_eq!(report["q_check"]["full_rank"], true);
        for f in report["functionals"].as_array().unwrap() {
            assert_eq!(f["pass"], true);
        }
    }

    #[test]
    fn compare_zero_data_both_zero() {
        let dir = tempdir().unwrap();
        let mut v = json!({
            "operator": {"diagonal": [[0,0,1],[0,0,1]]},
            "measurements": [
                {"kind":"sampling","c":[1,0],"t":0.4},
                {"kind":"sampling","c":[0,1],"t":0.8},
                {"kind":"sampling","c":[1,0],"t":1.2},
                {"kind":"sampling","c":[0,1],"t":1.6},
                {"kind":"sampling","c":[1,0],"t":2.0},
                {"kind":"sampling","c":[0,1],"t":2.4}
            ],
            "norm": {"family":"inner","base":"l2"},
            "lambda": 0.01,
            "grid": {"start":0.0,"step":0.25,"count":11}
        });
        v["data"] = json!([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let path = write_problem(dir.path(), "p.json", &v);
        let p = load_problem(&path).unwrap();
        let out = dir.path().join("out");
        cmd_compare(&p, &out).unwrap();
        let payload: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
        let rep = &payload["report"];
        assert_eq!(rep["tv_atom_count"], 0);
        for d in 0..2 {
            for v in rep["tv_reconstruction"][d].as_array().unwrap() {
                assert!(v.as_f64().unwrap().abs() < 1e-12);
            }
            for v in rep["l2_reconstruction"][d].as_array().unwrap() {
                assert!(v.as_f64().unwrap().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn seed_change_keeps_matrices_identical() {
        let dir = tempdir().unwrap();
        let mut v = damper_problem();
        v["noise_sigma"] = json!(0.01);
        let path = write_problem(dir.path(), "p.json", &v);
        let mut p1 = load_problem(&path).unwrap();
        let mut p2 = load_problem(&path).unwrap();
        apply_overrides(&mut p1, Some(1), None);
        apply_overrides(&mut p2, Some(2), None);
        let out1 = dir.path().join("o1");
        let out2 = dir.path().join("o2");
        cmd_solve(&p1, &out1).unwrap();
        cmd_solve(&p2, &out2).unwrap();
        let r1: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out1.join("solve.json")).unwrap()).unwrap();
        let r2: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out2.join("solve.json")).unwrap()).unwrap();
        assert_eq!(r1["system_hash"], r2["system_hash"]);
        // noise must actually differ
        assert_ne!(
            r1["results"][0]["result"]["objective"],
            r2["results"][0]["result"]["objective"]
        );
    }
}
