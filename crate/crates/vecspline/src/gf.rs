//! Causal exponential-polynomials plus Dirac combs.
//!
//! Every entry of a Green's matrix, every null-space element and every image
//! `L{f}` handled by this crate is represented exactly in this class, which is
//! closed under differentiation (with jump terms), operator application,
//! shifting, time reversal and convolution with atomic measures.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odo::OdoPoly;

/// Tolerance used to merge exponents and piece offsets.
pub const MERGE_TOL: f64 = 1e-9;
/// Relative floor below which term coefficients are dropped.
pub const DROP_TOL: f64 = 1e-12;
/// Default guard radius around Dirac locations for pointwise evaluation.
pub const DIRAC_GUARD: f64 = 1e-9;
/// Cap on the smoothness order reported by [`GeneralizedFunction::regularity`].
pub const REGULARITY_CAP: i32 = 10;

/// Support of a smooth piece.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    /// `u(t - x) s(t - x)`: nonzero for `t >= x`.
    Causal,
    /// `u(x - t) s(x - t)`: nonzero for `t < x` (right-continuous at `x`).
    AntiCausal,
    /// `s(t - x)` on the whole line (null-space elements).
    Whole,
}

/// One monomial `c * tau^power * exp(alpha * tau)` in the local variable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExpPolyTerm {
    pub alpha: Complex64,
    pub power: u32,
    pub coeff: Complex64,
}

/// A smooth piece `s(tau)` anchored at `offset` with the given support.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Piece {
    pub offset: f64,
    pub support: Support,
    pub terms: Vec<ExpPolyTerm>,
}

/// A weighted Dirac derivative `weight * delta^(order)(. - location)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiracTerm {
    pub location: f64,
    pub order: u32,
    pub weight: f64,
}

/// A generalized function: smooth exponential-polynomial pieces plus a Dirac comb.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GeneralizedFunction {
    pub pieces: Vec<Piece>,
    pub diracs: Vec<DiracTerm>,
}

fn deriv_terms(terms: &[ExpPolyTerm]) -> Vec<ExpPolyTerm> {
    let mut out = Vec::with_capacity(2 * terms.len());
    for t in terms {
        if t.alpha.norm_sqr() > 0.0 || t.power == 0 {
            out.push(ExpPolyTerm {
                alpha: t.alpha,
                power: t.power,
                coeff: t.coeff * t.alpha,
            });
        }
        if t.power > 0 {
            out.push(ExpPolyTerm {
                alpha: t.alpha,
                power: t.power - 1,
                coeff: t.coeff * t.power as f64,
            });
        }
    }
    out
}

/// Value of the k-th derivative of `s` at `tau = 0`.
fn deriv_at_zero(terms: &[ExpPolyTerm], k: u32) -> f64 {
    let mut cur = terms.to_vec();
    for _ in 0..k {
        cur = deriv_terms(&cur);
    }
    let sum: Complex64 = cur
        .iter()
        .filter(|t| t.power == 0)
        .map(|t| t.coeff)
        .sum();
    sum.re
}

fn eval_terms(terms: &[ExpPolyTerm], tau: f64) -> f64 {
    let mut sum = Complex64::new(0.0, 0.0);
    for t in terms {
        sum += t.coeff * tau.powi(t.power as i32) * (t.alpha * tau).exp();
    }
    sum.re
}

impl GeneralizedFunction {
    /// The identically zero function.
    pub fn zero() -> Self {
        Self::default()
    }

    /// A single Dirac `weight * delta^(order)(. - location)`.
    pub fn dirac(location: f64, order: u32, weight: f64) -> Self {
        Self {
            pieces: vec![],
            diracs: vec![DiracTerm {
                location,
                order,
                weight,
            }],
        }
    }

    /// The Heaviside step `u(t)`.
    pub fn heaviside() -> Self {
        Self::causal_piece(
            0.0,
            vec![ExpPolyTerm {
                alpha: Complex64::new(0.0, 0.0),
                power: 0,
                coeff: Complex64::new(1.0, 0.0),
            }],
        )
    }

    pub fn causal_piece(offset: f64, terms: Vec<ExpPolyTerm>) -> Self {
        Self {
            pieces: vec![Piece {
                offset,
                support: Support::Causal,
                terms,
            }],
            diracs: vec![],
        }
        .canonicalized()
    }

    pub fn whole_piece(offset: f64, terms: Vec<ExpPolyTerm>) -> Self {
        Self {
            pieces: vec![Piece {
                offset,
                support: Support::Whole,
                terms,
            }],
            diracs: vec![],
        }
        .canonicalized()
    }

    pub fn is_zero(&self) -> bool {
        self.pieces.is_empty() && self.diracs.is_empty()
    }

    /// Largest coefficient magnitude over all smooth terms.
    pub fn smooth_scale(&self) -> f64 {
        self.pieces
            .iter()
            .flat_map(|p| p.terms.iter())
            .map(|t| t.coeff.norm())
            .fold(0.0, f64::max)
    }

    /// Largest Dirac weight magnitude.
    pub fn dirac_scale(&self) -> f64 {
        self.diracs.iter().map(|d| d.weight.abs()).fold(0.0, f64::max)
    }

    /// All piece boundary locations (offsets of causal/anti-causal pieces).
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .pieces
            .iter()
            .filter(|p| p.support != Support::Whole)
            .map(|p| p.offset)
            .collect();
        b.sort_by(f64::total_cmp);
        b.dedup_by(|a, b| (*a - *b).abs() <= MERGE_TOL);
        b
    }

    /// Distributional derivative: term-wise differentiation plus boundary jumps;
    /// Dirac orders are incremented.
    pub fn differentiate(&self) -> Self {
        let mut pieces = Vec::with_capacity(self.pieces.len());
        let mut diracs: Vec<DiracTerm> = self
            .diracs
            .iter()
            .map(|d| DiracTerm {
                location: d.location,
                order: d.order + 1,
                weight: d.weight,
            })
            .collect();
        for p in &self.pieces {
            match p.support {
                Support::Causal => {
                    let jump = deriv_at_zero(&p.terms, 0);
                    if jump != 0.0 {
                        diracs.push(DiracTerm {
                            location: p.offset,
                            order: 0,
                            weight: jump,
                        });
                    }
                    pieces.push(Piece {
                        offset: p.offset,
                        support: Support::Causal,
                        terms: deriv_terms(&p.terms),
                    });
                }
                Support::AntiCausal => {
                    // d/dt [u(x-t) s(x-t)] = -u(x-t) s'(x-t) - s(0) delta(.-x)
                    let jump = deriv_at_zero(&p.terms, 0);
                    if jump != 0.0 {
                        diracs.push(DiracTerm {
                            location: p.offset,
                            order: 0,
                            weight: -jump,
                        });
                    }
                    let terms = deriv_terms(&p.terms)
                        .into_iter()
                        .map(|t| ExpPolyTerm {
                            coeff: -t.coeff,
                            ..t
                        })
                        .collect();
                    pieces.push(Piece {
                        offset: p.offset,
                        support: Support::AntiCausal,
                        terms,
                    });
                }
                Support::Whole => pieces.push(Piece {
                    offset: p.offset,
                    support: Support::Whole,
                    terms: deriv_terms(&p.terms),
                }),
            }
        }
        Self { pieces, diracs }.canonicalized()
    }

    /// Applies the scalar operator `sum_n a_n D^n`.
    pub fn apply_odo(&self, op: &OdoPoly) -> Self {
        let mut acc = Self::zero();
        let mut current = self.clone();
        for (n, &a) in op.coeffs().iter().enumerate() {
            if n > 0 {
                current = current.differentiate();
            }
            if a != 0.0 {
                acc = acc.add(&current.scale(a));
            }
        }
        acc.canonicalized()
    }

    /// Translation by `x`.
    pub fn shift(&self, x: f64) -> Self {
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                offset: p.offset + x,
                support: p.support,
                terms: p.terms.clone(),
            })
            .collect();
        let diracs = self
            .diracs
            .iter()
            .map(|d| DiracTerm {
                location: d.location + x,
                ..*d
            })
            .collect();
        Self { pieces, diracs }
    }

    /// Time reversal `f(-t)`.
    pub fn reverse(&self) -> Self {
        let pieces = self
            .pieces
            .iter()
            .map(|p| match p.support {
                Support::Causal => Piece {
                    offset: -p.offset,
                    support: Support::AntiCausal,
                    terms: p.terms.clone(),
                },
                Support::AntiCausal => Piece {
                    offset: -p.offset,
                    support: Support::Causal,
                    terms: p.terms.clone(),
                },
                Support::Whole => Piece {
                    offset: -p.offset,
                    support: Support::Whole,
                    terms: p
                        .terms
                        .iter()
                        .map(|t| ExpPolyTerm {
                            alpha: -t.alpha,
                            power: t.power,
                            coeff: t.coeff * (-1.0f64).powi(t.power as i32),
                        })
                        .collect(),
                },
            })
            .collect();
        let diracs = self
            .diracs
            .iter()
            .map(|d| DiracTerm {
                location: -d.location,
                order: d.order,
                weight: d.weight * (-1.0f64).powi(d.order as i32),
            })
            .collect();
        Self { pieces, diracs }.canonicalized()
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero();
        }
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                offset: p.offset,
                support: p.support,
                terms: p
                    .terms
                    .iter()
                    .map(|t| ExpPolyTerm {
                        coeff: t.coeff * c,
                        ..*t
                    })
                    .collect(),
            })
            .collect();
        let diracs = self
            .diracs
            .iter()
            .map(|d| DiracTerm {
                weight: d.weight * c,
                ..*d
            })
            .collect();
        Self { pieces, diracs }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut pieces = self.pieces.clone();
        pieces.extend(other.pieces.iter().cloned());
        let mut diracs = self.diracs.clone();
        diracs.extend(other.diracs.iter().cloned());
        Self { pieces, diracs }.canonicalized()
    }

    /// `sum_k a_k f(. - x_k)` for atoms `(x_k, a_k)`.
    pub fn convolve_atoms(&self, atoms: &[(f64, f64)]) -> Self {
        let mut acc = Self::zero();
        for &(x, a) in atoms {
            acc = acc.add(&self.shift(x).scale(a));
        }
        acc
    }

    /// Pointwise evaluation of the smooth part (right limit at boundaries).
    ///
    /// Errors if a Dirac lies within `guard` of `t`.
    pub fn evaluate_guarded(&self, t: f64, guard: f64) -> Result<f64> {
        for d in &self.diracs {
            if (d.location - t).abs() <= guard {
                return Err(Error::DiracHit {
                    t,
                    location: d.location,
                    guard,
                });
            }
        }
        Ok(self.evaluate_smooth(t))
    }

    /// Pointwise evaluation of the smooth part with the default guard.
    pub fn evaluate(&self, t: f64) -> Result<f64> {
        self.evaluate_guarded(t, DIRAC_GUARD)
    }

    /// Smooth-part value, ignoring the Dirac comb.
    pub fn evaluate_smooth(&self, t: f64) -> f64 {
        let mut sum = 0.0;
        for p in &self.pieces {
            match p.support {
                Support::Causal => {
                    let tau = t - p.offset;
                    if tau >= 0.0 {
                        sum += eval_terms(&p.terms, tau);
                    }
                }
                Support::AntiCausal => {
                    let tau = p.offset - t;
                    if tau > 0.0 {
                        sum += eval_terms(&p.terms, tau);
                    }
                }
                Support::Whole => sum += eval_terms(&p.terms, t - p.offset),
            }
        }
        sum
    }

    /// Regularity index: `-(N+2)` if the highest Dirac order is `N`; `-1` for a
    /// jump discontinuity; otherwise the largest `k <= cap` such that all
    /// derivatives through order `k` are continuous at every piece boundary.
    pub fn regularity(&self) -> i32 {
        self.regularity_capped(REGULARITY_CAP)
    }

    pub fn regularity_capped(&self, cap: i32) -> i32 {
        if let Some(max_order) = self.diracs.iter().map(|d| d.order).max() {
            return -((max_order as i32) + 2);
        }
        let scale = self.smooth_scale().max(1.0);
        let boundaries = self.boundaries();
        for k in 0..=cap {
            for &x in &boundaries {
                let mut jump = 0.0;
                for p in &self.pieces {
                    if p.support == Support::Whole || (p.offset - x).abs() > MERGE_TOL {
                        continue;
                    }
                    let v = deriv_at_zero(&p.terms, k as u32);
                    match p.support {
                        Support::Causal => jump += v,
                        Support::AntiCausal => jump -= (-1.0f64).powi(k) * v,
                        Support::Whole => unreachable!(),
                    }
                }
                if jump.abs() > MERGE_TOL * scale {
                    return k - 1;
                }
            }
        }
        cap
    }

    /// Canonical form: pieces merged by (support, offset), terms merged by
    /// (alpha, power), realness enforced by conjugate symmetrization, small
    /// coefficients dropped, Diracs sorted and merged.
    pub fn canonicalized(mut self) -> Self {
        // merge pieces
        let mut merged: Vec<Piece> = Vec::new();
        self.pieces.sort_by(|a, b| {
            (a.support as u8, a.offset)
                .partial_cmp(&(b.support as u8, b.offset))
                .unwrap()
        });
        for p in self.pieces.drain(..) {
            if let Some(last) = merged.last_mut() {
                if last.support == p.support && (last.offset - p.offset).abs() <= MERGE_TOL {
                    last.terms.extend(p.terms);
                    continue;
                }
            }
            merged.push(p);
        }
        for p in &mut merged {
            p.terms = canonical_terms(std::mem::take(&mut p.terms));
        }
        merged.retain(|p| !p.terms.is_empty());

        // merge diracs
        self.diracs
            .sort_by(|a, b| (a.location, a.order).partial_cmp(&(b.location, b.order)).unwrap());
        let mut diracs: Vec<DiracTerm> = Vec::new();
        for d in self.diracs.drain(..) {
            if let Some(last) = diracs.last_mut() {
                if last.order == d.order && (last.location - d.location).abs() <= MERGE_TOL {
                    last.weight += d.weight;
                    continue;
                }
            }
            diracs.push(d);
        }
        let wmax = diracs.iter().map(|d| d.weight.abs()).fold(0.0, f64::max);
        diracs.retain(|d| d.weight.abs() > DROP_TOL * wmax.max(1.0) * 1e-2 && d.weight != 0.0);

        Self {
            pieces: merged,
            diracs,
        }
    }
}

/// Merges terms sharing (alpha, power), enforces conjugate symmetry and drops
/// coefficients below the relative floor.
fn canonical_terms(terms: Vec<ExpPolyTerm>) -> Vec<ExpPolyTerm> {
    let mut merged: Vec<ExpPolyTerm> = Vec::new();
    for t in terms {
        if let Some(m) = merged.iter_mut().find(|m| {
            m.power == t.power && (m.alpha - t.alpha).norm() <= MERGE_TOL
        }) {
            m.coeff += t.coeff;
        } else {
            merged.push(t);
        }
    }
    // realness: real exponents keep the real part of the coefficient; complex
    // exponents are paired with their conjugate and symmetrized
    let n = merged.len();
    let mut visited = vec![false; n];
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if merged[i].alpha.im.abs() <= MERGE_TOL {
            merged[i].alpha.im = 0.0;
            merged[i].coeff.im = 0.0;
            continue;
        }
        let conj_alpha = merged[i].alpha.conj();
        if let Some(j) = (0..n).find(|&j| {
            !visited[j]
                && merged[j].power == merged[i].power
                && (merged[j].alpha - conj_alpha).norm() <= MERGE_TOL
        }) {
            visited[j] = true;
            let c = 0.5 * (merged[i].coeff + merged[j].coeff.conj());
            merged[i].coeff = c;
            merged[j].coeff = c.conj();
            merged[j].alpha = conj_alpha;
        }
    }
    let cmax = merged.iter().map(|t| t.coeff.norm()).fold(0.0, f64::max);
    merged.retain(|t| t.coeff.norm() > DROP_TOL * cmax);
    merged.sort_by(|a, b| {
        (a.power, a.alpha.re, a.alpha.im)
            .partial_cmp(&(b.power, b.alpha.re, b.alpha.im))
            .unwrap()
    });
    merged
}
