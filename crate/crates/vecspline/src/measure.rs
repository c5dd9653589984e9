//! Vector-valued atomic measures and their inner/outer total-variation norms,
//! together with the dual norms used by the optimality certificates.

use serde::{Deserialize, Serialize};

use crate::gf::MERGE_TOL;

/// One weighted Dirac atom acting on a single coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: f64,
    /// Zero-based coordinate index.
    pub dim_index: usize,
    pub amplitude: f64,
}

/// A finite sum of coordinate Dirac atoms in `D` dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorAtomicMeasure {
    pub dim: usize,
    pub atoms: Vec<Atom>,
}

/// Which composite norm to apply, and on top of which base vector norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormFamily {
    Inner,
    Outer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseNorm {
    L1,
    L2,
    Linf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub family: NormFamily,
    pub base: BaseNorm,
    /// Optional strictly positive per-coordinate weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl NormSpec {
    pub fn inner(base: BaseNorm) -> Self {
        Self {
            family: NormFamily::Inner,
            base,
            weights: None,
        }
    }

    pub fn outer(base: BaseNorm) -> Self {
        Self {
            family: NormFamily::Outer,
            base,
            weights: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), String> {
        if let Some(w) = &self.weights {
            if w.len() != dim {
                return Err(format!("weight vector has length {}, expected {dim}", w.len()));
            }
            if w.iter().any(|&x| !(x > 0.0)) {
                return Err("weights must be strictly positive".into());
            }
        }
        Ok(())
    }

    fn weight(&self, d: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[d])
    }
}

/// Weighted base norm `|| (w_d v_d)_d ||_base`.
pub fn base_norm(v: &[f64], spec: &NormSpec) -> f64 {
    match spec.base {
        BaseNorm::L1 => v
            .iter()
            .enumerate()
            .map(|(d, x)| spec.weight(d) * x.abs())
            .sum(),
        BaseNorm::L2 => v
            .iter()
            .enumerate()
            .map(|(d, x)| (spec.weight(d) * x).powi(2))
            .sum::<f64>()
            .sqrt(),
        BaseNorm::Linf => v
            .iter()
            .enumerate()
            .map(|(d, x)| spec.weight(d) * x.abs())
            .fold(0.0, f64::max),
    }
}

/// Dual of the weighted base norm: conjugate exponent with inverse weights.
pub fn dual_vector_norm(v: &[f64], spec: &NormSpec) -> f64 {
    let dual_base = match spec.base {
        BaseNorm::L1 => BaseNorm::Linf,
        BaseNorm::L2 => BaseNorm::L2,
        BaseNorm::Linf => BaseNorm::L1,
    };
    let dual_weights = spec
        .weights
        .as_ref()
        .map(|w| w.iter().map(|&x| 1.0 / x).collect());
    let dual_spec = NormSpec {
        family: spec.family,
        base: dual_base,
        weights: dual_weights,
    };
    base_norm(v, &dual_spec)
}

impl VectorAtomicMeasure {
    pub fn new(dim: usize, atoms: Vec<Atom>) -> Self {
        Self { dim, atoms }.canonicalized()
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, atoms: vec![] }
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Merges atoms sharing a (location, coordinate) key within the location
    /// tolerance and drops exact zeros. Idempotent and order-normalizing.
    pub fn canonicalized(&self) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.sort_by(|a, b| {
            a.location
                .partial_cmp(&b.location)
                .unwrap()
                .then(a.dim_index.cmp(&b.dim_index))
        });
        let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
        for atom in atoms {
            debug_assert!(atom.dim_index < self.dim);
            if let Some(last) = out
                .iter_mut()
                .rev()
                .take_while(|p| (p.location - atom.location).abs() <= MERGE_TOL)
                .find(|p| p.dim_index == atom.dim_index)
            {
                last.amplitude += atom.amplitude;
            } else {
                out.push(atom);
            }
        }
        out.retain(|a| a.amplitude != 0.0);
        Self {
            dim: self.dim,
            atoms: out,
        }
    }

    /// Inner view: amplitude vectors grouped by knot location.
    pub fn knot_groups(&self) -> Vec<(f64, Vec<f64>)> {
        let canon = self.canonicalized();
        let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
        for atom in &canon.atoms {
            match groups
                .last_mut()
                .filter(|(x, _)| (*x - atom.location).abs() <= MERGE_TOL)
            {
                Some((_, v)) => v[atom.dim_index] += atom.amplitude,
                None => {
                    let mut v = vec![0.0; self.dim];
                    v[atom.dim_index] = atom.amplitude;
                    groups.push((atom.location, v));
                }
            }
        }
        groups
    }

    /// Outer view: per-coordinate absolute amplitude sums.
    pub fn coordinate_sums(&self) -> Vec<f64> {
        let canon = self.canonicalized();
        let mut s = vec![0.0; self.dim];
        for atom in &canon.atoms {
            s[atom.dim_index] += atom.amplitude.abs();
        }
        s
    }

    pub fn scale(&self, t: f64) -> Self {
        Self {
            dim: self.dim,
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    amplitude: t * a.amplitude,
                    ..*a
                })
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Self {
            dim: self.dim,
            atoms,
        }
        .canonicalized()
    }
}

/// Sum over knots of the base norm of the local amplitude vector.
pub fn inner_norm(m: &VectorAtomicMeasure, spec: &NormSpec) -> f64 {
    debug_assert_eq!(spec.family, NormFamily::Inner);
    m.knot_groups()
        .iter()
        .map(|(_, v)| base_norm(v, spec))
        .sum()
}

/// Base norm of the vector of per-coordinate total variations.
pub fn outer_norm(m: &VectorAtomicMeasure, spec: &NormSpec) -> f64 {
    debug_assert_eq!(spec.family, NormFamily::Outer);
    base_norm(&m.coordinate_sums(), spec)
}

/// Composite norm dispatched on the family.
pub fn measure_norm(m: &VectorAtomicMeasure, spec: &NormSpec) -> f64 {
    match spec.family {
        NormFamily::Inner => inner_norm(m, spec),
        NormFamily::Outer => outer_norm(m, spec),
    }
}

/// Observed ratio `||m||_A / ||m||_B` reported as an interval (the property
/// suite aggregates these over random measures against the classical bounds).
pub fn norm_equivalence_check(
    m: &VectorAtomicMeasure,
    spec_a: &NormSpec,
    spec_b: &NormSpec,
) -> (f64, f64) {
    let na = measure_norm(m, spec_a);
    let nb = measure_norm(m, spec_b);
    if na == 0.0 && nb == 0.0 {
        return (1.0, 1.0);
    }
    let r = na / nb;
    (r, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn atom(location: f64, dim_index: usize, amplitude: f64) -> Atom {
        Atom {
            location,
            dim_index,
            amplitude,
        }
    }

    #[test]
    fn single_atom_vector_norm() {
        let m = VectorAtomicMeasure::new(2, vec![atom(0.0, 0, 3.0), atom(0.0, 1, 4.0)]);
        assert_relative_eq!(inner_norm(&m, &NormSpec::inner(BaseNorm::L2)), 5.0);
        assert_relative_eq!(outer_norm(&m, &NormSpec::outer(BaseNorm::L2)), 5.0);
    }

    #[test]
    fn separated_knots_l2() {
        let m = VectorAtomicMeasure::new(2, vec![atom(0.0, 0, 1.0), atom(1.0, 1, 1.0)]);
        assert_relative_eq!(inner_norm(&m, &NormSpec::inner(BaseNorm::L2)), 2.0);
        assert_relative_eq!(
            outer_norm(&m, &NormSpec::outer(BaseNorm::L2)),
            2.0f64.sqrt()
        );
    }

    #[test]
    fn empty_measure_is_zero() {
        let m = VectorAtomicMeasure::empty(3);
        assert_eq!(inner_norm(&m, &NormSpec::inner(BaseNorm::L1)), 0.0);
        assert_eq!(outer_norm(&m, &NormSpec::outer(BaseNorm::Linf)), 0.0);
    }

    #[test]
    fn canonicalization_merges_and_drops() {
        let m = VectorAtomicMeasure::new(
            2,
            vec![
                atom(0.5, 0, 1.0),
                atom(0.5 + 1e-10, 0, 2.0),
                atom(0.5, 1, -3.0),
                atom(0.5, 1, 3.0),
            ],
        );
        assert_eq!(m.atoms.len(), 1);
        assert_relative_eq!(m.atoms[0].amplitude, 3.0);
        // idempotent
        assert_eq!(m.canonicalized(), m);
    }

    #[test]
    fn dual_norm_is_conjugate() {
        let spec = NormSpec::inner(BaseNorm::L1);
        assert_relative_eq!(dual_vector_norm(&[1.0, -2.0, 3.0], &spec), 3.0);
        let l2 = NormSpec::inner(BaseNorm::L2);
        assert_relative_eq!(
            dual_vector_norm(&[1.0, -2.0, 3.0], &l2),
            14.0f64.sqrt()
        );
        let linf = NormSpec::inner(BaseNorm::Linf);
        assert_relative_eq!(dual_vector_norm(&[1.0, -2.0, 3.0], &linf), 6.0);
    }

    #[test]
    fn weighted_dual_uses_inverse_weights() {
        let spec = NormSpec {
            family: NormFamily::Inner,
            base: BaseNorm::L2,
            weights: Some(vec![2.0, 4.0]),
        };
        // primal: sqrt((2u1)^2 + (4u2)^2); dual: sqrt((v1/2)^2 + (v2/4)^2)
        assert_relative_eq!(dual_vector_norm(&[2.0, 4.0], &spec), 2.0f64.sqrt());
        // Hoelder with equality for the aligned pair u = (w^-2 v)/||..||
        let v = [2.0, 4.0];
        let u = [2.0 / 4.0, 4.0 / 16.0];
        let ip: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert_relative_eq!(ip, base_norm(&u, &spec) * dual_vector_norm(&v, &spec));
    }

    #[test]
    fn equivalence_single_atom_ratio_one() {
        let m = VectorAtomicMeasure::new(3, vec![atom(1.0, 2, -2.5)]);
        for base in [BaseNorm::L1, BaseNorm::L2, BaseNorm::Linf] {
            let (lo, hi) =
                norm_equivalence_check(&m, &NormSpec::inner(base), &NormSpec::outer(base));
            assert_relative_eq!(lo, 1.0);
            assert_relative_eq!(hi, 1.0);
        }
    }

    fn arb_measure(dim: usize) -> impl Strategy<Value = VectorAtomicMeasure> {
        prop::collection::vec(
            (
                -5.0f64..5.0,
                0..dim,
                prop_oneof![(-10.0f64..10.0).prop_filter("nonzero", |a| a.abs() > 1e-6)],
            ),
            0..12,
        )
        .prop_map(move |raw| {
            VectorAtomicMeasure::new(
                dim,
                raw.into_iter()
                    .map(|(location, dim_index, amplitude)| Atom {
                        location,
                        dim_index,
                        amplitude,
                    })
                    .collect(),
            )
        })
    }

    fn arb_spec(family: NormFamily) -> impl Strategy<Value = NormSpec> {
        prop_oneof![
            Just(BaseNorm::L1),
            Just(BaseNorm::L2),
            Just(BaseNorm::Linf)
        ]
        .prop_map(move |base| NormSpec {
            family,
            base,
            weights: None,
        })
    }

    proptest! {
        #[test]
        fn inner_l1_equals_outer_l1(m in arb_measure(3)) {
            let inner = inner_norm(&m, &NormSpec::inner(BaseNorm::L1));
            let outer = outer_norm(&m, &NormSpec::outer(BaseNorm::L1));
            prop_assert!((inner - outer).abs() <= 1e-12 * (1.0 + inner.abs()));
        }

        #[test]
        fn norms_are_homogeneous(m in arb_measure(3), t in -4.0f64..4.0,
                                 spec in arb_spec(NormFamily::Inner)) {
            let scaled = m.scale(t);
            let inner_spec = spec.clone();
            let outer_spec = NormSpec { family: NormFamily::Outer, ..spec };
            prop_assert!((inner_norm(&scaled, &inner_spec)
                - t.abs() * inner_norm(&m, &inner_spec)).abs() < 1e-10);
            prop_assert!((outer_norm(&scaled, &outer_spec)
                - t.abs() * outer_norm(&m, &outer_spec)).abs() < 1e-10);
        }

        #[test]
        fn triangle_inequality(m1 in arb_measure(3), m2 in arb_measure(3),
                               spec in arb_spec(NormFamily::Inner)) {
            let sum = m1.add(&m2);
            let inner_spec = spec.clone();
            let outer_spec = NormSpec { family: NormFamily::Outer, ..spec };
            prop_assert!(inner_norm(&sum, &inner_spec)
                <= inner_norm(&m1, &inner_spec) + inner_norm(&m2, &inner_spec) + 1e-12);
            prop_assert!(outer_norm(&sum, &outer_spec)
                <= outer_norm(&m1, &outer_spec) + outer_norm(&m2, &outer_spec) + 1e-12);
        }

        #[test]
        fn permutation_invariance(m in arb_measure(3), seed in 0u64..1000,
                                  spec in arb_spec(NormFamily::Inner)) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = m.atoms.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let m2 = VectorAtomicMeasure { dim: m.dim, atoms: shuffled };
            let inner_spec = spec.clone();
            let outer_spec = NormSpec { family: NormFamily::Outer, ..spec };
            prop_assert!((inner_norm(&m, &inner_spec) - inner_norm(&m2, &inner_spec)).abs() < 1e-10);
            prop_assert!((outer_norm(&m, &outer_spec) - outer_norm(&m2, &outer_spec)).abs() < 1e-10);
        }

        #[test]
        fn canonicalization_preserves_norms(m in arb_measure(3),
                                            spec in arb_spec(NormFamily::Inner)) {
            let canon = m.canonicalized();
            prop_assert_eq!(canon.canonicalized(), canon.clone());
            prop_assert!((inner_norm(&m, &spec) - inner_norm(&canon, &spec)).abs() < 1e-10);
        }

        #[test]
        fn hoelder_inequality_and_aligning_vector(
            v in prop::collection::vec(-5.0f64..5.0, 3),
            u in prop::collection::vec(-5.0f64..5.0, 3),
            spec in arb_spec(NormFamily::Inner),
        ) {
            let ip: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            prop_assert!(ip.abs() <= base_norm(&u, &spec) * dual_vector_norm(&v, &spec) + 1e-10);
            // the aligning vector attains equality
            let align: Vec<f64> = match spec.base {
                BaseNorm::L1 => {
                    // primal l1: align = sign at a max-|v| coordinate
                    let (imax, _) = v.iter().enumerate()
                        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).unwrap();
                    let mut a = vec![0.0; 3];
                    a[imax] = v[imax].signum();
                    a
                }
                BaseNorm::L2 => v.clone(),
                BaseNorm::Linf => v.iter().map(|x| x.signum()).collect(),
            };
            let ip2: f64 = align.iter().zip(&v).map(|(a, b)| a * b).sum();
            prop_assert!(
                (ip2 - base_norm(&align, &spec) * dual_vector_norm(&v, &spec)).abs()
                    < 1e-9 * (1.0 + ip2.abs())
            );
        }

        #[test]
        fn classical_l1_l2_equivalence(m in arb_measure(3)) {
            let l1 = inner_norm(&m, &NormSpec::inner(BaseNorm::L1));
            let l2 = inner_norm(&m, &NormSpec::inner(BaseNorm::L2));
            prop_assert!(l2 <= l1 + 1e-12);
            prop_assert!(l1 <= 3.0f64.sqrt() * l2 + 1e-12);
        }
    }
}
