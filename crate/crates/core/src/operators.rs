//! Local and global operators built from separable potentials.
//!
//! Every local operator has the form `T_i = Id - tau * grad f_i` where
//! `f_i(x) = sum_k p_k(x_k)` is a sum of scalar potentials applied to each
//! coordinate. The Lipschitz constant is certified on the box `[-B, B]^n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{seeded, Purpose};

/// Default operating box for the non-convex suite.
pub const NONCONVEX_BOX: f64 = 5.0;
/// Default operating box for the strongly-convex suite. The quartic terms make
/// `T_i` expansive outside roughly `|x| < 0.577`; this box keeps `L < 1` and
/// contains every local and global fixed point of the suite.
pub const STRONGLY_CONVEX_BOX: f64 = 0.55;
pub const NONCONVEX_TAU: f64 = 0.1;
pub const STRONGLY_CONVEX_TAU: f64 = 0.5;

/// Samples used to estimate the heterogeneity bound.
pub const HETEROGENEITY_SAMPLES: usize = 10_000;
/// Multiplicative inflation applied to the empirical heterogeneity.
pub const HETEROGENEITY_INFLATION: f64 = 1.1;

const LIPSCHITZ_GRID: usize = 100_000;

/// One additive term of a scalar potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Term {
    /// `coef * x^power`
    Poly { coef: f64, power: i32 },
    /// `coef * exp(x)`
    Exp { coef: f64 },
    /// `coef * exp(-x^2)`
    GaussBump { coef: f64 },
    /// `coef * sin(freq * x + phase)`
    Sin { coef: f64, freq: f64, phase: f64 },
    /// `coef * cos(freq * x + phase)`
    Cos { coef: f64, freq: f64, phase: f64 },
}

impl Term {
    /// Value and first three derivatives at `x`.
    fn jet(&self, x: f64) -> [f64; 4] {
        match *self {
            Term::Poly { coef, power } => {
                let p = power as f64;
                let pw = |k: i32| if power - k < 0 { 0.0 } else { x.powi(power - k) };
                [
                    coef * pw(0),
                    coef * p * pw(1),
                    coef * p * (p - 1.0) * pw(2),
                    coef * p * (p - 1.0) * (p - 2.0) * pw(3),
                ]
            }
            Term::Exp { coef } => {
                let e = coef * x.exp();
                [e, e, e, e]
            }
            Term::GaussBump { coef } => {
                let e = coef * (-x * x).exp();
                [
                    e,
                    -2.0 * x * e,
                    (4.0 * x * x - 2.0) * e,
                    (12.0 * x - 8.0 * x * x * x) * e,
                ]
            }
            Term::Sin { coef, freq, phase } => {
                let (s, c) = (freq * x + phase).sin_cos();
                let f2 = freq * freq;
                [coef * s, coef * freq * c, -coef * f2 * s, -coef * f2 * freq * c]
            }
            Term::Cos { coef, freq, phase } => {
                let (s, c) = (freq * x + phase).sin_cos();
                let f2 = freq * freq;
                [coef * c, -coef * freq * s, -coef * f2 * c, coef * f2 * freq * s]
            }
        }
    }
}

/// Scalar function `p(s) = sum of terms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarPotential {
    pub terms: Vec<Term>,
}

impl ScalarPotential {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    /// `0.5 * curvature * s^2 - linear * s`
    pub fn quadratic(curvature: f64, linear: f64) -> Self {
        Self::new(vec![
            Term::Poly { coef: 0.5 * curvature, power: 2 },
            Term::Poly { coef: -linear, power: 1 },
        ])
    }

    fn jet(&self, s: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for t in &self.terms {
            let j = t.jet(s);
            for k in 0..4 {
                out[k] += j[k];
            }
        }
        out
    }

    pub fn value(&self, s: f64) -> f64 {
        self.jet(s)[0]
    }

    pub fn derivative(&self, s: f64) -> f64 {
        self.jet(s)[1]
    }

    pub fn second_derivative(&self, s: f64) -> f64 {
        self.jet(s)[2]
    }

    /// Upper bound on `sup |1 - tau p''(s)|` over `[-b, b]`: grid maximum plus
    /// half a grid step times the largest `|tau p'''|` seen on the grid.
    fn km_lipschitz(&self, tau: f64, b: f64) -> f64 {
        let h = 2.0 * b / LIPSCHITZ_GRID as f64;
        let mut best: f64 = 0.0;
        let mut third: f64 = 0.0;
        for k in 0..=LIPSCHITZ_GRID {
            let s = -b + h * k as f64;
            let j = self.jet(s);
            best = best.max((1.0 - tau * j[2]).abs());
            third = third.max((tau * j[3]).abs());
        }
        best + 0.5 * h * third
    }
}

/// Local operator `T_i(x) = x - tau * grad f_i(x)` with a certified Lipschitz
/// constant on `[-box_bound, box_bound]^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    dim: usize,
    /// One potential broadcast to every coordinate, or one per coordinate.
    potentials: Vec<ScalarPotential>,
    tau: f64,
    lipschitz: f64,
    box_bound: f64,
}

impl OperatorSpec {
    pub fn new(dim: usize, potentials: Vec<ScalarPotential>, tau: f64, box_bound: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSize("operator dimension must be positive".into()));
        }
        if potentials.len() != 1 && potentials.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: potentials.len(),
            });
        }
        if !(tau > 0.0) {
            return Err(invalid("tau", format!("{tau} must be positive")));
        }
        if !(box_bound > 0.0) {
            return Err(invalid("box_bound", format!("{box_bound} must be positive")));
        }
        let lipschitz = potentials
            .iter()
            .map(|p| p.km_lipschitz(tau, box_bound))
            .fold(0.0, f64::max);
        Ok(Self {
            dim,
            potentials,
            tau,
            lipschitz,
            box_bound,
        })
    }

    pub fn broadcast(dim: usize, potential: ScalarPotential, tau: f64, box_bound: f64) -> Result<Self> {
        Self::new(dim, vec![potential], tau, box_bound)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn box_bound(&self) -> f64 {
        self.box_bound
    }

    fn potential_at(&self, k: usize) -> &ScalarPotential {
        if self.potentials.len() == 1 {
            &self.potentials[0]
        } else {
            &self.potentials[k]
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        for k in 0..self.dim {
            out[k] = x[k] - self.tau * self.potential_at(k).derivative(x[k]);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(x, &mut out);
        out
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        (0..self.dim).map(|k| self.potential_at(k).value(x[k])).sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|k| self.potential_at(k).derivative(x[k])).collect()
    }

    /// Largest `|d^2 f_i / dx_k^2|` on the box (smoothness constant `m`).
    pub fn smoothness(&self) -> f64 {
        let b = self.box_bound;
        let h = 2.0 * b / LIPSCHITZ_GRID as f64;
        let mut m: f64 = 0.0;
        for p in &self.potentials {
            for k in 0..=LIPSCHITZ_GRID {
                m = m.max(p.second_derivative(-b + h * k as f64).abs());
            }
        }
        m
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() <= self.box_bound)
    }
}

/// `T(x) = (1/N) sum_i T_i(x)` with a heterogeneity bound `zeta`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalOperator {
    locals: Vec<OperatorSpec>,
    heterogeneity_zeta: f64,
}

impl GlobalOperator {
    pub fn new(locals: Vec<OperatorSpec>, heterogeneity_zeta: f64) -> Result<Self> {
        let first = locals
            .first()
            .ok_or_else(|| Error::InvalidSize("global operator needs at least one local".into()))?;
        let dim = first.dim();
        for op in &locals {
            if op.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: op.dim(),
                });
            }
        }
        Ok(Self {
            locals,
            heterogeneity_zeta,
        })
    }

    /// Builds the operator and sets `zeta` from [`estimate_heterogeneity`]
    /// on the common box, inflated by [`HETEROGENEITY_INFLATION`].
    pub fn with_estimated_zeta(locals: Vec<OperatorSpec>) -> Result<Self> {
        let mut g = Self::new(locals, 0.0)?;
        let b = g.box_bound();
        g.heterogeneity_zeta =
            HETEROGENEITY_INFLATION * estimate_heterogeneity(&g, b, HETEROGENEITY_SAMPLES, 0x5eed);
        Ok(g)
    }

    pub fn locals(&self) -> &[OperatorSpec] {
        &self.locals
    }

    pub fn n_agents(&self) -> usize {
        self.locals.len()
    }

    pub fn dim(&self) -> usize {
        self.locals[0].dim()
    }

    pub fn heterogeneity_zeta(&self) -> f64 {
        self.heterogeneity_zeta
    }

    /// Largest local Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        self.locals.iter().map(|o| o.lipschitz()).fold(0.0, f64::max)
    }

    /// Smallest box shared by all locals.
    pub fn box_bound(&self) -> f64 {
        self.locals
            .iter()
            .map(|o| o.box_bound())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_contractive(&self) -> bool {
        self.lipschitz() < 1.0
    }

    /// Common step scale when every local shares one.
    pub fn tau(&self) -> Option<f64> {
        let t = self.locals[0].tau();
        self.locals.iter().all(|o| o.tau() == t).then_some(t)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out, &mut vec![0.0; x.len()]);
        Ok(out)
    }

    /// Allocation-free variant; `scratch` must have length `dim`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let inv = 1.0 / self.n_agents() as f64;
        for op in &self.locals {
            op.apply_into(x, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += s;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
    }

    /// `(1/N) sum_i f_i(x)`
    pub fn mean_potential(&self, x: &[f64]) -> f64 {
        self.locals.iter().map(|o| o.potential(x)).sum::<f64>() / self.n_agents() as f64
    }

    /// `(1/N) sum_i ||T_i(x) - T(x)||^2`
    pub fn spread(&self, x: &[f64]) -> f64 {
        let n = self.n_agents() as f64;
        let outs: Vec<Vec<f64>> = self.locals.iter().map(|o| o.apply(x)).collect();
        let mut mean = vec![0.0; x.len()];
        for o in &outs {
            for (m, v) in mean.iter_mut().zip(o) {
                *m += v / n;
            }
        }
        outs.iter()
            .map(|o| o.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n
    }

    pub fn residual_sq(&self, x: &[f64]) -> f64 {
        let tx = self.apply(x).expect("dimension checked by caller");
        x.iter().zip(&tx).map(|(a, b)| (a - b).powi(2)).sum()
    }
}

/// Empirical `sup sqrt(spread(x))` over uniform samples in `[-b, b]^n`.
///
/// Samples are `b * u_j` for a fixed-seed set of `u_j` in the unit cube, so
/// estimates for different boxes use common random numbers.
pub fn estimate_heterogeneity(g: &GlobalOperator, b: f64, n_samples: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed, Purpose::Sampling);
    let dim = g.dim();
    let mut worst: f64 = 0.0;
    let mut x = vec![0.0; dim];
    for _ in 0..n_samples {
        for v in x.iter_mut() {
            *v = b * rng.random_range(-1.0..=1.0);
        }
        worst = worst.max(g.spread(&x));
    }
    worst.sqrt()
}

fn nonconvex_potentials() -> Vec<ScalarPotential> {
    use Term::*;
    vec![
        // 0.06 x^4 - 0.02 x^2
        ScalarPotential::new(vec![Poly { coef: 0.06, power: 4 }, Poly { coef: -0.02, power: 2 }]),
        // 0.05 sin(x + 1/2) + 0.15 cos(10x/3)
        ScalarPotential::new(vec![
            Sin { coef: 0.05, freq: 1.0, phase: 0.5 },
            Cos { coef: 0.15, freq: 10.0 / 3.0, phase: 0.0 },
        ]),
        // 0.1 e^{-x^2} + 0.1 x^4 - 0.3 x^2
        ScalarPotential::new(vec![
            GaussBump { coef: 0.1 },
            Poly { coef: 0.1, power: 4 },
            Poly { coef: -0.3, power: 2 },
        ]),
        // 0.14 x^4 - 0.2 x^2
        ScalarPotential::new(vec![Poly { coef: 0.14, power: 4 }, Poly { coef: -0.2, power: 2 }]),
        // 0.45 cos(x) + 0.15 sin(10x/3 + 1/2)
        ScalarPotential::new(vec![
            Cos { coef: 0.45, freq: 1.0, phase: 0.0 },
            Sin { coef: 0.15, freq: 10.0 / 3.0, phase: 0.5 },
        ]),
        // 0.4 e^{-x^2} - 0.3 x^2
        ScalarPotential::new(vec![GaussBump { coef: 0.4 }, Poly { coef: -0.3, power: 2 }]),
    ]
}

fn strongly_convex_potentials() -> Vec<ScalarPotential> {
    use Term::*;
    vec![
        // x^2 + 1.5x + 0.9
        ScalarPotential::new(vec![
            Poly { coef: 1.0, power: 2 },
            Poly { coef: 1.5, power: 1 },
            Poly { coef: 0.9, power: 0 },
        ]),
        // 0.4 x^2 + 0.7 e^x
        ScalarPotential::new(vec![Poly { coef: 0.4, power: 2 }, Exp { coef: 0.7 }]),
        // 0.2 x^4 + 0.6 x^2
        ScalarPotential::new(vec![Poly { coef: 0.2, power: 4 }, Poly { coef: 0.6, power: 2 }]),
        // x^2 + 1.5x + 0.1
        ScalarPotential::new(vec![
            Poly { coef: 1.0, power: 2 },
            Poly { coef: 1.5, power: 1 },
            Poly { coef: 0.1, power: 0 },
        ]),
        // 0.6 x^2 + 0.3 e^x
        ScalarPotential::new(vec![Poly { coef: 0.6, power: 2 }, Exp { coef: 0.3 }]),
        // 0.8 x^4 + 0.4 x^2
        ScalarPotential::new(vec![Poly { coef: 0.8, power: 4 }, Poly { coef: 0.4, power: 2 }]),
    ]
}

/// Six expansive local operators, `tau = 0.1`, certified on `[-5, 5]^dim`.
pub fn make_nonconvex_suite(dim: usize) -> Result<GlobalOperator> {
    make_suite_with_box(dim, nonconvex_potentials(), NONCONVEX_TAU, NONCONVEX_BOX)
}

/// Six contractive local operators, `tau = 0.5`, certified on `[-0.55, 0.55]^dim`.
pub fn make_strongly_convex_suite(dim: usize) -> Result<GlobalOperator> {
    make_suite_with_box(dim, strongly_convex_potentials(), STRONGLY_CONVEX_TAU, STRONGLY_CONVEX_BOX)
}

pub fn make_suite_with_box(
    dim: usize,
    potentials: Vec<ScalarPotential>,
    tau: f64,
    box_bound: f64,
) -> Result<GlobalOperator> {
    if dim == 0 {
        return Err(Error::InvalidSize("suite dimension must be positive".into()));
    }
    let locals = potentials
        .into_iter()
        .map(|p| OperatorSpec::broadcast(dim, p, tau, box_bound))
        .collect::<Result<Vec<_>>>()?;
    GlobalOperator::with_estimated_zeta(locals)
}

/// Named suites selectable from configuration.
pub fn suite_potentials(name: &str) -> Option<(Vec<ScalarPotential>, f64, f64)> {
    match name {
        "nonconvex" => Some((nonconvex_potentials(), NONCONVEX_TAU, NONCONVEX_BOX)),
        "strongly_convex" => Some((
            strongly_convex_potentials(),
            STRONGLY_CONVEX_TAU,
            STRONGLY_CONVEX_BOX,
        )),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointKind {
    /// Unique fixed point of a contraction (Picard iteration).
    Contractive,
    /// Limit of centralized KM on a non-contractive operator.
    LocalStationary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub kind: FixedPointKind,
}

pub const FIXED_POINT_MAX_ITERS: usize = 1_000_000;

pub fn find_fixed_point(g: &GlobalOperator, tol: f64) -> Result<FixedPoint> {
    find_fixed_point_from(g, &vec![0.0; g.dim()], tol)
}

/// Picard iteration for contractions; KM with `eta_t = 1/sqrt(t + 100)`
/// otherwise. Stops when `||T(x) - x|| <= tol`.
pub fn find_fixed_point_from(g: &GlobalOperator, x0: &[f64], tol: f64) -> Result<FixedPoint> {
    if x0.len() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: x0.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", "tolerance must be positive"));
    }
    let contractive = g.is_contractive();
    let mut x = x0.to_vec();
    let mut tx = vec![0.0; x.len()];
    let mut scratch = vec![0.0; x.len()];
    let mut residual = f64::INFINITY;
    for t in 0..=FIXED_POINT_MAX_ITERS {
        g.apply_into(&x, &mut tx, &mut scratch);
        residual = x
            .iter()
            .zip(&tx)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(FixedPoint {
                x,
                residual,
                iterations: t,
                kind: if contractive {
                    FixedPointKind::Contractive
                } else {
                    FixedPointKind::LocalStationary
                },
            });
        }
        if contractive {
            x.copy_from_slice(&tx);
        } else {
            let eta = 1.0 / ((t as f64) + 100.0).sqrt();
            for (xi, ti) in x.iter_mut().zip(&tx) {
                *xi += eta * (ti - *xi);
            }
        }
    }
    Err(Error::NoFixedPoint {
        iterations: FIXED_POINT_MAX_ITERS,
        last_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_op(potential: ScalarPotential, tau: f64) -> OperatorSpec {
        OperatorSpec::broadcast(1, potential, tau, 5.0).unwrap()
    }

    #[test]
    fn f4_hand_values() {
        let (pots, tau, _) = suite_potentials("nonconvex").unwrap();
        let f4 = &pots[3];
        assert!((f4.value(1.0) - (-0.06)).abs() < 1e-15);
        assert!((f4.derivative(1.0) - 0.16).abs() < 1e-15);
        let op = scalar_op(f4.clone(), tau);
        assert!((op.apply(&[1.0])[0] - 0.984).abs() < 1e-15);
    }

    #[test]
    fn f1_stationary_at_zero() {
        let (pots, tau, _) = suite_potentials("nonconvex").unwrap();
        assert_eq!(scalar_op(pots[0].clone(), tau).apply(&[0.0])[0], 0.0);
    }

    #[test]
    fn saddle_example_lipschitz() {
        // x1^2 - x2^2 with tau = 0.1: L = max(|1 - 2 tau|, |1 + 2 tau|) = 1.2
        let op = OperatorSpec::new(
            2,
            vec![ScalarPotential::quadratic(2.0, 0.0), ScalarPotential::quadratic(-2.0, 0.0)],
            0.1,
            5.0,
        )
        .unwrap();
        assert!((op.lipschitz() - 1.2).abs() < 1e-12);
        assert_eq!(op.apply(&[1.0, 1.0]), vec![0.8, 1.2]);
    }

    #[test]
    fn strongly_convex_hand_values() {
        let (pots, tau, _) = suite_potentials("strongly_convex").unwrap();
        assert!((pots[0].derivative(0.0) - 1.5).abs() < 1e-15);
        assert!((scalar_op(pots[0].clone(), tau).apply(&[0.0])[0] + 0.75).abs() < 1e-15);
        assert_eq!(scalar_op(pots[2].clone(), tau).apply(&[0.0])[0], 0.0);
    }

    #[test]
    fn quadratic_contraction_factor() {
        // mu = m = 1.2, tau = 0.5: 1 - 2 tau mu + tau^2 m^2 = 0.16
        let tau: f64 = 0.5;
        let m: f64 = 1.2;
        let factor_sq = 1.0 - 2.0 * tau * m + tau * tau * m * m;
        assert!((factor_sq - 0.16).abs() < 1e-12);
        let op = scalar_op(ScalarPotential::quadratic(m, 0.0), tau);
        assert!((op.lipschitz().powi(2) - factor_sq).abs() < 1e-12);
    }

    #[test]
    fn suites_have_expected_regimes() {
        let nc = make_nonconvex_suite(3).unwrap();
        assert_eq!(nc.n_agents(), 6);
        assert!(nc.lipschitz() > 1.0);
        let sc = make_strongly_convex_suite(3).unwrap();
        assert!(sc.lipschitz() < 1.0);
        assert!(sc.heterogeneity_zeta() > 0.0);
    }

    #[test]
    fn apply_global_identity_and_cancellation() {
        let id = OperatorSpec::broadcast(2, ScalarPotential::new(vec![]), 1.0, 5.0).unwrap();
        let g = GlobalOperator::new(vec![id.clone(), id], 0.0).unwrap();
        assert_eq!(g.apply(&[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);

        let half = OperatorSpec::broadcast(2, ScalarPotential::quadratic(0.5, 0.0), 1.0, 5.0).unwrap();
        let three_halves =
            OperatorSpec::broadcast(2, ScalarPotential::quadratic(-0.5, 0.0), 1.0, 5.0).unwrap();
        let g = GlobalOperator::new(vec![half, three_halves], 0.0).unwrap();
        assert_eq!(g.apply(&[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
        assert!(matches!(g.apply(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn picard_half_contraction() {
        let op = OperatorSpec::broadcast(1, ScalarPotential::quadratic(0.5, 0.0), 1.0, 5.0).unwrap();
        let g = GlobalOperator::new(vec![op], 0.0).unwrap();
        let fp = find_fixed_point_from(&g, &[1.0], 1e-12).unwrap();
        assert!(fp.residual <= 1e-12);
        // distance to the fixed point is at most residual / (1 - L)
        assert!(fp.x[0].abs() <= 2e-12);
        assert!(fp.iterations <= 50);
        assert_eq!(fp.kind, FixedPointKind::Contractive);
    }

    #[test]
    fn identity_returns_start() {
        let op = OperatorSpec::broadcast(2, ScalarPotential::new(vec![]), 1.0, 5.0).unwrap();
        let g = GlobalOperator::new(vec![op], 0.0).unwrap();
        let fp = find_fixed_point_from(&g, &[0.7, -0.1], 1e-12).unwrap();
        assert_eq!(fp.x, vec![0.7, -0.1]);
        assert_eq!(fp.iterations, 0);
    }

    #[test]
    fn strongly_convex_fixed_point_matches_bisection() {
        let g = make_strongly_convex_suite(1).unwrap();
        let fp = find_fixed_point(&g, 1e-13).unwrap();
        let (pots, _, _) = suite_potentials("strongly_convex").unwrap();
        let agg = |s: f64| pots.iter().map(|p| p.derivative(s)).sum::<f64>();
        let (mut lo, mut hi) = (-1.0, 0.0);
        assert!(agg(lo) < 0.0 && agg(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if agg(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((fp.x[0] - 0.5 * (lo + hi)).abs() < 1e-12, "{} vs {}", fp.x[0], lo);
    }

    #[test]
    fn nonconvex_fixed_point_is_flagged_local() {
        let g = make_nonconvex_suite(2).unwrap();
        let fp = find_fixed_point(&g, 1e-10).unwrap();
        assert_eq!(fp.kind, FixedPointKind::LocalStationary);
        assert!(g.residual_sq(&fp.x).sqrt() <= 1e-10);
    }
}
