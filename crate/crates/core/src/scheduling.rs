//! Communication index sets, step-size schedules, and the parameter
//! conditions of the two convergence theorems.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::report::{Check, Report, Status};
use crate::rng::{seeded, Purpose};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CommPolicy {
    EveryStep,
    FixedPeriod { h: usize },
    RandomGap { h_max: usize, seed: u64 },
    /// Gaps 1, 1, 2, 2, 3, 3, ... capped at `h_max`.
    FrontLoaded { h_max: usize },
}

impl CommPolicy {
    pub fn h_max(&self) -> usize {
        match *self {
            CommPolicy::EveryStep => 1,
            CommPolicy::FixedPeriod { h } => h,
            CommPolicy::RandomGap { h_max, .. } | CommPolicy::FrontLoaded { h_max } => h_max,
        }
    }
}

/// Ascending communication indices `I_T` within `1..=T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommSchedule {
    indices: Vec<usize>,
    h_max: usize,
    horizon: usize,
}

impl CommSchedule {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
    pub fn h_max(&self) -> usize {
        self.h_max
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Largest gap between consecutive indices (1 for a single index).
    pub fn gap(&self) -> usize {
        self.indices.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(1)
    }

    /// `mask[k]` is true iff `k` is in `I_T`; length `T + 1`.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.horizon + 1];
        for &k in &self.indices {
            m[k] = true;
        }
        m
    }
}

pub fn make_schedule(policy: &CommPolicy, horizon: usize) -> Result<CommSchedule> {
    if horizon < 1 {
        return Err(invalid("horizon", "T must be at least 1"));
    }
    let h_max = policy.h_max();
    if h_max < 1 {
        return Err(invalid("h", "communication gap must be at least 1"));
    }
    let mut indices = vec![1usize];
    let mut next_gap: Box<dyn FnMut(usize) -> usize> = match *policy {
        CommPolicy::EveryStep => Box::new(|_| 1),
        CommPolicy::FixedPeriod { h } => Box::new(move |_| h),
        CommPolicy::RandomGap { h_max, seed } => {
            let mut rng = seeded(seed, Purpose::Schedule);
            Box::new(move |_| rng.random_range(1..=h_max))
        }
        CommPolicy::FrontLoaded { h_max } => Box::new(move |k| (k / 2 + 1).min(h_max)),
    };
    let mut k = 0;
    loop {
        let last = *indices.last().expect("non-empty");
        let nxt = last + next_gap(k);
        if nxt > horizon {
            break;
        }
        indices.push(nxt);
        k += 1;
    }
    Ok(CommSchedule {
        indices,
        h_max,
        horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `b / sqrt(t + a)`
    InvSqrt,
    /// `b / (t + a)`
    InvLinear,
    /// `b` for every `t`
    Constant,
}

/// `eta_t = s_t` schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub kind: StepKind,
    #[serde(default)]
    pub a: f64,
    pub b: f64,
}

impl StepSchedule {
    pub fn inv_sqrt(a: f64, b: f64) -> Self {
        Self { kind: StepKind::InvSqrt, a, b }
    }
    pub fn inv_linear(a: f64, b: f64) -> Self {
        Self { kind: StepKind::InvLinear, a, b }
    }
    pub fn constant(eta: f64) -> Self {
        Self { kind: StepKind::Constant, a: 0.0, b: eta }
    }

    pub fn eta(&self, t: usize) -> f64 {
        let t = t as f64;
        match self.kind {
            StepKind::InvSqrt => self.b / (t + self.a).sqrt(),
            StepKind::InvLinear => self.b / (t + self.a),
            StepKind::Constant => self.b,
        }
    }

    /// The schedule is non-increasing, so `eta_0 in (0, 1)` covers all `t`.
    pub fn validate(&self) -> Result<()> {
        if self.kind != StepKind::Constant && !(self.a > 0.0) {
            return Err(invalid("a", format!("offset {} must be positive", self.a)));
        }
        if !(self.b > 0.0) {
            return Err(invalid("b", format!("scale {} must be positive", self.b)));
        }
        let e0 = self.eta(0);
        if !(e0 > 0.0 && e0 < 1.0) {
            return Err(invalid("eta", format!("eta_0 = {e0} must lie in (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusParams {
    pub gamma: f64,
    pub psi: f64,
}

/// Right-hand side of the admissible consensus step condition.
pub fn gamma_upper_bound(phi: f64, kappa: f64, alpha: f64, psi: f64, r: f64) -> f64 {
    let first = phi / (8.0 * (1.0 + 4.0 / kappa) * alpha * alpha + 16.0 * (1.0 - phi / 4.0) * alpha);
    let second = 1.5 * kappa
        / (9.0 * kappa * kappa / 16.0 + 2.0 * (1.0 - psi * r * phi) * (1.0 + 4.0 / phi) * alpha * alpha);
    first.min(second)
}

/// Automatic consensus step: 90% of the bound.
pub fn auto_gamma(phi: f64, kappa: f64, alpha: f64, psi: f64, r: f64) -> f64 {
    0.9 * gamma_upper_bound(phi, kappa, alpha, psi, r)
}

/// Both branches of `zeta_1(gamma)` before taking the minimum.
pub fn zeta1_branches(gamma: f64, phi: f64, kappa: f64, alpha: f64, psi: f64, r: f64) -> (f64, f64) {
    let first = phi / 4.0 - 2.0 * (1.0 + 4.0 / kappa) * gamma * alpha * alpha - (1.0 - phi / 4.0) * 4.0 * gamma * alpha;
    let second = 1.5 * kappa * gamma
        - 9.0 * kappa * kappa * gamma * gamma / 16.0
        - 2.0 * (1.0 - psi * r * phi) * (1.0 + 4.0 / phi) * gamma * gamma * alpha * alpha;
    (first, second)
}

pub fn zeta1(gamma: f64, phi: f64, kappa: f64, alpha: f64, psi: f64, r: f64) -> Result<f64> {
    let (first, second) = zeta1_branches(gamma, phi, kappa, alpha, psi, r);
    if !(first > 0.0) {
        return Err(Error::Infeasible(format!(
            "zeta_1 relative-fidelity branch is {first:e} <= 0 at gamma = {gamma}"
        )));
    }
    if !(second > 0.0) {
        return Err(Error::Infeasible(format!(
            "zeta_1 spectral-gap branch is {second:e} <= 0 at gamma = {gamma}"
        )));
    }
    Ok(first.min(second))
}

#[allow(clippy::too_many_arguments)]
pub fn zeta2(gamma: f64, phi: f64, kappa: f64, alpha: f64, psi: f64, r: f64, n_agents: usize, d_bound: f64) -> f64 {
    let nd2 = n_agents as f64 * d_bound * d_bound;
    let kg = kappa * gamma;
    let g2a2 = gamma * gamma * alpha * alpha;
    let consensus = (1.0 + 4.0 / kg)
        * (2.0 * g2a2
            + 3.0 * (1.0 + kg / 4.0) * ((1.0 - kg + gamma).powi(2) + gamma * gamma + (1.0 - kg).powi(2)))
        * nd2;
    let compression = (1.0 - psi * r * phi)
        * (1.0 + 4.0 / phi)
        * ((1.0 + phi / 4.0) * (1.0 + gamma * alpha).powi(2) + 2.0 * g2a2)
        * nd2;
    consensus + compression
}

/// Inputs shared by both consensus constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantInputs {
    pub zeta1: f64,
    pub zeta2: f64,
    pub n_agents: usize,
    pub psi: f64,
    pub r: f64,
    pub delta_sq: f64,
    pub d_bound: f64,
    pub h_max: usize,
}

fn consensus_constant(c: &ConstantInputs, k: f64) -> Result<f64> {
    if !(c.zeta1 > 0.0 && c.zeta1 < 1.0) {
        return Err(Error::Infeasible(format!("zeta_1 = {} outside (0, 1)", c.zeta1)));
    }
    let h2 = (c.h_max * c.h_max) as f64;
    let n = c.n_agents as f64;
    Ok(k * (16.0 * c.zeta2 * h2 + 16.0 * n * c.psi * c.r * c.delta_sq) / (c.zeta1 * c.zeta1)
        + k * 8.0 * n * c.d_bound * c.d_bound * h2)
}

/// Constant `C_1` of the consensus bound under `b / sqrt(t + a)` steps.
pub fn theorem1_constants(c: &ConstantInputs) -> Result<f64> {
    consensus_constant(c, 1.0)
}

/// Constant `C_2` of the consensus bound under `b / (t + a)` steps.
pub fn theorem2_constants(c: &ConstantInputs) -> Result<f64> {
    consensus_constant(c, 2.0)
}

/// Everything the theorem validators look at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremParams {
    pub gamma: f64,
    pub psi: f64,
    pub r: f64,
    pub phi: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub step: StepSchedule,
    pub h_max: usize,
    pub lipschitz: f64,
    pub p: f64,
    pub m_growth: f64,
}

/// `a > 4H / (3 zeta_1)`
pub fn theorem1_min_a(h_max: usize, zeta1: f64) -> f64 {
    4.0 * h_max as f64 / (3.0 * zeta1)
}

/// `b <= (1 - P) sqrt(a) / (6 (1 + L)(1 + 4M))`
pub fn theorem1_max_b(a: f64, p: f64, lipschitz: f64, m_growth: f64) -> f64 {
    (1.0 - p) * a.sqrt() / (6.0 * (1.0 + lipschitz) * (1.0 + 4.0 * m_growth))
}

/// `a >= max{8H / (3 zeta_1), 12 (1 + L)(1 + 4M) b / (1 - P)}`
pub fn theorem2_min_a(h_max: usize, zeta1: f64, b: f64, p: f64, lipschitz: f64, m_growth: f64) -> f64 {
    (8.0 * h_max as f64 / (3.0 * zeta1)).max(12.0 * (1.0 + lipschitz) * (1.0 + 4.0 * m_growth) * b / (1.0 - p))
}

/// `b > 4 / ((1 - L)(1 - P))`
pub fn theorem2_min_b(p: f64, lipschitz: f64) -> f64 {
    4.0 / ((1.0 - lipschitz) * (1.0 - p))
}

fn common_checks(p: &TheoremParams, report: &mut Report) -> Option<f64> {
    report.push(Check::upper("p_below_one", p.p, 1.0, Status::Fail).with_note("requires P < 1"));
    if p.p >= 1.0 {
        report.checks.last_mut().expect("pushed").status = Status::Fail;
    }
    let e0 = p.step.eta(0);
    let eta_ok = e0 > 0.0 && e0 < 1.0;
    report.push(Check {
        name: "eta0_in_unit_interval".into(),
        status: if eta_ok { Status::Pass } else { Status::Fail },
        value: e0,
        bound: 1.0,
        margin: (1.0 - e0).min(e0),
        note: String::new(),
    });
    report.push(Check::strict_lower("gamma_positive", p.gamma, 0.0, Status::Fail));
    let gmax = gamma_upper_bound(p.phi, p.kappa, p.alpha, p.psi, p.r);
    report.push(Check::upper("gamma_bound", p.gamma, gmax, Status::Warn));
    let pr = p.psi * p.r;
    report.push(Check::strict_lower("psi_lower", pr, 0.75, Status::Warn).with_note("psi * r > 3/4"));
    report.push(Check::upper("psi_upper", pr, 1.0 + 1e-12, Status::Warn).with_note("psi * r <= 1"));
    match zeta1(p.gamma, p.phi, p.kappa, p.alpha, p.psi, p.r) {
        Ok(z) => {
            report.push(Check::strict_lower("zeta1_positive", z, 0.0, Status::Warn));
            Some(z)
        }
        Err(e) => {
            let (a, b) = zeta1_branches(p.gamma, p.phi, p.kappa, p.alpha, p.psi, p.r);
            report.push(Check::strict_lower("zeta1_positive", a.min(b), 0.0, Status::Warn).with_note(e.to_string()));
            None
        }
    }
}

/// Conditions for `b / sqrt(t + a)` schedules on general operators.
pub fn validate_theorem1(p: &TheoremParams) -> Report {
    let mut report = Report::new("theorem1");
    if p.step.kind != StepKind::InvSqrt {
        report.push(Check::skipped("step_kind", "schedule is not b/sqrt(t+a)").with_note(format!("{:?}", p.step.kind)));
    }
    let z = common_checks(p, &mut report);
    match z {
        Some(z) => report.push(theorem1_a_check(p.h_max, z, p.step.a)),
        None => report.push(Check::skipped("a_lower", "zeta_1 is not positive")),
    }
    report.push(Check::upper(
        "b_upper",
        p.step.b,
        theorem1_max_b(p.step.a, p.p, p.lipschitz, p.m_growth),
        Status::Warn,
    ));
    report
}

pub fn theorem1_a_check(h_max: usize, zeta1: f64, a: f64) -> Check {
    Check::strict_lower("a_lower", a, theorem1_min_a(h_max, zeta1), Status::Warn)
}

/// Conditions for `b / (t + a)` schedules on contractive operators.
pub fn validate_theorem2(p: &TheoremParams) -> Report {
    let mut report = Report::new("theorem2");
    if p.step.kind != StepKind::InvLinear {
        report.push(Check::skipped("step_kind", "schedule is not b/(t+a)").with_note(format!("{:?}", p.step.kind)));
    }
    report.push(Check::strict_lower("contractive", 1.0, p.lipschitz, Status::Fail).with_note("requires L < 1"));
    let z = common_checks(p, &mut report);
    match z {
        Some(z) => report.push(Check::lower(
            "a_lower",
            p.step.a,
            theorem2_min_a(p.h_max, z, p.step.b, p.p, p.lipschitz, p.m_growth),
            Status::Warn,
        )),
        None => report.push(Check::skipped("a_lower", "zeta_1 is not positive")),
    }
    if p.lipschitz < 1.0 {
        report.push(Check::strict_lower("b_lower", p.step.b, theorem2_min_b(p.p, p.lipschitz), Status::Warn));
    } else {
        report.push(Check::skipped("b_lower", "requires L < 1"));
    }
    report
}

/// Picks the theorem matching the step kind.
pub fn validate_for_step(p: &TheoremParams) -> Report {
    match p.step.kind {
        StepKind::InvLinear => validate_theorem2(p),
        _ => validate_theorem1(p),
    }
}

/// Iterates the saturated scalar recursion
/// `Psi_{t+1} = (1 - r1/(t+a)) Psi_t + r2/(t+a)^2 + r3/(t+a)`
/// and checks the closed-form bound at every `t <= T`.
pub fn lemma6_recursion_check(r1: f64, r2: f64, r3: f64, a: f64, psi0: f64, horizon: usize) -> Result<Report> {
    if !(r1 >= 1.0) {
        return Err(invalid("r1", format!("{r1} must be at least 1")));
    }
    if !(a > r1) {
        return Err(invalid("a", format!("{a} must exceed r1 = {r1}")));
    }
    if !(r2 >= 0.0 && r3 >= 0.0 && psi0 >= 0.0) {
        return Err(invalid("r2", "r2, r3 and psi0 must be non-negative"));
    }
    let d1 = 2.0 * r2;
    let d2 = a * psi0 + r2 * (1.0 + 2.0 / a) + r3;
    let mut psi = psi0;
    let mut worst = Check::upper("lemma6_bound", 0.0, f64::INFINITY, Status::Fail);
    for t in 0..=horizon {
        let tf = t as f64;
        let bound = (d1 * (tf + a).ln() + d2) / (tf - 1.0 + a) + 2.0 * r3;
        let c = Check::upper("lemma6_bound", psi, bound, Status::Fail).with_note(format!("t = {t}"));
        if c.margin < worst.margin || c.status == Status::Fail && worst.status != Status::Fail {
            worst = c;
        }
        psi = (1.0 - r1 / (tf + a)) * psi + r2 / (tf + a).powi(2) + r3 / (tf + a);
    }
    let mut report = Report::new("lemma6");
    report.push(worst);
    report.push(Check::upper("final_value", psi, f64::INFINITY, Status::Fail).with_note("Psi_{T+1}"));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_match_definitions() {
        let s = make_schedule(&CommPolicy::EveryStep, 5).unwrap();
        assert_eq!(s.indices(), &[1, 2, 3, 4, 5]);
        assert_eq!(s.gap(), 1);
        let s = make_schedule(&CommPolicy::FixedPeriod { h: 3 }, 10).unwrap();
        assert_eq!(s.indices(), &[1, 4, 7, 10]);
        assert_eq!(s.gap(), 3);
        let s = make_schedule(&CommPolicy::RandomGap { h_max: 3, seed: 1 }, 20).unwrap();
        assert_eq!(s.indices()[0], 1);
        assert!(s.indices().windows(2).all(|w| (1..=3).contains(&(w[1] - w[0]))));
        let s = make_schedule(&CommPolicy::FrontLoaded { h_max: 3 }, 20).unwrap();
        assert_eq!(s.indices(), &[1, 2, 3, 5, 7, 10, 13, 16, 19]);
        assert!(matches!(
            make_schedule(&CommPolicy::FixedPeriod { h: 0 }, 10),
            Err(Error::InvalidParameter { name: "h", .. })
        ));
    }

    #[test]
    fn gamma_bound_unit_instance() {
        let g = gamma_upper_bound(1.0, 1.0, 1.0, 1.0, 1.0);
        assert!((g - 1.0 / 52.0).abs() < 1e-15);
        let second: f64 = 1.5 / (9.0 / 16.0);
        assert!((second - 8.0 / 3.0).abs() < 1e-15);
        assert!(gamma_upper_bound(1e-9, 1.0, 1.0, 1.0, 1.0) < 1e-9);
    }

    #[test]
    fn zeta1_matches_grid_minimum() {
        let gmax = gamma_upper_bound(1.0, 1.0, 1.0, 1.0, 1.0);
        let gamma = 0.5 * gmax;
        let z = zeta1(gamma, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        // independent transcription of both branches
        let b1 = |g: f64| 0.25 - 2.0 * 5.0 * g - 0.75 * 4.0 * g;
        let b2 = |g: f64| 1.5 * g - 9.0 * g * g / 16.0;
        assert!(z > 0.0);
        assert!((z - b1(gamma).min(b2(gamma))).abs() < 1e-15);
        // largest feasible gamma on a 1e-6 grid agrees with the closed form
        let mut last_ok = 0.0;
        for k in 1..=1_000_000 {
            let g = k as f64 * 1e-6;
            if b1(g) > 0.0 && b2(g) > 0.0 {
                last_ok = g;
            }
        }
        assert!((last_ok - gmax).abs() <= 1e-6);
        assert!(zeta1(1e-12, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap() < 1e-11);
        assert!(matches!(zeta1(1.0, 1.0, 1.0, 1.0, 1.0, 1.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn zeta2_drops_compression_term_at_full_fidelity() {
        let (g, k, a, n, d) = (0.01, 0.5, 1.3, 6, 2.0);
        let full = zeta2(g, 1.0, k, a, 1.0, 1.0, n, d);
        let kg = k * g;
        let nd2 = n as f64 * d * d;
        let consensus = (1.0 + 4.0 / kg)
            * (2.0 * g * g * a * a + 3.0 * (1.0 + kg / 4.0) * ((1.0 - kg + g).powi(2) + g * g + (1.0 - kg).powi(2)))
            * nd2;
        assert!((full - consensus).abs() < 1e-12 * consensus);
    }

    #[test]
    fn constants_relations() {
        let c = ConstantInputs {
            zeta1: 0.05,
            zeta2: 3.0,
            n_agents: 4,
            psi: 1.0,
            r: 1.0,
            delta_sq: 0.0,
            d_bound: 0.5,
            h_max: 1,
        };
        let c1 = theorem1_constants(&c).unwrap();
        assert!((c1 - (16.0 * 3.0 / 0.0025 + 8.0 * 4.0 * 0.25)).abs() < 1e-9);
        let c2 = theorem2_constants(&c).unwrap();
        assert!((c2 - 2.0 * c1).abs() < 1e-9);
        let bad = ConstantInputs { zeta1: 0.0, ..c };
        assert!(theorem1_constants(&bad).is_err());
    }

    #[test]
    fn theorem1_a_example() {
        assert!((theorem1_min_a(3, 0.05) - 80.0).abs() < 1e-12);
        assert_eq!(theorem1_a_check(3, 0.05, 100.0).status, Status::Pass);
        assert_eq!(theorem1_a_check(3, 0.05, 70.0).status, Status::Warn);
        assert!(theorem1_max_b(100.0, 1.0 - 1e-12, 1.0, 0.0) < 1e-11);
    }

    fn params(lipschitz: f64, step: StepSchedule) -> TheoremParams {
        TheoremParams {
            gamma: 0.01,
            psi: 1.0,
            r: 1.0,
            phi: 1.0,
            alpha: 1.0,
            kappa: 1.0,
            step,
            h_max: 1,
            lipschitz,
            p: 0.0,
            m_growth: 0.0,
        }
    }

    #[test]
    fn theorem2_rejects_non_contractive() {
        let r = validate_theorem2(&params(1.0, StepSchedule::inv_linear(1e6, 30.0)));
        assert_eq!(r.get("contractive").unwrap().status, Status::Fail);
        assert_eq!(r.status(), Status::Fail);
        let r = validate_theorem2(&params(0.5, StepSchedule::inv_linear(1e6, 9.0)));
        assert_eq!(r.status(), Status::Pass, "{r}");
    }

    #[test]
    fn step_schedule_values() {
        let s = StepSchedule::inv_sqrt(80.0, 0.8);
        assert!((s.eta(20) - 0.08).abs() < 1e-15);
        assert!(s.validate().is_ok());
        assert!(StepSchedule::inv_linear(4.0, 8.0).validate().is_err());
        assert!((StepSchedule::inv_linear(500.0, 8.0).eta(0) - 0.016).abs() < 1e-15);
    }

    #[test]
    fn lemma6_examples() {
        let r = lemma6_recursion_check(1.5, 0.0, 0.0, 3.0, 0.0, 100).unwrap();
        assert!(r.passed());
        let r = lemma6_recursion_check(1.0, 1.0, 0.0, 2.0, 1.0, 10_000).unwrap();
        assert!(r.passed(), "{r}");
        let r = lemma6_recursion_check(2.0, 0.5, 0.1, 5.0, 3.0, 100_000).unwrap();
        assert!(r.passed());
        assert!(r.get("final_value").unwrap().value <= 0.2);
        assert!(lemma6_recursion_check(0.5, 1.0, 0.0, 2.0, 1.0, 10).is_err());
        assert!(lemma6_recursion_check(2.0, 1.0, 0.0, 2.0, 1.0, 10).is_err());
    }
}
