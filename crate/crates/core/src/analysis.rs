//! Surrogate functions, rate fitting and theorem verdicts over traces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{RunTrace, TraceRow};
use crate::error::{invalid, Error, Result};
use crate::operators::{find_fixed_point, GlobalOperator, OperatorSpec};
use crate::report::{Check, Report, Status};
use crate::rng::{seeded, Purpose};
use crate::scheduling::StepSchedule;

pub const DEFAULT_QUADRATURE_NODES: usize = 64;

// 8-point Gauss-Legendre rule on [-1, 1]
const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Line integral of the residual field `u - T(u)` from a base point.
#[derive(Clone, Debug)]
pub struct SurrogateEvaluator {
    pub operator: GlobalOperator,
    pub base_point: Vec<f64>,
    /// Total quadrature nodes; rounded up to a multiple of 8.
    pub quadrature_nodes: usize,
}

impl SurrogateEvaluator {
    /// Straight paths from the origin with the default node count.
    pub fn new(operator: GlobalOperator) -> Self {
        let n = operator.dim();
        Self {
            operator,
            base_point: vec![0.0; n],
            quadrature_nodes: DEFAULT_QUADRATURE_NODES,
        }
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.quadrature_nodes = nodes;
        self
    }

    /// `G(x)` for the global operator.
    pub fn value(&self, x: &[f64]) -> f64 {
        let g = &self.operator;
        self.segment(|u| g.apply(u).expect("dimension checked"), &self.base_point, x)
    }

    /// `G_i(x)` for local operator `i`.
    pub fn local_value(&self, i: usize, x: &[f64]) -> f64 {
        let op = &self.operator.locals()[i];
        self.segment(|u| op.apply(u), &self.base_point, x)
    }

    /// `G(x)` along the polygonal path `base -> waypoints... -> x`.
    pub fn value_along(&self, waypoints: &[Vec<f64>], x: &[f64]) -> f64 {
        let g = &self.operator;
        let field = |u: &[f64]| g.apply(u).expect("dimension checked");
        let mut prev = self.base_point.clone();
        let mut total = 0.0;
        for w in waypoints.iter().map(|w| w.as_slice()).chain(std::iter::once(x)) {
            total += self.segment(field, &prev, w);
            prev = w.to_vec();
        }
        total
    }

    fn segment<F: Fn(&[f64]) -> Vec<f64>>(&self, t_of: F, from: &[f64], to: &[f64]) -> f64 {
        let panels = self.quadrature_nodes.div_ceil(8).max(1);
        let h = 1.0 / panels as f64;
        let dir: Vec<f64> = to.iter().zip(from).map(|(a, b)| a - b).collect();
        let mut u = vec![0.0; from.len()];
        let mut total = 0.0;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (node, w) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
                for s in [mid - 0.5 * h * node, mid + 0.5 * h * node] {
                    for k in 0..u.len() {
                        u[k] = from[k] + s * dir[k];
                    }
                    let tu = t_of(&u);
                    let inner: f64 = (0..u.len()).map(|k| (u[k] - tu[k]) * dir[k]).sum();
                    total += 0.5 * h * w * inner;
                }
            }
        }
        total
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Largest relative gap between `x - T(x)` and central differences of `G`.
pub fn gradient_identity_error(ev: &SurrogateEvaluator, x: &[f64], step: f64) -> f64 {
    let tx = ev.operator.apply(x).expect("dimension checked");
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        xp[k] = x[k] + step;
        let up = ev.value(&xp);
        xp[k] = x[k] - step;
        let dn = ev.value(&xp);
        xp[k] = x[k];
        let fd = (up - dn) / (2.0 * step);
        let exact = x[k] - tx[k];
        worst = worst.max((fd - exact).abs() / exact.abs().max(1.0));
    }
    worst
}

/// Lemma-style inequalities for every local surrogate at random points of
/// `[-sample_box, sample_box]^n`, with `1e-8` slack.
pub fn check_lemma1(ev: &SurrogateEvaluator, n_samples: usize, sample_box: f64, seed: u64) -> Result<Report> {
    const SLACK: f64 = 1e-8;
    let mut report = Report::new("lemma1");
    let mut rng = seeded(seed, Purpose::Certify);
    let n = ev.operator.dim();
    let mut worst = [f64::INFINITY; 3];
    let mut contractive = true;
    for (i, op) in ev.operator.locals().iter().enumerate() {
        let lip = op.lipschitz();
        let fixed = if lip < 1.0 {
            let single = GlobalOperator::new(vec![op.clone()], 0.0)?;
            Some(find_fixed_point(&single, 1e-12)?.x)
        } else {
            contractive = false;
            None
        };
        let g_star = fixed.as_ref().map(|xs| ev.local_value(i, xs));
        for _ in 0..n_samples {
            let x: Vec<f64> = (0..n).map(|_| sample_box * rng.random_range(-1.0..=1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| sample_box * rng.random_range(-1.0..=1.0)).collect();
            let gx = ev.local_value(i, &x);
            let gy = ev.local_value(i, &y);
            let tx = op.apply(&x);
            let grad: Vec<f64> = x.iter().zip(&tx).map(|(a, b)| a - b).collect();
            let yx: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let rhs = gx + dot(&grad, &yx) + 0.5 * (1.0 + lip) * dot(&yx, &yx);
            worst[0] = worst[0].min(rhs - gy);
            if let (Some(xs), Some(gs)) = (&fixed, g_star) {
                let res = dot(&grad, &grad);
                worst[1] = worst[1].min(res - 2.0 * (1.0 - lip) * (gx - gs));
                worst[2] = worst[2].min((gx - gs) - 0.5 * (1.0 - lip) * sq_dist(&x, xs));
            }
        }
    }
    let check = |name: &str, m: f64| Check {
        name: name.into(),
        status: if m >= -SLACK { Status::Pass } else { Status::Fail },
        value: -m,
        bound: SLACK,
        margin: m + SLACK,
        note: String::new(),
    };
    report.push(check("a_smoothness", worst[0]));
    if contractive {
        report.push(check("b_residual_lower", worst[1]));
        report.push(check("c_quadratic_growth", worst[2]));
    } else {
        report.push(Check::skipped("b_residual_lower", "requires L < 1"));
        report.push(Check::skipped("c_quadratic_growth", "requires L < 1"));
    }
    Ok(report)
}

/// Surrogate of a single potential-derived local operator, `tau * (f(x) - f(y))`.
pub fn potential_surrogate(op: &OperatorSpec, x: &[f64], base: &[f64]) -> f64 {
    op.tau() * (op.potential(x) - op.potential(base))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// `ln t / sqrt t`
    LogOverSqrt,
    /// `ln t / t`
    LogOverLinear,
    /// Flat steady state; no decay.
    Plateau,
}

impl RateModel {
    fn regressor(&self, t: f64) -> f64 {
        match self {
            RateModel::LogOverSqrt => (t.ln() / t.sqrt()).ln(),
            RateModel::LogOverLinear => (t.ln() / t).ln(),
            RateModel::Plateau => 0.0,
        }
    }
}

/// How the plateau is removed before the log-log regression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlateauMode {
    /// Pick the offset in `[0, min)` that maximizes `r^2`.
    Search,
    /// Median of the last 10% of the window.
    TailMedian,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub t_min: f64,
    pub t_max: f64,
    pub plateau: PlateauMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            t_min: 3.0,
            t_max: f64::INFINITY,
            plateau: PlateauMode::Search,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: RateModel,
    pub slope: f64,
    pub intercept: f64,
    pub plateau_level: f64,
    /// First and last `t` used by the regression.
    pub fit_window: (f64, f64),
    pub r_squared: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn regress(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

const MIN_FIT_POINTS: usize = 10;

fn fit_with_offset(t: &[f64], m: &[f64], model: RateModel, c: f64) -> Option<RateFit> {
    let floor = 1e-3 * c;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&ti, &mi) in t.iter().zip(m) {
        let d = mi - c;
        if d > floor && d > 0.0 {
            xs.push(model.regressor(ti));
            ys.push(d.ln());
            lo = lo.min(ti);
            hi = hi.max(ti);
        }
    }
    if xs.len() < MIN_FIT_POINTS {
        return None;
    }
    let (slope, intercept, r_squared) = regress(&xs, &ys);
    Some(RateFit {
        model,
        slope,
        intercept,
        plateau_level: c,
        fit_window: (lo, hi),
        r_squared,
    })
}

/// Fits `metric - c ~ exp(intercept) * g(t)^slope` with `g` the model's rate.
///
/// Falls back to the plateau model when the head of the window is not
/// clearly above its tail.
pub fn fit_rate(t: &[f64], metric: &[f64], model: RateModel, opts: FitOptions) -> Result<RateFit> {
    if t.len() != metric.len() {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: metric.len(),
        });
    }
    if t.len() < 1000 {
        return Err(Error::FitWindow(format!("need at least 1000 points, got {}", t.len())));
    }
    let lo = opts.t_min.max(1.0 + 1e-9);
    let (wt, wm): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(metric)
        .filter(|(&ti, &mi)| ti >= lo && ti <= opts.t_max && mi.is_finite())
        .map(|(&a, &b)| (a, b))
        .unzip();
    if wt.len() < MIN_FIT_POINTS {
        return Err(Error::FitWindow("window holds too few points".into()));
    }
    let k = (wt.len() / 10).max(1);
    let head = median(&wm[..k]);
    let tail = median(&wm[wm.len() - k..]);
    if model == RateModel::Plateau || head <= 1.5 * tail {
        return Ok(RateFit {
            model: RateModel::Plateau,
            slope: 0.0,
            intercept: tail.max(f64::MIN_POSITIVE).ln(),
            plateau_level: tail,
            fit_window: (wt[wt.len() - k], wt[wt.len() - 1]),
            r_squared: 0.0,
        });
    }
    let fit = match opts.plateau {
        PlateauMode::Fixed(c) => fit_with_offset(&wt, &wm, model, c),
        PlateauMode::TailMedian => fit_with_offset(&wt, &wm, model, tail),
        PlateauMode::Search => {
            let floor = wm.iter().copied().fold(f64::INFINITY, f64::min);
            let mut cands = vec![0.0];
            if floor > 0.0 {
                cands.extend((1..100).map(|j| floor * j as f64 / 100.0));
                cands.extend((1..=40).map(|j| floor * (1.0 - 0.5f64.powi(j))));
            }
            cands
                .into_iter()
                .filter_map(|c| fit_with_offset(&wt, &wm, model, c))
                .max_by(|a, b| a.r_squared.total_cmp(&b.r_squared))
        }
    };
    fit.ok_or_else(|| Error::FitWindow("metric is not positive after plateau removal".into()))
}

/// `(1/T) sum_{s=1}^{T} v_s` for every `T`, with `v_0` excluded.
pub fn running_average(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(values.first().copied().unwrap_or(f64::NAN));
    for (k, v) in values.iter().enumerate().skip(1) {
        acc += v;
        out.push(acc / k as f64);
    }
    out
}

/// Per-row mean and standard error across seeds.
pub fn seed_stats(traces: &[RunTrace], f: impl Fn(&TraceRow) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = traces.first().ok_or_else(|| Error::InvalidSize("no traces".into()))?;
    let len = first.rows.len();
    if traces.iter().any(|t| t.rows.len() != len) {
        return Err(Error::InvalidSize("traces have different lengths".into()));
    }
    let k = traces.len() as f64;
    let mut mean = vec![0.0; len];
    let mut se = vec![0.0; len];
    for i in 0..len {
        let vals: Vec<f64> = traces.iter().map(|t| f(&t.rows[i])).collect();
        let m = vals.iter().sum::<f64>() / k;
        let var = if traces.len() > 1 {
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        mean[i] = m;
        se[i] = (var / k).sqrt();
    }
    Ok((mean, se))
}

/// Mean over seeds of each seed's average over the last `frac` of the run,
/// with its standard error.
pub fn tail_level(traces: &[RunTrace], frac: f64, f: impl Fn(&TraceRow) -> f64) -> Result<(f64, f64)> {
    if traces.is_empty() {
        return Err(Error::InvalidSize("no traces".into()));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(invalid("frac", "must lie in (0, 1]"));
    }
    let per_seed: Vec<f64> = traces
        .iter()
        .map(|t| {
            let len = t.rows.len();
            let k = ((len as f64 * frac).ceil() as usize).clamp(1, len);
            t.rows[len - k..].iter().map(&f).sum::<f64>() / k as f64
        })
        .collect();
    let k = per_seed.len() as f64;
    let m = per_seed.iter().sum::<f64>() / k;
    let var = if per_seed.len() > 1 {
        per_seed.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok((m, (var / k).sqrt()))
}

/// Parameters of a verdict over a seed ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct VerdictInputs {
    /// `C_1` or `C_2`.
    pub constant: f64,
    pub step: StepSchedule,
    /// True when the declared bias terms vanish.
    pub unbiased: bool,
    /// Reference floor for the unbiased plateau check, with its standard error.
    pub noise_floor: Option<(f64, f64)>,
    /// First `t` at which per-step consensus bounds are checked.
    pub t_check_from: usize,
}

const MIN_VERDICT_SEEDS: usize = 20;

fn seed_count_check(traces: &[RunTrace]) -> Check {
    Check::lower("seeds", traces.len() as f64, MIN_VERDICT_SEEDS as f64, Status::Warn)
}

fn worst_per_step(mean: &[f64], se: &[f64], bound: impl Fn(usize) -> f64, from: usize, name: &str) -> Check {
    let mut worst: Option<Check> = None;
    for t in from..mean.len() {
        let c = Check::upper(name, mean[t], bound(t) + 3.0 * se[t], Status::Fail).with_note(format!("t = {t}"));
        if worst.as_ref().is_none_or(|w| c.margin < w.margin) {
            worst = Some(c);
        }
    }
    worst.unwrap_or_else(|| Check::skipped(name, "window is empty"))
}

fn plateau_checks(traces: &[RunTrace], inputs: &VerdictInputs, f: fn(&TraceRow) -> f64, report: &mut Report) -> Result<()> {
    let (level, se) = tail_level(traces, 0.1, f)?;
    report.push(Check::upper("plateau_finite", level, f64::MAX, Status::Fail));
    if inputs.unbiased {
        match inputs.noise_floor {
            Some((floor, floor_se)) => {
                let slack = 3.0 * (se * se + floor_se * floor_se).sqrt();
                report.push(Check::upper("plateau_at_noise_floor", level, floor + slack, Status::Fail));
            }
            None => report.push(Check::skipped("plateau_at_noise_floor", "no reference floor supplied")),
        }
    }
    Ok(())
}

/// Cumulative and per-step consensus bounds plus the residual rate fit for
/// `b / sqrt(t + a)` runs.
pub fn verdict_theorem1(traces: &[RunTrace], inputs: &VerdictInputs) -> Result<Report> {
    let mut report = Report::new("theorem1_verdict");
    report.push(seed_count_check(traces));
    let (mean, se) = seed_stats(traces, |r| r.consensus_error)?;
    let horizon = mean.len() - 1;
    let (a, b) = (inputs.step.a, inputs.step.b);

    // cumulative sum per seed, then mean and standard error across seeds
    let cums: Vec<f64> = traces
        .iter()
        .map(|t| t.rows[1..].iter().map(|r| r.consensus_error).sum())
        .collect();
    let k = cums.len() as f64;
    let cm = cums.iter().sum::<f64>() / k;
    let cse = if cums.len() > 1 {
        (cums.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    let cum_bound = inputs.constant * b * b * (1.0 + horizon as f64 / a).ln();
    report.push(Check::upper("cumulative_consensus", cm, cum_bound + 3.0 * cse, Status::Fail));
    report.push(worst_per_step(
        &mean,
        &se,
        |t| inputs.constant * inputs.step.eta(t).powi(2),
        inputs.t_check_from,
        "per_step_consensus",
    ));

    let (res_mean, _) = seed_stats(traces, |r| r.residual)?;
    let avg = running_average(&res_mean);
    let ts: Vec<f64> = (0..avg.len()).map(|t| t as f64).collect();
    match fit_rate(&ts, &avg, RateModel::LogOverSqrt, FitOptions::default()) {
        Ok(fit) if fit.model == RateModel::Plateau => {
            report.push(Check::skipped("rate_slope", "running average is already flat"))
        }
        Ok(fit) => report.push(
            Check::upper("rate_slope", (fit.slope - 1.0).abs(), 0.4, Status::Warn)
                .with_note(format!("slope {:.3}, r2 {:.3}", fit.slope, fit.r_squared)),
        ),
        Err(e) => report.push(Check::skipped("rate_slope", e.to_string())),
    }
    plateau_checks(traces, inputs, |r| r.residual, &mut report)?;
    Ok(report)
}

/// Per-step consensus bound and the distance rate fit for `b / (t + a)` runs.
pub fn verdict_theorem2(traces: &[RunTrace], inputs: &VerdictInputs) -> Result<Report> {
    let mut report = Report::new("theorem2_verdict");
    report.push(seed_count_check(traces));
    let (mean, se) = seed_stats(traces, |r| r.consensus_error)?;
    let (a, b) = (inputs.step.a, inputs.step.b);
    report.push(worst_per_step(
        &mean,
        &se,
        |t| inputs.constant * b * b / (t as f64 + a).powi(2),
        inputs.t_check_from.max(1),
        "per_step_consensus",
    ));
    let (dist, _) = seed_stats(traces, |r| r.dist_to_fixpoint)?;
    if dist.iter().any(|v| v.is_nan()) {
        report.push(Check::skipped("rate_slope", "fixed point unknown"));
    } else {
        let ts: Vec<f64> = (0..dist.len()).map(|t| t as f64).collect();
        match fit_rate(&ts, &dist, RateModel::LogOverLinear, FitOptions::default()) {
            Ok(fit) if fit.model == RateModel::Plateau => {
                report.push(Check::skipped("rate_slope", "distance is already flat"))
            }
            Ok(fit) => report.push(
                Check::upper("rate_slope", (fit.slope - 1.0).abs(), 0.3, Status::Warn)
                    .with_note(format!("slope {:.3}, r2 {:.3}", fit.slope, fit.r_squared)),
            ),
            Err(e) => report.push(Check::skipped("rate_slope", e.to_string())),
        }
        plateau_checks(traces, inputs, |r| r.dist_to_fixpoint, &mut report)?;
    }
    Ok(report)
}
