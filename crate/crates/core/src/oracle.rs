//! Biased stochastic oracles wrapping the deterministic local operators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::operators::{GlobalOperator, OperatorSpec};
use crate::report::{Check, Report, Status};
use crate::rng::{seeded, Purpose, StreamKey};

/// How a noisy evaluation of `T_i` is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    /// `T_i(x) + eps`, `eps ~ N(0, noise_std^2 I)`.
    AdditiveGaussian { noise_std: f64 },
    /// `x - tau * n * G(x, u)` with the two-point estimator `G`.
    ZerothOrder { z_radius: f64 },
    /// `T_i(x) + beta_scale * 1/sqrt(n) + p_scale * (T_i(x) - x) + eps`.
    SyntheticBias {
        beta_scale: f64,
        p_scale: f64,
        #[serde(default)]
        noise_std: f64,
    },
}

/// Mechanism plus the declared bias/variance contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub mechanism: Mechanism,
    /// Constant bias bound (not squared).
    pub beta: f64,
    /// State-dependent bias slope, must be < 1.
    pub p: f64,
    /// Constant variance bound (not squared).
    pub sigma: f64,
    pub m_growth: f64,
    pub d_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    pub value: Vec<f64>,
    pub rng_draw_id: u64,
}

/// Analytic `(beta^2, P, sigma^2, M)` for a mechanism acting on `g`.
pub fn declared_constants(mechanism: &Mechanism, g: &GlobalOperator) -> (f64, f64, f64, f64) {
    let n = g.dim() as f64;
    match *mechanism {
        Mechanism::AdditiveGaussian { noise_std } => (0.0, 0.0, n * noise_std * noise_std, 0.0),
        Mechanism::ZerothOrder { z_radius } => {
            let tau = g.locals().iter().map(|o| o.tau()).fold(0.0, f64::max);
            let m = g.locals().iter().map(|o| o.smoothness()).fold(0.0, f64::max);
            let tzm = tau * z_radius * m;
            (
                tzm * tzm * (n + 3.0).powi(2) / 4.0,
                0.0,
                3.0 * tzm * tzm * (n + 4.0).powi(3),
                4.0 * (n + 4.0),
            )
        }
        Mechanism::SyntheticBias {
            beta_scale,
            p_scale,
            noise_std,
        } => {
            // ||b u + p v||^2 <= (1 + c) b^2 + (1 + 1/c) p^2 ||v||^2 with c = 4,
            // collapsing to the exact terms when either part vanishes.
            let (b2, p2) = if beta_scale == 0.0 {
                (0.0, p_scale * p_scale)
            } else if p_scale == 0.0 {
                (beta_scale * beta_scale, 0.0)
            } else {
                (5.0 * beta_scale * beta_scale, 1.25 * p_scale * p_scale)
            };
            (b2, p2, b2 + n * noise_std * noise_std, p2)
        }
    }
}

impl OracleConfig {
    /// Config whose declared constants are the mechanism's analytic ones and
    /// whose `d_bound` is estimated on the operating box.
    pub fn from_mechanism(mechanism: Mechanism, g: &GlobalOperator) -> Result<Self> {
        let (b2, p, s2, m) = declared_constants(&mechanism, g);
        let mut cfg = Self {
            mechanism,
            beta: b2.sqrt(),
            p,
            sigma: s2.sqrt(),
            m_growth: m,
            d_bound: 1.0,
        };
        cfg.validate()?;
        cfg.d_bound = estimate_d_bound(&cfg, g, g.box_bound(), 256, 64, 0xd0)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 0.0 && self.p < 1.0) {
            return Err(invalid("p", format!("state-dependent bias slope {} must lie in [0, 1)", self.p)));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("m_growth", self.m_growth),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(name, format!("{v} must be finite and non-negative")));
            }
        }
        if !(self.d_bound > 0.0) {
            return Err(invalid("d_bound", "must be positive"));
        }
        match self.mechanism {
            Mechanism::AdditiveGaussian { noise_std } if !(noise_std >= 0.0) => {
                Err(invalid("noise_std", "must be non-negative"))
            }
            Mechanism::ZerothOrder { z_radius } if !(z_radius > 0.0) => {
                Err(invalid("z_radius", format!("{z_radius} must be positive")))
            }
            Mechanism::SyntheticBias { noise_std, .. } if !(noise_std >= 0.0) => {
                Err(invalid("noise_std", "must be non-negative"))
            }
            _ => Ok(()),
        }
    }

    /// True when every draw equals `T_i(x)`.
    pub fn is_deterministic(&self) -> bool {
        match self.mechanism {
            Mechanism::AdditiveGaussian { noise_std } => noise_std == 0.0,
            Mechanism::SyntheticBias { noise_std, .. } => noise_std == 0.0,
            Mechanism::ZerothOrder { .. } => false,
        }
    }

    pub fn sample(&self, op: &OperatorSpec, x: &[f64], key: StreamKey) -> Result<OracleSample> {
        let mut value = vec![0.0; x.len()];
        self.sample_into(op, x, &mut key.rng(), &mut value)?;
        Ok(OracleSample {
            value,
            rng_draw_id: key.id(),
        })
    }

    /// Writes one draw of `T~_i(x)` into `out`.
    pub fn sample_into(&self, op: &OperatorSpec, x: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<()> {
        if x.len() != op.dim() {
            return Err(Error::DimensionMismatch {
                expected: op.dim(),
                got: x.len(),
            });
        }
        match self.mechanism {
            Mechanism::AdditiveGaussian { noise_std } => {
                op.apply_into(x, out);
                add_gaussian(out, noise_std, rng);
            }
            Mechanism::ZerothOrder { z_radius } => {
                let g = zeroth_order_gradient(|y| op.potential(y), x, z_radius, rng)?;
                let scale = op.tau() * x.len() as f64;
                for k in 0..x.len() {
                    out[k] = x[k] - scale * g[k];
                }
            }
            Mechanism::SyntheticBias {
                beta_scale,
                p_scale,
                noise_std,
            } => {
                op.apply_into(x, out);
                let u = beta_scale / (x.len() as f64).sqrt();
                for k in 0..x.len() {
                    out[k] += u + p_scale * (out[k] - x[k]);
                }
                add_gaussian(out, noise_std, rng);
            }
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("oracle produced a non-finite value".into()))
        }
    }
}

fn add_gaussian(out: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        for v in out.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += std * e;
        }
    }
}

/// Uniform direction on the unit sphere of dimension `n`.
pub fn unit_sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return u.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Two-point estimator `(f(x + z u) - f(x)) / z * u` with `u` uniform on the sphere.
/// Its mean is close to `grad f(x) / n`.
pub fn zeroth_order_gradient<F, R>(f: F, x: &[f64], z_radius: f64, rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if !(z_radius > 0.0) {
        return Err(invalid("z_radius", format!("{z_radius} must be positive")));
    }
    let u = unit_sphere(x.len(), rng);
    let shifted: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + z_radius * b).collect();
    let q = (f(&shifted) - f(x)) / z_radius;
    Ok(u.into_iter().map(|v| q * v).collect())
}

fn uniform_point(n: usize, b: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| b * rng.random_range(-1.0..=1.0)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `1.1 * sqrt(max over points and agents of the mean of ||T~_i(x) - x||^2)`.
pub fn estimate_d_bound(
    cfg: &OracleConfig,
    g: &GlobalOperator,
    sample_box: f64,
    n_points: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut prng = seeded(seed, Purpose::Certify);
    let mut worst: f64 = 0.0;
    let mut out = vec![0.0; g.dim()];
    for pt in 0..n_points {
        let x = uniform_point(g.dim(), sample_box, &mut prng);
        for (i, op) in g.locals().iter().enumerate() {
            let mut rng = StreamKey::new(seed, Purpose::Certify, i, pt).rng();
            let mut acc = 0.0;
            for _ in 0..draws {
                cfg.sample_into(op, &x, &mut rng, &mut out)?;
                acc += sq_dist(&out, &x);
            }
            worst = worst.max(acc / draws as f64);
        }
    }
    Ok(1.1 * worst.sqrt().max(1e-12))
}

/// Monte-Carlo per-point statistics of the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct PointStats {
    /// `||T(x) - x||^2`
    pub residual_sq: f64,
    /// `||mean(T~) - T(x)||^2`
    pub bias_sq: f64,
    /// Standard error scale of the mean, `sqrt(tr Cov / K)`.
    pub mean_se: f64,
    /// Mean of `||T~ - T(x)||^2` and its standard error.
    pub mse: f64,
    pub mse_se: f64,
    /// Mean of `||T~ - x||^2` and its standard error.
    pub drift: f64,
    pub drift_se: f64,
}

pub fn point_stats(cfg: &OracleConfig, op: &OperatorSpec, x: &[f64], n_samples: usize, rng: &mut ChaCha8Rng) -> Result<PointStats> {
    let n = x.len();
    let t = op.apply(x);
    let mut mean = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let (mut e1, mut e2, mut d1, mut d2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = vec![0.0; n];
    for _ in 0..n_samples {
        cfg.sample_into(op, x, rng, &mut out)?;
        for k in 0..n {
            mean[k] += out[k];
            sumsq[k] += out[k] * out[k];
        }
        let e = sq_dist(&out, &t);
        e1 += e;
        e2 += e * e;
        let d = sq_dist(&out, x);
        d1 += d;
        d2 += d * d;
    }
    let k = n_samples as f64;
    let mut tr_cov = 0.0;
    for j in 0..n {
        let m = mean[j] / k;
        tr_cov += (sumsq[j] / k - m * m).max(0.0);
        mean[j] = m;
    }
    let se = |s1: f64, s2: f64| ((s2 / k - (s1 / k).powi(2)).max(0.0) / k).sqrt();
    Ok(PointStats {
        residual_sq: sq_dist(&t, x),
        bias_sq: sq_dist(&mean, &t),
        mean_se: (tr_cov / k).sqrt(),
        mse: e1 / k,
        mse_se: se(e1, e2),
        drift: d1 / k,
        drift_se: se(d1, d2),
    })
}

/// Checks the declared bias, variance and drift bounds at `n_points` uniform
/// points of `[-sample_box, sample_box]^n`, with 3-sigma Monte-Carlo slack.
pub fn certify_oracle(
    cfg: &OracleConfig,
    op: &OperatorSpec,
    n_samples: usize,
    sample_box: f64,
    n_points: usize,
    seed: u64,
) -> Result<Report> {
    if n_samples < 10_000 {
        return Err(invalid("n_samples", "certification needs at least 10^4 samples"));
    }
    let mut prng = seeded(seed, Purpose::Certify);
    let mut worst_bias: Option<Check> = None;
    let mut worst_var: Option<Check> = None;
    let mut worst_drift: Option<Check> = None;
    let keep_worst = |slot: &mut Option<Check>, c: Check| {
        if slot.as_ref().is_none_or(|w| c.margin < w.margin) {
            *slot = Some(c);
        }
    };
    for pt in 0..n_points {
        let x = uniform_point(op.dim(), sample_box, &mut prng);
        let mut rng = StreamKey::new(seed, Purpose::Oracle, 0, pt).rng();
        let s = point_stats(cfg, op, &x, n_samples, &mut rng)?;
        // ||mean - T|| <= sqrt(beta^2 + P r^2) + 3 * sqrt(tr Cov / K)
        let bound = (cfg.beta.powi(2) + cfg.p * s.residual_sq).sqrt() + 3.0 * s.mean_se;
        keep_worst(
            &mut worst_bias,
            Check::upper("bias", s.bias_sq, bound * bound, Status::Fail),
        );
        let vb = cfg.sigma.powi(2) + cfg.m_growth * s.residual_sq + 3.0 * s.mse_se;
        keep_worst(&mut worst_var, Check::upper("variance", s.mse, vb, Status::Fail));
        let db = cfg.d_bound.powi(2) + 3.0 * s.drift_se;
        keep_worst(&mut worst_drift, Check::upper("drift_bound", s.drift, db, Status::Fail));
    }
    let mut report = Report::new("oracle");
    for c in [worst_bias, worst_var, worst_drift].into_iter().flatten() {
        report.push(c.with_note(format!("worst of {n_points} points")));
    }
    Ok(report)
}

/// Least-squares slope of `||mean(T~) - T(x)||^2` against `||T(x) - x||^2`.
pub fn bias_slope(cfg: &OracleConfig, op: &OperatorSpec, points: &[Vec<f64>], n_samples: usize, seed: u64) -> Result<f64> {
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for (pt, x) in points.iter().enumerate() {
        let mut rng = StreamKey::new(seed, Purpose::Oracle, 1, pt).rng();
        let s = point_stats(cfg, op, x, n_samples, &mut rng)?;
        xs.push(s.residual_sq);
        // remove the expected contribution of sampling noise
        ys.push(s.bias_sq - s.mean_se * s.mean_se);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{make_strongly_convex_suite, ScalarPotential};

    fn quad_op(dim: usize) -> OperatorSpec {
        OperatorSpec::broadcast(dim, ScalarPotential::quadratic(1.0, 0.3), 0.5, 2.0).unwrap()
    }

    fn cfg(mechanism: Mechanism, g: &GlobalOperator) -> OracleConfig {
        OracleConfig::from_mechanism(mechanism, g).unwrap()
    }

    #[test]
    fn zero_noise_is_exact() {
        let op = quad_op(4);
        let g = GlobalOperator::new(vec![op.clone()], 0.0).unwrap();
        let c = cfg(Mechanism::AdditiveGaussian { noise_std: 0.0 }, &g);
        let x = [0.1, -0.4, 1.0, 0.0];
        let s = c.sample(&op, &x, StreamKey::new(1, Purpose::Oracle, 0, 0)).unwrap();
        assert_eq!(s.value, op.apply(&x));
    }

    #[test]
    fn zeroth_order_constants() {
        let g = make_strongly_convex_suite(30).unwrap();
        let z = 0.01;
        let (b2, p, s2, m) = declared_constants(&Mechanism::ZerothOrder { z_radius: z }, &g);
        let mm = g.locals().iter().map(|o| o.smoothness()).fold(0.0, f64::max);
        let tzm: f64 = 0.5 * z * mm;
        assert!((b2 - tzm * tzm * 33.0 * 33.0 / 4.0).abs() < 1e-12 * b2.max(1.0));
        assert_eq!(p, 0.0);
        assert!((s2 - 3.0 * tzm * tzm * 34f64.powi(3)).abs() < 1e-9 * s2.max(1.0));
        assert_eq!(m, 136.0);
    }

    #[test]
    fn gaussian_mse_matches_chi_square_mean() {
        let op = quad_op(30);
        let g = GlobalOperator::new(vec![op.clone()], 0.0).unwrap();
        let c = cfg(Mechanism::AdditiveGaussian { noise_std: 0.1 }, &g);
        let x = vec![0.2; 30];
        let mut rng = seeded(3, Purpose::Oracle);
        let s = point_stats(&c, &op, &x, 100_000, &mut rng).unwrap();
        assert!((s.mse - 0.3).abs() <= 3.0 * s.mse_se, "{} +- {}", s.mse, s.mse_se);
        assert!(s.bias_sq <= (3.0 * s.mean_se).powi(2));
    }

    #[test]
    fn zeroth_order_linear_mean_is_c_over_n() {
        let n = 5;
        let c: Vec<f64> = (0..n).map(|k| k as f64 - 1.5).collect();
        let f = |y: &[f64]| y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let mut rng = seeded(11, Purpose::Oracle);
        let draws = 1_000_000;
        let mut mean = vec![0.0; n];
        for _ in 0..draws {
            let gvec = zeroth_order_gradient(f, &vec![0.3; n], 0.5, &mut rng).unwrap();
            for k in 0..n {
                mean[k] += gvec[k] / draws as f64;
            }
        }
        // Var of (c.u) u_k is at most |c|^2 / n, so SE <= |c| / sqrt(n draws)
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tol = 4.0 * cn / ((n * draws) as f64).sqrt();
        for k in 0..n {
            assert!((mean[k] - c[k] / n as f64).abs() < tol, "{k}: {} vs {}", mean[k], c[k] / n as f64);
        }
    }

    #[test]
    fn zeroth_order_degenerate_cases() {
        let mut rng = seeded(2, Purpose::Oracle);
        let g = zeroth_order_gradient(|_| 4.2, &[1.0, 2.0, 3.0], 0.1, &mut rng).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let z = 0.3;
        let q = zeroth_order_gradient(
            |y| 0.5 * y.iter().map(|v| v * v).sum::<f64>(),
            &[0.0; 4],
            z,
            &mut rng,
        )
        .unwrap();
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - z / 2.0).abs() < 1e-15);
        assert!(matches!(
            zeroth_order_gradient(|_| 0.0, &[0.0], 0.0, &mut rng),
            Err(Error::InvalidParameter { name: "z_radius", .. })
        ));
    }

    #[test]
    fn synthetic_bias_slope_is_p_squared() {
        let op = quad_op(10);
        let g = GlobalOperator::new(vec![op.clone()], 0.0).unwrap();
        let c = cfg(
            Mechanism::SyntheticBias {
                beta_scale: 0.0,
                p_scale: 0.3,
                noise_std: 0.05,
            },
            &g,
        );
        let mut rng = seeded(5, Purpose::Sampling);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| uniform_point(10, 2.0, &mut rng)).collect();
        let slope = bias_slope(&c, &op, &pts, 20_000, 9).unwrap();
        assert!((slope - 0.09).abs() < 0.005, "slope {slope}");
    }

    #[test]
    fn p_at_least_one_rejected() {
        let mut c = OracleConfig {
            mechanism: Mechanism::AdditiveGaussian { noise_std: 0.0 },
            beta: 0.0,
            p: 1.0,
            sigma: 0.0,
            m_growth: 0.0,
            d_bound: 1.0,
        };
        assert!(matches!(c.validate(), Err(Error::InvalidParameter { name: "p", .. })));
        c.p = 0.5;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn reproducible_draws() {
        let op = quad_op(3);
        let g = GlobalOperator::new(vec![op.clone()], 0.0).unwrap();
        let c = cfg(Mechanism::ZerothOrder { z_radius: 0.1 }, &g);
        let key = StreamKey::new(4, Purpose::Oracle, 2, 17);
        let a = c.sample(&op, &[0.1, 0.2, 0.3], key).unwrap();
        let b = c.sample(&op, &[0.1, 0.2, 0.3], key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rng_draw_id, key.id());
    }
}
