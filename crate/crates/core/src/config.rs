//! TOML run configuration, overrides, sweeps and sidecar files.
//!
//! A configuration has one table per concern:
//!
//! ```toml
//! [run]
//! id = "demo"
//! horizon = 2000
//! seed = 1
//!
//! [network]
//! n_agents = 6
//! topology = { kind = "random_connected", p = 0.5, seed = 7 }
//!
//! [operators]
//! suite = "nonconvex"
//! dim = 30
//!
//! [oracle]
//! mechanism = { kind = "gradient_noise", level = 0.1, level_is = "variance" }
//!
//! [compression]
//! compressor = { kind = "c1_inf_quantizer", l_bits = 2 }
//!
//! [schedule]
//! kind = "fixed_period"
//! h = 3
//!
//! [step]
//! kind = "inv_sqrt"
//! a = 80.0
//! b = 0.8
//!
//! [consensus]
//! gamma = 0.7
//! psi = 0.99
//! ```
//!
//! `gamma` and `psi` also accept `"auto"`. An optional `[sweep]` table maps
//! dotted keys to lists of values and may list `seeds`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::{CompressorKind, CompressorSpec, DEFAULT_FLOAT_BITS, DEFAULT_INT_BITS};
use crate::engine::{Diagnostics, RunConfig, ScaleMode, X0Policy};
use crate::error::{Error, Result};
use crate::network::{build_graph, metropolis_mixing, Topology};
use crate::operators::{
    find_fixed_point, suite_potentials, FixedPointKind, GlobalOperator, OperatorSpec, ScalarPotential,
};
use crate::oracle::{Mechanism, OracleConfig};
use crate::report::{Report, Status};
use crate::scheduling::{
    auto_gamma, make_schedule, theorem1_constants, theorem2_constants, validate_for_step, zeta1, zeta2,
    CommPolicy, ConsensusParams, ConstantInputs, StepKind, StepSchedule, TheoremParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub network: NetworkSection,
    pub operators: OperatorsSection,
    pub oracle: OracleSection,
    pub compression: CompressionSection,
    pub schedule: CommPolicy,
    pub step: StepSchedule,
    pub consensus: ConsensusSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_true() -> bool {
    true
}
fn default_tol() -> f64 {
    1e-10
}
fn default_x0() -> X0Policy {
    X0Policy::Zero
}
fn default_scale() -> ScaleMode {
    ScaleMode::Coupled
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default = "default_x0")]
    pub x0: X0Policy,
    #[serde(default = "default_scale")]
    pub scale_mode: ScaleMode,
    /// Compute the fixed point so `dist_to_fixpoint` is recorded.
    #[serde(default = "default_true")]
    pub fixed_point: bool,
    #[serde(default = "default_tol")]
    pub fixed_point_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub n_agents: usize,
    pub topology: Topology,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Nonconvex,
    StronglyConvex,
    /// `f_i(s) = 0.5 c_i s^2 - l_i s` per coordinate.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorsSection {
    pub suite: Suite,
    pub dim: usize,
    /// Overrides the suite's operating box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_bound: Option<f64>,
    /// Overrides the estimated heterogeneity bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvatures: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelIs {
    Variance,
    Std,
}

fn default_level_is() -> LevelIs {
    LevelIs::Variance
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSection {
    /// Gaussian noise on the gradient, `T~ = x - tau (grad f + xi)`.
    GradientNoise {
        level: f64,
        #[serde(default = "default_level_is")]
        level_is: LevelIs,
    },
    AdditiveGaussian { noise_std: f64 },
    ZerothOrder { z_radius: f64 },
    SyntheticBias {
        beta_scale: f64,
        p_scale: f64,
        #[serde(default)]
        noise_std: f64,
    },
}

/// Replaces analytic oracle constants with declared ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_growth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub mechanism: MechanismSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared: Option<DeclaredSection>,
}

fn default_float_bits() -> u32 {
    DEFAULT_FLOAT_BITS
}
fn default_int_bits() -> u32 {
    DEFAULT_INT_BITS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSection {
    pub compressor: CompressorKind,
    #[serde(default = "default_float_bits")]
    pub float_bits: u32,
    #[serde(default = "default_int_bits")]
    pub int_bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    Value(f64),
    Keyword(Auto),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSection {
    pub gamma: AutoOr,
    pub psi: AutoOr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted config key to the list of values it takes.
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

/// Derived quantities recorded next to every trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub n_agents: usize,
    pub dim: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub lipschitz: f64,
    pub box_bound: f64,
    pub heterogeneity_zeta: f64,
    pub oracle_beta: f64,
    pub oracle_p: f64,
    pub oracle_sigma: f64,
    pub oracle_m_growth: f64,
    pub d_bound: f64,
    pub r: f64,
    pub phi: f64,
    pub delta_sq: f64,
    pub bits_per_message_expected: f64,
    pub gamma: f64,
    pub psi: f64,
    pub h_max: usize,
    pub comm_rounds_planned: usize,
    /// NaN when the consensus step is infeasible.
    pub zeta1: f64,
    pub zeta2: f64,
    /// `C_1` for `b / sqrt(t + a)` steps, `C_2` for `b / (t + a)`.
    pub consensus_constant: f64,
    pub fixed_point_kind: Option<FixedPointKind>,
    pub validator_status: Status,
    pub averaging: String,
}

/// A configuration resolved into simulator inputs.
#[derive(Clone, Debug)]
pub struct Built {
    pub run: RunConfig,
    pub header: Header,
    pub validation: Report,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_value(v: toml::Value) -> Result<Self> {
        v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides. Keys must already exist.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = self.to_value()?;
        for (key, raw) in overrides {
            set_existing(&mut v, key, parse_scalar(raw))?;
        }
        Self::from_value(v)
    }

    /// Sets one dotted key to a TOML value; the key must already exist.
    pub fn with_value(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut v = self.to_value()?;
        set_existing(&mut v, key, value)?;
        Self::from_value(v)
    }

    /// Expands `[sweep]` into labelled configurations (cartesian product,
    /// axes in key order). Without a sweep the result is the config itself.
    pub fn expand_sweep(&self) -> Result<Vec<(String, Config)>> {
        let mut base = self.clone();
        let sweep = base.sweep.take();
        let axes = match sweep {
            Some(s) if !s.axes.is_empty() => s.axes,
            _ => return Ok(vec![(String::new(), base)]),
        };
        let mut points: Vec<(Vec<String>, Config)> = vec![(Vec::new(), base)];
        for (key, values) in &axes {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep axis `{key}` has no values")));
            }
            let mut next = Vec::new();
            for (labels, cfg) in &points {
                for v in values {
                    let mut l = labels.clone();
                    l.push(format!("{key}={}", value_label(v)));
                    next.push((l, cfg.with_value(key, v.clone())?));
                }
            }
            points = next;
        }
        Ok(points.into_iter().map(|(l, c)| (l.join(","), c)).collect())
    }

    pub fn sweep_seeds(&self) -> Option<Vec<u64>> {
        self.sweep.as_ref().and_then(|s| s.seeds.clone())
    }

    pub fn build_operator(&self) -> Result<GlobalOperator> {
        let op = &self.operators;
        let n_agents = self.network.n_agents;
        let locals = match op.suite {
            Suite::Nonconvex | Suite::StronglyConvex => {
                let name = if op.suite == Suite::Nonconvex { "nonconvex" } else { "strongly_convex" };
                let (pots, tau, b) = suite_potentials(name).expect("known suite");
                if n_agents != pots.len() {
                    return Err(Error::DimensionMismatch {
                        expected: pots.len(),
                        got: n_agents,
                    });
                }
                let tau = op.tau.unwrap_or(tau);
                let b = op.box_bound.unwrap_or(b);
                pots.into_iter()
                    .map(|p| OperatorSpec::broadcast(op.dim, p, tau, b))
                    .collect::<Result<Vec<_>>>()?
            }
            Suite::Quadratic => {
                let curv = op
                    .curvatures
                    .as_ref()
                    .ok_or_else(|| Error::Config("quadratic suite needs `curvatures`".into()))?;
                let lin = op.linear.clone().unwrap_or_else(|| vec![0.0; curv.len()]);
                if curv.len() != n_agents || lin.len() != n_agents {
                    return Err(Error::DimensionMismatch {
                        expected: n_agents,
                        got: curv.len().min(lin.len()),
                    });
                }
                let tau = op.tau.unwrap_or(1.0);
                let b = op.box_bound.unwrap_or(5.0);
                curv.iter()
                    .zip(&lin)
                    .map(|(&c, &l)| OperatorSpec::broadcast(op.dim, ScalarPotential::quadratic(c, l), tau, b))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        match op.zeta {
            Some(z) => GlobalOperator::new(locals, z),
            None => GlobalOperator::with_estimated_zeta(locals),
        }
    }

    pub fn build_oracle(&self, g: &GlobalOperator) -> Result<OracleConfig> {
        let mechanism = match self.oracle.mechanism {
            MechanismSection::GradientNoise { level, level_is } => {
                if !(level >= 0.0) {
                    return Err(crate::error::invalid("level", "noise level must be non-negative"));
                }
                let std = match level_is {
                    LevelIs::Variance => level.sqrt(),
                    LevelIs::Std => level,
                };
                let tau = g
                    .tau()
                    .ok_or_else(|| Error::Config("gradient noise needs a common tau".into()))?;
                Mechanism::AdditiveGaussian { noise_std: tau * std }
            }
            MechanismSection::AdditiveGaussian { noise_std } => Mechanism::AdditiveGaussian { noise_std },
            MechanismSection::ZerothOrder { z_radius } => Mechanism::ZerothOrder { z_radius },
            MechanismSection::SyntheticBias {
                beta_scale,
                p_scale,
                noise_std,
            } => Mechanism::SyntheticBias {
                beta_scale,
                p_scale,
                noise_std,
            },
        };
        let mut cfg = OracleConfig::from_mechanism(mechanism, g)?;
        if let Some(d) = &self.oracle.declared {
            cfg.beta = d.beta.unwrap_or(cfg.beta);
            cfg.p = d.p.unwrap_or(cfg.p);
            cfg.sigma = d.sigma.unwrap_or(cfg.sigma);
            cfg.m_growth = d.m_growth.unwrap_or(cfg.m_growth);
            cfg.d_bound = d.d_bound.unwrap_or(cfg.d_bound);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Built> {
        let graph = build_graph(&self.network.topology, self.network.n_agents)?;
        let mixing = metropolis_mixing(&graph)?;
        let global = self.build_operator()?;
        let oracle = self.build_oracle(&global)?;
        let c = &self.compression;
        let compressor = CompressorSpec::with_bits(c.compressor.clone(), global.dim(), c.float_bits, c.int_bits)?;
        let horizon = self.run.horizon;
        if horizon < 1 {
            return Err(crate::error::invalid("horizon", "must be at least 1"));
        }
        let schedule = make_schedule(&self.schedule, horizon)?;
        self.step.validate()?;
        let (alpha, kappa) = (mixing.alpha(), mixing.kappa());
        let (r, phi) = (compressor.r(), compressor.phi());
        let psi = match self.consensus.psi {
            AutoOr::Value(v) => v,
            AutoOr::Keyword(Auto::Auto) => 1.0 / r,
        };
        let gamma = match self.consensus.gamma {
            AutoOr::Value(v) => v,
            AutoOr::Keyword(Auto::Auto) => auto_gamma(phi, kappa, alpha, psi, r),
        };
        let fixed = if self.run.fixed_point {
            Some(find_fixed_point(&global, self.run.fixed_point_tol)?)
        } else {
            None
        };
        let params = TheoremParams {
            gamma,
            psi,
            r,
            phi,
            alpha,
            kappa,
            step: self.step,
            h_max: schedule.h_max(),
            lipschitz: global.lipschitz(),
            p: oracle.p,
            m_growth: oracle.m_growth,
        };
        let validation = validate_for_step(&params);
        let z1 = zeta1(gamma, phi, kappa, alpha, psi, r).unwrap_or(f64::NAN);
        let z2 = zeta2(gamma, phi, kappa, alpha, psi, r, global.n_agents(), oracle.d_bound);
        let inputs = ConstantInputs {
            zeta1: z1,
            zeta2: z2,
            n_agents: global.n_agents(),
            psi,
            r,
            delta_sq: compressor.delta_sq(),
            d_bound: oracle.d_bound,
            h_max: schedule.h_max(),
        };
        let constant = match self.step.kind {
            StepKind::InvLinear => theorem2_constants(&inputs),
            _ => theorem1_constants(&inputs),
        }
        .unwrap_or(f64::NAN);
        let header = Header {
            n_agents: global.n_agents(),
            dim: global.dim(),
            alpha,
            kappa,
            lipschitz: global.lipschitz(),
            box_bound: global.box_bound(),
            heterogeneity_zeta: global.heterogeneity_zeta(),
            oracle_beta: oracle.beta,
            oracle_p: oracle.p,
            oracle_sigma: oracle.sigma,
            oracle_m_growth: oracle.m_growth,
            d_bound: oracle.d_bound,
            r,
            phi,
            delta_sq: compressor.delta_sq(),
            bits_per_message_expected: compressor.bit_cost(),
            gamma,
            psi,
            h_max: schedule.h_max(),
            comm_rounds_planned: schedule.len(),
            zeta1: z1,
            zeta2: z2,
            consensus_constant: constant,
            fixed_point_kind: fixed.as_ref().map(|f| f.kind),
            validator_status: validation.status(),
            averaging: "single".into(),
        };
        let run = RunConfig {
            global,
            oracle,
            mixing,
            compressor,
            schedule,
            step: self.step,
            consensus: ConsensusParams { gamma, psi },
            horizon,
            master_seed: self.run.seed,
            x0: self.run.x0,
            scale_mode: self.run.scale_mode,
            fixed_point: fixed.map(|f| f.x),
            validation: Some(validation.clone()),
        };
        Ok(Built {
            run,
            header,
            validation,
        })
    }
}

/// Parses an override value as TOML, falling back to a bare string.
pub fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Table(t) => t
            .get("kind")
            .and_then(|k| k.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| v.to_string()),
        other => other.to_string(),
    }
}

fn set_existing(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if k + 1 == parts.len() {
            // integers given for float keys stay floats
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Sidecar written next to each trace CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: Config,
    pub header: Header,
    pub diagnostics: Diagnostics,
    pub validation: Report,
    /// Keys whose values are tool defaults rather than experiment settings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defaults: Vec<String>,
}

impl Sidecar {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
[run]
id = "demo"
horizon = 50
seed = 1

[network]
n_agents = 6
topology = { kind = "ring" }

[operators]
suite = "strongly_convex"
dim = 3

[oracle]
mechanism = { kind = "gradient_noise", level = 0.01 }

[compression]
compressor = { kind = "c2_uniform", delta_step = 1.0 }

[schedule]
kind = "fixed_period"
h = 3

[step]
kind = "inv_linear"
a = 500.0
b = 8.0

[consensus]
gamma = 0.8
psi = "auto"
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = Config::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.consensus.psi, AutoOr::Keyword(Auto::Auto));
        let built = cfg.build().unwrap();
        assert_eq!(built.header.psi, 1.0);
        assert_eq!(built.run.schedule.indices(), &[1, 4, 7, 10, 13, 16, 19, 22, 25, 28, 31, 34, 37, 40, 43, 46, 49]);
        // noise variance 0.01 on the gradient, tau = 0.5
        match built.run.oracle.mechanism {
            Mechanism::AdditiveGaussian { noise_std } => assert!((noise_std - 0.05).abs() < 1e-15),
            ref m => panic!("{m:?}"),
        }
        assert_eq!(built.header.fixed_point_kind, Some(FixedPointKind::Contractive));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SAMPLE.replace("seed = 1", "seed = 1\nfoo = 2");
        let err = Config::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let cfg = Config::from_toml_str(SAMPLE).unwrap();
        assert!(cfg.with_overrides(&[("run.nope".into(), "1".into())]).is_err());
        let c = cfg.with_overrides(&[("schedule.h".into(), "8".into()), ("step.a".into(), "600".into())]).unwrap();
        assert_eq!(c.schedule, CommPolicy::FixedPeriod { h: 8 });
        assert_eq!(c.step.a, 600.0);
    }

    #[test]
    fn round_trip_through_sidecar() {
        let cfg = Config::from_toml_str(SAMPLE).unwrap();
        let built = cfg.build().unwrap();
        let side = Sidecar {
            config: cfg.clone(),
            header: built.header.clone(),
            diagnostics: Diagnostics::default(),
            validation: built.validation.clone(),
            defaults: vec!["run.horizon".into()],
        };
        let text = side.to_toml_string().unwrap();
        let back = Sidecar::from_toml_str(&text).unwrap();
        assert_eq!(back.config, cfg);
        // header holds NaN for infeasible constants, so compare the text
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn sweep_expansion() {
        let text = format!("{SAMPLE}\n[sweep]\naxes = {{ \"schedule.h\" = [3, 8, 13], \"consensus.gamma\" = [0.5, 0.8] }}\nseeds = [1, 2]\n");
        let cfg = Config::from_toml_str(&text).unwrap();
        let pts = cfg.expand_sweep().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].0, "consensus.gamma=0.5,schedule.h=3");
        assert!(pts.iter().all(|(_, c)| c.sweep.is_none()));
        assert_eq!(cfg.sweep_seeds(), Some(vec![1, 2]));
    }
}
