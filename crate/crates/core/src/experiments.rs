//! Canned figure-family presets and the artifact runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{tail_level, verdict_theorem1, verdict_theorem2, VerdictInputs};
use crate::compression::{CompressorKind, DEFAULT_FLOAT_BITS, DEFAULT_INT_BITS};
use crate::config::{
    AutoOr, Built, CompressionSection, Config, ConsensusSection, LevelIs, MechanismSection, NetworkSection,
    OperatorsSection, OracleSection, RunSection, Sidecar, Suite, SweepSection,
};
use crate::engine::{run_sweep, RunTrace, ScaleMode, X0Policy};
use crate::error::{Error, Result};
use crate::network::Topology;
use crate::report::{Check, Report, Status};
use crate::scheduling::{CommPolicy, StepKind, StepSchedule};

pub const NONCONVEX_HORIZON: usize = 20_000;
pub const STRONGLY_CONVEX_HORIZON: usize = 10_000;
pub const BIAS_GRID: [f64; 3] = [0.05, 0.1, 0.2];
pub const SIGMA_GRID: [f64; 3] = [0.05, 0.1, 0.2];
pub const MANIFEST_NAME: &str = "manifest.txt";
pub const VERDICTS_NAME: &str = "verdicts.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PresetName {
    Fig1CompressorFaceOff,
    Fig2CompressorBits,
    Fig3HSweep,
    Fig4BiasVariance,
    Fig5ConvexCompressors,
    Fig6ConvexBias,
}

impl PresetName {
    pub const ALL: [PresetName; 6] = [
        Self::Fig1CompressorFaceOff,
        Self::Fig2CompressorBits,
        Self::Fig3HSweep,
        Self::Fig4BiasVariance,
        Self::Fig5ConvexCompressors,
        Self::Fig6ConvexBias,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fig1CompressorFaceOff => "fig1_compressor_face_off",
            Self::Fig2CompressorBits => "fig2_compressor_bits",
            Self::Fig3HSweep => "fig3_h_sweep",
            Self::Fig4BiasVariance => "fig4_bias_variance",
            Self::Fig5ConvexCompressors => "fig5_convex_compressors",
            Self::Fig6ConvexBias => "fig6_convex_bias",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == name)
            .ok_or_else(|| Error::UnknownPreset(name.to_string()))
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fully wired preset: base config with its `[sweep]` table.
#[derive(Clone, Debug)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub config: Config,
    /// Config keys whose values are chosen here rather than taken from the
    /// experiment description. Echoed into every sidecar.
    pub defaults: Vec<String>,
    /// `(beta, sigma)` grid for the bias presets.
    pub bias_grid: Option<(Vec<f64>, Vec<f64>)>,
}

impl ExperimentPreset {
    /// Number of sweep points.
    pub fn n_points(&self) -> Result<usize> {
        Ok(self.config.expand_sweep()?.len())
    }
}

fn c1() -> CompressorKind {
    CompressorKind::C1InfQuantizer { l_bits: 2 }
}
fn c2() -> CompressorKind {
    CompressorKind::C2Uniform { delta_step: 1.0 }
}
fn c3() -> CompressorKind {
    CompressorKind::C3SparsifyQuantize {
        p_keep: 0.75,
        delta_step: 1.0,
    }
}

fn kind_value(k: CompressorKind) -> toml::Value {
    toml::Value::try_from(k).expect("compressor kinds serialize")
}

fn base(id: &str, suite: Suite, horizon: usize, mechanism: MechanismSection, compressor: CompressorKind) -> Config {
    let (step, gamma) = match suite {
        Suite::StronglyConvex => (StepSchedule::inv_linear(500.0, 8.0), 0.8),
        _ => (StepSchedule::inv_sqrt(80.0, 0.8), 0.7),
    };
    Config {
        run: RunSection {
            id: id.to_string(),
            horizon,
            seed: 1,
            x0: X0Policy::Zero,
            scale_mode: ScaleMode::Coupled,
            fixed_point: true,
            fixed_point_tol: 1e-10,
        },
        network: NetworkSection {
            n_agents: 6,
            topology: Topology::RandomConnected { p: 0.5, seed: 7 },
        },
        operators: OperatorsSection {
            suite,
            dim: 30,
            box_bound: None,
            zeta: None,
            curvatures: None,
            linear: None,
            tau: None,
        },
        oracle: OracleSection {
            mechanism,
            declared: None,
        },
        compression: CompressionSection {
            compressor,
            float_bits: DEFAULT_FLOAT_BITS,
            int_bits: DEFAULT_INT_BITS,
        },
        schedule: CommPolicy::FixedPeriod { h: 3 },
        step,
        consensus: ConsensusSection {
            gamma: AutoOr::Value(gamma),
            psi: AutoOr::Value(0.99),
        },
        sweep: None,
    }
}

fn gradient_noise(variance: f64) -> MechanismSection {
    MechanismSection::GradientNoise {
        level: variance,
        level_is: LevelIs::Variance,
    }
}

fn bias_sweep(cfg: &mut Config) {
    let n = cfg.operators.dim as f64;
    let betas: Vec<toml::Value> = BIAS_GRID.iter().map(|&b| toml::Value::Float(b)).collect();
    // sigma bounds the whole noise vector, so each coordinate gets sigma / sqrt(n)
    let stds: Vec<toml::Value> = SIGMA_GRID.iter().map(|&s| toml::Value::Float(s / n.sqrt())).collect();
    cfg.sweep = Some(SweepSection {
        axes: [
            ("oracle.mechanism.beta_scale".to_string(), betas),
            ("oracle.mechanism.noise_std".to_string(), stds),
        ]
        .into_iter()
        .collect(),
        seeds: None,
    });
}

fn common_defaults() -> Vec<String> {
    vec![
        "run.horizon".into(),
        "run.seed".into(),
        "run.x0".into(),
        "network.topology".into(),
        "compression.float_bits".into(),
        "compression.int_bits".into(),
    ]
}

pub fn preset(name: PresetName) -> ExperimentPreset {
    let id = name.as_str();
    let mut defaults = common_defaults();
    let mut bias_grid = None;
    let config = match name {
        PresetName::Fig1CompressorFaceOff | PresetName::Fig2CompressorBits => {
            let (var, kinds) = if name == PresetName::Fig1CompressorFaceOff {
                (0.1, vec![c1(), c2()])
            } else {
                (0.01, vec![c1(), c2(), c3()])
            };
            let mut cfg = base(id, Suite::Nonconvex, NONCONVEX_HORIZON, gradient_noise(var), c1());
            cfg.sweep = Some(SweepSection {
                axes: [(
                    "compression.compressor".to_string(),
                    kinds.into_iter().map(kind_value).collect(),
                )]
                .into_iter()
                .collect(),
                seeds: None,
            });
            cfg
        }
        PresetName::Fig3HSweep => {
            defaults.push("compression.compressor".into());
            defaults.push("oracle.mechanism".into());
            let mut cfg = base(id, Suite::Nonconvex, NONCONVEX_HORIZON, gradient_noise(0.01), c1());
            cfg.sweep = Some(SweepSection {
                axes: [(
                    "schedule.h".to_string(),
                    [3, 8, 13].into_iter().map(toml::Value::Integer).collect(),
                )]
                .into_iter()
                .collect(),
                seeds: None,
            });
            cfg
        }
        PresetName::Fig4BiasVariance | PresetName::Fig6ConvexBias => {
            defaults.push("oracle.mechanism".into());
            let (suite, horizon, comp) = if name == PresetName::Fig4BiasVariance {
                (Suite::Nonconvex, NONCONVEX_HORIZON, c2())
            } else {
                defaults.push("compression.compressor".into());
                (Suite::StronglyConvex, STRONGLY_CONVEX_HORIZON, c1())
            };
            let mech = MechanismSection::SyntheticBias {
                beta_scale: BIAS_GRID[0],
                p_scale: 0.0,
                noise_std: 0.0,
            };
            let mut cfg = base(id, suite, horizon, mech, comp);
            bias_sweep(&mut cfg);
            bias_grid = Some((BIAS_GRID.to_vec(), SIGMA_GRID.to_vec()));
            cfg
        }
        PresetName::Fig5ConvexCompressors => {
            let n = 30.0_f64;
            // total noise variance 0.01 spread over the coordinates
            let mech = MechanismSection::AdditiveGaussian {
                noise_std: (0.01 / n).sqrt(),
            };
            let mut cfg = base(id, Suite::StronglyConvex, STRONGLY_CONVEX_HORIZON, mech, c1());
            cfg.sweep = Some(SweepSection {
                axes: [(
                    "compression.compressor".to_string(),
                    vec![kind_value(c1()), kind_value(c2()), kind_value(c3())],
                )]
                .into_iter()
                .collect(),
                seeds: None,
            });
            cfg
        }
    };
    ExperimentPreset {
        name,
        config,
        defaults,
        bias_grid,
    }
}

pub fn preset_by_name(name: &str) -> Result<ExperimentPreset> {
    PresetName::parse(name).map(preset)
}

/// One artifact line of a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sha256: String,
    /// Path relative to the manifest's directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunFailure {
    pub run_id: String,
    pub kind: String,
    pub message: String,
}

/// Artifacts of a preset or sweep run.
///
/// On disk, `#` lines are comments, failures are `# error <run_id> <kind>: <message>`,
/// and every other line is `<sha256>  <relative path>`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub title: String,
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<RunFailure>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# fpnet manifest v1\n");
        let _ = writeln!(s, "# title {}", self.title);
        for e in &self.errors {
            let _ = writeln!(s, "# error {} {}: {}", e.run_id, e.kind, e.message.replace('\n', " "));
        }
        for e in &self.entries {
            let _ = writeln!(s, "{}  {}", e.sha256, e.path);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# title ") {
                m.title = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("# error ") {
                let (run_id, tail) = rest.split_once(' ').unwrap_or((rest, ""));
                let (kind, message) = tail.split_once(": ").unwrap_or((tail, ""));
                m.errors.push(RunFailure {
                    run_id: run_id.into(),
                    kind: kind.into(),
                    message: message.into(),
                });
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                let (sha, path) = line
                    .split_once("  ")
                    .ok_or_else(|| Error::Config(format!("malformed manifest line `{line}`")))?;
                m.entries.push(ManifestEntry {
                    sha256: sha.into(),
                    path: path.into(),
                });
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Paths (relative) whose current checksum differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.entries {
            match fs::read(dir.join(&e.path)) {
                Ok(bytes) if sha256_hex(&bytes) == e.sha256 => {}
                _ => bad.push(e.path.clone()),
            }
        }
        Ok(bad)
    }

    fn add_file(&mut self, dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        fs::write(dir.join(rel), bytes)?;
        self.entries.push(ManifestEntry {
            sha256: sha256_hex(bytes),
            path: rel.to_string(),
        });
        Ok(())
    }
}

/// Filesystem-safe version of a run label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '-' })
        .collect()
}

pub fn run_id(prefix: &str, label: &str, seed: u64) -> String {
    if label.is_empty() {
        format!("{}__s{seed}", sanitize(prefix))
    } else {
        format!("{}__{}__s{seed}", sanitize(prefix), sanitize(label))
    }
}

/// Per-point verdict as written to `verdicts.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointVerdict {
    pub label: String,
    pub seeds_ok: usize,
    pub status: Status,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub title: String,
    pub points: Vec<PointVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau_ordering: Option<Report>,
}

fn verdict_for(built: &Built, traces: &[RunTrace]) -> Result<Report> {
    let h = &built.header;
    let inputs = VerdictInputs {
        constant: h.consensus_constant,
        step: built.run.step,
        unbiased: h.oracle_beta == 0.0 && h.oracle_p == 0.0,
        noise_floor: None,
        t_check_from: 10,
    };
    match built.run.step.kind {
        StepKind::InvLinear => verdict_theorem2(traces, &inputs),
        _ => verdict_theorem1(traces, &inputs),
    }
}

/// Plateau metric: residual for `b / sqrt(t + a)` runs, distance to the fixed
/// point otherwise.
pub fn plateau_metric(step: &StepSchedule) -> fn(&crate::engine::TraceRow) -> f64 {
    match step.kind {
        StepKind::InvLinear => |r| r.dist_to_fixpoint,
        _ => |r| r.residual,
    }
}

/// Checks that tail plateaus of a `beta x sigma` grid grow along both axes.
/// `levels[i][j]` is `(level, standard error)` at `betas[i]`, `sigmas[j]`.
/// A step that does not rise but stays within three combined standard errors
/// is a tie (WARN); only a significant drop fails.
pub fn plateau_ordering(levels: &[Vec<Option<(f64, f64)>>]) -> Report {
    let mut rep = Report::new("plateau_ordering");
    let nb = levels.len();
    let ns = levels.first().map_or(0, Vec::len);
    let mut pair = |name: String, lo: Option<(f64, f64)>, hi: Option<(f64, f64)>| match (lo, hi) {
        (Some((a, sa)), Some((b, sb))) => {
            let c = Check::strict_lower(name, b, a, Status::Fail);
            let tie = 3.0 * sa.hypot(sb);
            rep.push(if c.status == Status::Fail && a - b <= tie {
                Check { status: Status::Warn, ..c }.with_note(format!("within 3 se ({tie:.3e})"))
            } else {
                c
            });
        }
        _ => rep.push(Check::skipped(name, "missing runs")),
    };
    for j in 0..ns {
        for i in 1..nb {
            pair(format!("beta_{}_{}@sigma_{j}", i - 1, i), levels[i - 1][j], levels[i][j]);
        }
    }
    for i in 0..nb {
        for j in 1..ns {
            pair(format!("sigma_{}_{}@beta_{i}", j - 1, j), levels[i][j - 1], levels[i][j]);
        }
    }
    rep
}

/// Resolves every point of a (possibly swept) config and refuses to start if
/// any validator reports FAIL, unless `allow_fail` is set.
pub fn build_points(cfg: &Config, allow_fail: bool) -> Result<Vec<(String, Config, Built)>> {
    let mut out = Vec::new();
    for (label, c) in cfg.expand_sweep()? {
        let built = c.build()?;
        if built.validation.status() == Status::Fail && !allow_fail {
            let failed: Vec<&str> = built
                .validation
                .checks
                .iter()
                .filter(|k| k.status == Status::Fail)
                .map(|k| k.name.as_str())
                .collect();
            let at = if label.is_empty() { String::new() } else { format!(" at `{label}`") };
            return Err(Error::Infeasible(format!("validator FAIL{at}: {}", failed.join(", "))));
        }
        out.push((label, c, built));
    }
    Ok(out)
}

/// Runs all points under all seeds, writing `<run_id>.csv`, `<run_id>.sidecar.toml`,
/// `verdicts.toml` and the manifest into `out_dir`.
pub fn run_config_sweep(
    title: &str,
    cfg: &Config,
    seeds: &[u64],
    out_dir: &Path,
    defaults: &[String],
    bias_grid: Option<&(Vec<f64>, Vec<f64>)>,
    allow_fail: bool,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let points = build_points(cfg, allow_fail)?;
    let runnable: Vec<(String, crate::engine::RunConfig)> =
        points.iter().map(|(l, _, b)| (l.clone(), b.run.clone())).collect();
    let outcomes = run_sweep(&runnable, seeds)?;

    let mut manifest = Manifest {
        title: title.to_string(),
        ..Default::default()
    };
    let mut verdicts = Verdicts {
        title: title.to_string(),
        points: Vec::new(),
        plateau_ordering: None,
    };
    let mut levels = Vec::new();
    let mut it = outcomes.into_iter();
    for (label, point_cfg, built) in &points {
        let mut traces = Vec::new();
        for _ in seeds {
            let o = it.next().expect("one outcome per point and seed");
            let id = run_id(title, label, o.seed);
            match o.result {
                Ok(trace) => {
                    let mut c = point_cfg.clone();
                    c.run.id = id.clone();
                    c.run.seed = o.seed;
                    let side = Sidecar {
                        config: c,
                        header: built.header.clone(),
                        diagnostics: trace.diagnostics.clone(),
                        validation: built.validation.clone(),
                        defaults: defaults.to_vec(),
                    };
                    manifest.add_file(out_dir, &format!("{id}.csv"), trace.to_csv_string().as_bytes())?;
                    manifest.add_file(out_dir, &format!("{id}.sidecar.toml"), side.to_toml_string()?.as_bytes())?;
                    traces.push(trace);
                }
                Err(e) => manifest.errors.push(RunFailure {
                    run_id: id,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        let report = if traces.is_empty() {
            let mut r = Report::new("verdict");
            r.push(Check {
                name: "runs".into(),
                status: Status::Fail,
                value: 0.0,
                bound: seeds.len() as f64,
                margin: -(seeds.len() as f64),
                note: "every seed failed".into(),
            });
            r
        } else {
            verdict_for(built, &traces)?
        };
        levels.push(if traces.is_empty() {
            None
        } else {
            Some(tail_level(&traces, 0.1, plateau_metric(&built.run.step))?)
        });
        verdicts.points.push(PointVerdict {
            label: label.clone(),
            seeds_ok: traces.len(),
            status: report.status(),
            report,
        });
    }
    if let Some((betas, sigmas)) = bias_grid {
        // axes expand in key order: beta_scale outer, noise_std inner
        if betas.len() * sigmas.len() == levels.len() {
            let grid: Vec<Vec<_>> = levels.chunks(sigmas.len()).map(<[_]>::to_vec).collect();
            verdicts.plateau_ordering = Some(plateau_ordering(&grid));
        }
    }
    let text = toml::to_string(&verdicts).map_err(|e| Error::Config(e.to_string()))?;
    manifest.add_file(out_dir, VERDICTS_NAME, text.as_bytes())?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

pub fn run_preset(p: &ExperimentPreset, seeds: &[u64], out_dir: &Path) -> Result<Manifest> {
    run_config_sweep(
        p.name.as_str(),
        &p.config,
        seeds,
        out_dir,
        &p.defaults,
        p.bias_grid.as_ref(),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in PresetName::ALL {
            assert_eq!(PresetName::parse(p.as_str()).unwrap(), p);
        }
        assert_eq!(PresetName::parse("fig7").unwrap_err().kind(), "unknown-preset");
    }

    #[test]
    fn preset_shapes() {
        assert_eq!(preset(PresetName::Fig3HSweep).n_points().unwrap(), 3);
        assert_eq!(preset(PresetName::Fig1CompressorFaceOff).n_points().unwrap(), 2);
        assert_eq!(preset(PresetName::Fig2CompressorBits).n_points().unwrap(), 3);
        assert_eq!(preset(PresetName::Fig4BiasVariance).n_points().unwrap(), 9);
        let f1 = preset(PresetName::Fig1CompressorFaceOff).config;
        assert_eq!(f1.step, StepSchedule::inv_sqrt(80.0, 0.8));
        assert_eq!(f1.consensus.gamma, AutoOr::Value(0.7));
        assert_eq!(f1.consensus.psi, AutoOr::Value(0.99));
        assert_eq!(f1.schedule, CommPolicy::FixedPeriod { h: 3 });
        let f5 = preset(PresetName::Fig5ConvexCompressors);
        assert_eq!(f5.config.step, StepSchedule::inv_linear(500.0, 8.0));
        let (_, c, built) = build_points(&f5.config, false).unwrap().remove(0);
        assert_eq!(built.run.global.tau(), Some(0.5));
        assert_eq!(c.consensus.gamma, AutoOr::Value(0.8));
    }

    #[test]
    fn every_preset_validates() {
        for p in PresetName::ALL {
            let pts = build_points(&preset(p).config, false).unwrap_or_else(|e| panic!("{p}: {e}"));
            assert!(pts.iter().all(|(_, _, b)| b.validation.status() <= Status::Warn));
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            title: "x".into(),
            entries: vec![ManifestEntry {
                sha256: sha256_hex(b"abc"),
                path: "a.csv".into(),
            }],
            errors: vec![RunFailure {
                run_id: "r".into(),
                kind: "divergence".into(),
                message: "blew up at t = 3".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn ordering_report() {
        let g = vec![
            vec![Some((1.0, 0.0)), Some((2.0, 0.0))],
            vec![Some((3.0, 0.0)), Some((4.0, 0.0))],
        ];
        assert!(plateau_ordering(&g).passed());
        let g = vec![vec![Some((1.0, 0.0)), Some((0.5, 0.0))]];
        assert_eq!(plateau_ordering(&g).status(), Status::Fail);
        // a drop inside the noise is a tie, not an inversion
        let g = vec![vec![Some((1.0, 0.1)), Some((0.9, 0.1))]];
        assert_eq!(plateau_ordering(&g).status(), Status::Warn);
        let g = vec![vec![Some((1.0, 0.01)), Some((0.9, 0.01))]];
        assert_eq!(plateau_ordering(&g).status(), Status::Fail);
    }
}
