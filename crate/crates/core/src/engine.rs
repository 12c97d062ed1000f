//! Synchronous simulation of the compressed, period-skipping distributed
//! KM iteration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::CompressorSpec;
use crate::error::{invalid, Error, Result};
use crate::network::MixingMatrix;
use crate::operators::GlobalOperator;
use crate::oracle::OracleConfig;
use crate::report::Report;
use crate::rng::{Purpose, StreamKey};
use crate::scheduling::{CommSchedule, ConsensusParams, StepSchedule};

/// Any coordinate above this magnitude aborts the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
pub const CSV_HEADER: &str = "t,residual,consensus_error,dist_to_fixpoint,bits_cumulative,comm_rounds,eta_t";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum X0Policy {
    Zero,
    /// Independent uniform points in `[-radius, radius]^n` per agent.
    RandomBall { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `s_t = eta_t`
    Coupled,
    /// `s_t = eta_0` for every `t` (control experiment).
    Frozen,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub global: GlobalOperator,
    pub oracle: OracleConfig,
    pub mixing: MixingMatrix,
    pub compressor: CompressorSpec,
    pub schedule: CommSchedule,
    pub step: StepSchedule,
    pub consensus: ConsensusParams,
    pub horizon: usize,
    pub master_seed: u64,
    pub x0: X0Policy,
    pub scale_mode: ScaleMode,
    /// Reference point for `dist_to_fixpoint`; NaN is recorded when absent.
    pub fixed_point: Option<Vec<f64>>,
    /// Validator outcome echoed into the trace.
    pub validation: Option<Report>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.global.dim();
        let agents = self.global.n_agents();
        if self.mixing.n_agents() != agents {
            return Err(Error::DimensionMismatch {
                expected: agents,
                got: self.mixing.n_agents(),
            });
        }
        if self.compressor.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.compressor.dim(),
            });
        }
        if let Some(x) = &self.fixed_point {
            if x.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: x.len() });
            }
        }
        if self.schedule.horizon() < self.horizon {
            return Err(invalid("schedule", "communication schedule is shorter than the horizon"));
        }
        self.step.validate()?;
        self.oracle.validate()?;
        if !(self.consensus.gamma > 0.0) {
            return Err(invalid("gamma", "consensus step must be positive"));
        }
        if !(self.consensus.psi > 0.0) {
            return Err(invalid("psi", "estimate step must be positive"));
        }
        Ok(())
    }

    /// `s_t` for the configured scale mode.
    pub fn scale(&self, t: usize) -> f64 {
        match self.scale_mode {
            ScaleMode::Coupled => self.step.eta(t),
            ScaleMode::Frozen => self.step.eta(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub residual: f64,
    pub consensus_error: f64,
    pub dist_to_fixpoint: f64,
    pub bits_cumulative: u64,
    pub comm_rounds: usize,
    pub eta_t: f64,
}

/// Run-level counters written to the sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub messages: u64,
    /// Sum of per-message payload bits (each message counted once).
    pub bits_per_message_total: u64,
    /// Sum of sparse index bits over messages, counted per receiving edge.
    pub index_bits_per_edge_total: u64,
    /// Agent-steps spent outside the operating box.
    pub box_violations: u64,
    /// Quantized integers that exceed the declared width.
    pub int_overflows: u64,
    /// Largest `||xbar - zbar|| / (1 + ||zbar||)` at communication steps.
    pub max_mean_drift: f64,
    /// Number of communication steps where some replica disagreed.
    pub replica_mismatches: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub diagnostics: Diagnostics,
    pub validation: Option<Report>,
}

impl RunTrace {
    pub fn column(&self, f: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{},{},{:.16e}\n",
                r.t, r.residual, r.consensus_error, r.dist_to_fixpoint, r.bits_cumulative, r.comm_rounds, r.eta_t
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_csv_string().as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// Parses a trace written by [`RunTrace::write_csv`].
pub fn read_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("trace CSV header does not match".into()));
    }
    let bad = |line: &str| Error::Config(format!("malformed trace row `{line}`"));
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            let fl = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(TraceRow {
                t: f[0].parse().map_err(|_| bad(line))?,
                residual: fl(f[1])?,
                consensus_error: fl(f[2])?,
                dist_to_fixpoint: fl(f[3])?,
                bits_cumulative: f[4].parse().map_err(|_| bad(line))?,
                comm_rounds: f[5].parse().map_err(|_| bad(line))?,
                eta_t: fl(f[6])?,
            })
        })
        .collect()
}

/// Plain per-row mean of several traces of equal length.
pub fn average_traces(traces: &[RunTrace]) -> Result<RunTrace> {
    let first = traces.first().ok_or_else(|| Error::InvalidSize("no traces to average".into()))?;
    let len = first.rows.len();
    if traces.iter().any(|t| t.rows.len() != len) {
        return Err(Error::InvalidSize("traces have different lengths".into()));
    }
    let k = traces.len() as f64;
    let rows = (0..len)
        .map(|i| {
            let mean = |f: fn(&TraceRow) -> f64| traces.iter().map(|t| f(&t.rows[i])).sum::<f64>() / k;
            TraceRow {
                t: first.rows[i].t,
                residual: mean(|r| r.residual),
                consensus_error: mean(|r| r.consensus_error),
                dist_to_fixpoint: mean(|r| r.dist_to_fixpoint),
                bits_cumulative: first.rows[i].bits_cumulative,
                comm_rounds: first.rows[i].comm_rounds,
                eta_t: first.rows[i].eta_t,
            }
        })
        .collect();
    Ok(RunTrace {
        rows,
        diagnostics: first.diagnostics.clone(),
        validation: first.validation.clone(),
    })
}

/// `z = (1 - eta) x + eta * sample`
pub fn km_local_step(x: &[f64], sample: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(invalid("eta", format!("step {eta} must lie in (0, 1)")));
    }
    Ok(x.iter().zip(sample).map(|(a, b)| (1.0 - eta) * a + eta * b).collect())
}

/// Read-only view handed to observers after every iteration.
pub struct StepView<'a> {
    /// Iteration index of the state just produced (`t + 1`).
    pub t: usize,
    pub communicated: bool,
    pub x: &'a [Vec<f64>],
    pub z: &'a [Vec<f64>],
    /// `replicas[h][k]` is holder `h`'s copy of `xhat_{holders[h][k]}`.
    pub replicas: &'a [Vec<Vec<f64>>],
    pub held: &'a [Vec<usize>],
}

/// Per-agent mutable state.
struct Network {
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    /// For holder `h`: the agents whose estimate it stores (itself first).
    held: Vec<Vec<usize>>,
    replicas: Vec<Vec<Vec<f64>>>,
    /// Agents holding a copy of `xhat_i`, with the slot index in their list.
    holders: Vec<Vec<(usize, usize)>>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Network {
    fn new(cfg: &RunConfig, x0: Vec<Vec<f64>>) -> Self {
        let agents = x0.len();
        let neighbors: Vec<Vec<(usize, f64)>> = (0..agents)
            .map(|i| {
                cfg.mixing
                    .neighbors(i)
                    .into_iter()
                    .map(|j| (j, cfg.mixing.weight(i, j)))
                    .collect()
            })
            .collect();
        let held: Vec<Vec<usize>> = (0..agents)
            .map(|h| std::iter::once(h).chain(neighbors[h].iter().map(|&(j, _)| j)).collect())
            .collect();
        let mut holders = vec![Vec::new(); agents];
        for (h, list) in held.iter().enumerate() {
            for (slot, &j) in list.iter().enumerate() {
                holders[j].push((h, slot));
            }
        }
        let replicas = held
            .iter()
            .map(|list| list.iter().map(|&j| x0[j].clone()).collect())
            .collect();
        Self {
            z: x0.clone(),
            x: x0,
            held,
            replicas,
            holders,
            neighbors,
        }
    }

    fn replica_consistent(&self) -> bool {
        self.holders.iter().all(|hs| {
            let (h0, s0) = hs[0];
            let reference = &self.replicas[h0][s0];
            hs.iter().all(|&(h, s)| self.replicas[h][s] == *reference)
        })
    }

    fn view(&self, t: usize, communicated: bool) -> StepView<'_> {
        StepView {
            t,
            communicated,
            x: &self.x,
            z: &self.z,
            replicas: &self.replicas,
            held: &self.held,
        }
    }
}

fn initial_states(cfg: &RunConfig) -> Vec<Vec<f64>> {
    let (agents, n) = (cfg.global.n_agents(), cfg.global.dim());
    match cfg.x0 {
        X0Policy::Zero => vec![vec![0.0; n]; agents],
        X0Policy::RandomBall { radius } => (0..agents)
            .map(|i| {
                let mut rng = StreamKey::new(cfg.master_seed, Purpose::Init, i, 0).rng();
                (0..n).map(|_| radius * rng.random_range(-1.0..=1.0)).collect()
            })
            .collect(),
    }
}

struct Metrics {
    tx: Vec<f64>,
    scratch: Vec<f64>,
}

impl Metrics {
    fn row(&mut self, cfg: &RunConfig, x: &[Vec<f64>], t: usize, bits: u64, rounds: usize) -> TraceRow {
        let agents = x.len() as f64;
        let n = cfg.global.dim();
        let mut mean = vec![0.0; n];
        for xi in x {
            for (m, v) in mean.iter_mut().zip(xi) {
                *m += v / agents;
            }
        }
        let mut residual = 0.0;
        let mut consensus = 0.0;
        let mut dist = 0.0;
        for xi in x {
            cfg.global.apply_into(xi, &mut self.tx, &mut self.scratch);
            residual += xi.iter().zip(&self.tx).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            consensus += xi.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            if let Some(xs) = &cfg.fixed_point {
                dist += xi.iter().zip(xs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        TraceRow {
            t,
            residual: residual / agents,
            consensus_error: consensus,
            dist_to_fixpoint: if cfg.fixed_point.is_some() { dist / agents } else { f64::NAN },
            bits_cumulative: bits,
            comm_rounds: rounds,
            eta_t: cfg.step.eta(t),
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunTrace> {
    run_with_observer(cfg, |_| {})
}

/// Runs the iteration for `t = 0..T` and calls `observe` after every step.
pub fn run_with_observer<F>(cfg: &RunConfig, mut observe: F) -> Result<RunTrace>
where
    F: FnMut(&StepView<'_>),
{
    cfg.validate()?;
    let agents = cfg.global.n_agents();
    let n = cfg.global.dim();
    let mask = cfg.schedule.mask();
    let gamma = cfg.consensus.gamma;
    let psi = cfg.consensus.psi;
    let bound = cfg.global.box_bound();

    let mut net = Network::new(cfg, initial_states(cfg));
    let mut metrics = Metrics {
        tx: vec![0.0; n],
        scratch: vec![0.0; n],
    };
    let mut trace = RunTrace {
        rows: Vec::with_capacity(cfg.horizon + 1),
        diagnostics: Diagnostics::default(),
        validation: cfg.validation.clone(),
    };
    let mut bits: u64 = 0;
    let mut rounds = 0usize;
    trace.rows.push(metrics.row(cfg, &net.x, 0, bits, rounds));

    let mut sample = vec![0.0; n];
    let mut decoded = vec![0.0; n];
    let mut innovation = vec![0.0; n];
    let mut new_x = vec![vec![0.0; n]; agents];

    for t in 0..cfg.horizon {
        let eta = cfg.step.eta(t);
        for i in 0..agents {
            let mut rng = StreamKey::new(cfg.master_seed, Purpose::Oracle, i, t).rng();
            cfg.oracle
                .sample_into(&cfg.global.locals()[i], &net.x[i], &mut rng, &mut sample)?;
            for k in 0..n {
                net.z[i][k] = (1.0 - eta) * net.x[i][k] + eta * sample[k];
            }
        }

        let communicate = mask[t + 1];
        if communicate {
            let s = cfg.scale(t);
            // consensus on the old estimates; slot 0 is the agent's own copy
            for i in 0..agents {
                let own = &net.replicas[i][0];
                for k in 0..n {
                    let mut acc = 0.0;
                    for (slot, &(_, w)) in net.neighbors[i].iter().enumerate() {
                        acc += w * (net.replicas[i][slot + 1][k] - own[k]);
                    }
                    new_x[i][k] = net.z[i][k] + gamma * acc;
                }
            }
            std::mem::swap(&mut net.x, &mut new_x);

            for i in 0..agents {
                let own = &net.replicas[i][0];
                for k in 0..n {
                    innovation[k] = net.x[i][k] - own[k];
                }
                let mut rng = StreamKey::new(cfg.master_seed, Purpose::Compressor, i, t).rng();
                let msg = cfg.compressor.scaled_compress(&innovation, s, &mut rng)?;
                cfg.compressor.decode_into(&msg, &mut decoded);
                for v in decoded.iter_mut() {
                    *v *= psi * s;
                }
                for &(h, slot) in &net.holders[i] {
                    for (r, d) in net.replicas[h][slot].iter_mut().zip(&decoded) {
                        *r += d;
                    }
                }
                let degree = net.neighbors[i].len() as u64;
                bits += msg.bits * degree;
                let d = &mut trace.diagnostics;
                d.messages += 1;
                d.bits_per_message_total += msg.bits;
                d.index_bits_per_edge_total += msg.index_bits * degree;
                d.int_overflows += msg.overflow as u64;
            }
            rounds += 1;

            let mut xbar = vec![0.0; n];
            let mut zbar = vec![0.0; n];
            for i in 0..agents {
                for k in 0..n {
                    xbar[k] += net.x[i][k] / agents as f64;
                    zbar[k] += net.z[i][k] / agents as f64;
                }
            }
            let drift = xbar.iter().zip(&zbar).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let zn = zbar.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = &mut trace.diagnostics;
            d.max_mean_drift = d.max_mean_drift.max(drift / (1.0 + zn));
            if !net.replica_consistent() {
                d.replica_mismatches += 1;
            }
        } else {
            for i in 0..agents {
                net.x[i].copy_from_slice(&net.z[i]);
            }
        }

        for (i, xi) in net.x.iter().enumerate() {
            if let Some(v) = xi.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD) {
                return Err(Error::Divergence {
                    t: t + 1,
                    reason: format!("agent {i} reached coordinate value {v:e}"),
                    partial: Box::new(trace),
                });
            }
            if xi.iter().any(|v| v.abs() > bound) {
                trace.diagnostics.box_violations += 1;
            }
        }
        trace.rows.push(metrics.row(cfg, &net.x, t + 1, bits, rounds));
        observe(&net.view(t + 1, communicate));
    }
    Ok(trace)
}

/// Thread count from `FPNET_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("FPNET_THREADS").ok()?.parse().ok().filter(|&k| k > 0)
}

/// Runs `f` inside a rayon pool capped by `FPNET_THREADS`.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap() {
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// One sweep point run under one seed.
#[derive(Debug)]
pub struct SweepOutcome {
    pub label: String,
    pub seed: u64,
    pub result: Result<RunTrace>,
}

/// Runs every `(label, config)` under every seed. Failures are reported per
/// run; results come back in grid-major, seed-minor order.
pub fn run_sweep(points: &[(String, RunConfig)], seeds: &[u64]) -> Result<Vec<SweepOutcome>> {
    if points.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidSize("sweep needs at least one grid point and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    Ok(with_pool(|| {
        jobs.par_iter()
            .map(|&(p, seed)| {
                let (label, base) = &points[p];
                let mut cfg = base.clone();
                cfg.master_seed = seed;
                SweepOutcome {
                    label: label.clone(),
                    seed,
                    result: run(&cfg),
                }
            })
            .collect()
    }))
}

/// Seed-parallel runs of a single configuration.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<RunTrace>> {
    with_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.master_seed = seed;
                run(&c)
            })
            .collect()
    })
}
