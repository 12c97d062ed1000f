//! Property tests for the structural invariants.

use fpnet::compression::{CompressorKind, CompressorSpec};
use fpnet::config::Config;
use fpnet::engine::{run, run_with_observer, X0Policy};
use fpnet::network::{build_graph, metropolis_mixing, Graph, Topology};
use fpnet::rng::{Purpose, StreamKey};
use fpnet::scheduling::{make_schedule, CommPolicy, StepSchedule};
use proptest::prelude::*;

fn topology() -> impl Strategy<Value = Topology> {
    prop_oneof![
        Just(Topology::Complete),
        Just(Topology::Ring),
        Just(Topology::Path),
        (0.2f64..0.9, any::<u64>()).prop_map(|(p, seed)| Topology::RandomConnected { p, seed }),
    ]
}

fn policy() -> impl Strategy<Value = CommPolicy> {
    prop_oneof![
        Just(CommPolicy::EveryStep),
        (1usize..20).prop_map(|h| CommPolicy::FixedPeriod { h }),
        (1usize..20, any::<u64>()).prop_map(|(h_max, seed)| CommPolicy::RandomGap { h_max, seed }),
        (1usize..20).prop_map(|h_max| CommPolicy::FrontLoaded { h_max }),
    ]
}

fn compressor() -> impl Strategy<Value = CompressorKind> {
    prop_oneof![
        (1u32..6).prop_map(|l_bits| CompressorKind::C1InfQuantizer { l_bits }),
        (0.01f64..2.0).prop_map(|delta_step| CompressorKind::C2Uniform { delta_step }),
        (0.1f64..1.0, 0.01f64..2.0)
            .prop_map(|(p_keep, delta_step)| CompressorKind::C3SparsifyQuantize { p_keep, delta_step }),
        Just(CompressorKind::Identity),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metropolis_is_symmetric_doubly_stochastic(topo in topology(), n in 2usize..16) {
        let w = metropolis_mixing(&build_graph(&topo, n).unwrap()).unwrap();
        let m = w.weights();
        for i in 0..n {
            prop_assert!((m.row(i).sum() - 1.0).abs() <= 1e-12);
            prop_assert!((m.column(i).sum() - 1.0).abs() <= 1e-12);
            for j in 0..n {
                prop_assert!((m[(i, j)] - m[(j, i)]).abs() <= 1e-12);
                prop_assert!(m[(i, j)] >= 0.0);
            }
        }
        prop_assert!(w.kappa() > 0.0 && w.kappa() <= 1.0 + 1e-12);
        prop_assert!(w.alpha() >= 0.0 && w.alpha() <= 2.0 + 1e-12);
    }

    #[test]
    fn random_graphs_are_connected(p in 0.05f64..1.0, seed in any::<u64>(), n in 2usize..20) {
        // sparse draws may give up, but never hand back a disconnected graph
        match build_graph(&Topology::RandomConnected { p, seed }, n) {
            Ok(g) => prop_assert!(g.is_connected()),
            Err(e) => prop_assert!(matches!(e, fpnet::Error::Disconnected(_)), "{e}"),
        }
    }

    #[test]
    fn schedule_gaps_bounded(pol in policy(), horizon in 1usize..3000) {
        let s = make_schedule(&pol, horizon).unwrap();
        let idx = s.indices();
        prop_assert_eq!(idx[0], 1);
        prop_assert!(idx.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= pol.h_max()));
        prop_assert!(horizon - idx[idx.len() - 1] < pol.h_max());
        prop_assert!(*idx.last().unwrap() <= horizon);
        let mask = s.mask();
        prop_assert_eq!(mask.iter().filter(|&&b| b).count(), idx.len());
    }

    #[test]
    fn steps_positive_and_nonincreasing(a in 1.0f64..1e4, b in 1e-3f64..10.0, t in 0usize..100_000) {
        for s in [StepSchedule::inv_sqrt(a, b), StepSchedule::inv_linear(a, b)] {
            prop_assert!(s.eta(t) > 0.0);
            prop_assert!(s.eta(t + 1) <= s.eta(t));
        }
    }

    #[test]
    fn decode_is_deterministic_and_bits_match(
        kind in compressor(),
        dim in 1usize..64,
        seed in any::<u64>(),
        scale in 1e-3f64..10.0,
    ) {
        let spec = CompressorSpec::new(kind.clone(), dim).unwrap();
        let mut r = StreamKey::new(seed, Purpose::Sampling, 0, 0).rng();
        let x: Vec<f64> = (0..dim).map(|_| scale * rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let key = StreamKey::new(seed, Purpose::Compressor, 0, 0);
        let m1 = spec.compress(&x, &mut key.rng()).unwrap();
        let m2 = spec.compress(&x, &mut key.rng()).unwrap();
        prop_assert_eq!(&m1, &m2);
        prop_assert_eq!(spec.decode(&m1), spec.decode(&m2));
        match kind {
            CompressorKind::C3SparsifyQuantize { .. } => {
                prop_assert_eq!(m1.bits % u64::from(spec.int_bits()), 0);
                prop_assert_eq!(m1.index_bits, m1.bits / u64::from(spec.int_bits()) * spec.index_width());
            }
            _ => prop_assert_eq!(m1.bits as f64, spec.bit_cost()),
        }
        if kind == CompressorKind::Identity {
            prop_assert_eq!(spec.decode(&m1), x);
        }
    }

    #[test]
    fn scaled_compression_of_zero_is_zero(kind in compressor(), dim in 1usize..40, s in 1e-3f64..2.0) {
        let spec = CompressorSpec::new(kind, dim).unwrap();
        let msg = spec.scaled_compress(&vec![0.0; dim], s, &mut StreamKey::new(1, Purpose::Compressor, 0, 0).rng()).unwrap();
        prop_assert!(spec.decode(&msg).iter().all(|&v| v == 0.0));
    }
}

const BASE: &str = r#"
[run]
id = "prop"
horizon = 60
seed = 1

[network]
n_agents = 6
topology = { kind = "ring" }

[operators]
suite = "nonconvex"
dim = 4

[oracle]
mechanism = { kind = "gradient_noise", level = 0.1 }

[compression]
compressor = { kind = "c1_inf_quantizer", l_bits = 2 }

[schedule]
kind = "fixed_period"
h = 3

[step]
kind = "inv_sqrt"
a = 80.0
b = 0.8

[consensus]
gamma = 0.7
psi = "auto"
"#;

fn engine_config(topo: Topology, pol: CommPolicy, kind: CompressorKind, seed: u64) -> fpnet::engine::RunConfig {
    let mut c = Config::from_toml_str(BASE).unwrap();
    c.network.topology = topo;
    c.schedule = pol;
    c.compression.compressor = kind;
    c.run.seed = seed;
    c.run.x0 = X0Policy::RandomBall { radius: 1.0 };
    c.build().unwrap().run
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn engine_preserves_mean_and_replicas(
        topo in topology(),
        pol in policy(),
        kind in compressor(),
        seed in any::<u64>(),
    ) {
        let cfg = engine_config(topo, pol, kind, seed);
        let agents = cfg.global.n_agents();
        let mut worst_drift: f64 = 0.0;
        let mut mismatch = false;
        let result = run_with_observer(&cfg, |v| {
            if v.communicated {
                for k in 0..v.x[0].len() {
                    let xm: f64 = v.x.iter().map(|r| r[k]).sum::<f64>() / agents as f64;
                    let zm: f64 = v.z.iter().map(|r| r[k]).sum::<f64>() / agents as f64;
                    worst_drift = worst_drift.max((xm - zm).abs() / (1.0 + zm.abs()));
                }
            }
            for (h, list) in v.held.iter().enumerate() {
                for (slot, &j) in list.iter().enumerate() {
                    mismatch |= v.replicas[h][slot] != v.replicas[j][0];
                }
            }
        });
        prop_assert!(worst_drift <= 1e-12, "drift {}", worst_drift);
        prop_assert!(!mismatch);
        let trace = match result {
            Ok(t) => t,
            Err(fpnet::Error::Divergence { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(trace.rows.len(), cfg.horizon + 1);
        let last = trace.last().unwrap();
        prop_assert_eq!(last.comm_rounds, cfg.schedule.len());
        prop_assert!(trace.rows.windows(2).all(|w| w[1].bits_cumulative >= w[0].bits_cumulative));
        prop_assert!(trace.rows.iter().all(|r| r.consensus_error >= 0.0 && r.residual >= 0.0));
    }

    #[test]
    fn reruns_are_byte_identical(topo in topology(), pol in policy(), kind in compressor(), seed in any::<u64>()) {
        let cfg = engine_config(topo, pol, kind, seed);
        let csv = |r: fpnet::Result<fpnet::engine::RunTrace>| match r {
            Ok(t) => t.to_csv_string(),
            Err(fpnet::Error::Divergence { partial, .. }) => partial.to_csv_string(),
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(csv(run(&cfg)), csv(run(&cfg)));
    }
}

#[test]
fn single_agent_has_no_consensus_error() {
    let g = Graph::from_edges(1, []).unwrap();
    let w = metropolis_mixing(&g).unwrap();
    assert_eq!(w.kappa(), 1.0);
    assert_eq!(w.weights()[(0, 0)], 1.0);
}
