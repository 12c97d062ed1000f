//! Unified compressor family, dynamic scaling and bit accounting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::report::{Check, Report, Status};
use crate::rng::{seeded, Purpose, StreamKey};

pub const DEFAULT_FLOAT_BITS: u32 = 64;
pub const DEFAULT_INT_BITS: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorKind {
    /// l-bit infinity-norm quantizer with uniform dither.
    C1InfQuantizer { l_bits: u32 },
    /// Deterministic rounding to the lattice `delta * Z`.
    C2Uniform { delta_step: f64 },
    /// Bernoulli(p) sparsification followed by dithered rounding.
    C3SparsifyQuantize { p_keep: f64, delta_step: f64 },
    Identity,
}

/// A compressor with its certified constants `(r, phi, delta^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressorSpec {
    kind: CompressorKind,
    dim: usize,
    r: f64,
    phi: f64,
    delta_sq: f64,
    float_bits: u32,
    int_bits: u32,
}

/// Integer payload plus at most one scalar, so decoding is exact.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    /// `value_k = norm / 2^(l-1) * levels_k`
    InfQuantized { norm: f64, levels: Vec<i64> },
    /// `value_k = delta * ints_k`
    Lattice { ints: Vec<i64> },
    /// Only kept coordinates are carried.
    Sparse { indices: Vec<u32>, ints: Vec<i64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMessage {
    pub payload: Payload,
    /// Payload bits under the kind's cost model.
    pub bits: u64,
    /// Extra bits spent on sparse index transmission.
    pub index_bits: u64,
    /// Number of integers that do not fit in `int_bits` signed bits.
    pub overflow: usize,
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind, dim: usize) -> Result<Self> {
        Self::with_bits(kind, dim, DEFAULT_FLOAT_BITS, DEFAULT_INT_BITS)
    }

    pub fn with_bits(kind: CompressorKind, dim: usize, float_bits: u32, int_bits: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSize("compressor dimension must be positive".into()));
        }
        if int_bits == 0 || int_bits > 63 {
            return Err(invalid("int_bits", format!("{int_bits} must lie in 1..=63")));
        }
        let n = dim as f64;
        let (r, phi, delta_sq) = match kind {
            CompressorKind::C1InfQuantizer { l_bits } => {
                if l_bits == 0 || l_bits > 30 {
                    return Err(invalid("l_bits", format!("{l_bits} must lie in 1..=30")));
                }
                let r = 1.0 + n / 4f64.powi(l_bits as i32);
                (r, 1.0 / r, 0.0)
            }
            CompressorKind::C2Uniform { delta_step } => {
                if !(delta_step > 0.0) {
                    return Err(invalid("delta_step", "must be positive"));
                }
                (1.0, 1.0, n * delta_step * delta_step / 4.0)
            }
            CompressorKind::C3SparsifyQuantize { p_keep, delta_step } => {
                if !(p_keep > 0.0 && p_keep <= 1.0) {
                    return Err(invalid("p_keep", format!("{p_keep} must lie in (0, 1]")));
                }
                if !(delta_step > 0.0) {
                    return Err(invalid("delta_step", "must be positive"));
                }
                (1.0 / p_keep, p_keep, n * p_keep.powi(3) * delta_step * delta_step / 4.0)
            }
            CompressorKind::Identity => (1.0, 1.0, 0.0),
        };
        Ok(Self {
            kind,
            dim,
            r,
            phi,
            delta_sq,
            float_bits,
            int_bits,
        })
    }

    pub fn kind(&self) -> &CompressorKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn phi(&self) -> f64 {
        self.phi
    }
    pub fn delta_sq(&self) -> f64 {
        self.delta_sq
    }
    pub fn float_bits(&self) -> u32 {
        self.float_bits
    }
    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn is_lossless(&self) -> bool {
        matches!(self.kind, CompressorKind::Identity)
    }

    /// Bits per message; expected value for the randomized-support kind.
    pub fn bit_cost(&self) -> f64 {
        let n = self.dim as f64;
        match self.kind {
            CompressorKind::C1InfQuantizer { l_bits } => ((l_bits + 1) as f64) * n + self.float_bits as f64,
            CompressorKind::C2Uniform { .. } => n * self.int_bits as f64,
            CompressorKind::C3SparsifyQuantize { p_keep, .. } => n * self.int_bits as f64 * p_keep,
            CompressorKind::Identity => n * self.float_bits as f64,
        }
    }

    /// Bits needed for one sparse index.
    pub fn index_width(&self) -> u64 {
        (usize::BITS - (self.dim - 1).leading_zeros()) as u64
    }

    fn overflow_count(&self, ints: &[i64]) -> usize {
        let hi = (1i64 << (self.int_bits - 1)) - 1;
        let lo = -(1i64 << (self.int_bits - 1));
        ints.iter().filter(|&&v| v > hi || v < lo).count()
    }

    pub fn compress(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Result<CompressedMessage> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("compressor input is not finite".into()));
        }
        let msg = match self.kind {
            CompressorKind::C1InfQuantizer { l_bits } => {
                let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let levels_scale = (1u64 << (l_bits - 1)) as f64;
                let levels = if norm == 0.0 {
                    vec![0; self.dim]
                } else {
                    x.iter()
                        .map(|&v| {
                            let w: f64 = rng.random();
                            let mag = (levels_scale * v.abs() / norm + w).floor() as i64;
                            if v < 0.0 {
                                -mag
                            } else {
                                mag
                            }
                        })
                        .collect()
                };
                CompressedMessage {
                    payload: Payload::InfQuantized { norm, levels },
                    bits: self.bit_cost() as u64,
                    index_bits: 0,
                    overflow: 0,
                }
            }
            CompressorKind::C2Uniform { delta_step } => {
                let ints: Vec<i64> = x.iter().map(|&v| (v / delta_step + 0.5).floor() as i64).collect();
                let overflow = self.overflow_count(&ints);
                CompressedMessage {
                    payload: Payload::Lattice { ints },
                    bits: self.bit_cost() as u64,
                    index_bits: 0,
                    overflow,
                }
            }
            CompressorKind::C3SparsifyQuantize { p_keep, delta_step } => {
                let mut indices = Vec::new();
                let mut ints = Vec::new();
                for (k, &v) in x.iter().enumerate() {
                    let keep = rng.random::<f64>() < p_keep;
                    let dither: f64 = rng.random::<f64>() - 0.5;
                    if keep {
                        indices.push(k as u32);
                        ints.push((v / p_keep / delta_step + dither + 0.5).floor() as i64);
                    }
                }
                let overflow = self.overflow_count(&ints);
                let kept = indices.len() as u64;
                CompressedMessage {
                    bits: kept * self.int_bits as u64,
                    index_bits: kept * self.index_width(),
                    payload: Payload::Sparse { indices, ints },
                    overflow,
                }
            }
            CompressorKind::Identity => CompressedMessage {
                payload: Payload::Dense(x.to_vec()),
                bits: self.bit_cost() as u64,
                index_bits: 0,
                overflow: 0,
            },
        };
        Ok(msg)
    }

    /// Writes the compressor output vector `C(x)` into `out`.
    pub fn decode_into(&self, msg: &CompressedMessage, out: &mut [f64]) {
        match (&msg.payload, &self.kind) {
            (Payload::Dense(v), _) => out.copy_from_slice(v),
            (Payload::InfQuantized { norm, levels }, CompressorKind::C1InfQuantizer { l_bits }) => {
                let unit = norm / (1u64 << (l_bits - 1)) as f64;
                for (o, &l) in out.iter_mut().zip(levels) {
                    *o = unit * l as f64;
                }
            }
            (Payload::Lattice { ints }, CompressorKind::C2Uniform { delta_step }) => {
                for (o, &q) in out.iter_mut().zip(ints) {
                    *o = delta_step * q as f64;
                }
            }
            (Payload::Sparse { indices, ints }, CompressorKind::C3SparsifyQuantize { delta_step, .. }) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (&k, &q) in indices.iter().zip(ints) {
                    out[k as usize] = delta_step * q as f64;
                }
            }
            _ => panic!("message payload does not belong to this compressor"),
        }
    }

    pub fn decode(&self, msg: &CompressedMessage) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.decode_into(msg, &mut out);
        out
    }

    /// Encodes `C(y / s_t)`; the receiver reconstitutes `s_t * decode(msg)`.
    pub fn scaled_compress(&self, y: &[f64], s_t: f64, rng: &mut ChaCha8Rng) -> Result<CompressedMessage> {
        if !(s_t > 0.0) || !s_t.is_finite() {
            return Err(invalid("s_t", format!("invalid scale {s_t}: must be positive")));
        }
        let scaled: Vec<f64> = y.iter().map(|v| v / s_t).collect();
        self.compress(&scaled, rng)
    }
}

/// Distribution of test vectors for certification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VectorSampler {
    /// i.i.d. `N(0, scale^2)` coordinates.
    Gaussian { scale: f64 },
    /// i.i.d. uniform on `[-scale, scale]`.
    UniformBox { scale: f64 },
    /// Gaussian on a random support of the given fraction, zero elsewhere.
    Sparse { scale: f64, density: f64 },
}

impl VectorSampler {
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            VectorSampler::Gaussian { scale } => (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect(),
            VectorSampler::UniformBox { scale } => (0..n).map(|_| scale * rng.random_range(-1.0..=1.0)).collect(),
            VectorSampler::Sparse { scale, density } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    if rng.random::<f64>() < density {
                        scale * z
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }
}

/// Mean and standard error of `||C(x)/r - x||^2` over `n_trials` draws.
pub fn unified_error(spec: &CompressorSpec, x: &[f64], n_trials: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut out = vec![0.0; x.len()];
    for _ in 0..n_trials {
        let msg = spec.compress(x, rng)?;
        spec.decode_into(&msg, &mut out);
        let e: f64 = out.iter().zip(x).map(|(c, v)| (c / spec.r - v).powi(2)).sum();
        s1 += e;
        s2 += e * e;
    }
    let k = n_trials as f64;
    let mean = s1 / k;
    let var = (s2 / k - mean * mean).max(0.0);
    Ok((mean, (var / k).sqrt()))
}

/// Monte-Carlo check of `E||C(x)/r - x||^2 <= (1 - phi)||x||^2 + delta^2`
/// at `n_points` sampled vectors, with 3-sigma slack.
pub fn certify_compressor(
    spec: &CompressorSpec,
    n_trials: usize,
    sampler: VectorSampler,
    n_points: usize,
    seed: u64,
) -> Result<Report> {
    if n_trials < 10_000 {
        return Err(invalid("n_trials", "certification needs at least 10^4 trials"));
    }
    let mut vrng = seeded(seed, Purpose::Sampling);
    let mut worst: Option<Check> = None;
    for pt in 0..n_points {
        let x = sampler.sample(spec.dim, &mut vrng);
        let mut crng = StreamKey::new(seed, Purpose::Compressor, 0, pt).rng();
        let (mean, se) = unified_error(spec, &x, n_trials, &mut crng)?;
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        let rhs = (1.0 - spec.phi) * norm_sq + spec.delta_sq;
        let c = Check::upper("unified_inequality", mean, rhs + 3.0 * se, Status::Fail);
        if worst.as_ref().is_none_or(|w| c.margin < w.margin) {
            worst = Some(c);
        }
    }
    let mut report = Report::new("compressor");
    if let Some(c) = worst {
        report.push(c.with_note(format!("worst of {n_points} points, {sampler:?}")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        seeded(1, Purpose::Compressor)
    }

    #[test]
    fn c2_rounds_to_nearest() {
        let s = CompressorSpec::new(CompressorKind::C2Uniform { delta_step: 1.0 }, 2).unwrap();
        let m = s.compress(&[0.2, 0.6], &mut rng()).unwrap();
        assert_eq!(s.decode(&m), vec![0.0, 1.0]);
        let lattice = [3.0, -2.0];
        let m = s.compress(&lattice, &mut rng()).unwrap();
        assert_eq!(s.decode(&m), lattice.to_vec());
    }

    #[test]
    fn c1_lattice_point_recovered() {
        // with |x| = ||x||_inf every dither in [0,1) floors to the top level
        let s = CompressorSpec::new(CompressorKind::C1InfQuantizer { l_bits: 2 }, 2).unwrap();
        for seed in 0..20 {
            let m = s.compress(&[1.0, -1.0], &mut seeded(seed, Purpose::Compressor)).unwrap();
            assert_eq!(s.decode(&m), vec![1.0, -1.0]);
        }
    }

    #[test]
    fn c1_zero_vector() {
        let s = CompressorSpec::new(CompressorKind::C1InfQuantizer { l_bits: 2 }, 30).unwrap();
        let m = s.compress(&[0.0; 30], &mut rng()).unwrap();
        assert_eq!(s.decode(&m), vec![0.0; 30]);
        assert_eq!(m.bits, 154);
    }

    #[test]
    fn constants_and_costs() {
        let c1 = CompressorSpec::new(CompressorKind::C1InfQuantizer { l_bits: 2 }, 30).unwrap();
        assert!((c1.r() - 2.875).abs() < 1e-15);
        assert!((c1.phi() - 1.0 / 2.875).abs() < 1e-15);
        assert_eq!(c1.bit_cost(), 154.0);
        let c2 = CompressorSpec::new(CompressorKind::C2Uniform { delta_step: 1.0 }, 30).unwrap();
        assert_eq!((c2.r(), c2.phi(), c2.delta_sq()), (1.0, 1.0, 7.5));
        assert_eq!(c2.bit_cost(), 240.0);
        let c3 = CompressorSpec::new(
            CompressorKind::C3SparsifyQuantize {
                p_keep: 0.75,
                delta_step: 1.0,
            },
            30,
        )
        .unwrap();
        assert!((c3.r() - 4.0 / 3.0).abs() < 1e-15);
        assert!((c3.delta_sq() - 30.0 * 0.421875 / 4.0).abs() < 1e-12);
        assert_eq!(c3.bit_cost(), 180.0);
        assert_eq!(c3.index_width(), 5);
    }

    #[test]
    fn c3_with_full_keep_is_dithered_rounding() {
        let s = CompressorSpec::new(
            CompressorKind::C3SparsifyQuantize {
                p_keep: 1.0,
                delta_step: 0.5,
            },
            8,
        )
        .unwrap();
        let mut vrng = seeded(7, Purpose::Sampling);
        for trial in 0..100 {
            let x = VectorSampler::Gaussian { scale: 2.0 }.sample(8, &mut vrng);
            let mut a = StreamKey::new(7, Purpose::Compressor, 0, trial).rng();
            let mut b = a.clone();
            let got = s.decode(&s.compress(&x, &mut a).unwrap());
            let want: Vec<f64> = x
                .iter()
                .map(|v| {
                    let _keep: f64 = b.random();
                    let d: f64 = b.random::<f64>() - 0.5;
                    0.5 * (v / 0.5 + d).round()
                })
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn scaled_compress_unit_scale_and_identity() {
        let s = CompressorSpec::new(CompressorKind::C1InfQuantizer { l_bits: 3 }, 4).unwrap();
        let y = [0.3, -1.2, 0.7, 0.0];
        let a = s.compress(&y, &mut rng()).unwrap();
        let b = s.scaled_compress(&y, 1.0, &mut rng()).unwrap();
        assert_eq!(a, b);
        let id = CompressorSpec::new(CompressorKind::Identity, 4).unwrap();
        let m = id.scaled_compress(&y, 0.125, &mut rng()).unwrap();
        let back: Vec<f64> = id.decode(&m).iter().map(|v| 0.125 * v).collect();
        assert_eq!(back, y.to_vec());
        assert!(matches!(
            s.scaled_compress(&y, 0.0, &mut rng()),
            Err(Error::InvalidParameter { name: "s_t", .. })
        ));
    }

    #[test]
    fn c2_overflow_is_counted() {
        let s = CompressorSpec::with_bits(CompressorKind::C2Uniform { delta_step: 1.0 }, 2, 64, 4).unwrap();
        let m = s.compress(&[7.2, 8.0], &mut rng()).unwrap();
        assert_eq!(m.overflow, 1);
    }
}
