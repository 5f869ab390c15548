//! Generation-length predictors and uncertainty-aware inflation.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::BucketConfig;
use crate::workload::Request;

/// `NoisyOracle` reports `u = min(1, U_SCALE * sigma_rel)`: a relative noise
/// of 0.5 or more is treated as fully uncertain.
pub const U_SCALE: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("length mismatch: {predictions} predictions vs {realized} realized lengths")]
    LengthMismatch { predictions: usize, realized: usize },
    #[error("invalid predictor parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub l_hat: u32,
    /// Uncertainty in `[0, 1]`.
    pub u: f64,
    /// Inflated effective length; equals `l_hat` until [`Prediction::inflated`].
    pub l_eff: u32,
}

impl Prediction {
    pub fn new(l_hat: u32, u: f64) -> Self {
        Self {
            l_hat,
            u: u.clamp(0.0, 1.0),
            l_eff: l_hat,
        }
    }

    pub fn inflated(mut self, alpha: f64) -> Self {
        self.l_eff = inflate(&self, alpha);
        self
    }
}

/// `ceil(l_hat * (1 + alpha * u))`. Products within a relative 1e-9 of an
/// integer are snapped to it first, so float noise in `alpha * u` cannot add
/// a spurious token.
pub fn inflate(p: &Prediction, alpha: f64) -> u32 {
    let x = p.l_hat as f64 * (1.0 + alpha * p.u);
    let nearest = x.round();
    let v = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    if v >= u32::MAX as f64 {
        u32::MAX
    } else {
        v as u32
    }
}

/// Fraction of requests whose predicted bucket (by `l_eff`) matches the
/// bucket of the realized length. Lengths beyond every regular bound share
/// one overflow class. Empty input scores 1.0.
pub fn bucket_accuracy(
    predictions: &[Prediction],
    realized: &[u32],
    config: &BucketConfig,
) -> Result<f64, PredictorError> {
    if predictions.len() != realized.len() {
        return Err(PredictorError::LengthMismatch {
            predictions: predictions.len(),
            realized: realized.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(1.0);
    }
    let hits = predictions
        .iter()
        .zip(realized)
        .filter(|(p, &r)| config.class_index(p.l_eff) == config.class_index(r))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Predictor selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictorKind {
    Oracle,
    NoisyOracle {
        sigma_rel: f64,
        #[serde(default)]
        bias: f64,
    },
    OnlineHistogram {
        /// Inclusive lower edges of prompt-length bins; must start at 1.
        #[serde(default = "default_bin_edges")]
        bin_edges: Vec<u32>,
        /// Most recent observations kept per bin.
        #[serde(default = "default_bin_window")]
        bin_window: usize,
    },
}

pub fn default_bin_edges() -> Vec<u32> {
    (0..=16).map(|k| 1u32 << k).collect()
}

fn default_bin_window() -> usize {
    512
}

impl PredictorKind {
    pub fn validate(&self) -> Result<(), PredictorError> {
        match self {
            PredictorKind::Oracle => Ok(()),
            PredictorKind::NoisyOracle { sigma_rel, bias } => {
                if !(sigma_rel.is_finite() && *sigma_rel >= 0.0) {
                    return Err(PredictorError::InvalidParams(format!("sigma_rel must be >= 0 (got {sigma_rel})")));
                }
                if !bias.is_finite() {
                    return Err(PredictorError::InvalidParams(format!("bias must be finite (got {bias})")));
                }
                Ok(())
            }
            PredictorKind::OnlineHistogram { bin_edges, bin_window } => {
                if bin_edges.first() != Some(&1) {
                    return Err(PredictorError::InvalidParams("bin_edges must start at 1".into()));
                }
                if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(PredictorError::InvalidParams("bin_edges must be strictly increasing".into()));
                }
                if *bin_window == 0 {
                    return Err(PredictorError::InvalidParams("bin_window must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn LengthPredictor>, PredictorError> {
        self.validate()?;
        Ok(match self {
            PredictorKind::Oracle => Box::new(OraclePredictor),
            PredictorKind::NoisyOracle { sigma_rel, bias } => Box::new(NoisyOracle::new(*sigma_rel, *bias, seed)?),
            PredictorKind::OnlineHistogram { bin_edges, bin_window } => {
                Box::new(OnlineHistogram::new(bin_edges.clone(), *bin_window))
            }
        })
    }
}

/// Per-request length estimator. `predict` never mutates; realized lengths
/// come back through `observe`.
pub trait LengthPredictor: Send {
    fn predict(&self, request: &Request) -> Prediction;

    fn observe(&mut self, _request: &Request, _realized_len: u32) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl LengthPredictor for OraclePredictor {
    fn predict(&self, request: &Request) -> Prediction {
        Prediction::new(request.true_gen_len, 0.0)
    }
}

/// Oracle with multiplicative Gaussian error `eps ~ N(bias, sigma_rel)`.
/// The error for a request depends only on the seed and the request id.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    noise: Normal<f64>,
    u: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(sigma_rel: f64, bias: f64, seed: u64) -> Result<Self, PredictorError> {
        let noise = Normal::new(bias, sigma_rel).map_err(|e| PredictorError::InvalidParams(e.to_string()))?;
        Ok(Self {
            noise,
            u: (U_SCALE * sigma_rel).min(1.0),
            seed,
        })
    }
}

fn mix(seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ id.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl LengthPredictor for NoisyOracle {
    fn predict(&self, request: &Request) -> Prediction {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, request.id));
        let eps = self.noise.sample(&mut rng);
        let est = (request.true_gen_len as f64 * (1.0 + eps)).round();
        let l_hat = if est < 1.0 {
            1
        } else if est >= u32::MAX as f64 {
            u32::MAX
        } else {
            est as u32
        };
        Prediction::new(l_hat, self.u)
    }
}

/// Bounded sample of recent lengths with order statistics.
#[derive(Debug, Clone)]
struct RecentLengths {
    cap: usize,
    xs: VecDeque<u32>,
}

impl RecentLengths {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            xs: VecDeque::new(),
        }
    }

    fn push(&mut self, x: u32) {
        if self.xs.len() == self.cap {
            self.xs.pop_front();
        }
        self.xs.push_back(x);
    }

    fn sorted(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.xs.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// (median, uncertainty), or `None` when empty. Even counts average the
    /// middle pair, rounding half up. Uncertainty is the nearest-rank
    /// interquartile range over the median, clamped to `[0, 1]`.
    fn summary(&self) -> Option<(u32, f64)> {
        if self.xs.is_empty() {
            return None;
        }
        let v = self.sorted();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            ((v[n / 2 - 1] as u64 + v[n / 2] as u64).div_ceil(2)) as u32
        };
        let rank = |num: usize| (num * n).div_ceil(4).max(1) - 1;
        let iqr = (v[rank(3)] - v[rank(1)]) as f64;
        let u = (iqr / median.max(1) as f64).clamp(0.0, 1.0);
        Some((median, u))
    }
}

/// Running per-bin medians keyed by prompt length.
#[derive(Debug, Clone)]
pub struct OnlineHistogram {
    edges: Vec<u32>,
    bins: Vec<RecentLengths>,
    global: RecentLengths,
}

impl OnlineHistogram {
    pub fn new(edges: Vec<u32>, window: usize) -> Self {
        let bins = edges.iter().map(|_| RecentLengths::new(window)).collect();
        Self {
            edges,
            bins,
            global: RecentLengths::new(window),
        }
    }

    fn bin_of(&self, prompt_len: u32) -> usize {
        self.edges.partition_point(|&e| e <= prompt_len).saturating_sub(1)
    }

    /// Median of the bin that `prompt_len` falls into, if it has samples.
    pub fn bin_median(&self, prompt_len: u32) -> Option<u32> {
        self.bins[self.bin_of(prompt_len)].summary().map(|(m, _)| m)
    }
}

impl LengthPredictor for OnlineHistogram {
    fn predict(&self, request: &Request) -> Prediction {
        match self.bins[self.bin_of(request.prompt_len)].summary() {
            Some((median, u)) => Prediction::new(median, u),
            // cold bin: global median, fully uncertain
            None => Prediction::new(self.global.summary().map_or(0, |(m, _)| m), 1.0),
        }
    }

    fn observe(&mut self, request: &Request, realized_len: u32) {
        let b = self.bin_of(request.prompt_len);
        self.bins[b].push(realized_len);
        self.global.push(realized_len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(id: u64, prompt: u32, gen: u32) -> Request {
        Request::new(id, 0.0, prompt, gen)
    }

    fn pred(l_hat: u32, u: f64) -> Prediction {
        Prediction::new(l_hat, u)
    }

    #[test]
    fn inflate_examples() {
        assert_eq!(inflate(&pred(100, 0.0), 7.5), 100);
        assert_eq!(inflate(&pred(100, 0.5), 0.1), 105);
        assert_eq!(inflate(&pred(0, 1.0), 1.0), 0);
        assert_eq!(inflate(&pred(100, 0.3), 0.1), 103);
        assert_eq!(inflate(&pred(10, 0.5), 0.1), 11);
    }

    #[test]
    fn inflate_exact_on_twentieths_grid() {
        // Rational oracle: l * (1 + (k/20)(m/20)) = l * (400 + k m) / 400.
        for l in [0u32, 1, 7, 100, 333, 4096] {
            for k in 0..=20u64 {
                for m in 0..=40u64 {
                    let want = (l as u64 * (400 + k * m)).div_ceil(400) as u32;
                    let p = pred(l, k as f64 * 0.05);
                    assert_eq!(inflate(&p, m as f64 * 0.05), want, "l={l} u={k}/20 alpha={m}/20");
                }
            }
        }
    }

    #[test]
    fn oracle_and_zero_noise() {
        let r = req(3, 10, 200);
        assert_eq!(OraclePredictor.predict(&r), pred(200, 0.0));
        let n = NoisyOracle::new(0.0, 0.0, 99).unwrap();
        assert_eq!(n.predict(&r), pred(200, 0.0));
    }

    #[test]
    fn noisy_oracle_is_deterministic_and_bounded() {
        let n = NoisyOracle::new(0.3, 0.0, 5).unwrap();
        let r = req(17, 10, 200);
        assert_eq!(n.predict(&r), n.predict(&r));
        assert!((n.predict(&r).u - 0.6).abs() < 1e-12);
        let wild = NoisyOracle::new(5.0, -3.0, 5).unwrap();
        for id in 0..200 {
            let p = wild.predict(&req(id, 1, 10));
            assert!(p.l_hat >= 1);
            assert_eq!(p.u, 1.0);
        }
    }

    #[test]
    fn online_histogram_medians() {
        let mut h = OnlineHistogram::new(default_bin_edges(), 64);
        assert_eq!(h.predict(&req(0, 10, 1)), pred(0, 1.0));
        h.observe(&req(1, 10, 0), 50);
        assert_eq!(h.bin_median(10), Some(50));
        h.observe(&req(2, 9, 0), 70);
        assert_eq!(h.bin_median(10), Some(60));

        let mut h = OnlineHistogram::new(default_bin_edges(), 64);
        for (i, x) in [100, 120, 140].into_iter().enumerate() {
            h.observe(&req(i as u64, 40, 0), x);
        }
        let p = h.predict(&req(9, 33, 0));
        assert_eq!(p.l_hat, 120);
        // nearest-rank quartiles of {100,120,140}: 100 and 140
        assert!((p.u - 40.0 / 120.0).abs() < 1e-12);
        // other bin is cold: global median with u = 1
        assert_eq!(h.predict(&req(10, 2, 0)), pred(120, 1.0));
    }

    #[test]
    fn oracle_observe_is_noop() {
        let mut o = OraclePredictor;
        o.observe(&req(1, 1, 1), 5);
        assert_eq!(o.predict(&req(1, 1, 9)).l_hat, 9);
    }

    #[test]
    fn accuracy_examples() {
        let c = BucketConfig::new(vec![128, 512], 4096, 1, 0).unwrap();
        let ps = [pred(100, 0.0), pred(300, 0.0)];
        assert_eq!(bucket_accuracy(&ps, &[120, 400], &c).unwrap(), 1.0);
        assert_eq!(bucket_accuracy(&[pred(100, 0.0)], &[300], &c).unwrap(), 0.0);
        assert_eq!(bucket_accuracy(&[], &[], &c).unwrap(), 1.0);
        assert!(bucket_accuracy(&ps, &[1], &c).is_err());

        let c = BucketConfig::new(vec![128, 512, 2048], 4096, 1, 0).unwrap();
        let ps = [pred(100, 0.0), pred(600, 0.0), pred(600, 0.0)];
        let acc = bucket_accuracy(&ps, &[120, 400, 700], &c).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kind_validation() {
        assert!(PredictorKind::NoisyOracle { sigma_rel: -0.1, bias: 0.0 }.validate().is_err());
        assert!(PredictorKind::OnlineHistogram { bin_edges: vec![2, 4], bin_window: 8 }.validate().is_err());
        assert!(PredictorKind::OnlineHistogram { bin_edges: vec![1, 4, 4], bin_window: 8 }.validate().is_err());
        assert!(PredictorKind::OnlineHistogram { bin_edges: vec![1, 4], bin_window: 8 }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn inflate_is_monotone(l in 0u32..10_000, dl in 0u32..100, u in 0.0f64..=1.0, du in 0.0f64..=1.0, a in 0.0f64..4.0, da in 0.0f64..4.0) {
            let base = inflate(&pred(l, u), a);
            prop_assert!(base >= l);
            prop_assert!(inflate(&pred(l + dl, u), a) >= base);
            prop_assert!(inflate(&pred(l, (u + du).min(1.0)), a) >= base);
            prop_assert!(inflate(&pred(l, u), a + da) >= base);
        }

        #[test]
        fn zero_noise_equals_oracle(id in any::<u64>(), prompt in 1u32..1000, gen in 1u32..100_000, seed in any::<u64>()) {
            let r = req(id, prompt, gen);
            let n = NoisyOracle::new(0.0, 0.0, seed).unwrap();
            prop_assert_eq!(n.predict(&r), OraclePredictor.predict(&r));
        }

        #[test]
        fn accuracy_invariant_under_relabeling(
            pairs in prop::collection::vec((0u32..3000, 1u32..3000), 1..50),
            shift in 1u32..100,
        ) {
            // Scaling bounds and lengths together is a strictly monotone
            // relabeling of bucket ids; the score must not move.
            let c1 = BucketConfig::new(vec![128, 512, 2048], 4096, 1, 0).unwrap();
            let c2 = BucketConfig::new(vec![128 * shift, 512 * shift, 2048 * shift], 4096 * shift, 1, 0).unwrap();
            let p1: Vec<_> = pairs.iter().map(|(l, _)| pred(*l, 0.0)).collect();
            let p2: Vec<_> = pairs.iter().map(|(l, _)| pred(l * shift, 0.0)).collect();
            let r1: Vec<_> = pairs.iter().map(|(_, r)| *r).collect();
            let r2: Vec<_> = pairs.iter().map(|(_, r)| r * shift).collect();
            prop_assert_eq!(bucket_accuracy(&p1, &r1, &c1).unwrap(), bucket_accuracy(&p2, &r2, &c2).unwrap());
        }
    }
}
