//! Sampling estimates used as an independent check on every closed form.
//!
//! Each trial draws from its own generator seeded by `(seed, trial index)`,
//! so an estimate depends only on `(seed, trials)`: worker threads split the
//! trial range into fixed blocks and the per-block counts are summed in block
//! order.

use rand::Rng;
use rand::SeedableRng;
use rand_distr::Exp1;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::exp_linear::ConjunctionSystem;
use crate::mac::{self, MacSpec, Method, OutageEstimate, RateVector};
use crate::network::NetworkSpec;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Estimates with fewer events than this are flagged low-confidence.
pub const MIN_EVENTS: u64 = 10;

const BLOCK: u64 = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub trials: u64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 100_000,
            seed: 0x0fad_e3ac,
            workers: 1,
        }
    }
}

impl McConfig {
    pub fn new(trials: u64, seed: u64) -> Self {
        Self {
            trials,
            seed,
            ..Self::default()
        }
    }

    pub fn with_workers(self, workers: usize) -> Self {
        Self { workers, ..self }
    }

    /// An independent configuration for sub-estimate `k`.
    pub fn derived(&self, k: u64) -> Self {
        Self {
            seed: splitmix(self.seed ^ splitmix(k.wrapping_add(0x6a09_e667_f3bc_c909))),
            ..*self
        }
    }
}

/// A sampled probability with its normal-approximation uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub probability: f64,
    pub events: u64,
    pub trials: u64,
    pub std_error: f64,
    pub half_width: f64,
    pub low_confidence: bool,
}

impl McEstimate {
    fn from_counts(events: u64, trials: u64) -> Self {
        let p = events as f64 / trials as f64;
        let std_error = (p * (1.0 - p) / trials as f64).sqrt();
        Self {
            probability: p,
            events,
            trials,
            std_error,
            half_width: Z_95 * std_error,
            low_confidence: events < MIN_EVENTS,
        }
    }

    /// Estimate of the complementary event.
    pub fn complement(&self) -> Self {
        Self {
            probability: 1.0 - self.probability,
            events: self.trials - self.events,
            low_confidence: self.trials - self.events < MIN_EVENTS,
            ..*self
        }
    }
}

impl From<McEstimate> for OutageEstimate {
    fn from(e: McEstimate) -> Self {
        OutageEstimate {
            value: e.probability,
            method: Method::MonteCarlo,
            half_width: Some(e.half_width),
            std_error: Some(e.std_error),
            low_confidence: e.low_confidence,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The generator for one trial.
pub fn trial_rng(seed: u64, trial: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(splitmix(seed ^ splitmix(trial)))
}

/// Fraction of trials for which `event` returns true.
///
/// `event` receives a fresh per-trial generator and a scratch buffer it may
/// reuse across trials of the same block.
pub fn estimate<S, F>(cfg: &McConfig, scratch: S, event: F) -> McEstimate
where
    S: Fn() -> Vec<f64> + Sync,
    F: Fn(&mut Xoshiro256PlusPlus, &mut Vec<f64>) -> bool + Sync,
{
    let trials = cfg.trials.max(1);
    let blocks = trials.div_ceil(BLOCK);
    let count_block = |b: u64| -> u64 {
        let mut buf = scratch();
        let end = ((b + 1) * BLOCK).min(trials);
        (b * BLOCK..end)
            .filter(|&t| event(&mut trial_rng(cfg.seed, t), &mut buf))
            .count() as u64
    };
    let events = if cfg.workers <= 1 {
        (0..blocks).map(count_block).sum()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        let counts: Vec<u64> = pool.install(|| {
            (0..blocks).into_par_iter().map(count_block).collect()
        });
        counts.iter().sum()
    };
    McEstimate::from_counts(events, trials)
}

/// Per-receiver outage test on precomputed thresholds.
///
/// `thresholds[mask]` holds `2^{sum_{i in mask} r_i} - 1`; bit `i` of
/// `mask` selects link `i`. Fails when some subset's rate sum strictly
/// exceeds what its received power supports.
struct MacSampler {
    inv_lambda: Vec<f64>,
    thresholds: Vec<f64>,
}

impl MacSampler {
    fn new(lambdas: &[f64], rates: &[f64]) -> Self {
        let n = lambdas.len();
        let mut thresholds = vec![0.0; 1 << n];
        let mut sums = vec![0.0; 1 << n];
        for mask in 1usize..(1 << n) {
            let low = mask.trailing_zeros() as usize;
            sums[mask] = sums[mask & (mask - 1)] + rates[low];
            thresholds[mask] = mac::pow2m1(sums[mask]);
        }
        Self {
            inv_lambda: lambdas.iter().map(|l| 1.0 / l).collect(),
            thresholds,
        }
    }

    fn always_succeeds(&self) -> bool {
        self.thresholds.iter().all(|&b| b <= 0.0)
    }

    fn outage<R: Rng>(&self, rng: &mut R, sums: &mut Vec<f64>) -> bool {
        let n = self.inv_lambda.len();
        sums.clear();
        sums.resize(1 << n, 0.0);
        let mut gains = [0.0f64; 32];
        for (g, il) in gains.iter_mut().zip(&self.inv_lambda) {
            let z: f64 = rng.sample(Exp1);
            *g = z * il;
        }
        for mask in 1usize..(1 << n) {
            let low = mask.trailing_zeros() as usize;
            let s = sums[mask & (mask - 1)] + gains[low];
            if s < self.thresholds[mask] {
                return true;
            }
            sums[mask] = s;
        }
        false
    }
}

/// Sampled outage of one MAC.
pub fn mc_mac_outage(mac: &MacSpec, r: &RateVector, cfg: &McConfig) -> McEstimate {
    assert_eq!(mac.len(), r.len(), "rate vector length must match the MAC");
    assert!(mac.len() <= mac::MAX_LINKS);
    let sampler = MacSampler::new(mac.lambdas(), r.as_slice());
    if sampler.always_succeeds() {
        return McEstimate::from_counts(0, cfg.trials.max(1));
    }
    estimate(cfg, Vec::new, |rng, buf| sampler.outage(rng, buf))
}

/// Sampled whole-network outage: a trial fails if any receiver fails.
pub fn mc_network_outage(net: &NetworkSpec, rates: &[f64], cfg: &McConfig) -> Result<McEstimate> {
    net.check_rates(rates)?;
    let samplers: Vec<MacSampler> = net
        .receivers()
        .map(|k| {
            let lambda = net.receiver_lambda(k).expect("receiver has in-links");
            let local: Vec<f64> = net.in_links(k).iter().map(|&e| rates[e]).collect();
            MacSampler::new(&vec![lambda; local.len()], &local)
        })
        .filter(|s| !s.always_succeeds())
        .collect();
    if samplers.is_empty() {
        return Ok(McEstimate::from_counts(0, cfg.trials.max(1)));
    }
    Ok(estimate(cfg, Vec::new, |rng, buf| {
        // every receiver draws its gains, so receiver streams stay aligned
        let mut failed = false;
        for s in &samplers {
            failed |= s.outage(rng, buf);
        }
        failed
    }))
}

/// Sampled probability of `{A z > b}`.
pub fn mc_conjunction(sys: &ConjunctionSystem, cfg: &McConfig) -> McEstimate {
    let cols = sys.cols();
    estimate(
        cfg,
        || Vec::with_capacity(cols),
        |rng, z| {
            z.clear();
            z.extend((0..cols).map(|_| rng.sample::<f64, _>(Exp1)));
            sys.is_satisfied_by(z)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_config() {
        let mac = MacSpec::iid(3, 0.5).unwrap();
        let r = RateVector::new(vec![0.5, 1.0, 0.3]).unwrap();
        let cfg = McConfig::new(50_000, 42);
        assert_eq!(mc_mac_outage(&mac, &r, &cfg), mc_mac_outage(&mac, &r, &cfg));
        assert_eq!(
            mc_mac_outage(&mac, &r, &cfg),
            mc_mac_outage(&mac, &r, &cfg.with_workers(4))
        );
        assert_ne!(
            mc_mac_outage(&mac, &r, &cfg),
            mc_mac_outage(&mac, &r, &McConfig::new(50_000, 43))
        );
    }

    #[test]
    fn zero_rates_never_fail() {
        let mac = MacSpec::iid(4, 2.0).unwrap();
        let e = mc_mac_outage(&mac, &RateVector::zeros(4), &McConfig::new(10_000, 1));
        assert_eq!(e.probability, 0.0);
        assert_eq!(e.events, 0);
        assert!(e.low_confidence);
    }

    #[test]
    fn single_link_covers_closed_form() {
        let mac = MacSpec::iid(1, 1.0).unwrap();
        let r = RateVector::new(vec![1.0]).unwrap();
        let e = mc_mac_outage(&mac, &r, &McConfig::new(1_000_000, 7));
        let exact = 1.0 - (-1.0f64).exp();
        assert!((e.probability - exact).abs() <= e.half_width, "{e:?}");
        assert!(e.half_width < 0.002);
    }

    #[test]
    fn conjunction_estimate() {
        let sys = ConjunctionSystem::new(1, vec![vec![1.0]], vec![1.0]).unwrap();
        let e = mc_conjunction(&sys, &McConfig::new(200_000, 3));
        assert!((e.probability - (-1.0f64).exp()).abs() < 4.0 * e.std_error);
    }

    #[test]
    fn derived_seeds_differ() {
        let cfg = McConfig::new(10, 5);
        assert_ne!(cfg.derived(1).seed, cfg.derived(2).seed);
        assert_ne!(cfg.derived(1).seed, cfg.seed);
    }
}
