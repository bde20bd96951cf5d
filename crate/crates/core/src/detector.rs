//! Ground-truth model of an N-pixel multiplexed click detector.
//!
//! Each photon of a pulse independently lands on pixel `j` and registers with
//! probability `r_j = c * w_j * eta_j`, or is lost with probability
//! `1 - sum_j r_j`. The detector reports how many distinct pixels registered
//! at least one photon. There are no dark counts.
//!
//! Monte Carlo runs draw every pulse from its own ChaCha substream positioned
//! by pulse index, so histograms do not depend on how pulses are distributed
//! over worker threads.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::tomography::PovmMatrix;

/// Coupling efficiency from the input to the detector.
pub const COUPLING_EFFICIENCY: f64 = 0.99;
/// Relative standard deviation of the per-pixel splitting weights.
pub const SPLITTING_REL_SIGMA: f64 = 0.02;
/// Range of the per-pixel intrinsic detection efficiency.
pub const INTRINSIC_EFFICIENCY_RANGE: (f64, f64) = (0.90, 0.95);
/// Relative pulse-energy jitter of the probe laser.
pub const LASER_REL_SIGMA: f64 = 0.0188;
/// Largest pixel count accepted by the exact enumeration oracle.
pub const MAX_EXACT_PIXELS: usize = 12;

const PULSES_PER_CHUNK: u64 = 4096;
// Each pulse owns 2^24 words of its ChaCha stream.
const WORDS_PER_PULSE_LOG2: u32 = 24;

/// Physical parameters of one detector instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n_pixels: usize,
    pub coupling_efficiency: f64,
    pub splitting_weights: Vec<f64>,
    pub intrinsic_efficiencies: Vec<f64>,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn new(
        coupling_efficiency: f64,
        splitting_weights: Vec<f64>,
        intrinsic_efficiencies: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let cfg = Self {
            n_pixels: splitting_weights.len(),
            coupling_efficiency,
            splitting_weights,
            intrinsic_efficiencies,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lossless detector with perfectly balanced splitting.
    pub fn ideal(n_pixels: usize) -> Result<Self> {
        if n_pixels == 0 {
            return Err(invalid("n_pixels must be at least 1"));
        }
        Self::new(
            1.0,
            vec![1.0 / n_pixels as f64; n_pixels],
            vec![1.0; n_pixels],
            0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels == 0 {
            return Err(invalid("n_pixels must be at least 1"));
        }
        if self.splitting_weights.len() != self.n_pixels
            || self.intrinsic_efficiencies.len() != self.n_pixels
        {
            return Err(Error::ShapeMismatch(format!(
                "n_pixels = {} but {} splitting weights and {} efficiencies",
                self.n_pixels,
                self.splitting_weights.len(),
                self.intrinsic_efficiencies.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.coupling_efficiency) {
            return Err(invalid(format!(
                "coupling efficiency {} outside [0, 1]",
                self.coupling_efficiency
            )));
        }
        if self.splitting_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(invalid("splitting weights must be nonnegative"));
        }
        let total: f64 = self.splitting_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!(
                "splitting weights sum to {total}, expected 1"
            )));
        }
        if self
            .intrinsic_efficiencies
            .iter()
            .any(|e| !(0.0..=1.0).contains(e))
        {
            return Err(invalid("intrinsic efficiencies must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Per-pixel registration probabilities `r_j = c * w_j * eta_j`.
    pub fn registration_probabilities(&self) -> Vec<f64> {
        self.splitting_weights
            .iter()
            .zip(&self.intrinsic_efficiencies)
            .map(|(w, e)| self.coupling_efficiency * w * e)
            .collect()
    }

    /// Probability that a photon registers anywhere.
    pub fn total_efficiency(&self) -> f64 {
        self.registration_probabilities().iter().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| Error::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

/// Pulse-to-pulse energy fluctuation of the probe source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_rel: f64,
}

impl NoiseModel {
    pub fn new(sigma_rel: f64) -> Result<Self> {
        if !(sigma_rel >= 0.0) {
            return Err(invalid("sigma_rel must be nonnegative"));
        }
        Ok(Self { sigma_rel })
    }

    pub fn none() -> Self {
        Self { sigma_rel: 0.0 }
    }

    /// The laser jitter used for the probe states.
    pub fn laser() -> Self {
        Self {
            sigma_rel: LASER_REL_SIGMA,
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::laser()
    }
}

/// Normalized histogram of click counts `0..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickStatistics<T = f64> {
    pub probs: Vec<T>,
    pub n_samples: u64,
}

impl<T: Real> ClickStatistics<T> {
    pub fn new(probs: Vec<T>, n_samples: u64) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("click statistics need at least one outcome"));
        }
        if probs.iter().any(|&p| !(p >= T::zero())) {
            return Err(invalid("click probabilities must be nonnegative"));
        }
        let total: T = probs.iter().copied().sum();
        let tol = T::lit(1e-12).max(T::eps() * T::from_usize_lossy(4 * probs.len()));
        if (total - T::one()).abs() > tol {
            return Err(invalid(format!(
                "click probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs, n_samples })
    }

    pub fn from_histogram(counts: &[u64]) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(invalid("empty histogram"));
        }
        let nt = T::from_u64(n).expect("count representable");
        let probs = counts
            .iter()
            .map(|&c| T::from_u64(c).expect("count representable") / nt)
            .collect();
        Ok(Self { probs, n_samples: n })
    }

    pub fn n_pixels(&self) -> usize {
        self.probs.len() - 1
    }

    /// Writes `clicks,probability` rows with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["clicks", "probability"])?;
        for (n, p) in self.probs.iter().enumerate() {
            wr.write_record([n.to_string(), p.as_f64().to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, n_samples: u64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut probs = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let clicks: usize = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid(format!("row {i}: bad clicks column")))?;
            if clicks != i {
                return Err(invalid(format!("row {i}: expected clicks = {i}, got {clicks}")));
            }
            let p: f64 = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid(format!("row {i}: bad probability column")))?;
            probs.push(T::lit(p));
        }
        Self::new(probs, n_samples)
    }
}

/// Samples a detector with nearly balanced splitting and scattered efficiencies.
///
/// Weights are `(1 + eps_j) / N` with `eps_j ~ Normal(0, 0.02)`, clamped at
/// zero and renormalized; efficiencies are uniform on `[0.90, 0.95]`.
pub fn sample_detector(n_pixels: usize, seed: u64) -> Result<DetectorConfig> {
    if n_pixels == 0 {
        return Err(invalid("n_pixels must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, SPLITTING_REL_SIGMA).expect("valid sigma");
    let mut weights: Vec<f64> = (0..n_pixels)
        .map(|_| ((1.0 + jitter.sample(&mut rng)) / n_pixels as f64).max(0.0))
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.fill(1.0 / n_pixels as f64);
    }
    if n_pixels == 1 {
        weights[0] = 1.0;
    }
    let (lo, hi) = INTRINSIC_EFFICIENCY_RANGE;
    let eff_dist = Uniform::new_inclusive(lo, hi).expect("valid range");
    let efficiencies = (0..n_pixels).map(|_| eff_dist.sample(&mut rng)).collect();
    DetectorConfig::new(COUPLING_EFFICIENCY, weights, efficiencies, seed)
}

/// Identifies an independent random stream for one Monte Carlo run.
///
/// Pulse `i` of the run draws from the ChaCha8 stream `(seed, stream)`
/// positioned at word `i << 24`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseStream {
    pub seed: u64,
    pub stream: u64,
}

impl PulseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    fn base(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Generator for pulse `index`.
    pub fn pulse_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = self.base();
        rng.set_word_pos(u128::from(index) << WORDS_PER_PULSE_LOG2);
        rng
    }
}

/// Click-count simulator with precomputed pixel lookup.
#[derive(Clone, Debug)]
pub struct PulseSimulator {
    // Cumulative registration probabilities; the final bucket is "lost".
    cumulative: Vec<f64>,
}

impl PulseSimulator {
    pub fn new(config: &DetectorConfig) -> Self {
        let mut acc = 0.0;
        let cumulative = config
            .registration_probabilities()
            .into_iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn n_pixels(&self) -> usize {
        self.cumulative.len()
    }

    /// Number of distinct pixels hit by `photons` photons.
    pub fn clicks<R: Rng + ?Sized>(
        &self,
        photons: u64,
        rng: &mut R,
        scratch: &mut ClickScratch,
    ) -> usize {
        if photons == 0 {
            return 0;
        }
        let n = self.n_pixels();
        scratch.begin(n);
        let mut clicked = 0;
        for _ in 0..photons {
            let u: f64 = rng.random();
            let j = self.cumulative.partition_point(|&c| c <= u);
            if j < n && scratch.mark(j) {
                clicked += 1;
                if clicked == n {
                    break;
                }
            }
        }
        clicked
    }
}

/// Reusable per-thread bookkeeping of which pixels clicked in a pulse.
#[derive(Clone, Debug, Default)]
pub struct ClickScratch {
    stamps: Vec<u32>,
    epoch: u32,
}

impl ClickScratch {
    fn begin(&mut self, n: usize) {
        if self.stamps.len() != n {
            self.stamps = vec![0; n];
            self.epoch = 0;
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamps.fill(0);
            self.epoch = 1;
        }
    }

    // Returns true the first time pixel `j` is marked in the current pulse.
    fn mark(&mut self, j: usize) -> bool {
        if self.stamps[j] == self.epoch {
            false
        } else {
            self.stamps[j] = self.epoch;
            true
        }
    }
}

/// Simulates a single pulse carrying exactly `photon_number` photons.
pub fn simulate_pulse<R: Rng + ?Sized>(
    config: &DetectorConfig,
    photon_number: u64,
    rng: &mut R,
) -> usize {
    PulseSimulator::new(config).clicks(photon_number, rng, &mut ClickScratch::default())
}

/// Runs `n_pulses` pulses in parallel chunks and returns the click histogram.
/// `photons` draws the photon number of one pulse from its own generator.
fn run_pulses<F>(config: &DetectorConfig, n_pulses: u64, stream: PulseStream, photons: F) -> Vec<u64>
where
    F: Fn(&mut ChaCha8Rng) -> u64 + Sync,
{
    let sim = PulseSimulator::new(config);
    let n_bins = config.n_pixels + 1;
    let n_chunks = n_pulses.div_ceil(PULSES_PER_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut hist = vec![0u64; n_bins];
            let mut scratch = ClickScratch::default();
            let start = chunk * PULSES_PER_CHUNK;
            let end = (start + PULSES_PER_CHUNK).min(n_pulses);
            let mut rng = stream.base();
            for i in start..end {
                rng.set_word_pos(u128::from(i) << WORDS_PER_PULSE_LOG2);
                let k = photons(&mut rng);
                hist[sim.clicks(k, &mut rng, &mut scratch)] += 1;
            }
            hist
        })
        .reduce(
            || vec![0u64; n_bins],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

fn poisson_draw(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(d) => {
            let k: f64 = d.sample(rng);
            k as u64
        }
        Err(_) => 0,
    }
}

/// Click statistics of a coherent probe with mean photon number `alpha_sq`.
///
/// Each pulse draws its energy from `Normal(alpha_sq, sigma_rel * alpha_sq)`
/// clamped at zero, then a Poisson photon number.
pub fn simulate_coherent_probe<T: Real>(
    config: &DetectorConfig,
    alpha_sq: f64,
    noise: NoiseModel,
    n_pulses: u64,
    stream: PulseStream,
) -> Result<ClickStatistics<T>> {
    if !(alpha_sq >= 0.0) {
        return Err(invalid("alpha_sq must be nonnegative"));
    }
    if n_pulses == 0 {
        return Err(invalid("n_pulses must be at least 1"));
    }
    let sigma = noise.sigma_rel * alpha_sq;
    let energy = if sigma > 0.0 {
        Some(Normal::new(alpha_sq, sigma).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let hist = run_pulses(config, n_pulses, stream, |rng| {
        let mean = match &energy {
            Some(d) => d.sample(rng).max(0.0),
            None => alpha_sq,
        };
        poisson_draw(mean, rng)
    });
    ClickStatistics::from_histogram(&hist)
}

/// Click statistics of a thermal (Bose-Einstein) input with mean `mean_n`.
pub fn simulate_thermal<T: Real>(
    config: &DetectorConfig,
    mean_n: f64,
    n_pulses: u64,
    stream: PulseStream,
) -> Result<ClickStatistics<T>> {
    if !(mean_n >= 0.0) {
        return Err(invalid("mean_n must be nonnegative"));
    }
    if n_pulses == 0 {
        return Err(invalid("n_pulses must be at least 1"));
    }
    let geometric = if mean_n > 0.0 {
        Some(Geometric::new(1.0 / (1.0 + mean_n)).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let hist = run_pulses(config, n_pulses, stream, |rng| match &geometric {
        Some(d) => d.sample(rng),
        None => 0,
    });
    ClickStatistics::from_histogram(&hist)
}

/// Click statistics for pulses that all carry exactly `photon_number` photons.
pub fn simulate_fock<T: Real>(
    config: &DetectorConfig,
    photon_number: u64,
    n_pulses: u64,
    stream: PulseStream,
) -> Result<ClickStatistics<T>> {
    if n_pulses == 0 {
        return Err(invalid("n_pulses must be at least 1"));
    }
    let hist = run_pulses(config, n_pulses, stream, |_| photon_number);
    ClickStatistics::from_histogram(&hist)
}

/// Exact click-count distribution for a pulse of `k` photons.
///
/// With `r_0` the loss probability, the probability of exactly the pixel set
/// `S` clicking is `sum_{T ⊆ S} (-1)^{|S|-|T|} (r_0 + r_T)^k`. Summing over all
/// `S` of size `n` groups the inner terms by `T`, which gives
/// `P(n) = sum_t (-1)^{n-t} C(N-t, n-t) sum_{|T|=t} (r_0 + r_T)^k`.
/// Round-off negatives are clamped to zero.
pub fn exact_click_distribution<T: Real>(config: &DetectorConfig, k: u64) -> Result<Vec<T>> {
    let (sums, sizes, r0) = subset_sums::<T>(config)?;
    Ok(click_distribution_from_subsets(&sums, &sizes, r0, config.n_pixels, k))
}

fn subset_sums<T: Real>(config: &DetectorConfig) -> Result<(Vec<T>, Vec<u8>, T)> {
    let n = config.n_pixels;
    if n > MAX_EXACT_PIXELS {
        return Err(Error::UnsupportedSize {
            what: "n_pixels",
            value: n,
            limit: MAX_EXACT_PIXELS,
        });
    }
    let r: Vec<T> = config
        .registration_probabilities()
        .into_iter()
        .map(T::lit)
        .collect();
    let r0 = (T::one() - r.iter().copied().sum::<T>()).max(T::zero());
    let mut sums = vec![T::zero(); 1 << n];
    let mut sizes = vec![0u8; 1 << n];
    for mask in 1usize..(1 << n) {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        sums[mask] = sums[rest] + r[low];
        sizes[mask] = sizes[rest] + 1;
    }
    Ok((sums, sizes, r0))
}

fn click_distribution_from_subsets<T: Real>(
    sums: &[T],
    sizes: &[u8],
    r0: T,
    n: usize,
    k: u64,
) -> Vec<T> {
    let mut by_size = vec![T::zero(); n + 1];
    for (&s, &t) in sums.iter().zip(sizes) {
        by_size[t as usize] += powu(r0 + s, k);
    }
    let binom = binomial_table::<T>(n);
    (0..=n)
        .map(|clicks| {
            let mut acc = T::zero();
            for t in 0..=clicks {
                let term = binom[n - t][clicks - t] * by_size[t];
                if (clicks - t) % 2 == 0 {
                    acc += term;
                } else {
                    acc -= term;
                }
            }
            acc.max(T::zero())
        })
        .collect()
}

fn powu<T: Real>(x: T, k: u64) -> T {
    match i32::try_from(k) {
        Ok(k) => x.powi(k),
        Err(_) => x.powf(T::from_u64(k).expect("exponent representable")),
    }
}

fn binomial_table<T: Real>(n: usize) -> Vec<Vec<T>> {
    let mut table = vec![vec![T::one()]];
    for i in 1..=n {
        let prev = &table[i - 1];
        let mut row = vec![T::one(); i + 1];
        for j in 1..i {
            row[j] = prev[j - 1] + prev[j];
        }
        table.push(row);
    }
    table
}

/// True POVM of the modelled detector truncated at `truncation` photons.
pub fn exact_povm<T: Real>(config: &DetectorConfig, truncation: usize) -> Result<PovmMatrix<T>> {
    let (sums, sizes, r0) = subset_sums::<T>(config)?;
    let rows: Vec<Vec<T>> = (0..=truncation as u64)
        .map(|k| click_distribution_from_subsets(&sums, &sizes, r0, config.n_pixels, k))
        .collect();
    PovmMatrix::from_rows(&rows)
}

/// Click distribution for a coherent input of mean `mean` with no jitter.
///
/// Poisson thinning makes the pixels independent, each clicking with
/// probability `1 - exp(-mean * r_j)`, so the count is Poisson-binomial.
/// Works for any pixel count.
pub fn coherent_click_distribution<T: Real>(config: &DetectorConfig, mean: f64) -> Vec<T> {
    let mut dist = vec![T::zero(); config.n_pixels + 1];
    dist[0] = T::one();
    for (j, r) in config.registration_probabilities().into_iter().enumerate() {
        let q = T::lit(-(-mean * r).exp_m1());
        for n in (1..=j + 1).rev() {
            dist[n] = dist[n] * (T::one() - q) + dist[n - 1] * q;
        }
        let d0 = dist[0];
        dist[0] = d0 * (T::one() - q);
    }
    dist
}
