//! High-density-region novelty detection: per-component online chi-squared
//! goodness-of-fit tests over cells of the squared-Mahalanobis-distance
//! distribution.
//!
//! The continuous distance density is discretized into `lambda` equally
//! likely cells, either from the theoretical chi-squared quantiles or
//! learned from training distances (for data that is not actually Gaussian).
//! A sliding window of the last `omega` observations keeps per-cell counts;
//! the chi-squared statistic of the window against the uniform expectation
//! is the detector's t-value, smoothed by a moving average and compared
//! against the critical value at the configured significance.
//!
//! In the combined-detector mode the last cell corresponds to the
//! low-density region (those samples are handled elsewhere), so the test
//! runs over the first `lambda - 1` cells with one less degree of freedom.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mixture::{softmax_from_logs, MixtureModel};
use crate::stats::{chi2_cdf, chi2_inverse_cdf};

/// How cell boundaries were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellMode {
    Theoretical,
    Learned,
}

/// Discretization of the squared-distance axis into `lambda` cells.
///
/// `boundaries` holds the `lambda - 1` interior left edges (the first cell
/// starts at 0, the last cell is unbounded); they are strictly increasing
/// and positive. Cells are left-inclusive.
#[derive(Debug, Clone)]
pub struct CellLayout {
    boundaries: Vec<f64>,
    lambda: usize,
    mode: CellMode,
    degenerate: bool,
}

impl CellLayout {
    /// Equally likely cells under the chi-squared distribution with `dim`
    /// degrees of freedom: edge i sits at the quantile of mass i/lambda.
    pub fn theoretical(dim: usize, lambda: usize) -> Result<Self> {
        if lambda < 2 {
            return Err(Error::InvalidParameter("lambda must be >= 2".into()));
        }
        let mut boundaries = Vec::with_capacity(lambda - 1);
        for i in 1..lambda {
            boundaries.push(chi2_inverse_cdf(dim as u32, i as f64 / lambda as f64)?);
        }
        Ok(Self {
            boundaries,
            lambda,
            mode: CellMode::Theoretical,
            degenerate: false,
        })
    }

    /// Cells learned from training distances: edge i is the order statistic
    /// at rank ceil(i * w / lambda), so each cell holds about the same
    /// number of training points. Duplicate or zero edges (possible with
    /// discrete-valued data) are collapsed; the result is then flagged
    /// degenerate and carries fewer cells.
    pub fn learned(train_distances: &[f64], lambda: usize) -> Result<Self> {
        if lambda < 2 {
            return Err(Error::InvalidParameter("lambda must be >= 2".into()));
        }
        let w = train_distances.len();
        if w < lambda {
            return Err(Error::Data(format!(
                "need at least lambda={lambda} training distances, got {w}"
            )));
        }
        if train_distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Data("distances must be finite and >= 0".into()));
        }
        let mut sorted = train_distances.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut boundaries = Vec::with_capacity(lambda - 1);
        for i in 1..lambda {
            let rank = (i * w).div_ceil(lambda); // 1-based
            boundaries.push(sorted[rank - 1]);
        }
        let raw_len = boundaries.len();
        boundaries.retain(|b| *b > 0.0);
        boundaries.dedup();
        let degenerate = boundaries.len() != raw_len;
        if boundaries.is_empty() {
            return Err(Error::Data(
                "training distances collapse to a single cell".into(),
            ));
        }
        Ok(Self {
            lambda: boundaries.len() + 1,
            boundaries,
            mode: CellMode::Learned,
            degenerate,
        })
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mode(&self) -> CellMode {
        self.mode
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Cell index in [1, lambda] for a squared distance; boundaries are
    /// left-inclusive and the lookup is a binary search.
    pub fn cell_index(&self, distance: f64) -> usize {
        self.boundaries.partition_point(|b| *b <= distance) + 1
    }
}

/// Which variant of the goodness-of-fit statistic a detector runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorMode {
    /// All `lambda` cells tested, `lambda - 1` degrees of freedom.
    Standalone,
    /// The last cell is the low-density region and excluded: the statistic
    /// runs over `lambda - 1` cells with `lambda - 2` degrees of freedom.
    CandiesAdjusted,
}

/// Detector configuration. The defaults follow the recommended coupling to
/// the alpha-region: `lambda = 1/(1-alpha)`, `omega = 5*lambda`,
/// `ma = 2*omega`, significance 0.01.
#[derive(Debug, Clone)]
pub struct HdrConfig {
    /// Sliding window capacity.
    pub omega: usize,
    /// Number of distance cells.
    pub lambda: usize,
    /// Moving-average span over recent t-values.
    pub ma_span: usize,
    /// Test significance for the critical value.
    pub significance_p: f64,
    /// No alarms while the window holds fewer samples than this.
    pub min_fill: usize,
    /// Alarm on the raw t-value instead of the moving average.
    pub alarm_on_raw: bool,
    /// Compressor constant of the average-novelty measure.
    pub compressor_mu: f64,
}

impl HdrConfig {
    /// Defaults derived from the alpha-region mass.
    pub fn from_alpha(alpha: f64) -> Self {
        let lambda = (1.0 / (1.0 - alpha)).round().max(2.0) as usize;
        let omega = 5 * lambda;
        Self {
            omega,
            lambda,
            ma_span: 2 * omega,
            significance_p: 0.01,
            min_fill: omega.div_ceil(2),
            alarm_on_raw: false,
            compressor_mu: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 2 {
            return Err(Error::InvalidParameter("lambda must be >= 2".into()));
        }
        if self.omega < self.lambda {
            return Err(Error::InvalidParameter("omega must be >= lambda".into()));
        }
        if !(0.0 < self.significance_p && self.significance_p < 1.0) {
            return Err(Error::InvalidParameter(
                "significance_p must be in (0,1)".into(),
            ));
        }
        if self.ma_span == 0 {
            return Err(Error::InvalidParameter("ma_span must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for HdrConfig {
    fn default() -> Self {
        Self::from_alpha(0.95)
    }
}

/// Result of feeding one distance into a detector.
#[derive(Debug, Clone, Copy)]
pub struct DetectorUpdate {
    pub t: f64,
    pub t_ma: f64,
    pub alarm: bool,
}

/// Online chi-squared goodness-of-fit detector for one component.
#[derive(Debug, Clone)]
pub struct HdrDetector {
    layout: CellLayout,
    window: VecDeque<usize>,
    counts: Vec<u32>,
    t_history: VecDeque<f64>,
    mode: DetectorMode,
    omega: usize,
    ma_span: usize,
    min_fill: usize,
    alarm_on_raw: bool,
    critical: f64,
    dof: u32,
    last_t: f64,
    last_t_ma: f64,
}

impl HdrDetector {
    pub fn new(layout: CellLayout, cfg: &HdrConfig, mode: DetectorMode) -> Result<Self> {
        cfg.validate()?;
        let lambda = layout.lambda();
        let min_lambda = match mode {
            DetectorMode::Standalone => 2,
            DetectorMode::CandiesAdjusted => 3,
        };
        if lambda < min_lambda {
            return Err(Error::InvalidParameter(format!(
                "lambda={lambda} too small for {mode:?}"
            )));
        }
        let dof = match mode {
            DetectorMode::Standalone => lambda - 1,
            DetectorMode::CandiesAdjusted => lambda - 2,
        } as u32;
        let critical = chi2_inverse_cdf(dof, 1.0 - cfg.significance_p)?;
        Ok(Self {
            counts: vec![0; lambda],
            layout,
            window: VecDeque::with_capacity(cfg.omega),
            t_history: VecDeque::with_capacity(cfg.ma_span),
            mode,
            omega: cfg.omega,
            ma_span: cfg.ma_span,
            min_fill: cfg.min_fill,
            alarm_on_raw: cfg.alarm_on_raw,
            critical,
            dof,
            last_t: 0.0,
            last_t_ma: 0.0,
        })
    }

    pub fn layout(&self) -> &CellLayout {
        &self.layout
    }

    pub fn critical_value(&self) -> f64 {
        self.critical
    }

    pub fn dof(&self) -> u32 {
        self.dof
    }

    pub fn fill(&self) -> usize {
        self.window.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn last_t(&self) -> f64 {
        self.last_t
    }

    pub fn last_t_ma(&self) -> f64 {
        self.last_t_ma
    }

    /// Normalized novelty contribution: t over the critical value, clamped
    /// to [0, 1]; zero while the window is below the minimum fill.
    pub fn nu(&self) -> f64 {
        if self.window.len() < self.min_fill {
            return 0.0;
        }
        (self.last_t / self.critical).min(1.0)
    }

    /// Feeds one squared distance: evicts the oldest window member at
    /// capacity, recomputes the statistic from the cell counts and updates
    /// the moving average.
    pub fn update(&mut self, distance: f64) -> DetectorUpdate {
        if self.window.len() == self.omega {
            let old = self.window.pop_front().expect("window at capacity");
            self.counts[old - 1] -= 1;
        }
        let cell = self.layout.cell_index(distance);
        self.window.push_back(cell);
        self.counts[cell - 1] += 1;

        let t = self.statistic();
        if self.t_history.len() == self.ma_span {
            self.t_history.pop_front();
        }
        self.t_history.push_back(t);
        let t_ma = self.t_history.iter().sum::<f64>() / self.t_history.len() as f64;

        self.last_t = t;
        self.last_t_ma = t_ma;
        let signal = if self.alarm_on_raw { t } else { t_ma };
        let alarm = self.window.len() >= self.min_fill && signal > self.critical;
        DetectorUpdate { t, t_ma, alarm }
    }

    /// The chi-squared statistic of the current window.
    fn statistic(&self) -> f64 {
        let lambda = self.layout.lambda();
        let fill = self.window.len() as f64;
        let tested = match self.mode {
            DetectorMode::Standalone => lambda,
            DetectorMode::CandiesAdjusted => lambda - 1,
        };
        let e = fill / tested as f64;
        if e <= 0.0 {
            return 0.0;
        }
        let mut t = 0.0;
        for i in 0..tested {
            let d = f64::from(self.counts[i]) - e;
            t += d * d / e;
        }
        t
    }

    /// Clears the window and smoothing state (used after an alarm so one
    /// event cannot keep alarming forever).
    pub fn reset(&mut self) {
        self.window.clear();
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.t_history.clear();
        self.last_t = 0.0;
        self.last_t_ma = 0.0;
    }
}

/// Monte-Carlo winner assignment for a sample in a high-density region: the
/// unit interval is partitioned proportionally to the unnormalized component
/// densities (no mixing coefficients) and a uniform draw picks the winner.
/// The flag reports the degenerate all-underflow case where a uniform
/// partition was used.
pub fn sample_winner<R: Rng>(
    model: &MixtureModel,
    x: &DVector<f64>,
    rng: &mut R,
) -> Result<(usize, bool)> {
    if model.components().is_empty() {
        return Err(Error::EmptyModel);
    }
    let logs: Vec<f64> = model
        .components()
        .iter()
        .map(|c| c.gaussian.log_density(x))
        .collect::<Result<_>>()?;
    let (probs, degenerate) = softmax_from_logs(&logs);
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return Ok((j, degenerate));
        }
    }
    Ok((probs.len() - 1, degenerate))
}

/// Non-linear transform boosting values near 1:
/// w(x) = x * (2 - comp(1 - x, mu)) with comp(x, mu) = ln(1 + mu x)/ln(1 + mu).
/// The input is clamped to [0, 1].
pub fn compressor(x: f64, mu: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    let comp = (1.0 + mu * (1.0 - x)).ln() / (1.0 + mu).ln();
    x * (2.0 - comp)
}

/// Average-novelty over already-normalized per-detector values: the
/// geometric mean of the boosted values.
pub fn avg_novelty_from_nus(nus: &[f64], mu: f64) -> f64 {
    if nus.is_empty() {
        return 0.0;
    }
    let product: f64 = nus.iter().map(|nu| compressor(*nu, mu)).product();
    product.powf(1.0 / nus.len() as f64)
}

/// Average-novelty across detectors: per-detector t normalized by the
/// critical value (clamped to 1; zero below minimum fill), boosted and
/// combined by geometric mean.
pub fn avg_novelty(detectors: &[HdrDetector], mu: f64) -> f64 {
    let nus: Vec<f64> = detectors.iter().map(|d| d.nu()).collect();
    avg_novelty_from_nus(&nus, mu)
}
