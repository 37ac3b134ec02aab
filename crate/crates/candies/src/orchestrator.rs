//! The combined detection state machine: routes every sample to the
//! high-density (goodness-of-fit) or low-density (suspicion clustering)
//! path, adapts the model when a suspicious cluster reaches the criterion,
//! and keeps both novelty measures. Also hosts the slower state-variable
//! baseline the combined detector is compared against.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr::{
    avg_novelty, sample_winner, CellLayout, CellMode, DetectorMode, DetectorUpdate, HdrConfig,
    HdrDetector,
};
use crate::ldr::{LdrConfig, SuspicionBuffer};
use crate::mixture::{train, Classification, MixtureModel, TrainConfig};
use crate::stats::chi2_inverse_cdf;

/// What a detection event reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A suspicious-sample cluster reached the adaptation criterion.
    LdrNovelProcess,
    /// A component's goodness-of-fit test exceeded its critical value.
    HdrNovelProcess,
    /// The model was extended by fusing in a newly trained mixture.
    Adaptation,
    /// Training on a detected cluster failed; the model was left unchanged.
    AdaptationFailed,
}

/// Timestamped detection report with a snapshot of both novelty measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub step: u64,
    pub kind: EventKind,
    /// Component that alarmed (high-density events).
    pub component: Option<usize>,
    /// Cluster that triggered (low-density events, adaptations).
    pub cluster: Option<u32>,
    pub nu_2snd: f64,
    pub avg_novelty: f64,
    /// Moving-average t per component detector at the time of the event.
    pub t_ma: Vec<f64>,
    /// Number of components inserted (adaptation events).
    pub inserted: usize,
}

/// Which path handled a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Inside some alpha-region; the winner component's detector was updated.
    Hdr { winner: usize },
    /// Outside every alpha-region; the sample entered the suspicion buffer.
    Ldr { cluster: Option<u32> },
}

/// Everything a processed sample produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub classification: Classification,
    pub region: Region,
    /// Detector readings when the sample went the high-density path.
    pub detector: Option<DetectorUpdate>,
    pub nu_2snd: f64,
    pub avg_novelty: f64,
    pub events: Vec<DetectionEvent>,
}

/// Configuration of the combined detector.
#[derive(Debug, Clone)]
pub struct CandiesConfig {
    pub ldr: LdrConfig,
    pub hdr: HdrConfig,
    /// Hellinger distance below which components merge during fusion.
    pub fuse_threshold: f64,
    /// Component budget when training a mixture on a detected cluster.
    pub adapt_j_max: usize,
    /// Cell construction for the initial component detectors.
    pub cell_mode: CellMode,
    /// Seed of the winner-sampling and adaptation-training generator.
    pub seed: u64,
}

impl Default for CandiesConfig {
    fn default() -> Self {
        Self {
            ldr: LdrConfig::default(),
            hdr: HdrConfig::default(),
            fuse_threshold: 0.5,
            adapt_j_max: 3,
            cell_mode: CellMode::Theoretical,
            seed: 0,
        }
    }
}

/// Outcome of one model adaptation.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub inserted: usize,
    pub merged: usize,
    /// Label assigned to inserted components, if any were inserted.
    pub label: Option<String>,
    pub failed: bool,
}

/// The combined novelty detector over one sample stream.
#[derive(Debug)]
pub struct CandiesState {
    model: MixtureModel,
    buffer: SuspicionBuffer,
    detectors: Vec<HdrDetector>,
    cfg: CandiesConfig,
    rng: ChaCha8Rng,
    rho: f64,
    step: u64,
    adapt_count: u64,
    events: Vec<DetectionEvent>,
}

impl CandiesState {
    /// Builds the detector stack over a trained classifier model, with
    /// theoretical distance cells for every component.
    pub fn new(model: MixtureModel, cfg: CandiesConfig) -> Result<Self> {
        Self::build(model, cfg, None)
    }

    /// Like `new`, but the component detectors learn their distance cells
    /// from the training samples (each sample contributes its distance to
    /// the component with the highest responsibility). Components with too
    /// few assigned samples fall back to theoretical cells.
    pub fn with_learned_cells(
        model: MixtureModel,
        cfg: CandiesConfig,
        training: &[DVector<f64>],
    ) -> Result<Self> {
        Self::build(model, cfg, Some(training))
    }

    fn build(
        model: MixtureModel,
        cfg: CandiesConfig,
        training: Option<&[DVector<f64>]>,
    ) -> Result<Self> {
        if !model.is_classifier() {
            return Err(Error::NotClassifier);
        }
        cfg.ldr.validate()?;
        cfg.hdr.validate()?;
        let dim = model.dim();
        let rho = chi2_inverse_cdf(dim as u32, cfg.ldr.alpha)?;

        let mut per_component: Vec<Vec<f64>> = vec![Vec::new(); model.components().len()];
        if let (Some(samples), CellMode::Learned) = (training, cfg.cell_mode) {
            for x in samples {
                let (gamma, _) = model.responsibilities(x)?;
                let best = gamma
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .expect("non-empty model");
                per_component[best].push(model.components()[best].gaussian.mahalanobis_sq(x)?);
            }
        }

        let mut detectors = Vec::with_capacity(model.components().len());
        for distances in &per_component {
            detectors.push(Self::make_detector(dim, &cfg, distances)?);
        }
        let buffer = SuspicionBuffer::new(&cfg.ldr)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            buffer,
            detectors,
            cfg,
            rng,
            rho,
            step: 0,
            adapt_count: 0,
            events: Vec::new(),
        })
    }

    fn make_detector(dim: usize, cfg: &CandiesConfig, distances: &[f64]) -> Result<HdrDetector> {
        let layout = if cfg.cell_mode == CellMode::Learned && distances.len() >= cfg.hdr.lambda {
            CellLayout::learned(distances, cfg.hdr.lambda)
                .or_else(|_| CellLayout::theoretical(dim, cfg.hdr.lambda))?
        } else {
            CellLayout::theoretical(dim, cfg.hdr.lambda)?
        };
        HdrDetector::new(layout, &cfg.hdr, DetectorMode::CandiesAdjusted)
    }

    pub fn model(&self) -> &MixtureModel {
        &self.model
    }

    pub fn detectors(&self) -> &[HdrDetector] {
        &self.detectors
    }

    pub fn buffer(&self) -> &SuspicionBuffer {
        &self.buffer
    }

    pub fn events(&self) -> &[DetectionEvent] {
        &self.events
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The squared-distance threshold separating the regions.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn nu_2snd(&self) -> f64 {
        self.buffer.nu_2snd()
    }

    pub fn avg_novelty(&self) -> f64 {
        avg_novelty(&self.detectors, self.cfg.hdr.compressor_mu)
    }

    fn measures_event(
        &self,
        kind: EventKind,
        component: Option<usize>,
        cluster: Option<u32>,
        inserted: usize,
    ) -> DetectionEvent {
        DetectionEvent {
            step: self.step,
            kind,
            component,
            cluster,
            nu_2snd: self.nu_2snd(),
            avg_novelty: self.avg_novelty(),
            t_ma: self.detectors.iter().map(|d| d.last_t_ma()).collect(),
            inserted,
        }
    }

    /// Processes one sample: high-density samples update the winner
    /// component's goodness-of-fit detector, low-density samples enter the
    /// suspicion buffer and may trigger model adaptation. Exactly one of the
    /// two paths runs; classification is against the updated model when an
    /// adaptation happened.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<StepOutcome> {
        if x.len() != self.model.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim(),
                got: x.len(),
            });
        }
        let distances = self.model.distances_sq(x)?;
        let mut new_events = Vec::new();

        let outcome = if distances.iter().any(|d| *d <= self.rho) {
            // High-density region: pick the winner and update its detector.
            let (winner, _) = sample_winner(&self.model, x, &mut self.rng)?;
            let upd = self.detectors[winner].update(distances[winner]);
            if upd.alarm {
                let ev = self.measures_event(EventKind::HdrNovelProcess, Some(winner), None, 0);
                new_events.push(ev);
                self.detectors[winner].reset();
            }
            let classification = self.model.classify(x)?;
            StepOutcome {
                classification,
                region: Region::Hdr { winner },
                detector: Some(upd),
                nu_2snd: self.nu_2snd(),
                avg_novelty: self.avg_novelty(),
                events: new_events.clone(),
            }
        } else {
            // Low-density region: second-stage clustering.
            let insert = self.buffer.insert(x.clone());
            if let Some(cid) = insert.detected {
                let ev = self.measures_event(EventKind::LdrNovelProcess, None, Some(cid), 0);
                new_events.push(ev);
                let members = self.buffer.extract_cluster(cid)?;
                let adapt = self.adapt_model(&members)?;
                let kind = if adapt.failed {
                    EventKind::AdaptationFailed
                } else {
                    EventKind::Adaptation
                };
                let ev = self.measures_event(kind, None, Some(cid), adapt.inserted);
                new_events.push(ev);
            }
            let classification = self.model.classify(x)?;
            StepOutcome {
                classification,
                region: Region::Ldr {
                    cluster: insert.cluster,
                },
                detector: None,
                nu_2snd: self.nu_2snd(),
                avg_novelty: self.avg_novelty(),
                events: new_events.clone(),
            }
        };

        self.events.extend(new_events);
        self.step += 1;
        Ok(outcome)
    }

    /// Trains a small mixture on a detected cluster and fuses it into the
    /// model. Inserted components share one fresh auto-generated label and
    /// get fresh detectors. Training failure leaves the model unchanged and
    /// discards the cluster; the stream keeps running.
    pub fn adapt_model(&mut self, cluster: &[DVector<f64>]) -> Result<AdaptOutcome> {
        let dim = self.model.dim();
        self.adapt_count += 1;
        let train_cfg = TrainConfig {
            j_max: self.cfg.adapt_j_max,
            // The cluster is assumed to be one process, so the covariance
            // prior is centered on the cluster's own spread.
            covariance_prior_scale: (2 * dim + 3) as f64,
            seed: self.cfg.seed.wrapping_add(self.adapt_count),
            ..TrainConfig::default()
        };
        let mut novel = match train(cluster, &train_cfg) {
            Ok(m) => m,
            Err(_) => {
                return Ok(AdaptOutcome {
                    inserted: 0,
                    merged: 0,
                    label: None,
                    failed: true,
                })
            }
        };

        // One label per adaptation: every component of the cluster's model
        // describes the same novel process.
        let label = self.model.next_novel_label();
        for c in 0..novel.components().len() {
            novel.set_component_label(c, Some(label.clone()));
        }
        let (fused, report) = self.model.fuse(&novel, self.cfg.fuse_threshold)?;
        self.model = fused;
        for _ in 0..report.inserted.len() {
            let det = Self::make_detector(dim, &self.cfg, &[])?;
            self.detectors.push(det);
        }
        debug_assert_eq!(self.detectors.len(), self.model.components().len());
        Ok(AdaptOutcome {
            inserted: report.inserted.len(),
            merged: report.merged.len(),
            label: if report.inserted.is_empty() {
                None
            } else {
                Some(label)
            },
            failed: false,
        })
    }
}

// ---------------------------------------------------------------------------
// State-variable baseline
// ---------------------------------------------------------------------------

/// Configuration of the state-variable baseline detector.
#[derive(Debug, Clone)]
pub struct CsndConfig {
    /// Step size of the state variable.
    pub eta: f64,
    /// Retraining triggers when the state underflows this.
    pub threshold: f64,
    pub alpha_region: f64,
    /// Number of recent observations used for retraining.
    pub retrain_window: usize,
    /// Component budget of the retraining.
    pub retrain_j_max: usize,
    pub fuse_threshold: f64,
    pub seed: u64,
}

impl Default for CsndConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            threshold: 0.2,
            alpha_region: 0.95,
            retrain_window: 500,
            retrain_j_max: 5,
            fuse_threshold: 0.5,
            seed: 0,
        }
    }
}

/// Result of one baseline step.
#[derive(Debug, Clone)]
pub struct CsndStep {
    pub classification: Classification,
    pub s: f64,
    pub delta_s: f64,
    pub adapted: bool,
    /// True when the sample fell outside every alpha-region.
    pub suspicious: bool,
}

/// Baseline detector: a scalar state rewarded inside alpha-regions and
/// penalized outside, retrained from a window of recent observations when
/// the state underflows its threshold.
#[derive(Debug)]
pub struct CsndState {
    model: MixtureModel,
    cfg: CsndConfig,
    s: f64,
    window: VecDeque<DVector<f64>>,
    rho: f64,
    step: u64,
    adapt_count: u64,
    events: Vec<DetectionEvent>,
}

impl CsndState {
    pub fn new(model: MixtureModel, cfg: CsndConfig) -> Result<Self> {
        if !model.is_classifier() {
            return Err(Error::NotClassifier);
        }
        let rho = chi2_inverse_cdf(model.dim() as u32, cfg.alpha_region)?;
        Ok(Self {
            model,
            s: 1.0,
            window: VecDeque::with_capacity(cfg.retrain_window),
            rho,
            step: 0,
            adapt_count: 0,
            events: Vec::new(),
            cfg,
        })
    }

    pub fn model(&self) -> &MixtureModel {
        &self.model
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn events(&self) -> &[DetectionEvent] {
        &self.events
    }

    /// Processes one sample: the state variable gains eta weighted by the
    /// responsibility mass inside alpha-regions and loses
    /// eta * alpha/(1-alpha) times the mass outside. Underflowing the
    /// threshold retrains on the window (existing components stay fixed;
    /// the new mixture is fused in) and resets the state.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<CsndStep> {
        if x.len() != self.model.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim(),
                got: x.len(),
            });
        }
        let (gamma, _) = self.model.responsibilities(x)?;
        let distances = self.model.distances_sq(x)?;
        let alpha = self.cfg.alpha_region;
        let penalty_ratio = alpha / (1.0 - alpha);
        let mut delta_s = 0.0;
        for (g, d) in gamma.iter().zip(&distances) {
            let inside = if *d <= self.rho { 1.0 } else { 0.0 };
            delta_s += g * (inside - penalty_ratio * (1.0 - inside));
        }
        delta_s *= self.cfg.eta;
        self.s += delta_s;
        let suspicious = distances.iter().all(|d| *d > self.rho);

        if self.window.len() == self.cfg.retrain_window {
            self.window.pop_front();
        }
        self.window.push_back(x.clone());

        let mut adapted = false;
        if self.s < self.cfg.threshold {
            adapted = self.retrain()?;
            self.s = 1.0;
        }

        let classification = self.model.classify(x)?;
        self.step += 1;
        Ok(CsndStep {
            classification,
            s: self.s,
            delta_s,
            adapted,
            suspicious,
        })
    }

    fn retrain(&mut self) -> Result<bool> {
        self.adapt_count += 1;
        let samples: Vec<DVector<f64>> = self.window.iter().cloned().collect();
        let train_cfg = TrainConfig {
            j_max: self.cfg.retrain_j_max,
            seed: self.cfg.seed.wrapping_add(self.adapt_count),
            ..TrainConfig::default()
        };
        let mut novel = match train(&samples, &train_cfg) {
            Ok(m) => m,
            Err(_) => {
                self.events.push(DetectionEvent {
                    step: self.step,
                    kind: EventKind::AdaptationFailed,
                    component: None,
                    cluster: None,
                    nu_2snd: 0.0,
                    avg_novelty: 0.0,
                    t_ma: Vec::new(),
                    inserted: 0,
                });
                return Ok(false);
            }
        };
        let label = self.model.next_novel_label();
        for c in 0..novel.components().len() {
            novel.set_component_label(c, Some(label.clone()));
        }
        let (fused, report) = self.model.fuse(&novel, self.cfg.fuse_threshold)?;
        self.model = fused;
        self.events.push(DetectionEvent {
            step: self.step,
            kind: EventKind::Adaptation,
            component: None,
            cluster: None,
            nu_2snd: 0.0,
            avg_novelty: 0.0,
            t_ma: Vec::new(),
            inserted: report.inserted.len(),
        });
        Ok(true)
    }
}
