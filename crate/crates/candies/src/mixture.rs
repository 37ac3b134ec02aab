//! Gaussian mixture model with conjugate hyperparameters, classifier
//! conclusions, training and model fusion.
//!
//! Training is an EM scheme over Normal-Inverse-Wishart hyperparameters per
//! component and a Dirichlet-style penalty on the mixing weights. The
//! hyperparameters are what makes run-time adaptation possible: two models
//! can later be fused by combining the sufficient statistics of overlapping
//! components instead of retraining from raw data. Redundant components are
//! starved by the weight penalty and removed by the pruning floor, so the
//! surviving component count adapts to the data within the `j_max` budget.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Gaussian;

/// Conjugate sufficient statistics carried by every component.
///
/// `n_eff` is the effective sample count, `mean_strength` the pseudo-count
/// of the mean prior, and (`scale`, `dof`) the inverse-Wishart scale matrix
/// and degrees of freedom for the covariance.
#[derive(Debug, Clone)]
pub struct ConjugateStats {
    pub n_eff: f64,
    pub mean_strength: f64,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

/// One weighted Gaussian component of the mixture.
#[derive(Debug, Clone)]
pub struct Component {
    pub gaussian: Gaussian,
    pub weight: f64,
    pub hyper: ConjugateStats,
    /// Class probabilities aligned with the model's `class_labels`; empty
    /// until the model is classifier-enabled.
    pub conclusion: Vec<f64>,
    /// Class identifier, or an auto-generated novel-process identifier for
    /// components inserted at run time.
    pub label: Option<String>,
}

/// A Gaussian mixture, optionally extended to a classifier.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    components: Vec<Component>,
    dim: usize,
    class_labels: Vec<String>,
    novel_label_seq: u32,
}

/// The classifier output: the MAP label and the full class posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub posterior: Vec<f64>,
}

/// Training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Maximum number of components.
    pub j_max: usize,
    /// Pseudo-count of the mean prior (kappa_0).
    pub prior_strength: f64,
    /// Scale applied to the covariance prior matrix. 1.0 is a weak prior;
    /// larger values pull component covariances towards the data covariance,
    /// which keeps components fitted on few samples broad enough to compete.
    pub covariance_prior_scale: f64,
    /// Per-component weight penalty in effective samples; components starved
    /// below it are removed. Defaults to the free parameter count of one
    /// component when `None`.
    pub component_penalty: Option<f64>,
    pub max_iter: usize,
    /// Convergence threshold on the change of the mean log-likelihood.
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            j_max: 5,
            prior_strength: 1.0,
            covariance_prior_scale: 1.0,
            component_penalty: None,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_j_max(mut self, j_max: usize) -> Self {
        self.j_max = j_max;
        self
    }

    /// Weight below which a component is pruned: 1/(10 * j_max).
    pub fn prune_floor(&self) -> f64 {
        1.0 / (10.0 * self.j_max as f64)
    }

    fn penalty(&self, dim: usize) -> f64 {
        self.component_penalty
            .unwrap_or_else(|| (dim + dim * (dim + 1) / 2) as f64)
    }
}

/// Which novel components were inserted and which were merged by `fuse`.
#[derive(Debug, Clone, Default)]
pub struct FuseReport {
    /// Indices (in the fused model) of components inserted as new.
    pub inserted: Vec<usize>,
    /// Pairs (novel component index, fused-model component index) that were
    /// merged.
    pub merged: Vec<(usize, usize)>,
}

/// Numerically safe softmax of log-weights. Returns a uniform vector and a
/// degeneracy flag when every entry underflows.
pub(crate) fn softmax_from_logs(logs: &[f64]) -> (Vec<f64>, bool) {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let j = logs.len();
        return (vec![1.0 / j as f64; j], true);
    }
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    (out, false)
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

impl MixtureModel {
    pub fn new(components: Vec<Component>, dim: usize) -> Result<Self> {
        for c in &components {
            if c.gaussian.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.gaussian.dim(),
                });
            }
        }
        let mut model = Self {
            components,
            dim,
            class_labels: Vec::new(),
            novel_label_seq: 0,
        };
        model.renormalize_weights();
        Ok(model)
    }

    /// A model with no components; mostly useful as a fusion argument.
    pub fn empty(dim: usize) -> Self {
        Self {
            components: Vec::new(),
            dim,
            class_labels: Vec::new(),
            novel_label_seq: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn is_classifier(&self) -> bool {
        !self.class_labels.is_empty()
            && self
                .components
                .iter()
                .all(|c| c.conclusion.len() == self.class_labels.len())
    }

    fn renormalize_weights(&mut self) {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if total > 0.0 {
            for c in &mut self.components {
                c.weight /= total;
            }
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-component weighted log densities ln(pi_j) + ln N_j(x).
    fn weighted_log_densities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        self.components
            .iter()
            .map(|c| Ok(c.weight.ln() + c.gaussian.log_density(x)?))
            .collect()
    }

    /// Log of the mixture density, via log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if self.components.is_empty() {
            return Err(Error::EmptyModel);
        }
        Ok(log_sum_exp(&self.weighted_log_densities(x)?))
    }

    /// Responsibilities gamma_j of every component for `x`. The flag reports
    /// the degenerate case where every component density underflowed and a
    /// uniform vector was substituted.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<(Vec<f64>, bool)> {
        if self.components.is_empty() {
            return Err(Error::EmptyModel);
        }
        Ok(softmax_from_logs(&self.weighted_log_densities(x)?))
    }

    /// Squared Mahalanobis distance to every component.
    pub fn distances_sq(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.components
            .iter()
            .map(|c| c.gaussian.mahalanobis_sq(x))
            .collect()
    }

    /// Fits class conclusions from labeled samples, turning the density
    /// model into a classifier. The conclusion of a component is the
    /// responsibility-weighted class frequency among the labeled samples.
    pub fn fit_conclusions(&self, samples: &[DVector<f64>], labels: &[String]) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if self.components.is_empty() {
            return Err(Error::EmptyModel);
        }
        let mut class_labels: Vec<String> = labels.to_vec();
        class_labels.sort();
        class_labels.dedup();

        let j = self.components.len();
        let c_count = class_labels.len();
        let mut per_class = vec![vec![0.0_f64; c_count]; j];
        let mut n_eff = vec![0.0_f64; j];
        for (x, label) in samples.iter().zip(labels) {
            let (gamma, _) = self.responsibilities(x)?;
            let ci = class_labels.binary_search(label).expect("label present");
            for (jj, g) in gamma.iter().enumerate() {
                per_class[jj][ci] += g;
                n_eff[jj] += g;
            }
        }

        let mut model = self.clone();
        model.class_labels = class_labels;
        for (jj, comp) in model.components.iter_mut().enumerate() {
            if n_eff[jj] > 0.0 {
                comp.conclusion = per_class[jj].iter().map(|v| v / n_eff[jj]).collect();
            } else {
                eprintln!(
                    "warning: component {jj} received no responsibility mass; using a uniform conclusion"
                );
                comp.conclusion = vec![1.0 / c_count as f64; c_count];
            }
            let best = comp
                .conclusion
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            comp.label = Some(model.class_labels[best].clone());
        }
        Ok(model)
    }

    /// MAP classification: p(c|x) = sum_j conclusion_{j,c} * gamma_j. Ties
    /// break towards the lowest class index.
    pub fn classify(&self, x: &DVector<f64>) -> Result<Classification> {
        if !self.is_classifier() {
            return Err(Error::NotClassifier);
        }
        let (gamma, _) = self.responsibilities(x)?;
        let mut posterior = vec![0.0_f64; self.class_labels.len()];
        for (comp, g) in self.components.iter().zip(&gamma) {
            for (ci, xi) in comp.conclusion.iter().enumerate() {
                posterior[ci] += xi * g;
            }
        }
        let total: f64 = posterior.iter().sum();
        if total > 0.0 {
            for v in &mut posterior {
                *v /= total;
            }
        }
        let mut best = 0;
        for (i, v) in posterior.iter().enumerate() {
            if *v > posterior[best] {
                best = i;
            }
        }
        Ok(Classification {
            label: self.class_labels[best].clone(),
            posterior,
        })
    }

    /// Fuses a newly trained mixture into this one.
    ///
    /// Every novel component is compared against the (accumulating) model by
    /// Hellinger distance; below `fuse_threshold` it merges into its closest
    /// counterpart by combining the conjugate statistics, otherwise it is
    /// inserted. Mixing weights are renormalized from the effective counts
    /// so they form a distribution again. Inserted components without a
    /// label get a fresh auto-generated one and, on a classifier model, a
    /// one-hot conclusion for it.
    pub fn fuse(&self, novel: &MixtureModel, fuse_threshold: f64) -> Result<(Self, FuseReport)> {
        if novel.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: novel.dim,
            });
        }
        let mut out = self.clone();
        let mut report = FuseReport::default();

        for (ni, nc) in novel.components.iter().enumerate() {
            let mut closest: Option<(usize, f64)> = None;
            for (bi, bc) in out.components.iter().enumerate() {
                let h = bc.gaussian.hellinger_distance(&nc.gaussian)?;
                if closest.is_none_or(|(_, best)| h < best) {
                    closest = Some((bi, h));
                }
            }
            match closest {
                Some((bi, h)) if h < fuse_threshold => {
                    let merged = merge_components(&out.components[bi], nc)?;
                    out.components[bi] = merged;
                    report.merged.push((ni, bi));
                }
                _ => {
                    let mut inserted = nc.clone();
                    let label = match inserted.label.clone() {
                        Some(l) => l,
                        None => {
                            let l = out.next_novel_label();
                            inserted.label = Some(l.clone());
                            l
                        }
                    };
                    if !out.class_labels.is_empty() {
                        let ci = match out.class_labels.iter().position(|l| *l == label) {
                            Some(ci) => ci,
                            None => {
                                out.class_labels.push(label.clone());
                                for c in &mut out.components {
                                    c.conclusion.push(0.0);
                                }
                                out.class_labels.len() - 1
                            }
                        };
                        inserted.conclusion = vec![0.0; out.class_labels.len()];
                        inserted.conclusion[ci] = 1.0;
                    } else {
                        inserted.conclusion = Vec::new();
                    }
                    out.components.push(inserted);
                    report.inserted.push(out.components.len() - 1);
                }
            }
        }

        let total: f64 = out.components.iter().map(|c| c.hyper.n_eff).sum();
        if total > 0.0 {
            for c in &mut out.components {
                c.weight = c.hyper.n_eff / total;
            }
        }
        Ok((out, report))
    }

    pub(crate) fn next_novel_label(&mut self) -> String {
        self.novel_label_seq += 1;
        format!("novel-{}", self.novel_label_seq)
    }

    /// Relabels one component. Used before fusion to tag every component of
    /// a cluster's mixture with the shared novel-process label.
    pub fn set_component_label(&mut self, index: usize, label: Option<String>) {
        self.components[index].label = label;
    }
}

/// Count-weighted merge of two components' conjugate statistics: counts add,
/// means combine by pseudo-count, scale matrices add together with the
/// between-mean scatter term.
fn merge_components(a: &Component, b: &Component) -> Result<Component> {
    let ka = a.hyper.mean_strength;
    let kb = b.hyper.mean_strength;
    let k = ka + kb;
    let mean = (a.gaussian.mean() * ka + b.gaussian.mean() * kb) / k;
    let diff = a.gaussian.mean() - b.gaussian.mean();
    let scale = &a.hyper.scale + &b.hyper.scale + (&diff * diff.transpose()) * (ka * kb / k);
    let dof = a.hyper.dof + b.hyper.dof;
    let dim = mean.len() as f64;
    let covariance = &scale / (dof + dim + 1.0);
    let gaussian = Gaussian::new(mean, covariance)?;
    Ok(Component {
        gaussian,
        weight: a.weight + b.weight,
        hyper: ConjugateStats {
            n_eff: a.hyper.n_eff + b.hyper.n_eff,
            mean_strength: k,
            scale,
            dof,
        },
        conclusion: a.conclusion.clone(),
        label: a.label.clone(),
    })
}

struct Fit {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    weight: f64,
    n_eff: f64,
    kappa: f64,
    nu: f64,
    psi: DMatrix<f64>,
}

/// Trains a mixture on unlabeled samples.
///
/// k-means++ seeding (deterministic for a given seed), a few Lloyd rounds,
/// then EM on the conjugate hyperparameters. The weight penalty starves
/// redundant components and the pruning floor removes them, so the result
/// usually carries fewer than `j_max` components.
pub fn train(samples: &[DVector<f64>], cfg: &TrainConfig) -> Result<MixtureModel> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let dim = samples[0].len();
    if samples.len() < dim + 2 {
        return Err(Error::Data(format!(
            "need at least {} samples for dimension {dim}, got {}",
            dim + 2,
            samples.len()
        )));
    }
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample values".into()));
        }
    }
    if cfg.j_max == 0 {
        return Err(Error::InvalidParameter("j_max must be >= 1".into()));
    }

    let n = samples.len();
    let nf = n as f64;

    // Global moments define the priors.
    let mut mu0 = DVector::zeros(dim);
    for s in samples {
        mu0 += s;
    }
    mu0 /= nf;
    let mut var = DVector::zeros(dim);
    for s in samples {
        let d = s - &mu0;
        for i in 0..dim {
            var[i] += d[i] * d[i];
        }
    }
    var /= nf;
    let mut psi0 = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        psi0[(i, i)] = var[i].max(1e-12) * cfg.covariance_prior_scale;
    }
    let kappa0 = cfg.prior_strength;
    let nu0 = dim as f64 + 2.0;
    let penalty = cfg.penalty(dim);
    let floor = cfg.prune_floor();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.j_max.min(n);
    let mut centers = kmeans_pp_seed(samples, k, &mut rng);
    lloyd_refine(samples, &mut centers, 20);
    let j0 = centers.len();

    // Fits one component from its responsibility column.
    let fit_component = |gamma: &DMatrix<f64>, jj: usize| -> Fit {
        let n_j: f64 = (0..n).map(|i| gamma[(i, jj)]).sum();
        let mut xbar = DVector::zeros(dim);
        for (i, s) in samples.iter().enumerate() {
            xbar += s * gamma[(i, jj)];
        }
        if n_j > 0.0 {
            xbar /= n_j;
        } else {
            xbar = mu0.clone();
        }
        let mut scatter = DMatrix::zeros(dim, dim);
        for (i, s) in samples.iter().enumerate() {
            let g = gamma[(i, jj)];
            if g > 0.0 {
                let d = s - &xbar;
                scatter.ger(g, &d, &d, 1.0);
            }
        }
        let kappa = kappa0 + n_j;
        let mean = (&mu0 * kappa0 + &xbar * n_j) / kappa;
        let nu = nu0 + n_j;
        let dprior = &xbar - &mu0;
        let psi = &psi0 + &scatter + (&dprior * dprior.transpose()) * (kappa0 * n_j / kappa);
        let cov = &psi / (nu + dim as f64 + 1.0);
        Fit {
            mean,
            cov,
            weight: 0.0,
            n_eff: n_j,
            kappa,
            nu,
            psi,
        }
    };

    // Penalized weights: components starve when their support drops to the
    // penalty level; weights renormalize over what is left.
    let reweigh = |fits: &mut Vec<Fit>| {
        let raw_total: f64 = fits.iter().map(|f| (f.n_eff - penalty).max(0.0)).sum();
        let n_total: f64 = fits.iter().map(|f| f.n_eff).sum();
        for f in fits.iter_mut() {
            f.weight = if raw_total > 0.0 {
                (f.n_eff - penalty).max(0.0) / raw_total
            } else {
                f.n_eff / n_total
            };
        }
    };

    // Every component starts at its seed mean with the broad global
    // covariance and a uniform weight; the overlap forces real competition
    // from the first sweep instead of freezing the k-means tiling.
    let global_cov = {
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = var[i].max(1e-12);
        }
        m
    };
    let mut fits: Vec<Fit> = centers
        .iter()
        .map(|c| Fit {
            mean: c.clone(),
            cov: global_cov.clone(),
            weight: 1.0 / j0 as f64,
            n_eff: nf / j0 as f64,
            kappa: kappa0 + nf / j0 as f64,
            nu: nu0 + nf / j0 as f64,
            psi: global_cov.clone(),
        })
        .collect();

    // Per-sample per-component log densities, kept in sync with `fits`.
    let mut ld = DMatrix::zeros(n, fits.len());
    for (jj, f) in fits.iter().enumerate() {
        let g = Gaussian::new(f.mean.clone(), f.cov.clone())?;
        for (i, s) in samples.iter().enumerate() {
            ld[(i, jj)] = g.log_density(s)?;
        }
    }

    let responsibilities = |ld: &DMatrix<f64>, fits: &[Fit], gamma: &mut DMatrix<f64>| {
        let j = fits.len();
        let mut logs = vec![0.0_f64; j];
        for i in 0..n {
            for (jj, f) in fits.iter().enumerate() {
                logs[jj] = f.weight.ln() + ld[(i, jj)];
            }
            let (resp, _) = softmax_from_logs(&logs);
            for jj in 0..j {
                gamma[(i, jj)] = resp[jj];
            }
        }
    };

    // Component-wise EM sweeps: refitting one component at a time (with
    // weights refreshed and starved components removed immediately) lets a
    // component absorb a redundant neighbor before that neighbor reacts,
    // which plain simultaneous updates cannot do from symmetric states.
    let mut gamma;
    let mut prev_ll = f64::NEG_INFINITY;
    for _sweep in 0..cfg.max_iter {
        let mut jj = 0;
        while jj < fits.len() {
            gamma = DMatrix::zeros(n, fits.len());
            responsibilities(&ld, &fits, &mut gamma);
            let mut fit = fit_component(&gamma, jj);
            fit.weight = fits[jj].weight;
            let g = Gaussian::new(fit.mean.clone(), fit.cov.clone())?;
            for (i, s) in samples.iter().enumerate() {
                ld[(i, jj)] = g.log_density(s)?;
            }
            fits[jj] = fit;
            for (k, f) in fits.iter_mut().enumerate() {
                f.n_eff = (0..n).map(|i| gamma[(i, k)]).sum();
            }
            reweigh(&mut fits);

            // Remove starved components (never the strongest).
            let strongest = argmax_by(&fits, |f| f.n_eff);
            let mut removed_before_jj = 0;
            let mut k = 0;
            let mut fits_next = Vec::with_capacity(fits.len());
            for (idx, f) in fits.drain(..).enumerate() {
                let starved = f.n_eff <= penalty && idx != strongest;
                if starved {
                    ld = ld.remove_column(k);
                    if idx <= jj {
                        removed_before_jj += 1;
                    }
                } else {
                    fits_next.push(f);
                    k += 1;
                }
            }
            fits = fits_next;
            reweigh(&mut fits);
            jj = jj + 1 - removed_before_jj;
        }

        // Sweep log-likelihood for convergence.
        let mut ll = 0.0;
        let mut logs = vec![0.0_f64; fits.len()];
        for i in 0..n {
            for (k, f) in fits.iter().enumerate() {
                logs[k] = f.weight.ln() + ld[(i, k)];
            }
            ll += log_sum_exp(&logs);
        }
        ll /= nf;
        if (ll - prev_ll).abs() < cfg.tol {
            break;
        }
        prev_ll = ll;
    }

    // Final pass with a shared responsibility matrix so counts, weights and
    // hyperparameters are mutually consistent, then the weight floor.
    gamma = DMatrix::zeros(n, fits.len());
    responsibilities(&ld, &fits, &mut gamma);
    let mut fits: Vec<Fit> = (0..fits.len()).map(|jj| fit_component(&gamma, jj)).collect();
    reweigh(&mut fits);

    let strongest = argmax_by(&fits, |f| f.n_eff);
    let total_n: f64 = fits.iter().map(|f| f.n_eff).sum();
    let fits: Vec<Fit> = fits
        .into_iter()
        .enumerate()
        .filter(|(i, f)| *i == strongest || f.n_eff / total_n >= floor)
        .map(|(_, f)| f)
        .collect();

    let total_n: f64 = fits.iter().map(|f| f.n_eff).sum();
    let mut components = Vec::with_capacity(fits.len());
    for f in fits {
        components.push(Component {
            gaussian: Gaussian::new(f.mean, f.cov)?,
            weight: f.n_eff / total_n,
            hyper: ConjugateStats {
                n_eff: f.n_eff,
                mean_strength: f.kappa,
                scale: f.psi,
                dof: f.nu,
            },
            conclusion: Vec::new(),
            label: None,
        });
    }
    MixtureModel::new(components, dim)
}

fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> usize {
    let mut best = 0;
    for i in 1..items.len() {
        if key(&items[i]) > key(&items[best]) {
            best = i;
        }
    }
    best
}

fn nearest_center(x: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (x - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp_seed<R: Rng>(samples: &[DVector<f64>], k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = samples.len();
    let mut centers = vec![samples[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = samples
        .iter()
        .map(|s| (s - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                r -= d;
                if r <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(samples[idx].clone());
        let newest = centers.last().unwrap();
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min((s - newest).norm_squared());
        }
    }
    centers
}

fn lloyd_refine(samples: &[DVector<f64>], centers: &mut Vec<DVector<f64>>, max_iter: usize) {
    let dim = samples[0].len();
    let mut assign = vec![usize::MAX; samples.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, s) in samples.iter().enumerate() {
            let a = nearest_center(s, centers).0;
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![DVector::<f64>::zeros(dim); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, s) in samples.iter().enumerate() {
            sums[assign[i]] += s;
            counts[assign[i]] += 1;
        }
        let mut new_centers = Vec::with_capacity(centers.len());
        for (sum, count) in sums.into_iter().zip(counts) {
            if count > 0 {
                new_centers.push(sum / count as f64);
            }
        }
        if new_centers.len() != centers.len() {
            // A center went empty; force re-assignment on the shrunk set.
            assign.iter_mut().for_each(|a| *a = usize::MAX);
        }
        *centers = new_centers;
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const MODEL_DOC_VERSION: u32 = 1;

/// Flat, versioned JSON form of a mixture model. Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureDocument {
    pub version: u32,
    pub dim: usize,
    pub class_labels: Vec<String>,
    pub novel_label_seq: u32,
    pub components: Vec<ComponentDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentDocument {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub weight: f64,
    pub n_eff: f64,
    pub mean_strength: f64,
    pub scale: Vec<f64>,
    pub dof: f64,
    pub conclusion: Vec<f64>,
    pub label: Option<String>,
}

impl MixtureModel {
    pub fn to_document(&self) -> MixtureDocument {
        MixtureDocument {
            version: MODEL_DOC_VERSION,
            dim: self.dim,
            class_labels: self.class_labels.clone(),
            novel_label_seq: self.novel_label_seq,
            components: self
                .components
                .iter()
                .map(|c| ComponentDocument {
                    mean: c.gaussian.mean().iter().cloned().collect(),
                    covariance: row_major(c.gaussian.covariance()),
                    weight: c.weight,
                    n_eff: c.hyper.n_eff,
                    mean_strength: c.hyper.mean_strength,
                    scale: row_major(&c.hyper.scale),
                    dof: c.hyper.dof,
                    conclusion: c.conclusion.clone(),
                    label: c.label.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &MixtureDocument) -> Result<Self> {
        if doc.version != MODEL_DOC_VERSION {
            return Err(Error::Data(format!(
                "unsupported model document version {}",
                doc.version
            )));
        }
        let dim = doc.dim;
        let mut components = Vec::with_capacity(doc.components.len());
        for c in &doc.components {
            if c.mean.len() != dim || c.covariance.len() != dim * dim || c.scale.len() != dim * dim
            {
                return Err(Error::Data("component dimensions inconsistent".into()));
            }
            components.push(Component {
                // The stored covariance is already regularized; factor it
                // directly so that load(save(m)) round-trips losslessly.
                gaussian: Gaussian::from_regularized(
                    DVector::from_vec(c.mean.clone()),
                    DMatrix::from_row_slice(dim, dim, &c.covariance),
                )?,
                weight: c.weight,
                hyper: ConjugateStats {
                    n_eff: c.n_eff,
                    mean_strength: c.mean_strength,
                    scale: DMatrix::from_row_slice(dim, dim, &c.scale),
                    dof: c.dof,
                },
                conclusion: c.conclusion.clone(),
                label: c.label.clone(),
            });
        }
        Ok(Self {
            components,
            dim,
            class_labels: doc.class_labels.clone(),
            novel_label_seq: doc.novel_label_seq,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: MixtureDocument = serde_json::from_str(json)?;
        Self::from_document(&doc)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
