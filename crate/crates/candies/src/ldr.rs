//! Low-density-region novelty detection: the suspicion test against the
//! model's alpha-regions and an incremental density-based clustering of
//! suspicious samples in a fixed-capacity ring buffer.
//!
//! A sample is suspicious when it lies outside every component's
//! alpha-region, i.e. its squared Mahalanobis distance exceeds the
//! chi-squared quantile rho for all components. Suspicious samples go into
//! the buffer, where single-linkage epsilon-neighborhoods are maintained
//! incrementally: after every insertion the cluster id is propagated through
//! the epsilon-graph by breadth-first search, so cluster assignments always
//! equal the connected components of the epsilon-graph over the buffer
//! (singletons count as noise). A cluster reaching `min_pts` members signals
//! a novel process.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::stats::chi2_inverse_cdf;

/// Parameters of the two-stage low-density detector.
#[derive(Debug, Clone)]
pub struct LdrConfig {
    /// Mass of a component's alpha-region.
    pub alpha: f64,
    /// Neighbor radius of the clustering (Euclidean).
    pub epsilon: f64,
    /// Cluster size that triggers the adaptation criterion.
    pub min_pts: usize,
    /// Ring buffer capacity.
    pub buffer_capacity: usize,
}

impl Default for LdrConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            epsilon: 2.0,
            min_pts: 10,
            buffer_capacity: 100,
        }
    }
}

impl LdrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::InvalidParameter("alpha must be in (0,1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter("epsilon must be > 0".into()));
        }
        if self.min_pts < 2 {
            return Err(Error::InvalidParameter("min_pts must be >= 2".into()));
        }
        if self.buffer_capacity < self.min_pts {
            return Err(Error::InvalidParameter(
                "buffer_capacity must be >= min_pts".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of the first-stage suspicion test.
#[derive(Debug, Clone, Copy)]
pub struct Suspicion {
    pub suspicious: bool,
    /// The squared-distance threshold rho of the alpha-region.
    pub rho: f64,
}

/// First stage: `x` is suspicious iff its squared Mahalanobis distance
/// exceeds rho for every component.
pub fn is_suspicious(model: &MixtureModel, x: &DVector<f64>, alpha: f64) -> Result<Suspicion> {
    if model.components().is_empty() {
        return Err(Error::EmptyModel);
    }
    let rho = chi2_inverse_cdf(model.dim() as u32, alpha)?;
    let suspicious = model.distances_sq(x)?.iter().all(|d| *d > rho);
    Ok(Suspicion { suspicious, rho })
}

#[derive(Debug, Clone)]
struct Entry {
    sample: DVector<f64>,
    arrival: u64,
    cluster: Option<u32>,
}

/// What happened during one insertion.
#[derive(Debug, Clone)]
pub struct InsertOutcome {
    /// Cluster the new sample ended up in (`None` = noise).
    pub cluster: Option<u32>,
    /// The evicted oldest sample and its cluster, if the buffer was full.
    pub evicted: Option<(DVector<f64>, Option<u32>)>,
    /// Cluster satisfying the adaptation criterion after this insertion.
    pub detected: Option<u32>,
}

/// Ring buffer of suspicious samples with incremental cluster labels.
#[derive(Debug, Clone)]
pub struct SuspicionBuffer {
    entries: VecDeque<Entry>,
    registry: BTreeMap<u32, usize>,
    next_cluster: u32,
    next_arrival: u64,
    capacity: usize,
    epsilon: f64,
    min_pts: usize,
}

impl SuspicionBuffer {
    pub fn new(cfg: &LdrConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            entries: VecDeque::with_capacity(cfg.buffer_capacity),
            registry: BTreeMap::new(),
            next_cluster: 0,
            next_arrival: 0,
            capacity: cfg.buffer_capacity,
            epsilon: cfg.epsilon,
            min_pts: cfg.min_pts,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Map cluster id -> member count.
    pub fn cluster_sizes(&self) -> &BTreeMap<u32, usize> {
        &self.registry
    }

    pub fn noise_count(&self) -> usize {
        self.entries.iter().filter(|e| e.cluster.is_none()).count()
    }

    /// Buffer contents in arrival order, as (sample, cluster) pairs.
    pub fn snapshot(&self) -> Vec<(DVector<f64>, Option<u32>)> {
        self.entries
            .iter()
            .map(|e| (e.sample.clone(), e.cluster))
            .collect()
    }

    /// Second stage: insert a suspicious sample, evicting the oldest entry
    /// first when full, then join/create/merge clusters through the
    /// epsilon-neighborhood.
    pub fn insert(&mut self, x: DVector<f64>) -> InsertOutcome {
        let evicted = if self.entries.len() == self.capacity {
            self.evict_oldest()
        } else {
            None
        };

        let arrival = self.next_arrival;
        self.next_arrival += 1;
        self.entries.push_back(Entry {
            sample: x,
            arrival,
            cluster: None,
        });
        let new_idx = self.entries.len() - 1;

        // Nearest neighbor by Euclidean distance, linear scan.
        let mut nn: Option<(usize, f64)> = None;
        for i in 0..new_idx {
            let d = (&self.entries[i].sample - &self.entries[new_idx].sample).norm();
            if nn.is_none_or(|(_, best)| d < best) {
                nn = Some((i, d));
            }
        }

        let mut cluster = None;
        if let Some((nn_idx, dist)) = nn {
            if dist <= self.epsilon {
                let cid = match self.entries[nn_idx].cluster {
                    None => {
                        let cid = self.next_cluster;
                        self.next_cluster += 1;
                        self.entries[nn_idx].cluster = Some(cid);
                        self.registry.insert(cid, 1);
                        cid
                    }
                    Some(cid) => cid,
                };
                self.assign(new_idx, Some(cid));
                self.propagate(new_idx, cid);
                cluster = Some(cid);
            }
        }

        let detected =
            cluster.filter(|cid| self.registry.get(cid).copied().unwrap_or(0) >= self.min_pts);
        InsertOutcome {
            cluster,
            evicted,
            detected,
        }
    }

    /// Removes a detected cluster and returns its members in arrival order.
    pub fn extract_cluster(&mut self, cluster: u32) -> Result<Vec<DVector<f64>>> {
        if !self.registry.contains_key(&cluster) {
            return Err(Error::UnknownCluster(cluster));
        }
        let mut members = Vec::new();
        let mut retained = VecDeque::with_capacity(self.entries.len());
        for e in self.entries.drain(..) {
            if e.cluster == Some(cluster) {
                members.push(e.sample);
            } else {
                retained.push_back(e);
            }
        }
        self.entries = retained;
        self.registry.remove(&cluster);
        Ok(members)
    }

    /// The low-density novelty measure: 1 - (clusters + noise)/entries, and
    /// 0 for an empty buffer.
    pub fn nu_2snd(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let c = self.registry.len();
        let noise = self.noise_count();
        1.0 - (c + noise) as f64 / self.entries.len() as f64
    }

    fn assign(&mut self, idx: usize, cluster: Option<u32>) {
        let old = self.entries[idx].cluster;
        if old == cluster {
            return;
        }
        if let Some(cid) = old {
            let count = self.registry.get_mut(&cid).expect("registered cluster");
            *count -= 1;
            if *count == 0 {
                self.registry.remove(&cid);
            }
        }
        if let Some(cid) = cluster {
            *self.registry.entry(cid).or_insert(0) += 1;
        }
        self.entries[idx].cluster = cluster;
    }

    /// Breadth-first search over the epsilon-graph from `start`, pulling
    /// every reachable entry into `cid`. Merges clusters that become
    /// connected through the new sample.
    fn propagate(&mut self, start: usize, cid: u32) {
        let mut queue = VecDeque::from([start]);
        let mut enqueued = vec![false; self.entries.len()];
        enqueued[start] = true;
        while let Some(i) = queue.pop_front() {
            for k in 0..self.entries.len() {
                if enqueued[k] {
                    continue;
                }
                let d = (&self.entries[i].sample - &self.entries[k].sample).norm();
                if d <= self.epsilon {
                    enqueued[k] = true;
                    self.assign(k, Some(cid));
                    queue.push_back(k);
                }
            }
        }
    }

    /// Removes the oldest entry. If it belonged to a cluster, that cluster's
    /// remaining members are re-clustered from scratch: the removal may have
    /// split the cluster or dropped it below two members.
    fn evict_oldest(&mut self) -> Option<(DVector<f64>, Option<u32>)> {
        let old = self.entries.pop_front()?;
        if let Some(cid) = old.cluster {
            {
                let count = self.registry.get_mut(&cid).expect("registered cluster");
                *count -= 1;
                if *count == 0 {
                    self.registry.remove(&cid);
                }
            }
            let members: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].cluster == Some(cid))
                .collect();
            if !members.is_empty() {
                self.recluster_members(cid, &members);
            }
        }
        Some((old.sample, old.cluster))
    }

    /// Recomputes the epsilon-graph components among `members` (all labeled
    /// `cid`). The component holding the earliest arrival keeps the id;
    /// other components of two or more get fresh ids; singletons drop to
    /// noise.
    fn recluster_members(&mut self, cid: u32, members: &[usize]) {
        let m = members.len();
        let mut comp = vec![usize::MAX; m];
        let mut n_comps = 0;
        for i in 0..m {
            if comp[i] != usize::MAX {
                continue;
            }
            let label = n_comps;
            n_comps += 1;
            let mut queue = VecDeque::from([i]);
            comp[i] = label;
            while let Some(a) = queue.pop_front() {
                for b in 0..m {
                    if comp[b] != usize::MAX {
                        continue;
                    }
                    let d = (&self.entries[members[a]].sample - &self.entries[members[b]].sample)
                        .norm();
                    if d <= self.epsilon {
                        comp[b] = label;
                        queue.push_back(b);
                    }
                }
            }
        }
        if n_comps == 1 && m >= 2 {
            return; // cluster stayed connected
        }

        let mut sizes = vec![0usize; n_comps];
        for &c in &comp {
            sizes[c] += 1;
        }
        let keeper = (0..m)
            .min_by_key(|&i| self.entries[members[i]].arrival)
            .map(|i| comp[i])
            .expect("non-empty members");

        let mut ids: Vec<Option<u32>> = vec![None; n_comps];
        for (c, id) in ids.iter_mut().enumerate() {
            *id = if sizes[c] < 2 {
                None
            } else if c == keeper {
                Some(cid)
            } else {
                let fresh = self.next_cluster;
                self.next_cluster += 1;
                Some(fresh)
            };
        }
        for i in 0..m {
            self.assign(members[i], ids[comp[i]]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(epsilon: f64, min_pts: usize, capacity: usize) -> LdrConfig {
        LdrConfig {
            alpha: 0.95,
            epsilon,
            min_pts,
            buffer_capacity: capacity,
        }
    }

    fn v(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    /// Offline oracle: connected components of the epsilon-graph; components
    /// of size one are noise. Returns, per entry, a canonical component
    /// representative (lowest entry index) or None for noise.
    fn oracle_components(points: &[DVector<f64>], epsilon: f64) -> Vec<Option<usize>> {
        let n = points.len();
        let mut comp: Vec<Option<usize>> = vec![None; n];
        let mut seen = vec![false; n];
        for i in 0..n {
            if seen[i] {
                continue;
            }
            let mut stack = vec![i];
            let mut group = Vec::new();
            seen[i] = true;
            while let Some(a) = stack.pop() {
                group.push(a);
                for b in 0..n {
                    if !seen[b] && (&points[a] - &points[b]).norm() <= epsilon {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
            if group.len() >= 2 {
                let rep = *group.iter().min().unwrap();
                for g in group {
                    comp[g] = Some(rep);
                }
            }
        }
        comp
    }

    /// Asserts the buffer's clustering equals the oracle partition.
    fn assert_matches_oracle(buf: &SuspicionBuffer) {
        let snap = buf.snapshot();
        let points: Vec<DVector<f64>> = snap.iter().map(|(s, _)| s.clone()).collect();
        let oracle = oracle_components(&points, buf.epsilon);
        for (i, (_, cluster)) in snap.iter().enumerate() {
            assert_eq!(
                cluster.is_none(),
                oracle[i].is_none(),
                "noise mismatch at entry {i}"
            );
        }
        for i in 0..snap.len() {
            for j in 0..snap.len() {
                if oracle[i].is_some() || oracle[j].is_some() {
                    assert_eq!(
                        snap[i].1 == snap[j].1,
                        oracle[i] == oracle[j],
                        "partition mismatch between {i} and {j}"
                    );
                }
            }
        }
        for (cid, count) in buf.cluster_sizes() {
            let actual = snap.iter().filter(|(_, c)| *c == Some(*cid)).count();
            assert_eq!(actual, *count, "registry drift for cluster {cid}");
        }
    }

    #[test]
    fn first_insert_is_noise() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 3, 10)).unwrap();
        let out = buf.insert(v(0.0, 0.0));
        assert_eq!(out.cluster, None);
        assert_eq!(out.detected, None);
        assert_eq!(buf.noise_count(), 1);
    }

    #[test]
    fn two_noise_points_within_epsilon_form_cluster() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 3, 10)).unwrap();
        buf.insert(v(0.0, 0.0));
        let out = buf.insert(v(0.5, 0.0));
        assert!(out.cluster.is_some());
        assert_eq!(buf.cluster_sizes().values().sum::<usize>(), 2);
        assert_eq!(buf.noise_count(), 0);
    }

    #[test]
    fn chain_shares_one_cluster() {
        // a-b and b-c within epsilon, a-c beyond: all three connected.
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 5, 10)).unwrap();
        buf.insert(v(0.0, 0.0));
        buf.insert(v(1.8, 0.0));
        let out = buf.insert(v(0.9, 0.0)); // bridges both
        let cid = out.cluster.unwrap();
        assert_eq!(buf.cluster_sizes()[&cid], 3);
        assert_matches_oracle(&buf);
    }

    #[test]
    fn detection_at_min_pts() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 10, 50)).unwrap();
        let mut detected = None;
        for i in 0..10 {
            let out = buf.insert(v(i as f64 * 0.5, 0.0));
            detected = out.detected;
        }
        assert!(detected.is_some(), "10th connected point must trigger");
        assert_eq!(buf.cluster_sizes()[&detected.unwrap()], 10);
    }

    #[test]
    fn eviction_when_full() {
        let mut buf = SuspicionBuffer::new(&cfg(0.1, 2, 3)).unwrap();
        buf.insert(v(0.0, 0.0));
        buf.insert(v(10.0, 0.0));
        buf.insert(v(20.0, 0.0));
        let out = buf.insert(v(30.0, 0.0));
        let (evicted, cluster) = out.evicted.unwrap();
        assert_eq!(evicted, v(0.0, 0.0));
        assert_eq!(cluster, None);
        assert_eq!(buf.len(), 3);
    }

    #[test]
    fn eviction_splits_chain_cluster() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 3, 3)).unwrap();
        buf.insert(v(0.9, 0.0)); // bridge (oldest)
        buf.insert(v(0.0, 0.0));
        buf.insert(v(1.8, 0.0));
        assert_eq!(buf.cluster_sizes().len(), 1);
        // Inserting a far point evicts the bridge; the two leftovers split.
        buf.insert(v(50.0, 50.0));
        assert_matches_oracle(&buf);
        assert_eq!(buf.noise_count(), 3);
        assert!(buf.cluster_sizes().is_empty());
    }

    #[test]
    fn extract_cluster_removes_members_only() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 3, 20)).unwrap();
        for i in 0..4 {
            buf.insert(v(i as f64 * 0.5, 0.0));
        }
        for i in 0..3 {
            buf.insert(v(i as f64 * 0.5, 30.0));
        }
        buf.insert(v(100.0, 100.0)); // noise
        let cids: Vec<u32> = buf.cluster_sizes().keys().cloned().collect();
        assert_eq!(cids.len(), 2);
        let members = buf.extract_cluster(cids[0]).unwrap();
        assert_eq!(members.len(), 4);
        // Arrival order preserved.
        assert_eq!(members[0], v(0.0, 0.0));
        assert_eq!(members[3], v(1.5, 0.0));
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.noise_count(), 1);
        assert_eq!(buf.cluster_sizes()[&cids[1]], 3);
        assert_matches_oracle(&buf);
    }

    #[test]
    fn extract_unknown_cluster_errors() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 3, 10)).unwrap();
        assert!(matches!(
            buf.extract_cluster(7),
            Err(Error::UnknownCluster(7))
        ));
    }

    #[test]
    fn merging_clusters_via_bridge() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 20, 30)).unwrap();
        buf.insert(v(0.0, 0.0));
        buf.insert(v(0.5, 0.0));
        buf.insert(v(3.0, 0.0));
        buf.insert(v(3.5, 0.0));
        assert_eq!(buf.cluster_sizes().len(), 2);
        buf.insert(v(1.75, 0.0)); // 1.25 away from both sides: stays noise
        assert_eq!(buf.cluster_sizes().len(), 2);
        assert_eq!(buf.noise_count(), 1);
        buf.insert(v(1.4, 0.0)); // links 0.5 and 1.75
        assert_matches_oracle(&buf);
        buf.insert(v(2.3, 0.0)); // links up to 3.0: everything merges
        assert_matches_oracle(&buf);
        assert_eq!(buf.cluster_sizes().len(), 1);
        assert_eq!(buf.cluster_sizes().values().next(), Some(&7));
    }

    #[test]
    fn nu_2snd_values() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 200, 200)).unwrap();
        assert_eq!(buf.nu_2snd(), 0.0);
        // 90-member cluster plus 10 noise points in a 100-entry buffer.
        for i in 0..90 {
            buf.insert(v(i as f64 * 0.5, 0.0));
        }
        for i in 0..10 {
            buf.insert(v(1000.0 + 100.0 * i as f64, 500.0));
        }
        assert_eq!(buf.len(), 100);
        assert!((buf.nu_2snd() - 0.89).abs() < 1e-12);
    }

    #[test]
    fn nu_2snd_all_noise_is_zero() {
        let mut buf = SuspicionBuffer::new(&cfg(0.5, 5, 50)).unwrap();
        for i in 0..20 {
            buf.insert(v(100.0 * i as f64, 0.0));
        }
        assert_eq!(buf.nu_2snd(), 0.0);
    }

    #[test]
    fn nu_2snd_increases_when_noise_joins_cluster() {
        let mut buf = SuspicionBuffer::new(&cfg(1.0, 50, 50)).unwrap();
        buf.insert(v(0.0, 0.0));
        buf.insert(v(0.5, 0.0));
        buf.insert(v(10.0, 0.0)); // noise
        let before = buf.nu_2snd();
        buf.insert(v(9.5, 0.0)); // pulls the noise point into a new cluster
        assert!(buf.nu_2snd() > before);
    }

    #[test]
    fn random_stream_matches_oracle_after_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut buf = SuspicionBuffer::new(&cfg(0.7, 10, 40)).unwrap();
        for _ in 0..300 {
            let x = v(
                rng.random_range(-4.0..4.0_f64).round(),
                rng.random_range(-4.0..4.0_f64).round(),
            );
            let out = buf.insert(x);
            assert_matches_oracle(&buf);
            if let Some(cid) = out.detected {
                let members = buf.extract_cluster(cid).unwrap();
                assert!(members.len() >= 10);
                assert_matches_oracle(&buf);
            }
        }
    }

    #[test]
    fn detection_monotone_in_min_pts() {
        // With a fixed stream, decreasing min_pts never delays detection.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stream: Vec<DVector<f64>> = (0..200)
            .map(|_| v(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let first_detection = |min_pts: usize| -> Option<usize> {
            let mut buf = SuspicionBuffer::new(&cfg(1.0, min_pts, 100)).unwrap();
            for (i, x) in stream.iter().enumerate() {
                if buf.insert(x.clone()).detected.is_some() {
                    return Some(i);
                }
            }
            None
        };
        let mut prev = first_detection(12);
        for min_pts in [10, 8, 6, 4, 2] {
            let cur = first_detection(min_pts);
            match (prev, cur) {
                (Some(p), Some(c)) => assert!(c <= p),
                (Some(_), None) => panic!("lower min_pts lost a detection"),
                _ => {}
            }
            prev = cur;
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.0, 3, 10).validate().is_err());
        assert!(LdrConfig {
            alpha: 1.0,
            ..LdrConfig::default()
        }
        .validate()
        .is_err());
        assert!(cfg(1.0, 1, 10).validate().is_err());
        assert!(cfg(1.0, 10, 5).validate().is_err());
        assert!(cfg(1.0, 10, 10).validate().is_ok());
    }
}
