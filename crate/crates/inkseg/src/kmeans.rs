//! Weighted k-means baseline: cluster points into exactly `c` clusters on
//! `(weight_x·x, weight_y·y, weight_stroke·stroke_index)` features with
//! Lloyd's algorithm, then order clusters into character slots by horizontal
//! position.
//!
//! Coordinates are normalized ([`crate::ink::normalize`]) before weighting,
//! so the default weights apply to an ink of unit height.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CtcSpikes;
use crate::ink::{normalize, LabeledSample, Segmentation};

/// Centroid initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    /// k-means++ seeding.
    Random,
    /// Feature rows at the CTC spike indices, topped up with k-means++ when
    /// there are fewer spikes than characters.
    CtcSpikes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub weight_x: f64,
    pub weight_y: f64,
    pub weight_stroke: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: KMeansInit,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            weight_x: 1.0,
            weight_y: 0.04,
            weight_stroke: 224.0,
            max_iters: 300,
            tol: 1e-6,
            init: KMeansInit::Random,
            seed: 0,
        }
    }
}

impl KMeansConfig {
    fn validate(&self) -> Result<()> {
        if self.weight_x < 0.0 || self.weight_y < 0.0 || self.weight_stroke < 0.0 {
            return Err(Error::Parameter("k-means weights must be non-negative".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Parameter("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Final clustering state: weighted centroids, per-point cluster ids, and
/// the sum of weighted squared distances.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub centroids: Vec<[f64; 3]>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let ds = a[2] - b[2];
    dx * dx + dy * dy + ds * ds
}

/// Weighted feature rows for every point of the (already normalized) ink.
fn feature_rows(sample: &LabeledSample, cfg: &KMeansConfig) -> Vec<[f64; 3]> {
    sample
        .ink
        .iter_points()
        .map(|(si, _, pt)| {
            [
                cfg.weight_x * pt.x,
                cfg.weight_y * pt.y,
                cfg.weight_stroke * si as f64,
            ]
        })
        .collect()
}

/// Seed `c` centroids. `spikes` is consulted only in [`KMeansInit::CtcSpikes`]
/// mode, where the feature rows at spike indices come first (truncated to
/// `c`), and any remainder is drawn by k-means++ from the non-spike points.
pub fn init_centroids(
    points: &[[f64; 3]],
    c: usize,
    cfg: &KMeansConfig,
    spikes: Option<&CtcSpikes>,
) -> Result<Vec<[f64; 3]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids: Vec<[f64; 3]> = Vec::with_capacity(c);
    let mut taken: Vec<bool> = vec![false; points.len()];

    if matches!(cfg.init, KMeansInit::CtcSpikes) {
        let spikes = spikes.filter(|s| !s.is_empty()).ok_or_else(|| {
            Error::Input("ctc_spikes initialization requires at least one spike".into())
        })?;
        for (idx, _) in spikes.entries().iter().take(c) {
            centroids.push(points[*idx]);
            taken[*idx] = true;
        }
    }

    // k-means++ for the remainder: each next centroid is drawn with
    // probability proportional to the squared distance to the closest
    // already-chosen centroid.
    while centroids.len() < c {
        let candidates: Vec<usize> = (0..points.len()).filter(|&i| !taken[i]).collect();
        let pool: &[usize] = if candidates.is_empty() {
            // Fewer distinct points than clusters; reuse is allowed, the
            // empty-cluster repair keeps every slot populated later.
            &Vec::from_iter(0..points.len())
        } else {
            &candidates
        };
        let chosen = if centroids.is_empty() {
            pool[rng.random_range(0..pool.len())]
        } else {
            let d2: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    centroids
                        .iter()
                        .map(|ctr| dist2(&points[i], ctr))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            if total > 0.0 {
                let mut u = rng.random_range(0.0..1.0) * total;
                let mut pick = pool[pool.len() - 1];
                for (i, w) in pool.iter().zip(&d2) {
                    if u < *w {
                        pick = *i;
                        break;
                    }
                    u -= w;
                }
                pick
            } else {
                pool[rng.random_range(0..pool.len())]
            }
        };
        centroids.push(points[chosen]);
        taken[chosen] = true;
    }
    Ok(centroids)
}

/// Run Lloyd's algorithm. Returns the converged state plus the inertia after
/// each assignment step, which is non-increasing.
pub fn kmeans_cluster(
    sample: &LabeledSample,
    cfg: &KMeansConfig,
) -> Result<(ClusterState, Vec<f64>)> {
    cfg.validate()?;
    let transcription = sample.require_transcription()?;
    let c = transcription.len();
    let normalized = LabeledSample {
        ink: normalize(&sample.ink),
        ..sample.clone()
    };
    let p = normalized.ink.point_count();
    if c > p {
        return Err(Error::Input(format!(
            "cannot form {c} clusters from {p} points"
        )));
    }
    let points = feature_rows(&normalized, cfg);
    let mut centroids = init_centroids(&points, c, cfg, normalized.spikes.as_ref())?;

    let mut assignment: Vec<usize> = vec![0; p];
    let mut dists: Vec<f64> = vec![0.0; p];
    let mut history = Vec::new();
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..cfg.max_iters {
        // Assignment step; ties break toward the lower cluster index.
        let mut changed = false;
        for (i, pt) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(pt, &centroids[0]);
            for (k, ctr) in centroids.iter().enumerate().skip(1) {
                let d = dist2(pt, ctr);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if assignment[i] != best {
                changed = true;
            }
            assignment[i] = best;
            dists[i] = best_d;
        }

        // Empty-cluster repair: the point farthest from its centroid becomes
        // the empty cluster's centroid. Only strictly reduces the inertia.
        let mut counts = vec![0usize; c];
        for &a in &assignment {
            counts[a] += 1;
        }
        for k in 0..c {
            while counts[k] == 0 {
                let donor = (0..p)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("some cluster has more than one point when another is empty");
                counts[assignment[donor]] -= 1;
                counts[k] += 1;
                assignment[donor] = k;
                centroids[k] = points[donor];
                dists[donor] = 0.0;
                changed = true;
            }
        }

        let inertia: f64 = dists.iter().sum();
        history.push(inertia);

        // Update step: each centroid moves to its cluster's mean.
        let mut sums = vec![[0.0f64; 3]; c];
        for (pt, &a) in points.iter().zip(&assignment) {
            for d in 0..3 {
                sums[a][d] += pt[d];
            }
        }
        for k in 0..c {
            for d in 0..3 {
                centroids[k][d] = sums[k][d] / counts[k] as f64;
            }
        }

        if !changed || prev_inertia - inertia < cfg.tol {
            prev_inertia = inertia;
            break;
        }
        prev_inertia = inertia;
    }

    Ok((
        ClusterState {
            centroids,
            assignment,
            inertia: prev_inertia,
        },
        history,
    ))
}

/// Cluster and map clusters to character slots by ascending mean unweighted
/// x (ties broken by the cluster's minimum global point index). The output
/// assigns every point.
pub fn kmeans_segment(sample: &LabeledSample, cfg: &KMeansConfig) -> Result<Segmentation> {
    let (state, _) = kmeans_cluster(sample, cfg)?;
    let transcription = sample.require_transcription()?;
    let c = transcription.len();
    let normalized = normalize(&sample.ink);
    let xs: Vec<f64> = normalized.iter_points().map(|(_, _, pt)| pt.x).collect();

    let mut mean_x = vec![0.0f64; c];
    let mut min_idx = vec![usize::MAX; c];
    let mut counts = vec![0usize; c];
    for (i, &a) in state.assignment.iter().enumerate() {
        mean_x[a] += xs[i];
        counts[a] += 1;
        min_idx[a] = min_idx[a].min(i);
    }
    for k in 0..c {
        mean_x[k] /= counts[k] as f64;
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| mean_x[a].total_cmp(&mean_x[b]).then(min_idx[a].cmp(&min_idx[b])));
    let mut slot_of = vec![0usize; c];
    for (slot, &cluster) in order.iter().enumerate() {
        slot_of[cluster] = slot;
    }

    Ok(Segmentation::total(
        state.assignment.iter().map(|&a| slot_of[a]).collect(),
    ))
}

/// [`crate::eval::Segmenter`] adapter for the k-means baseline.
pub struct KMeansSegmenter {
    pub cfg: KMeansConfig,
}

impl crate::eval::Segmenter for KMeansSegmenter {
    fn segment(&self, sample: &LabeledSample) -> Result<Segmentation> {
        kmeans_segment(sample, &self.cfg)
    }

    fn describe(&self) -> String {
        match self.cfg.init {
            KMeansInit::Random => "kmeans_random_init".into(),
            KMeansInit::CtcSpikes => "kmeans_spike_init".into(),
        }
    }

    fn architecture_id(&self) -> String {
        "kmeans".into()
    }
}
