//! Cluster statistics over flattened effective weights.
//!
//! Quantifies the two training-dynamics hypotheses: H1, same-class effective
//! weights grow more similar (per-class mean pairwise cosine similarity
//! rises), and H2, different-class effective weights separate (the ratio of
//! inter-centroid distance to intra-class spread rises, as does the
//! silhouette score under cosine distance).
//!
//! The fast path normalizes the vectors once and takes one Gram matrix; the
//! naive all-pairs loops live in the tests as the oracle.

use crate::linalg::dot;
use crate::parallel::par_map;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("zero vector at sample_ref {sample_ref}")]
    ZeroVector { sample_ref: usize },
    #[error("class {class} has {found} usable samples, need at least 2")]
    ClassUnderfilled { class: u8, found: usize },
    #[error("need at least 2 snapshots, found {0}")]
    TooFewSnapshots(usize),
}

/// One labelled flat vector (f64 working precision).
#[derive(Debug, Clone)]
pub struct FlatSample {
    pub values: Vec<f64>,
    pub sample_ref: usize,
    pub label: u8,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SnapshotMetrics {
    pub snapshot_id: usize,
    /// Mean pairwise cosine similarity within each class.
    pub per_class_cohesion: [f64; NUM_CLASSES],
    /// Mean pairwise cosine similarity across distinct classes.
    pub inter_class_similarity: f64,
    /// Mean inter-class centroid distance / mean intra-class
    /// point-to-centroid distance (Euclidean).
    pub separation_ratio: f64,
    /// Mean silhouette coefficient under cosine distance, true labels.
    pub silhouette: f64,
    /// Samples with an all-zero effective weight, excluded from the stats.
    pub dead_path_count: usize,
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 {
        return Err(MetricsError::ZeroVector { sample_ref: 0 });
    }
    if nb == 0.0 {
        return Err(MetricsError::ZeroVector { sample_ref: 0 });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// All cluster statistics for one snapshot's flat vectors.
///
/// Dead-path samples (all-zero vectors) are excluded from every statistic
/// and reported in `dead_path_count`.
pub fn snapshot_metrics(
    snapshot_id: usize,
    flats: &[FlatSample],
) -> Result<SnapshotMetrics, MetricsError> {
    let live: Vec<&FlatSample> = flats
        .iter()
        .filter(|f| f.values.iter().any(|&v| v != 0.0))
        .collect();
    let dead_path_count = flats.len() - live.len();

    let mut per_class_count = [0usize; NUM_CLASSES];
    for f in &live {
        per_class_count[f.label as usize] += 1;
    }
    for (class, &count) in per_class_count.iter().enumerate() {
        if count < 2 {
            return Err(MetricsError::ClassUnderfilled {
                class: class as u8,
                found: count,
            });
        }
    }

    let n = live.len();
    let dim = live[0].values.len();

    // Row-normalize once; one Gram matrix then yields every cosine term.
    let normalized: Vec<Vec<f64>> = live
        .iter()
        .map(|f| {
            let norm = dot(&f.values, &f.values).sqrt();
            f.values.iter().map(|&v| v / norm).collect()
        })
        .collect();
    let gram_rows: Vec<Vec<f64>> = par_map(n, |i| {
        (0..n)
            .map(|j| dot(&normalized[i], &normalized[j]).clamp(-1.0, 1.0))
            .collect()
    });

    let labels: Vec<u8> = live.iter().map(|f| f.label).collect();

    let mut cohesion_sum = [0.0; NUM_CLASSES];
    let mut cohesion_pairs = [0usize; NUM_CLASSES];
    let mut inter_sum = 0.0;
    let mut inter_pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = gram_rows[i][j];
            if labels[i] == labels[j] {
                cohesion_sum[labels[i] as usize] += s;
                cohesion_pairs[labels[i] as usize] += 1;
            } else {
                inter_sum += s;
                inter_pairs += 1;
            }
        }
    }
    let mut per_class_cohesion = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        per_class_cohesion[c] = cohesion_sum[c] / cohesion_pairs[c] as f64;
    }
    let inter_class_similarity = if inter_pairs > 0 {
        inter_sum / inter_pairs as f64
    } else {
        0.0
    };

    // Euclidean separation ratio on the raw vectors.
    let mut centroids = vec![vec![0.0; dim]; NUM_CLASSES];
    for f in &live {
        for (c, &v) in centroids[f.label as usize].iter_mut().zip(&f.values) {
            *c += v;
        }
    }
    for (c, centroid) in centroids.iter_mut().enumerate() {
        for v in centroid.iter_mut() {
            *v /= per_class_count[c] as f64;
        }
    }
    let mut centroid_dist_sum = 0.0;
    let mut centroid_pairs = 0usize;
    for a in 0..NUM_CLASSES {
        for b in (a + 1)..NUM_CLASSES {
            centroid_dist_sum += euclidean(&centroids[a], &centroids[b]);
            centroid_pairs += 1;
        }
    }
    let intra_dist_sum: f64 = live
        .iter()
        .map(|f| euclidean(&f.values, &centroids[f.label as usize]))
        .sum();
    let separation_ratio =
        (centroid_dist_sum / centroid_pairs as f64) / (intra_dist_sum / n as f64);

    // Silhouette under cosine distance (1 - cos), true labels as clusters.
    let silhouette_sum: f64 = (0..n)
        .map(|i| {
            let mut dist_sum = [0.0; NUM_CLASSES];
            for j in 0..n {
                if j != i {
                    dist_sum[labels[j] as usize] += 1.0 - gram_rows[i][j];
                }
            }
            let own = labels[i] as usize;
            let a = dist_sum[own] / (per_class_count[own] - 1) as f64;
            let b = (0..NUM_CLASSES)
                .filter(|&c| c != own)
                .map(|c| dist_sum[c] / per_class_count[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .sum();
    let silhouette = silhouette_sum / n as f64;

    Ok(SnapshotMetrics {
        snapshot_id,
        per_class_cohesion,
        inter_class_similarity,
        separation_ratio,
        silhouette,
        dead_path_count,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StatTrend {
    pub first: f64,
    pub last: f64,
    pub delta: f64,
    pub increased: bool,
}

impl StatTrend {
    fn of(first: f64, last: f64) -> Self {
        Self {
            first,
            last,
            delta: last - first,
            increased: last > first,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrendReport {
    pub cohesion: [StatTrend; NUM_CLASSES],
    pub inter_class_similarity: StatTrend,
    pub separation_ratio: StatTrend,
    pub silhouette: StatTrend,
    /// H1 verdict per class: cohesion rose from first to last snapshot.
    pub h1_per_class: [bool; NUM_CLASSES],
    pub h1_classes_holding: usize,
    /// H2 verdict: separation ratio rose from first to last snapshot.
    pub h2_holds: bool,
}

/// Compare the first and last snapshot of a metrics series.
pub fn trend_report(series: &[SnapshotMetrics]) -> Result<TrendReport, MetricsError> {
    if series.len() < 2 {
        return Err(MetricsError::TooFewSnapshots(series.len()));
    }
    let first = &series[0];
    let last = &series[series.len() - 1];
    let cohesion: [StatTrend; NUM_CLASSES] = std::array::from_fn(|c| {
        StatTrend::of(first.per_class_cohesion[c], last.per_class_cohesion[c])
    });
    let h1_per_class: [bool; NUM_CLASSES] = std::array::from_fn(|c| cohesion[c].increased);
    let h1_classes_holding = h1_per_class.iter().filter(|&&h| h).count();
    let separation_ratio = StatTrend::of(first.separation_ratio, last.separation_ratio);
    Ok(TrendReport {
        h2_holds: separation_ratio.increased,
        cohesion,
        inter_class_similarity: StatTrend::of(
            first.inter_class_similarity,
            last.inter_class_similarity,
        ),
        separation_ratio,
        silhouette: StatTrend::of(first.silhouette, last.silhouette),
        h1_per_class,
        h1_classes_holding,
    })
}
