//! Evaluation mathematics: Frechet distance, Frechet distance ratio,
//! normalized mutual information, k-means, and kNN precision/recall.
//!
//! Everything here is pure and seeded. The Frechet matrix square root
//! goes through the symmetric route (sqrt(A) B sqrt(A)) with eigenvalue
//! clamping; a ridge is added only if the eigensolver fails outright,
//! and it escalates tenfold from 1e-6 to 1e-2 before giving up. The FDR
//! intra-class halving first sorts rows into a canonical order, then
//! shuffles with a per-class stream, so the statistic is invariant to
//! input row order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::stream::named_stream;

pub const DEFAULT_KMEANS_MAX_ITER: usize = 100;
const INTRA_FLOOR: f64 = 1e-8;

// ---------------------------------------------------------------------
// Gaussian moment summaries and the Frechet distance
// ---------------------------------------------------------------------

/// First and second moments of a sample set, in f64.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    /// Validated constructor: square symmetric covariance, finite entries,
    /// at least two observations behind the moments.
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::EmptySet { what: "mean" });
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: covariance.nrows(),
            });
        }
        if count < 2 {
            return Err(Error::InvalidConfig(format!(
                "a moment summary needs at least 2 observations, got {count}"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite moment summary".into()));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Numerical(format!(
                        "covariance asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            count,
        })
    }

    /// Unbiased moments of the rows of `features`.
    pub fn fit(features: &FeatureMatrix) -> Result<Self> {
        let n = features.rows();
        let d = features.dim();
        if n < 2 {
            return Err(Error::InvalidConfig(format!(
                "covariance needs at least 2 rows, got {n}"
            )));
        }
        let mut mean = vec![0.0f64; d];
        for row in features.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0f64; d];
        for row in features.iter_rows() {
            for j in 0..d {
                centered[j] = row[j] as f64 - mean[j];
            }
            for i in 0..d {
                let ci = centered[i];
                for j in i..d {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= denom;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), 1e-12, 10_000)?;
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Some(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

fn sqrt_product_trace(ca: &DMatrix<f64>, cb: &DMatrix<f64>) -> Option<f64> {
    let sa = symmetric_sqrt(ca)?;
    let inner = &sa * cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(inner, 1e-12, 10_000)?;
    let t: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    t.is_finite().then_some(t)
}

/// Squared-mean-difference plus covariance mismatch term; zero for equal
/// summaries, symmetric, never negative.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let dmu = (&a.mean - &b.mean).norm_squared();

    let mut ridge = 0.0f64;
    loop {
        let (ca, cb) = if ridge == 0.0 {
            (a.covariance.clone(), b.covariance.clone())
        } else {
            let eye = DMatrix::<f64>::identity(a.dim(), a.dim());
            (
                &a.covariance + &eye * ridge,
                &b.covariance + &eye * ridge,
            )
        };
        if let Some(t) = sqrt_product_trace(&ca, &cb) {
            let fd = dmu + ca.trace() + cb.trace() - 2.0 * t;
            if fd.is_finite() {
                return Ok(fd.max(0.0));
            }
        }
        if ridge >= 1e-2 {
            return Err(Error::SqrtDidNotConverge { last_ridge: ridge });
        }
        ridge = if ridge == 0.0 { 1e-6 } else { ridge * 10.0 };
    }
}

// ---------------------------------------------------------------------
// Frechet distance ratio
// ---------------------------------------------------------------------

fn canonical_row_order(features: &FeatureMatrix, indices: &mut [usize]) {
    indices.sort_by(|&i, &j| {
        let (a, b) = (features.row(i), features.row(j));
        for (x, y) in a.iter().zip(b) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
}

/// Inter-class over intra-class Frechet distance.
///
/// Intra-class distance averages, over classes, the distance between the
/// two halves of a canonical-order seeded shuffle of that class. Inter
/// averages over all unordered class pairs.
pub fn fdr(features: &FeatureMatrix, labels: &[String], seed: u64) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::LabelLengthMismatch {
            rows: features.rows(),
            labels: labels.len(),
        });
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        by_class.entry(label.as_str()).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "separability ratio needs at least 2 classes, got {}",
            by_class.len()
        )));
    }
    for (label, idx) in &by_class {
        if idx.len() < 4 {
            return Err(Error::ClassTooSmall {
                label: (*label).to_string(),
                count: idx.len(),
                needed: 4,
            });
        }
    }

    let mut intra_sum = 0.0;
    let mut class_summaries = Vec::new();
    for (label, idx) in &by_class {
        // Canonical order first: the statistic must not depend on how the
        // caller happened to arrange the rows, down to summation order.
        let mut order = idx.clone();
        canonical_row_order(features, &mut order);
        class_summaries.push(GaussianSummary::fit(&features.select_rows(&order))?);

        let mut rng = named_stream(seed, &format!("fdr-halving:{label}"));
        order.shuffle(&mut rng);
        let half = order.len() / 2;
        let first = features.select_rows(&order[..half]);
        let second = features.select_rows(&order[half..2 * half]);
        intra_sum +=
            frechet_distance(&GaussianSummary::fit(&first)?, &GaussianSummary::fit(&second)?)?;
    }
    let intra = intra_sum / by_class.len() as f64;

    let mut inter_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..class_summaries.len() {
        for j in (i + 1)..class_summaries.len() {
            inter_sum += frechet_distance(&class_summaries[i], &class_summaries[j])?;
            pairs += 1;
        }
    }
    let inter = inter_sum / pairs as f64;
    Ok(inter / intra.max(INTRA_FLOOR))
}

// ---------------------------------------------------------------------
// Partitions and normalized mutual information
// ---------------------------------------------------------------------

/// A partition of N items into k groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    assignments: Vec<usize>,
    k: usize,
}

impl Clustering {
    pub fn new(assignments: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("a partition needs k >= 1".into()));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::InvalidConfig(format!(
                "assignment {bad} out of range for k={k}"
            )));
        }
        Ok(Self { assignments, k })
    }

    /// Partition induced by string labels; group ids follow the sorted
    /// order of distinct labels, so the mapping is deterministic.
    pub fn from_labels(labels: &[String]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptySet { what: "labels" });
        }
        let mut distinct: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let index: BTreeMap<&str, usize> =
            distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let assignments = labels.iter().map(|l| index[l.as_str()]).collect();
        Ok(Self {
            assignments,
            k: distinct.len(),
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Mutual information normalized by the larger marginal entropy.
///
/// Returns 0 when either partition has zero entropy, 1 when the two are
/// identical up to relabeling, and otherwise a value in [0,1]. The per
/// cell terms use the ratio form (n_ij/N) ln(n_ij N / (n_i n_j)), which
/// is exactly zero cell-by-cell for independent partitions.
pub fn nmi(a: &Clustering, b: &Clustering) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LabelLengthMismatch {
            rows: a.len(),
            labels: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptySet { what: "partition" });
    }
    let n = a.len() as f64;
    let mut counts = vec![0u64; a.k() * b.k()];
    let mut rows = vec![0u64; a.k()];
    let mut cols = vec![0u64; b.k()];
    for (&x, &y) in a.assignments().iter().zip(b.assignments()) {
        counts[x * b.k() + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }

    let entropy = |marginal: &[u64]| -> f64 {
        marginal
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&rows);
    let hb = entropy(&cols);
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }

    // Identical partitions up to relabeling leave exactly one nonzero
    // cell in every occupied row and column; report 1 without arithmetic.
    let occupied_rows_single = rows.iter().enumerate().all(|(i, &r)| {
        r == 0
            || counts[i * b.k()..(i + 1) * b.k()]
                .iter()
                .filter(|&&c| c > 0)
                .count()
                == 1
    });
    let occupied_cols_single = (0..b.k()).all(|j| {
        cols[j] == 0
            || (0..a.k())
                .filter(|&i| counts[i * b.k() + j] > 0)
                .count()
                == 1
    });
    if occupied_rows_single && occupied_cols_single {
        return Ok(1.0);
    }

    let mut mi = 0.0;
    for i in 0..a.k() {
        for j in 0..b.k() {
            let c = counts[i * b.k() + j];
            if c == 0 {
                continue;
            }
            let p = c as f64 / n;
            mi += p * ((c as f64 * n) / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    Ok((mi / ha.max(hb)).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------

fn dist_sq(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y as f64;
            d * d
        })
        .sum()
}

fn assign_all(features: &FeatureMatrix, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let pairs: Vec<(usize, f64)> = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let row = features.row(i);
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = dist_sq(center, row);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect();
    pairs.into_iter().unzip()
}

/// Lloyd iterations from plus-plus seeding. Deterministic under `seed`;
/// empty clusters respawn on the point farthest from its center; the
/// objective is checked to be non-increasing every iteration.
/// Restarts of the Lloyd solver; the best final objective wins. Guards
/// against unlucky plus-plus draws on data with close clusters.
const KMEANS_RESTARTS: usize = 8;

pub fn kmeans(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Clustering> {
    let n = features.rows();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut best: Option<(f64, Clustering)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let rng = named_stream(seed, &format!("kmeans-seeding:{restart}"));
        let (objective, clustering) = kmeans_once(features, k, rng, max_iter)?;
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, clustering));
        }
    }
    Ok(best.expect("at least one restart ran").1)
}

fn kmeans_once(
    features: &FeatureMatrix,
    k: usize,
    mut rng: rand_chacha::ChaCha8Rng,
    max_iter: usize,
) -> Result<(f64, Clustering)> {
    let n = features.rows();
    let d = features.dim();

    // Plus-plus seeding: each next center drawn with probability
    // proportional to squared distance from the chosen set.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(features.row(first).iter().map(|&v| v as f64).collect());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist_sq(&centers[0], features.row(i)))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let center: Vec<f64> = features.row(pick).iter().map(|&v| v as f64).collect();
        for i in 0..n {
            d2[i] = d2[i].min(dist_sq(&center, features.row(i)));
        }
        centers.push(center);
    }

    let (mut assignments, mut dists) = assign_all(features, &centers);
    let mut objective: f64 = dists.iter().sum();
    for _ in 0..max_iter {
        // Means of each cluster.
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(features.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centers[c] = sums[c].clone();
            }
        }
        // Respawn empty clusters on the farthest points, one each.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| dists[j].total_cmp(&dists[i]));
            for (slot, &c) in empties.iter().enumerate() {
                let p = order[slot.min(n - 1)];
                centers[c] = features.row(p).iter().map(|&v| v as f64).collect();
            }
        }

        let (next_assignments, next_dists) = assign_all(features, &centers);
        let next_objective: f64 = next_dists.iter().sum();
        assert!(
            next_objective <= objective * (1.0 + 1e-9) + 1e-9,
            "k-means objective increased: {objective} -> {next_objective}"
        );
        let converged = next_assignments == assignments;
        assignments = next_assignments;
        dists = next_dists;
        objective = next_objective;
        if converged {
            break;
        }
    }
    Ok((objective, Clustering::new(assignments, k)?))
}

/// Agreement between a k-means clustering of `features` and a reference
/// partition, with k taken from the partition.
pub fn cluster_alignment(
    features: &FeatureMatrix,
    reference: &Clustering,
    seed: u64,
) -> Result<f64> {
    if reference.len() != features.rows() {
        return Err(Error::LabelLengthMismatch {
            rows: features.rows(),
            labels: reference.len(),
        });
    }
    let found = kmeans(features, reference.k(), seed, DEFAULT_KMEANS_MAX_ITER)?;
    nmi(&found, reference)
}

// ---------------------------------------------------------------------
// kNN precision and recall
// ---------------------------------------------------------------------

fn row_dist_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Squared radius of each point's k-th nearest neighbor within its own
/// set, the point itself excluded.
fn knn_radii_sq(set: &FeatureMatrix, k: usize) -> Vec<f64> {
    (0..set.rows())
        .into_par_iter()
        .map(|i| {
            let mut dists: Vec<f64> = (0..set.rows())
                .filter(|&j| j != i)
                .map(|j| row_dist_sq(set.row(i), set.row(j)))
                .collect();
            let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn covered_fraction(queries: &FeatureMatrix, support: &FeatureMatrix, radii_sq: &[f64]) -> f64 {
    let hits: usize = (0..queries.rows())
        .into_par_iter()
        .filter(|&qi| {
            let q = queries.row(qi);
            (0..support.rows()).any(|si| row_dist_sq(q, support.row(si)) <= radii_sq[si])
        })
        .count();
    hits as f64 / queries.rows() as f64
}

/// Support-overlap estimates from unions of k-nearest-neighbor balls.
/// Precision: fraction of generated points inside the real support
/// estimate. Recall: the same with roles swapped.
pub fn knn_precision_recall(
    real: &FeatureMatrix,
    gen: &FeatureMatrix,
    k: usize,
) -> Result<(f64, f64)> {
    if real.rows() == 0 || gen.rows() == 0 {
        return Err(Error::EmptySet { what: "point set" });
    }
    if real.dim() != gen.dim() {
        return Err(Error::DimensionMismatch {
            expected: real.dim(),
            actual: gen.dim(),
        });
    }
    let smaller = real.rows().min(gen.rows());
    if k == 0 || k >= smaller {
        return Err(Error::KOutOfRange { k, n: smaller });
    }
    let real_radii = knn_radii_sq(real, k);
    let gen_radii = knn_radii_sq(gen, k);
    let precision = covered_fraction(gen, real, &real_radii);
    let recall = covered_fraction(real, gen, &gen_radii);
    Ok((precision, recall))
}
