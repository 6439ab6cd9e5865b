//! K-means, label agreement, silhouette and PCA for judging how well a
//! latent space separates model orders.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

pub const MIN_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const INERTIA_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the kept restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn plus_plus_init<R: Rng + ?Sized>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                target -= d;
                if target < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, slot) in out.iter_mut().enumerate() {
        let (best, d) = (0..centroids.nrows())
            .map(|c| (c, sq_dist(points.row(i), centroids.row(c))))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        *slot = best;
        inertia += d;
    }
    inertia
}

fn lloyd<R: Rng + ?Sized>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> KMeans {
    let n = points.nrows();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![0; n];
    let mut inertia = assign(points, &centroids, &mut assignments);
    let mut trace = vec![inertia];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(i));
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // reseed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(points.row(i), centroids.row(assignments[i]));
                        let dj = sq_dist(points.row(j), centroids.row(assignments[j]));
                        di.total_cmp(&dj)
                    })
                    .expect("n >= k >= 1");
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
        let next = assign(points, &centroids, &mut assignments);
        trace.push(next);
        let change = (inertia - next).abs() / inertia.max(f64::MIN_POSITIVE);
        inertia = next;
        if change <= INERTIA_TOLERANCE {
            break;
        }
    }
    KMeans {
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

/// Best of `restarts` k-means++ seeded Lloyd runs.
pub fn kmeans<R: Rng + ?Sized>(points: ArrayView2<f64>, k: usize, restarts: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 || points.nrows() < k {
        return Err(Error::InsufficientSamples(format!(
            "k-means with k={k} needs at least {k} points, got {}",
            points.nrows()
        )));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(MIN_RESTARTS) {
        let run = lloyd(points, k, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn dense_labels(labels: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    (classes, idx)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// `counts[class][cluster]`.
pub fn confusion(assignments: &[usize], labels: &[u32], k: usize) -> Result<Vec<Vec<usize>>> {
    if assignments.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let (classes, idx) = dense_labels(labels);
    let mut counts = vec![vec![0; k]; classes.len()];
    for (&a, &c) in assignments.iter().zip(&idx) {
        if a >= k {
            return Err(Error::Shape(format!("cluster index {a} out of range for k={k}")));
        }
        counts[c][a] += 1;
    }
    Ok(counts)
}

fn best_mapping(counts: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let k = counts.len();
    permutations(k)
        .into_iter()
        .map(|p| ((0..k).map(|c| counts[c][p[c]]).sum::<usize>(), p))
        .max_by_key(|(hits, _)| *hits)
        .expect("at least one permutation")
}

/// Fraction of points whose cluster matches their label under the best
/// one-to-one relabeling of clusters.
pub fn agreement(assignments: &[usize], labels: &[u32]) -> Result<f64> {
    let (classes, _) = dense_labels(labels);
    let k = classes.len();
    if assignments.iter().any(|&a| a >= k) {
        return Err(Error::Shape(format!(
            "assignments use more clusters than the {k} distinct labels"
        )));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientSamples("agreement of zero points".into()));
    }
    let counts = confusion(assignments, labels, k)?;
    Ok(best_mapping(&counts).0 as f64 / labels.len() as f64)
}

/// Mean silhouette coefficient under the Euclidean metric.
pub fn silhouette(points: ArrayView2<f64>, labels: &[u32]) -> Result<f64> {
    if points.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} points for {} labels", points.nrows(), labels.len())));
    }
    let (classes, idx) = dense_labels(labels);
    let mut sizes = vec![0usize; classes.len()];
    idx.iter().for_each(|&c| sizes[c] += 1);
    if classes.len() < 2 || sizes.iter().any(|&s| s < 2) {
        return Err(Error::InsufficientSamples(
            "silhouette needs two or more classes with at least two members each".into(),
        ));
    }
    let n = points.nrows();
    let mut total = 0.0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[idx[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let own = idx[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Centered projection onto the top `out_dim` principal directions. Each
/// direction is signed so its largest-magnitude loading is positive.
pub fn pca_project(points: ArrayView2<f64>, out_dim: usize) -> Result<Array2<f64>> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("PCA needs at least 2 points, got {n}")));
    }
    if out_dim > d {
        return Err(Error::Shape(format!("cannot project {d}-D points onto {out_dim} components")));
    }
    let mean = points.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &points - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Array2::zeros((d, out_dim));
    for (k, &col) in order.iter().take(out_dim).enumerate() {
        let v = eig.eigenvectors.column(col);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[i, k]] = sign * v[i];
        }
    }
    Ok(centered.dot(&basis))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub agreement: f64,
    /// Silhouette of the true labels in the scored space.
    pub silhouette: f64,
    /// `confusion[class][cluster]`, clusters relabeled to best match classes.
    pub confusion: Vec<Vec<usize>>,
    /// Classes in ascending label order.
    pub classes: Vec<u32>,
    /// Fraction of the highest-order class assigned to the lowest-order
    /// class's cluster.
    pub outlier_fraction: f64,
}

/// 2-means (one cluster per distinct label) followed by scoring.
pub fn cluster_report<R: Rng + ?Sized>(points: ArrayView2<f64>, labels: &[u32], rng: &mut R) -> Result<ClusterReport> {
    let (classes, _) = dense_labels(labels);
    let k = classes.len();
    let km = kmeans(points, k, MIN_RESTARTS, rng)?;
    let raw = confusion(&km.assignments, labels, k)?;
    let (hits, mapping) = best_mapping(&raw);
    let confusion: Vec<Vec<usize>> = raw
        .iter()
        .map(|row| (0..k).map(|c| row[mapping[c]]).collect())
        .collect();
    let last = k - 1;
    let outlier_fraction = confusion[last][0] as f64 / confusion[last].iter().sum::<usize>().max(1) as f64;
    Ok(ClusterReport {
        agreement: hits as f64 / labels.len() as f64,
        silhouette: silhouette(points, labels)?,
        confusion,
        classes,
        outlier_fraction,
    })
}

/// CSV with header `label,mu1,..,muD` plus `p1,p2` when a projection is given.
pub fn embeddings_csv(labels: &[u32], latents: ArrayView2<f64>, projection: Option<ArrayView2<f64>>) -> Result<String> {
    if latents.nrows() != labels.len() || projection.is_some_and(|p| p.nrows() != labels.len()) {
        return Err(Error::Shape("embedding rows do not match labels".into()));
    }
    let mut out = String::from("label");
    for j in 1..=latents.ncols() {
        write!(out, ",mu{j}").expect("string write");
    }
    if let Some(p) = projection {
        for j in 1..=p.ncols() {
            write!(out, ",p{j}").expect("string write");
        }
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        write!(out, "{label}").expect("string write");
        for v in latents.row(i) {
            write!(out, ",{v}").expect("string write");
        }
        if let Some(p) = projection {
            for v in p.row(i) {
                write!(out, ",{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<u32>) {
        let mut r = rng::seeded(seed);
        let mut pts = Array2::zeros((2 * n, 3));
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let class = (i >= n) as u32;
            for j in 0..3 {
                let v: f64 = StandardNormal.sample(&mut r);
                pts[[i, j]] = v + if j == 0 { sep * class as f64 } else { 0.0 };
            }
            labels.push(class * 4 + 1);
        }
        (pts, labels)
    }

    #[test]
    fn separable_blobs_are_recovered() {
        let (pts, labels) = blobs(200, 10.0, 1);
        let km = kmeans(pts.view(), 2, 10, &mut rng::seeded(2)).unwrap();
        assert_eq!(agreement(&km.assignments, &labels).unwrap(), 1.0);
        let report = cluster_report(pts.view(), &labels, &mut rng::seeded(3)).unwrap();
        assert_eq!(report.agreement, 1.0);
        assert_eq!(report.confusion, vec![vec![200, 0], vec![0, 200]]);
        assert_eq!(report.outlier_fraction, 0.0);
        assert!(report.silhouette > 0.7);
    }

    #[test]
    fn far_blobs_have_high_silhouette() {
        let (pts, labels) = blobs(200, 20.0, 15);
        assert!(silhouette(pts.view(), &labels).unwrap() > 0.8);
    }

    #[test]
    fn identical_points_keep_every_cluster_defined() {
        let pts = Array2::from_elem((6, 2), 3.0);
        let km = kmeans(pts.view(), 2, 10, &mut rng::seeded(4)).unwrap();
        assert_eq!(km.inertia, 0.0);
        assert!(km.centroids.iter().all(|&c| c == 3.0));
    }

    #[test]
    fn single_cluster_inertia_is_total_scatter() {
        let (pts, _) = blobs(50, 3.0, 5);
        let km = kmeans(pts.view(), 1, 10, &mut rng::seeded(6)).unwrap();
        assert!(km.assignments.iter().all(|&a| a == 0));
        let mean = pts.mean_axis(Axis(0)).unwrap();
        let scatter: f64 = pts.rows().into_iter().map(|r| sq_dist(r, mean.view())).sum();
        assert!((km.inertia - scatter).abs() < 1e-9 * scatter);
    }

    #[test]
    fn too_few_points() {
        let pts = Array2::zeros((1, 2));
        assert!(kmeans(pts.view(), 2, 10, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        let (pts, _) = blobs(100, 1.5, 7);
        let mut r = rng::seeded(8);
        for _ in 0..10 {
            let km = lloyd(pts.view(), 3, &mut r);
            assert!(km.inertia_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let (pts, _) = blobs(60, 2.0, 9);
        let a = kmeans(pts.view(), 2, 10, &mut rng::seeded(10)).unwrap();
        let b = kmeans(pts.view(), 2, 10, &mut rng::seeded(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn agreement_examples() {
        let labels = [1, 1, 5, 5, 5];
        assert_eq!(agreement(&[0, 0, 1, 1, 1], &labels).unwrap(), 1.0);
        assert_eq!(agreement(&[1, 1, 0, 0, 0], &labels).unwrap(), 1.0);
        assert_eq!(agreement(&[0, 1, 1, 1, 1], &labels).unwrap(), 0.8);
        assert!(agreement(&[0, 0], &labels).is_err());
        assert!(agreement(&[0, 0, 2, 1, 1], &labels).is_err());
        let mut r = rng::seeded(11);
        let n = 10_000;
        let labels: Vec<u32> = (0..n).map(|i| if i % 2 == 0 { 1 } else { 5 }).collect();
        let random: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let a = agreement(&random, &labels).unwrap();
        assert!((0.45..=0.55).contains(&a), "{a}");
    }

    #[test]
    fn silhouette_matches_pairwise_formula() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [5.0, 5.0], [6.0, 5.0], [4.0, 7.5]];
        let labels = [0, 0, 0, 1, 1, 1];
        let d = |i: usize, j: usize| sq_dist(pts.row(i), pts.row(j)).sqrt();
        let mut expected = 0.0;
        for i in 0..6 {
            let same: Vec<usize> = (0..6).filter(|&j| j != i && labels[j] == labels[i]).collect();
            let other: Vec<usize> = (0..6).filter(|&j| labels[j] != labels[i]).collect();
            let a = same.iter().map(|&j| d(i, j)).sum::<f64>() / same.len() as f64;
            let b = other.iter().map(|&j| d(i, j)).sum::<f64>() / other.len() as f64;
            expected += (b - a) / a.max(b);
        }
        expected /= 6.0;
        assert!((silhouette(pts.view(), &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn silhouette_of_random_labels_is_near_zero() {
        let (pts, _) = blobs(300, 0.0, 12);
        let mut r = rng::seeded(13);
        let labels: Vec<u32> = (0..600).map(|_| r.random_range(0..2)).collect();
        assert!(silhouette(pts.view(), &labels).unwrap().abs() < 0.1);
    }

    #[test]
    fn silhouette_rejects_singletons() {
        let pts = array![[0.0], [1.0], [2.0]];
        assert!(silhouette(pts.view(), &[0, 0, 1]).is_err());
        assert!(silhouette(pts.view(), &[0, 0, 0]).is_err());
    }

    #[test]
    fn pca_on_planar_data_is_a_rotation() {
        let mut r = rng::seeded(14);
        let mut pts = Array2::from_shape_fn((40, 2), |_| StandardNormal.sample(&mut r));
        let mean = pts.mean_axis(Axis(0)).unwrap();
        pts -= &mean;
        let proj = pca_project(pts.view(), 2).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                let before = sq_dist(pts.row(i), pts.row(j)).sqrt();
                let after = sq_dist(proj.row(i), proj.row(j)).sqrt();
                assert!((before - after).abs() < 1e-10);
            }
        }
        let var = proj.var_axis(Axis(0), 1.0);
        assert!(var[0] >= var[1]);
    }

    #[test]
    fn pca_of_rank_one_data() {
        let pts = Array2::from_shape_fn((30, 3), |(i, j)| (i as f64 - 7.0) * [1.0, -2.0, 0.5][j]);
        let proj = pca_project(pts.view(), 2).unwrap();
        let var = proj.var_axis(Axis(0), 1.0);
        assert!(var[1] < 1e-20 * var[0].max(1.0) + 1e-20);
        assert!(var[0] > 1.0);
        assert!(pca_project(pts.slice(ndarray::s![..1, ..]), 2).is_err());
    }

    #[test]
    fn csv_layout() {
        let latents = array![[0.5, 1.0], [2.0, -1.0]];
        let proj = array![[0.1, 0.2], [0.3, 0.4]];
        let csv = embeddings_csv(&[1, 5], latents.view(), Some(proj.view())).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,mu1,mu2,p1,p2");
        assert_eq!(lines[2], "5,2,-1,0.3,0.4");
        assert!(embeddings_csv(&[1], latents.view(), None).is_err());
    }
}
