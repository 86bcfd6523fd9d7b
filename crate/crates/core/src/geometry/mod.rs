//! Geometric primitives shared by the dataset, network and inference code:
//! point clouds, exact kNN, PCA normals and patch extraction.

mod kdtree;
mod patch;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};

pub use kdtree::KdTree;
pub use patch::{denormalize, extract_patch, normalize, Frame, Patch, PatchExtractor, PATCH_SIZE};

pub(crate) use kdtree::dist2;

pub type Vec3 = nalgebra::Vector3<f64>;

/// Tolerance on the unit-norm invariant for stored normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Positions plus optional unit normals for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    diag: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        let diag = bbox_diagonal(&points);
        Ok(PointCloud {
            points,
            normals: None,
            diag,
        })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        cloud.set_normals(normals)?;
        Ok(cloud)
    }

    pub fn set_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| (n.norm() - 1.0).abs() > UNIT_TOLERANCE)
        {
            return Err(Error::invalid(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn clear_normals(&mut self) {
        self.normals = None;
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Bounding-box diagonal length.
    pub fn diag(&self) -> f64 {
        self.diag
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Returns a copy shifted by `t`.
    pub fn translated(&self, t: &Vec3) -> PointCloud {
        let points: Vec<Vec3> = self.points.iter().map(|p| p + t).collect();
        let diag = bbox_diagonal(&points);
        PointCloud {
            points,
            normals: self.normals.clone(),
            diag,
        }
    }
}

pub fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        min = min.inf(p);
        max = max.sup(p);
    }
    (max - min).norm()
}

/// Row `q` holds the `k` indices of `points` nearest to `queries[q]`,
/// ascending by distance with ties broken by ascending index.
pub fn knn_indices(points: &[Vec3], queries: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > points.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds point count {}",
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    Ok(queries
        .iter()
        .map(|q| tree.nearest(q, k).into_iter().map(|(i, _)| i).collect())
        .collect())
}

/// PCA normals with per-point degeneracy flags.
#[derive(Debug, Clone)]
pub struct PcaNormals {
    pub normals: Vec<Vec3>,
    /// Set where the neighborhood covariance has rank below two.
    pub degenerate: Vec<bool>,
}

impl PcaNormals {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Smallest-eigenvalue eigenvector of each point's k-neighborhood covariance.
///
/// Sign: nonnegative dot product with (neighborhood centroid − cloud
/// centroid); when that product vanishes the first nonzero component is made
/// positive.
pub fn estimate_normals_pca(cloud: &PointCloud, k: usize) -> Result<PcaNormals> {
    if k < 3 {
        return Err(Error::invalid("PCA normals need k >= 3"));
    }
    let pts = cloud.points();
    let k = k.min(pts.len());
    let tree = KdTree::new(pts);
    let center = cloud.centroid();
    let scale = cloud.diag().max(f64::MIN_POSITIVE);

    let mut normals = Vec::with_capacity(pts.len());
    let mut degenerate = Vec::with_capacity(pts.len());
    for p in pts {
        let nb = tree.nearest(p, k);
        let mean = nb.iter().map(|&(i, _)| pts[i]).sum::<Vec3>() / nb.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(i, _) in &nb {
            let d = pts[i] - mean;
            cov += d * d.transpose();
        }
        let (n, flag) = smallest_eigenvector(&cov);
        let outward = mean - center;
        let dot = n.dot(&outward);
        let n = if dot.abs() > 1e-12 * scale {
            if dot < 0.0 {
                -n
            } else {
                n
            }
        } else {
            first_nonzero_positive(n)
        };
        normals.push(n);
        degenerate.push(flag);
    }
    Ok(PcaNormals {
        normals,
        degenerate,
    })
}

fn smallest_eigenvector(cov: &Matrix3<f64>) -> (Vec3, bool) {
    let trace = cov.trace();
    if trace <= 0.0 || !trace.is_finite() {
        return (Vec3::z(), true);
    }
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let rank_deficient = eig.eigenvalues[order[1]] <= 1e-12 * trace;
    (n.normalize(), rank_deficient)
}

fn first_nonzero_positive(n: Vec3) -> Vec3 {
    match n.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -n,
        _ => n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| {
            dist2(&points[a], q)
                .total_cmp(&dist2(&points[b], q))
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }

    #[test]
    fn knn_small_example() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)];
        let got = knn_indices(&pts, &[Vec3::new(0.9, 0.0, 0.0)], 2).unwrap();
        assert_eq!(got, vec![vec![1, 0]]);
    }

    #[test]
    fn knn_self_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..20).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let got = knn_indices(&pts, &[pts[5]], 1).unwrap();
        assert_eq!(got, vec![vec![5]]);
    }

    #[test]
    fn knn_rejects_large_k() {
        let pts = vec![Vec3::zeros(); 3];
        assert!(matches!(knn_indices(&pts, &[Vec3::zeros()], 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for n in [64usize, 100, 256] {
            let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let queries: Vec<Vec3> = (0..32).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let got = knn_indices(&pts, &queries, 8).unwrap();
            for (q, row) in queries.iter().zip(&got) {
                assert_eq!(row, &brute_knn(&pts, q, 8));
            }
        }
    }

    #[test]
    fn pca_plane_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let est = estimate_normals_pca(&cloud, 10).unwrap();
        for n in &est.normals {
            assert!(n.z.abs() >= 1.0 - 1e-9, "{n:?}");
        }
        assert!(!est.any_degenerate());
    }

    #[test]
    fn pca_collinear_is_degenerate() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0), Vec3::new(2.0, 2.0, 0.0)];
        let cloud = PointCloud::new(pts).unwrap();
        let est = estimate_normals_pca(&cloud, 3).unwrap();
        assert!(est.degenerate.iter().all(|&d| d));
        for n in &est.normals {
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_identical_points_fall_back_to_z() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0); 5]).unwrap();
        let est = estimate_normals_pca(&cloud, 3).unwrap();
        assert!(est.degenerate.iter().all(|&d| d));
        assert!(est.normals.iter().all(|n| *n == Vec3::z()));
    }

    #[test]
    fn pca_sphere_normals_are_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| {
                let v = Vec3::new(
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                );
                v.normalize()
            })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let est = estimate_normals_pca(&cloud, 16).unwrap();
        let good = est
            .normals
            .iter()
            .zip(&pts)
            .filter(|(n, p)| n.dot(p).clamp(-1.0, 1.0).acos().to_degrees() <= 5.0)
            .count();
        assert!(good as f64 >= 0.95 * pts.len() as f64, "{good}");
    }

    #[test]
    fn diag_and_validation() {
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::new(1.0, 2.0, 2.0)]).unwrap();
        assert_eq!(cloud.diag(), 3.0);
        assert_eq!(PointCloud::new(vec![Vec3::zeros()]).unwrap().diag(), 0.0);
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::with_normals(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.0, 2.0)]).is_err());
    }
}
