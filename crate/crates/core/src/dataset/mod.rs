//! Synthetic clean/noisy training pairs and point-cloud file formats.

mod corpus;
mod io;
mod shapes;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{estimate_normals_pca, PointCloud, Vec3};

pub use corpus::{
    generate_corpus, load_corpus, noise_seed, shape_seed, write_corpus, Manifest, ManifestEntry, MANIFEST_FILE,
    MANIFEST_FORMAT,
};
pub use io::{read_ply, read_point_cloud, read_xyz, write_xyz, write_xyz_colored};
pub use shapes::{generate_shape, ShapeKind, ShapeSpec, MIN_SHAPE_POINTS};

/// Noise levels as fractions of the clean bounding-box diagonal.
pub const DEFAULT_NOISE_LEVELS: [f64; 5] = [0.0025, 0.005, 0.01, 0.015, 0.025];

/// Neighborhood size for the raw PCA normals attached to noisy clouds.
pub const RAW_NORMAL_K: usize = 16;

/// A noisy cloud carrying PCA raw normals, paired with its clean source.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub noisy: PointCloud,
    pub clean: PointCloud,
    pub noise_level: f64,
}

/// Adds isotropic Gaussian noise with per-axis standard deviation
/// `level * clean.diag()` and re-estimates raw normals on the result.
pub fn add_gaussian_noise(clean: &PointCloud, level: f64, seed: u64) -> Result<NoisySample> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::invalid(format!("noise level must be >= 0, got {level}")));
    }
    let points: Vec<Vec3> = if level == 0.0 {
        clean.points().to_vec()
    } else {
        let normal = Normal::new(0.0, level * clean.diag())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        clean
            .points()
            .iter()
            .map(|p| {
                p + Vec3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                )
            })
            .collect()
    };
    let mut noisy = PointCloud::new(points)?;
    let raw = estimate_normals_pca(&noisy, RAW_NORMAL_K)?;
    noisy.set_normals(raw.normals)?;
    Ok(NoisySample {
        noisy,
        clean: clean.clone(),
        noise_level: level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize) -> PointCloud {
        generate_shape(&ShapeSpec::new(ShapeKind::Cube, n, 1)).unwrap()
    }

    #[test]
    fn zero_level_keeps_positions() {
        let clean = cube(500);
        let s = add_gaussian_noise(&clean, 0.0, 3).unwrap();
        assert_eq!(s.noisy.points(), clean.points());
        assert!(s.noisy.normals().is_some());
    }

    #[test]
    fn noise_statistics() {
        let clean = cube(10_000);
        let s = add_gaussian_noise(&clean, 0.01, 4).unwrap();
        let target = 0.01 * clean.diag();
        let n = clean.len() as f64;
        for axis in 0..3 {
            let d: Vec<f64> = s
                .noisy
                .points()
                .iter()
                .zip(clean.points())
                .map(|(a, b)| a[axis] - b[axis])
                .collect();
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var.sqrt() / target - 1.0).abs() < 0.05, "axis {axis}");
            // Unbiased: mean within 3 standard errors of zero.
            assert!(mean.abs() <= 3.0 * target / n.sqrt(), "axis {axis} mean {mean}");
        }
    }

    #[test]
    fn equal_seeds_equal_outputs() {
        let clean = cube(300);
        let a = add_gaussian_noise(&clean, 0.005, 8).unwrap();
        let b = add_gaussian_noise(&clean, 0.005, 8).unwrap();
        assert_eq!(a.noisy, b.noisy);
        let c = add_gaussian_noise(&clean, 0.005, 9).unwrap();
        assert_ne!(a.noisy, c.noisy);
    }

    #[test]
    fn rejects_negative_level() {
        assert!(add_gaussian_noise(&cube(200), -0.1, 0).is_err());
    }
}
