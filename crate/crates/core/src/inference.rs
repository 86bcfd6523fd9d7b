//! Whole-cloud denoising and normal filtering with iterative refinement.

use rayon::prelude::*;

use crate::dataset::RAW_NORMAL_K;
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals_pca, PatchExtractor, PointCloud, Vec3};
use crate::network::{forward, NetConfig, NetworkParams};
use crate::seed::derive;

/// One pass for light noise (≤ 1% of the diagonal), two otherwise.
pub fn default_iterations(noise_level: f64) -> usize {
    if noise_level <= 0.01 {
        1
    } else {
        2
    }
}

fn with_raw_normals(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.normals().is_some() {
        return Ok(cloud.clone());
    }
    let k = RAW_NORMAL_K.min(cloud.len());
    let mut out = cloud.clone();
    if k >= 3 {
        out.set_normals(estimate_normals_pca(cloud, k)?.normals)?;
    } else {
        out.set_normals(vec![Vec3::z(); cloud.len()])?;
    }
    Ok(out)
}

fn patch_seed(seed: u64, iteration: usize, index: usize) -> u64 {
    derive(seed, &[iteration as u64, index as u64])
}

/// Runs `iterations` rounds; each round's positions and filtered normals are
/// the next round's input. Returns every intermediate cloud. Clouds without
/// normals get PCA raw normals for the first round. The patch radius stays
/// tied to the input's diagonal throughout.
pub fn denoise_cloud(
    cloud: &PointCloud,
    params: &NetworkParams,
    cfg: &NetConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot denoise an empty cloud"));
    }
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    cfg.validate()?;
    let radius = cfg.radius_fraction * cloud.diag();
    if !(radius > 0.0) {
        return Err(Error::invalid("cloud has a zero bounding-box diagonal"));
    }
    let mut current = with_raw_normals(cloud)?;
    let mut outputs = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let extractor = PatchExtractor::new(&current)?;
        let (points, normals): (Vec<Vec3>, Vec<Vec3>) = (0..current.len())
            .into_par_iter()
            .map(|i| {
                let patch = extractor.extract(i, radius, cfg.patch_size, patch_seed(seed, it, i));
                let out = forward(&patch, cfg, params);
                (out.position, out.normal)
            })
            .unzip();
        let next = PointCloud::with_normals(points, normals)?;
        outputs.push(next.clone());
        current = next;
    }
    Ok(outputs)
}

/// Denoised position and filtered normal of a single point; matches the
/// corresponding row of the first round of [`denoise_cloud`].
pub fn denoise_point(
    cloud: &PointCloud,
    index: usize,
    params: &NetworkParams,
    cfg: &NetConfig,
    seed: u64,
) -> Result<(Vec3, Vec3)> {
    if index >= cloud.len() {
        return Err(Error::invalid(format!("index {index} out of range for {} points", cloud.len())));
    }
    cfg.validate()?;
    let cloud = with_raw_normals(cloud)?;
    let radius = cfg.radius_fraction * cloud.diag();
    let patch = PatchExtractor::new(&cloud)?.extract(index, radius, cfg.patch_size, patch_seed(seed, 0, index));
    let out = forward(&patch, cfg, params);
    Ok((out.position, out.normal))
}
