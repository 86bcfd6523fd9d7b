use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{KdTree, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Rows per patch.
pub const PATCH_SIZE: usize = 512;

/// Similarity transform from model units to a patch's local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub translation: Vec3,
    pub scale: f64,
}

pub fn normalize(frame: &Frame, p: &Vec3) -> Vec3 {
    (p - frame.translation) / frame.scale
}

pub fn denormalize(frame: &Frame, local: &Vec3) -> Vec3 {
    local * frame.scale + frame.translation
}

/// Fixed-size neighborhood of one point, expressed in its local frame.
///
/// Real rows come first with the center at `center_row`; the trailing
/// `pad_count` rows sit at the origin and carry the center's raw normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center_index: usize,
    pub center_row: usize,
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub radius: f64,
    pub frame: Frame,
    pub pad_count: usize,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.points.len() - self.pad_count
    }

    pub fn is_pad(&self, row: usize) -> bool {
        row >= self.real_count()
    }

    pub fn center_normal(&self) -> Vec3 {
        self.normals[self.center_row]
    }

    /// Model-unit position of a local-frame point.
    pub fn to_model(&self, local: &Vec3) -> Vec3 {
        denormalize(&self.frame, local)
    }
}

/// Patch builder that keeps a spatial index of the source cloud.
#[derive(Debug, Clone)]
pub struct PatchExtractor<'a> {
    cloud: &'a PointCloud,
    normals: &'a [Vec3],
    tree: KdTree,
}

impl<'a> PatchExtractor<'a> {
    pub fn new(cloud: &'a PointCloud) -> Result<Self> {
        let normals = cloud
            .normals()
            .ok_or_else(|| Error::invalid("patch extraction needs raw normals"))?;
        Ok(PatchExtractor {
            cloud,
            normals,
            tree: KdTree::new(cloud.points()),
        })
    }

    pub fn cloud(&self) -> &PointCloud {
        self.cloud
    }

    /// Collects every point strictly within `radius` of the center. Excess
    /// neighbors are subsampled uniformly with `seed`; the center is always
    /// kept.
    pub fn extract(&self, center_index: usize, radius: f64, size: usize, seed: u64) -> Patch {
        assert!(radius > 0.0, "patch radius must be positive");
        assert!(size >= 1, "patch size must be positive");
        let pts = self.cloud.points();
        let center = pts[center_index];
        let mut others: Vec<usize> = self
            .tree
            .within(&center, radius)
            .into_iter()
            .map(|(i, _)| i)
            .filter(|&i| i != center_index)
            .collect();
        if others.len() + 1 > size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = index::sample(&mut rng, others.len(), size - 1).into_vec();
            keep.sort_unstable();
            others = keep.into_iter().map(|k| others[k]).collect();
        }

        let frame = Frame {
            translation: center,
            scale: radius,
        };
        let center_normal = self.normals[center_index];
        let mut points = Vec::with_capacity(size);
        let mut normals = Vec::with_capacity(size);
        points.push(Vec3::zeros());
        normals.push(center_normal);
        for &j in &others {
            points.push(normalize(&frame, &pts[j]));
            normals.push(self.normals[j]);
        }
        let pad_count = size - points.len();
        points.resize(size, Vec3::zeros());
        normals.resize(size, center_normal);

        Patch {
            center_index,
            center_row: 0,
            points,
            normals,
            radius,
            frame,
            pad_count,
        }
    }
}

/// One-shot patch extraction; builds a throwaway spatial index.
pub fn extract_patch(cloud: &PointCloud, center_index: usize, radius: f64, size: usize, seed: u64) -> Result<Patch> {
    if center_index >= cloud.len() {
        return Err(Error::invalid(format!(
            "center index {center_index} out of range for {} points",
            cloud.len()
        )));
    }
    if radius <= 0.0 {
        return Err(Error::invalid("patch radius must be positive"));
    }
    Ok(PatchExtractor::new(cloud)?.extract(center_index, radius, size, seed))
}
