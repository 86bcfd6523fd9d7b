//! The three-term training objective: bilateral point-denoise loss with a
//! repulsion term, normal-filter loss and orthogonality loss. Every term
//! returns its value together with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, KdTree, PointCloud, Vec3, PATCH_SIZE, UNIT_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_point: f64,
    pub lambda_normal: f64,
    pub lambda_ortho: f64,
    /// Balance between the projection term and the repulsion term.
    pub alpha: f64,
    /// Angle at which the normal-similarity kernel reaches `1/e`, degrees.
    pub theta_angle_deg: f64,
    /// Gaussian bandwidth of the distance kernel as a fraction of the patch radius.
    pub sigma_phi_rel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_point: 100.0,
            lambda_normal: 10.0,
            lambda_ortho: 10.0,
            alpha: 0.97,
            theta_angle_deg: 15.0,
            sigma_phi_rel: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_point > 0.0 && self.lambda_normal > 0.0 && self.lambda_ortho > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if !(self.sigma_phi_rel > 0.0) {
            return Err(Error::Config("sigma_phi_rel must be positive".into()));
        }
        if !(self.theta_angle_deg > 0.0 && self.theta_angle_deg < 180.0) {
            return Err(Error::Config("theta_angle_deg must lie in (0, 180)".into()));
        }
        Ok(())
    }

    /// Normal-similarity kernel.
    pub fn theta(&self, a: &Vec3, b: &Vec3) -> f64 {
        (-(1.0 - a.dot(b)) / (1.0 - self.theta_angle_deg.to_radians().cos())).exp()
    }
}

/// Distance kernel `exp(-d²/σ²)`.
pub fn phi(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (sigma * sigma)).exp()
}

/// Clean points around a denoised position, in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPatch {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Normal of the clean point nearest to the denoised position.
    pub center_normal: Vec3,
    pub radius: f64,
}

impl GroundTruthPatch {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>, center_normal: Vec3, radius: f64) -> Result<Self> {
        if points.is_empty() || points.len() != normals.len() {
            return Err(Error::invalid("ground-truth patch needs matching, nonempty rows"));
        }
        let unit = |n: &Vec3| (n.norm() - 1.0).abs() <= UNIT_TOLERANCE;
        if !normals.iter().all(unit) || !unit(&center_normal) {
            return Err(Error::invalid("ground-truth normals must be unit length"));
        }
        if !(radius > 0.0) {
            return Err(Error::invalid("ground-truth radius must be positive"));
        }
        Ok(GroundTruthPatch {
            points,
            normals,
            center_normal,
            radius,
        })
    }

    /// The nearest (at most [`PATCH_SIZE`]) clean points within `radius` of
    /// `center`; falls back to the single nearest point when none qualify.
    pub fn gather(clean: &PointCloud, tree: &KdTree, center: &Vec3, radius: f64) -> Result<Self> {
        let normals = clean
            .normals()
            .ok_or_else(|| Error::invalid("clean cloud needs ground-truth normals"))?;
        let mut rows: Vec<usize> = tree.within(center, radius).into_iter().map(|(i, _)| i).collect();
        if rows.is_empty() {
            rows.extend(tree.nearest_one(center).map(|(i, _)| i));
        }
        rows.truncate(PATCH_SIZE);
        Ok(GroundTruthPatch {
            points: rows.iter().map(|&i| clean.points()[i]).collect(),
            normals: rows.iter().map(|&i| normals[i]).collect(),
            center_normal: normals[rows[0]],
            radius,
        })
    }

    /// Flips every normal when the center normal disagrees with `reference`.
    pub fn oriented_like(mut self, reference: &Vec3) -> Self {
        if self.center_normal.dot(reference) < 0.0 {
            self.center_normal = -self.center_normal;
            for n in &mut self.normals {
                *n = -*n;
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sigma_phi(&self, cfg: &LossConfig) -> f64 {
        cfg.sigma_phi_rel * self.radius
    }
}

/// A loss value with its gradient on the denoised position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad: Vec3,
    /// The bilateral weights vanished and the unweighted mean was used.
    pub fallback: bool,
}

/// Bilateral projection distance to the ground-truth planes plus the
/// repulsion term `(1 − α) max_j ‖p̂ − p̄_j‖`.
pub fn point_denoise_loss(p_hat: &Vec3, gt: &GroundTruthPatch, cfg: &LossConfig) -> PointLoss {
    let sigma = gt.sigma_phi(cfg);
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut dnum = Vec3::zeros();
    let mut dden = Vec3::zeros();
    let mut plain = 0.0;
    let mut dplain = Vec3::zeros();
    let mut far = (f64::NEG_INFINITY, 0usize);
    for (j, (q, n)) in gt.points.iter().zip(&gt.normals).enumerate() {
        let e = p_hat - q;
        let proj = e.dot(n);
        let sign = if proj > 0.0 {
            1.0
        } else if proj < 0.0 {
            -1.0
        } else {
            0.0
        };
        let d2 = e.norm_squared();
        let w = (-d2 * inv_s2).exp() * cfg.theta(&gt.center_normal, n);
        num += proj.abs() * w;
        den += w;
        // d/dp̂ of |e·n| φ θ
        dnum += n * (sign * w) + e * (-2.0 * inv_s2 * proj.abs() * w);
        dden += e * (-2.0 * inv_s2 * w);
        plain += proj.abs();
        dplain += n * sign;
        if d2 > far.0 {
            far = (d2, j);
        }
    }
    let (proj_term, dproj, fallback) = if den < 1e-12 {
        let m = gt.len() as f64;
        (plain / m, dplain / m, true)
    } else {
        (num / den, (dnum * den - dden * num) / (den * den), false)
    };
    let e_far = p_hat - gt.points[far.1];
    let dist_far = far.0.sqrt();
    let drep = if dist_far > 0.0 { e_far / dist_far } else { Vec3::zeros() };
    PointLoss {
        value: cfg.alpha * proj_term + (1.0 - cfg.alpha) * dist_far,
        grad: dproj * cfg.alpha + drep * (1.0 - cfg.alpha),
        fallback,
    }
}

/// `‖n̂ − n̄‖²` and its gradient on `n̂`.
pub fn normal_filter_loss(n_hat: &Vec3, n_bar: &Vec3) -> (f64, Vec3) {
    let d = n_hat - n_bar;
    (d.norm_squared(), d * 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthoLoss {
    pub value: f64,
    pub grad_position: Vec3,
    pub grad_normal: Vec3,
    pub grad_weights: Vec<f64>,
}

/// `Σ_j (w_j |(p̂ − p̄_j)·n̂|)²`.
pub fn orthogonality_loss(p_hat: &Vec3, n_hat: &Vec3, gt: &GroundTruthPatch, weights: &[f64]) -> OrthoLoss {
    assert_eq!(weights.len(), gt.len(), "one weight per ground-truth row");
    let mut value = 0.0;
    let mut gp = Vec3::zeros();
    let mut gn = Vec3::zeros();
    let mut gw = Vec::with_capacity(weights.len());
    for (q, &w) in gt.points.iter().zip(weights) {
        let e = p_hat - q;
        let t = e.dot(n_hat);
        value += w * w * t * t;
        gp += n_hat * (2.0 * w * w * t);
        gn += e * (2.0 * w * w * t);
        gw.push(2.0 * w * t * t);
    }
    OrthoLoss {
        value,
        grad_position: gp,
        grad_normal: gn,
        grad_weights: gw,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub point: f64,
    pub normal: f64,
    pub ortho: f64,
    pub grad_position: Vec3,
    pub grad_normal: Vec3,
    /// Per ground-truth row.
    pub grad_weights: Vec<f64>,
    pub point_fallback: bool,
}

/// `λ₁ L_point + λ₂ L_normal + λ₃ L_ortho`.
pub fn joint_loss(p_hat: &Vec3, n_hat: &Vec3, gt: &GroundTruthPatch, weights: &[f64], cfg: &LossConfig) -> JointLoss {
    let lp = point_denoise_loss(p_hat, gt, cfg);
    let (ln, dn) = normal_filter_loss(n_hat, &gt.center_normal);
    let lo = orthogonality_loss(p_hat, n_hat, gt, weights);
    JointLoss {
        total: cfg.lambda_point * lp.value + cfg.lambda_normal * ln + cfg.lambda_ortho * lo.value,
        point: lp.value,
        normal: ln,
        ortho: lo.value,
        grad_position: lp.grad * cfg.lambda_point + lo.grad_position * cfg.lambda_ortho,
        grad_normal: dn * cfg.lambda_normal + lo.grad_normal * cfg.lambda_ortho,
        grad_weights: lo.grad_weights.iter().map(|g| g * cfg.lambda_ortho).collect(),
        point_fallback: lp.fallback,
    }
}

/// Selector weights carried over from noisy patch rows to ground-truth rows.
///
/// Each selected noisy row maps to its nearest ground-truth row (lowest index
/// on ties); a ground-truth row takes the largest weight mapped onto it and
/// zero when nothing maps there.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAlignment {
    pub weights: Vec<f64>,
    /// Noisy row that supplied each ground-truth weight.
    pub source: Vec<Option<usize>>,
}

impl WeightAlignment {
    /// `selected` pairs a noisy row id with its model-unit position and weight.
    pub fn new(gt: &GroundTruthPatch, selected: impl IntoIterator<Item = (usize, Vec3, f64)>) -> Self {
        let mut weights = vec![0.0; gt.len()];
        let mut source = vec![None; gt.len()];
        for (row, pos, w) in selected {
            let mut best = (f64::INFINITY, 0usize);
            for (j, q) in gt.points.iter().enumerate() {
                let d = dist2(&pos, q);
                if d < best.0 {
                    best = (d, j);
                }
            }
            let j = best.1;
            if source[j].is_none() || w > weights[j] {
                weights[j] = w;
                source[j] = Some(row);
            }
        }
        WeightAlignment { weights, source }
    }

    /// Routes per-ground-truth-row gradients back to noisy rows.
    pub fn scatter(&self, grad: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows];
        for (g, src) in grad.iter().zip(&self.source) {
            if let Some(r) = src {
                out[*r] += g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_patch(n: usize, rng: &mut ChaCha8Rng) -> GroundTruthPatch {
        let pts = (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0))
            .collect();
        GroundTruthPatch::new(pts, vec![Vec3::z(); n], Vec3::z(), 0.1).unwrap()
    }

    #[test]
    fn on_plane_only_repulsion_remains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = plane_patch(30, &mut rng);
        let cfg = LossConfig::default();
        let p = Vec3::new(0.01, -0.02, 0.0);
        let l = point_denoise_loss(&p, &gt, &cfg);
        let far = gt.points.iter().map(|q| (p - q).norm()).fold(0.0, f64::max);
        assert!((l.value - (1.0 - cfg.alpha) * far).abs() < 1e-15);
    }

    #[test]
    fn theta_is_one_for_equal_normals() {
        let cfg = LossConfig::default();
        let n = Vec3::new(0.0, 0.6, 0.8);
        assert_eq!(cfg.theta(&n, &n), 1.0);
        let tilted = Vec3::new(15f64.to_radians().sin(), 0.0, 15f64.to_radians().cos());
        assert!((cfg.theta(&Vec3::z(), &tilted) - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn normal_loss_configurations() {
        let n = Vec3::new(0.0, 0.6, 0.8);
        assert_eq!(normal_filter_loss(&n, &n).0, 0.0);
        assert!((normal_filter_loss(&-n, &n).0 - 4.0).abs() < 1e-15);
        assert!((normal_filter_loss(&Vec3::x(), &n).0 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ortho_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = plane_patch(20, &mut rng);
        let w: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        assert_eq!(orthogonality_loss(&Vec3::new(0.01, 0.0, 0.0), &Vec3::z(), &gt, &w).value, 0.0);
        let p = Vec3::new(0.0, 0.0, 0.3);
        let n = Vec3::new(1.0, 1.0, 1.0).normalize();
        assert_eq!(orthogonality_loss(&p, &n, &gt, &[0.0; 20]).value, 0.0);
    }

    #[test]
    fn joint_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gt = plane_patch(10, &mut rng);
        gt.center_normal = Vec3::new(0.0, 1.0, 0.0);
        let cfg = LossConfig::default();
        let p = Vec3::new(0.01, 0.02, 0.03);
        let n = Vec3::new(0.0, 0.6, 0.8);
        let w: Vec<f64> = (0..10).map(|_| rng.random()).collect();
        let j = joint_loss(&p, &n, &gt, &w, &cfg);
        let a = point_denoise_loss(&p, &gt, &cfg).value;
        let b = normal_filter_loss(&n, &gt.center_normal).0;
        let c = orthogonality_loss(&p, &n, &gt, &w).value;
        assert_eq!(j.total, 100.0 * a + 10.0 * b + 10.0 * c);
    }

    #[test]
    fn fallback_when_kernels_vanish() {
        let gt = GroundTruthPatch::new(vec![Vec3::zeros()], vec![Vec3::z()], Vec3::z(), 1e-3).unwrap();
        let l = point_denoise_loss(&Vec3::new(0.0, 0.0, 5.0), &gt, &LossConfig::default());
        assert!(l.fallback);
        assert!((l.value - (0.97 * 5.0 + 0.03 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_monotone() {
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for i in 0..100 {
            let v = phi(i as f64 * 0.01, 0.05);
            assert!(v <= last);
            last = v;
        }
        let mut last = f64::INFINITY;
        for i in 0..=180 {
            let a = (i as f64).to_radians();
            let v = cfg.theta(&Vec3::z(), &Vec3::new(a.sin(), 0.0, a.cos()));
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn alignment_takes_max_and_scatters() {
        let gt = GroundTruthPatch::new(
            vec![Vec3::zeros(), Vec3::x()],
            vec![Vec3::z(); 2],
            Vec3::z(),
            1.0,
        )
        .unwrap();
        let a = WeightAlignment::new(
            &gt,
            [
                (0, Vec3::new(0.1, 0.0, 0.0), 0.2),
                (3, Vec3::new(-0.1, 0.0, 0.0), 0.7),
                (5, Vec3::new(0.9, 0.0, 0.0), 0.4),
            ],
        );
        assert_eq!(a.weights, vec![0.7, 0.4]);
        assert_eq!(a.source, vec![Some(3), Some(5)]);
        assert_eq!(a.scatter(&[1.0, 2.0], 6), vec![0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn orientation_follows_reference() {
        let gt = GroundTruthPatch::new(vec![Vec3::zeros()], vec![Vec3::z()], Vec3::z(), 1.0).unwrap();
        let flipped = gt.clone().oriented_like(&Vec3::new(0.0, 0.1, -1.0));
        assert_eq!(flipped.center_normal, -Vec3::z());
        assert_eq!(flipped.normals[0], -Vec3::z());
        assert_eq!(gt.clone().oriented_like(&Vec3::z()), gt);
    }
}
