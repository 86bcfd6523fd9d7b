//! Patch-sampling training loop: momentum SGD on the joint objective with a
//! geometric learning-rate decay.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NoisySample;
use crate::error::{Error, Result};
use crate::geometry::{KdTree, Patch, PatchExtractor, PointCloud};
use crate::losses::{joint_loss, GroundTruthPatch, JointLoss, LossConfig, WeightAlignment};
use crate::network::{backward, forward_tape, NetConfig, NetworkParams, Upstream};
use crate::seed::derive;

/// Patches per gradient buffer; fixed so the summation order does not depend
/// on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Patch centers drawn from every cloud per epoch.
    pub centers_per_cloud: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr_start: 1e-4,
            lr_end: 1e-8,
            momentum: 0.9,
            batch_size: 64,
            centers_per_cloud: 256,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config("need lr_start > lr_end > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.centers_per_cloud == 0 {
            return Err(Error::Config("batch_size and centers_per_cloud must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_start · (lr_end/lr_start)^(e/(epochs−1))`; constant for one epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
}

/// Momentum SGD: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: NetworkParams,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: NetworkParams::zeros(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grad: &mut NetworkParams, lr: f64) {
        let mu = self.momentum;
        for ((v, g), p) in self
            .velocity
            .arrays_mut()
            .into_iter()
            .zip(grad.arrays_mut())
            .zip(params.arrays_mut())
        {
            for ((v, g), p) in v.iter_mut().zip(g.iter()).zip(p.iter_mut()) {
                *v = mu * *v + *g;
                *p -= lr * *v;
            }
        }
    }
}

/// Mean loss terms over a set of patches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub point: f64,
    pub normal: f64,
    pub ortho: f64,
}

impl LossTerms {
    fn add(&mut self, j: &JointLoss) {
        self.loss += j.total;
        self.point += j.point;
        self.normal += j.normal;
        self.ortho += j.ortho;
    }

    fn scaled(self, s: f64) -> Self {
        LossTerms {
            loss: self.loss * s,
            point: self.point * s,
            normal: self.normal * s,
            ortho: self.ortho * s,
        }
    }
}

/// Forward pass, ground-truth lookup and joint loss for one patch. With
/// `grad`, the parameter gradient of `scale · loss` is accumulated into it.
pub fn patch_loss(
    patch: &Patch,
    clean: &PointCloud,
    clean_tree: &KdTree,
    params: &NetworkParams,
    net_cfg: &NetConfig,
    loss_cfg: &LossConfig,
    grad: Option<(&mut NetworkParams, f64)>,
) -> Result<JointLoss> {
    let (out, tape) = forward_tape(patch, net_cfg, params);
    let gt = GroundTruthPatch::gather(clean, clean_tree, &out.position, patch.radius)?
        .oriented_like(&patch.center_normal());
    let selected = out
        .selected
        .iter()
        .filter(|&&row| !patch.is_pad(row))
        .map(|&row| (row, patch.to_model(&patch.points[row]), out.weights[row]));
    let align = WeightAlignment::new(&gt, selected);
    let joint = joint_loss(&out.position, &out.normal, &gt, &align.weights, loss_cfg);
    if let Some((grad, scale)) = grad {
        let up = Upstream {
            position: joint.grad_position * scale,
            normal: joint.grad_normal * scale,
            weights: align
                .scatter(&joint.grad_weights, patch.len())
                .into_iter()
                .map(|g| g * scale)
                .collect(),
        };
        backward(params, &tape, &up, grad);
    }
    Ok(joint)
}

fn non_finite_term(j: &JointLoss) -> Option<&'static str> {
    if !j.point.is_finite() {
        Some("L_point")
    } else if !j.normal.is_finite() {
        Some("L_normal")
    } else if !j.ortho.is_finite() {
        Some("L_ortho")
    } else if !j.total.is_finite() {
        Some("joint")
    } else {
        None
    }
}

/// One patch of a batch together with the clean cloud it is scored against.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub patch: Patch,
    pub clean: &'a PointCloud,
    pub clean_tree: &'a KdTree,
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: NetworkParams,
    pub net_cfg: NetConfig,
    pub loss_cfg: LossConfig,
    sgd: Sgd,
}

impl Trainer {
    pub fn new(params: NetworkParams, net_cfg: NetConfig, loss_cfg: LossConfig, momentum: f64) -> Result<Self> {
        net_cfg.validate()?;
        loss_cfg.validate()?;
        Ok(Trainer {
            params,
            net_cfg,
            loss_cfg,
            sgd: Sgd::new(momentum),
        })
    }

    /// Mean joint loss over `items` and its gradient; no update.
    pub fn evaluate(&self, items: &[TrainItem<'_>], epoch: usize, batch: usize) -> Result<(LossTerms, NetworkParams)> {
        if items.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / items.len() as f64;
        let chunks: Vec<Result<(LossTerms, NetworkParams)>> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = NetworkParams::zeros();
                let mut terms = LossTerms::default();
                for item in chunk {
                    let j = patch_loss(
                        &item.patch,
                        item.clean,
                        item.clean_tree,
                        &self.params,
                        &self.net_cfg,
                        &self.loss_cfg,
                        Some((&mut grad, scale)),
                    )?;
                    if let Some(term) = non_finite_term(&j) {
                        return Err(Error::NonFinite { term, epoch, batch });
                    }
                    terms.add(&j);
                }
                Ok((terms, grad))
            })
            .collect();
        let mut chunks = chunks.into_iter();
        let (mut terms, mut grad) = chunks.next().expect("nonempty")?;
        for c in chunks {
            let (t, g) = c?;
            terms.loss += t.loss;
            terms.point += t.point;
            terms.normal += t.normal;
            terms.ortho += t.ortho;
            grad.add_scaled(&g, 1.0);
        }
        Ok((terms.scaled(scale), grad))
    }

    /// One optimizer update on the mean loss of `items`; returns the loss
    /// before the update.
    pub fn step(&mut self, items: &[TrainItem<'_>], lr: f64, epoch: usize, batch: usize) -> Result<LossTerms> {
        let (terms, mut grad) = self.evaluate(items, epoch, batch)?;
        self.sgd.step(&mut self.params, &mut grad, lr);
        Ok(terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl History {
    /// `epoch,lr,loss,L_point,L_normal,L_ortho` per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,L_point,L_normal,L_ortho\n");
        for r in &self.epochs {
            let t = &r.terms;
            writeln!(s, "{},{:e},{:.12e},{:.12e},{:.12e},{:.12e}", r.epoch, r.lr, t.loss, t.point, t.normal, t.ortho)
                .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

struct Cloud<'a> {
    extractor: PatchExtractor<'a>,
    clean: &'a PointCloud,
    tree: KdTree,
    radius: f64,
}

/// Trains from `params` over `dataset`. `on_epoch` runs after every epoch
/// (checkpointing, progress) and may abort the run by returning an error.
pub fn train_from(
    params: NetworkParams,
    dataset: &[NoisySample],
    cfg: &TrainConfig,
    net_cfg: &NetConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &NetworkParams) -> Result<()>,
) -> Result<(NetworkParams, History)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    let clouds = dataset
        .iter()
        .map(|s| {
            if s.clean.normals().is_none() {
                return Err(Error::invalid("clean clouds need ground-truth normals"));
            }
            Ok(Cloud {
                extractor: PatchExtractor::new(&s.noisy)?,
                clean: &s.clean,
                tree: KdTree::new(s.clean.points()),
                radius: net_cfg.radius_fraction * s.noisy.diag(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trainer = Trainer::new(params, net_cfg.clone(), loss_cfg.clone(), cfg.momentum)?;
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[epoch as u64]));
        let mut pairs = Vec::new();
        for (ci, c) in clouds.iter().enumerate() {
            let n = c.extractor.cloud().len();
            let take = cfg.centers_per_cloud.min(n);
            pairs.extend(index::sample(&mut rng, n, take).into_iter().map(|i| (ci, i)));
        }
        pairs.shuffle(&mut rng);

        let mut sum = LossTerms::default();
        for (batch, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let items: Vec<TrainItem<'_>> = chunk
                .iter()
                .map(|&(ci, i)| {
                    let c = &clouds[ci];
                    let seed = derive(cfg.seed, &[epoch as u64, ci as u64, i as u64]);
                    TrainItem {
                        patch: c.extractor.extract(i, c.radius, net_cfg.patch_size, seed),
                        clean: c.clean,
                        clean_tree: &c.tree,
                    }
                })
                .collect();
            let terms = trainer.step(&items, lr, epoch, batch)?;
            if !trainer.params.all_finite() {
                return Err(Error::NonFinite {
                    term: "parameter",
                    epoch,
                    batch,
                });
            }
            let w = items.len() as f64;
            sum.loss += terms.loss * w;
            sum.point += terms.point * w;
            sum.normal += terms.normal * w;
            sum.ortho += terms.ortho * w;
            history.steps.push(StepRecord { epoch, batch, terms });
        }
        let record = EpochRecord {
            epoch,
            lr,
            terms: sum.scaled(1.0 / pairs.len() as f64),
        };
        history.epochs.push(record);
        on_epoch(&record, &trainer.params)?;
    }
    Ok((trainer.params, history))
}

/// Trains a freshly initialized network.
pub fn train(
    dataset: &[NoisySample],
    cfg: &TrainConfig,
    net_cfg: &NetConfig,
    loss_cfg: &LossConfig,
) -> Result<(NetworkParams, History)> {
    let params = NetworkParams::init(net_cfg, net_cfg.init_seed);
    train_from(params, dataset, cfg, net_cfg, loss_cfg, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{add_gaussian_noise, generate_shape, ShapeKind, ShapeSpec};

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert!((lr_schedule(4, &cfg) - 1e-8).abs() < 1e-20);
        assert!((lr_schedule(2, &cfg) - 1e-6).abs() < 1e-18);
        let one = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &one), 1e-4);
    }

    #[test]
    fn momentum_two_step_oracle() {
        let mut params = NetworkParams::zeros();
        params.fill(1.0);
        let mut sgd = Sgd::new(0.9);
        let mut g = NetworkParams::zeros();
        g.fill(2.0);
        sgd.step(&mut params, &mut g.clone(), 0.1);
        g.fill(-1.0);
        sgd.step(&mut params, &mut g, 0.1);
        // v1 = 2, θ1 = 1 - 0.2 = 0.8; v2 = 1.8 - 1 = 0.8, θ2 = 0.8 - 0.08 = 0.72
        let expected = (1.0 - 0.1 * 2.0) - 0.1 * (0.9 * 2.0 - 1.0);
        for a in params.arrays_mut() {
            assert!(a.iter().all(|&v| v == expected));
        }
    }

    fn tiny_dataset() -> Vec<NoisySample> {
        let clean = generate_shape(&ShapeSpec::new(ShapeKind::Cube, 300, 1)).unwrap();
        vec![add_gaussian_noise(&clean, 0.01, 2).unwrap()]
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            centers_per_cloud: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let data = tiny_dataset();
        let net_cfg = NetConfig::default();
        let params = NetworkParams::init(&net_cfg, 0);
        let clouds = &data[0];
        let extractor = PatchExtractor::new(&clouds.noisy).unwrap();
        let tree = KdTree::new(clouds.clean.points());
        let r = net_cfg.radius_fraction * clouds.noisy.diag();
        let items: Vec<TrainItem<'_>> = (0..3)
            .map(|i| TrainItem {
                patch: extractor.extract(i * 10, r, net_cfg.patch_size, 0),
                clean: &clouds.clean,
                clean_tree: &tree,
            })
            .collect();
        let mut trainer = Trainer::new(params.clone(), net_cfg, LossConfig::default(), 0.9).unwrap();
        let terms = trainer.step(&items, 0.0, 0, 0).unwrap();
        assert!(terms.loss.is_finite() && terms.loss > 0.0);
        assert_eq!(trainer.params, params);
    }

    #[test]
    fn fixed_seed_gives_identical_history() {
        let data = tiny_dataset();
        let cfg = tiny_cfg();
        let net_cfg = NetConfig::default();
        let (pa, ha) = train(&data, &cfg, &net_cfg, &LossConfig::default()).unwrap();
        let (pb, hb) = train(&data, &cfg, &net_cfg, &LossConfig::default()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(pa, pb);
        assert_eq!(ha.epochs.len(), 2);
        assert_eq!(ha.steps.len(), 4);
        assert!(ha.to_csv().starts_with("epoch,lr,loss,L_point,L_normal,L_ortho\n"));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.lr_end = cfg.lr_start;
        assert!(cfg.validate().is_err());
        assert!(train(&[], &TrainConfig::default(), &NetConfig::default(), &LossConfig::default()).is_err());
    }
}
