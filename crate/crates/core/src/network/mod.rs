//! The multitask patch network: two-stream multiscale extractor, shape-aware
//! selector, feature refinement and the coordinate/normal decoder, with a
//! hand-written backward pass.

mod decoder;
mod extractor;
mod layers;
mod params;
mod refine;
mod selector;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Patch, Vec3, PATCH_SIZE};

pub use decoder::{regress_displacement, regress_normal, residual_block, squash, squash_backward, NORMAL_EPS};
pub use extractor::{edgeconv, extract_coarse, CoarseFeatures};
pub use layers::{column_max, leaky, Linear, Mlp, LEAKY_SLOPE};
pub use params::{
    DisplacementHead, Extractor, NetworkParams, NormalHead, ResidualBlock, Selector, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION, EDGE_WIDTH, FEATURE_WIDTH, REFINED_WIDTH,
};
pub use refine::{augment, fuse, RefinedFeatures};
pub use selector::{geometric_priors, score_points, sigmoid, top_k, SelectorOutput};

use extractor::{patch_graphs, rows_of, stream_backward, stream_forward, PatchGraphs, StreamTape};
use refine::{augment_backward, augment_cached, fuse_backward, AugmentTape};
use selector::{select, selector_backward, selector_forward, SelectorTape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Small Euclidean neighborhood.
    pub k1: usize,
    /// Large Euclidean neighborhood.
    pub k2: usize,
    /// Feature-space neighborhood.
    pub k3: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { k1: 8, k2: 16, k3: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Rows per patch (M).
    pub patch_size: usize,
    /// Rows kept by the selector (K).
    pub top_k: usize,
    pub extractor: ExtractorConfig,
    /// Augmentation neighborhood size.
    pub k4: usize,
    /// Patch radius as a fraction of the cloud's bounding-box diagonal.
    pub radius_fraction: f64,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch_size: PATCH_SIZE,
            top_k: PATCH_SIZE / 2,
            extractor: ExtractorConfig::default(),
            k4: 10,
            radius_fraction: 0.05,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.patch_size;
        let e = &self.extractor;
        if m == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        for (name, k) in [("k1", e.k1), ("k2", e.k2), ("k3", e.k3), ("k4", self.k4), ("top_k", self.top_k)] {
            if k == 0 || k > m {
                return Err(Error::Config(format!("{name} = {k} must lie in 1..={m}")));
            }
        }
        if !(self.radius_fraction > 0.0) {
            return Err(Error::Config("radius_fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Denoised center in model units.
    pub position: Vec3,
    /// Unit filtered normal.
    pub normal: Vec3,
    /// Local-frame displacement inside the unit ball.
    pub displacement: Vec3,
    /// Raw selector score per patch row (`-inf` on pads).
    pub scores: Vec<f64>,
    /// Scores mapped through the logistic function (0 on pads).
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
    pub degenerate_selection: bool,
    pub normal_fallback: bool,
}

/// Gradients arriving from the loss.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub position: Vec3,
    pub normal: Vec3,
    /// Per patch row; empty means zero.
    pub weights: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    real: usize,
    radius: f64,
    graphs: PatchGraphs,
    point: StreamTape,
    normal: StreamTape,
    selector: SelectorTape,
    weights: Vec<f64>,
    unique: Vec<usize>,
    aug_point: AugmentTape,
    aug_normal: AugmentTape,
    displacement: decoder::DisplacementTape,
    normal_head: decoder::NormalTape,
}

/// Runs the network on a patch and keeps the state needed for [`backward`].
///
/// Only real rows are evaluated: pad rows coincide with the center in both
/// position and raw normal and never join another row's neighborhood, so
/// every quantity on a pad equals the center's.
pub fn forward_tape(patch: &Patch, cfg: &NetConfig, params: &NetworkParams) -> (ForwardOutput, Tape) {
    let r = patch.real_count();
    let c = patch.center_row;
    let graphs = patch_graphs(&patch.points[..r], &cfg.extractor, cfg.k4);
    let xp = rows_of(&patch.points[..r]);
    let xn = rows_of(&patch.normals[..r]);
    let k3 = cfg.extractor.k3;
    let point = stream_forward(&params.point_extractor, &xp, &graphs.near, &graphs.far, k3);
    let normal = stream_forward(&params.normal_extractor, &xn, &graphs.near, &graphs.far, k3);

    let (ang, dist) = geometric_priors(patch);
    let sel_tape = selector_forward(&params.selector, &ang[..r], &dist[..r], &point.feats, &normal.feats);
    let selection = select(patch, &sel_tape.scores, cfg.top_k);
    let weights: Vec<f64> = sel_tape.scores.iter().map(|&s| sigmoid(s)).collect();

    // Selected rows folded onto real rows, first occurrence order.
    let mut seen = vec![false; r];
    let mut unique = Vec::new();
    for &row in &selection.selected {
        let u = if row < r { row } else { c };
        if !seen[u] {
            seen[u] = true;
            unique.push(u);
        }
    }

    let (f2p, aug_point) = augment_cached(&point.feats, &unique, &graphs.augment, &weights, &params.point_augment);
    let (f2n, aug_normal) = augment_cached(&normal.feats, &unique, &graphs.augment, &weights, &params.normal_augment);
    let refined = fuse(&f2p, &f2n, &point.global, &normal.global);

    let (displacement, disp_tape) = decoder::displacement_forward(&refined.point, &params.displacement);
    let (n_hat, normal_tape) = decoder::normal_forward(&refined.normal, &params.normal, &patch.center_normal());
    let position = patch.to_model(&displacement);
    debug_assert!(position.iter().all(|v| v.is_finite()), "non-finite position");

    let mut all_weights = vec![0.0; patch.len()];
    all_weights[..r].copy_from_slice(&weights);
    let out = ForwardOutput {
        position,
        normal: n_hat,
        displacement,
        scores: selection.scores,
        weights: all_weights,
        selected: selection.selected,
        degenerate_selection: selection.degenerate,
        normal_fallback: normal_tape.fallback,
    };
    let tape = Tape {
        real: r,
        radius: patch.radius,
        graphs,
        point,
        normal,
        selector: sel_tape,
        weights,
        unique,
        aug_point,
        aug_normal,
        displacement: disp_tape,
        normal_head: normal_tape,
    };
    (out, tape)
}

pub fn forward(patch: &Patch, cfg: &NetConfig, params: &NetworkParams) -> ForwardOutput {
    forward_tape(patch, cfg, params).0
}

fn scatter_global(feats: &mut Array2<f64>, arg: &[usize], d: &Array1<f64>) {
    for (ch, &row) in arg.iter().enumerate() {
        feats[[row, ch]] += d[ch];
    }
}

/// Accumulates parameter gradients of a scalar loss into `grad`.
pub fn backward(params: &NetworkParams, tape: &Tape, upstream: &Upstream, grad: &mut NetworkParams) {
    let dd = upstream.position * tape.radius;
    let df3p = decoder::displacement_backward(&params.displacement, &tape.displacement, &dd, &mut grad.displacement);
    let df3n = decoder::normal_backward(&params.normal, &tape.normal_head, &upstream.normal, &mut grad.normal);
    let (df2p, df2n, dgp, dgn) = fuse_backward(&df3p, &df3n);

    let (mut dfp, dwp) = augment_backward(
        &params.point_augment,
        &tape.aug_point,
        &tape.point.feats,
        &tape.unique,
        &tape.graphs.augment,
        &tape.weights,
        df2p,
        &mut grad.point_augment,
    );
    let (mut dfn, dwn) = augment_backward(
        &params.normal_augment,
        &tape.aug_normal,
        &tape.normal.feats,
        &tape.unique,
        &tape.graphs.augment,
        &tape.weights,
        df2n,
        &mut grad.normal_augment,
    );

    let dscores = Array1::from_shape_fn(tape.real, |i| {
        let ext = upstream.weights.get(i).copied().unwrap_or(0.0);
        let w = tape.weights[i];
        (dwp[i] + dwn[i] + ext) * w * (1.0 - w)
    });
    let (dfp_sel, dfn_sel) = selector_backward(
        &params.selector,
        &tape.selector,
        &tape.point.feats,
        &tape.normal.feats,
        &dscores,
        &mut grad.selector,
    );
    dfp += &dfp_sel;
    dfn += &dfn_sel;
    scatter_global(&mut dfp, &tape.point.global_arg, &dgp);
    scatter_global(&mut dfn, &tape.normal.global_arg, &dgn);

    stream_backward(&params.point_extractor, &tape.point, dfp, &mut grad.point_extractor);
    stream_backward(&params.normal_extractor, &tape.normal, dfn, &mut grad.normal_extractor);
}
