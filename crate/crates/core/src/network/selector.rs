//! Shape-aware selector: scores every patch row from its geometric priors
//! and coarse features, then keeps the top-K rows.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, Axis};

use super::extractor::CoarseFeatures;
use super::layers::{leaky_all, leaky_backward};
use super::params::{NetworkParams, Selector, PRIOR_WIDTH, SELECTOR_FEATURE_WIDTH};
use super::NetConfig;
use crate::geometry::{Patch, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutput {
    /// Raw score per patch row; pad rows hold `-inf`.
    pub scores: Vec<f64>,
    /// Rows of the `K` largest scores, ties by ascending row.
    pub selected: Vec<usize>,
    /// Set when fewer than `K` real rows exist and pads fill the tail.
    pub degenerate: bool,
}

/// Angle between each row's offset from the center and its raw normal, and
/// a Gaussian of its local-frame distance. Both are defined for pad rows too
/// (they coincide with the center).
pub fn geometric_priors(patch: &Patch) -> (Vec<f64>, Vec<f64>) {
    let center = patch.points[patch.center_row];
    patch
        .points
        .iter()
        .zip(&patch.normals)
        .map(|(p, n)| priors_for(&(p - center), n))
        .unzip()
}

fn priors_for(offset: &Vec3, normal: &Vec3) -> (f64, f64) {
    let len = offset.norm();
    let ang = if len == 0.0 {
        0.0
    } else {
        (offset.dot(normal) / (len * normal.norm())).clamp(-1.0, 1.0).acos()
    };
    (ang, (-len * len).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest scores, ties broken by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone)]
pub(crate) struct SelectorTape {
    angle_in: Array2<f64>,
    dist_in: Array2<f64>,
    pre_angle: Array2<f64>,
    pre_dist: Array2<f64>,
    pre_point: Array2<f64>,
    pre_normal: Array2<f64>,
    joined: Array2<f64>,
    pre_hidden: Array2<f64>,
    hidden: Array2<f64>,
    pub scores: Array1<f64>,
}

/// Scores for `rows` real rows given priors and per-row coarse features.
pub(crate) fn selector_forward(
    sel: &Selector,
    ang: &[f64],
    dist: &[f64],
    point_feats: &Array2<f64>,
    normal_feats: &Array2<f64>,
) -> SelectorTape {
    let rows = ang.len();
    let angle_in = Array2::from_shape_vec((rows, 1), ang.to_vec()).expect("column");
    let dist_in = Array2::from_shape_vec((rows, 1), dist.to_vec()).expect("column");
    let pre_angle = sel.angle.forward(angle_in.view());
    let pre_dist = sel.distance.forward(dist_in.view());
    let pre_point = sel.point.forward(point_feats.view());
    let pre_normal = sel.normal.forward(normal_feats.view());
    let joined = ndarray::concatenate![
        Axis(1),
        leaky_all(&pre_angle),
        leaky_all(&pre_dist),
        leaky_all(&pre_point),
        leaky_all(&pre_normal)
    ];
    let pre_hidden = sel.hidden.forward(joined.view());
    let hidden = leaky_all(&pre_hidden);
    let scores = sel.score.forward(hidden.view()).column(0).to_owned();
    SelectorTape {
        angle_in,
        dist_in,
        pre_angle,
        pre_dist,
        pre_point,
        pre_normal,
        joined,
        pre_hidden,
        hidden,
        scores,
    }
}

/// Returns gradients on the point and normal coarse features.
pub(crate) fn selector_backward(
    sel: &Selector,
    tape: &SelectorTape,
    point_feats: &Array2<f64>,
    normal_feats: &Array2<f64>,
    dscores: &Array1<f64>,
    grad: &mut Selector,
) -> (Array2<f64>, Array2<f64>) {
    let ds = dscores.view().insert_axis(Axis(1)).to_owned();
    let mut dh = sel.score.backward(tape.hidden.view(), ds.view(), &mut grad.score);
    leaky_backward(&tape.pre_hidden, &mut dh);
    let dj = sel.hidden.backward(tape.joined.view(), dh.view(), &mut grad.hidden);

    let a = PRIOR_WIDTH;
    let f = SELECTOR_FEATURE_WIDTH;
    let mut da = dj.slice(s![.., ..a]).to_owned();
    let mut dd = dj.slice(s![.., a..2 * a]).to_owned();
    let mut dp = dj.slice(s![.., 2 * a..2 * a + f]).to_owned();
    let mut dn = dj.slice(s![.., 2 * a + f..]).to_owned();
    leaky_backward(&tape.pre_angle, &mut da);
    leaky_backward(&tape.pre_dist, &mut dd);
    leaky_backward(&tape.pre_point, &mut dp);
    leaky_backward(&tape.pre_normal, &mut dn);
    sel.angle.accumulate(tape.angle_in.view(), da.view(), &mut grad.angle);
    sel.distance.accumulate(tape.dist_in.view(), dd.view(), &mut grad.distance);
    let dfp = sel.point.backward(point_feats.view(), dp.view(), &mut grad.point);
    let dfn = sel.normal.backward(normal_feats.view(), dn.view(), &mut grad.normal);
    (dfp, dfn)
}

/// Pads get `-inf`, then the `K` best rows are kept.
pub(crate) fn select(patch: &Patch, real_scores: &Array1<f64>, k: usize) -> SelectorOutput {
    let mut scores = vec![f64::NEG_INFINITY; patch.len()];
    scores[..real_scores.len()].copy_from_slice(real_scores.as_slice().expect("contiguous"));
    let k = k.min(patch.len());
    let selected = top_k(&scores, k);
    let degenerate = patch.real_count() < k;
    SelectorOutput {
        scores,
        selected,
        degenerate,
    }
}

/// Scores every row of `patch` and selects the top `cfg.top_k`.
pub fn score_points(patch: &Patch, coarse: &CoarseFeatures, cfg: &NetConfig, params: &NetworkParams) -> SelectorOutput {
    let r = patch.real_count();
    let (ang, dist) = geometric_priors(patch);
    let tape = selector_forward(
        &params.selector,
        &ang[..r],
        &dist[..r],
        &coarse.point_feats.slice(s![..r, ..]).to_owned(),
        &coarse.normal_feats.slice(s![..r, ..]).to_owned(),
    );
    select(patch, &tape.scores, cfg.top_k)
}
