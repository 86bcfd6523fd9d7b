//! Multiscale feature extractor: EdgeConv over two Euclidean graphs, then
//! over a graph rebuilt in the learned feature space.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::layers::{all_finite, backward_layers, column_max, forward_layers_cached, leaky_all, leaky_backward, Mlp, MlpCache};
use super::params::{Extractor, NetworkParams};
use super::{ExtractorConfig, NetConfig};
use crate::geometry::{Patch, Vec3};

/// Per-point learned features of one patch, one block per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFeatures {
    pub point_feats: Array2<f64>,
    pub normal_feats: Array2<f64>,
    pub global_point: Array1<f64>,
    pub global_normal: Array1<f64>,
}

/// Row-wise kNN among `n` items under `dist2`, ascending by distance then
/// index. Neighborhoods shrink to `n` when `k > n`.
pub(crate) fn knn_rows(n: usize, k: usize, dist2: impl Fn(usize, usize) -> f64) -> Vec<Vec<usize>> {
    let k = k.min(n);
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n).map(|j| (dist2(i, j), j)).collect();
            if k < n {
                d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

pub(crate) fn spatial_knn(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    knn_rows(points.len(), k, |i, j| (points[i] - points[j]).norm_squared())
}

pub(crate) fn feature_knn(f: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    knn_rows(f.nrows(), k, |i, j| {
        f.row(i)
            .iter()
            .zip(f.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

#[derive(Debug, Clone)]
pub(crate) struct EdgeCache {
    k: usize,
    first_pre: Array2<f64>,
    rest: MlpCache,
    argmax: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    width: usize,
}

/// EdgeConv: `max_q h([x_j, x_q - x_j])` over each row's neighbor list.
/// All lists must have the same length.
pub fn edgeconv(feats: ArrayView2<f64>, neighbors: &[Vec<usize>], mlp: &Mlp) -> Array2<f64> {
    edgeconv_cached(feats, neighbors, mlp).0
}

/// Splits the first layer's weight into the parts acting on `x_j` and on
/// `x_q - x_j`.
fn split_first(mlp: &Mlp, c: usize) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let w = &mlp.layers[0].weight;
    assert_eq!(w.ncols(), 2 * c, "edge MLP input width");
    (w.slice(s![.., ..c]), w.slice(s![.., c..]))
}

pub(crate) fn edgeconv_cached(feats: ArrayView2<f64>, neighbors: &[Vec<usize>], mlp: &Mlp) -> (Array2<f64>, EdgeCache) {
    let rows = feats.nrows();
    let c = feats.ncols();
    let k = neighbors.first().map_or(0, Vec::len);
    assert!(neighbors.iter().all(|n| n.len() == k), "ragged neighbor lists");
    // The first layer is linear in [x_j, x_q - x_j], so it is evaluated per
    // node: z = (W_a - W_b) x_j + W_b x_q + b.
    let (wa, wb) = split_first(mlp, c);
    let own = feats.dot(&(&wa - &wb).t()) + &mlp.layers[0].bias;
    let other = feats.dot(&wb.t());
    let hidden = own.ncols();
    let mut first_pre = Array2::zeros((rows * k, hidden));
    for (j, nb) in neighbors.iter().enumerate() {
        for (t, &q) in nb.iter().enumerate() {
            let mut z = first_pre.row_mut(j * k + t);
            z.assign(&own.row(j));
            z += &other.row(q);
        }
    }
    let (h, rest) = forward_layers_cached(&mlp.layers[1..], leaky_all(&first_pre));
    let width = h.ncols();
    let mut out = Array2::zeros((rows, width));
    let mut argmax = vec![0usize; rows * width];
    for j in 0..rows {
        for ch in 0..width {
            let mut best = h[[j * k, ch]];
            let mut arg = 0;
            for t in 1..k {
                let v = h[[j * k + t, ch]];
                if v > best {
                    best = v;
                    arg = t;
                }
            }
            out[[j, ch]] = best;
            argmax[j * width + ch] = arg;
        }
    }
    debug_assert!(all_finite(&out), "edgeconv produced non-finite values");
    (
        out,
        EdgeCache {
            k,
            first_pre,
            rest,
            argmax,
            neighbors: neighbors.to_vec(),
            width,
        },
    )
}

pub(crate) fn edgeconv_backward(
    mlp: &Mlp,
    cache: &EdgeCache,
    feats: ArrayView2<f64>,
    dout: &Array2<f64>,
    grad: &mut Mlp,
) -> Array2<f64> {
    let rows = dout.nrows();
    let k = cache.k;
    let c = feats.ncols();
    let mut dh = Array2::zeros((rows * k, cache.width));
    for j in 0..rows {
        for ch in 0..cache.width {
            let t = cache.argmax[j * cache.width + ch];
            dh[[j * k + t, ch]] = dout[[j, ch]];
        }
    }
    let mut dz = backward_layers(&mlp.layers[1..], &cache.rest, dh, &mut grad.layers[1..]);
    leaky_backward(&cache.first_pre, &mut dz);
    // Per-node sums of edge gradients: as the edge's own row and as its neighbor.
    let hidden = dz.ncols();
    let mut own = Array2::zeros((rows, hidden));
    let mut other = Array2::zeros((rows, hidden));
    for (j, nb) in cache.neighbors.iter().enumerate() {
        for (t, &q) in nb.iter().enumerate() {
            let e = dz.row(j * k + t);
            let mut o = own.row_mut(j);
            o += &e;
            let mut n = other.row_mut(q);
            n += &e;
        }
    }
    let (wa, wb) = split_first(mlp, c);
    let g = &mut grad.layers[0];
    let dwa = own.t().dot(&feats);
    let dwb = other.t().dot(&feats) - &dwa;
    {
        let mut gw = g.weight.slice_mut(s![.., ..c]);
        gw += &dwa;
    }
    {
        let mut gw = g.weight.slice_mut(s![.., c..]);
        gw += &dwb;
    }
    g.bias += &own.sum_axis(Axis(0));
    own.dot(&(&wa - &wb)) + other.dot(&wb)
}

/// Forward state of one stream over the real rows of a patch.
#[derive(Debug, Clone)]
pub(crate) struct StreamTape {
    near: EdgeCache,
    far: EdgeCache,
    merge: MlpCache,
    feature: EdgeCache,
    post: MlpCache,
    input: Array2<f64>,
    f1: Array2<f64>,
    pub feats: Array2<f64>,
    pub global: Array1<f64>,
    pub global_arg: Vec<usize>,
}

pub(crate) fn stream_forward(
    ext: &Extractor,
    input: &Array2<f64>,
    near: &[Vec<usize>],
    far: &[Vec<usize>],
    k_feature: usize,
) -> StreamTape {
    let (a1, near_c) = edgeconv_cached(input.view(), near, &ext.edge_near);
    let (a2, far_c) = edgeconv_cached(input.view(), far, &ext.edge_far);
    let cat = ndarray::concatenate![ndarray::Axis(1), a1, a2];
    let (f1, merge_c) = ext.merge.forward_cached(cat);
    let graph = feature_knn(&f1, k_feature);
    let (a3, feat_c) = edgeconv_cached(f1.view(), &graph, &ext.edge_feature);
    let (feats, post_c) = ext.post.forward_cached(a3);
    debug_assert!(all_finite(&feats), "extractor produced non-finite features");
    let (global, global_arg) = column_max(&feats);
    StreamTape {
        near: near_c,
        far: far_c,
        merge: merge_c,
        feature: feat_c,
        post: post_c,
        input: input.clone(),
        f1,
        feats,
        global,
        global_arg,
    }
}

/// Backpropagates a gradient on the stream's per-row features (global-pool
/// gradients already scattered in by the caller).
pub(crate) fn stream_backward(ext: &Extractor, tape: &StreamTape, dfeats: Array2<f64>, grad: &mut Extractor) {
    let da3 = ext.post.backward(&tape.post, dfeats, &mut grad.post);
    let df1 = edgeconv_backward(&ext.edge_feature, &tape.feature, tape.f1.view(), &da3, &mut grad.edge_feature);
    let dcat = ext.merge.backward(&tape.merge, df1, &mut grad.merge);
    let half = dcat.ncols() / 2;
    let da1 = dcat.slice(s![.., ..half]).to_owned();
    let da2 = dcat.slice(s![.., half..]).to_owned();
    // Inputs are data; only parameter gradients matter below this point.
    edgeconv_backward(&ext.edge_near, &tape.near, tape.input.view(), &da1, &mut grad.edge_near);
    edgeconv_backward(&ext.edge_far, &tape.far, tape.input.view(), &da2, &mut grad.edge_far);
}

pub(crate) fn rows_of(v: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), 3), |(i, j)| v[i][j])
}

/// Spatial graphs over the real rows of a patch.
#[derive(Debug, Clone)]
pub(crate) struct PatchGraphs {
    pub near: Vec<Vec<usize>>,
    pub far: Vec<Vec<usize>>,
    pub augment: Vec<Vec<usize>>,
}

pub(crate) fn patch_graphs(real_points: &[Vec3], cfg: &ExtractorConfig, k4: usize) -> PatchGraphs {
    let kmax = cfg.k1.max(cfg.k2).max(k4);
    let full = spatial_knn(real_points, kmax);
    let take = |k: usize| full.iter().map(|row| row[..k.min(row.len())].to_vec()).collect();
    PatchGraphs {
        near: take(cfg.k1),
        far: take(cfg.k2),
        augment: take(k4),
    }
}

/// Expands per-real-row features to all patch rows; pads duplicate the center.
pub(crate) fn broadcast_pads(patch: &Patch, real: &Array2<f64>) -> Array2<f64> {
    let r = patch.real_count();
    let mut out = Array2::zeros((patch.len(), real.ncols()));
    out.slice_mut(s![..r, ..]).assign(real);
    let center = real.row(patch.center_row);
    for mut row in out.slice_mut(s![r.., ..]).outer_iter_mut() {
        row.assign(&center);
    }
    out
}

/// Runs both extractor streams on a patch.
///
/// Pad rows share the center's position and raw normal and are never
/// neighbors of real rows, so their features equal the center's; they are
/// computed once and broadcast.
pub fn extract_coarse(patch: &Patch, cfg: &NetConfig, params: &NetworkParams) -> CoarseFeatures {
    let r = patch.real_count();
    let graphs = patch_graphs(&patch.points[..r], &cfg.extractor, cfg.k4);
    let xp = rows_of(&patch.points[..r]);
    let xn = rows_of(&patch.normals[..r]);
    let ps = stream_forward(&params.point_extractor, &xp, &graphs.near, &graphs.far, cfg.extractor.k3);
    let ns = stream_forward(&params.normal_extractor, &xn, &graphs.near, &graphs.far, cfg.extractor.k3);
    CoarseFeatures {
        point_feats: broadcast_pads(patch, &ps.feats),
        normal_feats: broadcast_pads(patch, &ns.feats),
        global_point: ps.global,
        global_normal: ns.global,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn self_neighbor_gives_zero_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&[6, 8, 4], &mut rng);
        let x = random(5, 3, &mut rng);
        let nb: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let out = edgeconv(x.view(), &nb, &mlp);
        let edge = ndarray::concatenate![ndarray::Axis(1), x, Array2::<f64>::zeros((5, 3))];
        let want = mlp.forward(edge.view());
        assert!((out - want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(&[6, 8, 4], &mut rng);
        let mut x = random(4, 3, &mut rng);
        let r0 = x.row(0).to_owned();
        x.row_mut(3).assign(&r0);
        let nb = vec![vec![0, 1], vec![1, 0], vec![2, 1], vec![3, 1]];
        let out = edgeconv(x.view(), &nb, &mlp);
        assert_eq!(out.row(0), out.row(3));
    }

    #[test]
    fn matches_per_edge_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, c) = (16, 4, 3);
        let layers = vec![Linear::init(2 * c, 5, &mut rng), Linear::init(5, 7, &mut rng)];
        let mlp = Mlp { layers: layers.clone() };
        let x = random(m, c, &mut rng);
        let nb: Vec<Vec<usize>> = (0..m).map(|_| (0..k).map(|_| rng.random_range(0..m)).collect()).collect();
        let out = edgeconv(x.view(), &nb, &mlp);

        // Naive oracle: evaluate each edge as a scalar loop.
        let leaky = |v: f64| if v >= 0.0 { v } else { 0.1 * v };
        for j in 0..m {
            let mut best = [f64::NEG_INFINITY; 7];
            for &q in &nb[j] {
                let mut h: Vec<f64> = (0..c).map(|i| x[[j, i]]).chain((0..c).map(|i| x[[q, i]] - x[[j, i]])).collect();
                for l in &layers {
                    h = (0..l.outputs())
                        .map(|o| leaky(l.bias[o] + (0..l.inputs()).map(|i| l.weight[[o, i]] * h[i]).sum::<f64>()))
                        .collect();
                }
                for ch in 0..7 {
                    best[ch] = best[ch].max(h[ch]);
                }
            }
            for ch in 0..7 {
                assert!((out[[j, ch]] - best[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edgeconv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init(&[6, 8, 5], &mut rng);
        let x = random(6, 3, &mut rng);
        let nb: Vec<Vec<usize>> = (0..6).map(|i| vec![i, (i + 1) % 6, (i + 3) % 6]).collect();
        let probe = random(6, 5, &mut rng);
        let (_, cache) = edgeconv_cached(x.view(), &nb, &mlp);
        let mut grad = Mlp::zeros(&[6, 8, 5]);
        let dx = edgeconv_backward(&mlp, &cache, x.view(), &probe, &mut grad);
        let f = |x: &Array2<f64>| (edgeconv(x.view(), &nb, &mlp) * &probe).sum();
        let eps = 1e-6;
        for i in 0..6 {
            for j in 0..3 {
                let mut a = x.clone();
                a[[i, j]] += eps;
                let mut b = x.clone();
                b[[i, j]] -= eps;
                let fd = (f(&a) - f(&b)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "{fd} vs {}", dx[[i, j]]);
            }
        }
        let g = |m: &Mlp| (edgeconv(x.view(), &nb, m) * &probe).sum();
        for (o, i) in [(0, 0), (3, 2), (7, 4), (5, 5)] {
            let mut a = mlp.clone();
            a.layers[0].weight[[o, i]] += eps;
            let mut b = mlp.clone();
            b.layers[0].weight[[o, i]] -= eps;
            let fd = (g(&a) - g(&b)) / (2.0 * eps);
            assert!((fd - grad.layers[0].weight[[o, i]]).abs() < 1e-6);
        }
    }

    #[test]
    fn knn_rows_shrinks_and_orders() {
        let pts = vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let g = spatial_knn(&pts, 8);
        assert_eq!(g[0], vec![0, 2, 1]);
        assert_eq!(g[1], vec![1, 2, 0]);
        // Ties on row 2: rows 0 and 1 are both at distance 1.
        assert_eq!(g[2], vec![2, 0, 1]);
    }
}
