//! Feature refinement: score-weighted neighborhood augmentation followed by
//! cross-stream fusion with the global patch features.

use ndarray::{s, Array1, Array2, Axis};

use super::layers::{leaky_all, leaky_backward, Linear};
use super::params::FEATURE_WIDTH;

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedFeatures {
    /// `[f2_p | f2_n | global_p]` per selected row.
    pub point: Array2<f64>,
    /// `[f2_n | f2_p | global_n]` per selected row.
    pub normal: Array2<f64>,
    pub augmented_point: Array2<f64>,
    pub augmented_normal: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AugmentTape {
    mixed: Array2<f64>,
    pre: Array2<f64>,
}

fn mix(feats: &Array2<f64>, rows: &[usize], neighborhoods: &[Vec<usize>], weights: &[f64]) -> Array2<f64> {
    let mut mixed = Array2::zeros((rows.len(), feats.ncols()));
    for (l, &row) in rows.iter().enumerate() {
        let nb = &neighborhoods[row];
        let mut out = mixed.row_mut(l);
        out.assign(&feats.row(row));
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for &q in nb {
            out.scaled_add(weights[q] * inv, &feats.row(q));
        }
    }
    mixed
}

/// `f2_l = MLP(f_l + (1/k) Σ_q w_q f_q)` for each row `l` in `rows`, where the
/// sum runs over `neighborhoods[l]` and `k` is that neighborhood's size.
/// `weights` are already mapped into `(0, 1)`.
pub fn augment(feats: &Array2<f64>, rows: &[usize], neighborhoods: &[Vec<usize>], weights: &[f64], layer: &Linear) -> Array2<f64> {
    augment_cached(feats, rows, neighborhoods, weights, layer).0
}

pub(crate) fn augment_cached(
    feats: &Array2<f64>,
    rows: &[usize],
    neighborhoods: &[Vec<usize>],
    weights: &[f64],
    layer: &Linear,
) -> (Array2<f64>, AugmentTape) {
    let mixed = mix(feats, rows, neighborhoods, weights);
    let pre = layer.forward(mixed.view());
    (leaky_all(&pre), AugmentTape { mixed, pre })
}

/// Returns gradients on all feature rows and on every row's weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn augment_backward(
    layer: &Linear,
    tape: &AugmentTape,
    feats: &Array2<f64>,
    rows: &[usize],
    neighborhoods: &[Vec<usize>],
    weights: &[f64],
    dout: Array2<f64>,
    grad: &mut Linear,
) -> (Array2<f64>, Vec<f64>) {
    let mut d = dout;
    leaky_backward(&tape.pre, &mut d);
    let dmixed = layer.backward(tape.mixed.view(), d.view(), grad);
    let mut dfeats = Array2::zeros(feats.raw_dim());
    let mut dweights = vec![0.0; weights.len()];
    for (l, &row) in rows.iter().enumerate() {
        let g = dmixed.row(l);
        let mut dst = dfeats.row_mut(row);
        dst += &g;
        let nb = &neighborhoods[row];
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for &q in nb {
            dfeats.row_mut(q).scaled_add(weights[q] * inv, &g);
            dweights[q] += inv * g.dot(&feats.row(q));
        }
    }
    (dfeats, dweights)
}

/// Concatenates own-stream, cross-stream and global features per row.
pub fn fuse(
    augmented_point: &Array2<f64>,
    augmented_normal: &Array2<f64>,
    global_point: &Array1<f64>,
    global_normal: &Array1<f64>,
) -> RefinedFeatures {
    let rows = augmented_point.nrows();
    let gp = global_point.broadcast((rows, global_point.len())).expect("broadcast");
    let gn = global_normal.broadcast((rows, global_normal.len())).expect("broadcast");
    RefinedFeatures {
        point: ndarray::concatenate![Axis(1), augmented_point.view(), augmented_normal.view(), gp],
        normal: ndarray::concatenate![Axis(1), augmented_normal.view(), augmented_point.view(), gn],
        augmented_point: augmented_point.clone(),
        augmented_normal: augmented_normal.clone(),
    }
}

/// Splits gradients on the two fused blocks back onto their sources.
pub(crate) fn fuse_backward(
    dpoint: &Array2<f64>,
    dnormal: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>) {
    let w = FEATURE_WIDTH;
    let df2p = &dpoint.slice(s![.., ..w]) + &dnormal.slice(s![.., w..2 * w]);
    let df2n = &dnormal.slice(s![.., ..w]) + &dpoint.slice(s![.., w..2 * w]);
    let dgp = dpoint.slice(s![.., 2 * w..]).sum_axis(Axis(0));
    let dgn = dnormal.slice(s![.., 2 * w..]).sum_axis(Axis(0));
    (df2p, df2n, dgp, dgn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_reduce_to_plain_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::init(FEATURE_WIDTH, FEATURE_WIDTH, &mut rng);
        let f = random(6, FEATURE_WIDTH, &mut rng);
        let nb: Vec<Vec<usize>> = (0..6).map(|i| vec![i, (i + 1) % 6]).collect();
        let out = augment(&f, &[0, 2, 5], &nb, &[0.0; 6], &layer);
        let rows = ndarray::stack![Axis(0), f.row(0), f.row(2), f.row(5)];
        assert_eq!(out, leaky_all(&layer.forward(rows.view())));
    }

    #[test]
    fn single_self_neighbor_doubles_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Linear::init(FEATURE_WIDTH, FEATURE_WIDTH, &mut rng);
        let f = random(3, FEATURE_WIDTH, &mut rng);
        let nb: Vec<Vec<usize>> = (0..3).map(|i| vec![i]).collect();
        let out = augment(&f, &[0, 1, 2], &nb, &[1.0; 3], &layer);
        assert_eq!(out, leaky_all(&layer.forward((&f * 2.0).view())));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let width = 5;
        let layer = Linear::init(width, 4, &mut rng);
        let f = random(12, width, &mut rng);
        let w: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let nb: Vec<Vec<usize>> = (0..12).map(|_| (0..3).map(|_| rng.random_range(0..12)).collect()).collect();
        let rows = [3usize, 7, 11, 0];
        let out = augment(&f, &rows, &nb, &w, &layer);
        for (l, &row) in rows.iter().enumerate() {
            let mut x = vec![0.0; width];
            for c in 0..width {
                let agg: f64 = nb[row].iter().map(|&q| w[q] * f[[q, c]]).sum::<f64>() / 3.0;
                x[c] = f[[row, c]] + agg;
            }
            for o in 0..4 {
                let z = layer.bias[o] + (0..width).map(|c| layer.weight[[o, c]] * x[c]).sum::<f64>();
                let y = if z >= 0.0 { z } else { 0.1 * z };
                assert!((out[[l, o]] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augment_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let width = 6;
        let layer = Linear::init(width, 5, &mut rng);
        let f = random(8, width, &mut rng);
        let w: Vec<f64> = (0..8).map(|_| rng.random()).collect();
        let nb: Vec<Vec<usize>> = (0..8).map(|i| vec![i, (i + 2) % 8, (i + 5) % 8]).collect();
        let rows = [1usize, 4, 6];
        let probe = random(3, 5, &mut rng);
        let (_, tape) = augment_cached(&f, &rows, &nb, &w, &layer);
        let mut g = Linear::zeros(width, 5);
        let (_, dw) = augment_backward(&layer, &tape, &f, &rows, &nb, &w, probe.clone(), &mut g);
        let eps = 1e-6;
        for q in 0..8 {
            let mut a = w.clone();
            a[q] += eps;
            let mut b = w.clone();
            b[q] -= eps;
            let fa = (augment(&f, &rows, &nb, &a, &layer) * &probe).sum();
            let fb = (augment(&f, &rows, &nb, &b, &layer) * &probe).sum();
            assert!(((fa - fb) / (2.0 * eps) - dw[q]).abs() < 1e-7);
        }
    }

    #[test]
    fn fuse_slice_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = FEATURE_WIDTH;
        let f2p = random(4, w, &mut rng);
        let f2n = Array2::zeros((4, w));
        let gp = Array1::from_shape_fn(w, |_| rng.random::<f64>());
        let gn = Array1::from_shape_fn(w, |_| rng.random::<f64>());
        let r = fuse(&f2p, &f2n, &gp, &gn);
        assert_eq!(r.point.ncols(), 384);
        assert_eq!(r.normal.ncols(), 384);
        assert_eq!(r.point.slice(s![.., ..w]), f2p);
        assert!(r.point.slice(s![.., w..2 * w]).iter().all(|&v| v == 0.0));
        assert_eq!(r.normal.slice(s![.., w..2 * w]), f2p);
        for row in r.point.outer_iter() {
            assert_eq!(row.slice(s![2 * w..]), gp);
        }
    }
}
