//! Coordinate and normal regressors over max-pooled refined features.

use ndarray::{Array1, Array2};

use super::layers::{column_max, column_max_backward, leaky_all, leaky_backward, MlpCache};
use super::params::{row_vector, DisplacementHead, NormalHead};
use crate::geometry::Vec3;

/// Below this pre-normalization length the normal head falls back to the
/// raw center normal.
pub const NORMAL_EPS: f64 = 1e-12;

/// Maps `v` into the closed unit ball: direction kept, length `tanh(|v|)`.
pub fn squash(v: &Vec3) -> Vec3 {
    let rho = v.norm();
    if rho < 1e-4 {
        // tanh(ρ)/ρ = 1 - ρ²/3 + O(ρ⁴)
        v * (1.0 - rho * rho / 3.0)
    } else {
        v * (rho.tanh() / rho)
    }
}

/// Vector-Jacobian product of [`squash`].
pub fn squash_backward(v: &Vec3, dout: &Vec3) -> Vec3 {
    let rho = v.norm();
    let (scale, radial) = if rho < 1e-4 {
        (1.0 - rho * rho / 3.0, -2.0 / 3.0 + 8.0 * rho * rho / 15.0)
    } else {
        let t = rho.tanh();
        (t / rho, ((1.0 - t * t) * rho - t) / (rho * rho * rho))
    };
    dout * scale + v * (radial * v.dot(dout))
}

fn to_vec3(a: &Array2<f64>) -> Vec3 {
    Vec3::new(a[[0, 0]], a[[0, 1]], a[[0, 2]])
}

fn from_vec3(v: &Vec3) -> Array2<f64> {
    Array2::from_shape_vec((1, 3), vec![v.x, v.y, v.z]).expect("1x3")
}

#[derive(Debug, Clone)]
pub(crate) struct DisplacementTape {
    rows: usize,
    pool_arg: Vec<usize>,
    hidden: MlpCache,
    hidden_out: Array2<f64>,
    raw: Vec3,
}

pub(crate) fn displacement_forward(f3: &Array2<f64>, head: &DisplacementHead) -> (Vec3, DisplacementTape) {
    let (pooled, pool_arg) = column_max(f3);
    let (hidden_out, hidden) = head.hidden.forward_cached(row_vector(&pooled));
    let raw = to_vec3(&head.out.forward(hidden_out.view()));
    let d = squash(&raw);
    (
        d,
        DisplacementTape {
            rows: f3.nrows(),
            pool_arg,
            hidden,
            hidden_out,
            raw,
        },
    )
}

pub(crate) fn displacement_backward(
    head: &DisplacementHead,
    tape: &DisplacementTape,
    dd: &Vec3,
    grad: &mut DisplacementHead,
) -> Array2<f64> {
    let dv = from_vec3(&squash_backward(&tape.raw, dd));
    let dh = head.out.backward(tape.hidden_out.view(), dv.view(), &mut grad.out);
    let dpool = head.hidden.backward(&tape.hidden, dh, &mut grad.hidden);
    column_max_backward(&tape.pool_arg, &dpool.row(0).to_owned(), tape.rows)
}

/// Local-frame displacement of the center, inside the unit ball.
pub fn regress_displacement(f3_point: &Array2<f64>, head: &DisplacementHead) -> Vec3 {
    displacement_forward(f3_point, head).0
}

#[derive(Debug, Clone)]
pub(crate) struct NormalTape {
    rows: usize,
    pool_arg: Vec<usize>,
    pooled: Array2<f64>,
    input_pre: Array2<f64>,
    /// Per block: (block input, first-layer pre-activation, activation).
    blocks: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    last: Array2<f64>,
    raw: Vec3,
    pub fallback: bool,
}

pub(crate) fn normal_forward(f3: &Array2<f64>, head: &NormalHead, fallback: &Vec3) -> (Vec3, NormalTape) {
    let (pooled, pool_arg) = column_max(f3);
    let pooled = row_vector(&pooled);
    let input_pre = head.input.forward(pooled.view());
    let mut h = leaky_all(&input_pre);
    let mut blocks = Vec::with_capacity(head.blocks.len());
    for b in &head.blocks {
        let pre = b.first.forward(h.view());
        let act = leaky_all(&pre);
        let next = &h + &b.second.forward(act.view());
        blocks.push((h, pre, act));
        h = next;
    }
    let raw = to_vec3(&head.out.forward(h.view()));
    let len = raw.norm();
    let use_fallback = !(len >= NORMAL_EPS);
    let n = if use_fallback { *fallback } else { raw / len };
    (
        n,
        NormalTape {
            rows: f3.nrows(),
            pool_arg,
            pooled,
            input_pre,
            blocks,
            last: h,
            raw,
            fallback: use_fallback,
        },
    )
}

pub(crate) fn normal_backward(head: &NormalHead, tape: &NormalTape, dn: &Vec3, grad: &mut NormalHead) -> Array2<f64> {
    if tape.fallback {
        return Array2::zeros((tape.rows, head.input.inputs()));
    }
    let len = tape.raw.norm();
    let n = tape.raw / len;
    let du = (dn - n * n.dot(dn)) / len;
    let mut dh = head.out.backward(tape.last.view(), from_vec3(&du).view(), &mut grad.out);
    for (b, (g, (input, pre, act))) in head.blocks.iter().zip(grad.blocks.iter_mut().zip(&tape.blocks)).rev() {
        let mut dact = b.second.backward(act.view(), dh.view(), &mut g.second);
        leaky_backward(pre, &mut dact);
        let dinner = b.first.backward(input.view(), dact.view(), &mut g.first);
        dh = dh + dinner;
    }
    leaky_backward(&tape.input_pre, &mut dh);
    let dpool = head.input.backward(tape.pooled.view(), dh.view(), &mut grad.input);
    column_max_backward(&tape.pool_arg, &dpool.row(0).to_owned(), tape.rows)
}

/// Unit filtered normal; the flag reports the fallback to `fallback`.
pub fn regress_normal(f3_normal: &Array2<f64>, head: &NormalHead, fallback: &Vec3) -> (Vec3, bool) {
    let (n, tape) = normal_forward(f3_normal, head, fallback);
    (n, tape.fallback)
}

/// One residual block applied to a single vector, for inspection.
pub fn residual_block(block: &super::params::ResidualBlock, h: &Array1<f64>) -> Array1<f64> {
    let x = row_vector(h);
    let inner = block.second.forward(leaky_all(&block.first.forward(x.view())).view());
    (&x + &inner).row(0).to_owned()
}
