use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Negative-side slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_all(pre: &Array2<f64>) -> Array2<f64> {
    pre.mapv(leaky)
}

/// Scales `grad` in place by the activation derivative at `pre`.
pub fn leaky_backward(pre: &Array2<f64>, grad: &mut Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
}

/// Dense layer `y = x Wᵀ + b` applied row-wise; `weight` is out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Fan-in scaled uniform weights sized for leaky activations, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * inputs as f64)).sqrt();
        Linear {
            weight: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight)
    }

    /// Parameter gradients only, for layers whose inputs are data.
    pub fn accumulate(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

/// Stack of dense layers, each followed by the leaky activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = leaky_all(&layer.forward(h.view()));
        }
        h
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        forward_layers_cached(&self.layers, x)
    }

    pub fn backward(&self, cache: &MlpCache, dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        backward_layers(&self.layers, cache, dy, &mut grad.layers)
    }
}

pub(crate) fn forward_layers_cached(layers: &[Linear], x: Array2<f64>) -> (Array2<f64>, MlpCache) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut h = x;
    for layer in layers {
        let z = layer.forward(h.view());
        let next = leaky_all(&z);
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    (h, MlpCache { inputs, pre })
}

pub(crate) fn backward_layers(layers: &[Linear], cache: &MlpCache, dy: Array2<f64>, grads: &mut [Linear]) -> Array2<f64> {
    let mut d = dy;
    for (i, layer) in layers.iter().enumerate().rev() {
        leaky_backward(&cache.pre[i], &mut d);
        d = layer.backward(cache.inputs[i].view(), d.view(), &mut grads[i]);
    }
    d
}

/// Column-wise maximum with the lowest row index attaining it.
pub fn column_max(x: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let mut best = x.row(0).to_owned();
    let mut arg = vec![0usize; x.ncols()];
    for (r, row) in x.outer_iter().enumerate().skip(1) {
        for (c, &v) in row.iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    (best, arg)
}

/// Scatters a pooled gradient back onto the argmax rows.
pub fn column_max_backward(arg: &[usize], dpooled: &Array1<f64>, rows: usize) -> Array2<f64> {
    let mut d = Array2::zeros((rows, arg.len()));
    for (c, &r) in arg.iter().enumerate() {
        d[[r, c]] += dpooled[c];
    }
    d
}

pub(crate) fn all_finite(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&[4, 5, 3], &mut rng);
        let x = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()) * &probe).sum();

        let (_, cache) = mlp.forward_cached(x.clone());
        let mut grad = Mlp::zeros(&[4, 5, 3]);
        let dx = mlp.backward(&cache, probe.clone(), &mut grad);

        let eps = 1e-6;
        for (i, j) in [(0, 0), (2, 3), (4, 1)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * eps);
            assert!((fd - dx[[i, j]]).abs() < 1e-7);
        }
        for (i, j) in [(0, 0), (4, 3), (1, 2)] {
            let mut mp = mlp.clone();
            mp.layers[0].weight[[i, j]] += eps;
            let mut mm = mlp.clone();
            mm.layers[0].weight[[i, j]] -= eps;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * eps);
            assert!((fd - grad.layers[0].weight[[i, j]]).abs() < 1e-7);
        }
    }

    #[test]
    fn column_max_prefers_lowest_row() {
        let x = array![[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]];
        let (m, arg) = column_max(&x);
        assert_eq!(m, array![3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
    }
}
