//! Dense / convolution / normalization building blocks with explicit
//! backward passes, plus the Adam optimizer.
//!
//! Everything is f64. Layers own their weights; gradients accumulate into a
//! structurally identical instance of the same layer type, so a parameter
//! tree and its gradient tree can be flattened in the same order.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Visitation over every parameter tensor of a layer tree, in a stable order.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, v| out.extend(v.iter().copied()));
        out
    }

    fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, mut v| {
            for x in v.iter_mut() {
                *x = flat[offset];
                offset += 1;
            }
        });
        assert_eq!(offset, flat.len(), "flat parameter buffer length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, mut v| v.fill(0.0));
    }

    /// Names of tensors whose every entry is zero (used by gradient-flow checks).
    fn all_zero_tensors(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, v| {
            if v.iter().all(|x| *x == 0.0) {
                out.push(name.to_string());
            }
        });
        out
    }
}

/// Per-token affine map `y = x W + b` (equivalent to a 1x1 convolution over
/// a token grid).
#[derive(Debug, Clone)]
pub struct Linear {
    /// (d_in, d_out)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { w: Array2::zeros((d_in, d_out)), b: Array1::zeros(d_out) }
    }

    /// Xavier-normal weights, zero bias.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            w: Array2::from_shape_fn((d_in, d_out), |_| normal.sample(rng)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates into `grad`, returns d_input.
    pub fn backward(&self, x: &Array2<f64>, d_out: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(d_out);
        grad.b += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.w.t())
    }
}

impl ParamSet for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("w", self.w.view().into_dyn());
        f("b", self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("w", self.w.view_mut().into_dyn());
        f("b", self.b.view_mut().into_dyn());
    }
}

/// Strided valid-padding 2-D convolution over (channels, height, width).
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (c_out, c_in, k, k)
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
}

/// im2col buffer kept from the forward pass for the weight gradient.
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    out_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize) -> Self {
        Self { w: Array4::zeros((c_out, c_in, k, k)), b: Array1::zeros(c_out), stride }
    }

    pub fn init<R: Rng>(c_out: usize, c_in: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            w: Array4::from_shape_fn((c_out, c_in, k, k), |_| normal.sample(rng)),
            b: Array1::zeros(c_out),
            stride,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        ((h - k) / self.stride + 1, (w - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (c_in, h, w) = x.dim();
        let (c_out, c_in_w, k, _) = self.w.dim();
        assert_eq!(c_in, c_in_w, "conv input channels mismatch");
        let (oh, ow) = self.output_hw(h, w);

        let mut cols = Array2::zeros((c_in * k * k, oh * ow));
        for oy in 0..oh {
            for ox in 0..ow {
                let col = oy * ow + ox;
                let (y0, x0) = (oy * self.stride, ox * self.stride);
                let mut row = 0;
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            cols[[row, col]] = x[[c, y0 + ky, x0 + kx]];
                            row += 1;
                        }
                    }
                }
            }
        }

        let wmat = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("conv weight is contiguous");
        let mut out_mat = wmat.dot(&cols);
        for (mut row, bias) in out_mat.axis_iter_mut(Axis(0)).zip(self.b.iter()) {
            row += *bias;
        }
        let out = out_mat
            .into_shape_with_order((c_out, oh, ow))
            .expect("conv output reshape");
        let cache = Conv2dCache { cols, in_shape: (c_in, h, w), out_shape: (c_out, oh, ow) };
        (out, cache)
    }

    /// Accumulates into `grad`, returns d_input.
    pub fn backward(
        &self,
        cache: &Conv2dCache,
        d_out: &Array3<f64>,
        grad: &mut Conv2d,
    ) -> Array3<f64> {
        let (c_in, h, w) = cache.in_shape;
        let (c_out, oh, ow) = cache.out_shape;
        let k = self.w.dim().2;
        assert_eq!(d_out.dim(), cache.out_shape);

        let d_mat = d_out
            .view()
            .into_shape_with_order((c_out, oh * ow))
            .expect("conv upstream gradient is contiguous");
        let dw = d_mat.dot(&cache.cols.t());
        grad.w += &dw
            .into_shape_with_order((c_out, c_in, k, k))
            .expect("conv weight gradient reshape");
        grad.b += &d_mat.sum_axis(Axis(1));

        let wmat = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("conv weight is contiguous");
        let d_cols = wmat.t().dot(&d_mat);

        let mut d_in = Array3::zeros((c_in, h, w));
        for oy in 0..oh {
            for ox in 0..ow {
                let col = oy * ow + ox;
                let (y0, x0) = (oy * self.stride, ox * self.stride);
                let mut row = 0;
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            d_in[[c, y0 + ky, x0 + kx]] += d_cols[[row, col]];
                            row += 1;
                        }
                    }
                }
            }
        }
        d_in
    }
}

impl ParamSet for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("w", self.w.view().into_dyn());
        f("b", self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("w", self.w.view_mut().into_dyn());
        f("b", self.b.view_mut().into_dyn());
    }
}

/// Per-row layer normalization over the feature dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gamma: Array1::ones(d), beta: Array1::zeros(d), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[[i, j]] = (x[[i, j]] - mean) * istd;
            }
        }
        let mut y = xhat.clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(&self.gamma.view(), |v, g| *v *= g);
            row += &self.beta;
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        d_out: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let (n, d) = d_out.dim();
        for i in 0..n {
            for j in 0..d {
                grad.gamma[j] += d_out[[i, j]] * cache.xhat[[i, j]];
                grad.beta[j] += d_out[[i, j]];
            }
        }
        let mut d_in = Array2::zeros((n, d));
        for i in 0..n {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let dxhat = d_out[[i, j]] * self.gamma[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.xhat[[i, j]];
            }
            let istd = cache.inv_std[i];
            for j in 0..d {
                let dxhat = d_out[[i, j]] * self.gamma[j];
                d_in[[i, j]] = istd / d as f64
                    * (d as f64 * dxhat - sum_dxhat - cache.xhat[[i, j]] * sum_dxhat_xhat);
            }
        }
        d_in
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("gamma", self.gamma.view().into_dyn());
        f("beta", self.beta.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("gamma", self.gamma.view_mut().into_dyn());
        f("beta", self.beta.view_mut().into_dyn());
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth gated activation `x * sigmoid(x)`, elementwise over any array.
pub fn silu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// d silu / dx evaluated at the forward input, multiplied by `d_out`.
pub fn silu3_backward(x: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let mut d_in = d_out.clone();
    d_in.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g *= s + v * s * (1.0 - s);
    });
    d_in
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Given softmax output `a` and upstream gradient `d_a`, the gradient w.r.t.
/// the pre-softmax scores, row by row.
pub fn softmax_rows_backward(a: &Array2<f64>, d_a: &Array2<f64>) -> Array2<f64> {
    let (n, m) = a.dim();
    let mut d_s = Array2::zeros((n, m));
    for i in 0..n {
        let dot: f64 = (0..m).map(|j| d_a[[i, j]] * a[[i, j]]).sum();
        for j in 0..m {
            d_s[[i, j]] = a[[i, j]] * (d_a[[i, j]] - dot);
        }
    }
    d_s
}

/// Mean cross-entropy over a batch of logits rows; returns the loss and
/// d_logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (n, _) = logits.dim();
    assert_eq!(n, labels.len());
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut d_logits = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        loss -= probs[[i, label]].max(1e-300).ln();
        d_logits[[i, label]] -= 1.0;
    }
    (loss / n as f64, d_logits / n as f64)
}

/// Adaptive moment estimation over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F: FnMut(&[f64]) -> f64>(
        mut loss: F,
        x0: &[f64],
        analytic: &[f64],
        tol: f64,
    ) {
        let h = 1e-5;
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let lp = loss(&x);
            x[i] = orig - h;
            let lm = loss(&x);
            x[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel <= tol,
                "gradient mismatch at {i}: analytic {} vs numeric {} (rel {rel:.2e})",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = Linear::init(5, 3, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let weights = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));

        let mut grad = Linear::zeros(5, 3);
        let y = layer.forward(&x);
        let d_out = weights.clone();
        let d_x = layer.backward(&x, &d_out, &mut grad);

        // Check d_x against perturbing the input.
        let x_flat = x.flatten().to_vec();
        let analytic: Vec<f64> = d_x.flatten().to_vec();
        fd_check(
            |xs| {
                let xa = Array2::from_shape_vec((4, 5), xs.to_vec()).unwrap();
                (layer.forward(&xa) * &weights).sum()
            },
            &x_flat,
            &analytic,
            1e-6,
        );

        // Check dW against perturbing the parameters.
        let p_flat = layer.flatten();
        let g_flat = grad.flatten();
        fd_check(
            |ps| {
                let mut l = layer.clone();
                l.assign_from_flat(ps);
                (l.forward(&x) * &weights).sum()
            },
            &p_flat,
            &g_flat,
            1e-6,
        );
    }

    #[test]
    fn conv_output_shape_28_to_2_over_three_stages() {
        let c1 = Conv2d::zeros(4, 3, 3, 2);
        let (h, w) = c1.output_hw(28, 28);
        assert_eq!((h, w), (13, 13));
        let (h, w) = c1.output_hw(13, 13);
        assert_eq!((h, w), (6, 6));
        let (h, w) = c1.output_hw(6, 6);
        assert_eq!((h, w), (2, 2));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = Conv2d::init(2, 3, 3, 2, &mut rng);
        let x = Array3::from_shape_fn((3, 7, 7), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = conv.forward(&x);
        let weights = Array3::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));

        let mut grad = Conv2d::zeros(2, 3, 3, 2);
        let d_x = conv.backward(&cache, &weights, &mut grad);

        let analytic_x: Vec<f64> = d_x.flatten().to_vec();
        fd_check(
            |xs| {
                let xa = Array3::from_shape_vec((3, 7, 7), xs.to_vec()).unwrap();
                (conv.forward(&xa).0 * &weights).sum()
            },
            &x.flatten().to_vec(),
            &analytic_x,
            1e-6,
        );

        fd_check(
            |ps| {
                let mut c = conv.clone();
                c.assign_from_flat(ps);
                (c.forward(&x).0 * &weights).sum()
            },
            &conv.flatten(),
            &grad.flatten(),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ln = LayerNorm::new(6);
        ln.gamma = Array1::from_shape_fn(6, |_| rng.gen_range(0.5..1.5));
        ln.beta = Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5));
        let x = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let weights = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));

        let (_, cache) = ln.forward(&x);
        let mut grad = LayerNorm::new(6);
        grad.zero();
        let d_x = ln.backward(&cache, &weights, &mut grad);

        fd_check(
            |xs| {
                let xa = Array2::from_shape_vec((3, 6), xs.to_vec()).unwrap();
                (ln.forward(&xa).0 * &weights).sum()
            },
            &x.flatten().to_vec(),
            &d_x.flatten().to_vec(),
            1e-5,
        );

        fd_check(
            |ps| {
                let mut l = ln.clone();
                l.assign_from_flat(ps);
                (l.forward(&x).0 * &weights).sum()
            },
            &ln.flatten(),
            &grad.flatten(),
            1e-5,
        );
    }

    #[test]
    fn layer_norm_of_zero_rows_is_zero() {
        let ln = LayerNorm::new(4);
        let (y, _) = ln.forward(&Array2::zeros((2, 4)));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let a = softmax_rows(&s);
        for row in a.axis_iter(Axis(0)) {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let labels = vec![0, 2, 1, 1];
        let (_, d_logits) = softmax_cross_entropy(&logits, &labels);
        fd_check(
            |ls| {
                let la = Array2::from_shape_vec((4, 3), ls.to_vec()).unwrap();
                softmax_cross_entropy(&la, &labels).0
            },
            &logits.flatten().to_vec(),
            &d_logits.flatten().to_vec(),
            1e-6,
        );
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2), "params did not converge: {params:?}");
    }
}
