//! Minimal feed-forward network with hand-written backprop.
//!
//! Tanh hidden layers, linear scalar output. Batches are column-major: one
//! column per sample. This is deliberately tiny — the fitting problems in
//! this crate are 2-d inputs with a scalar output, and owning the backward
//! pass keeps gradients exactly reproducible and easy to finite-difference.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths `[input, hidden..., 1]`.
    pub dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Adam optimizer state over the flat parameter order of one [`Mlp`]
/// (weights then bias, per layer).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.n_params();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Per-layer activations kept from a forward pass.
pub struct ForwardCache {
    /// activations[0] is the input batch; activations[i] the output of layer i.
    activations: Vec<DMatrix<f64>>,
}

pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// Uniform Glorot initialization from a dedicated stream.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-s..s)));
            biases.push(DVector::zeros(fan_out));
        }
        Mlp { dims, weights, biases }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn output_bias_mut(&mut self) -> &mut f64 {
        let last = self.biases.len() - 1;
        &mut self.biases[last][0]
    }

    /// Zeroes the output layer so the net starts as the constant map given by
    /// its output bias; removes the init ripple that otherwise dominates
    /// early training.
    pub fn zero_output_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].fill(0.0);
        self.biases[last].fill(0.0);
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat parameter view, weights then bias per layer. Used by the
    /// finite-difference tests and the artifact format.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[i];
                i += 1;
            }
            for v in b.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
    }

    /// Forward pass over a batch (one column per sample); returns the scalar
    /// outputs and the cache needed for backprop.
    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> (Vec<f64>, ForwardCache) {
        let n_layers = self.n_layers();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(xs.clone());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * activations.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if i + 1 < n_layers {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        let out = activations.last().unwrap().row(0).iter().copied().collect();
        (out, ForwardCache { activations })
    }

    /// Scalar forward pass.
    pub fn forward_one(&self, x: &DVector<f64>) -> f64 {
        let mut a = x.clone();
        let n_layers = self.n_layers();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a + b;
            if i + 1 < n_layers {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        a[0]
    }

    /// Backprop given dL/d(output) per sample. Gradients are averaged nowhere:
    /// the caller owns any 1/m factor inside `out_grad`.
    pub fn backward_batch(&self, cache: &ForwardCache, out_grad: &[f64]) -> Gradients {
        let n_layers = self.n_layers();
        let m = out_grad.len();
        let mut delta = DMatrix::from_fn(1, m, |_, j| out_grad[j]);
        let mut w_grads: Vec<DMatrix<f64>> = self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let mut b_grads: Vec<DVector<f64>> = self.biases.iter().map(|b| DVector::zeros(b.len())).collect();
        for layer in (0..n_layers).rev() {
            let input = &cache.activations[layer];
            w_grads[layer] = &delta * input.transpose();
            for (i, row) in delta.row_iter().enumerate() {
                b_grads[layer][i] = row.sum();
            }
            if layer > 0 {
                let mut back = self.weights[layer].transpose() * &delta;
                // tanh'(z) = 1 - tanh(z)^2, and activations already hold tanh(z).
                let act = &cache.activations[layer];
                back.zip_apply(act, |g, a| *g *= 1.0 - a * a);
                delta = back;
            }
        }
        Gradients { weights: w_grads, biases: b_grads }
    }

    pub fn gradient_step(&mut self, grads: &Gradients, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            *w -= g * lr;
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            *b -= g * lr;
        }
    }

    pub fn adam_step(&mut self, grads: &Gradients, opt: &mut Adam) {
        opt.step += 1;
        let t = opt.step as i32;
        let bias1 = 1.0 - opt.beta1.powi(t);
        let bias2 = 1.0 - opt.beta2.powi(t);
        let mut idx = 0;
        let mut update = |p: &mut f64, g: f64, opt_m: &mut [f64], opt_v: &mut [f64], lr: f64, b1: f64, b2: f64, eps: f64| {
            opt_m[idx] = b1 * opt_m[idx] + (1.0 - b1) * g;
            opt_v[idx] = b2 * opt_v[idx] + (1.0 - b2) * g * g;
            let mhat = opt_m[idx] / bias1;
            let vhat = opt_v[idx] / bias2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
            idx += 1;
        };
        for (layer, g) in grads.weights.iter().enumerate() {
            for (p, gv) in self.weights[layer].iter_mut().zip(g.iter()) {
                update(p, *gv, &mut opt.m, &mut opt.v, opt.lr, opt.beta1, opt.beta2, opt.eps);
            }
            for (p, gv) in self.biases[layer].iter_mut().zip(grads.biases[layer].iter()) {
                update(p, *gv, &mut opt.m, &mut opt.v, opt.lr, opt.beta1, opt.beta2, opt.eps);
            }
        }
    }

    /// True when any parameter has gone non-finite.
    pub fn has_nonfinite(&self) -> bool {
        self.weights.iter().any(|w| w.iter().any(|v| !v.is_finite()))
            || self.biases.iter().any(|b| b.iter().any(|v| !v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn batch_and_single_forward_agree() {
        let net = Mlp::new(2, &[8, 8], 3);
        let xs = DMatrix::from_fn(2, 5, |i, j| (i + 2 * j) as f64 * 0.3 - 1.0);
        let (out, _) = net.forward_batch(&xs);
        for j in 0..5 {
            let x = DVector::from_column_slice(xs.column(j).as_slice());
            assert_relative_eq!(out[j], net.forward_one(&x), max_relative = 1e-12);
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        // dL/dout for L = (1/m) sum (out - y)^2 is 2 (out - y) / m; ten random
        // parameter coordinates must match central differences to 1e-4.
        let mut net = Mlp::new(2, &[6], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = 12;
        let xs = DMatrix::from_fn(2, m, |_, _| rng.gen_range(-2.0..2.0));
        let ys: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |net: &Mlp| -> f64 {
            let (out, _) = net.forward_batch(&xs);
            out.iter().zip(&ys).map(|(o, y)| (o - y) * (o - y)).sum::<f64>() / m as f64
        };

        let (out, cache) = net.forward_batch(&xs);
        let grad_out: Vec<f64> = out.iter().zip(&ys).map(|(o, y)| 2.0 * (o - y) / m as f64).collect();
        let grads = net.backward_batch(&cache, &grad_out);
        let mut flat_grad: Vec<f64> = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            flat_grad.extend(w.iter());
            flat_grad.extend(b.iter());
        }

        let mut flat = net.params_flat();
        let n = flat.len();
        for probe in 0..10 {
            let idx = (probe * 7919) % n;
            let h = 1e-6;
            let orig = flat[idx];
            flat[idx] = orig + h;
            net.set_params_flat(&flat);
            let up = loss(&net);
            flat[idx] = orig - h;
            net.set_params_flat(&flat);
            let down = loss(&net);
            flat[idx] = orig;
            net.set_params_flat(&flat);
            let fd = (up - down) / (2.0 * h);
            let an = flat_grad[idx];
            if (an - fd).abs() < 1e-7 {
                continue; // both vanish: relative error is meaningless there
            }
            let denom = an.abs().max(fd.abs());
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "param {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Mlp::new(2, &[16], 5);
        let b = Mlp::new(2, &[16], 5);
        assert_eq!(a.params_flat(), b.params_flat());
        let c = Mlp::new(2, &[16], 6);
        assert_ne!(a.params_flat(), c.params_flat());
    }
}
