//! Dense feed-forward building blocks with hand-written backpropagation.
//!
//! The latent denoiser needs nothing heavier than a small multilayer
//! perceptron, so this module implements exactly that: linear layers with
//! SiLU activations between them, reverse-mode gradients, and an Adam
//! optimizer, all on `f64` slices. Parameters live in one flat vector so the
//! optimizer and the checkpoint writer can treat a network as a single
//! coefficient list. Gradients are validated against central finite
//! differences in the tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    // Split by sign so neither branch exponentiates a large positive value.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fully connected network: linear layers with SiLU in between and a linear
/// output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward`].
pub struct Trace {
    /// Inputs to each layer; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation outputs of each layer; the last is the network output.
    pres: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pres.last().expect("trace of a layerless network")
    }
}

impl Mlp {
    /// Creates a network with the given layer widths. Weights start at
    /// Kaiming-scaled normal values drawn from `rng`, biases at zero.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::arg("dims", "need at least an input and an output width"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::arg("dims", "layer widths must be >= 1"));
        }
        let mut params = Vec::with_capacity(Self::count_params(dims));
        for l in 0..dims.len() - 1 {
            let std = (2.0 / dims[l] as f64).sqrt();
            for _ in 0..dims[l + 1] * dims[l] {
                params.push(rng.sample::<f64, _>(StandardNormal) * std);
            }
            params.extend(std::iter::repeat(0.0).take(dims[l + 1]));
        }
        Ok(Mlp { dims: dims.to_vec(), params })
    }

    /// Rebuilds a network from a saved coefficient list.
    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::arg("dims", format!("invalid layer widths {dims:?}")));
        }
        let expected = Self::count_params(dims);
        if params.len() != expected {
            return Err(Error::arg(
                "params",
                format!("expected {expected} coefficients for {dims:?}, got {}", params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::arg("params", "coefficients must be finite"));
        }
        Ok(Mlp { dims: dims.to_vec(), params })
    }

    fn count_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("validated in constructor")
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the last layer so the initial output is exactly zero. Useful
    /// for residual-style predictions where "no change" is the safe start.
    pub fn zero_final_layer(&mut self) {
        let l = self.layer_count() - 1;
        let (w0, _, end) = self.layer_offsets(l);
        self.params[w0..end].fill(0.0);
    }

    /// Offsets of layer `l` inside the flat parameter vector:
    /// `(weight_start, bias_start, end)`.
    fn layer_offsets(&self, l: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.dims[k + 1] * self.dims[k] + self.dims[k + 1];
        }
        let bias = off + self.dims[l + 1] * self.dims[l];
        (off, bias, bias + self.dims[l + 1])
    }

    fn apply_layer(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let (w0, b0, _) = self.layer_offsets(l);
        let din = self.dims[l];
        let dout = self.dims[l + 1];
        let mut s = Vec::with_capacity(dout);
        for o in 0..dout {
            let row = &self.params[w0 + o * din..w0 + (o + 1) * din];
            s.push(self.params[b0 + o] + dot(row, a));
        }
        s
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::arg(
                "input",
                format!("expected {} values, got {}", self.in_dim(), x.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in 0..self.layer_count() {
            let mut s = self.apply_layer(l, &a);
            if l + 1 < self.layer_count() {
                for v in &mut s {
                    *v = silu(*v);
                }
            }
            a = s;
        }
        Ok(a)
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let layers = self.layer_count();
        let mut acts = Vec::with_capacity(layers);
        let mut pres = Vec::with_capacity(layers);
        acts.push(x.to_vec());
        for l in 0..layers {
            let s = self.apply_layer(l, &acts[l]);
            if l + 1 < layers {
                acts.push(s.iter().map(|&v| silu(v)).collect());
            }
            pres.push(s);
        }
        Ok(Trace { acts, pres })
    }

    /// Accumulates parameter gradients into `grad` (same layout as
    /// [`Self::params`]) given the loss gradient with respect to the output,
    /// and returns the loss gradient with respect to the input.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if d_out.len() != self.out_dim() {
            return Err(Error::arg(
                "d_out",
                format!("expected {} values, got {}", self.out_dim(), d_out.len()),
            ));
        }
        if grad.len() != self.params.len() {
            return Err(Error::arg(
                "grad",
                format!("expected {} slots, got {}", self.params.len(), grad.len()),
            ));
        }
        let mut ds = d_out.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (w0, b0, _) = self.layer_offsets(l);
            let din = self.dims[l];
            let a = &trace.acts[l];
            for (o, &d) in ds.iter().enumerate() {
                grad[b0 + o] += d;
                let row = &mut grad[w0 + o * din..w0 + (o + 1) * din];
                for (g, x) in row.iter_mut().zip(a) {
                    *g += d * x;
                }
            }
            let mut da = vec![0.0f64; din];
            for (o, &d) in ds.iter().enumerate() {
                let row = &self.params[w0 + o * din..w0 + (o + 1) * din];
                for (acc, w) in da.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            if l > 0 {
                for (acc, &s) in da.iter_mut().zip(&trace.pres[l - 1]) {
                    *acc *= silu_prime(s);
                }
            }
            ds = da;
        }
        Ok(ds)
    }
}

/// Adam optimizer over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg(
                "params",
                format!(
                    "optimizer sized for {} coefficients, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn silu_known_points() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(100.0) - 100.0).abs() < 1e-9);
        assert!(silu(-100.0).abs() < 1e-9);
        assert!((silu_prime(0.0) - 0.5).abs() < 1e-15);
        // Large-argument slopes approach the ReLU limits.
        assert!((silu_prime(60.0) - 1.0).abs() < 1e-9);
        assert!(silu_prime(-60.0).abs() < 1e-9);
    }

    #[test]
    fn silu_prime_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.4, 1.9, 5.0] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn single_linear_layer_is_affine_map() {
        let mut rng = derive_rng(1, &[99]);
        let mut net = Mlp::new(&[2, 1], &mut rng).unwrap();
        net.params_mut().copy_from_slice(&[2.0, 3.0, 1.0]);
        let y = net.forward(&[4.0, 5.0]).unwrap();
        assert_eq!(y, vec![2.0 * 4.0 + 3.0 * 5.0 + 1.0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_computation() {
        let mut rng = derive_rng(1, &[99]);
        let mut net = Mlp::new(&[1, 1, 1], &mut rng).unwrap();
        // y = w1 * silu(w0 * x + b0) + b1
        net.params_mut().copy_from_slice(&[1.0, 0.0, 2.0, 0.5]);
        let x = 1.0;
        let sig = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = 2.0 * (1.0 * sig) + 0.5;
        let y = net.forward(&[x]).unwrap();
        assert!((y[0] - expected).abs() < 1e-15, "{} vs {expected}", y[0]);
    }

    #[test]
    fn zeroed_final_layer_outputs_zero() {
        let mut rng = derive_rng(7, &[99]);
        let mut net = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        net.zero_final_layer();
        let y = net.forward(&[0.3, -1.2, 0.8]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    /// Scalar loss used by the finite-difference checks: squared distance of
    /// the network output to a fixed target.
    fn loss_of(net: &Mlp, x: &[f64], target: &[f64]) -> f64 {
        let y = net.forward(x).unwrap();
        y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = derive_rng(21, &[99]);
        let net = Mlp::new(&[3, 5, 4, 2], &mut rng).unwrap();
        let x = [0.4, -0.9, 1.3];
        let target = [0.7, -0.2];

        let trace = net.forward_cached(&x).unwrap();
        let d_out: Vec<f64> = trace
            .output()
            .iter()
            .zip(&target)
            .map(|(y, t)| 2.0 * (y - t))
            .collect();
        let mut grad = vec![0.0; net.param_count()];
        let dx = net.backward(&trace, &d_out, &mut grad).unwrap();

        let h = 1e-5;
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss_of(&plus, &x, &target) - loss_of(&minus, &x, &target)) / (2.0 * h);
            let err = (grad[i] - fd).abs();
            assert!(err < 1e-7 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
        }
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss_of(&net, &xp, &target) - loss_of(&net, &xm, &target)) / (2.0 * h);
            let err = (dx[i] - fd).abs();
            assert!(err < 1e-7 * (1.0 + fd.abs()), "input {i}: {} vs {fd}", dx[i]);
        }
    }

    #[test]
    fn backward_accumulates_over_calls() {
        let mut rng = derive_rng(4, &[99]);
        let net = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let trace = net.forward_cached(&[0.5, -0.25]).unwrap();
        let mut once = vec![0.0; net.param_count()];
        net.backward(&trace, &[1.0], &mut once).unwrap();
        let mut twice = vec![0.0; net.param_count()];
        net.backward(&trace, &[1.0], &mut twice).unwrap();
        net.backward(&trace, &[1.0], &mut twice).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With a unit gradient from rest, bias correction makes the first
        // update exactly lr * 1 / (1 + eps).
        let mut opt = Adam::new(1, 0.05);
        let mut p = vec![0.0f64];
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.05).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let target = [3.0, -1.5, 0.25];
        let mut p = vec![0.0f64; 3];
        let mut opt = Adam::new(3, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(&mut p, &g).unwrap();
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn param_roundtrip_preserves_network() {
        let mut rng = derive_rng(11, &[99]);
        let net = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        let copy = Mlp::from_params(net.dims(), net.params().to_vec()).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(net.forward(&x).unwrap(), copy.forward(&x).unwrap());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut rng = derive_rng(11, &[99]);
        let net = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        assert!(net.forward(&[0.0; 3]).is_err());
        assert!(Mlp::from_params(&[4, 6, 3], vec![0.0; 5]).is_err());
        assert!(Mlp::new(&[4], &mut rng).is_err());
        assert!(Mlp::new(&[4, 0, 3], &mut rng).is_err());
        let mut opt = Adam::new(2, 0.1);
        assert!(opt.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
