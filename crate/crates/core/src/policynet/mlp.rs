use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::NetError;

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Layer sizes of a fully connected ELU network with a linear output layer.
///
/// Parameters live in a caller-owned flat slice; layer `l` stores its weight
/// matrix (`out × in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    sizes: Vec<usize>,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    batch: usize,
    /// `inputs[l]` is the input of layer `l` (`batch × sizes[l]`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs, `batch × output_dim`.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

impl MlpLayout {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        Self { sizes }
    }

    /// `input → hidden… → output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`; `sqrt(2)` gain on hidden
    /// layers and `output_gain` on the last. Biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, output_gain: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let gain = if l + 1 == self.num_layers() {
                output_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let scale = gain / (fan_in as f64).sqrt();
            for w in &mut params[off..off + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * scale;
            }
            off += fan_in * fan_out + fan_out;
        }
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.num_params() {
            return Err(NetError::Shape {
                context: "mlp parameters",
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    /// Single-input forward pass without recording activations.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_params(params)?;
        if x.len() != self.input_dim() {
            return Err(NetError::Shape {
                context: "mlp input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut cur = x.to_vec();
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let last = l + 1 == self.num_layers();
            let next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = b[o] + row.iter().zip(&cur).map(|(a, c)| a * c).sum::<f64>();
                    if last {
                        z
                    } else {
                        elu(z)
                    }
                })
                .collect();
            cur = next;
            off += n_in * n_out + n_out;
        }
        Ok(cur)
    }

    /// Batched forward pass over `xs` (`batch × input_dim`, row-major),
    /// recording what [`MlpLayout::backward`] needs.
    pub fn forward_batch(&self, params: &[f64], xs: &[f64]) -> Result<Trace, NetError> {
        self.check_params(params)?;
        let n_in0 = self.input_dim();
        if !xs.len().is_multiple_of(n_in0) {
            return Err(NetError::Shape {
                context: "mlp batch input",
                expected: n_in0 * (xs.len() / n_in0 + 1),
                actual: xs.len(),
            });
        }
        let batch = xs.len() / n_in0;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers() - 1);
        let mut cur = xs.to_vec();
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let mut z = vec![0.0; batch * n_out];
            for (x_row, z_row) in cur.chunks_exact(n_in).zip(z.chunks_exact_mut(n_out)) {
                for (o, zo) in z_row.iter_mut().enumerate() {
                    let w_row = &w[o * n_in..(o + 1) * n_in];
                    *zo = b[o] + w_row.iter().zip(x_row).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            off += n_in * n_out + n_out;
            let last = l + 1 == self.num_layers();
            inputs.push(std::mem::take(&mut cur));
            if last {
                cur = z;
            } else {
                cur = z.iter().map(|&v| elu(v)).collect();
                pre.push(z);
            }
        }
        Ok(Trace {
            batch,
            inputs,
            pre,
            output: cur,
        })
    }

    /// Accumulates `∂(Σ_b d_out[b]·out[b])/∂params` into `grad`.
    ///
    /// Returns the gradient with respect to the batch inputs.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        d_out: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, NetError> {
        if trace.inputs.is_empty() {
            return Err(NetError::NoForwardPass);
        }
        self.check_params(params)?;
        self.check_params(grad)?;
        let batch = trace.batch;
        if d_out.len() != batch * self.output_dim() {
            return Err(NetError::Shape {
                context: "mlp output adjoint",
                expected: batch * self.output_dim(),
                actual: d_out.len(),
            });
        }
        let mut delta = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &params[off..off + n_in * n_out];
            let x = &trace.inputs[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (d_row, x_row) in delta.chunks_exact(n_out).zip(x.chunks_exact(n_in)) {
                    for (o, &d) in d_row.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for (g, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x_row) {
                            *g += d * xi;
                        }
                    }
                }
            }
            let mut d_in = vec![0.0; batch * n_in];
            for (d_row, di_row) in delta.chunks_exact(n_out).zip(d_in.chunks_exact_mut(n_in)) {
                for (o, &d) in d_row.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (di, &wi) in di_row.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *di += d * wi;
                    }
                }
            }
            if l > 0 {
                for (di, &z) in d_in.iter_mut().zip(&trace.pre[l - 1]) {
                    *di *= elu_grad(z);
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

/// An MLP that owns its parameters; used for the critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layout: MlpLayout,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(layout: MlpLayout, rng: &mut R, output_gain: f64) -> Self {
        let params = layout.init_params(rng, output_gain);
        Self { layout, params }
    }

    pub fn zeros(layout: MlpLayout) -> Self {
        let params = vec![0.0; layout.num_params()];
        Self { layout, params }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.layout.forward(&self.params, x)
    }

    pub fn forward_batch(&self, xs: &[f64]) -> Result<Trace, NetError> {
        self.layout.forward_batch(&self.params, xs)
    }

    /// Returns the parameter gradient for the given output adjoint.
    pub fn backward(&self, trace: &Trace, d_out: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut grad = vec![0.0; self.params.len()];
        self.layout.backward(&self.params, trace, d_out, &mut grad)?;
        Ok(grad)
    }
}

/// Scalar value head: `critic_forward`.
pub fn critic_forward(critic: &Mlp, obs: &[f64]) -> Result<f64, NetError> {
    Ok(critic.forward(obs)?[0])
}
