//! Parameters, affine layers and small perceptrons.

use super::ops::{matmul, matmul_backward, sigmoid};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }

    /// Glorot-uniform initialisation: `U(−s, s)`, `s = √(6/(fan_in+fan_out))`.
    pub fn glorot(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-s, s)).collect();
        let value = Tensor::new(vec![fan_in, fan_out], data).expect("positive fan");
        Self::new(name, value)
    }
}

/// Anything that owns trainable parameters in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::None => x.clone(),
        }
    }

    /// Backward through the activation given its input `pre` and output `post`.
    pub fn backward(self, pre: &Tensor, post: &Tensor, dout: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => pre.zip_map(dout, "relu_backward", |p, d| if p > 0.0 { d } else { 0.0 }),
            Activation::Sigmoid => post.zip_map(dout, "sigmoid_backward", |y, d| d * y * (1.0 - y)),
            Activation::None => Ok(dout.clone()),
        }
    }
}

/// `y = x·W + b` with `W: [in×out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(weight: Parameter, bias: Parameter) -> Result<Self> {
        let (_, out) = weight.value.require_matrix("Linear::new")?;
        bias.value.require_shape("Linear::new", &[out])?;
        Ok(Self { weight, bias })
    }

    pub fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        Self {
            weight: Parameter::glorot(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight.value)?;
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, dout: &Tensor) -> Result<Tensor> {
        let (dx, dw) = matmul_backward(x, &self.weight.value, dout)?;
        self.weight.accumulate(&dw)?;
        self.bias.accumulate(&dout.sum_rows())?;
        Ok(dx)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Intermediate values of an [`Mlp`] forward pass needed by its backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor {
        self.post.last().expect("mlp has at least one layer")
    }
}

/// Affine–activation stack: hidden layers use `hidden`, the last layer `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("Mlp::new", "no layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    "Mlp::new",
                    format!(
                        "layer {i} outputs {} features but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Glorot-initialised perceptron with the given layer widths.
    pub fn init(name: &str, widths: &[usize], hidden: Activation, output: Activation, rng: &mut RngState) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self::new(layers, hidden, output).expect("widths chain by construction")
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn activation_of(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<MlpCache> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            let a = self.activation_of(i).apply(&z);
            cache.inputs.push(h);
            cache.pre.push(z);
            h = a.clone();
            cache.post.push(a);
        }
        Ok(cache)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.activation_of(i).apply(&layer.forward(&h)?);
        }
        Ok(h)
    }

    /// Accumulates gradients of every layer; returns `dL/dx`.
    pub fn backward(&mut self, cache: &MlpCache, dout: &Tensor) -> Result<Tensor> {
        let mut d = dout.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_of(i);
            d = act.backward(&cache.pre[i], &cache.post[i], &d)?;
            d = self.layers[i].backward(&cache.inputs[i], &d)?;
        }
        Ok(d)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        Mlp::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Mlp::params_mut(self)
    }
}

/// Affine–activation stack over explicit layers; `activation` applies to the
/// final layer and hidden layers use ReLU.
pub fn mlp_forward(x: &Tensor, layers: &[Linear], activation: Activation) -> Result<Tensor> {
    Mlp::new(layers.to_vec(), Activation::Relu, activation)?.forward(x)
}
