use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Slope used for hidden layers unless a caller asks otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(Error::Config(format!(
                "leaky-relu slope must lie in (0, 1), got {s}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn apply_matrix(self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        if self != Activation::Identity {
            for v in out.data_mut() {
                *v = self.apply(*v);
            }
        }
        out
    }
}

/// Dense affine layer `y = act(x · W + b)` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        if biases.len() != weights.cols() {
            return Err(Error::shape(
                "Layer::new",
                format!("{} biases", weights.cols()),
                format!("{} biases", biases.len()),
            ));
        }
        activation.validate()?;
        Ok(Layer {
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Layer {
            weights: Matrix::zeros(input, output),
            biases: vec![0.0; output],
            activation,
        }
    }

    /// Identity weights, zero bias. Requires a square layer.
    pub fn identity(width: usize, activation: Activation) -> Self {
        Layer {
            weights: Matrix::identity(width),
            biases: vec![0.0; width],
            activation,
        }
    }

    /// He-style Gaussian initialisation, zero bias.
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / input.max(1) as f64).sqrt();
        let weights = Matrix::from_fn(input, output, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        Layer {
            weights,
            biases: vec![0.0; output],
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weights.cols()
    }

    /// Pre-activation `x · W + b`.
    pub fn affine(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = input.matmul(&self.weights)?;
        z.add_row_vector(&self.biases)?;
        Ok(z)
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.activation.apply_matrix(&self.affine(input)?))
    }

    /// Gradients of an affine map given `dz = dL/d(pre-activation)`.
    pub fn affine_backward(&self, input: &Matrix, dz: &Matrix) -> Result<(LayerGrad, Matrix)> {
        let weights = input.t_matmul(dz)?;
        let biases = dz.column_sums();
        let input_grad = dz.matmul_t(&self.weights)?;
        Ok((LayerGrad { weights, biases }, input_grad))
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.biases.len()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.data());
        out.extend_from_slice(&self.biases);
    }

    fn assign_from(&mut self, src: &[f64]) -> usize {
        let nw = self.weights.rows() * self.weights.cols();
        self.weights.data_mut().copy_from_slice(&src[..nw]);
        let nb = self.biases.len();
        self.biases.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        LayerGrad {
            weights: Matrix::zeros(layer.weights.rows(), layer.weights.cols()),
            biases: vec![0.0; layer.biases.len()],
        }
    }

    pub fn accumulate(&mut self, other: &LayerGrad) {
        for (a, b) in self.weights.data_mut().iter_mut().zip(other.weights.data()) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.scale(s);
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.data());
        out.extend_from_slice(&self.biases);
    }
}

/// Flat view over trainable parameters, in a fixed order shared with the
/// matching gradient type.
pub trait Parameters {
    fn param_count(&self) -> usize;
    fn flatten_params(&self) -> Vec<f64>;
    /// Overwrites every parameter from `src`, which must have exactly
    /// `param_count()` entries.
    fn assign_params(&mut self, src: &[f64]) -> Result<()>;
}

impl Parameters for Layer {
    fn param_count(&self) -> usize {
        Layer::param_count(self)
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut out);
        out
    }

    fn assign_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != Layer::param_count(self) {
            return Err(Error::shape(
                "Layer::assign_params",
                Layer::param_count(self),
                src.len(),
            ));
        }
        self.assign_from(src);
        Ok(())
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Ordered stack of dense layers.
///
/// Every mutation stamps the stack with a fresh version; a [`Tape`] records
/// the version it was produced under so a backward pass against mutated
/// parameters is rejected.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Intermediates cached by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Tape {
    pub fn output_shape(&self) -> (usize, usize) {
        self.pre.last().map(|m| m.shape()).unwrap_or((0, 0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp.layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.accumulate(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.scale(s);
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.flatten_into(out);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::shape(
                    "Mlp::new",
                    format!("layer {} input width {}", i + 1, pair[0].output_width()),
                    format!("{}", pair[1].input_width()),
                ));
            }
        }
        for l in &layers {
            l.activation.validate()?;
        }
        Ok(Mlp {
            layers,
            version: fresh_version(),
        })
    }

    /// Random MLP over `widths` (`widths[0]` is the input width). Hidden layers
    /// use `hidden`, the last layer uses `last`.
    pub fn random<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "an MLP needs an input and an output width".into(),
            ));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Layer::random(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape)> {
        if input.cols() != self.input_width() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {}", self.input_width()),
                format!("{}", input.cols()),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let z = layer.affine(&x)?;
            let next = layer.activation.apply_matrix(&z);
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        Ok((
            x,
            Tape {
                version: self.version,
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without keeping intermediates.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_width() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {}", self.input_width()),
                format!("{}", input.cols()),
            ));
        }
        let mut x = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        if upstream.shape() != tape.output_shape() {
            return Err(Error::shape(
                "mlp_backward",
                format!("{:?}", tape.output_shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[i];
            if layer.activation != Activation::Identity {
                for (gv, zv) in g.data_mut().iter_mut().zip(z.data()) {
                    *gv *= layer.activation.derivative(*zv);
                }
            }
            let (lg, dx) = layer.affine_backward(&tape.inputs[i], &g)?;
            grads.push(lg);
            g = dx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

impl Parameters for Mlp {
    fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Parameters::param_count(self));
        for l in &self.layers {
            l.flatten_into(&mut out);
        }
        out
    }

    fn assign_params(&mut self, src: &[f64]) -> Result<()> {
        let n = Parameters::param_count(self);
        if src.len() != n {
            return Err(Error::shape("Mlp::assign_params", n, src.len()));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            off += l.assign_from(&src[off..]);
        }
        Ok(())
    }
}
