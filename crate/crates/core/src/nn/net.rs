use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ParamMatrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }
}

/// Shape of an MLP feature extractor: ReLU hidden layers followed by a linear
/// embedding layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Layer widths of an MLP without its input dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl NetShape {
    /// Full-size extractor.
    pub fn full() -> Self {
        Self {
            hidden_dims: vec![256, 256],
            embedding_dim: 64,
        }
    }

    /// Slim extractor, roughly a tenth of the full parameter count.
    pub fn slim() -> Self {
        Self {
            hidden_dims: vec![80, 80],
            embedding_dim: 20,
        }
    }

    pub fn spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embedding_dim: self.embedding_dim,
            activation: Activation::Relu,
        }
    }
}

impl MlpSpec {
    pub fn full(input_dim: usize) -> Self {
        NetShape::full().spec(input_dim)
    }

    pub fn slim(input_dim: usize) -> Self {
        NetShape::slim().spec(input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument(
                "MLP spec needs at least one hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "MLP dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Inputs with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Empty("batch".into()));
        }
        if labels.len() != inputs.nrows() {
            return Err(Error::dims("batch labels", inputs.nrows(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fully connected layer. The weight matrix has shape `out x (in + 1)`; the
/// last column is the bias, so freezing a row freezes the whole output unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: ParamMatrix,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weights: ParamMatrix, activation: Activation) -> Self {
        assert!(weights.cols() >= 1, "dense layer needs a bias column");
        Self {
            weights,
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let mut w = Array2::zeros((output, input + 1));
        for v in w.slice_mut(s![.., ..input]).iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
        Self::new(ParamMatrix::new(w), activation)
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self::new(ParamMatrix::zeros(output, input + 1), activation)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn kernel(&self) -> ArrayView2<'_, f64> {
        self.weights.values().slice(s![.., ..self.input_dim()])
    }

    fn bias(&self) -> ndarray::ArrayView1<'_, f64> {
        self.weights.values().column(self.input_dim())
    }

    /// Pre-activation `x W^T + b`.
    pub fn linear(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.kernel().t());
        z += &self.bias();
        z
    }

    /// Accumulates parameter gradients for pre-activation gradient `dz` and
    /// returns the gradient with respect to the layer input.
    pub fn backward_linear(&mut self, x: &ArrayView2<f64>, dz: &Array2<f64>) -> Array2<f64> {
        let dx = dz.dot(&self.kernel());
        if !self.weights.is_frozen() {
            let inp = self.input_dim();
            let g = self.weights.grad_mut();
            let gw = dz.t().dot(x);
            g.slice_mut(s![.., ..inp]).zip_mut_with(&gw, |a, b| *a += b);
            let gb: Array1<f64> = dz.sum_axis(Axis(0));
            g.column_mut(inp).zip_mut_with(&gb, |a, b| *a += b);
        }
        dx
    }
}

/// Intermediate values of one forward pass, retained for backward.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub inputs: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    layers: Vec<Dense>,
}

impl MlpNet {
    pub fn new(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.hidden_dims.len() + 1);
        let mut prev = spec.input_dim;
        for &h in &spec.hidden_dims {
            layers.push(Dense::glorot(prev, h, spec.activation, rng));
            prev = h;
        }
        layers.push(Dense::glorot(
            prev,
            spec.embedding_dim,
            Activation::Identity,
            rng,
        ));
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dims(
                    format!("layer {} input", i + 1),
                    w[0].output_dim(),
                    w[1].input_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("layer 0 input", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<ActivationTrace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let z = layer.linear(&cur.view());
            let a = layer.activation.apply(&z);
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        Ok(ActivationTrace {
            inputs,
            pre_activations: pre,
            output: cur,
        })
    }

    /// Forward pass without retaining intermediates.
    pub fn infer(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let mut z = layer.linear(&cur.view());
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            cur = z;
        }
        Ok(cur)
    }

    /// Backpropagates `d_output`, accumulating gradients into every
    /// non-frozen layer, and returns the gradient with respect to the input.
    pub fn backward(&mut self, trace: &ActivationTrace, d_output: &Array2<f64>) -> Array2<f64> {
        let mut d = d_output.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if layer.activation == Activation::Relu {
                Zip::from(&mut d)
                    .and(&trace.pre_activations[i])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            d = layer.backward_linear(&trace.inputs[i].view(), &d);
        }
        d
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamMatrix> {
        self.layers.iter().map(|l| &l.weights)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamMatrix> {
        self.layers.iter_mut().map(|l| &mut l.weights)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.freeze();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(ParamMatrix::is_frozen)
    }

    /// All parameters, layer by layer, row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.values().iter().copied())
            .collect()
    }
}
