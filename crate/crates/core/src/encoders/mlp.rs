//! Plain and residual MLPs with hand-written backward passes.

use crate::error::{Error, Result};
use crate::numcore::{flatten_params, matvec_bias, NamedTensor, ParamVector, SeededRng};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths of an MLP.
///
/// Non-residual: `input -> hidden[0] -> ... -> output`, activation between
/// layers but not after the last one.
///
/// Residual: `input -> width` projection followed by the activation, one
/// residual block `h + fc2(act(fc1(h)))` per entry of `hidden_dims`, then a
/// `width -> output` projection. All hidden widths must be equal.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Gelu,
            residual: false,
        }
    }

    pub fn residual(input_dim: usize, width: usize, blocks: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![width; blocks],
            output_dim,
            activation: Activation::Gelu,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("MLP dims must be >= 1: {self:?}")));
        }
        if self.residual {
            if self.hidden_dims.is_empty() {
                return Err(Error::Config(
                    "residual MLP needs at least one block".into(),
                ));
            }
            if self.hidden_dims.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config(
                    "residual MLP requires equal hidden widths".into(),
                ));
            }
        }
        Ok(())
    }

    fn dense_shapes(&self) -> Vec<(String, usize, usize)> {
        if self.residual {
            let w = self.hidden_dims[0];
            let mut out = vec![("input".to_string(), self.input_dim, w)];
            for k in 0..self.hidden_dims.len() {
                out.push((format!("block{k}.fc1"), w, w));
                out.push((format!("block{k}.fc2"), w, w));
            }
            out.push(("output".to_string(), w, self.output_dim));
            out
        } else {
            let mut dims = vec![self.input_dim];
            dims.extend(&self.hidden_dims);
            dims.push(self.output_dim);
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| (format!("layer{i}"), w[0], w[1]))
                .collect()
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, rng: &mut SeededRng) -> Result<ParamVector> {
    spec.validate()?;
    let mut tensors = Vec::new();
    for (name, fan_in, fan_out) in spec.dense_shapes() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        tensors.push(NamedTensor {
            name: format!("{name}.weight"),
            shape: vec![fan_out, fan_in],
            values: weights,
        });
        tensors.push(NamedTensor {
            name: format!("{name}.bias"),
            shape: vec![fan_out],
            values: vec![0.0; fan_out],
        });
    }
    flatten_params(&tensors)
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        matvec_bias(
            &p[self.w..self.w + self.fan_in * self.fan_out],
            &p[self.b..self.b + self.fan_out],
            x,
        )
    }

    /// Accumulates parameter gradients into `gp` and returns dL/dx.
    fn backward(&self, p: &[f64], x: &[f64], gout: &[f64], gp: &mut [f64], need_gin: bool) -> Vec<f64> {
        let n = self.fan_in;
        for (r, &g) in gout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut gp[self.w + r * n..self.w + (r + 1) * n];
            for (gw, &xv) in row.iter_mut().zip(x) {
                *gw += g * xv;
            }
            gp[self.b + r] += g;
        }
        if !need_gin {
            return Vec::new();
        }
        let mut gin = vec![0.0; n];
        for (r, &g) in gout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &p[self.w + r * n..self.w + (r + 1) * n];
            for (gi, &wv) in gin.iter_mut().zip(row) {
                *gi += g * wv;
            }
        }
        gin
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense { dense: Dense, act: bool },
    Residual { fc1: Dense, fc2: Dense },
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Vec<f64>, pre: Vec<f64> },
    Residual { input: Vec<f64>, pre1: Vec<f64>, act1: Vec<f64> },
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    layers: Vec<LayerCache>,
}

/// An MLP bound to a layout. Parameters are passed in on every call so the
/// same structure can run interpolated or candidate parameter sets.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    param_count: usize,
}

impl Mlp {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut offset = 0;
        let mut dense = Vec::new();
        for (_, fan_in, fan_out) in spec.dense_shapes() {
            let d = Dense {
                w: offset,
                b: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            dense.push(d);
        }
        let layers = if spec.residual {
            let mut layers = vec![Layer::Dense {
                dense: dense[0],
                act: true,
            }];
            for k in 0..spec.hidden_dims.len() {
                layers.push(Layer::Residual {
                    fc1: dense[1 + 2 * k],
                    fc2: dense[2 + 2 * k],
                });
            }
            layers.push(Layer::Dense {
                dense: *dense.last().unwrap(),
                act: false,
            });
            layers
        } else {
            let last = dense.len() - 1;
            dense
                .into_iter()
                .enumerate()
                .map(|(i, d)| Layer::Dense {
                    dense: d,
                    act: i != last,
                })
                .collect()
        };
        Ok(Self {
            spec: spec.clone(),
            layers,
            param_count: offset,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::Layout(format!(
                "MLP expects {} params, got {}",
                self.param_count,
                params.len()
            )));
        }
        if x.len() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "MLP input dim {} but record has {}",
                self.spec.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        let act = self.spec.activation;
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { dense, act: a } => {
                    let mut u = dense.forward(params, &h);
                    if *a {
                        u.iter_mut().for_each(|v| *v = act.apply(*v));
                    }
                    u
                }
                Layer::Residual { fc1, fc2 } => {
                    let a1: Vec<f64> = fc1.forward(params, &h).into_iter().map(|v| act.apply(v)).collect();
                    let branch = fc2.forward(params, &a1);
                    h.iter().zip(branch).map(|(a, b)| a + b).collect()
                }
            };
        }
        Ok(h)
    }

    pub fn forward_trace(&self, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, MlpTrace)> {
        self.check(params, x)?;
        let act = self.spec.activation;
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense { dense, act: a } => {
                    let pre = dense.forward(params, &h);
                    let out = if *a {
                        pre.iter().map(|&v| act.apply(v)).collect()
                    } else {
                        pre.clone()
                    };
                    caches.push(LayerCache::Dense { input: h, pre });
                    h = out;
                }
                Layer::Residual { fc1, fc2 } => {
                    let pre1 = fc1.forward(params, &h);
                    let act1: Vec<f64> = pre1.iter().map(|&v| act.apply(v)).collect();
                    let branch = fc2.forward(params, &act1);
                    let out = h.iter().zip(&branch).map(|(a, b)| a + b).collect();
                    caches.push(LayerCache::Residual { input: h, pre1, act1 });
                    h = out;
                }
            }
        }
        Ok((h, MlpTrace { layers: caches }))
    }

    /// Adds dL/dparams into `grad` given dL/doutput. Returns dL/dinput when
    /// `need_input_grad` is set, otherwise an empty vector.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        grad_out: &[f64],
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let act = self.spec.activation;
        let mut g = grad_out.to_vec();
        let n = self.layers.len();
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let need = need_input_grad || i > 0;
            g = match (layer, cache) {
                (Layer::Dense { dense, act: a }, LayerCache::Dense { input, pre }) => {
                    if *a {
                        for (gv, &p) in g.iter_mut().zip(pre) {
                            *gv *= act.derivative(p);
                        }
                    }
                    dense.backward(params, input, &g, grad, need)
                }
                (Layer::Residual { fc1, fc2 }, LayerCache::Residual { input, pre1, act1 }) => {
                    let mut ga = fc2.backward(params, act1, &g, grad, true);
                    for (gv, &p) in ga.iter_mut().zip(pre1) {
                        *gv *= act.derivative(p);
                    }
                    let gin = fc1.backward(params, input, &ga, grad, true);
                    g.iter().zip(gin).map(|(skip, b)| skip + b).collect()
                }
                _ => unreachable!("trace does not match layer plan"),
            };
        }
        debug_assert!(n == trace.layers.len());
        g
    }
}
