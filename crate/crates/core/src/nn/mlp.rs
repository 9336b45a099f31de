use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn tanh(input_dim: usize, hidden_layers: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_layers: hidden_layers.to_vec(),
            output_dim,
            activation: Activation::Tanh,
        }
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_layers.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::Config(format!("degenerate network spec {self:?}")));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Fully connected layer; `weight` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Tanh hidden layers with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    pub(crate) layers: Vec<Dense>,
}

/// Per-layer gradients of an [`Mlp`], same shapes as its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Dense {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(Mlp { spec, layers })
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Dense>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::shape(dims.len(), layers.len()));
        }
        for ((i, o), l) in dims.iter().zip(&layers) {
            if l.weight.dim() != (*i, *o) || l.bias.len() != *o {
                return Err(Error::shape(i * o + o, l.weight.len() + l.bias.len()));
            }
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.spec.input_dim {
            return Err(Error::shape(self.spec.input_dim, input.len()));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Batched evaluation, one sample per row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::shape(self.spec.input_dim, x.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: Array2<f64>) -> Result<Tape> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::shape(self.spec.input_dim, x.ncols()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        Ok(Tape { inputs, output: h })
    }

    /// Reverse-mode pass: `d_output` is dLoss/dOutput for every row of the taped batch.
    pub fn backward(&self, tape: &Tape, d_output: ArrayView2<f64>) -> MlpGrads {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            grads.push(Dense {
                weight: input.t().dot(&delta).as_standard_layout().into_owned(),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&layer.weight.t());
                // input of layer i is tanh output of layer i-1
                ndarray::Zip::from(&mut back)
                    .and(input)
                    .for_each(|b, &a| *b *= 1.0 - a * a);
                delta = back;
            }
        }
        grads.reverse();
        MlpGrads { layers: grads }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .spec
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }
}

fn dense_slices(layers: &[Dense]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

fn dense_slices_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
        .collect()
}

impl Parameters for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        dense_slices(&self.layers)
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        dense_slices_mut(&mut self.layers)
    }
}

impl Parameters for MlpGrads {
    fn slices(&self) -> Vec<&[f64]> {
        dense_slices(&self.layers)
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        dense_slices_mut(&mut self.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(MlpSpec::tanh(3, &[4, 4], 2)).unwrap();
        assert_eq!(mlp.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::tanh(3, &[], 3);
        let layer = Dense {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let mlp = Mlp::from_layers(spec, vec![layer]).unwrap();
        assert_eq!(mlp.forward(&[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn two_two_one_matches_scalar_evaluation() {
        let spec = MlpSpec::tanh(2, &[2], 1);
        let l0 = Dense {
            weight: array![[0.3, -0.7], [1.1, 0.4]],
            bias: array![0.05, -0.2],
        };
        let l1 = Dense {
            weight: array![[0.9], [-1.3]],
            bias: array![0.25],
        };
        let mlp = Mlp::from_layers(spec, vec![l0, l1]).unwrap();
        let (x0, x1) = (0.6, -0.8);
        let h0 = (0.3 * x0 + 1.1 * x1 + 0.05_f64).tanh();
        let h1 = (-0.7 * x0 + 0.4 * x1 - 0.2_f64).tanh();
        let expect = 0.9 * h0 - 1.3 * h1 + 0.25;
        let got = mlp.forward(&[x0, x1]).unwrap()[0];
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mlp = Mlp::zeros(MlpSpec::tanh(2, &[3], 1)).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Shape { expected: 2, got: 1 })));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut rng = seed::rng(1);
        let mlp = Mlp::new(MlpSpec::tanh(2, &[3], 2), &mut rng).unwrap();
        let tape = mlp.forward_tape(array![[0.1, 0.2], [0.3, -0.4]]).unwrap();
        let g = mlp.backward(&tape, Array2::zeros((2, 2)).view());
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = seed::rng(9);
        let mlp = Mlp::new(MlpSpec::tanh(10, &[30], 5), &mut rng).unwrap();
        let lim = (6.0f64 / 40.0).sqrt();
        assert!(mlp.layers[0].weight.iter().all(|w| w.abs() <= lim));
        assert!(mlp.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn hidden_activations_bounded() {
        let mut rng = seed::rng(2);
        let mlp = Mlp::new(MlpSpec::tanh(2, &[8, 8], 1), &mut rng).unwrap();
        let tape = mlp.forward_tape(array![[100.0, -50.0], [0.0, 1.0]]).unwrap();
        for h in &tape.inputs[1..] {
            assert!(h.iter().all(|v| v.abs() <= 1.0));
        }
    }

    fn probe_loss(mlp: &Mlp, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
        (&mlp.forward_batch(x.view()).unwrap() * c).sum()
    }

    proptest::proptest! {
        #[test]
        fn gradients_match_central_differences(
            params in proptest::collection::vec(-1.5f64..1.5, 17),
            xs in proptest::collection::vec(-2.0f64..2.0, 6),
            cs in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let mut mlp = Mlp::zeros(MlpSpec::tanh(2, &[3], 2)).unwrap();
            for (dst, src) in mlp.slices_mut().into_iter().flatten().zip(&params) {
                *dst = *src;
            }
            let x = Array2::from_shape_vec((3, 2), xs).unwrap();
            let c = Array2::from_shape_vec((3, 2), cs).unwrap();
            let tape = mlp.forward_tape(x.clone()).unwrap();
            let analytic = mlp.backward(&tape, c.view()).flatten();
            let h = 1e-5;
            for (k, &g) in analytic.iter().enumerate() {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                *plus.slices_mut().into_iter().flatten().nth(k).unwrap() += h;
                *minus.slices_mut().into_iter().flatten().nth(k).unwrap() -= h;
                let numeric = (probe_loss(&plus, &x, &c) - probe_loss(&minus, &x, &c)) / (2.0 * h);
                let rel = (numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-6);
                proptest::prop_assert!(rel < 1e-4, "param {}: analytic {} numeric {}", k, g, numeric);
            }
        }
    }
}
