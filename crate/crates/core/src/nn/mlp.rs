use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Gradients, Tape, Var};
use crate::nn::tensor::{linear_forward, Tensor};

/// Nonlinearity applied after a hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, t: Tensor) -> Tensor {
        match self {
            Activation::Tanh => t.map(f64::tanh),
            Activation::Identity => t,
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Glorot uniform on weights, zero biases.
    Xavier,
}

/// Fully connected network. Hidden layers use their activation; the output
/// layer is affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activations: Vec<Activation>,
}

/// Tape handles for one binding of an [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl MlpVars {
    /// Weight then bias handle for every layer, matching
    /// [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

impl MlpParams {
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "mlp layer sizes must have >= 2 positive entries, got {layer_sizes:?}"
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (input, out) = (pair[0], pair[1]);
            let mut w = Tensor::zeros(&[out, input]);
            if init == Init::Xavier {
                let limit = (6.0 / (input + out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
                for v in w.data_mut() {
                    *v = dist.sample(rng);
                }
            }
            weights.push(w);
            biases.push(Tensor::zeros(&[out]));
        }
        let activations = vec![hidden_activation; layer_sizes.len() - 2];
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activations,
        })
    }

    pub fn zeros(layer_sizes: &[usize], hidden_activation: Activation) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Self::new(layer_sizes, hidden_activation, Init::Zeros, &mut rng)
    }

    /// Builds a network from explicit `(weight, bias)` layers.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        if activations.len() != layers.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        let mut layer_sizes = vec![layers[0].0.cols()];
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.shape().len() != 2 || w.cols() != *layer_sizes.last().unwrap() {
                return Err(Error::shape(
                    format!("mlp layer {i} weight"),
                    format!("[_, {}]", layer_sizes.last().unwrap()),
                    format!("{:?}", w.shape()),
                ));
            }
            if b.shape() != [w.shape()[0]] {
                return Err(Error::shape(
                    format!("mlp layer {i} bias"),
                    format!("[{}]", w.shape()[0]),
                    format!("{:?}", b.shape()),
                ));
            }
            layer_sizes.push(w.shape()[0]);
        }
        let (weights, biases) = layers.into_iter().unzip();
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            activations,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    /// Weight then bias for every layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape(
                "mlp input last dimension",
                self.input_dim(),
                cols,
            ));
        }
        Ok(())
    }

    /// Gradient-free forward pass over the rows of `input`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let mut h = linear_forward(input, &self.weights[0], &self.biases[0]);
        for layer in 1..self.weights.len() {
            h = self.activations[layer - 1].apply(h);
            h = linear_forward(&h, &self.weights[layer], &self.biases[layer]);
        }
        Ok(h)
    }

    /// Forward pass on one input vector.
    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Tensor::row(input.to_vec()))?.into_data())
    }

    /// Puts the parameters on `tape` as gradient-receiving leaves.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    /// Puts the parameters on `tape` as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    /// Recorded forward pass using parameters previously bound with
    /// [`MlpParams::bind`].
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        self.check_input(tape.value(input).cols())?;
        let mut h = tape.linear(input, vars.weights[0], vars.biases[0]);
        for layer in 1..self.weights.len() {
            h = self.activations[layer - 1].record(tape, h);
            h = tape.linear(h, vars.weights[layer], vars.biases[layer]);
        }
        Ok(h)
    }

    /// Collects gradients for this network in [`MlpParams::tensors`] order.
    pub fn grads(&self, vars: &MlpVars, grads: &Gradients) -> Vec<Tensor> {
        vars.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }

    /// `self ← rate·source + (1 − rate)·self`, elementwise.
    pub fn blend_from(&mut self, source: &MlpParams, rate: f64) {
        assert_eq!(self.layer_sizes, source.layer_sizes, "blend_from architecture mismatch");
        for (dst, src) in self.tensors_mut().into_iter().zip(source.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = rate * s + (1.0 - rate) * *d;
            }
        }
    }

    /// Scales the output layer, e.g. to start a head near zero.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.weights.len() - 1;
        for v in self.weights[last].data_mut() {
            *v *= factor;
        }
        for v in self.biases[last].data_mut() {
            *v *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let w = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let net = MlpParams::from_layers(vec![(w, Tensor::zeros(&[3]))], vec![]).unwrap();
        assert_eq!(net.forward_vec(&[1., 2., 3.]).unwrap(), vec![1., 2., 3.]);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mut net = MlpParams::zeros(&[4, 8, 2], Activation::Tanh).unwrap();
        net.bias_mut(1).data_mut().copy_from_slice(&[0.25, -1.5]);
        assert_eq!(net.forward_vec(&[9., -3., 2., 0.1]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn hand_set_two_layer_forward() {
        // h = tanh(W1 x + b1), y = W2 h + b2 with x = [1, 0]
        let w1 = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.3]).unwrap();
        let b1 = Tensor::vector(vec![0.1, -0.2]);
        let w2 = Tensor::matrix(1, 2, vec![1.5, -0.7]).unwrap();
        let b2 = Tensor::vector(vec![0.05]);
        let net = MlpParams::from_layers(vec![(w1, b1), (w2, b2)], vec![Activation::Tanh]).unwrap();
        let h0 = (0.5f64 + 0.1).tanh();
        let h1 = (2.0f64 - 0.2).tanh();
        let expected = 1.5 * h0 - 0.7 * h1 + 0.05;
        let y = net.forward_vec(&[1.0, 0.0]).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = MlpParams::zeros(&[3, 4, 1], Activation::Tanh).unwrap();
        let err = net.forward_vec(&[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("expected 3, got 2"), "{err}");
    }

    #[test]
    fn weight_shapes_follow_layer_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpParams::new(&[5, 7, 3], Activation::Tanh, Init::Xavier, &mut rng).unwrap();
        assert_eq!(net.weight(0).shape(), &[7, 5]);
        assert_eq!(net.bias(0).shape(), &[7]);
        assert_eq!(net.weight(1).shape(), &[3, 7]);
        assert_eq!(net.bias(1).shape(), &[3]);
        assert_eq!(net.num_params(), 7 * 5 + 7 + 3 * 7 + 3);
    }

    #[test]
    fn from_layers_checks_shapes() {
        let w1 = Tensor::zeros(&[4, 2]);
        let w2 = Tensor::zeros(&[1, 3]);
        let r = MlpParams::from_layers(
            vec![(w1, Tensor::zeros(&[4])), (w2, Tensor::zeros(&[1]))],
            vec![Activation::Tanh],
        );
        assert!(r.is_err());
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MlpParams::new(&[3, 6, 6, 2], Activation::Tanh, Init::Xavier, &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.0, 0.0, -1.0]).unwrap();
        let plain = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let xv = tape.constant(x);
        let y = net.forward_on(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(y), &plain);
    }

    #[test]
    fn blend_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = MlpParams::new(&[2, 3, 1], Activation::Tanh, Init::Xavier, &mut rng).unwrap();
        let b = MlpParams::new(&[2, 3, 1], Activation::Tanh, Init::Xavier, &mut rng).unwrap();
        let mut blended = b.clone();
        blended.blend_from(&a, 0.25);
        for ((out, src), old) in blended.tensors().iter().zip(a.tensors()).zip(b.tensors()) {
            for i in 0..out.len() {
                assert_eq!(out.data()[i], 0.25 * src.data()[i] + 0.75 * old.data()[i]);
            }
        }
    }
}
