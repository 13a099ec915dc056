//! Dense layers and multi-layer perceptrons.
//!
//! Two execution paths exist for every network: a plain forward pass for
//! frozen models (evaluation, finite-difference probing) and a taped pass
//! for training. `record_jacobian_diag` builds ∂out/∂in[j] of a scalar-output
//! MLP as a tape expression via the layer-wise chain rule, so the log of that
//! derivative can itself be back-propagated to the parameters.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_nt, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Identity,
}

impl Activation {
    pub fn leaky_default() -> Self {
        Activation::LeakyRelu { slope: DEFAULT_LEAKY_SLOPE }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out × in
    pub weights: Tensor,
    /// out
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Self {
        assert_eq!(weights.rows(), bias.len(), "bias extent must match out extent");
        DenseLayer { weights, bias, activation }
    }

    pub fn in_extent(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_extent(&self) -> usize {
        self.weights.rows()
    }

    /// Fan-in uniform init: U(−√(1/in), √(1/in)).
    pub fn init(rng: &mut impl Rng, in_extent: usize, out_extent: usize, activation: Activation) -> Self {
        let bound = (1.0 / in_extent as f64).sqrt();
        let weights = Tensor::new(
            vec![out_extent, in_extent],
            (0..out_extent * in_extent).map(|_| rng.gen_range(-bound..bound)).collect(),
        );
        let bias = Tensor::new(
            vec![out_extent],
            (0..out_extent).map(|_| rng.gen_range(-bound..bound)).collect(),
        );
        DenseLayer { weights, bias, activation }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Tape handles for one MLP's parameters within a single pass.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// Build an MLP with the given layer extents; all hidden layers use
    /// `hidden_activation`, the output layer is linear.
    pub fn init(
        rng: &mut impl Rng,
        extents: &[usize],
        hidden_activation: Activation,
    ) -> Self {
        assert!(extents.len() >= 2);
        let mut layers = Vec::with_capacity(extents.len() - 1);
        for i in 0..extents.len() - 1 {
            let act = if i + 2 == extents.len() { Activation::Identity } else { hidden_activation };
            layers.push(DenseLayer::init(rng, extents[i], extents[i + 1], act));
        }
        Mlp { layers }
    }

    pub fn in_extent(&self) -> usize {
        self.layers[0].in_extent()
    }

    pub fn out_extent(&self) -> usize {
        self.layers.last().unwrap().out_extent()
    }

    /// Plain forward pass over rows of `input`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut h = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            if h.cols() != layer.in_extent() {
                return Err(CoreError::Dimension(format!(
                    "layer {li}: input extent {} != expected {}",
                    h.cols(),
                    layer.in_extent()
                )));
            }
            let mut out = Tensor::zeros(vec![h.rows(), layer.out_extent()]);
            matmul_nt(&h, &layer.weights, &mut out);
            let cols = out.cols();
            for row in out.data_mut().chunks_exact_mut(cols) {
                for (o, b) in row.iter_mut().zip(layer.bias.data()) {
                    *o = layer.activation.apply(*o + b);
                }
            }
            h = out;
        }
        h.expect_finite("forward_mlp output")?;
        Ok(h)
    }

    /// Register this MLP's parameters on `tape`, in layer order.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weights.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Taped forward pass.
    pub fn record(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Var {
        let mut h = input;
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            let pre = tape.linear(h, w, Some(b));
            h = match layer.activation {
                Activation::LeakyRelu { slope } => tape.leaky_relu(pre, slope),
                Activation::Relu => tape.leaky_relu(pre, 0.0),
                Activation::Identity => pre,
            };
        }
        h
    }

    /// ∂out/∂in[wrt_index] for a scalar-per-row MLP, as a tape expression.
    ///
    /// Returns an [S,1] node (scalar for a single row). The chain is built
    /// from the recorded pre-activations, so back-propagating through the
    /// result reaches every weight; activation second derivatives vanish
    /// almost everywhere and are treated as zero.
    pub fn record_jacobian_diag(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        input: Var,
        wrt_index: usize,
    ) -> Result<Var> {
        if self.out_extent() != 1 {
            return Err(CoreError::Usage(format!(
                "jacobian_diag requires scalar output, got extent {}",
                self.out_extent()
            )));
        }
        if wrt_index >= self.in_extent() {
            return Err(CoreError::Usage(format!(
                "wrt_index {wrt_index} out of range for input extent {}",
                self.in_extent()
            )));
        }
        let rows = tape.value(input).rows();
        let mut h = input;
        let mut chain: Option<Var> = None;
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            let pre = tape.linear(h, w, Some(b));
            // Propagate the derivative column through this layer.
            let lin = match chain {
                None => {
                    let col = tape.slice_cols(w, wrt_index, 1);
                    let row = tape.transpose(col);
                    tape.broadcast_rows(row, rows)
                }
                Some(c) => tape.linear(c, w, None),
            };
            let scaled = match layer.activation {
                Activation::Identity => lin,
                Activation::LeakyRelu { slope } => {
                    let d = tape.leaky_relu_grad(pre, slope);
                    tape.mul(d, lin)
                }
                Activation::Relu => {
                    let d = tape.leaky_relu_grad(pre, 0.0);
                    tape.mul(d, lin)
                }
            };
            chain = Some(scaled);
            h = match layer.activation {
                Activation::LeakyRelu { slope } => tape.leaky_relu(pre, slope),
                Activation::Relu => tape.leaky_relu(pre, 0.0),
                Activation::Identity => pre,
            };
        }
        Ok(chain.expect("at least one layer"))
    }
}

/// Forward pass through a stack of layers ([`Mlp::forward`] on a borrowed
/// layer list): the free-function form used where no `Mlp` value exists.
pub fn forward_mlp(layers: &[DenseLayer], input: &Tensor) -> Result<Tensor> {
    Mlp { layers: layers.to_vec() }.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn single_layer_identity_forward() {
        // weights=[[2]], bias=[1], input=[3] → [7]
        let layer = DenseLayer::new(
            Tensor::new(vec![1, 1], vec![2.0]),
            Tensor::new(vec![1], vec![1.0]),
            Activation::Identity,
        );
        let out = forward_mlp(&[layer], &Tensor::new(vec![1, 1], vec![3.0])).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn leaky_relu_negative_input() {
        assert_eq!(Activation::LeakyRelu { slope: 0.01 }.apply(-1.0), -0.01);
    }

    #[test]
    fn hidden_stack_output_shape() {
        // 3 hidden layers of 128 on input (64, 30) → (64, 3)
        let mut rng = stream_rng(7, 0);
        let mlp = Mlp::init(&mut rng, &[30, 128, 128, 128, 3], Activation::leaky_default());
        let input = Tensor::zeros(vec![64, 30]);
        let out = mlp.forward(&input).unwrap();
        assert_eq!(out.shape(), &[64, 3]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = stream_rng(7, 1);
        let mlp = Mlp::init(&mut rng, &[4, 8, 2], Activation::leaky_default());
        let err = mlp.forward(&Tensor::zeros(vec![3, 5])).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn jacobian_diag_identity_network() {
        // Identity weights, identity activation → derivative 1.
        let layer = DenseLayer::new(
            Tensor::new(vec![1, 1], vec![1.0]),
            Tensor::new(vec![1], vec![0.0]),
            Activation::Identity,
        );
        let mlp = Mlp { layers: vec![layer] };
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![0.37]));
        let d = mlp.record_jacobian_diag(&mut tape, &vars, x, 0).unwrap();
        assert_eq!(tape.value(d).scalar_value(), 1.0);
    }

    #[test]
    fn jacobian_diag_single_layer_reads_weight() {
        // weights=[[a,b]] with scalar output, wrt 0 → a.
        let layer = DenseLayer::new(
            Tensor::new(vec![1, 2], vec![3.5, -2.0]),
            Tensor::new(vec![1], vec![0.1]),
            Activation::Identity,
        );
        let mlp = Mlp { layers: vec![layer] };
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.2, 0.4]));
        let d = mlp.record_jacobian_diag(&mut tape, &vars, x, 0).unwrap();
        assert_eq!(tape.value(d).scalar_value(), 3.5);
    }

    #[test]
    fn jacobian_diag_rejects_vector_output() {
        let mut rng = stream_rng(7, 2);
        let mlp = Mlp::init(&mut rng, &[2, 4, 2], Activation::leaky_default());
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(vec![1, 2]));
        assert!(mlp.record_jacobian_diag(&mut tape, &vars, x, 0).is_err());
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let mut rng = stream_rng(7, 3);
        let mlp = Mlp::init(&mut rng, &[5, 16, 16, 3], Activation::leaky_default());
        let input = Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64) * 0.1 - 1.0).collect());
        let plain = mlp.forward(&input).unwrap();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let x = tape.leaf(input);
        let y = mlp.record(&mut tape, &vars, x);
        assert_eq!(tape.value(y), &plain);
    }
}
