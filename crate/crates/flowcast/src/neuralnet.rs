//! Minimal neural kernel: dense and graph-convolution layers, dropout,
//! losses, exact backpropagation and the Adam update.
//!
//! The only topology supported is the one the models need: an optional
//! graph-convolution layer followed by three dense layers, with dropout after
//! the graph layer and before the last dense layer. Gradients are derived by
//! hand for that stack; there is no general autodiff graph.

use ndarray::{azip, Array1, Array2, ArrayView2, Axis, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this floor are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    pub fn apply(self, pre: &Array1<f64>) -> Array1<f64> {
        match self {
            Activation::Tanh => pre.mapv(f64::tanh),
            Activation::Relu => pre.mapv(|z| z.max(0.0)),
            Activation::Linear => pre.clone(),
            Activation::Softmax => softmax(pre),
        }
    }

    /// Derivative with respect to the pre-activation, given both the
    /// pre-activation and the activated output.
    fn derivative(self, pre: &Array1<f64>, out: &Array1<f64>) -> Array1<f64> {
        match self {
            Activation::Tanh => out.mapv(|y| 1.0 - y * y),
            Activation::Relu => pre.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 }),
            Activation::Linear => Array1::ones(out.len()),
            // Softmax is only used jointly with cross-entropy, where the
            // combined delta has a closed form.
            Activation::Softmax => unreachable!("softmax derivative is handled with the loss"),
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Fully connected layer, `weights` stored as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn pre_activation(&self, input: &Array1<f64>) -> Result<Array1<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense layer expects input of length {}, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        Ok(self.weights.dot(input) + &self.bias)
    }

    /// `activation(weights . input + bias)`.
    pub fn forward(&self, input: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.activation.apply(&self.pre_activation(input)?))
    }
}

/// Graph-convolution layer: fixed propagation matrix, trainable `4 x 1`
/// weight, tanh activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub propagation: Array2<f64>,
    pub weight: Array2<f64>,
}

impl GcnLayer {
    /// `tanh(P . X . W)` flattened to a vector of length `num_nodes`.
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (propagated, pre) = self.propagate(features)?;
        drop(propagated);
        Ok(pre.mapv(f64::tanh))
    }

    /// Returns `P . X` and the pre-activation `(P . X) . W`.
    fn propagate(&self, features: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        if features.nrows() != self.propagation.ncols() {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows, propagation matrix expects {}",
                features.nrows(),
                self.propagation.ncols()
            )));
        }
        if features.ncols() != self.weight.nrows() {
            return Err(Error::Shape(format!(
                "feature matrix has {} columns, graph weight expects {}",
                features.ncols(),
                self.weight.nrows()
            )));
        }
        let propagated = self.propagation.dot(&features);
        let pre = propagated.dot(&self.weight).index_axis_move(Axis(1), 0);
        Ok((propagated, pre))
    }
}

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let keep_scale = 1.0 / (1.0 - rate);
    Array1::from_shape_fn(len, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Inverted dropout: while training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; at inference the input
/// passes through unchanged.
pub fn dropout(
    input: &Array1<f64>,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    Ok(input * &dropout_mask(input.len(), rate, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    AbsoluteError,
}

/// Training target for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Scalar(f64),
}

/// Cross-entropy of a probability vector at the target class (with the
/// probability floor applied) or absolute error of a scalar prediction.
pub fn compute_loss(prediction: &Array1<f64>, target: &Target, kind: LossKind) -> Result<f64> {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Class(label)) => {
            if *label >= prediction.len() {
                return Err(Error::Label {
                    label: *label,
                    classes: prediction.len(),
                });
            }
            Ok(-prediction[*label].max(PROBABILITY_FLOOR).ln())
        }
        (LossKind::AbsoluteError, Target::Scalar(value)) => {
            if prediction.len() != 1 {
                return Err(Error::Shape(format!(
                    "absolute error expects a scalar prediction, got length {}",
                    prediction.len()
                )));
            }
            Ok((prediction[0] - value).abs())
        }
        _ => Err(Error::Parameter(
            "loss kind does not match target type".to_string(),
        )),
    }
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The fixed layer stack behind every model variant.
///
/// `dense` is ordered input to output; dropout sites are after the graph
/// layer (when present) and before the last dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub gcn: Option<GcnLayer>,
    pub dense: Vec<DenseLayer>,
    pub dropout_rate: f64,
}

/// Cached intermediates of one forward pass, including the dropout masks
/// actually used, so the backward pass differentiates the same function.
pub struct ForwardTrace {
    gcn_propagated: Option<Array2<f64>>,
    gcn_out: Option<Array1<f64>>,
    mask_after_gcn: Option<Array1<f64>>,
    mask_before_last: Option<Array1<f64>>,
    dense_inputs: Vec<Array1<f64>>,
    dense_pre: Vec<Array1<f64>>,
    dense_out: Vec<Array1<f64>>,
    pub output: Array1<f64>,
}

/// Per-parameter gradients (or any other tensor set shaped like the
/// trainable parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gcn_weight: Option<Array2<f64>>,
    pub dense: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(network: &Network) -> Gradients {
        Gradients {
            gcn_weight: network
                .gcn
                .as_ref()
                .map(|g| Array2::zeros(g.weight.raw_dim())),
            dense: network
                .dense
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weights.raw_dim()),
                        Array1::zeros(l.bias.raw_dim()),
                    )
                })
                .collect(),
        }
    }

    fn is_finite(&self) -> bool {
        let dense_ok = self
            .dense
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()));
        let gcn_ok = self
            .gcn_weight
            .as_ref()
            .is_none_or(|w| w.iter().all(|v| v.is_finite()));
        dense_ok && gcn_ok
    }
}

fn outer(column: &Array1<f64>, row: &Array1<f64>) -> Array2<f64> {
    let c = column.view().insert_axis(Axis(1));
    let r = row.view().insert_axis(Axis(0));
    c.dot(&r)
}

impl Network {
    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        let gcn = self.gcn.as_ref().map_or(0, |g| g.weight.len());
        let dense: usize = self
            .dense
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        gcn + dense
    }

    /// Full forward pass. Passing a dropout RNG enables training-mode
    /// dropout; `None` runs the deterministic inference path.
    pub fn forward(
        &self,
        features: ArrayView2<f64>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array1<f64>> {
        Ok(self.forward_trace(features, dropout_rng)?.output)
    }

    /// Forward pass that caches every intermediate needed for gradients.
    pub fn forward_trace(
        &self,
        features: ArrayView2<f64>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace> {
        let mut rng = dropout_rng;
        let dropping = rng.is_some() && self.dropout_rate > 0.0;

        let (gcn_propagated, gcn_out, mask_after_gcn, mut current) = match &self.gcn {
            Some(layer) => {
                let (propagated, pre) = layer.propagate(features)?;
                let out = pre.mapv(f64::tanh);
                let mask = dropping
                    .then(|| dropout_mask(out.len(), self.dropout_rate, rng.as_mut().unwrap()));
                let next = match &mask {
                    Some(m) => &out * m,
                    None => out.clone(),
                };
                (Some(propagated), Some(out), mask, next)
            }
            None => {
                let flat = Array1::from_iter(features.iter().copied());
                (None, None, None, flat)
            }
        };

        let last = self.dense.len() - 1;
        let mut dense_inputs = Vec::with_capacity(self.dense.len());
        let mut dense_pre = Vec::with_capacity(self.dense.len());
        let mut dense_out = Vec::with_capacity(self.dense.len());
        let mut mask_before_last = None;

        for (i, layer) in self.dense.iter().enumerate() {
            if i == last && dropping {
                let mask = dropout_mask(current.len(), self.dropout_rate, rng.as_mut().unwrap());
                current = &current * &mask;
                mask_before_last = Some(mask);
            }
            let pre = layer.pre_activation(&current)?;
            let out = layer.activation.apply(&pre);
            dense_inputs.push(current);
            dense_pre.push(pre);
            dense_out.push(out.clone());
            current = out;
        }

        Ok(ForwardTrace {
            gcn_propagated,
            gcn_out,
            mask_after_gcn,
            mask_before_last,
            dense_inputs,
            dense_pre,
            output: current,
            dense_out,
        })
    }

    /// Exact gradients of the loss at the traced forward pass. The fixed
    /// propagation matrix receives no gradient.
    pub fn compute_gradients(
        &self,
        trace: &ForwardTrace,
        target: &Target,
        loss: LossKind,
    ) -> Result<Gradients> {
        let last = self.dense.len() - 1;
        if self.dense[..last]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::Parameter(
                "softmax is only supported as the output activation".to_string(),
            ));
        }
        let output_layer = &self.dense[last];

        // Delta at the last pre-activation, handled jointly with the loss.
        let mut delta = match (output_layer.activation, loss, target) {
            (Activation::Softmax, LossKind::CrossEntropy, Target::Class(label)) => {
                if *label >= trace.output.len() {
                    return Err(Error::Label {
                        label: *label,
                        classes: trace.output.len(),
                    });
                }
                let mut d = trace.output.clone();
                d[*label] -= 1.0;
                d
            }
            (Activation::Linear, LossKind::AbsoluteError, Target::Scalar(value)) => {
                Array1::from_elem(1, sign_zero(trace.output[0] - value))
            }
            _ => {
                return Err(Error::Parameter(
                    "unsupported output activation / loss pairing".to_string(),
                ))
            }
        };

        let mut dense_grads = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); self.dense.len()];
        for i in (0..=last).rev() {
            dense_grads[i] = (outer(&delta, &trace.dense_inputs[i]), delta.clone());
            let mut back = self.dense[i].weights.t().dot(&delta);
            if i == last {
                if let Some(mask) = &trace.mask_before_last {
                    back *= mask;
                }
            }
            if i > 0 {
                delta = back
                    * self.dense[i - 1]
                        .activation
                        .derivative(&trace.dense_pre[i - 1], &trace.dense_out[i - 1]);
            } else {
                delta = back;
            }
        }

        let gcn_weight = match (&self.gcn, &trace.gcn_propagated, &trace.gcn_out) {
            (Some(_), Some(propagated), Some(out)) => {
                let mut back = delta;
                if let Some(mask) = &trace.mask_after_gcn {
                    back *= mask;
                }
                let pre_delta = back * out.mapv(|y| 1.0 - y * y);
                Some(propagated.t().dot(&pre_delta).insert_axis(Axis(1)))
            }
            _ => None,
        };

        Ok(Gradients {
            gcn_weight,
            dense: dense_grads,
        })
    }
}

/// Adam hyperparameters; `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> AdamHyper {
        AdamHyper {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Gradients,
    second_moment: Gradients,
    step: u64,
    pub hyper: AdamHyper,
}

fn adam_tensor<D: Dimension>(
    theta: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    first: &mut ndarray::Array<f64, D>,
    second: &mut ndarray::Array<f64, D>,
    hyper: &AdamHyper,
    beta1_t: f64,
    beta2_t: f64,
) {
    azip!((theta in theta, &g in grad, m in first, v in second) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / (1.0 - beta1_t);
        let v_hat = *v / (1.0 - beta2_t);
        *theta -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    });
}

impl AdamState {
    pub fn new(network: &Network, hyper: AdamHyper) -> AdamState {
        AdamState {
            first_moment: Gradients::zeros_like(network),
            second_moment: Gradients::zeros_like(network),
            step: 0,
            hyper,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable tensor.
    pub fn update(&mut self, network: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let beta1_t = self.hyper.beta1.powi(self.step as i32);
        let beta2_t = self.hyper.beta2.powi(self.step as i32);

        if let (Some(layer), Some(grad), Some(m), Some(v)) = (
            network.gcn.as_mut(),
            grads.gcn_weight.as_ref(),
            self.first_moment.gcn_weight.as_mut(),
            self.second_moment.gcn_weight.as_mut(),
        ) {
            adam_tensor(&mut layer.weight, grad, m, v, &self.hyper, beta1_t, beta2_t);
        }
        for (i, layer) in network.dense.iter_mut().enumerate() {
            let (gw, gb) = &grads.dense[i];
            let (mw, mb) = &mut self.first_moment.dense[i];
            let (vw, vb) = &mut self.second_moment.dense[i];
            adam_tensor(
                &mut layer.weights,
                gw,
                mw,
                vw,
                &self.hyper,
                beta1_t,
                beta2_t,
            );
            adam_tensor(&mut layer.bias, gb, mb, vb, &self.hyper, beta1_t, beta2_t);
        }
        Ok(())
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gcn_forward_single_node() {
        let layer = GcnLayer {
            propagation: array![[1.0]],
            weight: Array2::ones((4, 1)),
        };
        let x = array![[1.0, 1.0, 1.0, 1.0]];
        let out = layer.forward(x.view()).unwrap();
        assert!((out[0] - 4f64.tanh()).abs() < 1e-12);
        assert!((out[0] - 0.99933).abs() < 1e-5);
    }

    #[test]
    fn gcn_forward_zero_weight_is_zero() {
        let layer = GcnLayer {
            propagation: array![[0.5, 0.5], [0.5, 0.5]],
            weight: Array2::zeros((4, 1)),
        };
        let x = Array2::from_elem((2, 4), 3.0);
        assert_eq!(layer.forward(x.view()).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn laplacian_annihilates_identical_rows() {
        let layer = GcnLayer {
            propagation: array![[0.5, -0.5], [-0.5, 0.5]],
            weight: Array2::ones((4, 1)),
        };
        let x = Array2::from_elem((2, 4), 1.7);
        let out = layer.forward(x.view()).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gcn_shape_mismatch_is_an_error() {
        let layer = GcnLayer {
            propagation: array![[1.0]],
            weight: Array2::ones((4, 1)),
        };
        let x = Array2::zeros((2, 4));
        assert!(matches!(layer.forward(x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_forward_examples() {
        let bias_only = DenseLayer {
            weights: Array2::zeros((2, 2)),
            bias: array![0.3, -0.4],
            activation: Activation::Linear,
        };
        assert_eq!(
            bias_only.forward(&array![5.0, 6.0]).unwrap(),
            array![0.3, -0.4]
        );

        let relu = DenseLayer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
        };
        assert_eq!(relu.forward(&array![-1.0, 2.0]).unwrap(), array![0.0, 2.0]);

        let soft = DenseLayer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Softmax,
        };
        let out = soft.forward(&array![2f64.ln(), 0.0]).unwrap();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_normalized_even_for_extreme_logits() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let logits = Array1::from_shape_fn(7, |_| (r.random::<f64>() - 0.5) * 2000.0);
            let p = softmax(&logits);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn activations_stay_in_range() {
        let pre = Array1::from_shape_fn(100, |i| (i as f64 - 50.0) * 3.0);
        assert!(Activation::Tanh
            .apply(&pre)
            .iter()
            .all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(Activation::Relu.apply(&pre).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dropout_contracts() {
        let input = Array1::ones(8);
        let mut r = rng(0);
        assert_eq!(dropout(&input, 0.0, true, &mut r).unwrap(), input);
        assert_eq!(dropout(&input, 0.9, false, &mut r).unwrap(), input);
        assert!(matches!(
            dropout(&input, 1.0, true, &mut r),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean_statistically() {
        let input = Array1::ones(10_000);
        let mut r = rng(7);
        let dropped = dropout(&input, 0.5, true, &mut r).unwrap();
        let zeros = dropped.iter().filter(|&&v| v == 0.0).count();
        let mean = dropped.sum() / dropped.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        assert!((zeros as f64 / 10_000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(
            compute_loss(&array![1.0, 0.0], &Target::Class(0), LossKind::CrossEntropy).unwrap(),
            0.0
        );
        let ce =
            compute_loss(&array![0.5, 0.5], &Target::Class(1), LossKind::CrossEntropy).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let ae = compute_loss(&array![2.0], &Target::Scalar(3.5), LossKind::AbsoluteError).unwrap();
        assert_eq!(ae, 1.5);
        assert!(matches!(
            compute_loss(&array![0.5, 0.5], &Target::Class(2), LossKind::CrossEntropy),
            Err(Error::Label { .. })
        ));
    }

    /// A three-dense-layer network with explicit parameters for tests.
    fn small_mlp(activation: Activation, out_activation: Activation, seed: u64) -> Network {
        let mut r = rng(seed);
        let dims = [(4, 3), (3, 4), (2, 3)];
        let dense = dims
            .iter()
            .enumerate()
            .map(|(i, &(out, inp))| DenseLayer {
                weights: glorot_uniform(out, inp, &mut r),
                bias: Array1::zeros(out),
                activation: if i == 2 { out_activation } else { activation },
            })
            .collect();
        Network {
            gcn: None,
            dense,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn zero_network_bias_gradient_is_softmax_minus_onehot() {
        let mut net = small_mlp(Activation::Tanh, Activation::Softmax, 0);
        for layer in &mut net.dense {
            layer.weights.fill(0.0);
        }
        let x = Array2::from_elem((3, 1), 1.0); // flattens to length 3
        let trace = net.forward_trace(x.view(), None).unwrap();
        let grads = net
            .compute_gradients(&trace, &Target::Class(1), LossKind::CrossEntropy)
            .unwrap();
        let expected = array![0.5, -0.5];
        for (g, e) in grads.dense[2].1.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn effectively_linear_model_has_sign_times_input_gradient() {
        // Identity first two layers make the stack a single linear map.
        let dense = vec![
            DenseLayer {
                weights: Array2::eye(3),
                bias: Array1::zeros(3),
                activation: Activation::Linear,
            },
            DenseLayer {
                weights: Array2::eye(3),
                bias: Array1::zeros(3),
                activation: Activation::Linear,
            },
            DenseLayer {
                weights: array![[0.2, -0.1, 0.4]],
                bias: array![0.0],
                activation: Activation::Linear,
            },
        ];
        let net = Network {
            gcn: None,
            dense,
            dropout_rate: 0.0,
        };
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, -1.0]).unwrap();
        let trace = net.forward_trace(x.view(), None).unwrap();
        let prediction = trace.output[0];
        let target = 5.0;
        let grads = net
            .compute_gradients(&trace, &Target::Scalar(target), LossKind::AbsoluteError)
            .unwrap();
        let sign = if prediction > target { 1.0 } else { -1.0 };
        let expected = array![[sign, sign * 2.0, -sign]];
        for (g, e) in grads.dense[2].0.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    /// Central finite-difference gradient of the loss with respect to every
    /// parameter, with dropout disabled.
    pub(crate) fn finite_difference_gradients(
        network: &Network,
        features: ArrayView2<f64>,
        target: &Target,
        loss: LossKind,
        step: f64,
    ) -> Gradients {
        let mut result = Gradients::zeros_like(network);
        let loss_at = |net: &Network| {
            let out = net.forward(features, None).unwrap();
            compute_loss(&out, target, loss).unwrap()
        };

        if let Some(gcn) = &network.gcn {
            let mut grad = Array2::zeros(gcn.weight.raw_dim());
            for idx in 0..grad.len() {
                let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
                let mut plus = network.clone();
                plus.gcn.as_mut().unwrap().weight[(r, c)] += step;
                let mut minus = network.clone();
                minus.gcn.as_mut().unwrap().weight[(r, c)] -= step;
                grad[(r, c)] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            }
            result.gcn_weight = Some(grad);
        }

        for layer_idx in 0..network.dense.len() {
            let (rows, cols) = network.dense[layer_idx].weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = network.clone();
                    plus.dense[layer_idx].weights[(r, c)] += step;
                    let mut minus = network.clone();
                    minus.dense[layer_idx].weights[(r, c)] -= step;
                    result.dense[layer_idx].0[(r, c)] =
                        (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
                }
            }
            for r in 0..rows {
                let mut plus = network.clone();
                plus.dense[layer_idx].bias[r] += step;
                let mut minus = network.clone();
                minus.dense[layer_idx].bias[r] -= step;
                result.dense[layer_idx].1[r] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            }
        }
        result
    }

    pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    pub(crate) fn assert_gradients_close(analytic: &Gradients, numeric: &Gradients, tol: f64) {
        if let (Some(a), Some(n)) = (&analytic.gcn_weight, &numeric.gcn_weight) {
            for (x, y) in a.iter().zip(n.iter()) {
                assert!(relative_error(*x, *y) <= tol, "gcn weight: {x} vs {y}");
            }
        }
        for ((aw, ab), (nw, nb)) in analytic.dense.iter().zip(numeric.dense.iter()) {
            for (x, y) in aw.iter().zip(nw.iter()) {
                assert!(relative_error(*x, *y) <= tol, "dense weight: {x} vs {y}");
            }
            for (x, y) in ab.iter().zip(nb.iter()) {
                assert!(relative_error(*x, *y) <= tol, "dense bias: {x} vs {y}");
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences_on_mlp() {
        for seed in 0..5 {
            let net = small_mlp(Activation::Tanh, Activation::Softmax, seed);
            let mut r = rng(seed + 100);
            let x = Array2::from_shape_fn((3, 1), |_| r.random::<f64>() * 2.0 - 1.0);
            let trace = net.forward_trace(x.view(), None).unwrap();
            let analytic = net
                .compute_gradients(&trace, &Target::Class(0), LossKind::CrossEntropy)
                .unwrap();
            let numeric = finite_difference_gradients(
                &net,
                x.view(),
                &Target::Class(0),
                LossKind::CrossEntropy,
                1e-5,
            );
            assert_gradients_close(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn hidden_softmax_is_rejected_in_backward() {
        let net = small_mlp(Activation::Softmax, Activation::Softmax, 0);
        let x = Array2::from_elem((3, 1), 0.5);
        let trace = net.forward_trace(x.view(), None).unwrap();
        assert!(matches!(
            net.compute_gradients(&trace, &Target::Class(0), LossKind::CrossEntropy),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut net = small_mlp(Activation::Tanh, Activation::Softmax, 1);
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamHyper::with_learning_rate(0.1));
        let zero = Gradients::zeros_like(&net);
        adam.update(&mut net, &zero).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_matches_hand_calculation() {
        let mut net = Network {
            gcn: None,
            dense: vec![DenseLayer {
                weights: array![[1.0]],
                bias: array![0.0],
                activation: Activation::Linear,
            }],
            dropout_rate: 0.0,
        };
        let mut adam = AdamState::new(&net, AdamHyper::with_learning_rate(0.001));
        let grads = Gradients {
            gcn_weight: None,
            dense: vec![(array![[0.5]], array![0.0])],
        };
        adam.update(&mut net, &grads).unwrap();
        let delta = net.dense[0].weights[(0, 0)] - 1.0;
        assert!((delta + 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut net = small_mlp(Activation::Relu, Activation::Linear, 2);
        let mut adam = AdamState::new(&net, AdamHyper::with_learning_rate(0.001));
        let mut grads = Gradients::zeros_like(&net);
        grads.dense[0].0[(0, 0)] = f64::NAN;
        assert!(matches!(
            adam.update(&mut net, &grads),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn adam_updates_are_deterministic() {
        let run = || {
            let mut net = small_mlp(Activation::Tanh, Activation::Softmax, 3);
            let mut adam = AdamState::new(&net, AdamHyper::with_learning_rate(0.01));
            let x = Array2::from_elem((3, 1), 0.5);
            for _ in 0..2 {
                let trace = net.forward_trace(x.view(), None).unwrap();
                let grads = net
                    .compute_gradients(&trace, &Target::Class(1), LossKind::CrossEntropy)
                    .unwrap();
                adam.update(&mut net, &grads).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_with_zero_learning_rate_freezes_parameters() {
        let mut net = small_mlp(Activation::Tanh, Activation::Softmax, 4);
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamHyper::with_learning_rate(0.0));
        let x = Array2::from_elem((3, 1), 0.5);
        let trace = net.forward_trace(x.view(), None).unwrap();
        let grads = net
            .compute_gradients(&trace, &Target::Class(0), LossKind::CrossEntropy)
            .unwrap();
        adam.update(&mut net, &grads).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn plain_gradient_descent_is_non_increasing_on_linear_model() {
        // Single effective linear layer, fixed sample, small constant step.
        let mut net = Network {
            gcn: None,
            dense: vec![DenseLayer {
                weights: array![[0.0, 0.0]],
                bias: array![0.0],
                activation: Activation::Linear,
            }],
            dropout_rate: 0.0,
        };
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 0.5]).unwrap();
        let target = Target::Scalar(5.0);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let trace = net.forward_trace(x.view(), None).unwrap();
            let loss = compute_loss(&trace.output, &target, LossKind::AbsoluteError).unwrap();
            assert!(loss <= last + 1e-12);
            last = loss;
            let grads = net
                .compute_gradients(&trace, &target, LossKind::AbsoluteError)
                .unwrap();
            for (i, layer) in net.dense.iter_mut().enumerate() {
                layer.weights.scaled_add(-0.01, &grads.dense[i].0);
                layer.bias.scaled_add(-0.01, &grads.dense[i].1);
            }
        }
        assert!(last < 5.0);
    }
}
