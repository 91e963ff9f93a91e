//! The five model variants (four graph-convolution flavours plus the MLP
//! baseline) for the two prediction heads.

use ndarray::{Array1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfg::{propagation_matrix, Dfg, PropagationKind};
use crate::error::{Error, Result};
use crate::features::{FeatureScaling, Sample, FEATURE_DIM};
use crate::neuralnet::{
    glorot_uniform, Activation, DenseLayer, GcnLayer, LossKind, Network, Target,
};

pub const DEFAULT_HIDDEN_DIMS: (usize, usize) = (64, 32);
pub const DEFAULT_DROPOUT_RATE: f64 = 0.2;

/// Model variant: which propagation matrix feeds the graph layer, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    GcnW,
    GcnB,
    GcnLb,
    GcnLw,
    Mlp,
}

impl Variant {
    pub fn all() -> [Variant; 5] {
        [
            Variant::GcnW,
            Variant::GcnB,
            Variant::GcnLb,
            Variant::GcnLw,
            Variant::Mlp,
        ]
    }

    pub fn token(self) -> &'static str {
        match self {
            Variant::GcnW => "gcn-w",
            Variant::GcnB => "gcn-b",
            Variant::GcnLb => "gcn-lb",
            Variant::GcnLw => "gcn-lw",
            Variant::Mlp => "mlp",
        }
    }

    pub fn parse(token: &str) -> Result<Variant> {
        Variant::all()
            .into_iter()
            .find(|v| v.token() == token)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown variant `{token}` (expected gcn-w | gcn-b | gcn-lb | gcn-lw | mlp)"
                ))
            })
    }

    /// Propagation matrix kind, or `None` for the MLP.
    pub fn propagation_kind(self) -> Option<PropagationKind> {
        match self {
            Variant::GcnW => Some(PropagationKind::Weighted),
            Variant::GcnB => Some(PropagationKind::Binary),
            Variant::GcnLb => Some(PropagationKind::LaplacianBinary),
            Variant::GcnLw => Some(PropagationKind::LaplacianWeighted),
            Variant::Mlp => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Prediction head: next activity class or time until next event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    Event,
    Time,
}

impl Head {
    pub fn all() -> [Head; 2] {
        [Head::Event, Head::Time]
    }

    pub fn token(self) -> &'static str {
        match self {
            Head::Event => "event",
            Head::Time => "time",
        }
    }

    pub fn parse(token: &str) -> Result<Head> {
        Head::all()
            .into_iter()
            .find(|h| h.token() == token)
            .ok_or_else(|| Error::Usage(format!("unknown head `{token}` (expected event | time)")))
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub head: Head,
    pub num_nodes: usize,
    pub hidden_dims: (usize, usize),
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, head: Head, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            variant,
            head,
            num_nodes,
            hidden_dims: DEFAULT_HIDDEN_DIMS,
            dropout_rate: DEFAULT_DROPOUT_RATE,
        }
    }

    /// Event head classifies over the activities plus the end-of-case label.
    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Event => self.num_nodes + 1,
            Head::Time => 1,
        }
    }

    /// Graph variants feed the flattened graph-layer output to the dense
    /// stack; the MLP takes the flattened feature matrix directly.
    pub fn input_dim(&self) -> usize {
        match self.variant {
            Variant::Mlp => self.num_nodes * FEATURE_DIM,
            _ => self.num_nodes,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.head {
            Head::Event => LossKind::CrossEntropy,
            Head::Time => LossKind::AbsoluteError,
        }
    }
}

/// A configured (possibly untrained) predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
}

/// Wires the layer stack for a variant/head pair and initializes parameters
/// from the seed. Graph variants require a mined graph; the MLP ignores one.
pub fn build_model(config: &ModelConfig, dfg: Option<&Dfg>, seed: u64) -> Result<Model> {
    if config.num_nodes == 0 || config.hidden_dims.0 == 0 || config.hidden_dims.1 == 0 {
        return Err(Error::Parameter(format!(
            "model needs at least one node and nonzero hidden widths, got {} nodes and {:?}",
            config.num_nodes, config.hidden_dims
        )));
    }
    if !(0.0..1.0).contains(&config.dropout_rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must be in [0, 1), got {}",
            config.dropout_rate
        )));
    }
    let gcn = match config.variant.propagation_kind() {
        Some(kind) => {
            let dfg = dfg.ok_or_else(|| {
                Error::Parameter(format!(
                    "variant {} needs a directly-follows graph",
                    config.variant
                ))
            })?;
            if dfg.num_nodes != config.num_nodes {
                return Err(Error::Shape(format!(
                    "graph has {} nodes, model expects {}",
                    dfg.num_nodes, config.num_nodes
                )));
            }
            Some(propagation_matrix(dfg, kind)?)
        }
        None => {
            if dfg.is_some() {
                log::warn!("mlp variant ignores the supplied directly-follows graph");
            }
            None
        }
    };

    let (hidden_activation, output_activation) = match config.head {
        Head::Event => (Activation::Tanh, Activation::Softmax),
        Head::Time => (Activation::Relu, Activation::Linear),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gcn_layer = gcn.map(|p| GcnLayer {
        propagation: p.matrix,
        weight: glorot_uniform(FEATURE_DIM, 1, &mut rng),
    });

    let dims = [
        (config.hidden_dims.0, config.input_dim()),
        (config.hidden_dims.1, config.hidden_dims.0),
        (config.output_dim(), config.hidden_dims.1),
    ];
    let dense = dims
        .iter()
        .enumerate()
        .map(|(i, &(out, inp))| DenseLayer {
            weights: glorot_uniform(out, inp, &mut rng),
            bias: Array1::zeros(out),
            activation: if i == dims.len() - 1 {
                output_activation
            } else {
                hidden_activation
            },
        })
        .collect();

    Ok(Model {
        config: *config,
        network: Network {
            gcn: gcn_layer,
            dense,
            dropout_rate: config.dropout_rate,
        },
    })
}

impl Model {
    /// Probability distribution over `num_nodes + 1` classes.
    pub fn predict_event(
        &self,
        features: ArrayView2<f64>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array1<f64>> {
        if self.config.head != Head::Event {
            return Err(Error::Usage(
                "predict_event called on a time-head model".to_string(),
            ));
        }
        self.network.forward(features, dropout_rng)
    }

    /// Predicted seconds until the next event: the scaled network output
    /// multiplied by the training-mean target, clamped at zero.
    pub fn predict_time(
        &self,
        features: ArrayView2<f64>,
        scaling: &FeatureScaling,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        if self.config.head != Head::Time {
            return Err(Error::Usage(
                "predict_time called on an event-head model".to_string(),
            ));
        }
        let raw = self.network.forward(features, dropout_rng)?[0];
        Ok((raw * scaling.mean_time_target).max(0.0))
    }

    /// Training target of a sample under this head, if defined. Time-head
    /// targets are scaled by the training-mean gap; end-of-case samples have
    /// no time target.
    pub fn target_for(&self, sample: &Sample, scaling: &FeatureScaling) -> Option<Target> {
        match self.config.head {
            Head::Event => Some(Target::Class(sample.event_target)),
            Head::Time => sample
                .time_target_seconds
                .map(|t| Target::Scalar(t / scaling.mean_time_target)),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.network.num_parameters()
    }
}
