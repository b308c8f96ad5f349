//! Time-aware message-passing network for edge classification.
//!
//! Edges are re-embedded from their endpoint nodes at every step; nodes
//! aggregate messages from past neighbours and from future neighbours through
//! separate perceptrons. The final edge embedding (concatenated with the
//! initial one) is classified into a score in `(0, 1)`.

mod checkpoint;
mod features;
mod loss;
mod mlp;
mod network;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_VERSION};
pub use features::init_edge_features;
pub use loss::{focal_loss, focal_loss_grad, DEFAULT_GAMMA};
pub use mlp::{logistic, Linear, Mlp, OutputActivation};
pub use network::{
    activation_pattern, backward, forward, forward_observed, loss_and_gradient, EmbeddingState,
    ForwardOutput,
    GraphInput,
};
pub use train::{train, LabeledGraph, Optimizer, Schedule, TrainReport, TrainingSample};

use crate::error::{Error, Result};
use crate::model::EDGE_FEATURES;

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpnConfig {
    /// Input embedding dimension.
    pub embed_dim: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    /// Width of the single hidden layer of every perceptron.
    pub hidden: usize,
    /// Message-passing steps.
    pub steps: usize,
}

impl Default for MpnConfig {
    fn default() -> Self {
        Self {
            embed_dim: crate::model::DEFAULT_EMBED_DIM,
            node_dim: 32,
            edge_dim: 16,
            hidden: 64,
            steps: 12,
        }
    }
}

impl MpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.node_dim == 0 || self.edge_dim == 0 || self.hidden == 0 {
            return Err(Error::Validation(format!("network dimensions must be positive: {self:?}")));
        }
        if self.steps == 0 {
            return Err(Error::Validation("message-passing steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of an edge-update or message input `[h_a, h_e, h_e0, h_b]`.
    pub fn message_input(&self) -> usize {
        2 * self.node_dim + 2 * self.edge_dim
    }
}

/// Default fixed rescaling of raw edge features before the edge encoder;
/// the time gap is expressed in units of a 32-frame window.
pub const DEFAULT_FEATURE_SCALE: [f64; EDGE_FEATURES] = [1.0, 1.0, 1.0, 1.0, 1.0 / 32.0, 1.0];

/// All parameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnParams {
    pub config: MpnConfig,
    /// Fixed (untrained) per-feature multipliers applied to raw edge features.
    pub feature_scale: [f64; EDGE_FEATURES],
    /// Affine projection of node embeddings to the node state.
    pub node_encoder: Linear,
    pub edge_encoder: Mlp,
    pub edge_mlp: Mlp,
    pub past_mlp: Mlp,
    pub future_mlp: Mlp,
    pub node_mlp: Mlp,
    pub classifier: Mlp,
}

impl MpnParams {
    /// Glorot-uniform initialization under `seed`.
    pub fn init(config: MpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let id = OutputActivation::Identity;
        // Bounded state updates keep summed messages from compounding
        // across steps.
        let state = OutputActivation::Tanh;
        Ok(Self {
            config,
            feature_scale: DEFAULT_FEATURE_SCALE,
            node_encoder: Linear::glorot(c.embed_dim, c.node_dim, &mut rng),
            edge_encoder: Mlp::glorot(&[EDGE_FEATURES, c.hidden, c.edge_dim], id, &mut rng),
            edge_mlp: Mlp::glorot(&[c.message_input(), c.hidden, c.edge_dim], state, &mut rng),
            past_mlp: Mlp::glorot(&[c.message_input(), c.hidden, c.node_dim], id, &mut rng),
            future_mlp: Mlp::glorot(&[c.message_input(), c.hidden, c.node_dim], id, &mut rng),
            node_mlp: Mlp::glorot(&[2 * c.node_dim, c.hidden, c.node_dim], state, &mut rng),
            classifier: Mlp::glorot(
                &[2 * c.edge_dim, c.hidden, 1],
                OutputActivation::Logistic,
                &mut rng,
            ),
        })
    }

    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            feature_scale: self.feature_scale,
            node_encoder: Linear::zeros(self.node_encoder.n_in(), self.node_encoder.n_out()),
            edge_encoder: self.edge_encoder.zeros_like(),
            edge_mlp: self.edge_mlp.zeros_like(),
            past_mlp: self.past_mlp.zeros_like(),
            future_mlp: self.future_mlp.zeros_like(),
            node_mlp: self.node_mlp.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Named dense layers in a fixed order.
    pub fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![("node_encoder".to_string(), &self.node_encoder)];
        for (name, mlp) in self.mlps() {
            for (k, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{k}"), l));
            }
        }
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.node_encoder];
        for mlp in [
            &mut self.edge_encoder,
            &mut self.edge_mlp,
            &mut self.past_mlp,
            &mut self.future_mlp,
            &mut self.node_mlp,
            &mut self.classifier,
        ] {
            out.extend(mlp.layers.iter_mut());
        }
        out
    }

    fn mlps(&self) -> [(&'static str, &Mlp); 6] {
        [
            ("edge_encoder", &self.edge_encoder),
            ("edge_mlp", &self.edge_mlp),
            ("past_mlp", &self.past_mlp),
            ("future_mlp", &self.future_mlp),
            ("node_mlp", &self.node_mlp),
            ("classifier", &self.classifier),
        ]
    }

    /// Flat views of every trainable tensor as `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.linears() {
            out.push((
                format!("{name}.weight"),
                l.weight.shape().to_vec(),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                l.bias.shape().to_vec(),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    /// Mutable flat views in the same order as [`MpnParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.linears_mut() {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &MpnParams, alpha: f64) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Checks dimension chaining and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let dim = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{what} does not chain with {c:?}")))
            }
        };
        dim(
            self.node_encoder.n_in() == c.embed_dim && self.node_encoder.n_out() == c.node_dim,
            "node_encoder",
        )?;
        let expect = [
            ("edge_encoder", &self.edge_encoder, EDGE_FEATURES, c.edge_dim),
            ("edge_mlp", &self.edge_mlp, c.message_input(), c.edge_dim),
            ("past_mlp", &self.past_mlp, c.message_input(), c.node_dim),
            ("future_mlp", &self.future_mlp, c.message_input(), c.node_dim),
            ("node_mlp", &self.node_mlp, 2 * c.node_dim, c.node_dim),
            ("classifier", &self.classifier, 2 * c.edge_dim, 1),
        ];
        for (name, mlp, n_in, n_out) in expect {
            dim(mlp.is_chained() && mlp.n_in() == n_in && mlp.n_out() == n_out, name)?;
        }
        if self.classifier.output != OutputActivation::Logistic {
            return Err(Error::Validation("classifier must end in a logistic output".into()));
        }
        if self.feature_scale.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature scale".into()));
        }
        for (name, _, values) in self.tensors() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite entry in {name}")));
            }
        }
        Ok(())
    }

    /// Initial node state for one embedding.
    pub fn init_node_features(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.config.embed_dim {
            return Err(Error::Dimension(format!(
                "embedding has {} entries, network expects {}",
                embedding.len(),
                self.config.embed_dim
            )));
        }
        let x = ndarray::Array2::from_shape_vec((1, embedding.len()), embedding.to_vec())
            .expect("row shape");
        Ok(self.node_encoder.forward(&x).into_raw_vec_and_offset().0)
    }
}
