//! Client classifier: an MLP feature extractor `g` followed by a linear head `h`.
//!
//! Parameters live in one flat vector so the server can average them directly.
//! Each layer stores its weight matrix (`fan_in × fan_out`, row-major) followed
//! by its bias (`fan_out`). Layers are ordered: hidden layers of `g`, the head,
//! then the optional representation adapter used by the AKD baseline.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{GradTape, Matrix, NodeId};

/// Shape of the client network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Output width of a linear adapter on top of `g`, present only when the
    /// AKD baseline is trained.
    #[serde(default)]
    pub adapter_dim: Option<usize>,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn weights(&self) -> Range<usize> {
        self.weight_offset..self.bias_offset
    }

    pub fn bias(&self) -> Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }

    pub fn range(&self) -> Range<usize> {
        self.weight_offset..self.bias_offset + self.fan_out
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
            adapter_dim: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_adapter(mut self, dim: usize) -> Self {
        self.adapter_dim = Some(dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::config("model needs at least one hidden layer"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) || self.adapter_dim == Some(0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    /// Width of `g`'s output.
    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated spec")
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        let mut pairs: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        pairs.push((self.feature_dim(), self.num_classes));
        if let Some(a) = self.adapter_dim {
            pairs.push((self.feature_dim(), a));
        }
        let mut offset = 0;
        pairs
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset = slot.bias_offset + fan_out;
                slot
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().last().map_or(0, |l| l.bias_offset + l.fan_out)
    }

    /// Flat range covering the feature extractor `g`.
    pub fn extractor_range(&self) -> Range<usize> {
        let layers = self.layers();
        0..layers[self.hidden_dims.len() - 1].range().end
    }

    /// Flat range covering the classification head `h`.
    pub fn head_range(&self) -> Range<usize> {
        self.layers()[self.hidden_dims.len()].range()
    }

    /// Flat range covering the adapter, if any.
    pub fn adapter_range(&self) -> Option<Range<usize>> {
        self.adapter_dim
            .map(|_| self.layers()[self.hidden_dims.len() + 1].range())
    }
}

/// Parameters of one client network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: MlpSpec,
    flat: Vec<f64>,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `g(x)`, after the last hidden activation, unnormalized.
    pub features: Matrix,
    pub logits: Matrix,
    pub adapter: Option<Matrix>,
}

/// Gradients of a scalar loss with respect to the network outputs. Missing
/// entries are treated as zero.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: Matrix,
    pub features: Option<Matrix>,
    pub adapter: Option<Matrix>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = vec![0.0; spec.num_params()];
        for slot in spec.layers() {
            let a = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut flat[slot.weights()] {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(ModelParams {
            spec: spec.clone(),
            flat,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ModelParams {
            spec: spec.clone(),
            flat: vec![0.0; spec.num_params()],
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn flatten(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn unflatten(spec: &MlpSpec, flat: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.num_params() {
            return Err(Error::shape(
                "unflatten",
                format!("{} values, spec needs {}", flat.len(), spec.num_params()),
            ));
        }
        Ok(ModelParams {
            spec: spec.clone(),
            flat,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    fn weight(&self, slot: &LayerSlot) -> Matrix {
        Matrix::from_vec(slot.fan_in, slot.fan_out, self.flat[slot.weights()].to_vec())
            .expect("layout is consistent")
    }

    fn bias(&self, slot: &LayerSlot) -> Matrix {
        Matrix::from_vec(1, slot.fan_out, self.flat[slot.bias()].to_vec())
            .expect("layout is consistent")
    }

    /// Plain forward pass, nothing recorded.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        let mut tape = GradTape::new();
        let taped = self.forward_taped(x, &mut tape)?;
        Ok(taped.outputs(&tape))
    }

    /// Forward pass recorded on `tape`, for a later call to
    /// [`ModelParams::backward`].
    pub fn forward_taped(&self, x: &Matrix, tape: &mut GradTape) -> Result<TapedForward> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, model expects {}", x.cols(), self.spec.input_dim),
            ));
        }
        let layers = self.spec.layers();
        let hidden = self.spec.hidden_dims.len();
        let mut params = Vec::with_capacity(layers.len());
        let mut h = tape.leaf(x.clone());
        for slot in &layers[..hidden] {
            let w = tape.leaf(self.weight(slot));
            let b = tape.leaf(self.bias(slot));
            params.push((w, b));
            let z = tape.matmul(h, w)?;
            let z = tape.bias_add(z, b)?;
            h = tape.relu(z)?;
        }
        let features = h;
        let linear = |tape: &mut GradTape, slot: &LayerSlot| -> Result<(NodeId, NodeId, NodeId)> {
            let w = tape.leaf(self.weight(slot));
            let b = tape.leaf(self.bias(slot));
            let z = tape.matmul(features, w)?;
            Ok((w, b, tape.bias_add(z, b)?))
        };
        let (w, b, logits) = linear(tape, &layers[hidden])?;
        params.push((w, b));
        let adapter = match layers.get(hidden + 1) {
            Some(slot) => {
                let (w, b, out) = linear(tape, slot)?;
                params.push((w, b));
                Some(out)
            }
            None => None,
        };
        Ok(TapedForward {
            params,
            features,
            logits,
            adapter,
        })
    }

    /// Flat gradient of a scalar loss given its gradients at the outputs.
    pub fn backward(
        &self,
        tape: &GradTape,
        taped: &TapedForward,
        grads: OutputGrads,
    ) -> Result<Vec<f64>> {
        let mut seeds = vec![(taped.logits, grads.logits)];
        if let Some(g) = grads.features {
            seeds.push((taped.features, g));
        }
        match (taped.adapter, grads.adapter) {
            (Some(node), Some(g)) => seeds.push((node, g)),
            (None, Some(_)) => {
                return Err(Error::shape("backward", "adapter gradient for a model without adapter"))
            }
            _ => {}
        }
        let mut g = tape.backward_many(seeds)?;
        let mut flat = vec![0.0; self.flat.len()];
        for ((w, b), slot) in taped.params.iter().zip(self.spec.layers()) {
            if let Some(gw) = g.take(*w) {
                flat[slot.weights()].copy_from_slice(gw.as_slice());
            }
            if let Some(gb) = g.take(*b) {
                flat[slot.bias()].copy_from_slice(gb.as_slice());
            }
        }
        Ok(flat)
    }
}

/// Node handles from [`ModelParams::forward_taped`].
#[derive(Debug, Clone)]
pub struct TapedForward {
    params: Vec<(NodeId, NodeId)>,
    pub features: NodeId,
    pub logits: NodeId,
    pub adapter: Option<NodeId>,
}

impl TapedForward {
    pub fn outputs(&self, tape: &GradTape) -> ForwardOutput {
        ForwardOutput {
            features: tape.value(self.features).clone(),
            logits: tape.value(self.logits).clone(),
            adapter: self.adapter.map(|a| tape.value(a).clone()),
        }
    }
}
