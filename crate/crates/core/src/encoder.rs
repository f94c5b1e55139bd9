//! Small per-view convolutional encoder producing `h × w × c` feature grids.
//!
//! Each branch is a stack of `k × k` convolutions with ReLU, an optional
//! average pool, and a linear 1×1 channel-reduction convolution. Ground and
//! aerial branches have separate weights.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::params::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ground,
    Aerial,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Ground => "ground",
            Branch::Aerial => "aerial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionInit {
    Glorot,
    /// Identity weights; needs the last conv width to equal `feature_channels`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: Vec<ConvLayer>,
    pub feature_channels: usize,
    /// Spatial average-pool factor applied before the reduction (1 = none).
    pub spatial_pool: usize,
    pub reduction_init: ReductionInit,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                ConvLayer {
                    kernel: 3,
                    stride: 2,
                    out_channels: 8,
                },
                ConvLayer {
                    kernel: 3,
                    stride: 2,
                    out_channels: 16,
                },
            ],
            feature_channels: 16,
            spatial_pool: 1,
            reduction_init: ReductionInit::Glorot,
        }
    }
}

impl EncoderConfig {
    /// No conv layers and an identity reduction: `encode(g) = g`.
    pub fn identity(channels: usize) -> Self {
        Self {
            layers: Vec::new(),
            feature_channels: channels,
            spatial_pool: 1,
            reduction_init: ReductionInit::Identity,
        }
    }

    /// Feature grid shape produced from an input of `input_shape`.
    pub fn output_shape(&self, input_shape: [usize; 3]) -> Result<[usize; 3]> {
        let [mut h, mut w, mut c] = input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kernel % 2 == 0 || layer.stride == 0 || layer.out_channels == 0 {
                return Err(Error::Config(format!("encoder layer {i} is invalid: {layer:?}")));
            }
            if h % layer.stride != 0 || w % layer.stride != 0 {
                return Err(Error::Config(format!(
                    "encoder layer {i}: {h}×{w} not divisible by stride {}",
                    layer.stride
                )));
            }
            h /= layer.stride;
            w /= layer.stride;
            c = layer.out_channels;
        }
        if self.spatial_pool == 0 || h % self.spatial_pool != 0 || w % self.spatial_pool != 0 {
            return Err(Error::Config(format!(
                "spatial_pool {} does not divide {h}×{w}",
                self.spatial_pool
            )));
        }
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        if self.reduction_init == ReductionInit::Identity && c != self.feature_channels {
            return Err(Error::Config(format!(
                "identity reduction needs {c} feature channels, configured {}",
                self.feature_channels
            )));
        }
        Ok([h / self.spatial_pool, w / self.spatial_pool, self.feature_channels])
    }

    /// Adds freshly initialized weights for `branch` to `store`. Biases start at zero.
    pub fn init_params<R: Rng>(&self, branch: Branch, input_channels: usize, rng: &mut R, store: &mut ParamStore) {
        let p = branch.prefix();
        let mut c = input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            let k = layer.kernel;
            let co = layer.out_channels;
            store.insert(
                format!("{p}.conv{i}.weight"),
                glorot_uniform(rng, vec![k, k, c, co], k * k * c, k * k * co),
            );
            store.insert(format!("{p}.conv{i}.bias"), Tensor::zeros(vec![co]));
            c = co;
        }
        let fc = self.feature_channels;
        let weight = match self.reduction_init {
            ReductionInit::Glorot => glorot_uniform(rng, vec![1, 1, c, fc], c, fc),
            ReductionInit::Identity => {
                let mut t = Tensor::zeros(vec![1, 1, c, fc]);
                for j in 0..fc.min(c) {
                    t.data_mut()[j * fc + j] = 1.0;
                }
                t
            }
        };
        store.insert(format!("{p}.reduce.weight"), weight);
        store.insert(format!("{p}.reduce.bias"), Tensor::zeros(vec![fc]));
    }

    /// Records the branch on `tape`; `input` must be an `(h, w, c)` node.
    pub fn encode<'p>(&self, tape: &mut Tape<'p>, input: Var, params: &'p ParamStore, branch: Branch) -> Result<Var> {
        let p = branch.prefix();
        let mut x = input;
        for i in 0..self.layers.len() {
            let w = tape.param(&format!("{p}.conv{i}.weight"), params.get(&format!("{p}.conv{i}.weight"))?);
            let b = tape.param(&format!("{p}.conv{i}.bias"), params.get(&format!("{p}.conv{i}.bias"))?);
            let y = tape.conv2d(x, w, b, self.layers[i].stride)?;
            x = tape.relu(y);
        }
        if self.spatial_pool > 1 {
            x = tape.avg_pool(x, self.spatial_pool)?;
        }
        let w = tape.param(&format!("{p}.reduce.weight"), params.get(&format!("{p}.reduce.weight"))?);
        let b = tape.param(&format!("{p}.reduce.bias"), params.get(&format!("{p}.reduce.bias"))?);
        tape.conv2d(x, w, b, 1)
    }

    /// Forward pass without keeping the tape.
    pub fn encode_grid(&self, input: &FeatureGrid, params: &ParamStore, branch: Branch) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let x = tape.input_borrowed(input.shape().to_vec(), input.data())?;
        let y = self.encode(&mut tape, x, params, branch)?;
        let [h, w, c] = *tape.shape(y) else { unreachable!() };
        FeatureGrid::new(h, w, c, tape.value(y).to_vec())
    }
}

/// Loads an externally computed feature grid (f32 or f64 tensor file).
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let tensor = crate::io::tensor::load_tensor(path)?;
    if tensor.shape().len() != 3 {
        return Err(Error::Format(format!(
            "feature grid file must have 3 dims, found {}",
            tensor.shape().len()
        )));
    }
    FeatureGrid::from_tensor(tensor)
}
