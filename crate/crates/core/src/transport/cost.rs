use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::params::{glorot_uniform, ParamStore};
use crate::sinkhorn::CostMatrix;
use crate::tensor::Tensor;

pub(crate) const COST_WEIGHT: &str = "cost.weight";
pub(crate) const COST_BIAS: &str = "cost.bias";

/// How the ground grid is reduced before the affine cost map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostPooling {
    /// Mean over channels: `n` inputs.
    ChannelMean,
    /// Whole grid: `n·c` inputs.
    FullFlatten,
}

/// Starting point for the cost map's weight; the bias always starts at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostInit {
    /// Every sample starts from the same (uniform) plan.
    Zero,
    Glorot,
}

impl CostPooling {
    pub fn input_len(self, [h, w, c]: [usize; 3]) -> usize {
        match self {
            CostPooling::ChannelMean => h * w,
            CostPooling::FullFlatten => h * w * c,
        }
    }
}

/// Affine regression from the pooled ground grid to an `n × n` cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGenParams {
    pub pooling: CostPooling,
    pub grid_shape: [usize; 3],
    /// `(n², input_len)`
    pub weight: Tensor,
    /// `(n²)`
    pub bias: Tensor,
}

impl CostGenParams {
    pub fn zeros(pooling: CostPooling, grid_shape: [usize; 3]) -> Self {
        let n = grid_shape[0] * grid_shape[1];
        Self {
            pooling,
            grid_shape,
            weight: Tensor::zeros(vec![n * n, pooling.input_len(grid_shape)]),
            bias: Tensor::zeros(vec![n * n]),
        }
    }

    pub fn init<R: Rng>(pooling: CostPooling, grid_shape: [usize; 3], init: CostInit, rng: &mut R) -> Self {
        let zeros = Self::zeros(pooling, grid_shape);
        match init {
            CostInit::Zero => zeros,
            CostInit::Glorot => {
                let n = grid_shape[0] * grid_shape[1];
                let fan_in = pooling.input_len(grid_shape);
                Self {
                    weight: glorot_uniform(rng, vec![n * n, fan_in], fan_in, n * n),
                    ..zeros
                }
            }
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_shape[0] * self.grid_shape[1]
    }

    pub fn into_store(self, store: &mut ParamStore) {
        store.insert(COST_WEIGHT, self.weight);
        store.insert(COST_BIAS, self.bias);
    }

    pub fn from_store(store: &ParamStore, pooling: CostPooling, grid_shape: [usize; 3]) -> Result<Self> {
        let expected = Self::zeros(pooling, grid_shape);
        let weight = store.get(COST_WEIGHT)?.clone();
        let bias = store.get(COST_BIAS)?.clone();
        if weight.shape() != expected.weight.shape() {
            return Err(Error::shape(COST_WEIGHT, expected.weight.shape(), weight.shape()));
        }
        if bias.shape() != expected.bias.shape() {
            return Err(Error::shape(COST_BIAS, expected.bias.shape(), bias.shape()));
        }
        Ok(Self {
            weight,
            bias,
            ..expected
        })
    }
}

/// Records cost generation for an `(h, w, c)` ground node; returns `(n, n)`.
pub(crate) fn cost_on_tape<'p>(
    tape: &mut Tape<'p>,
    ground: Var,
    pooling: CostPooling,
    weight: &'p Tensor,
    bias: &'p Tensor,
) -> Result<Var> {
    let [h, w, _] = *tape.shape(ground) else {
        return Err(Error::shape("cost generation input", &[0, 0, 0], tape.shape(ground)));
    };
    let n = h * w;
    let pooled = match pooling {
        CostPooling::ChannelMean => tape.channel_mean(ground)?,
        CostPooling::FullFlatten => {
            let len = tape.value(ground).len();
            tape.reshape(ground, vec![len])?
        }
    };
    let wv = tape.param(COST_WEIGHT, weight);
    let bv = tape.param(COST_BIAS, bias);
    let flat = tape.affine(pooled, wv, bv)?;
    tape.reshape(flat, vec![n, n])
}

/// Cost matrix for `ground` under `params`.
pub fn generate_cost(ground: &FeatureGrid, params: &CostGenParams) -> Result<CostMatrix> {
    if ground.shape() != params.grid_shape {
        return Err(Error::shape("cost generation input", &params.grid_shape, &ground.shape()));
    }
    let mut tape = Tape::new();
    let g = tape.input_borrowed(ground.shape().to_vec(), ground.data())?;
    let c = cost_on_tape(&mut tape, g, params.pooling, &params.weight, &params.bias)?;
    let n = params.cells();
    CostMatrix::new(n, n, tape.value(c).to_vec())
}
