//! Two-branch model: per-view encoders, a transport strategy on the ground
//! branch, and ℓ2-normalized flattened embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{Branch, EncoderConfig};
use crate::error::{Error, Result};
use crate::grid::{EmbeddingVector, FeatureGrid};
use crate::params::ParamStore;
use crate::sinkhorn::{Matrix, TransportPlan};
use crate::transport::{TransportConfig, TransportRegistry, TransportStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(h, w, c)` of the raw grids fed to both encoders.
    pub input_shape: [usize; 3],
    pub encoder: EncoderConfig,
    pub transport: TransportConfig,
    /// Start the aerial encoder from a copy of the ground encoder's initial
    /// weights. The branches still train independently.
    pub mirror_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [32, 32, 3],
            encoder: EncoderConfig::default(),
            transport: TransportConfig::default(),
            mirror_init: true,
        }
    }
}

impl ModelConfig {
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        self.encoder.output_shape(self.input_shape)
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.feature_shape()?.iter().product())
    }
}

/// Ground-branch nodes recorded by [`Model::ground_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct GroundNodes {
    pub features: Var,
    pub transported: Var,
    pub embedding: Var,
    pub plan: Option<Var>,
}

pub struct Model {
    config: ModelConfig,
    feature_shape: [usize; 3],
    strategy: Box<dyn TransportStrategy>,
    params: ParamStore,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("strategy", &self.strategy.name())
            .field("params", &self.params.scalar_count())
            .finish()
    }
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, seed, &TransportRegistry::default())
    }

    pub fn with_registry(config: ModelConfig, seed: u64, registry: &TransportRegistry) -> Result<Self> {
        let feature_shape = config.feature_shape()?;
        let strategy = registry.build(&config.transport, feature_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let in_c = config.input_shape[2];
        config.encoder.init_params(Branch::Ground, in_c, &mut rng, &mut params);
        if config.mirror_init {
            let copies: Vec<_> = params
                .iter()
                .map(|(name, t)| (name.replacen("ground.", "aerial.", 1), t.clone()))
                .collect();
            for (name, t) in copies {
                params.insert(name, t);
            }
        } else {
            config.encoder.init_params(Branch::Aerial, in_c, &mut rng, &mut params);
        }
        strategy.init_params(&mut rng, &mut params);
        Ok(Self {
            config,
            feature_shape,
            strategy,
            params,
        })
    }

    /// Model with given parameters; names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.check_compatible(&params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn strategy_name(&self) -> &'static str {
        self.strategy.name()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.shape() != self.config.input_shape {
            return Err(Error::shape("model input", &self.config.input_shape, &grid.shape()));
        }
        Ok(())
    }

    pub fn ground_on_tape<'p>(&'p self, tape: &mut Tape<'p>, input: Var) -> Result<GroundNodes> {
        let features = self.config.encoder.encode(tape, input, &self.params, Branch::Ground)?;
        let out = self.strategy.forward(tape, features, &self.params)?;
        let len = self.feature_shape.iter().product();
        let flat = tape.reshape(out.features, vec![len])?;
        let embedding = tape.l2_normalize(flat)?;
        Ok(GroundNodes {
            features,
            transported: out.features,
            embedding,
            plan: out.plan,
        })
    }

    pub fn aerial_on_tape<'p>(&'p self, tape: &mut Tape<'p>, input: Var) -> Result<Var> {
        let features = self.config.encoder.encode(tape, input, &self.params, Branch::Aerial)?;
        let len = self.feature_shape.iter().product();
        let flat = tape.reshape(features, vec![len])?;
        tape.l2_normalize(flat)
    }

    pub fn embed_ground(&self, input: &FeatureGrid) -> Result<EmbeddingVector> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.input_borrowed(input.shape().to_vec(), input.data())?;
        let nodes = self.ground_on_tape(&mut tape, x)?;
        EmbeddingVector::from_normalized(tape.value(nodes.embedding).to_vec())
    }

    pub fn embed_aerial(&self, input: &FeatureGrid) -> Result<EmbeddingVector> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.input_borrowed(input.shape().to_vec(), input.data())?;
        let e = self.aerial_on_tape(&mut tape, x)?;
        EmbeddingVector::from_normalized(tape.value(e).to_vec())
    }

    /// Encoded ground grid after transport, plus the plan when one exists.
    pub fn transport_ground(&self, input: &FeatureGrid) -> Result<(FeatureGrid, Option<TransportPlan>)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.input_borrowed(input.shape().to_vec(), input.data())?;
        let nodes = self.ground_on_tape(&mut tape, x)?;
        let [h, w, c] = self.feature_shape;
        let grid = FeatureGrid::new(h, w, c, tape.value(nodes.transported).to_vec())?;
        let plan = match nodes.plan {
            Some(p) => {
                let n = h * w;
                let m = Matrix::new(n, n, tape.value(p).to_vec())?;
                Some(TransportPlan::from_matrix(m, self.config.transport.sinkhorn.tolerance)?)
            }
            None => None,
        };
        Ok((grid, plan))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grid(shape: [usize; 3], seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, c] = shape;
        FeatureGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_model_shapes() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.feature_shape(), [8, 8, 16]);
        assert_eq!(m.strategy_name(), "cvft");
        let x = random_grid([32, 32, 3], 2);
        let g = m.embed_ground(&x).unwrap();
        let a = m.embed_aerial(&x).unwrap();
        assert_eq!(g.dim(), 1024);
        assert!((g.norm() - 1.0).abs() < 1e-12 && (a.norm() - 1.0).abs() < 1e-12);
        let (t, plan) = m.transport_ground(&x).unwrap();
        assert_eq!(t.shape(), [8, 8, 16]);
        let plan = plan.unwrap();
        assert_eq!(plan.n(), 64);
        assert!(plan.max_residual() < 1e-6);
    }

    #[test]
    fn mirror_init_copies_values_only() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let p = m.params();
        for name in ["conv0.weight", "conv1.weight", "reduce.weight", "reduce.bias"] {
            assert_eq!(p.get(&format!("ground.{name}")).unwrap(), p.get(&format!("aerial.{name}")).unwrap());
        }
        let cfg = ModelConfig {
            mirror_init: false,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 3).unwrap();
        assert_ne!(
            m.params().get("ground.conv1.weight").unwrap(),
            m.params().get("aerial.conv1.weight").unwrap()
        );
    }

    #[test]
    fn identity_transport_has_no_cost_params() {
        let cfg = ModelConfig {
            transport: TransportConfig {
                kind: "identity".into(),
                ..TransportConfig::default()
            },
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 0).unwrap();
        assert!(m.params().get("cost.weight").is_err());
        let (_, plan) = m.transport_ground(&random_grid([32, 32, 3], 0)).unwrap();
        assert!(plan.is_none());
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::new(ModelConfig::default(), 9).unwrap();
        let b = Model::new(ModelConfig::default(), 9).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn wrong_input_shape() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        assert!(m.embed_aerial(&random_grid([16, 16, 3], 0)).is_err());
    }
}
