//! Feature transport strategies, selected by name at runtime.
//!
//! A [`TransportStrategy`] maps the encoded ground grid onto the aerial
//! layout. Strategies are looked up in a [`TransportRegistry`]; the defaults
//! are `"cvft"` (learned cost, Sinkhorn plan, transport) and `"identity"`
//! (features passed through, the no-transport baseline).

mod cost;
mod cvft;
mod identity;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sinkhorn::SinkhornConfig;

pub use cost::{generate_cost, CostGenParams, CostInit, CostPooling};
pub(crate) use cost::cost_on_tape;
pub use cvft::{cvft_forward, transport_features, CvftOutput, CvftTransport, TransportedFeatures};
pub use identity::IdentityTransport;

/// Multiplier applied to `P* f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `s = 1`.
    Unit,
    /// `s = n`, the number of spatial cells.
    Cells,
}

impl ScaleMode {
    pub fn factor(self, n: usize) -> f64 {
        match self {
            ScaleMode::Unit => 1.0,
            ScaleMode::Cells => n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    /// Registered strategy name.
    pub kind: String,
    pub cost_pooling: CostPooling,
    pub cost_init: CostInit,
    pub scale_mode: ScaleMode,
    pub sinkhorn: SinkhornConfig,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kind: "cvft".into(),
            cost_pooling: CostPooling::ChannelMean,
            cost_init: CostInit::Zero,
            scale_mode: ScaleMode::Unit,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// Output of a strategy on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TransportOutput {
    /// `(n, c)` transported ground features.
    pub features: Var,
    /// `(n, n)` plan, for strategies that compute one.
    pub plan: Option<Var>,
}

pub trait TransportStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adds this strategy's trainable tensors to `store`.
    fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore);

    /// `ground` is the encoded `(h, w, c)` ground grid.
    fn forward<'p>(&self, tape: &mut Tape<'p>, ground: Var, params: &'p ParamStore) -> Result<TransportOutput>;
}

/// Builds a strategy for a given feature-grid shape.
pub type TransportBuilder = fn(&TransportConfig, [usize; 3]) -> Result<Box<dyn TransportStrategy>>;

pub struct TransportRegistry {
    builders: IndexMap<&'static str, TransportBuilder>,
}

impl Default for TransportRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: IndexMap::new(),
        };
        r.register("cvft", |cfg, shape| Ok(Box::new(CvftTransport::new(cfg, shape)?)));
        r.register("identity", |_, shape| Ok(Box::new(IdentityTransport::new(shape))));
        r
    }
}

impl TransportRegistry {
    pub fn register(&mut self, name: &'static str, builder: TransportBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, cfg: &TransportConfig, feature_shape: [usize; 3]) -> Result<Box<dyn TransportStrategy>> {
        let builder = self.builders.get(cfg.kind.as_str()).ok_or_else(|| Error::UnknownStrategy {
            kind: "transport",
            name: cfg.kind.clone(),
            available: self.names().join(", "),
        })?;
        builder(cfg, feature_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_defaults_and_rejects_unknown() {
        let r = TransportRegistry::default();
        assert_eq!(r.names(), vec!["cvft", "identity"]);
        let cfg = TransportConfig {
            kind: "stn".into(),
            ..TransportConfig::default()
        };
        let err = r.build(&cfg, [2, 2, 1]).err().unwrap();
        assert!(matches!(err, Error::UnknownStrategy { .. }));
        assert_eq!(r.build(&TransportConfig::default(), [2, 2, 1]).unwrap().name(), "cvft");
    }

    #[test]
    fn config_json_uses_kebab_case() {
        let json = serde_json::to_string(&TransportConfig::default()).unwrap();
        assert!(json.contains("\"channel-mean\""));
        assert!(json.contains("\"unit\""));
        assert!(json.contains("\"fixed-iterations\""));
        let back: TransportConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TransportConfig::default());
    }
}
