use rand_chacha::ChaCha8Rng;

use super::{TransportOutput, TransportStrategy};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// No transport: ground features keep their own layout.
#[derive(Debug, Clone)]
pub struct IdentityTransport {
    grid_shape: [usize; 3],
}

impl IdentityTransport {
    pub fn new(grid_shape: [usize; 3]) -> Self {
        Self { grid_shape }
    }
}

impl TransportStrategy for IdentityTransport {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn init_params(&self, _rng: &mut ChaCha8Rng, _store: &mut ParamStore) {}

    fn forward<'p>(&self, tape: &mut Tape<'p>, ground: Var, _params: &'p ParamStore) -> Result<TransportOutput> {
        if tape.shape(ground) != self.grid_shape {
            return Err(Error::shape("identity transport input", &self.grid_shape, tape.shape(ground)));
        }
        let [h, w, c] = self.grid_shape;
        let features = tape.reshape(ground, vec![h * w, c])?;
        Ok(TransportOutput { features, plan: None })
    }
}
