use rand_chacha::ChaCha8Rng;

use super::cost::{cost_on_tape, CostGenParams, CostInit, CostPooling, COST_BIAS, COST_WEIGHT};
use super::{ScaleMode, TransportConfig, TransportOutput, TransportStrategy};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{EmbeddingVector, FeatureGrid, FlatFeatures};
use crate::params::ParamStore;
use crate::sinkhorn::{sinkhorn_solve, CostMatrix, Matrix, SinkhornConfig, SinkhornMode, TransportPlan};

/// Learned cost → Sinkhorn plan → `s · P* f`.
#[derive(Debug, Clone)]
pub struct CvftTransport {
    pooling: CostPooling,
    init: CostInit,
    scale_mode: ScaleMode,
    sinkhorn: SinkhornConfig,
    grid_shape: [usize; 3],
}

impl CvftTransport {
    pub fn new(cfg: &TransportConfig, grid_shape: [usize; 3]) -> Result<Self> {
        cfg.sinkhorn.validate()?;
        Ok(Self {
            pooling: cfg.cost_pooling,
            init: cfg.cost_init,
            scale_mode: cfg.scale_mode,
            sinkhorn: cfg.sinkhorn,
            grid_shape,
        })
    }
}

/// Number of rounds to unroll: fixed, or however many a plain solve needs.
fn rounds_for(tape: &Tape<'_>, cost: Var, cfg: &SinkhornConfig) -> Result<usize> {
    match cfg.mode {
        SinkhornMode::FixedIterations => Ok(cfg.max_iterations),
        SinkhornMode::RunToTolerance => {
            let [r, c] = *tape.shape(cost) else { unreachable!() };
            let m = CostMatrix::new(r, c, tape.value(cost).to_vec())?;
            Ok(sinkhorn_solve(&m, cfg)?.iterations_run())
        }
    }
}

/// Records plan and transport for an `(h, w, c)` ground node.
fn transport_on_tape<'p>(
    tape: &mut Tape<'p>,
    ground: Var,
    cost: Var,
    cfg: &SinkhornConfig,
    scale_mode: ScaleMode,
) -> Result<TransportOutput> {
    let [h, w, c] = *tape.shape(ground) else { unreachable!() };
    let n = h * w;
    let rounds = rounds_for(tape, cost, cfg)?;
    let plan = tape.sinkhorn(cost, cfg.lambda, rounds)?;
    let flat = tape.reshape(ground, vec![n, c])?;
    let features = tape.matmul(plan, flat, scale_mode.factor(n))?;
    Ok(TransportOutput {
        features,
        plan: Some(plan),
    })
}

impl TransportStrategy for CvftTransport {
    fn name(&self) -> &'static str {
        "cvft"
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        CostGenParams::init(self.pooling, self.grid_shape, self.init, rng).into_store(store);
    }

    fn forward<'p>(&self, tape: &mut Tape<'p>, ground: Var, params: &'p ParamStore) -> Result<TransportOutput> {
        if tape.shape(ground) != self.grid_shape {
            return Err(Error::shape("cvft input", &self.grid_shape, tape.shape(ground)));
        }
        let cost = cost_on_tape(tape, ground, self.pooling, params.get(COST_WEIGHT)?, params.get(COST_BIAS)?)?;
        transport_on_tape(tape, ground, cost, &self.sinkhorn, self.scale_mode)
    }
}

/// Ground features rearranged into the aerial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportedFeatures {
    pub plan: TransportPlan,
    pub features: FlatFeatures,
    pub scale_mode: ScaleMode,
}

/// Per channel, `s · P* f` where `f` is the channel's column of `ground`.
pub fn transport_features(ground: &FlatFeatures, plan: &TransportPlan, scale_mode: ScaleMode) -> Result<TransportedFeatures> {
    let n = ground.n();
    if plan.n() != n {
        return Err(Error::shape("transport plan", &[n, n], &[plan.n(), plan.n()]));
    }
    let mut tape = Tape::new();
    let p = tape.input_borrowed(vec![n, n], plan.data())?;
    let f = tape.input_borrowed(vec![n, ground.channels()], ground.data())?;
    let out = tape.matmul(p, f, scale_mode.factor(n))?;
    Ok(TransportedFeatures {
        plan: plan.clone(),
        features: FlatFeatures::new(n, ground.channels(), tape.value(out).to_vec())?,
        scale_mode,
    })
}

#[derive(Debug, Clone)]
pub struct CvftOutput {
    pub ground_embedding: EmbeddingVector,
    pub aerial_embedding: EmbeddingVector,
    pub plan: TransportPlan,
}

/// Cost generation, Sinkhorn, and transport on already-encoded grids,
/// followed by ℓ2 normalization of both views.
pub fn cvft_forward(
    ground: &FeatureGrid,
    aerial: &FeatureGrid,
    params: &CostGenParams,
    sinkhorn: &SinkhornConfig,
    scale_mode: ScaleMode,
) -> Result<CvftOutput> {
    if ground.shape() != aerial.shape() {
        return Err(Error::shape("cvft aerial grid", &ground.shape(), &aerial.shape()));
    }
    if ground.shape() != params.grid_shape {
        return Err(Error::shape("cvft ground grid", &params.grid_shape, &ground.shape()));
    }
    sinkhorn.validate()?;
    let n = ground.cells();
    let mut tape = Tape::new();
    let g = tape.input_borrowed(ground.shape().to_vec(), ground.data())?;
    let a = tape.input_borrowed(aerial.shape().to_vec(), aerial.data())?;
    let cost = cost_on_tape(&mut tape, g, params.pooling, &params.weight, &params.bias)?;
    let out = transport_on_tape(&mut tape, g, cost, sinkhorn, scale_mode)?;
    let plan_var = out.plan.expect("cvft always yields a plan");

    let g_vec = tape.reshape(out.features, vec![n * ground.channels()])?;
    let g_emb = tape.l2_normalize(g_vec)?;
    let a_vec = tape.reshape(a, vec![n * aerial.channels()])?;
    let a_emb = tape.l2_normalize(a_vec)?;

    let plan_matrix: Matrix = tape.sinkhorn_output(plan_var).expect("sinkhorn node").clone();
    let iterations = rounds_for(&tape, cost, sinkhorn)?;
    let plan = TransportPlan::from_matrix(plan_matrix, sinkhorn.tolerance)?.with_iterations(iterations);
    Ok(CvftOutput {
        ground_embedding: EmbeddingVector::from_normalized(tape.value(g_emb).to_vec())?,
        aerial_embedding: EmbeddingVector::from_normalized(tape.value(a_emb).to_vec())?,
        plan,
    })
}
