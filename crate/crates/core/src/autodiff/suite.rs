//! Registry of finite-difference checks covering every differentiable op.
//!
//! Each case maps a flat point `x` to a scalar `f(x) = Σ wᵢ·outᵢ(x)` with
//! seeded probe weights `w`, and supplies the analytic gradient of `f`.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::check::{finite_difference_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use super::tape::{Tape, Var};
use crate::encoder::{ConvLayer, EncoderConfig, Branch};
use crate::error::{Error, Result};
use crate::io::{Dataset, Pair, Split};
use crate::grid::FeatureGrid;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::sinkhorn::{col_normalize, col_normalize_vjp, exp_kernel, exp_kernel_vjp, row_normalize, row_normalize_vjp, Matrix, SinkhornConfig};
use crate::tensor::Tensor;
use crate::train::batch_gradients;
use crate::transport::cost_on_tape;
use crate::transport::{CostInit, CostPooling, TransportConfig};

type Eval = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync;

pub struct GradCase {
    point: Vec<f64>,
    eval: Box<Eval>,
}

impl GradCase {
    pub fn new(point: Vec<f64>, eval: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync + 'static) -> Self {
        Self {
            point,
            eval: Box::new(eval),
        }
    }

    pub fn point(&self) -> &[f64] {
        &self.point
    }

    pub fn check(&self, op_id: &str, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        let (_, analytic) = (self.eval)(&self.point)?;
        finite_difference_check(op_id, |x| Ok((self.eval)(x)?.0), &self.point, &analytic, step, tolerance)
    }
}

#[derive(Default)]
pub struct GradCheckSuite {
    cases: IndexMap<String, GradCase>,
}

impl GradCheckSuite {
    pub fn register(&mut self, op_id: impl Into<String>, case: GradCase) {
        self.cases.insert(op_id.into(), case);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.cases.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Keeps only cases whose id contains `pattern`.
    pub fn retain_matching(&mut self, pattern: &str) {
        self.cases.retain(|k, _| k.contains(pattern));
    }

    /// Runs every case, in parallel, reports in registration order.
    pub fn run(&self, step: f64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
        let cases: Vec<_> = self.cases.iter().collect();
        cases
            .into_par_iter()
            .map(|(id, case)| case.check(id, step, tolerance))
            .collect()
    }

    pub fn run_default(&self) -> Result<Vec<GradCheckReport>> {
        self.run(DEFAULT_STEP, DEFAULT_TOLERANCE)
    }

    /// Every op the model differentiates through.
    pub fn standard(seed: u64) -> Self {
        let mut s = Self::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let c = uniform(&mut rng, 16, 0.0, 1.0);
        s.register("exp_kernel", matrix_case(c, 4, |m, w| {
            let k = exp_kernel(m, 1.0)?;
            Ok((dot(k.data(), w), exp_kernel_vjp(m, &k, 1.0, w)))
        }));
        let m = uniform(&mut rng, 16, 0.5, 1.5);
        s.register("row_normalize", matrix_case(m, 4, |m, w| {
            let (out, sums) = row_normalize(m)?;
            Ok((dot(out.data(), w), row_normalize_vjp(&out, &sums, w)))
        }));
        let m = uniform(&mut rng, 16, 0.5, 1.5);
        s.register("col_normalize", matrix_case(m, 4, |m, w| {
            let (out, sums) = col_normalize(m)?;
            Ok((dot(out.data(), w), col_normalize_vjp(&out, &sums, w)))
        }));
        for iters in [1, 5, 10] {
            for n in [2, 4, 8] {
                let c = uniform(&mut rng, n * n, 0.0, 1.0);
                s.register(
                    format!("sinkhorn_m{iters}_n{n}"),
                    tape_case(vec![vec![n, n]], c, move |t, v| t.sinkhorn(v[0], 1.0, iters)),
                );
            }
        }

        let plan = uniform(&mut rng, 16, 0.0, 0.5);
        let feats = uniform(&mut rng, 4 * 3, -1.0, 1.0);
        s.register(
            "transport_matmul",
            tape_case(vec![vec![4, 4], vec![4, 3]], [plan, feats].concat(), |t, v| t.matmul(v[0], v[1], 4.0)),
        );
        for (id, pooling) in [("cost_gen_channel_mean", CostPooling::ChannelMean), ("cost_gen_full_flatten", CostPooling::FullFlatten)] {
            s.register(id, cost_case(&mut rng, pooling));
        }

        let x = uniform(&mut rng, 4 * 4 * 2, -1.0, 1.0);
        let w = uniform(&mut rng, 3 * 3 * 2 * 3, -0.5, 0.5);
        let b = uniform(&mut rng, 3, -0.1, 0.1);
        let point = [x, w, b].concat();
        for stride in [1, 2] {
            s.register(
                format!("conv2d_stride{stride}"),
                tape_case(vec![vec![4, 4, 2], vec![3, 3, 2, 3], vec![3]], point.clone(), move |t, v| {
                    t.conv2d(v[0], v[1], v[2], stride)
                }),
            );
        }
        let x = uniform(&mut rng, 3 * 3 * 4, -1.0, 1.0);
        let w = uniform(&mut rng, 4 * 2, -0.5, 0.5);
        let b = uniform(&mut rng, 2, -0.1, 0.1);
        s.register(
            "reduction_1x1",
            tape_case(vec![vec![3, 3, 4], vec![1, 1, 4, 2], vec![2]], [x, w, b].concat(), |t, v| {
                t.conv2d(v[0], v[1], v[2], 1)
            }),
        );
        let x = away_from_zero(&mut rng, 18, 0.1);
        s.register("relu", tape_case(vec![vec![3, 3, 2]], x, |t, v| Ok(t.relu(v[0]))));
        let x = uniform(&mut rng, 4 * 4 * 2, -1.0, 1.0);
        s.register("avg_pool", tape_case(vec![vec![4, 4, 2]], x, |t, v| t.avg_pool(v[0], 2)));
        let x = uniform(&mut rng, 3 * 3 * 4, -1.0, 1.0);
        s.register("channel_mean", tape_case(vec![vec![3, 3, 4]], x, |t, v| t.channel_mean(v[0])));
        s.register("encoder_branch", encoder_case(&mut rng));

        let x = uniform(&mut rng, 6, -1.0, 1.0);
        s.register("l2_normalize", tape_case(vec![vec![6]], x, |t, v| t.l2_normalize(v[0])));
        let x = uniform(&mut rng, 10, -1.0, 1.0);
        s.register("distance", tape_case(vec![vec![5], vec![5]], x, |t, v| t.distance(v[0], v[1])));
        let d = uniform(&mut rng, 2, 0.2, 1.2);
        s.register(
            "triplet_loss",
            tape_case(vec![vec![1], vec![1]], d, |t, v| t.soft_margin_triplet(v[0], v[1], 10.0)),
        );
        let e = uniform(&mut rng, 6 * 4, -1.0, 1.0);
        s.register(
            "batch_loss",
            tape_case(vec![vec![4]; 6], e, |t, v| {
                let n: Vec<Var> = v.iter().map(|&x| t.l2_normalize(x)).collect::<Result<_>>()?;
                crate::metric::batch_loss_on_tape(t, &n[..3], &n[3..], 10.0)
            }),
        );
        s.register("end_to_end", end_to_end_case(seed));
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..1.0);
            u.signum() * (margin + u.abs())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probe weights depend only on the output length, so every evaluation of a
/// case uses the same linear functional.
fn probe(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ len as u64);
    uniform(&mut rng, len, -1.0, 1.0)
}

fn matrix_case(
    point: Vec<f64>,
    n: usize,
    f: impl Fn(&Matrix, &[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync + 'static,
) -> GradCase {
    GradCase::new(point, move |x| f(&Matrix::new(n, n, x.to_vec())?, &probe(n * n)))
}

/// Case over tape inputs of the given shapes, laid end to end in `x`.
fn tape_case(
    shapes: Vec<Vec<usize>>,
    point: Vec<f64>,
    build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    GradCase::new(point, move |x| {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let len: usize = shape.iter().product();
            vars.push(tape.input(shape.clone(), x[offset..offset + len].to_vec())?);
            offset += len;
        }
        if offset != x.len() {
            return Err(Error::shape("gradcheck point", &[offset], &[x.len()]));
        }
        let out = build(&mut tape, &vars)?;
        let w = probe(tape.value(out).len());
        let loss = tape.weighted_sum(out, w)?;
        let grads = tape.backward(loss, &[1.0])?;
        let analytic = vars.iter().flat_map(|&v| grads.wrt(v)).collect();
        Ok((tape.value(loss)[0], analytic))
    })
}

/// Gradient w.r.t. the ground grid and the cost map's weight and bias.
fn cost_case(rng: &mut ChaCha8Rng, pooling: CostPooling) -> GradCase {
    let shape = [2, 2, 3];
    let n = 4;
    let in_len = pooling.input_len(shape);
    let g = uniform(rng, 12, -1.0, 1.0);
    let w = uniform(rng, n * n * in_len, -0.5, 0.5);
    let b = uniform(rng, n * n, -0.5, 0.5);
    let point = [g, w, b].concat();
    GradCase::new(point, move |x| {
        let weight = Tensor::new(vec![n * n, in_len], x[12..12 + n * n * in_len].to_vec())?;
        let bias = Tensor::new(vec![n * n], x[12 + n * n * in_len..].to_vec())?;
        let mut tape = Tape::new();
        let gv = tape.input(shape.to_vec(), x[..12].to_vec())?;
        let c = cost_on_tape(&mut tape, gv, pooling, &weight, &bias)?;
        let loss = tape.weighted_sum(c, probe(n * n))?;
        let grads = tape.backward(loss, &[1.0])?;
        let mut analytic = grads.wrt(gv);
        for name in ["cost.weight", "cost.bias"] {
            analytic.extend_from_slice(grads.param(name).unwrap_or_default());
        }
        Ok((tape.value(loss)[0], analytic))
    })
}

fn store_from(template: &ParamStore, x: &[f64]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    let mut offset = 0;
    for (name, t) in template.iter() {
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), x[offset..offset + t.len()].to_vec())?);
        offset += t.len();
    }
    Ok(out)
}

fn flatten_store(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Conv → ReLU → conv → ReLU → pool → 1×1 reduction, w.r.t. input and weights.
fn encoder_case(rng: &mut ChaCha8Rng) -> GradCase {
    let cfg = EncoderConfig {
        layers: vec![
            ConvLayer {
                kernel: 3,
                stride: 1,
                out_channels: 3,
            },
            ConvLayer {
                kernel: 3,
                stride: 2,
                out_channels: 3,
            },
        ],
        feature_channels: 2,
        spatial_pool: 2,
        ..EncoderConfig::default()
    };
    let mut template = ParamStore::new();
    cfg.init_params(Branch::Ground, 2, rng, &mut template);
    for (_, t) in template.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let input = uniform(rng, 8 * 8 * 2, -1.0, 1.0);
    let point = [input, flatten_store(&template)].concat();
    GradCase::new(point, move |x| {
        let params = store_from(&template, &x[128..])?;
        let mut tape = Tape::new();
        let xv = tape.input(vec![8, 8, 2], x[..128].to_vec())?;
        let out = cfg.encode(&mut tape, xv, &params, Branch::Ground)?;
        let loss = tape.weighted_sum(out, probe(tape.value(out).len()))?;
        let grads = tape.backward(loss, &[1.0])?;
        let mut analytic = grads.wrt(xv);
        for name in template.names() {
            analytic.extend_from_slice(grads.param(name).unwrap_or_default());
        }
        Ok((tape.value(loss)[0], analytic))
    })
}

pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        input_shape: [8, 8, 2],
        encoder: EncoderConfig {
            layers: vec![
                ConvLayer {
                    kernel: 3,
                    stride: 2,
                    out_channels: 3,
                },
                ConvLayer {
                    kernel: 3,
                    stride: 2,
                    out_channels: 4,
                },
            ],
            feature_channels: 2,
            ..EncoderConfig::default()
        },
        transport: TransportConfig {
            cost_init: CostInit::Glorot,
            sinkhorn: SinkhornConfig::fixed(10.0, 10),
            ..TransportConfig::default()
        },
        mirror_init: false,
    }
}

/// Mean exhaustive-triplet loss of a 2-pair batch w.r.t. every model parameter.
fn end_to_end_case(seed: u64) -> GradCase {
    let cfg = end_to_end_config();
    let template = Model::new(cfg.clone(), seed).expect("valid config").params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let mut grid = || FeatureGrid::new(8, 8, 2, uniform(&mut rng, 128, -1.0, 1.0)).expect("finite");
    let pairs = (0..2)
        .map(|i| Pair {
            id: format!("p{i}"),
            ground: grid(),
            aerial: grid(),
            geo_tag: None,
            oracle_permutation: None,
            split: Split::Train,
        })
        .collect();
    let data = Dataset {
        input_shape: [8, 8, 2],
        cell_grid: [2, 2],
        pairs,
    };
    let point = flatten_store(&template);
    GradCase::new(point, move |x| {
        let model = Model::from_params(cfg.clone(), store_from(&template, x)?)?;
        let (loss, grads) = batch_gradients(&model, &data, &[0, 1], None, 10.0)?;
        let analytic = template.names().flat_map(|n| grads[n].iter().copied()).collect();
        Ok((loss, analytic))
    })
}
