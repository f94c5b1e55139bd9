//! Training loop: exhaustive in-batch triplets, Adam, per-epoch validation
//! and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Dataset, Split};
use crate::metric::batch_loss_on_tape;
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::retrieval::{degrees_to_columns, evaluate_pairs, EvalOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Validation recall cut-offs logged each epoch.
    pub eval_ks: Vec<usize>,
    /// Random yaw shifts of up to this many degrees applied to ground inputs
    /// during training; 0 disables.
    pub orient_augment_degrees: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            learning_rate: 1e-5,
            batch_size: 12,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_ks: vec![1, 5, 10],
            orient_augment_degrees: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if !(0.0..=180.0).contains(&self.orient_augment_degrees) {
            return Err(Error::Config(format!(
                "orient_augment_degrees must be in [0, 180], got {}",
                self.orient_augment_degrees
            )));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be non-empty positive integers".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recall: IndexMap<usize, f64>,
}

impl EpochRecord {
    pub fn csv_header(ks: &[usize]) -> String {
        let mut s = String::from("epoch,loss");
        ks.iter().for_each(|k| s.push_str(&format!(",r{k}")));
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.loss);
        self.recall.values().for_each(|v| s.push_str(&format!(",{v}")));
        s
    }
}

/// One tape per batch position, built in parallel, returned in order.
fn forward_each<'p, F>(batch: &[usize], f: F) -> Result<Vec<(Tape<'p>, Var)>>
where
    F: Fn(usize, &mut Tape<'p>) -> Result<Var> + Sync,
{
    (0..batch.len())
        .into_par_iter()
        .map(|k| {
            let mut tape = Tape::new();
            let v = f(k, &mut tape).map_err(|e| e.at_sample(batch[k]))?;
            Ok((tape, v))
        })
        .collect()
}

/// Gradients of the mean batch loss w.r.t. every parameter, plus the loss.
/// `ground_shifts`, when given, rolls each ground input by that many columns.
pub fn batch_gradients(
    model: &Model,
    dataset: &Dataset,
    batch: &[usize],
    ground_shifts: Option<&[i64]>,
    gamma: f64,
) -> Result<(f64, IndexMap<String, Vec<f64>>)> {
    if let Some(s) = ground_shifts {
        if s.len() != batch.len() {
            return Err(Error::shape("ground shifts", &[batch.len()], &[s.len()]));
        }
    }
    let ground = forward_each(batch, |k, tape| {
        let g = &dataset.pairs[batch[k]].ground;
        let x = match ground_shifts {
            Some(s) if s[k] != 0 => {
                let shifted = g.circular_shift_width(s[k]);
                tape.input(g.shape().to_vec(), shifted.data().to_vec())?
            }
            _ => tape.input_borrowed(g.shape().to_vec(), g.data())?,
        };
        Ok(model.ground_on_tape(tape, x)?.embedding)
    })?;
    let aerial = forward_each(batch, |k, tape| {
        let a = &dataset.pairs[batch[k]].aerial;
        let x = tape.input_borrowed(a.shape().to_vec(), a.data())?;
        model.aerial_on_tape(tape, x)
    })?;

    let mut loss_tape = Tape::new();
    let leaf = |tape: &Tape<'_>, v: Var, lt: &mut Tape<'_>| lt.input(tape.shape(v).to_vec(), tape.value(v).to_vec());
    let gv = ground.iter().map(|(t, v)| leaf(t, *v, &mut loss_tape)).collect::<Result<Vec<_>>>()?;
    let av = aerial.iter().map(|(t, v)| leaf(t, *v, &mut loss_tape)).collect::<Result<Vec<_>>>()?;
    let loss = batch_loss_on_tape(&mut loss_tape, &gv, &av, gamma)?;
    let loss_value = loss_tape.value(loss)[0];
    let lg = loss_tape.backward(loss, &[1.0])?;

    let seeds: Vec<(&Tape<'_>, Var, Vec<f64>, usize)> = ground
        .iter()
        .zip(&gv)
        .chain(aerial.iter().zip(&av))
        .zip(batch.iter().chain(batch))
        .map(|(((t, v), lv), &i)| (t, *v, lg.wrt(*lv), i))
        .collect();
    let per_pair = seeds
        .par_iter()
        .map(|(t, v, seed, i)| t.backward(*v, seed).map_err(|e| e.at_sample(*i)))
        .collect::<Result<Vec<_>>>()?;

    let mut total: IndexMap<String, Vec<f64>> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
        .collect();
    for g in per_pair {
        for (name, grad) in g.params() {
            let acc = total
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss_value, total))
}

/// Training indices for one epoch, shuffled by `(seed, epoch)` and cut into
/// batches of `batch_size`; a trailing singleton is dropped.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory receiving `metrics.csv` and `checkpoint.cvft`.
    pub dir: Option<PathBuf>,
    /// Also keep `checkpoint-epochNNN.cvft` for every epoch.
    pub keep_every_epoch: bool,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cvft";
/// Parameters from the epoch with the highest validation r@K at the smallest K.
pub const BEST_CHECKPOINT_FILE: &str = "best.cvft";

fn checkpoint_bytes(model: &Model, state: &AdamState) -> Result<Vec<u8>> {
    Checkpoint {
        params: model.params().clone(),
        optimizer: Some(state.clone()),
    }
    .encode()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamState,
    /// `(epoch, recall)` of the best validation epoch, if any epoch ran with
    /// a validation split.
    pub best: Option<(usize, f64)>,
    pub best_params: Option<ParamStore>,
}

/// Trains `model` in place. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    outputs: &TrainOutputs,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.input_shape != model.config().input_shape {
        return Err(Error::shape("dataset input", &model.config().input_shape, &dataset.input_shape));
    }
    let train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training pairs is fewer than batch_size {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(model.params());
    let mut metrics = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", EpochRecord::csv_header(&cfg.eval_ks)).map_err(|e| Error::io(&path, e))?;
            write_bytes(&dir.join(CHECKPOINT_FILE), &checkpoint_bytes(model, &state)?)?;
            Some((f, path))
        }
        None => None,
    };
    let eval_opts = EvalOptions {
        ks: cfg.eval_ks.clone(),
        ..EvalOptions::default()
    };
    let (max_deg, width) = (cfg.orient_augment_degrees, dataset.input_shape[1]);
    let selection_k = cfg.eval_ks.iter().copied().min().unwrap_or(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_params = None;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(&train_idx, cfg.batch_size, seed, epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
        aug_rng.set_stream((1 << 32) + epoch as u64);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let shifts = (cfg.orient_augment_degrees > 0.0).then(|| {
                batch
                    .iter()
                    .map(|_| degrees_to_columns(aug_rng.random_range(-max_deg..=max_deg), width))
                    .collect::<Vec<_>>()
            });
            let (loss, grads) = batch_gradients(model, dataset, batch, shifts.as_deref(), cfg.gamma)?;
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            loss_sum += loss;
        }
        let recall = if val_idx.is_empty() {
            IndexMap::new()
        } else {
            evaluate_pairs(model, dataset, &val_idx, &eval_opts)?.unperturbed.r_at
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches.len() as f64,
            recall,
        };
        if let Some((f, path)) = &mut metrics {
            writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        let improved = match (rec.recall.get(&selection_k), best) {
            (Some(&r), Some((_, b))) => r > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((epoch, rec.recall[&selection_k]));
            best_params = Some(model.params().clone());
        }
        if let Some(dir) = &outputs.dir {
            let bytes = checkpoint_bytes(model, &state)?;
            write_bytes(&dir.join(CHECKPOINT_FILE), &bytes)?;
            if outputs.keep_every_epoch {
                write_bytes(&dir.join(format!("checkpoint-epoch{epoch:03}.cvft")), &bytes)?;
            }
            if improved {
                write_bytes(&dir.join(BEST_CHECKPOINT_FILE), &bytes)?;
            }
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainResult {
        history,
        optimizer: state,
        best,
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_differences, relative_error};
    use crate::encoder::{ConvLayer, EncoderConfig};
    use crate::io::{generate_synthetic, PermutationMode, SyntheticConfig};
    use crate::model::ModelConfig;
    use crate::sinkhorn::SinkhornConfig;
    use crate::transport::TransportConfig;

    fn tiny() -> (ModelConfig, Dataset) {
        let model = ModelConfig {
            input_shape: [8, 8, 2],
            encoder: EncoderConfig {
                layers: vec![ConvLayer {
                    kernel: 3,
                    stride: 2,
                    out_channels: 3,
                }],
                feature_channels: 2,
                ..EncoderConfig::default()
            },
            transport: TransportConfig {
                sinkhorn: SinkhornConfig::fixed(1.0, 3),
                ..TransportConfig::default()
            },
            ..ModelConfig::default()
        };
        let data = generate_synthetic(&SyntheticConfig {
            count: 10,
            input_shape: [8, 8, 2],
            feature_shape: [4, 4, 2],
            mode: PermutationMode::Fixed,
            val_fraction: 0.2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        (model, data)
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (cfg, data) = tiny();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let batch = [0, 3, 4];
        let (_, grads) = batch_gradients(&model, &data, &batch, Some(&[0, 1, -2]), 10.0).unwrap();
        for name in ["ground.conv0.weight", "aerial.reduce.bias", "cost.weight"] {
            let point = model.params().get(name).unwrap().data().to_vec();
            let probe: Vec<usize> = (0..point.len()).step_by(point.len().div_ceil(4)).collect();
            let sub: Vec<f64> = probe.iter().map(|&i| point[i]).collect();
            let numeric = central_differences(
                |x| {
                    let mut params = model.params().clone();
                    let t = params.get_mut(name).unwrap();
                    for (&i, &v) in probe.iter().zip(x) {
                        t.data_mut()[i] = v;
                    }
                    let m = Model::from_params(cfg.clone(), params)?;
                    Ok(batch_gradients(&m, &data, &batch, Some(&[0, 1, -2]), 10.0)?.0)
                },
                &sub,
                1e-6,
            )
            .unwrap();
            let analytic: Vec<f64> = probe.iter().map(|&i| grads[name][i]).collect();
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(relative_error(*a, *n) < 1e-4, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn epoch_batches_cover_train_once() {
        let idx: Vec<usize> = (0..25).collect();
        let b = epoch_batches(&idx, 12, 3, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![12, 12]);
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 24);
        assert_ne!(epoch_batches(&idx, 12, 3, 2), b);
        assert_eq!(epoch_batches(&idx, 12, 3, 1), b);
    }

    #[test]
    fn zero_epochs_checkpoint_is_init() {
        let (cfg, data) = tiny();
        let mut model = Model::new(cfg.clone(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            dir: Some(dir.path().to_path_buf()),
            keep_every_epoch: false,
        };
        let tc = TrainConfig {
            epochs: 0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let res = train(&mut model, &data, &tc, 2, &outputs, |_| {}).unwrap();
        assert!(res.history.is_empty() && res.best.is_none());
        assert!(!dir.path().join(BEST_CHECKPOINT_FILE).exists());
        let ck = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(&ck.params, Model::new(cfg, 2).unwrap().params());
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv, "epoch,loss,r1,r5,r10\n");
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(cfg.clone(), 1).unwrap();
            let res = train(&mut m, &data, &tc, 1, &TrainOutputs::default(), |_| {}).unwrap();
            let (be, br) = res.best.unwrap();
            let max = res.history.iter().map(|r| r.recall[&1]).fold(f64::MIN, f64::max);
            assert_eq!(br, max);
            assert_eq!(res.history.iter().position(|r| r.recall[&1] == max), Some(be - 1));
            (res.history, m.params().clone())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        let first: f64 = h1[..3].iter().map(|r| r.loss).sum();
        let last: f64 = h1[9..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn too_few_pairs() {
        let (cfg, data) = tiny();
        let mut m = Model::new(cfg, 0).unwrap();
        let tc = TrainConfig::default();
        assert!(matches!(
            train(&mut m, &data, &tc, 0, &TrainOutputs::default(), |_| {}),
            Err(Error::Config(_))
        ));
        let tc = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(tc.validate(), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn csv_shape() {
        let r = EpochRecord {
            epoch: 3,
            loss: 0.5,
            recall: [(1, 0.25), (5, 1.0)].into_iter().collect(),
        };
        assert_eq!(EpochRecord::csv_header(&[1, 5]), "epoch,loss,r1,r5");
        assert_eq!(r.csv_row(), "3,0.5,0.25,1");
    }
}
