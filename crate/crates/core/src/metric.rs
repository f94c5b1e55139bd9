//! Weighted soft-margin triplet loss over exhaustive in-batch triplets.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{l2_distance, EmbeddingVector};

/// Exponent clamp for the soft-margin loss.
pub const LOSS_EXP_CLAMP: f64 = 700.0;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(γ (d_pos - d_neg)))`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, gamma: f64) -> f64 {
    let z = (gamma * (d_pos - d_neg)).clamp(-LOSS_EXP_CLAMP, LOSS_EXP_CLAMP);
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `∂L/∂d_pos = γ σ(γ (d_pos - d_neg))`; `∂L/∂d_neg` is its negation.
pub fn triplet_loss_grad(d_pos: f64, d_neg: f64, gamma: f64) -> f64 {
    gamma * sigmoid(gamma * (d_pos - d_neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnchorSide {
    Ground,
    Aerial,
}

/// Indices into a batch: the anchor comes from `side`, positive and
/// negative from the other view. The positive always has the anchor's index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub side: AnchorSide,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `batch_size` matching pairs; pair `i` is `(ground[i], aerial[i])`.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    ground: Vec<EmbeddingVector>,
    aerial: Vec<EmbeddingVector>,
}

impl TripletBatch {
    pub fn new(ground: Vec<EmbeddingVector>, aerial: Vec<EmbeddingVector>) -> Result<Self> {
        if ground.len() != aerial.len() {
            return Err(Error::shape("triplet batch", &[ground.len()], &[aerial.len()]));
        }
        if ground.len() < 2 {
            return Err(Error::BatchTooSmall(ground.len()));
        }
        Ok(Self { ground, aerial })
    }

    pub fn batch_size(&self) -> usize {
        self.ground.len()
    }

    pub fn ground(&self) -> &[EmbeddingVector] {
        &self.ground
    }

    pub fn aerial(&self) -> &[EmbeddingVector] {
        &self.aerial
    }
}

/// All `2·B(B−1)` triplets: ground-anchored first, then aerial-anchored,
/// each anchor-major and negative-minor.
pub fn exhaustive_triplets(batch_size: usize) -> Result<Vec<Triplet>> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let mut out = Vec::with_capacity(2 * batch_size * (batch_size - 1));
    for side in [AnchorSide::Ground, AnchorSide::Aerial] {
        for anchor in 0..batch_size {
            for negative in (0..batch_size).filter(|&n| n != anchor) {
                out.push(Triplet {
                    side,
                    anchor,
                    positive: anchor,
                    negative,
                });
            }
        }
    }
    Ok(out)
}

/// `(d_pos, d_neg)` of a triplet given `dist(i, j) = ‖ground_i − aerial_j‖`.
fn triplet_distances<T: Copy>(t: &Triplet, dist: impl Fn(usize, usize) -> T) -> (T, T) {
    match t.side {
        AnchorSide::Ground => (dist(t.anchor, t.positive), dist(t.anchor, t.negative)),
        AnchorSide::Aerial => (dist(t.positive, t.anchor), dist(t.negative, t.anchor)),
    }
}

/// Mean soft-margin loss over every exhaustive triplet.
pub fn batch_loss(batch: &TripletBatch, gamma: f64) -> Result<f64> {
    let bs = batch.batch_size();
    let d: Vec<f64> = (0..bs * bs)
        .map(|k| l2_distance(batch.ground[k / bs].data(), batch.aerial[k % bs].data()))
        .collect();
    let triplets = exhaustive_triplets(bs)?;
    let total: f64 = triplets
        .iter()
        .map(|t| {
            let (p, n) = triplet_distances(t, |i, j| d[i * bs + j]);
            triplet_loss(p, n, gamma)
        })
        .sum();
    Ok(total / triplets.len() as f64)
}

/// Records the batch loss on `tape` given embedding nodes for each view.
pub fn batch_loss_on_tape(tape: &mut Tape<'_>, ground: &[Var], aerial: &[Var], gamma: f64) -> Result<Var> {
    if ground.len() != aerial.len() {
        return Err(Error::shape("triplet batch", &[ground.len()], &[aerial.len()]));
    }
    let bs = ground.len();
    let triplets = exhaustive_triplets(bs)?;
    let mut d = Vec::with_capacity(bs * bs);
    for &g in ground {
        for &a in aerial {
            d.push(tape.distance(g, a)?);
        }
    }
    let mut losses = Vec::with_capacity(triplets.len());
    for t in &triplets {
        let (p, n) = triplet_distances(t, |i, j| d[i * bs + j]);
        losses.push(tape.soft_margin_triplet(p, n, gamma)?);
    }
    tape.mean(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::new(v).l2_normalize().unwrap()
    }

    fn random_batch(bs: usize, dim: usize, seed: u64) -> TripletBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let ground = (0..bs).map(|_| draw()).collect();
        let aerial = (0..bs).map(|_| draw()).collect();
        TripletBatch::new(ground, aerial).unwrap()
    }

    #[test]
    fn loss_spot_values() {
        for gamma in [0.5, 10.0, 100.0] {
            assert!((triplet_loss(0.3, 0.3, gamma) - std::f64::consts::LN_2).abs() <= 1e-12);
        }
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((triplet_loss(0.1, 0.2, 10.0) - expected).abs() <= 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn loss_stays_positive_at_extremes() {
        assert!(triplet_loss(0.0, 1e6, 10.0) > 0.0);
        assert!(triplet_loss(1e6, 0.0, 10.0).is_finite());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let (p, n, g) = (0.4, 0.7, 10.0);
        let h = 1e-6;
        let fd = (triplet_loss(p + h, n, g) - triplet_loss(p - h, n, g)) / (2.0 * h);
        let analytic = triplet_loss_grad(p, n, g);
        assert!((fd - analytic).abs() / analytic < 1e-7);
        let fd_neg = (triplet_loss(p, n + h, g) - triplet_loss(p, n - h, g)) / (2.0 * h);
        assert!((fd_neg + analytic).abs() / analytic < 1e-7);
        assert!(analytic > 0.0);
    }

    #[test]
    fn triplet_counts() {
        assert_eq!(exhaustive_triplets(2).unwrap().len(), 4);
        assert_eq!(exhaustive_triplets(12).unwrap().len(), 264);
        assert!(matches!(exhaustive_triplets(1), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn triplets_match_brute_force() {
        let bs = 3;
        let mut brute = BTreeSet::new();
        for side in [AnchorSide::Ground, AnchorSide::Aerial] {
            for a in 0..bs {
                for p in 0..bs {
                    for n in 0..bs {
                        if p == a && n != a {
                            brute.insert(Triplet { side, anchor: a, positive: p, negative: n });
                        }
                    }
                }
            }
        }
        let got = exhaustive_triplets(bs).unwrap();
        assert_eq!(got.len(), 12);
        let set: BTreeSet<_> = got.iter().copied().collect();
        assert_eq!(set.len(), got.len());
        assert_eq!(set, brute);
        assert_eq!(got[0], Triplet { side: AnchorSide::Ground, anchor: 0, positive: 0, negative: 1 });
        assert_eq!(got[1].negative, 2);
    }

    #[test]
    fn identical_embeddings_give_log_two() {
        let e = unit(vec![1.0, 2.0, 3.0]);
        let batch = TripletBatch::new(vec![e.clone(); 4], vec![e; 4]).unwrap();
        assert!((batch_loss(&batch, 10.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn separated_batch_loss_is_tiny() {
        let basis = |i: usize| unit((0..3).map(|k| if k == i { 1.0 } else { 0.0 }).collect());
        let batch = TripletBatch::new((0..3).map(basis).collect(), (0..3).map(basis).collect()).unwrap();
        let expected = (-10.0 * 2f64.sqrt()).exp().ln_1p();
        let got = batch_loss(&batch, 10.0).unwrap();
        assert!((got - expected).abs() < 1e-18);
        assert!((got - 7.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn two_pair_batch_matches_hand_sum() {
        let batch = random_batch(2, 5, 4);
        let (g, a) = (batch.ground(), batch.aerial());
        let d = |x: &EmbeddingVector, y: &EmbeddingVector| x.distance(y);
        let hand = (triplet_loss(d(&g[0], &a[0]), d(&g[0], &a[1]), 10.0)
            + triplet_loss(d(&g[1], &a[1]), d(&g[1], &a[0]), 10.0)
            + triplet_loss(d(&a[0], &g[0]), d(&a[0], &g[1]), 10.0)
            + triplet_loss(d(&a[1], &g[1]), d(&a[1], &g[0]), 10.0))
            / 4.0;
        assert!((batch_loss(&batch, 10.0).unwrap() - hand).abs() < 1e-15);
    }

    #[test]
    fn loss_invariant_to_pair_order() {
        let batch = random_batch(6, 8, 9);
        let order = [4, 1, 5, 0, 3, 2];
        let permuted = TripletBatch::new(
            order.iter().map(|&i| batch.ground()[i].clone()).collect(),
            order.iter().map(|&i| batch.aerial()[i].clone()).collect(),
        )
        .unwrap();
        let a = batch_loss(&batch, 10.0).unwrap();
        let b = batch_loss(&permuted, 10.0).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let batch = random_batch(4, 6, 2);
        let mut tape = Tape::new();
        let g: Vec<Var> = batch.ground().iter().map(|e| tape.input(vec![6], e.data().to_vec()).unwrap()).collect();
        let a: Vec<Var> = batch.aerial().iter().map(|e| tape.input(vec![6], e.data().to_vec()).unwrap()).collect();
        let loss = batch_loss_on_tape(&mut tape, &g, &a, 10.0).unwrap();
        assert!((tape.value(loss)[0] - batch_loss(&batch, 10.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn batch_of_one_rejected() {
        let e = unit(vec![1.0]);
        assert!(matches!(TripletBatch::new(vec![e.clone()], vec![e]), Err(Error::BatchTooSmall(1))));
    }
}
