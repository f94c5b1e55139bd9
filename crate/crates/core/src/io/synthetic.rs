//! Seeded cross-view toy data: each ground grid is a block permutation of
//! its aerial grid plus bounded Gaussian noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{validate_permutation, Dataset, Pair, Split};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationMode {
    /// One random permutation shared by every pair.
    Fixed,
    /// A fresh permutation per pair.
    PerPair,
    /// No rearrangement.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub input_shape: [usize; 3],
    /// Only `(h, w)` matter: they fix the block grid being permuted.
    pub feature_shape: [usize; 3],
    pub noise_sigma: f64,
    pub seed: u64,
    pub mode: PermutationMode,
    pub val_fraction: f64,
    pub geo_spacing_m: f64,
    pub geo_jitter_m: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 200,
            input_shape: [32, 32, 3],
            feature_shape: [8, 8, 16],
            noise_sigma: 0.05,
            seed: 0,
            mode: PermutationMode::Fixed,
            val_fraction: 0.1,
            geo_spacing_m: 100.0,
            geo_jitter_m: 20.0,
        }
    }
}

impl SyntheticConfig {
    pub fn cell_grid(&self) -> [usize; 2] {
        [self.feature_shape[0], self.feature_shape[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input_shape;
        let [ch, cw] = self.cell_grid();
        if h == 0 || w == 0 || c == 0 || ch == 0 || cw == 0 {
            return Err(Error::Config("synthetic shapes must be positive".into()));
        }
        if h % ch != 0 || w % cw != 0 {
            return Err(Error::Config(format!("feature grid {ch}×{cw} does not tile input {h}×{w}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if !(self.geo_jitter_m >= 0.0 && self.geo_spacing_m - 2.0 * self.geo_jitter_m > 50.0) {
            return Err(Error::Config(format!(
                "geo spacing {} m with jitter {} m cannot keep tags 50 m apart",
                self.geo_spacing_m, self.geo_jitter_m
            )));
        }
        Ok(())
    }
}

/// Output block `j` is input block `perm[j]`, blocks laid out row-major on
/// a `cell_grid` tiling of the grid.
pub fn permute_cells(grid: &FeatureGrid, perm: &[usize], cell_grid: [usize; 2]) -> Result<FeatureGrid> {
    let [h, w, c] = grid.shape();
    let [ch, cw] = cell_grid;
    if ch == 0 || cw == 0 || h % ch != 0 || w % cw != 0 {
        return Err(Error::Config(format!("cell grid {ch}×{cw} does not tile {h}×{w}")));
    }
    validate_permutation(perm, ch * cw)?;
    let (bh, bw) = (h / ch, w / cw);
    let src = grid.data();
    let mut out = vec![0.0; src.len()];
    for (j, &p) in perm.iter().enumerate() {
        let (dr, dc) = (j / cw * bh, j % cw * bw);
        let (sr, sc) = (p / cw * bh, p % cw * bw);
        for r in 0..bh {
            let d = ((dr + r) * w + dc) * c;
            let s = ((sr + r) * w + sc) * c;
            out[d..d + bw * c].copy_from_slice(&src[s..s + bw * c]);
        }
    }
    FeatureGrid::new(h, w, c, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 4.0 {
            return z;
        }
    }
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [h, w, c] = cfg.input_shape;
    let cells = cfg.cell_grid()[0] * cfg.cell_grid()[1];
    let fixed = match cfg.mode {
        PermutationMode::Fixed => Some(random_permutation(&mut rng, cells)),
        PermutationMode::Identity => Some((0..cells).collect()),
        PermutationMode::PerPair => None,
    };
    let cols = (cfg.count as f64).sqrt().ceil().max(1.0) as usize;
    let mut pairs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let aerial_data: Vec<f64> = (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect();
        let aerial = FeatureGrid::new(h, w, c, aerial_data)?;
        let perm = fixed.clone().unwrap_or_else(|| random_permutation(&mut rng, cells));
        let clean = permute_cells(&aerial, &perm, cfg.cell_grid())?;
        let ground_data = clean
            .data()
            .iter()
            .map(|&v| v + cfg.noise_sigma * truncated_normal(&mut rng))
            .collect();
        let ground = FeatureGrid::new(h, w, c, ground_data)?;
        let jitter = |rng: &mut ChaCha8Rng| {
            if cfg.geo_jitter_m > 0.0 {
                rng.random_range(-cfg.geo_jitter_m..=cfg.geo_jitter_m)
            } else {
                0.0
            }
        };
        let x = (i % cols) as f64 * cfg.geo_spacing_m + jitter(&mut rng);
        let y = (i / cols) as f64 * cfg.geo_spacing_m + jitter(&mut rng);
        pairs.push(Pair {
            id: format!("pair-{i:05}"),
            ground,
            aerial,
            geo_tag: Some([x, y]),
            oracle_permutation: Some(perm),
            split: Split::Train,
        });
    }
    let val_count = (cfg.count as f64 * cfg.val_fraction).round() as usize;
    let order = random_permutation(&mut rng, cfg.count);
    for &i in &order[..val_count] {
        pairs[i].split = Split::Val;
    }
    Ok(Dataset {
        input_shape: cfg.input_shape,
        cell_grid: cfg.cell_grid(),
        pairs,
    })
}
