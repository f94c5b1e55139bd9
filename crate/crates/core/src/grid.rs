//! Feature grids and the flattening conventions shared by every module.
//!
//! The single memory order is row-major `(row, column, channel)`. Spatial cell
//! `(r, col)` of an `h × w` grid is cell index `r * w + col` once flattened.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `h × w × c` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {height}×{width}×{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::shape(
                "feature grid",
                &[height, width, channels],
                &[data.len()],
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("feature grid entry {pos}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::new(h, w, c, t.into_data()),
            _ => Err(Error::Format(format!(
                "feature grid needs 3 dims, tensor has {}",
                t.shape().len()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("grid shape is consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn flatten(&self) -> FlatFeatures {
        FlatFeatures {
            n: self.cells(),
            channels: self.channels,
            data: self.data.clone(),
        }
    }

    /// Rotates columns so that output column `j` holds input column
    /// `(j - offset) mod w`. Models a yaw change of a panorama.
    pub fn circular_shift_width(&self, offset_columns: i64) -> FeatureGrid {
        let w = self.width as i64;
        let shift = offset_columns.rem_euclid(w) as usize;
        let c = self.channels;
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.height {
            for j in 0..self.width {
                let src = (j + self.width - shift) % self.width;
                let dst_off = (r * self.width + j) * c;
                let src_off = (r * self.width + src) * c;
                data[dst_off..dst_off + c].copy_from_slice(&self.data[src_off..src_off + c]);
            }
        }
        FeatureGrid { data, ..*self }
    }

    pub fn scaled(&self, factor: f64) -> Result<FeatureGrid> {
        FeatureGrid::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// `n × c` matrix view of a grid: row `i` is spatial cell `i` in row-major scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatFeatures {
    n: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FlatFeatures {
    pub fn new(n: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * channels {
            return Err(Error::shape("flat features", &[n, channels], &[data.len()]));
        }
        Ok(Self { n, channels, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn unflatten(&self, height: usize, width: usize) -> Result<FeatureGrid> {
        if height * width != self.n {
            return Err(Error::shape("unflatten", &[self.n], &[height, width]));
        }
        FeatureGrid::new(height, width, self.channels, self.data.clone())
    }
}

/// Embedding compared by ℓ2 distance during retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    data: Vec<f64>,
    normalized: bool,
}

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

impl EmbeddingVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self {
            data,
            normalized: false,
        }
    }

    /// Wraps values already known to be unit-norm (e.g. a forward pass
    /// that ended in normalization).
    pub fn from_normalized(data: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&data);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self {
            data,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn l2_normalize(&self) -> Result<EmbeddingVector> {
        let norm = self.norm();
        if norm <= MIN_NORM {
            return Err(Error::ZeroVector { norm });
        }
        Ok(Self {
            data: self.data.iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }

    pub fn distance(&self, other: &EmbeddingVector) -> f64 {
        l2_distance(&self.data, &other.data)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, c: usize, data: Vec<f64>) -> FeatureGrid {
        FeatureGrid::new(h, w, c, data).unwrap()
    }

    #[test]
    fn flatten_single_cell() {
        let f = grid(1, 1, 1, vec![5.0]).flatten();
        assert_eq!((f.n(), f.channels()), (1, 1));
        assert_eq!(f.data(), &[5.0]);
    }

    #[test]
    fn flatten_is_row_major() {
        let f = grid(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).flatten();
        assert_eq!(f.n(), 4);
        let rows: Vec<f64> = (0..4).map(|i| f.row(i)[0]).collect();
        assert_eq!(rows, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_round_trip_8x8x64() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..8 * 8 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = grid(8, 8, 64, data);
        let f = g.flatten();
        assert_eq!((f.n(), f.channels()), (64, 64));
        assert_eq!(f.unflatten(8, 8).unwrap(), g);
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(matches!(
            FeatureGrid::new(2, 2, 1, vec![0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            FeatureGrid::new(1, 1, 1, vec![f64::NAN]),
            Err(Error::NonFiniteValue(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let v = EmbeddingVector::new(vec![3.0, 4.0]).l2_normalize().unwrap();
        assert_eq!(v.data(), &[0.6, 0.8]);
        assert!(v.is_normalized());
        let u = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).l2_normalize().unwrap();
        assert_eq!(u.data(), &[1.0, 0.0, 0.0]);
        assert!(matches!(
            EmbeddingVector::new(vec![0.0, 0.0]).l2_normalize(),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn shift_examples() {
        let g = grid(1, 4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.circular_shift_width(0), g);
        assert_eq!(g.circular_shift_width(4), g);
        assert_eq!(g.circular_shift_width(1).data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.circular_shift_width(-1).data(), &[2.0, 3.0, 4.0, 1.0]);
    }

    fn arb_grid() -> impl Strategy<Value = FeatureGrid> {
        (1usize..5, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(-10.0f64..10.0, h * w * c)
                .prop_map(move |d| FeatureGrid::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn flatten_is_bijective(g in arb_grid()) {
            prop_assert_eq!(g.flatten().unflatten(g.height(), g.width()).unwrap(), g);
        }

        #[test]
        fn shift_inverts(g in arb_grid(), a in -20i64..20) {
            prop_assert_eq!(g.circular_shift_width(a).circular_shift_width(-a), g);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let e = EmbeddingVector::new(v);
            prop_assume!(e.norm() > 1e-6);
            let once = e.l2_normalize().unwrap();
            let twice = once.l2_normalize().unwrap();
            prop_assert!((once.norm() - 1.0).abs() <= 1e-9);
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
