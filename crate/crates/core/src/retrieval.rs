//! Retrieval metrics: r@K, r@top-1%, geo-localization recall and the
//! orientation-noise sweep.
//!
//! Ties are pessimistic: a gallery item at exactly the true match's
//! distance ranks ahead of it.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{EmbeddingVector, FeatureGrid};
use crate::io::Dataset;
use crate::model::Model;

#[derive(Debug, Clone)]
pub struct GalleryIndex {
    embeddings: Vec<EmbeddingVector>,
    geo_tags: Option<Vec<[f64; 2]>>,
}

impl GalleryIndex {
    pub fn new(embeddings: Vec<EmbeddingVector>, geo_tags: Option<Vec<[f64; 2]>>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Config("gallery must hold at least one embedding".into()));
        }
        let dim = embeddings[0].dim();
        for (i, e) in embeddings.iter().enumerate() {
            if e.dim() != dim {
                return Err(Error::shape(format!("gallery embedding {i}"), &[dim], &[e.dim()]));
            }
            if !e.is_normalized() {
                return Err(Error::Domain(format!("gallery embedding {i} is not normalized")));
            }
        }
        if let Some(tags) = &geo_tags {
            if tags.len() != embeddings.len() {
                return Err(Error::shape("gallery geo tags", &[embeddings.len()], &[tags.len()]));
            }
        }
        Ok(Self { embeddings, geo_tags })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &EmbeddingVector {
        &self.embeddings[i]
    }

    pub fn geo_tags(&self) -> Option<&[[f64; 2]]> {
        self.geo_tags.as_deref()
    }

    pub fn distances(&self, query: &EmbeddingVector) -> Vec<f64> {
        self.embeddings.iter().map(|e| query.distance(e)).collect()
    }

    /// Gallery indices ordered by `(distance, index)`.
    pub fn ranked(&self, query: &EmbeddingVector) -> Vec<usize> {
        let d = self.distances(query);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        order
    }
}

/// `1 + #{j ≠ t : d_j ≤ d_t}`.
pub fn rank_of_match(query: &EmbeddingVector, gallery: &GalleryIndex, true_index: usize) -> Result<usize> {
    if true_index >= gallery.len() {
        return Err(Error::IndexOutOfRange {
            index: true_index,
            len: gallery.len(),
        });
    }
    let d = gallery.distances(query);
    let dt = d[true_index];
    Ok(1 + d.iter().enumerate().filter(|&(j, &dj)| j != true_index && dj <= dt).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub queries: usize,
    pub gallery_size: usize,
    pub r_at: IndexMap<usize, f64>,
    pub top1_percent_k: usize,
    pub top1_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_recall_at: Option<IndexMap<usize, f64>>,
}

impl RecallReport {
    pub fn r1(&self) -> Option<f64> {
        self.r_at.get(&1).copied()
    }

    pub fn csv_header() -> &'static str {
        "condition,metric,k,value"
    }

    pub fn csv_rows(&self, condition: &str) -> Vec<String> {
        let mut rows: Vec<String> = self
            .r_at
            .iter()
            .map(|(k, v)| format!("{condition},r_at,{k},{v}"))
            .collect();
        rows.push(format!("{condition},top1_percent,{},{}", self.top1_percent_k, self.top1_percent));
        if let Some(geo) = &self.geo_recall_at {
            rows.extend(geo.iter().map(|(k, v)| format!("{condition},geo_recall_at,{k},{v}")));
        }
        rows
    }
}

pub fn top1_percent_k(gallery_size: usize) -> usize {
    gallery_size.div_ceil(100).max(1)
}

pub fn recall_at_k(ranks: &[usize], ks: &[usize], gallery_size: usize) -> Result<RecallReport> {
    if ranks.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::Domain(format!("rank {bad} is not 1-based")));
    }
    if ks.contains(&0) {
        return Err(Error::Config("K must be ≥ 1".into()));
    }
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
    let k1 = top1_percent_k(gallery_size);
    Ok(RecallReport {
        queries: ranks.len(),
        gallery_size,
        r_at: ks.iter().map(|&k| (k, frac(k))).collect(),
        top1_percent_k: k1,
        top1_percent: frac(k1),
        geo_recall_at: None,
    })
}

pub fn euclidean(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Fraction of queries with a top-K retrieval tagged within `d_meters`.
pub fn geo_recall(
    query_tags: &[[f64; 2]],
    gallery: &GalleryIndex,
    top_k_lists: &[Vec<usize>],
    d_meters: f64,
    ks: &[usize],
) -> Result<IndexMap<usize, f64>> {
    let tags = gallery
        .geo_tags()
        .ok_or_else(|| Error::MissingGeoTags("gallery".into()))?;
    if query_tags.len() != top_k_lists.len() {
        return Err(Error::shape("geo recall queries", &[top_k_lists.len()], &[query_tags.len()]));
    }
    if query_tags.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut out = IndexMap::new();
    for &k in ks {
        let mut hits = 0;
        for (q, list) in query_tags.iter().zip(top_k_lists) {
            let mut hit = false;
            for &g in list.iter().take(k) {
                let t = *tags.get(g).ok_or(Error::IndexOutOfRange {
                    index: g,
                    len: tags.len(),
                })?;
                if euclidean(*q, t) <= d_meters {
                    hit = true;
                    break;
                }
            }
            hits += hit as usize;
        }
        out.insert(k, hits as f64 / query_tags.len() as f64);
    }
    Ok(out)
}

/// Nearest whole-column shift for a yaw offset, halves rounded away from zero.
pub fn degrees_to_columns(degrees: f64, width: usize) -> i64 {
    (degrees / 360.0 * width as f64).round() as i64
}

/// Per-query column shifts for offsets drawn uniformly in `[-max, max]` degrees.
pub fn orientation_shifts(queries: usize, max_degrees: f64, width: usize, seed: u64) -> Vec<i64> {
    if max_degrees == 0.0 {
        return vec![0; queries];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..queries)
        .map(|_| degrees_to_columns(rng.random_range(-max_degrees..=max_degrees), width))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub geo_d_meters: f64,
    /// Orientation noise in degrees; 0 skips the perturbed pass.
    pub orient_noise_degrees: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            geo_d_meters: 25.0,
            orient_noise_degrees: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub unperturbed: RecallReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<RecallReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orient_noise_degrees: Option<f64>,
}

fn embed_all(model: &Model, grids: &[&FeatureGrid], ground: bool) -> Result<Vec<EmbeddingVector>> {
    grids
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            if ground {
                model.embed_ground(g)
            } else {
                model.embed_aerial(g)
            }
            .map_err(|e| e.at_sample(i))
        })
        .collect()
}

fn report_for(
    queries: &[EmbeddingVector],
    gallery: &GalleryIndex,
    query_tags: Option<&[[f64; 2]]>,
    opts: &EvalOptions,
) -> Result<RecallReport> {
    let ranks = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| rank_of_match(q, gallery, i))
        .collect::<Result<Vec<_>>>()?;
    let mut report = recall_at_k(&ranks, &opts.ks, gallery.len())?;
    if let Some(tags) = query_tags {
        let kmax = opts.ks.iter().copied().max().unwrap_or(1);
        let lists: Vec<Vec<usize>> = queries
            .par_iter()
            .map(|q| gallery.ranked(q).into_iter().take(kmax).collect())
            .collect();
        report.geo_recall_at = Some(geo_recall(tags, gallery, &lists, opts.geo_d_meters, &opts.ks)?);
    }
    Ok(report)
}

/// Ground queries against the aerial gallery of the same pairs, pair `i`'s
/// true match being gallery item `i`. Geo recall is reported when every
/// selected pair is tagged.
pub fn evaluate_pairs(model: &Model, dataset: &Dataset, indices: &[usize], opts: &EvalOptions) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let ground: Vec<&FeatureGrid> = indices.iter().map(|&i| &dataset.pairs[i].ground).collect();
    let aerial: Vec<&FeatureGrid> = indices.iter().map(|&i| &dataset.pairs[i].aerial).collect();
    let tags = dataset.geo_tags(indices).ok();
    let gallery = GalleryIndex::new(embed_all(model, &aerial, false)?, tags.clone())?;
    let queries = embed_all(model, &ground, true)?;
    let unperturbed = report_for(&queries, &gallery, tags.as_deref(), opts)?;
    let perturbed = if opts.orient_noise_degrees > 0.0 {
        let shifts = orientation_shifts(
            indices.len(),
            opts.orient_noise_degrees,
            dataset.input_shape[1],
            opts.seed,
        );
        let shifted: Vec<FeatureGrid> = ground
            .iter()
            .zip(&shifts)
            .map(|(g, &s)| g.circular_shift_width(s))
            .collect();
        let shifted_refs: Vec<&FeatureGrid> = shifted.iter().collect();
        let q = embed_all(model, &shifted_refs, true)?;
        Some(report_for(&q, &gallery, tags.as_deref(), opts)?)
    } else {
        None
    };
    Ok(Evaluation {
        unperturbed,
        orient_noise_degrees: perturbed.as_ref().map(|_| opts.orient_noise_degrees),
        perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::new(v).l2_normalize().unwrap()
    }

    fn random_units(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| unit((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
            .collect()
    }

    #[test]
    fn single_item_gallery() {
        let g = GalleryIndex::new(vec![unit(vec![1.0, 0.0])], None).unwrap();
        assert_eq!(rank_of_match(&unit(vec![0.0, 1.0]), &g, 0).unwrap(), 1);
    }

    #[test]
    fn exact_match_among_orthogonal() {
        let items: Vec<_> = (0..4)
            .map(|i| unit((0..4).map(|j| (i == j) as u8 as f64).collect()))
            .collect();
        let g = GalleryIndex::new(items.clone(), None).unwrap();
        for (i, q) in items.iter().enumerate() {
            assert_eq!(rank_of_match(q, &g, i).unwrap(), 1);
        }
    }

    #[test]
    fn rank_matches_sort_oracle() {
        for seed in 0..20 {
            let items = random_units(10, 5, seed);
            let q = random_units(1, 5, seed + 100).pop().unwrap();
            let g = GalleryIndex::new(items.clone(), None).unwrap();
            let mut d: Vec<(f64, usize)> = items.iter().map(|e| q.distance(e)).zip(0..).collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for t in 0..10 {
                let oracle = d.iter().position(|&(_, i)| i == t).unwrap() + 1;
                assert_eq!(rank_of_match(&q, &g, t).unwrap(), oracle);
            }
        }
    }

    #[test]
    fn ties_rank_ahead() {
        let e = unit(vec![1.0, 1.0]);
        let g = GalleryIndex::new(vec![e.clone(), e.clone(), e.clone(), unit(vec![-1.0, 0.0])], None).unwrap();
        assert_eq!(rank_of_match(&e, &g, 0).unwrap(), 3);
        assert_eq!(rank_of_match(&e, &g, 2).unwrap(), 3);
    }

    #[test]
    fn rank_invariant_to_shuffling_non_matches() {
        let items = random_units(12, 6, 7);
        let q = random_units(1, 6, 8).pop().unwrap();
        let base = rank_of_match(&q, &GalleryIndex::new(items.clone(), None).unwrap(), 0).unwrap();
        let mut shuffled = items.clone();
        shuffled[1..].reverse();
        shuffled[1..].rotate_left(4);
        assert_eq!(rank_of_match(&q, &GalleryIndex::new(shuffled, None).unwrap(), 0).unwrap(), base);
    }

    #[test]
    fn out_of_range() {
        let g = GalleryIndex::new(vec![unit(vec![1.0])], None).unwrap();
        assert!(matches!(
            rank_of_match(&unit(vec![1.0]), &g, 1),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
    }

    #[test]
    fn recall_counting() {
        let r = recall_at_k(&[1, 4, 12], &[1, 5, 10], 100).unwrap();
        assert_eq!(r.r_at[&1], 1.0 / 3.0);
        assert_eq!(r.r_at[&5], 2.0 / 3.0);
        assert_eq!(r.r_at[&10], 2.0 / 3.0);
        assert_eq!(r.top1_percent_k, 1);
        assert_eq!(r.top1_percent, 1.0 / 3.0);
        let r = recall_at_k(&[1; 7], &[1, 5, 10], 7).unwrap();
        assert!(r.r_at.values().all(|&v| v == 1.0) && r.top1_percent == 1.0);
        assert!(matches!(recall_at_k(&[], &[1], 5), Err(Error::EmptyQuerySet)));
    }

    #[test]
    fn top_one_percent_k() {
        assert_eq!(top1_percent_k(8884), 89);
        assert_eq!(top1_percent_k(100), 1);
        assert_eq!(top1_percent_k(101), 2);
        assert_eq!(top1_percent_k(20), 1);
    }

    #[test]
    fn recall_monotone_in_k() {
        let ranks = [3, 1, 9, 2, 20, 7];
        let ks: Vec<usize> = (1..=25).collect();
        let r = recall_at_k(&ranks, &ks, 25).unwrap();
        let v: Vec<f64> = r.r_at.values().copied().collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*v.last().unwrap(), 1.0);
    }

    fn tagged_gallery(tags: Vec<[f64; 2]>) -> GalleryIndex {
        let n = tags.len();
        GalleryIndex::new(random_units(n, 3, 1), Some(tags)).unwrap()
    }

    #[test]
    fn geo_threshold() {
        let g = tagged_gallery(vec![[20.0, 0.0], [30.0, 0.0], [10.0, 0.0]]);
        let r = geo_recall(&[[0.0, 0.0]], &g, &[vec![0, 1]], 25.0, &[1]).unwrap();
        assert_eq!(r[&1], 1.0);
        let r = geo_recall(&[[0.0, 0.0]], &g, &[vec![1, 2]], 25.0, &[1, 2]).unwrap();
        assert_eq!((r[&1], r[&2]), (0.0, 1.0));
        let untagged = GalleryIndex::new(random_units(2, 3, 1), None).unwrap();
        assert!(matches!(
            geo_recall(&[[0.0, 0.0]], &untagged, &[vec![0]], 25.0, &[1]),
            Err(Error::MissingGeoTags(_))
        ));
    }

    #[test]
    fn geo_recall_matches_brute_force_city() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 500;
        let tags: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0)])
            .collect();
        let g = GalleryIndex::new(random_units(n, 8, 2), Some(tags.clone())).unwrap();
        let queries = random_units(n, 8, 3);
        let lists: Vec<Vec<usize>> = queries.iter().map(|q| g.ranked(q).into_iter().take(10).collect()).collect();
        let ks = [1, 5, 10];
        let got = geo_recall(&tags, &g, &lists, 25.0, &ks).unwrap();
        for k in ks {
            let mut hits = 0;
            for (qi, q) in queries.iter().enumerate() {
                let mut d: Vec<(f64, usize)> = (0..n).map(|j| (q.distance(g.embedding(j)), j)).collect();
                d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let ok = d[..k].iter().any(|&(_, j)| {
                    let (dx, dy) = (tags[qi][0] - tags[j][0], tags[qi][1] - tags[j][1]);
                    (dx * dx + dy * dy).sqrt() <= 25.0
                });
                hits += ok as usize;
            }
            assert_eq!(got[&k], hits as f64 / n as f64);
        }
    }

    #[test]
    fn degree_column_rounding() {
        assert_eq!(degrees_to_columns(20.0, 8), 0);
        assert_eq!(degrees_to_columns(20.0, 64), 4);
        assert_eq!(degrees_to_columns(-20.0, 64), -4);
        assert_eq!(degrees_to_columns(22.5, 8), 1);
        assert_eq!(degrees_to_columns(-22.5, 8), -1);
        assert_eq!(orientation_shifts(5, 0.0, 32, 1), vec![0; 5]);
        let s = orientation_shifts(200, 20.0, 32, 1);
        assert!(s.iter().all(|&c| c.abs() <= 2));
        assert!(s.iter().any(|&c| c != 0));
    }

    #[test]
    fn csv_rows() {
        let mut r = recall_at_k(&[1, 2], &[1, 5], 2).unwrap();
        r.geo_recall_at = Some([(1, 0.5)].into_iter().collect());
        assert_eq!(
            r.csv_rows("clean"),
            vec!["clean,r_at,1,0.5", "clean,r_at,5,1", "clean,top1_percent,1,0.5", "clean,geo_recall_at,1,0.5"]
        );
    }
}
