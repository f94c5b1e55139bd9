//! Paired-sample manifests and in-memory datasets.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::load_tensor;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub ground_path: PathBuf,
    pub aerial_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_tag: Option<[f64; 2]>,
    /// Ground cell `j` holds aerial cell `oracle_permutation[j]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_permutation: Option<Vec<usize>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub input_shape: [usize; 3],
    /// `(h, w)` block grid the oracle permutations index into.
    pub cell_grid: [usize; 2],
    pub pairs: Vec<PairRecord>,
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} but {n} cells", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n {
            return Err(Error::InvalidPermutation(format!("entry {p} out of range 0..{n}")));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!("entry {p} repeated")));
        }
    }
    Ok(())
}

impl DatasetManifest {
    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported, expected {MANIFEST_VERSION}",
                self.version
            )));
        }
        if self.input_shape.contains(&0) || self.cell_grid.contains(&0) {
            return Err(Error::Config("manifest shapes must be positive".into()));
        }
        let [h, w, _] = self.input_shape;
        let [ch, cw] = self.cell_grid;
        if h % ch != 0 || w % cw != 0 {
            return Err(Error::Config(format!(
                "cell grid {ch}×{cw} does not tile input {h}×{w}"
            )));
        }
        let mut ids = HashSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
            if let Some(perm) = &p.oracle_permutation {
                validate_permutation(perm, ch * cw).map_err(|e| e.at_sample(i))?;
            }
            if let Some(tag) = p.geo_tag {
                if !tag.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteValue(format!("geo tag of `{}`", p.id)));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a manifest, checking that every referenced file
/// exists relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = DatasetManifest::from_json(&text)?;
    let base = base_dir(path);
    for (i, p) in m.pairs.iter().enumerate() {
        for f in [&p.ground_path, &p.aerial_path] {
            let full = base.join(f);
            if !full.is_file() {
                return Err(Error::io(
                    full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                )
                .at_sample(i));
            }
        }
    }
    Ok(m)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub ground: FeatureGrid,
    pub aerial: FeatureGrid,
    pub geo_tag: Option<[f64; 2]>,
    pub oracle_permutation: Option<Vec<usize>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_shape: [usize; 3],
    pub cell_grid: [usize; 2],
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let m = load_manifest(path)?;
        let base = base_dir(path);
        let read = |p: &Path| -> Result<FeatureGrid> {
            let g = FeatureGrid::from_tensor(load_tensor(base.join(p))?)?;
            if g.shape() != m.input_shape {
                return Err(Error::shape(format!("{}", p.display()), &m.input_shape, &g.shape()));
            }
            Ok(g)
        };
        let pairs = m
            .pairs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(Pair {
                    id: r.id.clone(),
                    ground: read(&r.ground_path).map_err(|e| e.at_sample(i))?,
                    aerial: read(&r.aerial_path).map_err(|e| e.at_sample(i))?,
                    geo_tag: r.geo_tag,
                    oracle_permutation: r.oracle_permutation.clone(),
                    split: r.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_shape: m.input_shape,
            cell_grid: m.cell_grid,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.pairs[i].split == split).collect()
    }

    /// Geo tags for the given pairs, or an error naming the first untagged one.
    pub fn geo_tags(&self, indices: &[usize]) -> Result<Vec<[f64; 2]>> {
        indices
            .iter()
            .map(|&i| {
                self.pairs[i]
                    .geo_tag
                    .ok_or_else(|| Error::MissingGeoTags(format!("pair `{}`", self.pairs[i].id)))
            })
            .collect()
    }

    /// Writes grids and `manifest.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        use super::tensor::{save_tensor, DType};
        let dir = dir.as_ref();
        for sub in ["ground", "aerial"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut records = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let ground_path = PathBuf::from("ground").join(format!("{}.cvtf", p.id));
            let aerial_path = PathBuf::from("aerial").join(format!("{}.cvtf", p.id));
            save_tensor(dir.join(&ground_path), &p.ground.to_tensor(), DType::F64)?;
            save_tensor(dir.join(&aerial_path), &p.aerial.to_tensor(), DType::F64)?;
            records.push(PairRecord {
                id: p.id.clone(),
                ground_path,
                aerial_path,
                geo_tag: p.geo_tag,
                oracle_permutation: p.oracle_permutation.clone(),
                split: p.split,
            });
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            input_shape: self.input_shape,
            cell_grid: self.cell_grid,
            pairs: records,
        };
        manifest.validate()?;
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
