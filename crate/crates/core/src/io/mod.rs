pub mod checkpoint;
pub mod manifest;
pub mod synthetic;
pub mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use manifest::{load_manifest, Dataset, DatasetManifest, Pair, PairRecord, Split, MANIFEST_VERSION};
pub use synthetic::{generate_synthetic, inverse_permutation, permute_cells, PermutationMode, SyntheticConfig};
pub use tensor::{load_tensor, save_tensor, DType, TENSOR_VERSION};
