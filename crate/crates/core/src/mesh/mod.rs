//! Synthetic meshes, serialization to tokens, OBJ, sampling and distances.

pub mod corpus;
pub mod distance;
#[allow(clippy::module_inception)]
pub mod mesh;
pub mod obj;
pub mod sample;
pub mod synth;
pub mod token;

pub use corpus::{build_shape, generate_corpus, read_manifest, write_manifest, CorpusSpec, ManifestRecord};
pub use distance::{chamfer_distance, hausdorff_distance, nearest_distances, nearest_distances_brute};
pub use mesh::{canonical_order, normalize_mesh, Mesh, Vec3};
pub use obj::{obj_read, obj_write, parse_obj, ObjRead};
pub use sample::{sample_points, sample_surface, PointCloud, SurfaceSample, METRIC_POINTS};
pub use synth::{gen_synthetic_mesh, Family};
pub use token::{detokenize, tokenize, Detokenized, TokenSequence, Vocabulary};
