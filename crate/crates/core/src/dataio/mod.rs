//! On-disk formats: embedding matrices, pair manifests and checkpoints.
//! All integers and floats are little-endian.

mod checkpoint;
mod embeddings;
mod manifest;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, tensor_names, CheckpointHeader,
    GpMeta, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use embeddings::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingHeader, DTYPE_F32,
    EMBEDDING_HEADER_LEN, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use manifest::{
    format_manifest, parse_manifest, read_manifest, write_manifest, Direction, EmbeddingDataset, Group,
    PairRecord, RetrievalTask, Split,
};
