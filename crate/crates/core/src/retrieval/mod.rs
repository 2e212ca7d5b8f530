//! Garment catalog index: dual-encoder embeddings, exact cosine top-k search
//! and the binary index file.

mod encoders;
mod index;
mod persist;

pub use encoders::{
    ColorStatsImageEncoder, ColorWordTextEncoder, FnImageEncoder, ImageEmbedder, TextEmbedder,
    TOY_RETRIEVAL_DIM,
};
pub use index::{
    encode_garment_catalog, encode_images, encode_text_query, retrieve_top_k, CatalogImage,
    CatalogReport, EmbeddingIndex, GarmentRecord, RetrievalFilter, RetrievalResult, TextQuery,
};
pub use persist::{
    load_index, read_catalog_manifest, save_index, write_catalog_manifest, CatalogEntry,
    INDEX_MAGIC, INDEX_VERSION,
};
