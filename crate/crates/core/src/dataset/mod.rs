//! Dress Code-style multimodal annotations, caption construction, unpaired
//! splits and the deterministic toy dataset.

mod caption;
mod layout;
mod toy;
mod unpaired;

pub use caption::{build_caption, CaptionSpec};
pub use layout::{
    load_dataset, load_sample_images, parse_keypoints, LoadReport, LoadedSample, SampleAnnotation, SampleError,
    Split,
};
pub use toy::{generate_toy_dataset, toy_keypoints, toy_split, ToyDatasetSummary, ToyGarment, CATALOG_VARIANTS};
pub use unpaired::{make_unpaired_assignment, read_assignment, write_assignment, UnpairedAssignment};
