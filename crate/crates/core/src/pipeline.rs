//! Glue between the dataset layout, the garment catalog and the model:
//! builds prepared examples (with their retrieved garments) for a split.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::category::Category;
use crate::dataset::{build_caption, load_dataset, load_sample_images, CaptionSpec, LoadedSample, SampleError, Split, UnpairedAssignment};
use crate::diffusion::{Example, FashionRag};
use crate::error::{Error, Result};
use crate::profile::MAX_RETRIEVED;
use crate::retrieval::{
    encode_garment_catalog, encode_text_query, load_index, read_catalog_manifest, retrieve_top_k, CatalogReport,
    ColorStatsImageEncoder, ColorWordTextEncoder, EmbeddingIndex, ImageEmbedder, RetrievalFilter,
};

/// Garment index plus the directory its image paths are relative to.
pub struct Catalog {
    pub index: EmbeddingIndex,
    pub root: PathBuf,
}

impl Catalog {
    /// Encodes `<root>/catalog.tsv` with the toy image tower.
    pub fn build(root: &Path) -> Result<(Self, CatalogReport)> {
        let entries = read_catalog_manifest(&root.join("catalog.tsv"))?;
        let (index, report) = encode_garment_catalog(&entries, root, &ColorStatsImageEncoder)?;
        Ok((
            Self {
                index,
                root: root.to_path_buf(),
            },
            report,
        ))
    }

    /// Uses the saved index at `index` when given (it must come from the
    /// same image tower), else encodes the catalog.
    pub fn open(root: &Path, index: Option<&Path>) -> Result<Self> {
        match index {
            None => Ok(Self::build(root)?.0),
            Some(path) => {
                let index = load_index(path)?;
                let want = ColorStatsImageEncoder.tag();
                if index.encoder_tag() != want {
                    return Err(Error::config(
                        "index",
                        format!("index built with `{}`, this build retrieves with `{want}`", index.encoder_tag()),
                    ));
                }
                Ok(Self {
                    index,
                    root: root.to_path_buf(),
                })
            }
        }
    }

    pub fn image(&self, id: &str) -> Result<RgbImage> {
        let record = self
            .index
            .get(id)
            .ok_or_else(|| Error::Data(format!("garment `{id}` is not in the index")))?;
        let path = self.root.join(&record.image_ref);
        Ok(image::open(&path)
            .map_err(|e| Error::Image {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
            .to_rgb8())
    }

    /// Up to `k` garment ids for `caption` within `category`, skipping
    /// `exclude`. Fewer than `k` eligible garments is not an error here.
    pub fn retrieve(&self, caption: &str, category: Category, exclude: &HashSet<String>, k: usize) -> Result<Vec<String>> {
        let query = encode_text_query(caption, &ColorWordTextEncoder)?;
        let filter = RetrievalFilter {
            exclude_ids: exclude.clone(),
            category: Some(category),
        };
        let result = match retrieve_top_k(&self.index, &query, k, &filter) {
            Err(Error::Shortfall { available, .. }) => {
                log::warn!("only {available} garments eligible for `{caption}` ({category})");
                retrieve_top_k(&self.index, &query, available, &filter)?
            }
            other => other?,
        };
        Ok(result.entries.into_iter().map(|(id, _)| id).collect())
    }
}

/// Which garments may be retrieved for a sample.
#[derive(Debug, Clone, Default)]
pub struct RetrievalScope {
    /// Never retrieve the sample's own ground-truth garment.
    pub exclude_own: bool,
    pub exclude: HashSet<String>,
}

impl RetrievalScope {
    pub fn training() -> Self {
        Self {
            exclude_own: true,
            exclude: HashSet::new(),
        }
    }

    /// Retrieval for evaluation draws only from garments outside the
    /// evaluated split.
    pub fn evaluation(held_out: &[LoadedSample]) -> Self {
        Self {
            exclude_own: true,
            exclude: held_out.iter().map(|s| s.annotation.garment_id.clone()).collect(),
        }
    }
}

/// A sample with decoded pixels and model-ready inputs.
pub struct PreparedSample {
    pub loaded: LoadedSample,
    pub example: Example,
}

/// Caption for a sample: its own noun phrases, or the donor's in the
/// unpaired setting.
pub fn sample_caption(
    sample: &LoadedSample,
    all: &[LoadedSample],
    spec: CaptionSpec,
    unpaired: Option<&UnpairedAssignment>,
) -> Result<String> {
    let phrases = match unpaired {
        None => &sample.annotation.noun_phrases,
        Some(a) => {
            let id = &sample.annotation.sample_id;
            let donor = a
                .donor(id)
                .ok_or_else(|| Error::Data(format!("no unpaired donor for `{id}`")))?;
            &all.iter()
                .find(|s| s.annotation.sample_id == donor)
                .ok_or_else(|| Error::Data(format!("donor `{donor}` of `{id}` is not loaded")))?
                .annotation
                .noun_phrases
        }
    };
    build_caption(phrases, spec)
}

/// Loads a split and decodes every sample's pixels. Samples whose files
/// cannot be decoded join the rejected list.
pub fn load_split(root: &Path, split: Split, model: &FashionRag) -> Result<(Vec<LoadedSample>, Vec<SampleError>)> {
    let report = load_dataset(root, split)?;
    let dims = model.dims();
    let mut rejected = report.rejected;
    let mut loaded = Vec::with_capacity(report.samples.len());
    for ann in report.samples {
        match load_sample_images(&ann, dims.image_h as u32, dims.image_w as u32) {
            Ok(s) => loaded.push(s),
            Err(e) => {
                log::warn!("rejected {}: {e}", ann.sample_id);
                rejected.push(SampleError {
                    sample_id: ann.sample_id.clone(),
                    category: ann.category,
                    reason: e.to_string(),
                });
            }
        }
    }
    if loaded.is_empty() {
        return Err(Error::Data(format!("no decodable {split} samples under {}", root.display())));
    }
    Ok((loaded, rejected))
}

/// Builds captions, retrieves up to three garments per sample and prepares
/// the latent-resolution inputs.
pub fn prepare_samples(
    model: &FashionRag,
    samples: Vec<LoadedSample>,
    catalog: &Catalog,
    spec: CaptionSpec,
    scope: &RetrievalScope,
    unpaired: Option<&UnpairedAssignment>,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in &samples {
        let caption = sample_caption(s, &samples, spec, unpaired)?;
        let mut exclude = scope.exclude.clone();
        if scope.exclude_own {
            exclude.insert(s.annotation.garment_id.clone());
        }
        let ids = catalog.retrieve(&caption, s.annotation.category, &exclude, MAX_RETRIEVED)?;
        let retrieved = ids
            .into_iter()
            .map(|id| catalog.image(&id).map(|img| (id, img)))
            .collect::<Result<Vec<_>>>()?;
        let example = Example::prepare(
            model,
            &s.annotation.sample_id,
            &s.image,
            &s.mask,
            &s.annotation.keypoints,
            &caption,
            &retrieved,
        )?;
        out.push(example);
    }
    Ok(samples
        .into_iter()
        .zip(out)
        .map(|(loaded, example)| PreparedSample { loaded, example })
        .collect())
}
