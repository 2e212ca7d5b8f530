use std::collections::HashSet;

use image::RgbImage;

use super::encoders::{ImageEmbedder, TextEmbedder};
use super::persist::CatalogEntry;
use crate::category::Category;
use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant of stored embeddings.
pub const NORM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GarmentRecord {
    pub id: String,
    pub image_ref: String,
    pub category: Category,
    pub embedding: Vec<f32>,
}

/// Immutable, ordered catalog of unit-norm garment embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    records: Vec<GarmentRecord>,
    dim: usize,
    encoder_tag: String,
}

impl EmbeddingIndex {
    /// Validates uniqueness, dimension and normalization of every record.
    pub fn new(dim: usize, encoder_tag: impl Into<String>, records: Vec<GarmentRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.embedding.len() != dim {
                return Err(Error::Dimension {
                    context: format!("embedding of `{}`", r.id),
                    expected: dim,
                    found: r.embedding.len(),
                });
            }
            let norm = l2_norm(&r.embedding);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Data(format!(
                    "embedding of `{}` has norm {norm}, expected 1",
                    r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate garment id `{}`", r.id)));
            }
        }
        Ok(Self {
            records,
            dim,
            encoder_tag: encoder_tag.into(),
        })
    }

    pub fn records(&self) -> &[GarmentRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GarmentRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// A normalized caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextQuery {
    pub caption: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct RetrievalFilter {
    pub exclude_ids: HashSet<String>,
    pub category: Option<Category>,
}

impl RetrievalFilter {
    pub fn category(category: Category) -> Self {
        Self {
            category: Some(category),
            ..Default::default()
        }
    }

    pub fn excluding(mut self, id: impl Into<String>) -> Self {
        self.exclude_ids.insert(id.into());
        self
    }

    fn admits(&self, record: &GarmentRecord) -> bool {
        self.category.is_none_or(|c| c == record.category) && !self.exclude_ids.contains(&record.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_text: String,
    /// (id, cosine score), best first.
    pub entries: Vec<(String, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }
}

/// One image to be indexed. Decoding failures are carried per item.
pub struct CatalogImage {
    pub id: String,
    pub category: Category,
    pub image_ref: String,
    pub image: Result<RgbImage>,
}

#[derive(Debug, Default)]
pub struct CatalogReport {
    pub failures: Vec<(String, Error)>,
}

impl CatalogReport {
    pub fn failed(&self) -> usize {
        self.failures.len()
    }
}

fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

fn normalize(mut v: Vec<f32>) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Some(v)
}

/// Embeds a stream of garment images. Undecodable or degenerate items are
/// reported and skipped; an encoder whose output width changes is fatal.
pub fn encode_images<I, E>(images: I, encoder: &E) -> Result<(EmbeddingIndex, CatalogReport)>
where
    I: IntoIterator<Item = CatalogImage>,
    E: ImageEmbedder + ?Sized,
{
    let dim = encoder.dim();
    let mut report = CatalogReport::default();
    let mut records = Vec::new();
    for item in images {
        let image = match item.image {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping garment `{}`: {e}", item.id);
                report.failures.push((item.id, e));
                continue;
            }
        };
        let raw = encoder.embed_image(&image)?;
        if raw.len() != dim {
            return Err(Error::Dimension {
                context: format!("encoder `{}` on `{}`", encoder.tag(), item.id),
                expected: dim,
                found: raw.len(),
            });
        }
        match normalize(raw) {
            Some(embedding) => records.push(GarmentRecord {
                id: item.id,
                image_ref: item.image_ref,
                category: item.category,
                embedding,
            }),
            None => {
                let err = Error::Data(format!("zero or non-finite embedding for `{}`", item.id));
                report.failures.push((item.id, err));
            }
        }
    }
    if report.failed() > 0 {
        log::warn!("{} catalog images failed to encode", report.failed());
    }
    let index = EmbeddingIndex::new(dim, encoder.tag(), records)?;
    Ok((index, report))
}

/// Loads and embeds every garment of a catalog manifest; image paths are
/// resolved against `root`.
pub fn encode_garment_catalog<E>(
    entries: &[CatalogEntry],
    root: &std::path::Path,
    encoder: &E,
) -> Result<(EmbeddingIndex, CatalogReport)>
where
    E: ImageEmbedder + ?Sized,
{
    let images = entries.iter().map(|e| {
        let path = root.join(&e.image_path);
        let image = image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|err| Error::Image {
                path: path.display().to_string(),
                reason: err.to_string(),
            });
        CatalogImage {
            id: e.id.clone(),
            category: e.category,
            image_ref: e.image_path.clone(),
            image,
        }
    });
    encode_images(images, encoder)
}

pub fn encode_text_query<E>(caption: &str, encoder: &E) -> Result<TextQuery>
where
    E: TextEmbedder + ?Sized,
{
    if caption.trim().is_empty() {
        return Err(Error::MissingQuery("caption is empty".into()));
    }
    let raw = encoder.embed_text(caption)?;
    if raw.len() != encoder.dim() {
        return Err(Error::Dimension {
            context: format!("text encoder `{}`", encoder.tag()),
            expected: encoder.dim(),
            found: raw.len(),
        });
    }
    let vector = normalize(raw)
        .ok_or_else(|| Error::MissingQuery(format!("caption `{caption}` has a zero embedding")))?;
    Ok(TextQuery {
        caption: caption.to_string(),
        vector,
    })
}

/// Cosine score of a unit query against a unit record, clamped to [-1, 1].
pub(crate) fn score(query: &[f32], embedding: &[f32]) -> f64 {
    let dot: f64 = query
        .iter()
        .zip(embedding)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    dot.clamp(-1.0, 1.0)
}

/// Exact top-k by cosine similarity. Ties go to the lexicographically
/// smaller id.
pub fn retrieve_top_k(
    index: &EmbeddingIndex,
    query: &TextQuery,
    k: usize,
    filter: &RetrievalFilter,
) -> Result<RetrievalResult> {
    if query.vector.len() != index.dim() {
        return Err(Error::Dimension {
            context: "retrieval query".into(),
            expected: index.dim(),
            found: query.vector.len(),
        });
    }
    let mut scored: Vec<(&str, f64)> = index
        .records()
        .iter()
        .filter(|r| filter.admits(r))
        .map(|r| (r.id.as_str(), score(&query.vector, &r.embedding)))
        .collect();
    if k > scored.len() {
        return Err(Error::Shortfall {
            requested: k,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.truncate(k);
    Ok(RetrievalResult {
        query_text: query.caption.clone(),
        entries: scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect(),
    })
}
