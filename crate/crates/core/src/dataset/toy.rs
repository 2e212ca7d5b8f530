use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::Split;
use crate::category::Category;
use crate::conditioning::Keypoint;
use crate::error::{Error, Result};
use crate::palette::{Motif, PaletteColor, BACKGROUND, BODY, HEAD, PALETTE};
use crate::profile::Dims;
use crate::retrieval::{write_catalog_manifest, CatalogEntry};

/// Body rectangles in a 16-row × 12-column figure grid: (row0, row1, col0, col1).
type Cell = (u32, u32, u32, u32);

const HEAD_CELLS: [Cell; 1] = [(0, 3, 5, 7)];
const LIMB_CELLS: [Cell; 4] = [(3, 9, 4, 8), (3, 8, 3, 4), (3, 8, 8, 9), (9, 15, 4, 8)];

fn garment_cells(category: Category) -> &'static [Cell] {
    match category {
        Category::Upper => &[(3, 9, 4, 8)],
        Category::Lower => &[(9, 15, 4, 8)],
        Category::Full => &[(3, 9, 4, 8), (9, 13, 3, 9)],
    }
}

/// Joint positions on a 24 × 32 half-cell grid, in the usual 18-joint order.
const SKELETON: [(u32, u32); 18] = [
    (12, 4),
    (12, 6),
    (8, 7),
    (7, 12),
    (7, 16),
    (16, 7),
    (17, 12),
    (17, 16),
    (10, 18),
    (10, 24),
    (10, 29),
    (14, 18),
    (14, 24),
    (14, 29),
    (11, 3),
    (13, 3),
    (10, 3),
    (14, 3),
];

pub fn toy_keypoints(height: u32, width: u32) -> Vec<Keypoint> {
    SKELETON
        .iter()
        .map(|&(x, y)| Keypoint {
            x: (x * width / 24) as f32,
            y: (y * height / 32) as f32,
            confidence: 1.0,
        })
        .collect()
}

/// Class of one toy garment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyGarment {
    pub color: &'static PaletteColor,
    pub motif: Motif,
    pub category: Category,
}

impl ToyGarment {
    fn noun(&self) -> &'static str {
        match self.category {
            Category::Upper => "top",
            Category::Lower => "trousers",
            Category::Full => "dress",
        }
    }

    fn detail(&self) -> &'static str {
        match self.category {
            Category::Upper => "short sleeves",
            Category::Lower => "straight leg",
            Category::Full => "knee length",
        }
    }

    pub fn noun_phrases(&self) -> [String; 3] {
        [
            format!("{} {}", self.color.name, self.noun()),
            format!("{} pattern", self.motif.word()),
            self.detail().to_string(),
        ]
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb<u8> {
        Rgb(self.motif.apply(self.color.rgb, x, y))
    }

    pub fn catalog_image(&self, side: u32) -> RgbImage {
        self.catalog_variant(side, 0)
    }

    /// Same garment photographed with its pattern shifted by `phase` pixels.
    pub fn catalog_variant(&self, side: u32, phase: u32) -> RgbImage {
        RgbImage::from_fn(side, side, |x, y| self.pixel(x + phase, y + phase))
    }
}

fn fill(img: &mut RgbImage, cells: &[Cell], height: u32, width: u32, mut paint: impl FnMut(u32, u32) -> Rgb<u8>) {
    for &(r0, r1, c0, c1) in cells {
        for y in r0 * height / 16..r1 * height / 16 {
            for x in c0 * width / 12..c1 * width / 12 {
                img.put_pixel(x, y, paint(x, y));
            }
        }
    }
}

/// Person image (stick figure wearing the garment) and its edit mask.
pub fn render_person(garment: &ToyGarment, height: u32, width: u32) -> (RgbImage, GrayImage) {
    let mut img = RgbImage::from_pixel(width, height, Rgb(BACKGROUND));
    fill(&mut img, &HEAD_CELLS, height, width, |_, _| Rgb(HEAD));
    fill(&mut img, &LIMB_CELLS, height, width, |_, _| Rgb(BODY));
    fill(&mut img, garment_cells(garment.category), height, width, |x, y| garment.pixel(x, y));
    let mut mask = GrayImage::new(width, height);
    for &(r0, r1, c0, c1) in garment_cells(garment.category) {
        for y in r0 * height / 16..r1 * height / 16 {
            for x in c0 * width / 12..c1 * width / 12 {
                mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
    (img, mask)
}

#[derive(Debug, Clone)]
pub struct ToyDatasetSummary {
    pub root: PathBuf,
    pub train: usize,
    pub test: usize,
    pub catalog: PathBuf,
    /// Garments that appear only in the catalog.
    pub catalog_only: usize,
    pub garments: Vec<(String, ToyGarment)>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Shop items per (color, motif, category) in the toy catalog.
pub const CATALOG_VARIANTS: u32 = 3;

/// Splits sample `i`: every fourth sample is held out for testing.
pub fn toy_split(i: usize) -> Split {
    if i % 4 == 3 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Writes `n` toy samples in the Dress Code layout plus `catalog.tsv` over
/// all garments. Besides the worn garments, the catalog holds
/// [`CATALOG_VARIANTS`] shop items for every class and category. Classes (color × motif) are dealt from seeded shuffles of
/// all 32 combinations, so any 32 consecutive samples are pairwise distinct.
pub fn generate_toy_dataset(root: &Path, n: usize, seed: u64, dims: &Dims) -> Result<ToyDatasetSummary> {
    if n < 8 {
        return Err(Error::config("n", format!("toy dataset needs at least 8 samples, got {n}")));
    }
    let (h, w) = (dims.image_h as u32, dims.image_w as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<(usize, usize)> = (0..PALETTE.len())
        .flat_map(|c| (0..Motif::ALL.len()).map(move |m| (c, m)))
        .collect();
    let mut deck = Vec::new();
    let mut garments = Vec::with_capacity(n);
    for _ in 0..n {
        if deck.is_empty() {
            deck = classes.clone();
            deck.shuffle(&mut rng);
        }
        let (c, m) = deck.pop().expect("refilled");
        let category = Category::ALL[rng.random_range(0..Category::ALL.len())];
        garments.push(ToyGarment {
            color: &PALETTE[c],
            motif: Motif::ALL[m],
            category,
        });
    }

    for category in Category::ALL {
        let dir = root.join(category.dir_name());
        for sub in ["images", "garments", "masks", "keypoints"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
    }
    let keypoints: String = toy_keypoints(h, w)
        .iter()
        .map(|k| format!("{} {} {}\n", k.x, k.y, k.confidence))
        .collect();
    let mut captions: [String; 3] = Default::default();
    let mut pairs: [[String; 2]; 3] = Default::default();
    let mut catalog = Vec::with_capacity(n);
    let mut summary = ToyDatasetSummary {
        root: root.to_path_buf(),
        train: 0,
        test: 0,
        catalog: root.join("catalog.tsv"),
        catalog_only: 0,
        garments: Vec::with_capacity(n),
    };
    for (i, g) in garments.iter().enumerate() {
        let sample_id = format!("s{i:04}");
        let garment_id = format!("g{i:04}");
        let ci = g.category.code() as usize;
        let dir = root.join(g.category.dir_name());
        let (person, mask) = render_person(g, h, w);
        save_png(&person, &dir.join("images").join(format!("{sample_id}.png")))?;
        save_png(&mask, &dir.join("masks").join(format!("{sample_id}.png")))?;
        let garment_path = dir.join("garments").join(format!("{garment_id}.png"));
        save_png(&g.catalog_image(w / 3), &garment_path)?;
        write(&dir.join("keypoints").join(format!("{sample_id}.txt")), &keypoints)?;
        let phrases = g.noun_phrases();
        captions[ci].push_str(&format!("{sample_id}\t{}\n", phrases.join("\t")));
        let split = toy_split(i);
        pairs[ci][split as usize].push_str(&format!("{sample_id}\t{garment_id}\n"));
        match split {
            Split::Train => summary.train += 1,
            Split::Test => summary.test += 1,
        }
        catalog.push(CatalogEntry {
            id: garment_id.clone(),
            category: g.category,
            image_path: format!("{}/garments/{garment_id}.png", g.category.dir_name()),
            caption: phrases.join(", "),
        });
        summary.garments.push((garment_id, *g));
    }
    for category in Category::ALL {
        let ci = category.code() as usize;
        let dir = root.join(category.dir_name());
        write(&dir.join("captions.tsv"), &captions[ci])?;
        write(&dir.join("train_pairs.txt"), &pairs[ci][0])?;
        write(&dir.join("test_pairs.txt"), &pairs[ci][1])?;
    }
    for category in Category::ALL {
        let dir = root.join(category.dir_name());
        for &(c, m) in &classes {
            let g = ToyGarment {
                color: &PALETTE[c],
                motif: Motif::ALL[m],
                category,
            };
            for v in 0..CATALOG_VARIANTS {
                let id = format!("k{}{c}{m}{v}", category.code());
                save_png(&g.catalog_variant(w / 3, v), &dir.join("garments").join(format!("{id}.png")))?;
                catalog.push(CatalogEntry {
                    id: id.clone(),
                    category,
                    image_path: format!("{}/garments/{id}.png", category.dir_name()),
                    caption: g.noun_phrases().join(", "),
                });
                summary.catalog_only += 1;
            }
        }
    }
    write_catalog_manifest(&summary.catalog, &catalog)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, LoadReport};
    use crate::profile::Profile;
    use crate::retrieval::{
        encode_garment_catalog, encode_text_query, read_catalog_manifest, retrieve_top_k, ColorStatsImageEncoder,
        ColorWordTextEncoder, RetrievalFilter,
    };
    use sha2::{Digest, Sha256};

    fn tree_hash(root: &Path) -> String {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        let mut h = Sha256::new();
        for f in files {
            h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            h.update(fs::read(&f).unwrap());
        }
        hex::encode(h.finalize())
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dims = Profile::Desk.dims();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_toy_dataset(a.path(), 8, 0, &dims).unwrap();
        generate_toy_dataset(b.path(), 8, 0, &dims).unwrap();
        assert_eq!(tree_hash(a.path()), tree_hash(b.path()));
    }

    #[test]
    fn loads_back_and_captions_match_dominant_channel() {
        let dims = Profile::Desk.dims();
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_toy_dataset(dir.path(), 8, 0, &dims).unwrap();
        let train: LoadReport = load_dataset(dir.path(), Split::Train).unwrap();
        let test = load_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(train.samples.len() + test.samples.len(), 8);
        assert_eq!((summary.train, summary.test), (6, 2));
        for s in train.samples.iter().chain(&test.samples) {
            let garment = image::open(&s.garment_image).unwrap().to_rgb8();
            let mut sums = [0u64; 3];
            for p in garment.pixels() {
                for c in 0..3 {
                    sums[c] += p[c] as u64;
                }
            }
            let dominant = (0..3).max_by_key(|c| sums[*c]).unwrap();
            let word = s.noun_phrases[0].split(' ').next().unwrap();
            let color = PALETTE.iter().find(|c| c.name == word).unwrap();
            assert_eq!(color.dominant, dominant, "{}", s.sample_id);
            assert_eq!(s.keypoints.len(), 18);
        }
    }

    #[test]
    fn each_caption_retrieves_its_own_garment() {
        let dims = Profile::Desk.dims();
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_toy_dataset(dir.path(), 32, 5, &dims).unwrap();
        let entries = read_catalog_manifest(&summary.catalog).unwrap();
        let (index, report) = encode_garment_catalog(&entries, dir.path(), &ColorStatsImageEncoder).unwrap();
        assert_eq!(report.failed(), 0);
        for e in &entries {
            let q = encode_text_query(&e.caption, &ColorWordTextEncoder).unwrap();
            let res = retrieve_top_k(&index, &q, 3, &RetrievalFilter::category(e.category)).unwrap();
            for id in res.ids() {
                assert_eq!(index.get(id).unwrap().category, e.category);
                let hit = entries.iter().find(|x| x.id == id).unwrap();
                assert_eq!(hit.caption, e.caption, "{} retrieved {id}", e.id);
            }
        }
    }

    #[test]
    fn mask_covers_exactly_the_garment() {
        let g = ToyGarment {
            color: &PALETTE[0],
            motif: Motif::Checked,
            category: Category::Full,
        };
        let (img, mask) = render_person(&g, 128, 96);
        for (x, y, m) in mask.enumerate_pixels() {
            let p = img.get_pixel(x, y);
            let garment_colored = p.0 != BACKGROUND && p.0 != BODY && p.0 != HEAD;
            assert_eq!(m[0] == 255, garment_colored, "({x}, {y})");
        }
    }

    #[test]
    fn too_small_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_toy_dataset(dir.path(), 7, 0, &Profile::Desk.dims()).is_err());
    }
}
