use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::SampleAnnotation;
use crate::category::Category;
use crate::error::{Error, Result};

/// sample_id → donor sample_id whose caption and retrieved garments are used.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnpairedAssignment {
    pub donors: BTreeMap<String, String>,
}

impl UnpairedAssignment {
    pub fn donor(&self, sample_id: &str) -> Option<&str> {
        self.donors.get(sample_id).map(String::as_str)
    }
}

/// Category-preserving derangement: within each category the samples (sorted
/// by id) are permuted by a uniformly random single cycle (Sattolo).
pub fn make_unpaired_assignment(samples: &[SampleAnnotation], seed: u64) -> Result<UnpairedAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut donors = BTreeMap::new();
    for category in Category::ALL {
        let mut ids: Vec<&str> = samples
            .iter()
            .filter(|s| s.category == category)
            .map(|s| s.sample_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 2 {
            return Err(Error::Data(format!(
                "category {category} has a single sample; no derangement exists"
            )));
        }
        ids.sort_unstable();
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..i);
            perm.swap(i, j);
        }
        for (i, &j) in perm.iter().enumerate() {
            donors.insert(ids[i].to_string(), ids[j].to_string());
        }
    }
    Ok(UnpairedAssignment { donors })
}

pub fn write_assignment(assignment: &UnpairedAssignment, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (s, d) in &assignment.donors {
        out.push_str(&format!("{s}\t{d}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_assignment(path: &Path) -> Result<UnpairedAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut donors = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (s, d) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path.display().to_string(), format!("line {}: expected two fields", n + 1)))?;
        donors.insert(s.to_string(), d.to_string());
    }
    Ok(UnpairedAssignment { donors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Keypoint;

    fn sample(id: &str, category: Category) -> SampleAnnotation {
        SampleAnnotation {
            sample_id: id.into(),
            image: id.into(),
            garment_id: format!("g{id}"),
            garment_image: id.into(),
            category,
            mask: id.into(),
            keypoints: vec![Keypoint::missing(); 18],
            noun_phrases: vec!["x".into()],
        }
    }

    #[test]
    fn two_samples_swap() {
        let s = [sample("a", Category::Upper), sample("b", Category::Upper)];
        let a = make_unpaired_assignment(&s, 9).unwrap();
        assert_eq!(a.donor("a"), Some("b"));
        assert_eq!(a.donor("b"), Some("a"));
    }

    #[test]
    fn hundred_samples_have_no_fixed_points_and_keep_category() {
        let s: Vec<_> = (0..100)
            .map(|i| sample(&format!("s{i:03}"), Category::ALL[i % 3]))
            .collect();
        let a = make_unpaired_assignment(&s, 1).unwrap();
        let cat: BTreeMap<_, _> = s.iter().map(|x| (x.sample_id.clone(), x.category)).collect();
        assert_eq!(a.donors.len(), 100);
        let mut seen = std::collections::HashSet::new();
        for (k, v) in &a.donors {
            assert_ne!(k, v);
            assert_eq!(cat[k], cat[v]);
            assert!(seen.insert(v.clone()), "{v} used twice");
        }
        assert_eq!(a, make_unpaired_assignment(&s, 1).unwrap());
    }

    #[test]
    fn singleton_category_is_fatal() {
        let s = [sample("a", Category::Upper), sample("b", Category::Upper), sample("c", Category::Lower)];
        assert!(make_unpaired_assignment(&s, 0).is_err());
    }

    #[test]
    fn round_trips_through_tsv() {
        let s: Vec<_> = (0..6).map(|i| sample(&format!("s{i}"), Category::Full)).collect();
        let a = make_unpaired_assignment(&s, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("unpaired.tsv");
        write_assignment(&a, &p).unwrap();
        assert_eq!(read_assignment(&p).unwrap(), a);
    }
}
