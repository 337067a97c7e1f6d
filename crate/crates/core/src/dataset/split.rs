use super::{categories_by_name, CategoryId, DatasetError, DefectImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Base/novel category assignment plus the K-shot budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_categories: Vec<CategoryId>,
    pub novel_categories: Vec<CategoryId>,
    pub k_shot: usize,
    pub seed: u64,
}

/// Named NEU-DET base/novel assignments, as `(name, base, novel)`.
pub const NAMED_SPLITS: [(&str, [&str; 3], [&str; 3]); 3] = [
    ("split1", ["Cr", "In", "PS"], ["Pa", "Sc", "RS"]),
    ("split2", ["In", "RS", "Sc"], ["Cr", "Pa", "PS"]),
    ("split3", ["PS", "Pa", "Sc"], ["Cr", "In", "RS"]),
];

impl SplitSpec {
    pub fn new(
        mut base_categories: Vec<CategoryId>,
        mut novel_categories: Vec<CategoryId>,
        k_shot: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        base_categories.sort();
        base_categories.dedup();
        novel_categories.sort();
        novel_categories.dedup();
        if k_shot == 0 {
            return Err(DatasetError::InvalidSplit("k_shot must be at least 1".into()));
        }
        if base_categories.is_empty() || novel_categories.is_empty() {
            return Err(DatasetError::InvalidSplit(
                "base and novel category sets must be non-empty".into(),
            ));
        }
        if let Some(c) = base_categories.iter().find(|c| novel_categories.contains(c)) {
            return Err(DatasetError::InvalidSplit(format!(
                "category {c} is both base and novel"
            )));
        }
        Ok(Self {
            base_categories,
            novel_categories,
            k_shot,
            seed,
        })
    }

    /// One of `split1`, `split2`, `split3` resolved against `categories`.
    pub fn named(name: &str, categories: &[CategoryId], k_shot: usize, seed: u64) -> Result<Self, DatasetError> {
        let (_, base, novel) = NAMED_SPLITS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| {
                let valid: Vec<_> = NAMED_SPLITS.iter().map(|s| s.0).collect();
                DatasetError::InvalidSplit(format!("unknown split '{name}', expected one of {}", valid.join(", ")))
            })?;
        Self::new(
            categories_by_name(categories, base)?,
            categories_by_name(categories, novel)?,
            k_shot,
            seed,
        )
    }

    /// Base categories followed by novel categories.
    pub fn all_categories(&self) -> Vec<CategoryId> {
        self.base_categories
            .iter()
            .chain(&self.novel_categories)
            .cloned()
            .collect()
    }

    pub fn is_base(&self, c: &CategoryId) -> bool {
        self.base_categories.contains(c)
    }

    pub fn is_novel(&self, c: &CategoryId) -> bool {
        self.novel_categories.contains(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    pub spec: SplitSpec,
    pub base_train: Vec<DefectImage>,
    pub novel_train: Vec<DefectImage>,
    pub test: Vec<DefectImage>,
    /// Novel-category images left after carving out the test set; K-shot
    /// sets for other seeds are resampled from here.
    pub novel_pool: Vec<DefectImage>,
}

impl DatasetPartition {
    /// Resamples the K-shot novel set under a different seed, keeping the
    /// test and base splits fixed.
    pub fn with_k_shot_seed(&self, seed: u64) -> Result<DatasetPartition, DatasetError> {
        let novel_train = sample_k_shot(&self.novel_pool, &self.spec.novel_categories, self.spec.k_shot, seed)?;
        Ok(DatasetPartition {
            spec: SplitSpec {
                seed,
                ..self.spec.clone()
            },
            novel_train,
            ..self.clone()
        })
    }
}

fn shortfall(category: &CategoryId, available: usize, required: usize) -> DatasetError {
    DatasetError::InsufficientImages {
        category: category.name.clone(),
        available,
        required,
    }
}

/// Builds the incremental few-shot partition: per category a seeded test
/// sample is drawn first, then the base training images, then the K-shot
/// novel set from what remains of each novel category.
pub fn build_ifsnd_split(
    images: &[DefectImage],
    spec: &SplitSpec,
    test_per_category: usize,
    base_train_per_category: usize,
) -> Result<DatasetPartition, DatasetError> {
    if test_per_category == 0 || base_train_per_category == 0 {
        return Err(DatasetError::InvalidSplit(
            "per-category test and base-train counts must be positive".into(),
        ));
    }
    let mut groups: BTreeMap<CategoryId, Vec<&DefectImage>> = BTreeMap::new();
    for c in spec.all_categories() {
        groups.insert(c, Vec::new());
    }
    for im in images {
        if let Some(c) = im.primary_category() {
            if let Some(g) = groups.get_mut(c) {
                g.push(im);
            }
        }
    }
    for (cat, group) in groups.iter_mut() {
        group.sort_by(|a, b| a.id.cmp(&b.id));
        let required = test_per_category
            + if spec.is_base(cat) {
                base_train_per_category
            } else {
                spec.k_shot
            };
        if group.len() < required {
            return Err(shortfall(cat, group.len(), required));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test = Vec::new();
    let mut remainders: BTreeMap<CategoryId, Vec<&DefectImage>> = BTreeMap::new();
    for (cat, group) in groups {
        let mut group = group;
        group.shuffle(&mut rng);
        let rest = group.split_off(test_per_category);
        test.extend(group.into_iter().cloned());
        remainders.insert(cat, rest);
    }

    let base_set: BTreeSet<&CategoryId> = spec.base_categories.iter().collect();
    let mut base_train = Vec::new();
    let mut novel_pool = Vec::new();
    for (cat, rest) in remainders {
        if spec.is_base(&cat) {
            for im in rest.into_iter().take(base_train_per_category) {
                let mut im = im.clone();
                im.instances.retain(|i| base_set.contains(&i.category));
                base_train.push(im);
            }
        } else {
            novel_pool.extend(rest.into_iter().cloned());
        }
    }
    let novel_train = sample_k_shot(&novel_pool, &spec.novel_categories, spec.k_shot, spec.seed)?;

    Ok(DatasetPartition {
        spec: spec.clone(),
        base_train,
        novel_train,
        test,
        novel_pool,
    })
}

/// Draws `k` images per novel category and reduces each to a single labelled
/// instance of that category. An image is used for at most one category.
pub fn sample_k_shot(
    pool: &[DefectImage],
    novel_categories: &[CategoryId],
    k: usize,
    seed: u64,
) -> Result<Vec<DefectImage>, DatasetError> {
    if k == 0 {
        return Err(DatasetError::InvalidSplit("k must be at least 1".into()));
    }
    let mut cats: Vec<&CategoryId> = novel_categories.iter().collect();
    cats.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::with_capacity(k * cats.len());
    for cat in cats {
        let mut candidates: Vec<&DefectImage> = pool
            .iter()
            .filter(|im| im.has_category(cat) && !used.contains(im.id.as_str()))
            .collect();
        if candidates.len() < k {
            return Err(shortfall(cat, candidates.len(), k));
        }
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        candidates.shuffle(&mut rng);
        for im in candidates.into_iter().take(k) {
            used.insert(im.id.as_str());
            let matching: Vec<_> = im.instances.iter().filter(|i| &i.category == cat).collect();
            let keep = matching[rng.gen_range(0..matching.len())].clone();
            out.push(DefectImage {
                instances: vec![keep],
                ..im.clone()
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{neu_det_categories, BoundingBox, Instance};

    fn image(id: String, cat: &CategoryId, n_inst: usize) -> DefectImage {
        DefectImage {
            id,
            width: 8,
            height: 8,
            pixels: vec![0.0; 64],
            instances: (0..n_inst)
                .map(|i| Instance {
                    category: cat.clone(),
                    bbox: BoundingBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap(),
                })
                .collect(),
        }
    }

    fn neu_shaped(per_cat: usize) -> Vec<DefectImage> {
        neu_det_categories()
            .iter()
            .flat_map(|c| (0..per_cat).map(move |i| image(format!("{}_{i:03}", c.name), c, 1 + i % 3)))
            .collect()
    }

    #[test]
    fn split1_counts() {
        let cats = neu_det_categories();
        let spec = SplitSpec::named("split1", &cats, 5, 0).unwrap();
        let p = build_ifsnd_split(&neu_shaped(300), &spec, 60, 240).unwrap();
        assert_eq!(p.test.len(), 360);
        assert_eq!(p.base_train.len(), 720);
        assert_eq!(p.novel_train.len(), 15);
        assert!(p.novel_train.iter().all(|im| im.instances.len() == 1));
        let names: Vec<_> = p.spec.novel_categories.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["Pa", "Sc", "RS"]);
    }

    #[test]
    fn shortfall_names_category() {
        let cats = neu_det_categories();
        let mut images = neu_shaped(100);
        // leave only 20 Sc images after the 60-image test draw
        images.retain(|im| !(im.id.starts_with("Sc_") && im.id.as_str() >= "Sc_080"));
        let spec = SplitSpec::named("split1", &cats, 30, 0).unwrap();
        match build_ifsnd_split(&images, &spec, 60, 10) {
            Err(DatasetError::InsufficientImages {
                category,
                available,
                required,
            }) => {
                assert_eq!(category, "Sc");
                assert_eq!((available, required), (80, 90));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn test_split_is_stable_across_k() {
        let cats = neu_det_categories();
        let images = neu_shaped(100);
        let a = build_ifsnd_split(&images, &SplitSpec::named("split2", &cats, 5, 3).unwrap(), 20, 30).unwrap();
        let b = build_ifsnd_split(&images, &SplitSpec::named("split2", &cats, 30, 3).unwrap(), 20, 30).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.base_train, b.base_train);
    }

    #[test]
    fn unknown_split_and_overlap_rejected() {
        let cats = neu_det_categories();
        assert!(SplitSpec::named("split9", &cats, 5, 0).is_err());
        assert!(SplitSpec::new(vec![cats[0].clone()], vec![cats[0].clone()], 5, 0).is_err());
        assert!(SplitSpec::new(vec![cats[0].clone()], vec![cats[1].clone()], 0, 0).is_err());
    }

    #[test]
    fn k_equal_pool_returns_whole_pool() {
        let cat = CategoryId::new(3, "Pa");
        let pool: Vec<_> = (0..7).map(|i| image(format!("p{i}"), &cat, 1)).collect();
        let out = sample_k_shot(&pool, &[cat.clone()], 7, 11).unwrap();
        let mut ids: Vec<_> = out.iter().map(|i| i.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, pool.iter().map(|i| i.id.clone()).collect::<Vec<_>>());
        assert_eq!(out, sample_k_shot(&pool, &[cat], 7, 11).unwrap());
    }

    #[test]
    fn hundred_pool_five_shot() {
        let cat = CategoryId::new(3, "Pa");
        let pool: Vec<_> = (0..100).map(|i| image(format!("p{i:03}"), &cat, 1 + i % 4)).collect();
        let out = sample_k_shot(&pool, &[cat], 5, 0).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|im| im.instances.len() == 1));
    }

    #[test]
    fn kept_instance_matches_enumerated_choice() {
        // Replays the generator: shuffle of the sorted single candidate, then
        // one uniform draw over its three instances.
        let cat = CategoryId::new(3, "Pa");
        let im = image("only".into(), &cat, 3);
        for seed in 0..20u64 {
            let out = sample_k_shot(std::slice::from_ref(&im), &[cat.clone()], 1, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cands = vec![0usize];
            cands.shuffle(&mut rng);
            let expected = rng.gen_range(0..3);
            assert_eq!(out[0].instances, vec![im.instances[expected].clone()]);
        }
    }

    #[test]
    fn insufficient_pool_error() {
        let cat = CategoryId::new(3, "Pa");
        let pool: Vec<_> = (0..3).map(|i| image(format!("p{i}"), &cat, 1)).collect();
        assert!(matches!(
            sample_k_shot(&pool, &[cat], 5, 0),
            Err(DatasetError::InsufficientImages { available: 3, required: 5, .. })
        ));
    }
}
