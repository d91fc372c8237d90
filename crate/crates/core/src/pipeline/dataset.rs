use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use super::PipelineError;
use crate::color::RgbImage;
use crate::convnet::PATCH_SIZE;
use crate::io::{load_png, save_png};

/// A single annotated training or test patch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub image: RgbImage,
    pub label: usize,
}

impl LabeledPatch {
    pub fn new(image: RgbImage, label: usize) -> Result<Self, PipelineError> {
        if image.width() != PATCH_SIZE || image.height() != PATCH_SIZE {
            return Err(PipelineError::BadPatchSize {
                path: Default::default(),
                width: image.width(),
                height: image.height(),
            });
        }
        Ok(Self { image, label })
    }
}

/// Patches grouped by class, in class-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    classes: Vec<Vec<RgbImage>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, classes: Vec<Vec<RgbImage>>) -> Result<Self, PipelineError> {
        if class_names.len() != classes.len() {
            return Err(PipelineError::InvalidDataset(format!(
                "{} class names for {} classes",
                class_names.len(),
                classes.len()
            )));
        }
        if classes.len() < 2 {
            return Err(PipelineError::InvalidDataset(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        for (name, patches) in class_names.iter().zip(&classes) {
            if patches.is_empty() {
                return Err(PipelineError::EmptyClass(name.into()));
            }
            if let Some(bad) = patches
                .iter()
                .find(|p| p.width() != PATCH_SIZE || p.height() != PATCH_SIZE)
            {
                return Err(PipelineError::BadPatchSize {
                    path: name.into(),
                    width: bad.width(),
                    height: bad.height(),
                });
            }
        }
        Ok(Self { class_names, classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_patches(&self, class: usize) -> &[RgbImage] {
        &self.classes[class]
    }

    /// Total number of patches.
    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All patches with their labels, class by class.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &RgbImage)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(label, patches)| patches.iter().map(move |p| (label, p)))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.iter().map(|(label, _)| label).collect()
    }

    /// Applies `f` to every patch (in parallel), keeping labels and order.
    pub fn try_map<F>(&self, f: F) -> Result<Dataset, PipelineError>
    where
        F: Fn(&RgbImage) -> Result<RgbImage, PipelineError> + Sync,
    {
        use rayon::prelude::*;
        let classes = self
            .classes
            .iter()
            .map(|patches| patches.par_iter().map(&f).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        Dataset::new(self.class_names.clone(), classes)
    }

    /// Moves a seeded random `fraction` of every class (rounded down, but
    /// always leaving at least one training patch) into a held-out list.
    pub fn split_holdout<R: Rng>(&self, fraction: f64, rng: &mut R) -> (Dataset, Vec<LabeledPatch>) {
        let mut train = Vec::with_capacity(self.classes.len());
        let mut held = Vec::new();
        for (label, patches) in self.classes.iter().enumerate() {
            let n = patches.len();
            let k = ((n as f64 * fraction).floor() as usize).min(n - 1);
            let mut picked = sample(rng, n, k).into_vec();
            picked.sort_unstable();
            let mut keep = Vec::with_capacity(n - k);
            let mut next = picked.iter().peekable();
            for (i, p) in patches.iter().enumerate() {
                if next.peek() == Some(&&i) {
                    next.next();
                    held.push(LabeledPatch {
                        image: p.clone(),
                        label,
                    });
                } else {
                    keep.push(p.clone());
                }
            }
            train.push(keep);
        }
        let train = Dataset {
            class_names: self.class_names.clone(),
            classes: train,
        };
        (train, held)
    }
}

/// Loads `root/<class>/*.png`; classes are the subdirectories in lexicographic order.
pub fn load_dataset(root: &Path) -> Result<Dataset, PipelineError> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .map(|e| e.path())
        .collect();
    dirs.sort();
    let mut names = Vec::with_capacity(dirs.len());
    let mut classes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(PipelineError::EmptyClass(dir));
        }
        let mut patches = Vec::with_capacity(files.len());
        for file in files {
            let img = load_png(&file)?;
            if img.width() != PATCH_SIZE || img.height() != PATCH_SIZE {
                return Err(PipelineError::BadPatchSize {
                    path: file,
                    width: img.width(),
                    height: img.height(),
                });
            }
            patches.push(img);
        }
        names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        classes.push(patches);
    }
    Dataset::new(names, classes)
}

/// Writes the dataset in the layout read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<(), PipelineError> {
    for (name, patches) in dataset.class_names.iter().zip(&dataset.classes) {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for (i, p) in patches.iter().enumerate() {
            save_png(p, &dir.join(format!("{i:05}.png")))?;
        }
    }
    Ok(())
}

/// The patch and its 90, 180 and 270 degree clockwise rotations.
pub fn rotations_of(patch: &LabeledPatch) -> [LabeledPatch; 4] {
    let r1 = patch.image.rotate90();
    let r2 = r1.rotate90();
    let r3 = r2.rotate90();
    [patch.image.clone(), r1, r2, r3].map(|image| LabeledPatch {
        image,
        label: patch.label,
    })
}

/// Draws a class-balanced batch: every class gets `batch_size / K` patches and
/// `batch_size % K` distinct random classes get one more. Patches are drawn
/// with replacement; with `augment` each gets a uniformly random rotation.
pub fn sample_balanced_batch<R: Rng>(
    dataset: &Dataset,
    batch_size: usize,
    augment: bool,
    rng: &mut R,
) -> Result<Vec<LabeledPatch>, PipelineError> {
    let k = dataset.num_classes();
    if batch_size < k {
        return Err(PipelineError::BatchTooSmall {
            batch: batch_size,
            classes: k,
        });
    }
    let mut counts = vec![batch_size / k; k];
    for c in sample(rng, k, batch_size % k) {
        counts[c] += 1;
    }
    let mut batch = Vec::with_capacity(batch_size);
    for (label, &count) in counts.iter().enumerate() {
        let patches = &dataset.classes[label];
        for _ in 0..count {
            let mut image = patches[rng.random_range(0..patches.len())].clone();
            if augment {
                for _ in 0..rng.random_range(0..4) {
                    image = image.rotate90();
                }
            }
            batch.push(LabeledPatch { image, label });
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(seed: u8) -> RgbImage {
        let data = (0..PATCH_SIZE * PATCH_SIZE * 3)
            .map(|i| (i as u8).wrapping_mul(seed))
            .collect();
        RgbImage::new(PATCH_SIZE, PATCH_SIZE, data).unwrap()
    }

    fn dataset(k: usize, per_class: usize) -> Dataset {
        let names = (0..k).map(|c| format!("class{c}")).collect();
        let classes = (0..k)
            .map(|c| (0..per_class).map(|i| patch((c * per_class + i + 1) as u8)).collect())
            .collect();
        Dataset::new(names, classes).unwrap()
    }

    #[test]
    fn rotations_close_the_group() {
        let p = LabeledPatch::new(patch(3), 2).unwrap();
        let rots = rotations_of(&p);
        assert_eq!(rots.len(), 4);
        assert!(rots.iter().all(|r| r.label == 2));
        assert_eq!(rots[3].image.rotate90(), p.image);
        assert_ne!(rots[1].image, p.image);

        let flat = LabeledPatch::new(RgbImage::filled(150, 150, [200, 100, 50]), 0).unwrap();
        let rots = rotations_of(&flat);
        assert!(rots.iter().all(|r| r.image == flat.image));
    }

    #[test]
    fn balanced_counts() {
        let ds = dataset(9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let batch = sample_balanced_batch(&ds, 256, true, &mut rng).unwrap();
            assert_eq!(batch.len(), 256);
            let mut counts = [0usize; 9];
            batch.iter().for_each(|p| counts[p.label] += 1);
            assert!(counts.iter().all(|&c| c == 28 || c == 29));
            assert_eq!(counts.iter().filter(|&&c| c == 29).count(), 4);
        }
        let batch = sample_balanced_batch(&ds, 9, false, &mut rng).unwrap();
        let mut labels: Vec<_> = batch.iter().map(|p| p.label).collect();
        labels.sort();
        assert_eq!(labels, (0..9).collect::<Vec<_>>());
        assert!(matches!(
            sample_balanced_batch(&ds, 5, false, &mut rng),
            Err(PipelineError::BatchTooSmall { batch: 5, classes: 9 })
        ));
    }

    #[test]
    fn unaugmented_batches_draw_dataset_patches() {
        let ds = dataset(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_balanced_batch(&ds, 10, false, &mut rng).unwrap();
        for p in batch {
            assert!(ds.class_patches(p.label).contains(&p.image));
        }
    }

    #[test]
    fn holdout_split_partitions_each_class() {
        let ds = dataset(3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (train, held) = ds.split_holdout(0.2, &mut rng);
        assert_eq!(train.len(), 24);
        assert_eq!(held.len(), 6);
        for p in &held {
            assert!(ds.class_patches(p.label).contains(&p.image));
            assert!(!train.class_patches(p.label).contains(&p.image));
        }
        let (train, held) = dataset(2, 1).split_holdout(0.9, &mut rng);
        assert_eq!((train.len(), held.len()), (2, 0));
    }

    #[test]
    fn directory_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(3, 2);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);

        fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(PipelineError::EmptyClass(_))));
        fs::remove_dir(dir.path().join("empty")).unwrap();

        let small = RgbImage::filled(100, 100, [1, 2, 3]);
        let bad = dir.path().join("class1").join("zz.png");
        save_png(&small, &bad).unwrap();
        match load_dataset(dir.path()) {
            Err(PipelineError::BadPatchSize { path, width, height }) => {
                assert_eq!(path, bad);
                assert_eq!((width, height), (100, 100));
            }
            other => panic!("expected BadPatchSize, got {other:?}"),
        }
    }

    #[test]
    fn constructor_validates() {
        assert!(Dataset::new(vec!["a".into()], vec![vec![patch(1)]]).is_err());
        assert!(Dataset::new(vec!["a".into(), "b".into()], vec![vec![patch(1)], vec![]]).is_err());
        assert!(LabeledPatch::new(RgbImage::filled(10, 150, [0; 3]), 0).is_err());
    }
}
