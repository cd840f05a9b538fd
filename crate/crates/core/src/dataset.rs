//! ISIC-style dataset ingestion: pairing images with masks, splitting, and
//! loading resized, normalized samples.

use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length every sample is resized to.
pub const IMAGE_SIZE: usize = 256;
pub const ISIC2016_TRAIN_IMAGES: usize = 900;
pub const ISIC2016_TEST_IMAGES: usize = 379;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: Split,
    pub records: Vec<DatasetRecord>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Where images and masks live relative to a root and how mask names derive
/// from image stems.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub image_extensions: Vec<String>,
    pub mask_suffix: String,
    pub mask_extension: String,
}

impl DatasetLayout {
    /// Official ISIC 2016 part-1 training archive layout.
    pub fn isic2016_train() -> Self {
        Self {
            image_dir: "ISBI2016_ISIC_Part1_Training_Data".into(),
            mask_dir: "ISBI2016_ISIC_Part1_Training_GroundTruth".into(),
            ..Self::flat()
        }
    }

    pub fn isic2016_test() -> Self {
        Self {
            image_dir: "ISBI2016_ISIC_Part1_Test_Data".into(),
            mask_dir: "ISBI2016_ISIC_Part1_Test_GroundTruth".into(),
            ..Self::flat()
        }
    }

    /// Images and masks side by side in the root directory.
    pub fn flat() -> Self {
        Self {
            image_dir: ".".into(),
            mask_dir: ".".into(),
            image_extensions: vec!["jpg".into(), "jpeg".into()],
            mask_suffix: "_Segmentation".into(),
            mask_extension: "png".into(),
        }
    }

    /// ISIC 2016 layout if its image folder exists under `root`, flat otherwise.
    pub fn detect(root: &Path) -> Self {
        if root.join(Self::isic2016_train().image_dir).is_dir() {
            Self::isic2016_train()
        } else if root.join(Self::isic2016_test().image_dir).is_dir() {
            Self::isic2016_test()
        } else {
            Self::flat()
        }
    }
}

/// Pairs every image under `root` with its mask.
pub fn scan_dataset(root: &Path, layout: &DatasetLayout, split: Split) -> Result<DatasetIndex> {
    let image_dir = root.join(&layout.image_dir);
    let mask_dir = root.join(&layout.mask_dir);
    let mut images = Vec::new();
    if image_dir.is_dir() {
        for entry in std::fs::read_dir(&image_dir)? {
            let path = entry?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| {
                    layout
                        .image_extensions
                        .iter()
                        .any(|x| x.eq_ignore_ascii_case(e))
                });
            if path.is_file() && is_image {
                images.push(path);
            }
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(image_dir));
    }
    images.sort();

    let mut records = Vec::with_capacity(images.len());
    let mut missing = Vec::new();
    for image in images {
        let stem = image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mask = mask_dir.join(format!(
            "{stem}{}.{}",
            layout.mask_suffix, layout.mask_extension
        ));
        if mask.is_file() {
            records.push(DatasetRecord {
                id: stem,
                image,
                mask,
            });
        } else {
            missing.push(image);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingMask(missing));
    }
    Ok(DatasetIndex { split, records })
}

/// Deterministic shuffled partition into train and validation indices.
pub fn split_train_val(
    index: &DatasetIndex,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidFraction(val_fraction));
    }
    if index.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::new()));
    }
    let n = index.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_ids: Vec<usize> = order[..n_val].to_vec();
    let mut train_ids: Vec<usize> = order[n_val..].to_vec();
    val_ids.sort_unstable();
    train_ids.sort_unstable();
    let pick = |ids: &[usize], split| DatasetIndex {
        split,
        records: ids.iter().map(|&i| index.records[i].clone()).collect(),
    };
    Ok((pick(&train_ids, Split::Train), pick(&val_ids, Split::Val)))
}

/// One image/mask pair: image `H×W×3` in `[0, 1]`, mask `H×W` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Array2<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Checks the value-range and shape invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.shape();
        if self.image.dim() != (h, w, 3) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs mask {:?}",
                self.image.dim(),
                (h, w)
            )));
        }
        if self.image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig(format!("{}: image outside [0, 1]", self.id)));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig(format!("{}: mask not binary", self.id)));
        }
        Ok(())
    }

    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&v| v as f32).collect()
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Mask binarization: pixels brighter than 127 of 255 are lesion.
pub fn binarize_mask_pixel(v: u8) -> u8 {
    u8::from(v > 127)
}

/// Loads and resizes one record: bilinear for the image, nearest for the mask.
pub fn load_sample(record: &DatasetRecord, target: (usize, usize)) -> Result<Sample> {
    let (h, w) = target;
    let img = open(&record.image)?.to_rgb8();
    let mask = open(&record.mask)?.to_luma8();
    if img.dimensions() != mask.dimensions() {
        log::warn!(
            "{}: image {:?} and mask {:?} differ in size, resizing independently",
            record.id,
            img.dimensions(),
            mask.dimensions()
        );
    }
    let img = imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    let mask = imageops::resize(&mask, w as u32, h as u32, FilterType::Nearest);
    let image = Array3::from_shape_vec(
        (h, w, 3),
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .expect("rgb buffer matches shape");
    let mask = Array2::from_shape_vec(
        (h, w),
        mask.as_raw().iter().map(|&v| binarize_mask_pixel(v)).collect(),
    )
    .expect("gray buffer matches shape");
    Ok(Sample {
        id: record.id.clone(),
        image,
        mask,
    })
}

/// Image without ground truth, for inference; the mask is all zeros.
pub fn load_unlabeled(path: &Path, target: (usize, usize)) -> Result<Sample> {
    let (h, w) = target;
    let img = imageops::resize(&open(path)?.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
    let image = Array3::from_shape_vec(
        (h, w, 3),
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .expect("rgb buffer matches shape");
    Ok(Sample {
        id: path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string(),
        image,
        mask: Array2::zeros((h, w)),
    })
}

pub fn load_all(index: &DatasetIndex, target: (usize, usize)) -> Result<Vec<Sample>> {
    index.records.iter().map(|r| load_sample(r, target)).collect()
}

/// Persisted split so every run reuses the identical partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub data_root: PathBuf,
    pub seed: u64,
    pub val_fraction: f64,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    #[serde(default)]
    pub test: Vec<DatasetRecord>,
}

impl SplitManifest {
    pub fn new(
        data_root: &Path,
        seed: u64,
        val_fraction: f64,
        train: DatasetIndex,
        val: DatasetIndex,
        test: Option<DatasetIndex>,
    ) -> Self {
        Self {
            data_root: data_root.to_path_buf(),
            seed,
            val_fraction,
            train: train.records,
            val: val.records,
            test: test.map(|t| t.records).unwrap_or_default(),
        }
    }

    pub fn index(&self, split: Split) -> DatasetIndex {
        let records = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        DatasetIndex {
            split,
            records: records.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Dermoscopy-like toy sample: a dark textured ellipse on a noisy skin tone.
pub fn synthetic_sample(id: &str, size: usize, seed: u64) -> Sample {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (cy, cx) = (rng.gen_range(0.35..0.65) * s, rng.gen_range(0.35..0.65) * s);
    let (ry, rx) = (rng.gen_range(0.15..0.3) * s, rng.gen_range(0.15..0.3) * s);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let skin = [rng.gen_range(0.75..0.9), rng.gen_range(0.55..0.7), rng.gen_range(0.45..0.6)];
    let lesion = [rng.gen_range(0.3..0.45), rng.gen_range(0.18..0.28), rng.gen_range(0.1..0.2)];
    let (sin, cos) = theta.sin_cos();
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let u = (dx * cos + dy * sin) / rx;
        let v = (-dx * sin + dy * cos) / ry;
        u8::from(u * u + v * v <= 1.0)
    });
    let mut image = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let base = if mask[[y, x]] == 1 { lesion } else { skin };
            let n: f64 = rng.gen_range(-0.05..0.05);
            for c in 0..3 {
                image[[y, x, c]] = (base[c] + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        id: id.to_string(),
        image,
        mask,
    }
}

pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let id = format!("ISIC_{:07}", i);
            synthetic_sample(&id, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}

/// Writes `n` synthetic pairs in the ISIC 2016 training layout under `root`.
pub fn write_synthetic_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<DatasetIndex> {
    let layout = DatasetLayout::isic2016_train();
    let (img_dir, mask_dir) = (root.join(&layout.image_dir), root.join(&layout.mask_dir));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for s in synthetic_samples(n, size, seed) {
        let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let px = |c| (s.image[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(img_dir.join(format!("{}.jpg", s.id)))?;
        let mask = image::GrayImage::from_fn(size as u32, size as u32, |x, y| {
            image::Luma([s.mask[[y as usize, x as usize]] * 255])
        });
        mask.save(mask_dir.join(format!("{}_Segmentation.png", s.id)))?;
    }
    scan_dataset(root, &layout, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_pair(dir: &Path, stem: &str, w: u32, h: u32, mask_value: u8) {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 3) as u8, 128]));
        img.save(dir.join(format!("{stem}.jpg"))).unwrap();
        let mask = GrayImage::from_pixel(w, h, Luma([mask_value]));
        mask.save(dir.join(format!("{stem}_Segmentation.png"))).unwrap();
    }

    fn fake_index(n: usize) -> DatasetIndex {
        DatasetIndex {
            split: Split::Train,
            records: (0..n)
                .map(|i| DatasetRecord {
                    id: format!("ISIC_{i:07}"),
                    image: format!("{i}.jpg").into(),
                    mask: format!("{i}_Segmentation.png").into(),
                })
                .collect(),
        }
    }

    #[test]
    fn synthetic_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_synthetic_dataset(dir.path(), 3, 32, 7).unwrap();
        assert_eq!(index.len(), 3);
        let direct = synthetic_samples(3, 32, 7);
        let loaded = load_all(&index, (32, 32)).unwrap();
        for (a, b) in direct.iter().zip(&loaded) {
            assert_eq!(a.mask, b.mask);
            assert!(a.mask.iter().any(|&v| v == 1) && a.mask.iter().any(|&v| v == 0));
        }
    }

    #[test]
    fn scan_pairs_fixture() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_pair(dir.path(), &format!("ISIC_{i:07}"), 20, 16, 255);
        }
        let idx = scan_dataset(dir.path(), &DatasetLayout::flat(), Split::Train).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.records.iter().all(|r| r.mask.is_file()));
    }

    #[test]
    fn scan_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_dataset(dir.path(), &DatasetLayout::flat(), Split::Train),
            Err(Error::EmptyDataset(_))
        ));
        write_pair(dir.path(), "a", 8, 8, 0);
        RgbImage::new(8, 8).save(dir.path().join("b.jpg")).unwrap();
        match scan_dataset(dir.path(), &DatasetLayout::flat(), Split::Train) {
            Err(Error::MissingMask(m)) => assert_eq!(m, vec![dir.path().join("b.jpg")]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let idx = fake_index(900);
        let (tr, va) = split_train_val(&idx, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (720, 180));
        let mut all: Vec<_> = tr.records.iter().chain(&va.records).map(|r| r.id.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 900);
    }

    #[test]
    fn split_deterministic_and_seed_sensitive() {
        let idx = fake_index(10);
        let a = split_train_val(&idx, 0.2, 5).unwrap();
        let b = split_train_val(&idx, 0.2, 5).unwrap();
        assert_eq!(a, b);
        // C(10, 2) = 45 possible validation pairs; count distinct ones over seeds.
        let distinct: std::collections::HashSet<Vec<String>> = (0..20)
            .map(|s| {
                split_train_val(&idx, 0.2, s)
                    .unwrap()
                    .1
                    .records
                    .into_iter()
                    .map(|r| r.id)
                    .collect()
            })
            .collect();
        assert!(distinct.len() > 5);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let idx = fake_index(10);
        for f in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(split_train_val(&idx, f, 1), Err(Error::InvalidFraction(_))));
        }
    }

    #[test]
    fn load_sample_resizes_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "x", 767, 512, 255);
        let idx = scan_dataset(dir.path(), &DatasetLayout::flat(), Split::Train).unwrap();
        let s = load_sample(&idx.records[0], (256, 256)).unwrap();
        assert_eq!(s.image.dim(), (256, 256, 3));
        assert_eq!(s.mask.dim(), (256, 256));
        assert!(s.mask.iter().all(|&v| v == 1));
        s.validate().unwrap();
        let again = load_sample(&idx.records[0], (256, 256)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn gray_region_binarization_matches_threshold_oracle() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(32, 32).save(dir.path().join("g.jpg")).unwrap();
        let mask = GrayImage::from_fn(32, 32, |x, y| {
            Luma([if (8..24).contains(&x) && (8..24).contains(&y) { 128 } else { 127 }])
        });
        mask.save(dir.path().join("g_Segmentation.png")).unwrap();
        let idx = scan_dataset(dir.path(), &DatasetLayout::flat(), Split::Train).unwrap();
        let s = load_sample(&idx.records[0], (32, 32)).unwrap();
        for ((y, x), &v) in s.mask.indexed_iter() {
            let raw = mask.get_pixel(x as u32, y as u32)[0];
            assert_eq!(v, u8::from(raw as f32 / 255.0 > 0.5));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = split_train_val(&fake_index(10), 0.2, 1).unwrap();
        let m = SplitManifest::new(Path::new("/data"), 1, 0.2, tr, va, None);
        let p = dir.path().join("split.json");
        m.save(&p).unwrap();
        assert_eq!(SplitManifest::load(&p).unwrap(), m);
    }
}
