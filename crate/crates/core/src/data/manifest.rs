//! Dataset description files, deterministic split assignment, and the
//! loader that turns them into in-memory training records.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::binarize::binarize;
use super::image_io::{read_gray, read_rgb, resize_bilinear};
use super::skeleton::{mask_to_planes, skeletonize};

/// How sample files are arranged under the dataset root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `root/noisy/<id>.png`, `root/clean/<id>.png`, and optionally
    /// `root/skeleton/<id>.png`.
    TripletDirs,
    /// `root/pairs/<id>.png` holding noisy and clean halves side by side.
    PairedSideBySide,
}

impl Layout {
    pub fn label(self) -> &'static str {
        match self {
            Layout::TripletDirs => "triplet_dirs",
            Layout::PairedSideBySide => "paired_sidebyside",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "triplet_dirs" => Ok(Layout::TripletDirs),
            "paired_sidebyside" => Ok(Layout::PairedSideBySide),
            other => Err(Error::Config(format!(
                "unknown layout {other:?}; expected triplet_dirs or paired_sidebyside"
            ))),
        }
    }
}

/// Which half of a side-by-side pair holds the degraded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::Config(format!(
                "unknown side {other:?}; expected left or right"
            ))),
        }
    }
}

/// Partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One loaded training example: degraded input, clean target, and a
/// binary skeleton target, all at the manifest's target size.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    /// `(3, H, W)` in `[0,1]`.
    pub noisy: Array3<f32>,
    /// `(3, H, W)` in `[0,1]`.
    pub clean: Array3<f32>,
    /// `(1, H, W)` in `{0,1}`.
    pub skeleton: Array3<f32>,
    /// Where the record came from, for diagnostics.
    pub source: String,
}

/// Parsed dataset description.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: Layout,
    pub noisy_side: Side,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub target_height: usize,
    pub target_width: usize,
    /// Explicit id list; when absent, ids are discovered by scanning.
    pub ids: Option<Vec<String>>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            layout: Layout::TripletDirs,
            noisy_side: Side::Left,
            train_fraction: 0.7,
            val_fraction: 0.0,
            test_fraction: 0.3,
            seed: 0,
            target_height: 256,
            target_width: 256,
            ids: None,
        }
    }
}

impl DatasetManifest {
    /// Parse `key = value` text; `base` anchors relative roots.
    /// Unknown keys are ignored so manifests stay forward-compatible.
    pub fn from_kv(text: &str, base: &Path) -> Result<Self> {
        let mut m = DatasetManifest {
            root: base.to_path_buf(),
            ..DatasetManifest::default()
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "manifest line {} is not `key = value`: {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("manifest key {key} has invalid {what}: {value:?}"))
            };
            match key {
                "root" => {
                    let p = PathBuf::from(value);
                    m.root = if p.is_absolute() { p } else { base.join(p) };
                }
                "layout" => m.layout = Layout::parse(value)?,
                "noisy_side" => m.noisy_side = Side::parse(value)?,
                "train_fraction" => {
                    m.train_fraction = value.parse().map_err(|_| bad("fraction"))?
                }
                "val_fraction" => m.val_fraction = value.parse().map_err(|_| bad("fraction"))?,
                "test_fraction" => m.test_fraction = value.parse().map_err(|_| bad("fraction"))?,
                "seed" => m.seed = value.parse().map_err(|_| bad("integer"))?,
                "target_height" => {
                    m.target_height = value.parse().map_err(|_| bad("integer"))?
                }
                "target_width" => m.target_width = value.parse().map_err(|_| bad("integer"))?,
                "ids" => {
                    let list: Vec<String> = value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                    m.ids = Some(list);
                }
                _ => {}
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Read and parse a manifest file; its directory anchors relative
    /// paths.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) || !f.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must lie in [0,1], got {f}"
                )));
            }
        }
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::Config(format!(
                "target size must be positive, got {}x{}",
                self.target_height, self.target_width
            )));
        }
        Ok(())
    }

    /// The ids this manifest covers: the explicit list when given,
    /// otherwise a sorted scan of the layout's image directory.
    pub fn resolve_ids(&self) -> Result<Vec<String>> {
        if let Some(ids) = &self.ids {
            if ids.is_empty() {
                return Err(Error::Config("manifest lists no ids".into()));
            }
            return Ok(ids.clone());
        }
        let dir = match self.layout {
            Layout::TripletDirs => self.root.join("noisy"),
            Layout::PairedSideBySide => self.root.join("pairs"),
        };
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut ids: Vec<String> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::ingest(&dir, "no .png files found"));
        }
        ids.sort();
        Ok(ids)
    }
}

/// Deterministic shuffled split: ids are permuted with a seeded
/// Fisher-Yates pass and cut at rounded cumulative fractions, so the
/// same manifest always produces the same partition.
pub fn assign_splits(
    ids: &[String],
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Vec<(String, Split)> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_train_val = (n as f64 * (train_fraction + val_fraction)).round() as usize;
    let mut out = vec![(String::new(), Split::Train); n];
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train_val {
            Split::Val
        } else {
            Split::Test
        };
        out[idx] = (ids[idx].clone(), split);
    }
    out
}

/// Cut a side-by-side `(C, H, 2W)` image into its two halves.
pub fn split_pair(paired: &Array3<f32>) -> Result<(Array3<f32>, Array3<f32>)> {
    let (_, _, w) = paired.dim();
    if w == 0 || w % 2 != 0 {
        return Err(Error::Input(format!(
            "side-by-side pair must have even positive width, got {w}"
        )));
    }
    let left = paired.slice(ndarray::s![.., .., ..w / 2]).to_owned();
    let right = paired.slice(ndarray::s![.., .., w / 2..]).to_owned();
    Ok((left, right))
}

/// Binary skeleton target derived from a clean image: threshold, then
/// thin to one-pixel strokes.
pub fn skeleton_from_clean(clean: &Array3<f32>) -> Result<Array3<f32>> {
    Ok(mask_to_planes(&skeletonize(&binarize(clean)?)))
}

/// Stack records into `(noisy, clean, skeleton)` batches of shape
/// `(B, C, H, W)`. All records must share one image size.
pub fn stack_batch(
    records: &[&SampleRecord],
) -> Result<(
    crate::model::ImageBatch,
    crate::model::ImageBatch,
    crate::model::ImageBatch,
)> {
    if records.is_empty() {
        return Err(Error::Input("cannot stack an empty batch".into()));
    }
    let (h, w) = {
        let d = records[0].noisy.dim();
        (d.1, d.2)
    };
    let b = records.len();
    let mut noisy = ndarray::Array4::<f32>::zeros((b, 3, h, w));
    let mut clean = ndarray::Array4::<f32>::zeros((b, 3, h, w));
    let mut skeleton = ndarray::Array4::<f32>::zeros((b, 1, h, w));
    for (i, rec) in records.iter().enumerate() {
        if rec.noisy.dim() != (3, h, w)
            || rec.clean.dim() != (3, h, w)
            || rec.skeleton.dim() != (1, h, w)
        {
            return Err(Error::Shape(format!(
                "record {} does not match batch geometry (3, {h}, {w})",
                rec.id
            )));
        }
        noisy
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&rec.noisy);
        clean
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&rec.clean);
        skeleton
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&rec.skeleton);
    }
    Ok((noisy.into(), clean.into(), skeleton.into()))
}

fn load_skeleton(
    path: &Path,
    clean: &Array3<f32>,
    height: usize,
    width: usize,
) -> Result<Array3<f32>> {
    if path.is_file() {
        let planes = read_gray(path)?;
        let planes = resize_bilinear(&planes, height, width)?;
        Ok(planes.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }))
    } else {
        skeleton_from_clean(clean)
    }
}

/// Load every record the manifest describes, resized to the target
/// size, with split labels assigned deterministically from the seed.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<SampleRecord>> {
    let ids = manifest.resolve_ids()?;
    let splits = assign_splits(
        &ids,
        manifest.train_fraction,
        manifest.val_fraction,
        manifest.seed,
    );
    let (th, tw) = (manifest.target_height, manifest.target_width);
    let source = format!("{}:{}", manifest.layout.label(), manifest.root.display());
    let mut records = Vec::with_capacity(ids.len());
    for (id, split) in splits {
        let (noisy, clean) = match manifest.layout {
            Layout::TripletDirs => {
                let noisy_path = manifest.root.join("noisy").join(format!("{id}.png"));
                let clean_path = manifest.root.join("clean").join(format!("{id}.png"));
                if !noisy_path.is_file() {
                    return Err(Error::ingest(
                        &noisy_path,
                        format!("record {id}: degraded image missing"),
                    ));
                }
                if !clean_path.is_file() {
                    return Err(Error::ingest(
                        &clean_path,
                        format!("record {id}: clean image missing"),
                    ));
                }
                (read_rgb(&noisy_path)?, read_rgb(&clean_path)?)
            }
            Layout::PairedSideBySide => {
                let pair_path = manifest.root.join("pairs").join(format!("{id}.png"));
                if !pair_path.is_file() {
                    return Err(Error::ingest(
                        &pair_path,
                        format!("record {id}: paired image missing"),
                    ));
                }
                let paired = read_rgb(&pair_path)?;
                let (left, right) = split_pair(&paired).map_err(|e| {
                    Error::ingest(&pair_path, format!("record {id}: {e}"))
                })?;
                match manifest.noisy_side {
                    Side::Left => (left, right),
                    Side::Right => (right, left),
                }
            }
        };
        let noisy = resize_bilinear(&noisy, th, tw)?;
        let clean = resize_bilinear(&clean, th, tw)?;
        let skeleton = match manifest.layout {
            Layout::TripletDirs => {
                let path = manifest.root.join("skeleton").join(format!("{id}.png"));
                load_skeleton(&path, &clean, th, tw)?
            }
            Layout::PairedSideBySide => skeleton_from_clean(&clean)?,
        };
        records.push(SampleRecord {
            id,
            split,
            noisy,
            clean,
            skeleton,
            source: source.clone(),
        });
    }
    Ok(records)
}
