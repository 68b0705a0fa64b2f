//! Dataset ingestion, splitting, augmentation and batching.

mod augment;
mod image;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

pub use augment::{augment, AugmentConfig};
pub use image::{decode_image, load_image, resize_bilinear};
pub use synth::synth_dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: String, message: String },
    #[error("dataset at {root} has {found} usable class directories, need at least 2")]
    TooFewClasses { root: PathBuf, found: usize },
    #[error("class `{class}` has {count} samples, too few for a {parts:?} split")]
    ClassTooSmall {
        class: String,
        count: usize,
        parts: [usize; 3],
    },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    Fractions([f64; 3]),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Where a sample's pixels come from.
#[derive(Clone)]
pub enum SampleSource {
    Path(PathBuf),
    /// Pre-rendered H×W×3 image in [0, 1].
    Buffer(Arc<Tensor<f32>>),
}

impl fmt::Debug for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSource::Path(p) => write!(f, "Path({})", p.display()),
            SampleSource::Buffer(t) => write!(f, "Buffer({:?})", t.shape()),
        }
    }
}

impl SampleSource {
    /// Path, or `#<i>` for in-memory samples.
    pub fn describe(&self, index: usize) -> String {
        match self {
            SampleSource::Path(p) => p.display().to_string(),
            SampleSource::Buffer(_) => format!("#{index}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: SampleSource,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    /// Sorted, duplicate-free.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub source_root: Option<PathBuf>,
    pub exclusions: Vec<Exclusion>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Plain-text exclusion report, one `path<TAB>reason` line each.
    pub fn exclusion_report(&self) -> String {
        self.exclusions
            .iter()
            .map(|e| format!("{}\t{}\n", e.path.display(), e.reason))
            .collect()
    }

    pub fn load(&self, sample: usize, size: (usize, usize)) -> Result<Tensor<f32>> {
        load_image(&self.samples[sample].source, size)
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Indexes `root/<class>/*.{jpg,jpeg,png}`. Every file is decoded once;
/// undecodable files and empty class directories are reported in
/// `exclusions` instead of failing the scan.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut class_dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.file_type().map_err(io_err(root))?.is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();

    let mut exclusions = Vec::new();
    let mut classes: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for dir in class_dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if !path.is_file() {
                continue;
            }
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                files.push(path);
            } else {
                exclusions.push(Exclusion {
                    path,
                    reason: "unsupported file type".into(),
                });
            }
        }
        files.sort();
        let checked: Vec<(PathBuf, Option<String>)> = files
            .into_par_iter()
            .map(|p| {
                let err = std::fs::read(&p)
                    .map_err(|e| e.to_string())
                    .and_then(|bytes| image::decode_rgb(&bytes).map(|_| ()).map_err(|e| e.to_string()))
                    .err();
                (p, err)
            })
            .collect();
        let mut good = Vec::new();
        for (p, err) in checked {
            match err {
                None => good.push(p),
                Some(reason) => {
                    log::warn!("excluding {}: {reason}", p.display());
                    exclusions.push(Exclusion { path: p, reason });
                }
            }
        }
        if good.is_empty() {
            log::warn!("skipping empty class directory {}", dir.display());
            exclusions.push(Exclusion {
                path: dir,
                reason: "empty class directory".into(),
            });
            continue;
        }
        classes.push((name, good));
    }
    if classes.len() < 2 {
        return Err(DataError::TooFewClasses {
            root: root.to_path_buf(),
            found: classes.len(),
        });
    }
    let mut index = DatasetIndex {
        source_root: Some(root.to_path_buf()),
        exclusions,
        ..Default::default()
    };
    for (label, (name, files)) in classes.into_iter().enumerate() {
        index.class_names.push(name);
        index.samples.extend(files.into_iter().map(|p| Sample {
            source: SampleSource::Path(p),
            label,
        }));
    }
    Ok(index)
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Sample indices of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Part sizes for one class of `n`: floor, floor, remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = (fractions[0] * n as f64 + 1e-9).floor() as usize;
    let val = ((fractions[1] * n as f64 + 1e-9).floor() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Stratified split: each class is shuffled with a generator derived from
/// `seed` and the class index, then cut floor/floor/remainder.
pub fn split_dataset(index: &DatasetIndex, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); index.num_classes()];
    for (i, s) in index.samples.iter().enumerate() {
        per_class[s.label].push(i);
    }
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in per_class.into_iter().enumerate() {
        let parts = split_sizes(members.len(), fractions);
        if members.len() < 3 || parts.iter().zip(fractions).any(|(&p, f)| f > 0.0 && p == 0) {
            return Err(DataError::ClassTooSmall {
                class: index.class_names[class].clone(),
                count: members.len(),
                parts,
            });
        }
        Rng::derive(seed, &[class as u64]).shuffle(&mut members);
        let (train, rest) = members.split_at(parts[0]);
        let (val, test) = rest.split_at(parts[1]);
        split.train.extend_from_slice(train);
        split.validation.extend_from_slice(val);
        split.test.extend_from_slice(test);
    }
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
    pub shuffle: bool,
    pub augment: Option<AugmentConfig>,
}

impl BatchConfig {
    pub fn new(image_size: (usize, usize), seed: u64) -> Self {
        BatchConfig {
            batch_size: 32,
            image_size,
            seed,
            shuffle: true,
            augment: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// N×H×W×3.
    pub images: Tensor<f32>,
    /// N×K one-hot.
    pub labels: Tensor<f32>,
    pub classes: Vec<usize>,
    /// Indices into the dataset's samples.
    pub sample_ids: Vec<usize>,
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[classes.len(), num_classes]).expect("non-empty shape");
    for (row, &c) in classes.iter().enumerate() {
        t.data_mut()[row * num_classes + c] = 1.0;
    }
    t
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Sample order for one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(ids: &[usize], seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order = ids.to_vec();
    if shuffle {
        Rng::derive(seed, &[0x5eed, epoch as u64]).shuffle(&mut order);
    }
    order
}

/// Loads (and optionally augments) one batch. Augmentation draws come from
/// a generator derived from `(seed, epoch, sample id)`, so results do not
/// depend on how the batch is scheduled across threads.
pub fn load_batch(index: &DatasetIndex, ids: &[usize], epoch: usize, config: &BatchConfig) -> Result<Batch> {
    if ids.is_empty() {
        return Err(DataError::Invalid("empty batch".into()));
    }
    let (h, w) = config.image_size;
    let images: Vec<Tensor<f32>> = ids
        .par_iter()
        .map(|&id| {
            let img = index.load(id, config.image_size)?;
            Ok(match &config.augment {
                Some(aug) => {
                    let mut rng = Rng::derive(config.seed, &[0xa06, epoch as u64, id as u64]);
                    augment(&img, aug, &mut rng)
                }
                None => img,
            })
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(ids.len() * h * w * 3);
    for img in &images {
        data.extend_from_slice(img.data());
    }
    let classes: Vec<usize> = ids.iter().map(|&i| index.samples[i].label).collect();
    Ok(Batch {
        images: Tensor::new(&[ids.len(), h, w, 3], data)?,
        labels: one_hot(&classes, index.num_classes()),
        classes,
        sample_ids: ids.to_vec(),
    })
}

/// All batches of one epoch over `ids`, in order. The last batch may be short.
pub fn make_batches<'a>(
    index: &'a DatasetIndex,
    ids: &[usize],
    epoch: usize,
    config: &'a BatchConfig,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    let order = epoch_order(ids, config.seed, epoch, config.shuffle);
    let size = config.batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |c| load_batch(index, &c, epoch, config))
}
