//! Dataset registry, manifest ingestion, and the synthetic benchmark corpus.
//!
//! Real corpora are described by a UTF-8 CSV manifest with header
//! `id,path,label,split`; audio files are 16-bit PCM WAV, resolved relative
//! to the manifest's directory. The synthetic dataset generates one-second
//! harmonic tones (distinct fundamental per class) and exists so experiments
//! and tests run at desk scale without shipping any audio.

mod features;

pub use features::{
    cache_read, cache_write, extract_logmel, hz_to_mel, mel_center_frequencies, mel_filterbank,
    mel_to_hz, FeatureConfig, FeatureError, FeatureTensor, LogMelExtractor,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;
use crate::{ClipId, Label};

/// Names accepted by [`load_dataset`] and the experiment config.
pub const DATASET_REGISTRY: &[&str] = &["ls-100", "nsynth-100", "synthetic"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset {name:?}; registered datasets: {known:?}")]
    UnknownDataset { name: String, known: Vec<String> },
    #[error("dataset {0:?} is generated on the fly; use generate_synthetic instead of a manifest")]
    SyntheticHasNoManifest(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("manifest row {row} points at missing audio file {path}")]
    MissingAudio { row: usize, path: PathBuf },
    #[error("failed to decode audio file {path}: {message}")]
    CorruptAudio { path: PathBuf, message: String },
    #[error("duplicate clip id {0:?}")]
    DuplicateId(ClipId),
    #[error("split {split:?} of dataset {name:?} is empty")]
    EmptySplit { name: String, split: Split },
    #[error("clip {id:?}: {problem}")]
    InvalidClip { id: ClipId, problem: String },
    #[error("synthetic dataset needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Train/test partition of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

/// A labeled waveform. Amplitudes live in `[-1, 1]` and are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: ClipId,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Label,
}

impl AudioClip {
    pub fn new(
        id: ClipId,
        samples: Vec<f64>,
        sample_rate: u32,
        label: Label,
    ) -> Result<Self, DataError> {
        if sample_rate == 0 {
            return Err(DataError::InvalidClip {
                id,
                problem: "sample_rate must be positive".into(),
            });
        }
        if samples.is_empty() {
            return Err(DataError::InvalidClip {
                id,
                problem: "waveform is empty".into(),
            });
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(DataError::InvalidClip {
                id,
                problem: format!("amplitude {bad} outside [-1, 1]"),
            });
        }
        Ok(Self {
            id,
            samples,
            sample_rate,
            label,
        })
    }
}

/// Where a clip's audio comes from when it is actually needed.
#[derive(Debug, Clone)]
enum ClipSource {
    Wav(PathBuf),
    Synthetic { f0: f64, seed: u64, stream: String },
}

/// One manifest row / generated clip; audio loads lazily.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: ClipId,
    pub label: Label,
    source: ClipSource,
}

impl DatasetItem {
    pub fn load(&self, sample_rate: u32) -> Result<AudioClip, DataError> {
        match &self.source {
            ClipSource::Wav(path) => read_wav(path, &self.id, &self.label),
            ClipSource::Synthetic { f0, seed, stream } => Ok(synthesize_tone(
                self.id.clone(),
                self.label.clone(),
                *f0,
                *seed,
                stream,
                sample_rate,
            )),
        }
    }
}

/// An ordered collection of clips for one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    items: Vec<DatasetItem>,
    class_set: BTreeSet<Label>,
}

impl Dataset {
    fn from_items(name: String, split: Split, items: Vec<DatasetItem>) -> Result<Self, DataError> {
        if items.is_empty() {
            return Err(DataError::EmptySplit { name, split });
        }
        let mut ids = BTreeSet::new();
        for item in &items {
            if !ids.insert(&item.id) {
                return Err(DataError::DuplicateId(item.id.clone()));
            }
        }
        let class_set = items.iter().map(|i| i.label.clone()).collect();
        Ok(Self {
            name,
            split,
            items,
            class_set,
        })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_set(&self) -> &BTreeSet<Label> {
        &self.class_set
    }

    /// Class labels in sorted order; input to schedule construction.
    pub fn class_labels(&self) -> Vec<Label> {
        self.class_set.iter().cloned().collect()
    }

    pub fn item(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// Loads a registered manifest-backed dataset.
///
/// The manifest is CSV with header `id,path,label,split`; only rows of the
/// requested split are kept, and every referenced audio file must exist.
pub fn load_dataset(name: &str, manifest_path: &Path, split: Split) -> Result<Dataset, DataError> {
    match name {
        "ls-100" | "nsynth-100" => {}
        "synthetic" => return Err(DataError::SyntheticHasNoManifest(name.into())),
        other => {
            return Err(DataError::UnknownDataset {
                name: other.into(),
                known: DATASET_REGISTRY.iter().map(|s| s.to_string()).collect(),
            })
        }
    }

    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest_path).map_err(|e| DataError::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Manifest {
            path: manifest_path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let expected = ["id", "path", "label", "split"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Manifest {
            path: manifest_path.to_path_buf(),
            message: format!("header must be {:?}, got {:?}", expected.join(","), headers),
        });
    }

    let mut items = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| DataError::Manifest {
            path: manifest_path.to_path_buf(),
            message: format!("row {}: {e}", row_idx + 2),
        })?;
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let row_split: Split = get(3).parse().map_err(|e| DataError::Manifest {
            path: manifest_path.to_path_buf(),
            message: format!("row {}: {e}", row_idx + 2),
        })?;
        if row_split != split {
            continue;
        }
        let audio_path = base.join(get(1));
        if !audio_path.is_file() {
            return Err(DataError::MissingAudio {
                row: row_idx + 2,
                path: audio_path,
            });
        }
        items.push(DatasetItem {
            id: get(0),
            label: get(2),
            source: ClipSource::Wav(audio_path),
        });
    }
    Dataset::from_items(name.to_string(), split, items)
}

fn read_wav(path: &Path, id: &str, label: &str) -> Result<AudioClip, DataError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| DataError::CorruptAudio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(DataError::CorruptAudio {
            path: path.to_path_buf(),
            message: format!(
                "expected 16-bit PCM, got {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let channels = spec.channels as usize;
    let raw: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let raw = raw.map_err(|e| DataError::CorruptAudio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    // Downmix interleaved channels by averaging.
    let samples: Vec<f64> = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / frame.len() as f64)
        .collect();
    AudioClip::new(id.to_string(), samples, spec.sample_rate, label.to_string())
}

/// Fundamental frequency assigned to synthetic class index `c`.
fn synthetic_f0(class_idx: usize) -> f64 {
    200.0 + 100.0 * class_idx as f64
}

fn synthesize_tone(
    id: ClipId,
    label: Label,
    f0: f64,
    seed: u64,
    stream: &str,
    sample_rate: u32,
) -> AudioClip {
    let mut rng = rng::stream(seed, stream);
    let n = sample_rate as usize;
    let nyquist = sample_rate as f64 / 2.0;
    let noise = Normal::new(0.0, 0.05).unwrap();

    // Fundamental plus two harmonics, each with jittered amplitude and a
    // random phase; harmonics above Nyquist are dropped.
    let base_amps = [0.6, 0.25, 0.15];
    let mut partials = Vec::new();
    for (h, base) in base_amps.iter().enumerate() {
        let freq = f0 * (h + 1) as f64;
        let amp = base * rng.random_range(0.8..1.2);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        if freq < nyquist {
            partials.push((freq, amp, phase));
        }
    }

    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let tone: f64 = partials
                .iter()
                .map(|(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            tone + noise.sample(&mut rng)
        })
        .collect();

    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.99 {
        let scale = 0.99 / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }

    AudioClip {
        id,
        samples,
        sample_rate,
        label,
    }
}

/// Generates the synthetic separable dataset: `per_class` one-second clips
/// for each of `num_classes` harmonic-tone classes. Train and test splits
/// draw from disjoint seeded streams.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::TooFewClasses(num_classes));
    }
    let mut items = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let label = format!("c{c:03}");
        for k in 0..per_class {
            let stream = format!("synthetic-{split}-{c}-{k}");
            items.push(DatasetItem {
                id: format!("syn-{split}-{label}-{k:03}"),
                label: label.clone(),
                source: ClipSource::Synthetic {
                    f0: synthetic_f0(c),
                    seed,
                    stream,
                },
            });
        }
    }
    Dataset::from_items("synthetic".into(), split, items)
}

/// All clip features for one experiment, extracted once and indexed by id.
///
/// Model inputs are per-clip mean/variance normalized views of the raw
/// log-mel tensors; the on-disk cache keeps the raw values.
pub struct FeatureStore {
    features: BTreeMap<ClipId, Array2<f64>>,
    n_mels: usize,
    n_frames: usize,
}

/// Per-clip standardization; keeps conv activations at unit scale.
fn normalize_clip(values: &mut Array2<f64>) {
    let n = values.len() as f64;
    let mean = values.sum() / n;
    let var = values.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let std = var.sqrt() + 1e-5;
    values.mapv_inplace(|v| (v - mean) / std);
}

impl FeatureStore {
    /// Extracts (or loads from `cache_dir`) features for every clip in the
    /// given datasets.
    pub fn build(
        datasets: &[&Dataset],
        cfg: &FeatureConfig,
        cache_dir: Option<&Path>,
    ) -> Result<Self, DataError> {
        let extractor = LogMelExtractor::new(cfg.clone())?;
        let mut features = BTreeMap::new();
        for dataset in datasets {
            for item in dataset.items() {
                if features.contains_key(&item.id) {
                    continue;
                }
                let cached = cache_dir.and_then(|dir| cache_read(dir, &item.id, cfg));
                let tensor = match cached {
                    Some(t) => t,
                    None => {
                        let clip = item.load(cfg.sample_rate)?;
                        let t = extractor.extract(&clip)?;
                        if let Some(dir) = cache_dir {
                            cache_write(dir, &item.id, &t, cfg)?;
                        }
                        t
                    }
                };
                let mut values = tensor.values;
                normalize_clip(&mut values);
                features.insert(item.id.clone(), values);
            }
        }
        Ok(Self {
            features,
            n_mels: cfg.n_mels,
            n_frames: cfg.n_frames(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn get(&self, id: &str) -> Option<&Array2<f64>> {
        self.features.get(id)
    }

    /// Stacks clips into a `(batch, 1, n_mels, n_frames)` input tensor.
    ///
    /// Panics if an id is unknown; the store is built from the same datasets
    /// the schedule draws ids from.
    pub fn batch(&self, ids: &[&ClipId]) -> Array4<f64> {
        let mut out = Array4::zeros((ids.len(), 1, self.n_mels, self.n_frames));
        for (b, id) in ids.iter().enumerate() {
            let feat = self
                .features
                .get(*id)
                .unwrap_or_else(|| panic!("clip {id} missing from feature store"));
            out.index_axis_mut(ndarray::Axis(0), b)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(feat);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_classes() {
        let d = generate_synthetic(10, 20, 1993, Split::Train).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.class_set().len(), 10);
        let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
        for item in d.items() {
            *per_class.entry(item.label.as_str()).or_default() += 1;
        }
        assert!(per_class.values().all(|&n| n == 20));
    }

    #[test]
    fn synthetic_waveforms_bit_identical_across_calls() {
        let a = generate_synthetic(3, 2, 7, Split::Train).unwrap();
        let b = generate_synthetic(3, 2, 7, Split::Train).unwrap();
        for (x, y) in a.items().iter().zip(b.items()) {
            let cx = x.load(16_000).unwrap();
            let cy = y.load(16_000).unwrap();
            assert_eq!(cx.samples, cy.samples);
        }
    }

    #[test]
    fn train_and_test_are_disjoint() {
        let train = generate_synthetic(4, 3, 7, Split::Train).unwrap();
        let test = generate_synthetic(4, 3, 7, Split::Test).unwrap();
        let train_ids: BTreeSet<_> = train.items().iter().map(|i| &i.id).collect();
        assert!(test.items().iter().all(|i| !train_ids.contains(&i.id)));
        // Different streams, different audio.
        let a = train.items()[0].load(16_000).unwrap();
        let b = test.items()[0].load(16_000).unwrap();
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(matches!(
            generate_synthetic(1, 5, 1, Split::Train),
            Err(DataError::TooFewClasses(1))
        ));
    }

    #[test]
    fn unknown_dataset_lists_registry() {
        let err = load_dataset("ls-101", Path::new("nope.csv"), Split::Train).unwrap_err();
        match err {
            DataError::UnknownDataset { name, known } => {
                assert_eq!(name, "ls-101");
                assert_eq!(known, vec!["ls-100", "nsynth-100", "synthetic"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthetic_name_rejects_manifest_loading() {
        assert!(matches!(
            load_dataset("synthetic", Path::new("m.csv"), Split::Train),
            Err(DataError::SyntheticHasNoManifest(_))
        ));
    }

    fn write_wav(path: &Path, samples: &[i16], rate: u32) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn manifest_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        write_wav(&wav, &[0, 1000, -1000, 500], 16_000);

        let manifest = dir.path().join("manifest.csv");
        std::fs::write(
            &manifest,
            "id,path,label,split\nclip-a,a.wav,spk1,train\nclip-b,a.wav,spk2,test\n",
        )
        .unwrap();

        let train = load_dataset("ls-100", &manifest, Split::Train).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train.items()[0].id, "clip-a");
        let clip = train.items()[0].load(16_000).unwrap();
        assert_eq!(clip.samples.len(), 4);
        assert!((clip.samples[1] - 1000.0 / 32768.0).abs() < 1e-12);

        std::fs::write(
            &manifest,
            "id,path,label,split\nclip-a,gone.wav,spk1,train\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset("ls-100", &manifest, Split::Train),
            Err(DataError::MissingAudio { .. })
        ));
    }

    #[test]
    fn empty_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        write_wav(&wav, &[0; 4], 16_000);
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "id,path,label,split\nclip-a,a.wav,spk1,train\n").unwrap();
        assert!(matches!(
            load_dataset("ls-100", &manifest, Split::Test),
            Err(DataError::EmptySplit { .. })
        ));
    }

    #[test]
    fn bad_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, "clip,file,class,part\na,b,c,train\n").unwrap();
        assert!(matches!(
            load_dataset("ls-100", &manifest, Split::Train),
            Err(DataError::Manifest { .. })
        ));
    }

    #[test]
    fn feature_store_batches_in_request_order() {
        let d = generate_synthetic(2, 2, 5, Split::Train).unwrap();
        let cfg = FeatureConfig {
            n_mels: 16,
            clip_seconds: 0.25,
            ..FeatureConfig::default()
        };
        let store = FeatureStore::build(&[&d], &cfg, None).unwrap();
        assert_eq!(store.len(), 4);
        let ids: Vec<&ClipId> = d.items().iter().map(|i| &i.id).collect();
        let batch = store.batch(&ids);
        assert_eq!(batch.shape(), &[4, 1, 16, cfg.n_frames()]);
        let single = store.batch(&[ids[2]]);
        assert_eq!(
            batch.index_axis(ndarray::Axis(0), 2),
            single.index_axis(ndarray::Axis(0), 0)
        );
    }

    // The synthetic corpus must be separable: a nearest-class-mean probe on
    // time-averaged log-mel features should clear 90% on ten classes.
    #[test]
    fn nearest_mean_probe_on_synthetic_features() {
        let cfg = FeatureConfig {
            n_mels: 32,
            clip_seconds: 0.5,
            ..FeatureConfig::default()
        };
        let train = generate_synthetic(10, 10, 1993, Split::Train).unwrap();
        let test = generate_synthetic(10, 8, 1993, Split::Test).unwrap();
        let store = FeatureStore::build(&[&train, &test], &cfg, None).unwrap();

        let pooled = |id: &ClipId| -> Vec<f64> {
            let f = store.get(id).unwrap();
            let mut v: Vec<f64> = f
                .rows()
                .into_iter()
                .map(|r| r.sum() / r.len() as f64)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut v {
                    *x /= norm;
                }
            }
            v
        };

        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for item in train.items() {
            let v = pooled(&item.id);
            let entry = sums
                .entry(item.label.as_str())
                .or_insert_with(|| (vec![0.0; v.len()], 0));
            for (a, b) in entry.0.iter_mut().zip(&v) {
                *a += b;
            }
            entry.1 += 1;
        }
        let means: Vec<(&str, Vec<f64>)> = sums
            .into_iter()
            .map(|(l, (s, n))| (l, s.into_iter().map(|x| x / n as f64).collect()))
            .collect();

        let mut correct = 0usize;
        for item in test.items() {
            let v = pooled(&item.id);
            let best = means
                .iter()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(l, _)| *l)
                .unwrap();
            if best == item.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.9, "probe accuracy {acc} below 0.9");
    }
}
