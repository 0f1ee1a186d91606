//! Synthetic multimodal cohorts and their on-disk format.
//!
//! A dataset directory holds `manifest.toml`, `tabular.csv`, and one EEG
//! and one volume file per sample under `eeg/` and `volume/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tabular::{CategoricalField, TabularRecord, TabularSchema};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const EEG_MAGIC: [u8; 8] = *b"MSTEEG\0\x01";
pub const VOLUME_MAGIC: [u8; 4] = *b"MSTV";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TABULAR_FILE: &str = "tabular.csv";

/// Recipe for a synthetic cohort. Every class plants its own dominant EEG
/// frequency, ventricle size, tabular means and categorical skew; `noise`
/// scales every source of within-class variation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub seed: u64,
    pub noise: f64,
    pub eeg_len: usize,
    pub eeg_channels: usize,
    pub volume: [usize; 3],
    pub train_fraction: f64,
    /// Dominant EEG frequency (cycles per window) of each class.
    pub class_freqs: [usize; NUM_CLASSES],
    /// Half-width of the uniform per-sample phase jitter, radians.
    pub phase_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 1,
            noise: 0.5,
            eeg_len: 128,
            eeg_channels: 8,
            volume: [32, 32, 32],
            train_fraction: 0.8,
            class_freqs: [3, 7, 12],
            phase_jitter: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let min = 2 * NUM_CLASSES;
        if self.n < min {
            return Err(Error::TooFewSamples { n: self.n, min });
        }
        if self.eeg_len < crate::spectral::MIN_SERIES_LEN || self.eeg_channels == 0 {
            return Err(Error::Config("EEG needs at least 4 steps and 1 channel".into()));
        }
        if self.volume.iter().any(|&v| v < 8) {
            return Err(Error::Config(format!("volume extents must be >= 8, got {:?}", self.volume)));
        }
        if self.class_freqs.iter().any(|&f| f == 0 || f > self.eeg_len / 2) {
            return Err(Error::Config(format!("class frequencies must lie in 1..={}", self.eeg_len / 2)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tabular: TabularRecord,
    /// `[T × C]`, time-major.
    pub eeg: Tensor<f32>,
    /// `[D × H × W]`
    pub volume: Tensor<f32>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EegDims {
    pub length: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDims {
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub eeg: String,
    pub volume: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub n_samples: usize,
    pub class_labels: Vec<String>,
    pub tabular_file: String,
    pub eeg: EegDims,
    pub volume: VolumeDims,
    pub generator: Option<GeneratorConfig>,
    pub schema: TabularSchema,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn schema(&self) -> &TabularSchema {
        &self.manifest.schema
    }
}

struct NumericSpec {
    name: &'static str,
    means: [f64; NUM_CLASSES],
    std: f64,
}

const NUMERIC: [NumericSpec; 6] = [
    NumericSpec { name: "age", means: [70.0, 73.0, 76.0], std: 6.0 },
    NumericSpec { name: "mmse", means: [28.5, 24.0, 18.0], std: 2.0 },
    NumericSpec { name: "moca", means: [27.0, 22.0, 16.0], std: 2.5 },
    NumericSpec { name: "education_years", means: [14.0, 13.0, 12.0], std: 3.0 },
    NumericSpec { name: "adas_cog", means: [8.0, 15.0, 25.0], std: 4.0 },
    NumericSpec { name: "depression_score", means: [3.0, 4.0, 5.0], std: 2.0 },
];

struct CategoricalSpec {
    name: &'static str,
    vocabulary: &'static [&'static str],
    probs: [&'static [f64]; NUM_CLASSES],
}

const CATEGORICAL: [CategoricalSpec; 3] = [
    CategoricalSpec {
        name: "sex",
        vocabulary: &["female", "male"],
        probs: [&[0.5, 0.5], &[0.55, 0.45], &[0.65, 0.35]],
    },
    CategoricalSpec {
        name: "marital_status",
        vocabulary: &["married", "single", "widowed"],
        probs: [&[0.6, 0.25, 0.15], &[0.45, 0.3, 0.25], &[0.3, 0.3, 0.4]],
    },
    CategoricalSpec {
        name: "education_level",
        vocabulary: &["primary", "secondary", "tertiary", "postgraduate"],
        probs: [&[0.1, 0.3, 0.4, 0.2], &[0.25, 0.35, 0.3, 0.1], &[0.4, 0.35, 0.2, 0.05]],
    },
];

/// Ventricle radius (fraction of the half-extent) per class.
const VENTRICLE_RADIUS: [f64; NUM_CLASSES] = [0.2, 0.32, 0.45];

pub fn default_schema() -> TabularSchema {
    TabularSchema {
        numerical: NUMERIC.iter().map(|s| s.name.to_string()).collect(),
        categorical: CATEGORICAL
            .iter()
            .map(|c| CategoricalField {
                name: c.name.to_string(),
                vocabulary: c.vocabulary.iter().map(|v| v.to_string()).collect(),
            })
            .collect(),
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pick(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn generate_sample(cfg: &GeneratorConfig, index: usize, label: usize) -> (TabularRecord, Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64 + 1));
    let noise = cfg.noise;

    let mut tabular = TabularRecord::default();
    for spec in &NUMERIC {
        let v = spec.means[label] + noise * spec.std * normal(&mut rng);
        tabular.numerical.insert(spec.name.to_string(), v as f32 as f64);
    }
    for spec in &CATEGORICAL {
        tabular.categorical.insert(spec.name.to_string(), pick(&mut rng, spec.probs[label]));
    }

    let (t_len, c) = (cfg.eeg_len, cfg.eeg_channels);
    let freq = cfg.class_freqs[label] as f64;
    let jitter = if cfg.phase_jitter > 0.0 {
        rng.random_range(-cfg.phase_jitter..cfg.phase_jitter)
    } else {
        0.0
    };
    let mut eeg = Vec::with_capacity(t_len * c);
    for t in 0..t_len {
        for ch in 0..c {
            let phase = 0.3 * ch as f64 + jitter;
            let s = (2.0 * std::f64::consts::PI * freq * t as f64 / t_len as f64 + phase).sin();
            eeg.push((s + noise * normal(&mut rng)) as f32);
        }
    }
    let eeg = Tensor::new(vec![t_len, c], eeg).expect("eeg dims");

    let [d, h, w] = cfg.volume;
    let radius = VENTRICLE_RADIUS[label] * (1.0 + 0.1 * noise * normal(&mut rng)).max(0.1);
    let mut vol = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let coord = |i: usize, n: usize| (2.0 * i as f64 + 1.0) / n as f64 - 1.0;
                let (cz, cy, cx) = (coord(z, d), coord(y, h), coord(x, w));
                let r = (cz * cz + cy * cy + cx * cx).sqrt();
                let tissue = if r < 0.85 { 1.0 } else { 0.0 };
                let ventricle = if r < radius { -0.8 } else { 0.0 };
                vol.push((tissue + ventricle + 0.5 * noise * normal(&mut rng)) as f32);
            }
        }
    }
    let volume = Tensor::new(vec![d, h, w], vol).expect("volume dims");
    (tabular, eeg, volume)
}

/// Generates a cohort in memory. Labels are assigned round-robin and the
/// train/eval split is a seeded shuffle.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n;
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0)));
    let mut split = vec![Split::Eval; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let width = (n - 1).to_string().len().max(3);
    let mut samples = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % NUM_CLASSES;
        let id = format!("s{i:0width$}");
        let (tabular, eeg, volume) = generate_sample(cfg, i, label);
        entries.push(SampleEntry {
            id: id.clone(),
            label: CLASS_NAMES[label].to_string(),
            split: split[i],
            eeg: format!("eeg/{id}.bin"),
            volume: format!("volume/{id}.bin"),
        });
        samples.push(Sample {
            id,
            tabular,
            eeg,
            volume,
            label,
            split: split[i],
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        n_samples: n,
        class_labels: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        tabular_file: TABULAR_FILE.into(),
        eeg: EegDims {
            length: cfg.eeg_len,
            channels: cfg.eeg_channels,
        },
        volume: VolumeDims { dims: cfg.volume },
        generator: Some(cfg.clone()),
        schema: default_schema(),
        samples: entries,
    };
    Ok(Dataset { manifest, samples })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_payload(header: &[u8], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.len() + 4 * values.len());
    out.extend_from_slice(header);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_eeg(eeg: &Tensor<f32>) -> Vec<u8> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&EEG_MAGIC);
    header.extend_from_slice(&(eeg.shape()[0] as u32).to_le_bytes());
    header.extend_from_slice(&(eeg.shape()[1] as u32).to_le_bytes());
    f32_payload(&header, eeg.data())
}

pub fn encode_volume(vol: &Tensor<f32>) -> Vec<u8> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&VOLUME_MAGIC);
    for &d in vol.shape() {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    f32_payload(&header, vol.data())
}

fn u32_at(bytes: &[u8], off: usize) -> usize {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn mismatch(id: &str, detail: String) -> Error {
    Error::DimMismatch { id: id.to_string(), detail }
}

pub fn decode_eeg(id: &str, bytes: &[u8], expect: &EegDims) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN || bytes[..8] != EEG_MAGIC {
        return Err(mismatch(id, "EEG file lacks a valid header".into()));
    }
    let (t, c) = (u32_at(bytes, 8), u32_at(bytes, 12));
    if (t, c) != (expect.length, expect.channels) {
        return Err(mismatch(id, format!("EEG header {t}×{c}, manifest {}×{}", expect.length, expect.channels)));
    }
    let want = HEADER_LEN + 4 * t * c;
    if bytes.len() != want {
        return Err(mismatch(id, format!("EEG file has {} bytes, expected {want}", bytes.len())));
    }
    Tensor::new(vec![t, c], decode_f32(&bytes[HEADER_LEN..]))
}

pub fn decode_volume(id: &str, bytes: &[u8], expect: &VolumeDims) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN || bytes[..4] != VOLUME_MAGIC {
        return Err(mismatch(id, "volume file lacks a valid header".into()));
    }
    let dims = [u32_at(bytes, 4), u32_at(bytes, 8), u32_at(bytes, 12)];
    if dims != expect.dims {
        return Err(mismatch(id, format!("volume header {dims:?}, manifest {:?}", expect.dims)));
    }
    let want = HEADER_LEN + 4 * dims.iter().product::<usize>();
    if bytes.len() != want {
        return Err(mismatch(id, format!("volume file has {} bytes, expected {want}", bytes.len())));
    }
    Tensor::new(dims.to_vec(), decode_f32(&bytes[HEADER_LEN..]))
}

fn tabular_csv(dataset: &Dataset) -> Result<Vec<u8>> {
    let schema = dataset.schema();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(schema.numerical.iter().cloned());
    header.extend(schema.categorical.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(|e| Error::format("tabular csv", e))?;
    for s in &dataset.samples {
        let (num, cat) = schema.encode(&s.tabular)?;
        let mut row = vec![s.id.clone()];
        row.extend(num.iter().map(|v| format!("{}", *v as f32)));
        row.extend(cat.iter().zip(&schema.categorical).map(|(&i, c)| c.vocabulary[i].clone()));
        w.write_record(&row).map_err(|e| Error::format("tabular csv", e))?;
    }
    w.into_inner().map_err(|e| Error::format("tabular csv", e))
}

/// Writes the dataset under `dir` and returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, entry) in dataset.samples.iter().zip(&dataset.manifest.samples) {
        write_file(&dir.join(&entry.eeg), &encode_eeg(&s.eeg))?;
        write_file(&dir.join(&entry.volume), &encode_volume(&s.volume))?;
    }
    write_file(&dir.join(&dataset.manifest.tabular_file), &tabular_csv(dataset)?)?;
    let text = toml::to_string(&dataset.manifest).map_err(|e| Error::format("manifest", e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: toml::Table = toml::from_str(&text).map_err(|e| Error::format("manifest", e))?;
    let version = raw.get("version").and_then(|v| v.as_integer()).unwrap_or(-1);
    if version != MANIFEST_VERSION as i64 {
        return Err(Error::Version {
            what: "manifest",
            found: version.max(0) as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format("manifest", e))?;
    manifest.schema.validate()?;
    if manifest.samples.len() != manifest.n_samples {
        return Err(Error::format(
            "manifest",
            format!("n_samples = {} but {} entries", manifest.n_samples, manifest.samples.len()),
        ));
    }
    Ok(manifest)
}

fn read_tabular(path: &Path, schema: &TabularSchema) -> Result<BTreeMap<String, TabularRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format("tabular csv", format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| Error::format("tabular csv", e))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    };
    let id_col = col("id")?;
    let num_cols = schema.numerical.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let cat_cols = schema.categorical.iter().map(|c| col(&c.name)).collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format("tabular csv", e))?;
        let id = row[id_col].to_string();
        let mut rec = TabularRecord::default();
        for (name, &c) in schema.numerical.iter().zip(&num_cols) {
            let v: f32 = row[c]
                .trim()
                .parse()
                .map_err(|_| Error::format("tabular csv", format!("sample `{id}` field `{name}`: `{}`", &row[c])))?;
            rec.numerical.insert(name.clone(), v as f64);
        }
        for (field, &c) in schema.categorical.iter().zip(&cat_cols) {
            let v = field.vocabulary.iter().position(|w| w == &row[c]).ok_or_else(|| {
                Error::format("tabular csv", format!("sample `{id}` field `{}`: unknown category `{}`", field.name, &row[c]))
            })?;
            rec.categorical.insert(field.name.clone(), v);
        }
        out.insert(id, rec);
    }
    Ok(out)
}

/// Loads and validates every sample listed in a manifest. Nothing is
/// returned unless every sample loads.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut tabular = read_tabular(&dir.join(&manifest.tabular_file), &manifest.schema)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let label = manifest
            .class_labels
            .iter()
            .position(|l| l == &entry.label)
            .filter(|&l| l < NUM_CLASSES)
            .ok_or_else(|| Error::UnknownLabel {
                id: entry.id.clone(),
                label: entry.label.clone(),
            })?;
        let eeg_path = dir.join(&entry.eeg);
        let eeg = decode_eeg(&entry.id, &fs::read(&eeg_path).map_err(|e| Error::io(&eeg_path, e))?, &manifest.eeg)?;
        let vol_path = dir.join(&entry.volume);
        let volume = decode_volume(&entry.id, &fs::read(&vol_path).map_err(|e| Error::io(&vol_path, e))?, &manifest.volume)?;
        let record = tabular
            .remove(&entry.id)
            .ok_or_else(|| Error::MissingField(format!("tabular row for sample `{}`", entry.id)))?;
        manifest.schema.encode(&record)?;
        if !eeg.all_finite() || !volume.all_finite() {
            return Err(mismatch(&entry.id, "non-finite values".into()));
        }
        samples.push(Sample {
            id: entry.id.clone(),
            tabular: record,
            eeg,
            volume,
            label,
            split: entry.split,
        });
    }
    Ok(Dataset { manifest, samples })
}
