//! Dataset ingestion (CSV and IDX), deterministic splitting, normalization,
//! and serialization of models and reports. File writes are whole-file atomic
//! (write a temp file, then rename).

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::cae::{CaeModel, Mode};
use crate::error::{CaeError, Result};
use crate::nn::{Activation, DecoderSpec, DenseLayer};
use crate::numcore::{permutation, Matrix, Rng};
use crate::selector::SelectorParams;

/// How features are rescaled; statistics always come from the train split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    MinMax,
    ZScore,
}

/// Per-feature normalization statistics. For min-max, `stat_a`/`stat_b` are the
/// train minimum and maximum; for z-score, the mean and standard deviation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormRecord {
    pub kind: NormKind,
    pub stat_a: Vec<f64>,
    pub stat_b: Vec<f64>,
}

impl NormRecord {
    /// Transform a matrix in place. `clamp` keeps min-max outputs inside
    /// [0,1] (used for anything that is not the train split).
    pub fn apply(&self, m: &mut Matrix, clamp: bool) -> Result<()> {
        if m.cols() != self.stat_a.len() {
            return Err(CaeError::Shape(format!(
                "normalization record covers {} features, data has {}",
                self.stat_a.len(),
                m.cols()
            )));
        }
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            for j in 0..row.len() {
                let v = match self.kind {
                    NormKind::MinMax => {
                        let range = self.stat_b[j] - self.stat_a[j];
                        if range == 0.0 {
                            0.0
                        } else {
                            let x = (row[j] - self.stat_a[j]) / range;
                            if clamp {
                                x.clamp(0.0, 1.0)
                            } else {
                                x
                            }
                        }
                    }
                    NormKind::ZScore => {
                        if self.stat_b[j] == 0.0 {
                            0.0
                        } else {
                            (row[j] - self.stat_a[j]) / self.stat_b[j]
                        }
                    }
                };
                row[j] = v;
            }
        }
        Ok(())
    }
}

/// A feature table with optional class labels and bookkeeping.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub feature_names: Vec<String>,
    pub norm: Option<NormRecord>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    fn gather(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.gather_rows(idx)?,
            labels: match &self.labels {
                Some(l) => Some(idx.iter().map(|&i| l[i]).collect()),
                None => None,
            },
            feature_names: self.feature_names.clone(),
            norm: self.norm.clone(),
        })
    }
}

/// Split fractions (train, val, test) plus the permutation seed.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec {
            train: 0.72,
            val: 0.08,
            test: 0.20,
            seed: 0,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CaeError::io(path, e))
}

/// Load a rectangular numeric CSV. With `has_header`, the first row names the
/// columns; otherwise columns are named f0, f1, ... A label column (matched by
/// name) is extracted as integer class indices.
pub fn load_csv(path: &Path, has_header: bool, label_column: Option<&str>) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());

    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CaeError::Parse(format!("{}: {}", path.display(), e)))?;
        records.push(rec);
    }
    if records.is_empty() || (has_header && records.len() < 2) {
        return Err(CaeError::Parse(format!("{}: no data rows", path.display())));
    }

    let (names, data_start): (Vec<String>, usize) = if has_header {
        (records[0].iter().map(|s| s.to_string()).collect(), 1)
    } else {
        (
            (0..records[0].len()).map(|j| format!("f{}", j)).collect(),
            0,
        )
    };
    let width = names.len();

    let label_idx = match label_column {
        Some(name) => Some(names.iter().position(|n| n == name).ok_or_else(|| {
            CaeError::Data(format!("label column '{}' not found in {:?}", name, names))
        })?),
        None => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(records.len() - data_start);
    let mut labels: Vec<usize> = Vec::new();
    for (r, rec) in records[data_start..].iter().enumerate() {
        let line = r + data_start + 1;
        if rec.len() != width {
            return Err(CaeError::Parse(format!(
                "{}: line {}: expected {} cells, found {}",
                path.display(),
                line,
                width,
                rec.len()
            )));
        }
        let mut row = Vec::with_capacity(width - label_idx.map_or(0, |_| 1));
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CaeError::Parse(format!(
                    "{}: line {}, column {}: invalid number '{}'",
                    path.display(),
                    line,
                    c + 1,
                    cell
                ))
            })?;
            if Some(c) == label_idx {
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(CaeError::Data(format!(
                        "{}: line {}: label '{}' is not a non-negative integer",
                        path.display(),
                        line,
                        cell
                    )));
                }
                labels.push(v as usize);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }

    let feature_names: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, n)| n.clone())
        .collect();
    Ok(Dataset {
        features: Matrix::from_rows(&rows)?,
        labels: if label_idx.is_some() {
            Some(labels)
        } else {
            None
        },
        feature_names,
        norm: None,
    })
}

/// Write a matrix as CSV with an optional header row. Floats use the shortest
/// representation that parses back to the identical value.
pub fn save_matrix_csv(m: &Matrix, header: Option<&[String]>, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(names) = header {
        out.push_str(&names.join(","));
        out.push('\n');
    }
    for i in 0..m.rows() {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

fn maybe_gunzip(path: &Path, bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| CaeError::Format(format!("{}: bad gzip stream: {}", path.display(), e)))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Load IDX-format images (magic 0x00000803) and optional labels (magic
/// 0x00000801), the standard MNIST distribution format. Gzipped files are
/// decompressed transparently. Pixels are flattened row-major and scaled to
/// [0,1] by 1/255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = maybe_gunzip(images_path, read_bytes(images_path)?)?;
    if bytes.len() < 16 {
        return Err(CaeError::Format(format!(
            "{}: too short for an IDX image header",
            images_path.display()
        )));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 0x0000_0803 {
        return Err(CaeError::Format(format!(
            "{}: magic 0x{:08x}, expected 0x00000803",
            images_path.display(),
            magic
        )));
    }
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(CaeError::Format(format!(
            "{}: header promises {} bytes, file has {}",
            images_path.display(),
            expected,
            bytes.len()
        )));
    }
    let d = rows * cols;
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let features = Matrix::from_vec(n, d, data)?;
    let feature_names = (0..d).map(|j| format!("px{}", j)).collect();

    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lb = maybe_gunzip(lp, read_bytes(lp)?)?;
            if lb.len() < 8 {
                return Err(CaeError::Format(format!(
                    "{}: too short for an IDX label header",
                    lp.display()
                )));
            }
            let magic = be_u32(&lb, 0);
            if magic != 0x0000_0801 {
                return Err(CaeError::Format(format!(
                    "{}: magic 0x{:08x}, expected 0x00000801",
                    lp.display(),
                    magic
                )));
            }
            let ln = be_u32(&lb, 4) as usize;
            if lb.len() != 8 + ln {
                return Err(CaeError::Format(format!(
                    "{}: header promises {} bytes, file has {}",
                    lp.display(),
                    8 + ln,
                    lb.len()
                )));
            }
            if ln != n {
                return Err(CaeError::Data(format!("{} images but {} labels", n, ln)));
            }
            Some(lb[8..].iter().map(|&b| b as usize).collect())
        }
    };

    Ok(Dataset {
        features,
        labels,
        feature_names,
        norm: None,
    })
}

/// Deterministic seeded permutation, then contiguous slicing. Split sizes are
/// the floor allocations for val and test with the remainder going to train.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if spec.train < 0.0 || spec.val < 0.0 || spec.test < 0.0 {
        return Err(CaeError::Parameter(
            "split fractions must be non-negative".into(),
        ));
    }
    if (spec.train + spec.val + spec.test - 1.0).abs() > 1e-9 {
        return Err(CaeError::Parameter(format!(
            "split fractions must sum to 1, got {}",
            spec.train + spec.val + spec.test
        )));
    }
    let n = ds.n();
    let n_val = (n as f64 * spec.val).floor() as usize;
    let n_test = (n as f64 * spec.test).floor() as usize;
    let n_train = n - n_val - n_test;
    for (frac, size, name) in [
        (spec.train, n_train, "train"),
        (spec.val, n_val, "val"),
        (spec.test, n_test, "test"),
    ] {
        if frac > 0.0 && size == 0 {
            return Err(CaeError::Parameter(format!(
                "{} split would be empty with n={} and fraction {}",
                name, n, frac
            )));
        }
    }
    let mut rng = Rng::new(spec.seed);
    let perm = permutation(&mut rng, n);
    let train = ds.gather(&perm[..n_train])?;
    let val = ds.gather(&perm[n_train..n_train + n_val])?;
    let test = ds.gather(&perm[n_train + n_val..])?;
    Ok((train, val, test))
}

/// Seeded permutation, then the first `n_take` rows and the remainder (the
/// desk-scale subsampling used for the larger benchmark datasets).
pub fn subsample_split(ds: &Dataset, n_take: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_take == 0 || n_take > ds.n() {
        return Err(CaeError::Parameter(format!(
            "cannot take {} of {} rows",
            n_take,
            ds.n()
        )));
    }
    let mut rng = Rng::new(seed);
    let perm = permutation(&mut rng, ds.n());
    Ok((ds.gather(&perm[..n_take])?, ds.gather(&perm[n_take..])?))
}

/// Fit normalization statistics on the train split, apply them to the train
/// split and (with clamping, for min-max) every other dataset. Constant
/// features map to 0.
pub fn normalize_fit_apply(
    train: &mut Dataset,
    others: &mut [&mut Dataset],
    kind: NormKind,
) -> Result<NormRecord> {
    if train.n() == 0 {
        return Err(CaeError::Data(
            "cannot normalize an empty train split".into(),
        ));
    }
    let (n, d) = (train.n(), train.d());
    let mut stat_a = vec![0.0; d];
    let mut stat_b = vec![0.0; d];
    match kind {
        NormKind::MinMax => {
            for j in 0..d {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..n {
                    let v = train.features.get(i, j);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                stat_a[j] = lo;
                stat_b[j] = hi;
            }
        }
        NormKind::ZScore => {
            for j in 0..d {
                let mut mean = 0.0;
                for i in 0..n {
                    mean += train.features.get(i, j);
                }
                mean /= n as f64;
                let mut var = 0.0;
                for i in 0..n {
                    let diff = train.features.get(i, j) - mean;
                    var += diff * diff;
                }
                stat_a[j] = mean;
                stat_b[j] = (var / n as f64).sqrt();
            }
        }
    }
    let record = NormRecord {
        kind,
        stat_a,
        stat_b,
    };
    record.apply(&mut train.features, false)?;
    train.norm = Some(record.clone());
    for other in others {
        record.apply(&mut other.features, true)?;
        other.norm = Some(record.clone());
    }
    Ok(record)
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelFile {
    format_version: u32,
    mode: Mode,
    d: usize,
    k: usize,
    feature_names: Vec<String>,
    alpha: Vec<Vec<f64>>,
    decoder_spec: DecoderSpec,
    decoder_layers: Vec<LayerFile>,
    norm: Option<NormRecord>,
}

/// Serialize a model as a versioned, human-inspectable JSON document.
pub fn save_model(model: &CaeModel, path: &Path) -> Result<()> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        mode: model.mode,
        d: model.d,
        k: model.k,
        feature_names: model.feature_names.clone(),
        alpha: (0..model.selector.k())
            .map(|i| model.selector.alpha.row(i).to_vec())
            .collect(),
        decoder_spec: model.decoder_spec.clone(),
        decoder_layers: model
            .decoder
            .iter()
            .map(|l| LayerFile {
                weights: (0..l.weights.rows())
                    .map(|i| l.weights.row(i).to_vec())
                    .collect(),
                bias: l.bias.clone(),
                activation: l.activation,
            })
            .collect(),
        norm: model.norm.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)
        .map_err(|e| CaeError::Format(format!("cannot serialize model: {}", e)))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Exact inverse of `save_model`, with format-version and shape validation.
pub fn load_model(path: &Path) -> Result<CaeModel> {
    let bytes = read_bytes(path)?;
    let file: ModelFile = serde_json::from_slice(&bytes)
        .map_err(|e| CaeError::Parse(format!("{}: {}", path.display(), e)))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(CaeError::Format(format!(
            "{}: model format version {} (this build reads {})",
            path.display(),
            file.format_version,
            MODEL_FORMAT_VERSION
        )));
    }
    let alpha = Matrix::from_rows(&file.alpha)?;
    if alpha.rows() != file.k || alpha.cols() != file.d {
        return Err(CaeError::Format(format!(
            "{}: alpha is {}x{} but header says k={} d={}",
            path.display(),
            alpha.rows(),
            alpha.cols(),
            file.k,
            file.d
        )));
    }
    let selector = SelectorParams { alpha };
    selector.validate()?;
    let mut decoder = Vec::with_capacity(file.decoder_layers.len());
    for l in file.decoder_layers {
        let weights = Matrix::from_rows(&l.weights)?;
        if l.bias.len() != weights.cols() {
            return Err(CaeError::Format(format!(
                "decoder layer bias has {} entries for {} outputs",
                l.bias.len(),
                weights.cols()
            )));
        }
        decoder.push(DenseLayer {
            weights,
            bias: l.bias,
            activation: l.activation,
        });
    }
    let model = CaeModel {
        selector,
        decoder,
        decoder_spec: file.decoder_spec,
        mode: file.mode,
        d: file.d,
        k: file.k,
        feature_names: file.feature_names,
        norm: file.norm,
    };
    model.validate()?;
    Ok(model)
}

/// The `node,feature_index,feature_name` CSV emitted after training.
pub fn selected_features_csv(indices: &[usize], names: &[String]) -> String {
    let mut out = String::from("node,feature_index,feature_name\n");
    for (node, &idx) in indices.iter().enumerate() {
        let name = names.get(idx).map(String::as_str).unwrap_or("");
        out.push_str(&format!("{},{},{}\n", node, idx, name));
    }
    out
}

/// Whole-file atomic write: write a sibling temp file, then rename over the
/// destination.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, contents).map_err(|e| CaeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CaeError::io(path, e))
}
