//! Labeled channel datasets: generation, train/eval split, and the binary
//! file format.
//!
//! File layout (little endian):
//!
//! ```text
//! magic      b"CSVAE1"            6 bytes
//! version    u16                  2 bytes
//! M          u32                  antennas
//! N          u32                  rows
//! domain     u32                  0 = antenna, 1 = dft
//! label_w    u32                  bytes per label (always 4)
//! labels     N x u32
//! samples    N x 2M x f32         row major, real parts then imaginary parts
//! ```
//!
//! A `<file>.meta.toml` sidecar records the generating [`DatasetConfig`].

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_model::{self, AntennaArray};
use crate::rng;
use crate::spectral::DftMatrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"CSVAE1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 6 + 2 + 4 * 4;
const LABEL_WIDTH: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Antenna,
    Dft,
}

impl Domain {
    fn flag(self) -> u32 {
        match self {
            Domain::Antenna => 0,
            Domain::Dft => 1,
        }
    }

    fn from_flag(flag: u32) -> Result<Self> {
        match flag {
            0 => Ok(Domain::Antenna),
            1 => Ok(Domain::Dft),
            other => Err(Error::Malformed(format!("unknown domain flag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_antennas: usize,
    pub per_order_total: usize,
    pub per_order_train: usize,
    pub model_orders: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
    #[serde(default = "default_angle_spread")]
    pub angle_spread: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_angle_spread() -> f64 {
    channel_model::DEFAULT_ANGLE_SPREAD
}

fn default_grid_points() -> usize {
    channel_model::DEFAULT_GRID_POINTS
}

impl DatasetConfig {
    /// 33 000 channels per order (30 000 train), orders {1, 5}, 32 antennas.
    pub fn paper_scale(seed: u64) -> Self {
        Self {
            num_antennas: 32,
            per_order_total: 33_000,
            per_order_train: 30_000,
            model_orders: vec![1, 5],
            domain: Domain::Dft,
            seed,
            angle_spread: default_angle_spread(),
            grid_points: default_grid_points(),
        }
    }

    /// 5 000 train / 500 eval per order; otherwise as [`Self::paper_scale`].
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            per_order_total: 5_500,
            per_order_train: 5_000,
            ..Self::paper_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antennas == 0 {
            return Err(Error::Config("num_antennas must be positive".into()));
        }
        if self.per_order_train >= self.per_order_total {
            return Err(Error::Config(format!(
                "per_order_train ({}) must be smaller than per_order_total ({})",
                self.per_order_train, self.per_order_total
            )));
        }
        if self.model_orders.is_empty() {
            return Err(Error::Config("model_orders must not be empty".into()));
        }
        if self.model_orders.contains(&0) {
            return Err(Error::Config("model orders must be at least 1".into()));
        }
        if !(self.angle_spread > 0.0) {
            return Err(Error::Config("angle_spread must be positive".into()));
        }
        if self.grid_points < channel_model::MIN_GRID_POINTS {
            return Err(Error::Config(format!(
                "grid_points must be at least {}",
                channel_model::MIN_GRID_POINTS
            )));
        }
        Ok(())
    }
}

/// Stacked real/imaginary channel rows with their model-order labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_antennas: usize,
    samples: Vec<f32>,
    labels: Vec<u32>,
    domain: Domain,
    split: Split,
}

impl Dataset {
    pub fn new(
        num_antennas: usize,
        samples: Vec<f32>,
        labels: Vec<u32>,
        domain: Domain,
        split: Split,
    ) -> Result<Self> {
        if samples.len() != labels.len() * 2 * num_antennas {
            return Err(Error::Shape(format!(
                "{} sample values for {} rows of width {}",
                samples.len(),
                labels.len(),
                2 * num_antennas
            )));
        }
        Ok(Self {
            num_antennas,
            samples,
            labels,
            domain,
            split,
        })
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    /// Row width, `2 M`.
    pub fn width(&self) -> usize {
        2 * self.num_antennas
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.samples[i * w..(i + 1) * w]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Rows as an `N x 2M` `f64` matrix.
    pub fn to_matrix(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.len(), self.width()), |(i, j)| {
            self.samples[i * self.width() + j] as f64
        })
    }

    /// Rows whose label equals `order`.
    pub fn rows_with_label(&self, order: u32) -> ndarray::Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == order).collect();
        ndarray::Array2::from_shape_fn((idx.len(), self.width()), |(r, j)| {
            self.samples[idx[r] * self.width() + j] as f64
        })
    }

    /// Copy of this dataset with every label replaced by `label`.
    pub fn with_labels_cleared(&self, label: u32) -> Self {
        Self {
            labels: vec![label; self.len()],
            ..self.clone()
        }
    }

    pub fn file_size(&self) -> usize {
        HEADER_BYTES + self.len() * (4 + self.width() * 4)
    }
}

/// `[re(x), im(x)]`.
pub fn stack_real_imag(x: &[Complex64]) -> Vec<f64> {
    x.iter().map(|z| z.re).chain(x.iter().map(|z| z.im)).collect()
}

/// Inverse of [`stack_real_imag`].
pub fn unstack_real_imag(v: &[f64]) -> Result<Vec<Complex64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Shape(format!("stacked vector has odd length {}", v.len())));
    }
    let m = v.len() / 2;
    Ok((0..m).map(|i| Complex64::new(v[i], v[m + i])).collect())
}

/// Draws the train and eval splits described by `config`.
///
/// Every row gets its own path set, covariance and channel, drawn from an
/// RNG stream derived from `(seed, order, index)`, so the output does not
/// depend on the rayon thread count.
pub fn generate(config: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let m = config.num_antennas;
    let array = AntennaArray::new(m)?;
    let dft = DftMatrix::new(m);
    let w = 2 * m;

    let mut train = (Vec::new(), Vec::new());
    let mut eval = (Vec::new(), Vec::new());
    for &order in &config.model_orders {
        let rows: Vec<Vec<f32>> = (0..config.per_order_total)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::stream(config.seed, &[order as u64, i as u64]);
                let paths = channel_model::sample_path_set(order, config.angle_spread, &mut rng)?;
                let cov = channel_model::covariance_from_pas(&array, &paths, config.grid_points)?;
                let h = channel_model::sample_channel(&cov, &mut rng)?.h;
                let x: DVector<Complex64> = match config.domain {
                    Domain::Antenna => h,
                    Domain::Dft => dft.forward(&h),
                };
                Ok(stack_real_imag(x.as_slice()).into_iter().map(|v| v as f32).collect())
            })
            .collect::<Result<_>>()?;
        for (i, row) in rows.into_iter().enumerate() {
            debug_assert_eq!(row.len(), w);
            let target = if i < config.per_order_train { &mut train } else { &mut eval };
            target.0.extend(row);
            target.1.push(order as u32);
        }
    }
    Ok((
        Dataset::new(m, train.0, train.1, config.domain, Split::Train)?,
        Dataset::new(m, eval.0, eval.1, config.domain, Split::Eval)?,
    ))
}

/// Pools of `count` channels per order, for two-sample testing.
pub fn generate_pools(
    num_antennas: usize,
    orders: &[usize],
    count: usize,
    angle_spread: f64,
    seed: u64,
) -> Result<Vec<(usize, ndarray::Array2<f64>)>> {
    let config = DatasetConfig {
        num_antennas,
        per_order_total: count + 1,
        per_order_train: count,
        model_orders: orders.to_vec(),
        domain: Domain::Antenna,
        seed,
        angle_spread,
        grid_points: channel_model::DEFAULT_GRID_POINTS,
    };
    let (train, _) = generate(&config)?;
    Ok(orders
        .iter()
        .map(|&k| (k, train.rows_with_label(k as u32)))
        .collect())
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(ds.file_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for field in [
        ds.num_antennas as u32,
        ds.len() as u32,
        ds.domain.flag(),
        LABEL_WIDTH,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for &label in &ds.labels {
        out.extend_from_slice(&label.to_le_bytes());
    }
    for &v in &ds.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a dataset file. The split tag is not stored, so the caller states it.
pub fn load(path: &Path, split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, split)
}

pub fn decode(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut cursor = bytes;
    let magic = take(&mut cursor, 6, "magic number")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = u16::from_le_bytes(take(&mut cursor, 2, "format version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let mut header = [0u32; 4];
    for field in header.iter_mut() {
        *field = read_u32(&mut cursor, "header")?;
    }
    let [m, n, domain, label_width] = header;
    if label_width != LABEL_WIDTH {
        return Err(Error::Malformed(format!("label width {label_width}, expected 4")));
    }
    let (m, n) = (m as usize, n as usize);
    let domain = Domain::from_flag(domain)?;
    let labels = (0..n)
        .map(|_| read_u32(&mut cursor, "labels"))
        .collect::<Result<Vec<_>>>()?;
    let count = n * 2 * m;
    let payload = take(&mut cursor, count * 4, "sample matrix")?;
    let samples = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cursor.is_empty() {
        return Err(Error::Malformed(format!("{} trailing bytes", cursor.len())));
    }
    Dataset::new(m, samples, labels, domain, split)
}

fn take<'a>(cursor: &mut &'a [u8], len: usize, what: &'static str) -> Result<&'a [u8]> {
    if cursor.len() < len {
        return Err(Error::Truncated { what });
    }
    let (head, tail) = cursor.split_at(len);
    *cursor = tail;
    Ok(head)
}

fn read_u32(cursor: &mut &[u8], what: &'static str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cursor, 4, what)?.try_into().unwrap()))
}

/// `<path>.meta.toml`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.toml");
    PathBuf::from(name)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    split: Split,
    rows: usize,
    dataset: DatasetConfig,
}

pub fn save_sidecar(ds: &Dataset, config: &DatasetConfig, path: &Path) -> Result<()> {
    let text = toml::to_string(&Sidecar {
        split: ds.split,
        rows: ds.len(),
        dataset: config.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_sidecar(path: &Path) -> Result<DatasetConfig> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sidecar.dataset)
}

/// The split recorded in the sidecar of `path`.
pub fn load_sidecar_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sidecar.split)
}
