//! Seeded synthetic data generators and CSV ingestion.
//!
//! Every generator is a pure function of its parameters and seed. Randomness
//! comes from ChaCha8 seeded with the run seed; each independent role in a
//! generator (e.g. the prior draw and the noise draw) reads its own ChaCha
//! stream, numbered in the order documented on the generator, so adding a
//! column never perturbs the others.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discrete::JointDistribution;
use crate::{Error, Result};

/// Inner disk radius of the ring/disk generator.
pub const DISK_RADIUS: f64 = 0.25;
/// Inner radius of the ring.
pub const RING_INNER: f64 = 0.8;
/// Outer radius of the ring.
pub const RING_OUTER: f64 = 1.0;
/// Default Gaussian shift between the two views of the ring/disk data.
pub const DEFAULT_SHIFT_STD: f64 = 0.05;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Provenance of a dataset, written next to its CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub params: BTreeMap<String, f64>,
    pub seed: Option<u64>,
}

impl DatasetMeta {
    fn new(generator: &str, seed: u64, params: &[(&str, f64)]) -> Self {
        Self {
            generator: generator.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed: Some(seed),
        }
    }
}

/// Paired samples `(x_n, y_n)`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub meta: DatasetMeta,
}

impl PairDataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, meta: DatasetMeta) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Dimension(format!("x has {} rows, y has {}", x.nrows(), y.nrows())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entry".into()));
        }
        Ok(Self { x, y, meta })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Gathers the given rows into `(x, y)` batch matrices.
    pub fn gather(&self, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.x.select_rows(rows), self.y.select_rows(rows))
    }

    /// Splits off the first `n_train` rows as a training set.
    pub fn split(&self, n_train: usize) -> Result<(PairDataset, PairDataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::InvalidParameter(format!("cannot split {} rows at {n_train}", self.len())));
        }
        let rest = self.len() - n_train;
        let train = PairDataset {
            x: self.x.rows(0, n_train).into_owned(),
            y: self.y.rows(0, n_train).into_owned(),
            meta: self.meta.clone(),
        };
        let test = PairDataset {
            x: self.x.rows(n_train, rest).into_owned(),
            y: self.y.rows(n_train, rest).into_owned(),
            meta: self.meta.clone(),
        };
        Ok((train, test))
    }

    /// Rows duplicated in order (`[D; D]`).
    pub fn duplicated(&self) -> PairDataset {
        let rows: Vec<usize> = (0..self.len()).chain(0..self.len()).collect();
        let (x, y) = self.gather(&rows);
        PairDataset { x, y, meta: self.meta.clone() }
    }

    /// Writes `x_0,…,x_{dx−1},y_0,…,y_{dy−1}` with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<String> =
            (0..self.x_dim()).map(|i| format!("x_{i}")).chain((0..self.y_dim()).map(|i| format!("y_{i}"))).collect();
        wtr.write_record(&header)?;
        for n in 0..self.len() {
            let rec: Vec<String> = self.x.row(n).iter().chain(self.y.row(n).iter()).map(|v| format!("{v:?}")).collect();
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let mut dx = 0;
        let mut dy = 0;
        for (i, h) in header.iter().enumerate() {
            let h = h.trim();
            if h == format!("x_{dx}") && dy == 0 {
                dx += 1;
            } else if h == format!("y_{dy}") {
                dy += 1;
            } else {
                return Err(Error::Parse(format!("dataset CSV header column {i} is {h:?}")));
            }
        }
        if dx == 0 || dy == 0 {
            return Err(Error::Parse("dataset CSV needs at least one x_ and one y_ column".into()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != dx + dy {
                return Err(Error::Parse(format!("dataset CSV row {n} has {} fields", rec.len())));
            }
            for (i, field) in rec.iter().enumerate() {
                let v: f64 =
                    field.trim().parse().map_err(|_| Error::Parse(format!("dataset CSV row {n}: value {field:?}")))?;
                if i < dx {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Parse("dataset CSV has no rows".into()));
        }
        let meta = DatasetMeta { generator: "csv".into(), params: BTreeMap::new(), seed: None };
        Self::new(DMatrix::from_row_slice(n, dx, &xs), DMatrix::from_row_slice(n, dy, &ys), meta)
    }

    /// Path of the metadata sidecar for a dataset CSV.
    pub fn meta_path(csv_path: &Path) -> PathBuf {
        let mut p = csv_path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    /// Writes the CSV and its `.meta.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        std::fs::write(Self::meta_path(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Reads a dataset CSV, picking up the sidecar metadata when present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ds = Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let meta_path = Self::meta_path(path);
        if meta_path.exists() {
            ds.meta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        }
        Ok(ds)
    }
}

/// `x ~ N(0, τ²)`, `y = x + N(0, σ²)`.
///
/// Streams: 0 draws `x`, 1 draws the noise.
pub fn gen_gaussian_pair(n: usize, tau: f64, sigma: f64, seed: u64) -> Result<PairDataset> {
    if n == 0 || !(tau > 0.0) || !(sigma >= 0.0) || !tau.is_finite() || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("gaussian pair n={n} τ={tau} σ={sigma}")));
    }
    let mut prior = stream_rng(seed, 0);
    let mut noise = stream_rng(seed, 1);
    let x: Vec<f64> = (0..n).map(|_| tau * prior.sample::<f64, _>(StandardNormal)).collect();
    let y: Vec<f64> = x.iter().map(|&xi| xi + sigma * noise.sample::<f64, _>(StandardNormal)).collect();
    let meta = DatasetMeta::new("gaussian_pair", seed, &[("n", n as f64), ("tau", tau), ("sigma", sigma)]);
    PairDataset::new(DMatrix::from_vec(n, 1, x), DMatrix::from_vec(n, 1, y), meta)
}

/// Points uniform on a disk (radius [`DISK_RADIUS`]) and on an annulus
/// ([`RING_INNER`]–[`RING_OUTER`]) with the angular sector `[0, gap_angle)`
/// removed; `y` is `x` plus an isotropic Gaussian shift.
///
/// The first `n / 2` rows are disk points, the rest ring points. Streams:
/// 0 disk geometry, 1 ring geometry, 2 shift.
pub fn gen_ring_disk(n: usize, seed: u64, gap_angle: f64, shift_std: f64) -> Result<PairDataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("ring/disk needs n ≥ 1".into()));
    }
    if !(0.0..2.0 * PI).contains(&gap_angle) {
        return Err(Error::InvalidParameter(format!("gap angle {gap_angle} outside [0, 2π)")));
    }
    if !(shift_std >= 0.0) || !shift_std.is_finite() {
        return Err(Error::InvalidParameter(format!("shift std {shift_std}")));
    }
    let n_disk = n / 2;
    let mut disk = stream_rng(seed, 0);
    let mut ring = stream_rng(seed, 1);
    let mut shift = stream_rng(seed, 2);
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        let (r, theta) = if i < n_disk {
            let r = DISK_RADIUS * disk.random::<f64>().sqrt();
            (r, 2.0 * PI * disk.random::<f64>())
        } else {
            let u: f64 = ring.random();
            let r = (RING_INNER * RING_INNER + u * (RING_OUTER * RING_OUTER - RING_INNER * RING_INNER)).sqrt();
            (r, gap_angle + (2.0 * PI - gap_angle) * ring.random::<f64>())
        };
        x[(i, 0)] = r * theta.cos();
        x[(i, 1)] = r * theta.sin();
    }
    let mut y = x.clone();
    if shift_std > 0.0 {
        for v in y.iter_mut() {
            *v += shift_std * shift.sample::<f64, _>(StandardNormal);
        }
    }
    let meta = DatasetMeta::new(
        "ring_disk",
        seed,
        &[
            ("n", n as f64),
            ("gap_angle", gap_angle),
            ("shift_std", shift_std),
            ("disk_radius", DISK_RADIUS),
            ("ring_inner", RING_INNER),
            ("ring_outer", RING_OUTER),
        ],
    );
    PairDataset::new(x, y, meta)
}

/// Whether a ring/disk point lies on the ring.
pub fn on_ring(point: &[f64]) -> bool {
    point[0].hypot(point[1]) > 0.5 * (DISK_RADIUS + RING_INNER)
}

/// Polar angle mapped into `[0, 2π)`, so a gap `[0, g)` sits at the cut.
pub fn ring_angle(point: &[f64]) -> f64 {
    let a = point[1].atan2(point[0]);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Random full-support joint table with i.i.d. Gamma(`concentration`) weights
/// (a flat Dirichlet draw), read in row-major order from stream 0.
pub fn gen_discrete_joint(n_x: usize, n_y: usize, seed: u64, concentration: f64) -> Result<JointDistribution> {
    if n_x < 2 || n_y < 2 {
        return Err(Error::InvalidParameter(format!("joint dims {n_x}×{n_y} must be ≥ 2")));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("concentration {concentration}: {e}")))?;
    let mut rng = stream_rng(seed, 0);
    let weights: Vec<f64> = (0..n_x * n_y).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
    JointDistribution::from_weights(DMatrix::from_row_slice(n_x, n_y, &weights))
}

/// I.i.d. samples from a finite joint, both sides one-hot encoded.
pub fn sample_discrete_pairs(j: &JointDistribution, n: usize, seed: u64) -> Result<PairDataset> {
    if n == 0 {
        return Err(Error::InvalidParameter("need n ≥ 1 samples".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let pairs = j.sample_pairs(n, &mut rng);
    let mut x = DMatrix::zeros(n, j.n_x());
    let mut y = DMatrix::zeros(n, j.n_y());
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        x[(i, a)] = 1.0;
        y[(i, b)] = 1.0;
    }
    let meta =
        DatasetMeta::new("discrete_pairs", seed, &[("n", n as f64), ("n_x", j.n_x() as f64), ("n_y", j.n_y() as f64)]);
    PairDataset::new(x, y, meta)
}

/// Gaussian blobs centred on a circle of radius `separation`, one per class,
/// with one-hot labels. Each label is replaced by a uniformly chosen other
/// class with probability `label_noise`, so the Bayes accuracy for well
/// separated blobs is `1 − label_noise`.
///
/// Streams: 0 true class, 1 position noise, 2 label flips.
pub fn gen_labeled_blobs(
    n: usize,
    classes: usize,
    separation: f64,
    noise: f64,
    label_noise: f64,
    seed: u64,
) -> Result<PairDataset> {
    if n == 0 || classes < 2 || !(separation >= 0.0) || !(noise >= 0.0) || !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::InvalidParameter(format!(
            "blobs n={n} classes={classes} separation={separation} noise={noise} label_noise={label_noise}"
        )));
    }
    let mut class_rng = stream_rng(seed, 0);
    let mut pos_rng = stream_rng(seed, 1);
    let mut flip_rng = stream_rng(seed, 2);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DMatrix::zeros(n, classes);
    for i in 0..n {
        let c = class_rng.random_range(0..classes);
        let angle = 2.0 * PI * c as f64 / classes as f64;
        x[(i, 0)] = separation * angle.cos() + noise * pos_rng.sample::<f64, _>(StandardNormal);
        x[(i, 1)] = separation * angle.sin() + noise * pos_rng.sample::<f64, _>(StandardNormal);
        let flip = flip_rng.random::<f64>() < label_noise;
        let other = flip_rng.random_range(0..classes - 1);
        let label = if flip {
            if other >= c {
                other + 1
            } else {
                other
            }
        } else {
            c
        };
        y[(i, label)] = 1.0;
    }
    let meta = DatasetMeta::new(
        "labeled_blobs",
        seed,
        &[
            ("n", n as f64),
            ("classes", classes as f64),
            ("separation", separation),
            ("noise", noise),
            ("label_noise", label_noise),
        ],
    );
    PairDataset::new(x, y, meta)
}
