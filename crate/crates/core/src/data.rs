//! Synthetic two-dimensional classification data, labeled/unlabeled/test
//! splits and the weak/strong augmentation pair.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Points with class labels. Classes are `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(points: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: points.nrows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            points,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `indices` of the point matrix, in the given order.
    pub fn rows(&self, indices: &[usize]) -> DMatrix<f64> {
        select_rows(&self.points, indices)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), m.ncols(), |i, j| m[(indices[i], j)])
}

fn linspace(n: usize, hi: f64) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { 0.0 } else { hi * i as f64 / (n - 1) as f64 })
}

fn shuffled(points: Vec<[f64; 2]>, labels: Vec<usize>, num_classes: usize, seed: u64) -> Result<Dataset> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng::rng_for(seed, &[1]));
    let m = DMatrix::from_fn(order.len(), 2, |i, j| points[order[i]][j]);
    let y = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(m, y, num_classes)
}

/// Two interleaving half circles. Class 0 is the upper arc of the unit
/// circle; class 1 is the lower arc centred at `(1, 0.5)`. Gaussian noise of
/// standard deviation `noise` is added to each coordinate, then the rows are
/// shuffled.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::InvalidParameter(format!("two_moons needs n >= 4, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise must be non-negative, got {noise}")));
    }
    let n_upper = n - n / 2;
    let n_lower = n / 2;
    let mut points: Vec<[f64; 2]> = linspace(n_upper, PI).map(|t| [t.cos(), t.sin()]).collect();
    points.extend(linspace(n_lower, PI).map(|t| [1.0 - t.cos(), 0.5 - t.sin()]));
    let mut labels = vec![0; n_upper];
    labels.resize(n, 1);
    if noise > 0.0 {
        let mut r = rng::rng_for(seed, &[0]);
        for p in &mut points {
            for v in p.iter_mut() {
                *v += noise * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    shuffled(points, labels, 2, seed)
}

/// Radius of the circle the blob centres sit on.
pub const BLOB_RADIUS: f64 = 5.0;

/// `k` isotropic Gaussian blobs with standard deviation `spread`, centred at
/// equally spaced angles on a circle of radius [`BLOB_RADIUS`].
pub fn gaussian_blobs(n: usize, k: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < 2 * k {
        return Err(Error::InvalidParameter(format!(
            "gaussian_blobs needs k >= 2 and n >= 2k, got n = {n}, k = {k}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!("spread must be non-negative, got {spread}")));
    }
    let mut r = rng::rng_for(seed, &[0]);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (c, [cx, cy]) in blob_centers(k).into_iter().enumerate() {
        let size = n / k + usize::from(c < n % k);
        for _ in 0..size {
            let dx: f64 = r.sample(StandardNormal);
            let dy: f64 = r.sample(StandardNormal);
            points.push([cx + spread * dx, cy + spread * dy]);
            labels.push(c);
        }
    }
    shuffled(points, labels, k, seed)
}

pub fn blob_centers(k: usize) -> Vec<[f64; 2]> {
    (0..k)
        .map(|c| {
            let t = 2.0 * PI * c as f64 / k as f64;
            [BLOB_RADIUS * t.cos(), BLOB_RADIUS * t.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Test => "test",
        }
    }
}

/// A dataset whose indices are partitioned into labeled, unlabeled and test
/// sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub data: Dataset,
    roles: Vec<Role>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    test: Vec<usize>,
}

impl SplitDataset {
    pub fn from_roles(data: Dataset, roles: Vec<Role>) -> Result<Self> {
        if roles.len() != data.len() {
            return Err(Error::DimensionMismatch {
                context: "split roles",
                expected: data.len(),
                found: roles.len(),
            });
        }
        let pick = |role| (0..roles.len()).filter(|&i| roles[i] == role).collect::<Vec<_>>();
        let (labeled, unlabeled, test) = (pick(Role::Labeled), pick(Role::Unlabeled), pick(Role::Test));
        let mut seen = vec![false; data.num_classes];
        for &i in &labeled {
            seen[data.labels[i]] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidParameter(format!("class {c} has no labeled sample")));
        }
        Ok(SplitDataset {
            data,
            roles,
            labeled,
            unlabeled,
            test,
        })
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    /// Writes `x1,x2,label,split` rows, one per point, in index order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        if self.data.dim() != 2 {
            return Err(Error::InvalidParameter("csv export expects 2-D points".into()));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x1", "x2", "label", "split"])?;
        for i in 0..self.data.len() {
            w.write_record([
                self.data.points[(i, 0)].to_string(),
                self.data.points[(i, 1)].to_string(),
                self.data.labels[i].to_string(),
                self.roles[i].as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exactly `k` labeled points per class. Of the remaining points of each
/// class, `round(test_fraction * remaining)` go to the test set and the rest
/// are unlabeled. Set sizes depend only on the class sizes, never on `seed`.
pub fn split(data: Dataset, k: usize, test_fraction: f64, seed: u64) -> Result<SplitDataset> {
    if k == 0 {
        return Err(Error::InvalidParameter("labels per class must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidParameter(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut roles = vec![Role::Unlabeled; data.len()];
    let mut r = rng::rng_for(seed, &[2]);
    for c in 0..data.num_classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::InvalidParameter(format!(
                "class {c} has {} points, fewer than {k} labels per class",
                members.len()
            )));
        }
        members.shuffle(&mut r);
        let rest = members.len() - k;
        let n_test = (test_fraction * rest as f64).round() as usize;
        for (pos, &i) in members.iter().enumerate() {
            roles[i] = if pos < k {
                Role::Labeled
            } else if pos < k + n_test {
                Role::Test
            } else {
                Role::Unlabeled
            };
        }
    }
    SplitDataset::from_roles(data, roles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    /// Probability that a coordinate of a strong view is set to zero.
    pub strong_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_sigma: 0.02,
            strong_sigma: 0.15,
            strong_dropout: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("weak_sigma", self.weak_sigma), ("strong_sigma", self.strong_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.strong_dropout) {
            return Err(Error::config("strong_dropout", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Augmented copy of `points`. Row `i` uses a noise stream keyed by
/// `(seed, strength, keys[i])`, so a sample's view does not depend on the
/// other rows of the batch.
pub fn augment(
    points: &DMatrix<f64>,
    keys: &[u64],
    strength: Strength,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if keys.len() != points.nrows() {
        return Err(Error::DimensionMismatch {
            context: "augmentation keys",
            expected: points.nrows(),
            found: keys.len(),
        });
    }
    cfg.validate()?;
    let (sigma, dropout, tag) = match strength {
        Strength::Weak => (cfg.weak_sigma, 0.0, 0),
        Strength::Strong => (cfg.strong_sigma, cfg.strong_dropout, 1),
    };
    let jitter = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = points.clone();
    for (i, &key) in keys.iter().enumerate() {
        let mut r = rng::rng_for(seed, &[tag, key]);
        for j in 0..out.ncols() {
            let noise = jitter.sample(&mut r);
            let drop = r.random::<f64>() < dropout;
            out[(i, j)] = if drop { 0.0 } else { out[(i, j)] + noise };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
}

/// Everything needed to regenerate a split dataset from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub n: usize,
    /// Two-moons coordinate noise.
    pub noise: f64,
    /// Blob count.
    pub classes: usize,
    /// Blob standard deviation.
    pub spread: f64,
    pub labels_per_class: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DatasetKind::TwoMoons,
            n: 1000,
            noise: 0.1,
            classes: 3,
            spread: 1.0,
            labels_per_class: 3,
            test_fraction: 0.2,
        }
    }
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::TwoMoons => 2,
            DatasetKind::Blobs => self.classes,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<SplitDataset> {
        let data = match self.kind {
            DatasetKind::TwoMoons => two_moons(self.n, self.noise, rng::derive_seed(seed, &[10]))?,
            DatasetKind::Blobs => {
                gaussian_blobs(self.n, self.classes, self.spread, rng::derive_seed(seed, &[11]))?
            }
        };
        split(data, self.labels_per_class, self.test_fraction, rng::derive_seed(seed, &[12]))
    }
}
