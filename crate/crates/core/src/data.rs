//! Labeled datasets: synthetic generation, CSV I/O, client partitioning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Batch;

/// `N x d` features with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(LabeledDataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let sub = self.subset(indices)?;
        Ok(Batch {
            features: sub.features,
            labels: sub.labels,
        })
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Shannon entropy (nats) of the label distribution.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        self.class_counts()
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    /// Bit-level key of sample `i`, for multiset comparisons.
    pub fn sample_key(&self, i: usize) -> (Vec<u64>, usize) {
        (
            self.features.row(i).iter().map(|v| v.to_bits()).collect(),
            self.labels[i],
        )
    }

    /// Order-sensitive FNV-1a digest of every feature bit and label.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for i in 0..self.len() {
            for v in self.features.row(i) {
                h.write(&v.to_bits().to_le_bytes());
            }
            h.write(&(self.labels[i] as u64).to_le_bytes());
        }
        h.finish()
    }
}

/// Digest over a whole partition, shard order included.
pub fn partition_fingerprint(shards: &[LabeledDataset]) -> u64 {
    let mut h = Fnv::new();
    for s in shards {
        h.write(&s.fingerprint().to_le_bytes());
        h.write(&(s.len() as u64).to_le_bytes());
    }
    h.finish()
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// `c` unit-covariance Gaussian clusters whose means sit at distance
/// `class_separation` from the origin along random unit directions.
/// Sample `i` belongs to class `i % c`.
pub fn generate_synthetic<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    c: usize,
    class_separation: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if c == 0 || n < c || d < 2 {
        return Err(Error::Data(format!(
            "synthetic data needs n >= c >= 1 and d >= 2, got n={n}, d={d}, c={c}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| class_separation * x / norm).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut data = Vec::with_capacity(n * d);
    for &label in &labels {
        for mean in &means[label] {
            data.push(mean + rng.sample::<f64, _>(StandardNormal));
        }
    }
    LabeledDataset::new(Matrix::new(n, d, data)?, labels, c)
}

/// Reads `f1,...,fd,label` rows. A first row containing any non-numeric
/// cell is treated as a header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut rows: Vec<(usize, Vec<&str>)> = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i, l.split(',').map(str::trim).collect()))
        .collect();
    if let Some((_, first)) = rows.first() {
        if first.iter().any(|cell| cell.parse::<f64>().is_err()) {
            rows.remove(0);
        }
    }
    if rows.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }

    let width = rows[0].1.len();
    if width < 2 {
        return Err(csv_err(rows[0].0, "need at least one feature and a label".into()));
    }
    let mut features = Vec::with_capacity(rows.len() * (width - 1));
    let mut labels = Vec::with_capacity(rows.len());
    for (line, cells) in &rows {
        if cells.len() != width {
            return Err(csv_err(
                *line,
                format!("expected {width} columns, found {}", cells.len()),
            ));
        }
        for cell in &cells[..width - 1] {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(*line, format!("non-numeric feature {cell:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(*line, format!("non-finite feature {cell:?}")));
            }
            features.push(v);
        }
        let label_cell = cells[width - 1];
        let label: usize = label_cell
            .parse()
            .map_err(|_| csv_err(*line, format!("label {label_cell:?} is not a non-negative integer")))?;
        labels.push(label);
    }
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(Matrix::new(rows.len(), width - 1, features)?, labels, class_count)
}

/// Writes the dataset in the format [`load_csv`] reads, without a header.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{}", ds.labels[i]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-column zero mean and unit variance; constant columns are only centered.
pub fn standardize(ds: &LabeledDataset) -> Result<LabeledDataset> {
    let (n, d) = ds.features.shape();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, v) in ds.features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for (j, v) in ds.features.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    let features = Matrix::from_fn(n, d, |i, j| {
        let centered = ds.features[(i, j)] - mean[j];
        if std[j] > 0.0 {
            centered / std[j]
        } else {
            centered
        }
    })?;
    LabeledDataset::new(features, ds.labels.clone(), ds.class_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    /// Concentration; read only for [`PartitionKind::Dirichlet`].
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.1
}

impl PartitionSpec {
    pub fn iid() -> Self {
        PartitionSpec {
            kind: PartitionKind::Iid,
            beta: default_beta(),
        }
    }

    pub fn dirichlet(beta: f64) -> Self {
        PartitionSpec {
            kind: PartitionKind::Dirichlet,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PartitionKind::Dirichlet && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("dirichlet beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, ds: &LabeledDataset, k: usize, rng: &mut R) -> Result<Vec<LabeledDataset>> {
        match self.kind {
            PartitionKind::Iid => partition_iid(ds, k, rng),
            PartitionKind::Dirichlet => partition_dirichlet(ds, k, self.beta, rng),
        }
    }
}

/// Random permutation cut into `k` chunks whose sizes differ by at most one.
pub fn partition_iid<R: Rng + ?Sized>(ds: &LabeledDataset, k: usize, rng: &mut R) -> Result<Vec<LabeledDataset>> {
    if k == 0 || k > ds.len() {
        return Err(Error::Data(format!(
            "cannot split {} samples into {k} shards",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let base = ds.len() / k;
    let extra = ds.len() % k;
    let mut start = 0;
    (0..k)
        .map(|c| {
            let size = base + usize::from(c < extra);
            let shard = ds.subset(&order[start..start + size]);
            start += size;
            shard
        })
        .collect()
}

/// Dirichlet proportions via normalized Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(k: usize, beta: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("gamma({beta}, 1): {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        // Every draw underflowed; all mass goes to one uniformly chosen client.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        Ok(p)
    }
}

/// Largest-remainder rounding of `total * p` that conserves `total`.
/// Ties on the remainder go to the lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed partition: each class is spread over clients according to
/// its own `Dirichlet(beta)` draw. Empty shards take one sample from the
/// largest shard.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    k: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<LabeledDataset>> {
    if k == 0 || k > ds.len() {
        return Err(Error::Data(format!(
            "cannot split {} samples into {k} shards",
            ds.len()
        )));
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..ds.class_count {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let p = sample_dirichlet(k, beta, rng)?;
        let counts = largest_remainder(members.len(), &p);
        let mut start = 0;
        for (shard, &count) in shards.iter_mut().zip(&counts) {
            shard.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("k >= 1");
        let moved = shards[largest].pop().expect("largest shard has more than one sample");
        shards[empty].push(moved);
    }
    shards
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            ds.subset(&idx)
        })
        .collect()
}

/// Disjoint random split with `round(train_fraction * N)` training samples.
pub fn split_train_val<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * ds.len() as f64).round() as usize;
    if n_train == 0 || n_train == ds.len() {
        return Err(Error::Data(format!(
            "splitting {} samples at {train_fraction} leaves an empty side",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    Ok((ds.subset(&order[..n_train])?, ds.subset(&order[n_train..])?))
}
