//! Datasets, non-IID partitioning, and per-round client sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: LabeledBatch,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Shape(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(LabeledDataset {
            samples: LabeledBatch::new(inputs, dim, labels)?,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        self.samples.labels()
    }

    pub fn as_batch(&self) -> &LabeledBatch {
        &self.samples
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.gather(rows),
            num_classes: self.num_classes,
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in self.labels() {
            counts[y] += 1;
        }
        counts
    }

    /// Shuffled split into `(train, test)` with `round(len * test_fraction)`
    /// test rows.
    pub fn split<R: Rng + ?Sized>(&self, test_fraction: f64, rng: &mut R) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Parameter(format!("test fraction {test_fraction} not in [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Disjoint per-client sample index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub concentration: f64,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    /// `histograms[client][class]`.
    pub fn class_histograms(&self, dataset: &LabeledDataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|rows| {
                let mut h = vec![0; dataset.num_classes()];
                for &r in rows {
                    h[dataset.labels()[r]] += 1;
                }
                h
            })
            .collect()
    }
}

fn dirichlet_weights<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: the limit of a tiny concentration is a single owner
        let mut w = vec![0.0; n];
        w[rng.random_range(0..n)] = 1.0;
        w
    }
}

/// Largest-remainder apportionment of `total` items by `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower client indices first among equal remainders
    by_remainder.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in by_remainder.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Deals every class across `n_clients` with proportions drawn from a
/// symmetric Dirichlet(`alpha`). Clients left empty take one sample from the
/// currently largest client.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    if dataset.len() < n_clients {
        return Err(Error::Parameter(format!(
            "{} samples cannot cover {n_clients} clients",
            dataset.len()
        )));
    }

    let mut assignments = vec![Vec::new(); n_clients];
    for class in 0..dataset.num_classes() {
        let mut rows: Vec<usize> = (0..dataset.len()).filter(|&r| dataset.labels()[r] == class).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(rng);
        let weights = dirichlet_weights(n_clients, alpha, rng);
        let counts = apportion(rows.len(), &weights);
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignments[client].extend_from_slice(&rows[start..start + count]);
            start += count;
        }
    }

    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client holds at least two samples");
        assignments[empty].push(moved);
    }
    for rows in &mut assignments {
        rows.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        concentration: alpha,
    })
}

/// Gives client `k` the classes `k, k+1, ..., k+s-1` (mod the class count)
/// and splits every class evenly among the clients that hold it. Classes no
/// client holds are left out.
pub fn class_shard_partition<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    n_clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<PartitionPlan> {
    let classes = dataset.num_classes();
    if n_clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::Parameter(format!(
            "classes per client must be in 1..={classes}, got {classes_per_client}"
        )));
    }
    let mut assignments = vec![Vec::new(); n_clients];
    for class in 0..classes {
        let holders: Vec<usize> = (0..n_clients)
            .filter(|&k| (class + classes - k % classes) % classes < classes_per_client)
            .collect();
        if holders.is_empty() {
            continue;
        }
        let mut rows: Vec<usize> = (0..dataset.len()).filter(|&r| dataset.labels()[r] == class).collect();
        rows.shuffle(rng);
        let counts = apportion(rows.len(), &vec![1.0 / holders.len() as f64; holders.len()]);
        let mut start = 0;
        for (&k, &count) in holders.iter().zip(&counts) {
            assignments[k].extend_from_slice(&rows[start..start + count]);
            start += count;
        }
    }
    if let Some(k) = assignments.iter().position(Vec::is_empty) {
        return Err(Error::Parameter(format!("client {k} received no samples")));
    }
    for rows in &mut assignments {
        rows.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        concentration: f64::INFINITY,
    })
}

/// Includes each client independently with probability `q`; an empty draw is
/// repeated.
pub fn poisson_select<R: Rng + ?Sized>(n_clients: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter(format!("selection probability {q} not in (0, 1]")));
    }
    if n_clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    loop {
        let chosen: Vec<usize> = (0..n_clients).filter(|_| rng.random::<f64>() < q).collect();
        if !chosen.is_empty() {
            return Ok(chosen);
        }
    }
}

/// Gaussian blobs with unit variance around one mean per class. The means are
/// random directions rescaled so that the closest pair sits exactly
/// `separation` apart. Labels cycle through the classes.
pub fn synth_dataset<R: Rng + ?Sized>(
    num_classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::Parameter("need at least one class and one feature".into()));
    }
    if n < num_classes {
        return Err(Error::Parameter(format!("{n} samples cannot cover {num_classes} classes")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Parameter(format!("class separation {separation} must be non-negative")));
    }

    let mut means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let scale = if min_dist.is_finite() && min_dist > 0.0 { separation / min_dist } else { 0.0 };
    for m in &mut means {
        m.iter_mut().for_each(|v| *v *= scale);
    }

    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        inputs.extend(means[class].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
    }
    LabeledDataset::new(inputs, dim, labels, num_classes)
}

/// Reads `label,f0,f1,...,f{d-1}` CSV. The class count is `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Wire("dataset header must start with `label` followed by features".into()));
    }
    for (k, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{k}") {
            return Err(Error::Wire(format!("expected column `f{k}`, found `{h}`")));
        }
    }
    let dim = headers.len() - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let label = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Wire(format!("row {row}: label `{}` is not a non-negative integer", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Wire(format!("row {row}: feature `{field}` is not a number")))?;
            inputs.push(v);
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(inputs, dim, labels, num_classes)
}
