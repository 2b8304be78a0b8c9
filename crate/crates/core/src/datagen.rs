//! Synthetic clustered tasks, label-wise Dirichlet partitioning and 80/10/10 splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Sample, Target, TaskKind};

/// Extra attempts at a Dirichlet draw when some client comes out empty.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub inputs: Vec<Vec<f64>>,
    /// Class (classification) or generating cluster (regression) of each example.
    pub labels: Vec<usize>,
    /// Regression targets, one per example.
    pub targets: Option<Vec<Vec<f64>>>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        let target = match &self.targets {
            Some(t) => Target::Values(&t[i]),
            None => Target::Class(self.labels[i]),
        };
        Sample {
            input: &self.inputs[i],
            target,
        }
    }

    pub fn samples<'a>(&'a self, indices: &[usize]) -> Vec<Sample<'a>> {
        indices.iter().map(|&i| self.sample(i)).collect()
    }

    pub fn all_samples(&self) -> Vec<Sample<'_>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            targets: self
                .targets
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i].clone()).collect()),
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim()).map(|i| format!("x_{i}")).collect();
        if let Some(t) = &self.targets {
            let width = t.first().map_or(0, Vec::len);
            header.extend((0..width).map(|i| format!("y_{i}")));
        }
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.inputs[i].iter().map(f64::to_string).collect();
            if let Some(t) = &self.targets {
                row.extend(t[i].iter().map(f64::to_string));
            }
            row.push(self.labels[i].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by [`Dataset::write_csv`]. `y_*` columns mark a regression set.
    pub fn read_csv(path: &Path, class_count: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let n_x = header.iter().filter(|h| h.starts_with("x_")).count();
        let n_y = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != n_x + n_y + 1 || header.get(header.len() - 1) != Some("label") {
            return Err(Error::domain(format!(
                "{}: expected columns x_*, [y_*], label",
                path.display()
            )));
        }
        let parse = |s: &str, line: usize| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::domain(format!("{}: bad number `{s}` on record {line}", path.display())))
        };
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals: Vec<&str> = rec.iter().collect();
            inputs.push(vals[..n_x].iter().map(|s| parse(s, line)).collect::<Result<Vec<_>>>()?);
            targets.push(
                vals[n_x..n_x + n_y]
                    .iter()
                    .map(|s| parse(s, line))
                    .collect::<Result<Vec<_>>>()?,
            );
            let label: usize = vals[n_x + n_y]
                .trim()
                .parse()
                .map_err(|_| Error::domain(format!("{}: bad label on record {line}", path.display())))?;
            if label >= class_count {
                return Err(Error::domain(format!(
                    "{}: label {label} on record {line} exceeds class count {class_count}",
                    path.display()
                )));
            }
            labels.push(label);
        }
        let task = if n_y > 0 {
            TaskKind::Regression
        } else {
            TaskKind::Classification
        };
        Ok(Dataset {
            task,
            inputs,
            labels,
            targets: (n_y > 0).then_some(targets),
            class_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of clusters (= classes for classification).
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of points around their center.
    pub spread: f64,
    /// Norm of every cluster center.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Target width for regression.
    #[serde(default = "default_target_dim")]
    pub target_dim: usize,
}

fn default_separation() -> f64 {
    4.0
}

fn default_target_dim() -> usize {
    1
}

/// Gaussian clusters around `classes` centers on a sphere of radius `separation`.
///
/// Regression targets follow a separate random affine map per cluster, so a
/// mixture of experts can specialize per region.
pub fn generate_clustered_task(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::domain("a clustered task needs at least 2 classes"));
    }
    if spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::domain("per_class and dim must be at least 1"));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) || !(spec.separation > 0.0) {
        return Err(Error::domain("spread must be non-negative and separation positive"));
    }
    if spec.kind == TaskKind::Regression && spec.target_dim == 0 {
        return Err(Error::domain("regression target_dim must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| gauss(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.separation / norm).collect()
        })
        .collect();
    let maps: Vec<(Vec<Vec<f64>>, Vec<f64>)> = match spec.kind {
        TaskKind::Classification => Vec::new(),
        TaskKind::Regression => {
            let scale = 1.0 / (spec.dim as f64).sqrt();
            (0..spec.classes)
                .map(|_| {
                    let w = (0..spec.target_dim)
                        .map(|_| (0..spec.dim).map(|_| gauss(&mut rng) * scale).collect())
                        .collect();
                    let b = (0..spec.target_dim).map(|_| gauss(&mut rng)).collect();
                    (w, b)
                })
                .collect()
        }
    };

    let total = spec.classes * spec.per_class;
    let mut inputs = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut targets = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let x: Vec<f64> = center.iter().map(|m| m + spec.spread * gauss(&mut rng)).collect();
            if let Some((w, b)) = maps.get(c) {
                targets.push(
                    w.iter()
                        .zip(b)
                        .map(|(row, bias)| bias + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
                        .collect(),
                );
            }
            inputs.push(x);
            labels.push(c);
        }
    }
    Ok(Dataset {
        task: spec.kind,
        inputs,
        labels,
        targets: (spec.kind == TaskKind::Regression).then_some(targets),
        class_count: spec.classes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    /// Set when some client list is allowed to be empty.
    pub allows_empty: bool,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// `counts[client][class]`
    pub fn class_counts(&self, labels: &[usize], class_count: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut c = vec![0; class_count];
                for &i in idx {
                    c[labels[i]] += 1;
                }
                c
            })
            .collect()
    }
}

/// Label-wise Dirichlet split over `clients`; redraws up to [`MAX_REDRAWS`]
/// times if a client ends up empty.
pub fn dirichlet_partition<R: Rng + ?Sized>(ds: &Dataset, clients: usize, alpha: f64, rng: &mut R) -> Result<Partition> {
    dirichlet_partition_with(ds, clients, alpha, false, rng)
}

pub fn dirichlet_partition_with<R: Rng + ?Sized>(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    allow_empty: bool,
    rng: &mut R,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::domain("partition needs at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    for _ in 0..=MAX_REDRAWS {
        let part = draw_partition(&ds.labels, ds.class_count, clients, alpha, rng)?;
        if allow_empty || part.iter().all(|c| !c.is_empty()) {
            return Ok(Partition {
                client_indices: part,
                allows_empty: allow_empty,
            });
        }
    }
    Err(Error::domain(format!(
        "a client stayed empty after {MAX_REDRAWS} Dirichlet redraws (alpha = {alpha}, {clients} clients, {} examples)",
        ds.len()
    )))
}

fn draw_partition<R: Rng + ?Sized>(
    labels: &[usize],
    class_count: usize,
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::domain(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = vec![Vec::new(); clients];
    for mut members in by_class {
        members.shuffle(rng);
        let props = dirichlet_draw(&gamma, clients, rng);
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (client, n) in counts.into_iter().enumerate() {
            out[client].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for c in out.iter_mut() {
        c.sort_unstable();
    }
    Ok(out)
}

fn dirichlet_draw<R: Rng + ?Sized>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma underflowed (tiny alpha): put the mass on the largest draw
        let best = crate::model::argmax(&draws);
        (0..n).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
    }
}

/// Integer shares of `total` proportional to `props` that sum to `total` exactly.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled ⌊0.8n⌋ / ⌊0.1n⌋ / remainder split.
pub fn split_80_10_10<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> Result<Split> {
    let n = ds.len();
    if n < 10 {
        return Err(Error::domain(format!("cannot split {n} examples 80/10/10 (need at least 10)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}
