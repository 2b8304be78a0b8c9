use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::compress_for_client;
use crate::datagen::{dirichlet_partition, generate_clustered_task, split_80_10_10, Dataset};
use crate::error::{Error, Result};
use crate::exec::with_jobs;
use crate::experiment::checkpoint::Checkpoint;
use crate::experiment::config::{rescaler_label, ExperimentConfig, Method};
use crate::federation::{
    run_round, AggregationPolicy, Budget, ClientConfig, GlobalState, PolicyKind, RoundContext, RoundReport,
    TrainOptions,
};
use crate::model::{RescalerMode, ToyModel};
use crate::numerics::AdamHyper;

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn heatmap_path(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(HEATMAP_DIR).join(format!("activations_round{round}.csv"))
}

pub fn checkpoint_path(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("round_{round}.ckpt"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this many completed rounds (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Worker threads for client training; `None` uses the global pool.
    pub jobs: Option<usize>,
}

/// Files produced by one (sweep-free) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub label: Option<String>,
    pub dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub rounds_jsonl: PathBuf,
    pub resolved_config: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    /// Rounds completed.
    pub final_round: usize,
    pub diverged_clients: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub runs: Vec<RunOutput>,
}

/// One row per (round, budget tier). Round 0 describes the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub method: String,
    pub policy: String,
    pub temperature: u32,
    pub rescaler: String,
    pub budget: String,
    pub k: usize,
    pub rank: usize,
    /// Clients of this tier that trained and were aggregated this round.
    pub clients: usize,
    pub mean_train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
    /// Statistics over experts of the tier's mean activation frequency.
    pub freq_mean: Option<f64>,
    pub freq_min: Option<f64>,
    pub freq_max: Option<f64>,
    pub freq_cv: Option<f64>,
    pub diverged_clients: usize,
}

/// Independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Everything a run derives from its config before the first round.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub train: Dataset,
    pub val: Dataset,
    pub template: ToyModel,
    pub clients: Vec<ClientConfig>,
    pub train_options: TrainOptions,
    pub policy: AggregationPolicy,
    pub config_hash: String,
}

impl RunSetup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.experiment.seed;
        let data = generate_clustered_task(&cfg.data, derive_seed(seed, "data", 0))?;
        let split = split_80_10_10(&data, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0)))?;
        let train = data.subset(&split.train);
        let val = data.subset(&split.val);
        let partition = dirichlet_partition(
            &train,
            cfg.federation.clients,
            cfg.federation.dirichlet_alpha,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "partition", 0)),
        )?;
        let mut template = ToyModel::random(
            &cfg.model_spec()?,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "model", 0)),
        )?;
        template.smoe.gate_norm = cfg.model.gate_norm;

        let budgets = &cfg.federation.budgets;
        let clients = partition
            .client_indices
            .into_iter()
            .enumerate()
            .map(|(id, indices)| {
                let tier = budgets[id % budgets.len()].clone();
                let budget = match cfg.experiment.method {
                    Method::Flame => Budget::Experts(cfg.tier_k(&tier)),
                    Method::FedavgTrivial => Budget::Experts(cfg.model.k_full),
                    Method::RankCompress => Budget::Rank(cfg.tier_rank(&tier)),
                };
                ClientConfig {
                    id,
                    indices,
                    budget,
                    tier,
                    local_epochs: cfg.training.local_epochs,
                    batch_size: cfg.training.batch_size,
                    seed: derive_seed(seed, "client", id as u64),
                }
            })
            .collect();

        let (rescaler_mode, policy) = match cfg.experiment.method {
            Method::Flame => (
                cfg.federation.rescaler,
                AggregationPolicy::activation_aware(cfg.federation.temperature),
            ),
            // baselines run every expert, so there is nothing to rescale
            Method::FedavgTrivial | Method::RankCompress => (RescalerMode::None, AggregationPolicy::fedavg()),
        };
        Ok(Self {
            train,
            val,
            template,
            clients,
            train_options: TrainOptions {
                adam: AdamHyper::with_lr(cfg.training.lr),
                rescaler_mode,
                counting: cfg.federation.counting,
                log_routing: cfg.federation.log_routing,
            },
            policy,
            config_hash: cfg.content_hash()?,
        })
    }

    pub fn initial_rescalers(&self) -> Vec<f64> {
        let k_full = self.template.smoe.k_full;
        self.clients
            .iter()
            .map(|c| self.train_options.rescaler_mode.initial_value(k_full, c.active_experts(k_full)))
            .collect()
    }

    /// Global-model metrics on the validation split for every tier, as a client of that tier would deploy it.
    pub fn evaluate(
        &self,
        cfg: &ExperimentConfig,
        global: &GlobalState,
        rescalers: &[f64],
    ) -> Result<Vec<(String, usize, usize, crate::model::EvalMetrics)>> {
        let val = self.val.all_samples();
        cfg.tiers()
            .into_iter()
            .map(|tier| {
                let k = cfg.tier_k(&tier);
                let rank = cfg.tier_rank(&tier);
                let mut model = self.template.clone();
                model.smoe.loras = if rank < global.rank() {
                    compress_for_client(&global.loras, rank)?
                } else {
                    global.loras.clone()
                };
                model.smoe.rescaler = match self.train_options.rescaler_mode {
                    RescalerMode::Learnable => {
                        let own: Vec<f64> = self
                            .clients
                            .iter()
                            .zip(rescalers)
                            .filter(|(c, _)| c.tier == tier)
                            .map(|(_, s)| *s)
                            .collect();
                        own.iter().sum::<f64>() / own.len().max(1) as f64
                    }
                    mode => mode.initial_value(cfg.model.k_full, k),
                };
                let metrics = model.evaluate(&val, k)?;
                Ok((tier, k, rank, metrics))
            })
            .collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn metrics_rows(
    cfg: &ExperimentConfig,
    setup: &RunSetup,
    round: usize,
    global: &GlobalState,
    rescalers: &[f64],
    report: Option<&RoundReport>,
) -> Result<Vec<MetricsRow>> {
    let policy = match setup.policy.kind {
        PolicyKind::FedAvg => "fedavg",
        PolicyKind::FlameActivationAware => "activation_aware",
    };
    let evals = setup.evaluate(cfg, global, rescalers)?;
    Ok(evals
        .into_iter()
        .map(|(tier, k, rank, m)| {
            let records: Vec<_> = report
                .map(|r| r.clients.iter().filter(|c| c.tier == tier).collect())
                .unwrap_or_default();
            let live: Vec<_> = records.iter().filter(|c| !c.diverged && !c.dropped).collect();
            let losses: Vec<f64> = live.iter().filter_map(|c| c.epoch_losses.last().copied()).collect();
            let freq = (!live.is_empty()).then(|| {
                let experts = live[0].frequencies.len();
                let per_expert: Vec<f64> = (0..experts)
                    .map(|j| live.iter().map(|c| c.frequencies[j]).sum::<f64>() / live.len() as f64)
                    .collect();
                let (mean, std) = mean_std(&per_expert);
                let min = per_expert.iter().copied().fold(f64::INFINITY, f64::min);
                let max = per_expert.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (mean, min, max, (mean > 0.0).then(|| std / mean))
            });
            MetricsRow {
                round,
                method: cfg.experiment.method.as_str().into(),
                policy: policy.into(),
                temperature: setup.policy.temperature,
                rescaler: rescaler_label(setup.train_options.rescaler_mode).into(),
                budget: tier,
                k,
                rank,
                clients: live.len(),
                mean_train_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                val_loss: m.loss,
                val_accuracy: m.accuracy,
                freq_mean: freq.map(|f| f.0),
                freq_min: freq.map(|f| f.1),
                freq_max: freq.map(|f| f.2),
                freq_cv: freq.and_then(|f| f.3),
                diverged_clients: records.iter().filter(|c| c.diverged).count(),
            }
        })
        .collect())
}

fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path).map_err(|e| Error::io(path, e))?.len() == 0;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Keeps the lines of `path` for which `keep(index, line)` holds.
fn retain_lines(path: &Path, keep: impl Fn(usize, &str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if keep(i, &line) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Round number encoded in a file name like `round_3.ckpt` or `activations_round3.csv`.
fn round_of(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits = stem.trim_start_matches(|c: char| !c.is_ascii_digit());
    digits.parse().ok()
}

fn files_by_round(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "tmp") {
            continue;
        }
        if let Some(r) = round_of(&path) {
            out.push((r, path));
        }
    }
    out.sort();
    Ok(out)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    let res = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
    match res {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// Runs every grid point of `cfg` under `out_root/<name>[/<label>]`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, opts: &RunOptions) -> Result<RunArtifacts> {
    cfg.validate()?;
    let base = out_root.join(&cfg.experiment.name);
    let runs = cfg
        .expand()
        .into_iter()
        .map(|(label, sub)| {
            let dir = label.as_ref().map_or(base.clone(), |l| base.join(l));
            with_jobs(opts.jobs, || run_single(&sub, &dir, label.clone(), opts))?
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunArtifacts { runs })
}

/// Runs one sweep-free config in `dir`.
pub fn run_single(cfg: &ExperimentConfig, dir: &Path, label: Option<String>, opts: &RunOptions) -> Result<RunOutput> {
    if cfg.sweep.is_some() {
        return Err(Error::config("sweep", "run_single takes a single grid point; use run_experiment"));
    }
    let setup = RunSetup::new(cfg)?;
    let metrics_csv = dir.join(METRICS_FILE);
    let rounds_jsonl = dir.join(ROUNDS_FILE);
    let resolved = dir.join(RESOLVED_CONFIG_FILE);
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let heat_dir = dir.join(HEATMAP_DIR);

    let resume_from = if opts.resume {
        let latest = files_by_round(&ckpt_dir)?.pop();
        match latest {
            Some((_, path)) => Some(Checkpoint::load(&path)?),
            None => {
                warn!("{}: no checkpoint to resume from; starting fresh", dir.display());
                None
            }
        }
    } else {
        None
    };

    let (mut global, mut rescalers, start) = match resume_from {
        Some(ckpt) => {
            if ckpt.config_hash != setup.config_hash {
                return Err(Error::config(
                    "resume",
                    format!(
                        "checkpoint was written by config {} but the current config hashes to {}",
                        ckpt.config_hash, setup.config_hash
                    ),
                ));
            }
            if ckpt.rescalers.len() != setup.clients.len() {
                return Err(Error::config("resume", "checkpoint client count does not match the config"));
            }
            let r = ckpt.round;
            retain_lines(&metrics_csv, |i, line| {
                i == 0 || line.split(',').next().and_then(|f| f.parse::<usize>().ok()).is_some_and(|n| n <= r)
            })?;
            retain_lines(&rounds_jsonl, |_, line| {
                serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("round").and_then(serde_json::Value::as_u64))
                    .is_some_and(|n| n as usize <= r)
            })?;
            for (n, path) in files_by_round(&ckpt_dir)?.into_iter().chain(files_by_round(&heat_dir)?) {
                if n > r {
                    remove_if_exists(&path)?;
                }
            }
            info!("{}: resuming after round {r}", dir.display());
            (ckpt.global, ckpt.rescalers, r)
        }
        None => {
            for p in [&metrics_csv, &rounds_jsonl, &ckpt_dir, &heat_dir] {
                remove_if_exists(p)?;
            }
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
            let global = GlobalState::from_model(&setup.template);
            let rescalers = setup.initial_rescalers();
            append_metrics(&metrics_csv, &metrics_rows(cfg, &setup, 0, &global, &rescalers, None)?)?;
            Checkpoint {
                round: 0,
                config_hash: setup.config_hash.clone(),
                global: global.clone(),
                rescalers: rescalers.clone(),
            }
            .save(&checkpoint_path(dir, 0))?;
            (global, rescalers, 0)
        }
    };
    fs::write(&resolved, cfg.resolved_toml()?).map_err(|e| Error::io(&resolved, e))?;

    let last = opts
        .stop_after
        .map_or(cfg.experiment.rounds, |s| s.min(cfg.experiment.rounds));
    let ctx = RoundContext {
        template: &setup.template,
        data: &setup.train,
        train: setup.train_options,
        policy: setup.policy,
        participation: cfg.federation.participation,
        execution: cfg.experiment.execution,
    };
    let mut completed = start;
    for round in start + 1..=last {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.experiment.seed, "round", round as u64));
        let (next, report) = run_round(&global, &setup.clients, &ctx, &mut rescalers, &mut rng)?;
        global = next;
        let rows = metrics_rows(cfg, &setup, round, &global, &rescalers, Some(&report))?;
        append_metrics(&metrics_csv, &rows)?;
        append_line(&rounds_jsonl, &serde_json::to_string(&report)?)?;
        report.write_heatmap_file(&heatmap_path(dir, round))?;
        Checkpoint {
            round,
            config_hash: setup.config_hash.clone(),
            global: global.clone(),
            rescalers: rescalers.clone(),
        }
        .save(&checkpoint_path(dir, round))?;
        let summary: Vec<String> = rows
            .iter()
            .map(|r| match r.val_accuracy {
                Some(acc) => format!("{} acc {:.3}", r.budget, acc),
                None => format!("{} loss {:.4}", r.budget, r.val_loss),
            })
            .collect();
        info!("{} round {round}/{}: {}", cfg.experiment.name, cfg.experiment.rounds, summary.join(", "));
        completed = round;
    }

    let diverged_clients = count_diverged(&rounds_jsonl)?;
    Ok(RunOutput {
        label,
        dir: dir.to_path_buf(),
        metrics_csv,
        rounds_jsonl,
        resolved_config: resolved,
        heatmaps: files_by_round(&heat_dir)?.into_iter().map(|(_, p)| p).collect(),
        checkpoints: files_by_round(&ckpt_dir)?.into_iter().map(|(_, p)| p).collect(),
        final_round: completed,
        diverged_clients,
    })
}

/// All round reports stored in a run directory, in round order.
pub fn read_round_reports(run_dir: &Path) -> Result<Vec<RoundReport>> {
    let path = run_dir.join(ROUNDS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

fn count_diverged(rounds_jsonl: &Path) -> Result<usize> {
    let dir = rounds_jsonl.parent().unwrap_or(Path::new("."));
    Ok(read_round_reports(dir)?
        .iter()
        .map(|r| r.clients.iter().filter(|c| c.diverged).count())
        .sum())
}

/// Parses a run's metrics CSV.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
