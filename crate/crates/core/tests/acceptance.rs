//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the report lines always reach stdout.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{max_gradcheck_error, random_model, shipped_config, OwnedBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoe_fed::datagen::{dirichlet_partition, generate_clustered_task, Dataset, TaskSpec};
use smoe_fed::experiment::{
    checkpoint_path, export_heatmap, read_metrics, read_round_reports, run_experiment, ExperimentConfig,
    RunOptions, METRICS_FILE, ROUNDS_FILE,
};
use smoe_fed::federation::{aggregate, compute_weights, AggregationPolicy, ClientUpdate, GlobalState};
use smoe_fed::flops::{compare_budgets, count_model, ArchSpec};
use smoe_fed::model::{ActivationCounter, GateNormalization, LoraPair, SmoeLayer, TaskKind};
use smoe_fed::numerics::{svd_truncate, Matrix};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- fixtures

fn random_pair(rng: &mut ChaCha8Rng, out: usize, inp: usize, rank: usize) -> LoraPair {
    LoraPair::new(
        Matrix::random_normal(out, rank, 1.0, rng),
        Matrix::random_normal(rank, inp, 1.0, rng),
        16.0,
    )
    .unwrap()
}

struct UpdateSet {
    previous: GlobalState,
    updates: Vec<ClientUpdate>,
}

/// Random clients with random activation counts, some of them zero or saturated.
fn random_update_set(rng: &mut ChaCha8Rng) -> UpdateSet {
    let clients = rng.random_range(2..=8);
    let experts = rng.random_range(1..=16);
    let (out, inp, rank) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4));
    let previous = GlobalState::new((0..experts).map(|_| random_pair(rng, out, inp, rank)).collect());
    let updates = (0..clients)
        .map(|id| {
            let steps = rng.random_range(1..40u64);
            let counts = (0..experts)
                .map(|_| match rng.random_range(0..4) {
                    0 => 0,
                    1 => steps,
                    _ => rng.random_range(0..=steps),
                })
                .collect();
            ClientUpdate {
                client_id: id,
                loras: (0..experts).map(|_| random_pair(rng, out, inp, rank)).collect(),
                activation: ActivationCounter {
                    counts,
                    steps,
                    ..ActivationCounter::new(experts)
                },
                dataset_size: rng.random_range(1..500),
                rescaler: 1.0,
                epoch_losses: vec![1.0],
                routing_log: None,
            }
        })
        .collect();
    UpdateSet { previous, updates }
}

fn bits(g: &GlobalState) -> Vec<u64> {
    g.loras
        .iter()
        .flat_map(|l| l.a.data().iter().chain(l.b.data()).chain([&l.alpha]).map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&shipped_config("desk_flame.toml")).unwrap()
}

// ------------------------------------------------------------------ oracles

/// Dense mixture `s · Σ_{j∈TopK} g_j (W^j + (α/r) A^j B^j) x`, built from scratch.
fn forward_oracle(layer: &SmoeLayer, x: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let m = layer.num_experts();
    let logits: Vec<f64> = (0..m)
        .map(|j| (0..x.len()).map(|i| layer.router.get(i, j) * x[i]).sum())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    let mass: f64 = chosen.iter().map(|&j| probs[j]).sum();
    let mut h = vec![0.0; layer.out_dim()];
    for &j in &chosen {
        let gate = match layer.gate_norm {
            GateNormalization::Renormalize => probs[j] / mass,
            GateNormalization::Raw => probs[j],
        };
        let l = &layer.loras[j];
        let r = l.a.cols();
        for (o, hv) in h.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, xv) in x.iter().enumerate() {
                let delta: f64 = (0..r).map(|q| l.a.get(o, q) * l.b.get(q, i)).sum();
                acc += (layer.experts[j].get(o, i) + l.alpha / r as f64 * delta) * xv;
            }
            *hv += layer.rescaler * gate * acc;
        }
    }
    (h, chosen)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0)).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `Q Qᵀ M` for `Q` an orthonormal basis of a random `rows × rank` matrix.
fn random_projection(m: &Matrix, rank: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < rank {
        let mut v = Matrix::random_normal(m.rows(), 1, 1.0, rng).into_vec();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for q in &basis {
        for c in 0..m.cols() {
            let d: f64 = (0..m.rows()).map(|r| q[r] * m.get(r, c)).sum();
            for r in 0..m.rows() {
                out.set(r, c, out.get(r, c) + q[r] * d);
            }
        }
    }
    out
}

fn max_client_share(ds: &Dataset, clients: usize, alpha: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = dirichlet_partition(ds, clients, alpha, &mut rng).unwrap();
    let counts = part.class_counts(&ds.labels, ds.class_count);
    let totals = ds.class_counts();
    (0..ds.class_count)
        .map(|c| counts.iter().map(|row| row[c]).max().unwrap() as f64 / totals[c] as f64)
        .sum::<f64>()
        / ds.class_count as f64
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let set = random_update_set(&mut rng);
        let flame = aggregate(&set.updates, &set.previous, &AggregationPolicy::activation_aware(0)).map_err(|e| e.to_string())?;
        let fedavg = aggregate(&set.updates, &set.previous, &AggregationPolicy::fedavg()).map_err(|e| e.to_string())?;
        ensure(bits(&flame) == bits(&fedavg), || format!("case {case}: t=0 differs from FedAvg"))?;
    }
    Ok("100 random update sets bitwise equal".into())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for case in 0..200 {
        let mut set = random_update_set(&mut rng);
        let t = rng.random_range(1..6);
        let policy = AggregationPolicy::activation_aware(t);
        let experts = set.previous.num_experts();
        // expert 0: nobody activated it
        for u in &mut set.updates {
            u.activation.counts[0] = 0;
        }
        let table = compute_weights(&set.updates, &policy).map_err(|e| e.to_string())?;
        for (u, row) in set.updates.iter().zip(&table.weights) {
            for j in 0..experts {
                let a = u.activation.counts[j];
                if a == u.activation.steps {
                    ensure(row[j] == u.dataset_size as f64, || format!("case {case}: a=S gives {} not |D|", row[j]))?;
                }
                if a == 0 {
                    ensure(row[j] == 0.0, || format!("case {case}: a=0 gives weight {}", row[j]))?;
                }
            }
        }
        let full = aggregate(&set.updates, &set.previous, &policy).map_err(|e| e.to_string())?;
        ensure(full.is_finite(), || format!("case {case}: non-finite aggregate"))?;
        ensure(full.loras[0] == set.previous.loras[0], || format!("case {case}: zero-mass expert not carried forward"))?;

        // a client that never activated expert j cannot move it, whatever its adapters hold
        let j = rng.random_range(0..experts);
        let i = rng.random_range(0..set.updates.len());
        set.updates[i].activation.counts[j] = 0;
        let base = aggregate(&set.updates, &set.previous, &policy).map_err(|e| e.to_string())?;
        set.updates[i].loras[j].a = set.updates[i].loras[j].a.scale(1e6);
        set.updates[i].loras[j].b = set.updates[i].loras[j].b.scale(-3e5);
        let poisoned = aggregate(&set.updates, &set.previous, &policy).map_err(|e| e.to_string())?;
        ensure(base.loras[j] == poisoned.loras[j], || format!("case {case}: zero-activation client contributed"))?;
        checked += 1;
    }

    // every client dropped or silent: everything carries forward
    let mut set = random_update_set(&mut rng);
    for u in &mut set.updates {
        u.activation.counts.iter_mut().for_each(|c| *c = 0);
    }
    let carried = aggregate(&set.updates, &set.previous, &AggregationPolicy::activation_aware(2)).map_err(|e| e.to_string())?;
    ensure(bits(&carried) == bits(&set.previous), || "all-zero mass did not carry forward".into())?;
    Ok(format!("{checked} randomized cases + all-zero carry-forward"))
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let task = if seed % 2 == 0 { TaskKind::Classification } else { TaskKind::Regression };
        let model = random_model(100 + seed, task);
        let batch = OwnedBatch::random(100 + seed, 5, 4, 3);
        let k = 1 + (seed as usize % 3);
        let err = max_gradcheck_error(&model, &batch.samples(task), k, 1e-5);
        ensure(err < 1e-5, || format!("model {seed}: max relative error {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 models, worst relative error {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut dense_cases = 0;
    for case in 0..100 {
        let m = rng.random_range(1..=8);
        let k_full = rng.random_range(1..=m);
        let (out, inp, rank) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        let experts = (0..m).map(|_| Matrix::random_normal(out, inp, 1.0, &mut rng)).collect();
        let loras = (0..m)
            .map(|_| {
                let mut p = random_pair(&mut rng, out, inp, rank);
                p.a = p.a.scale(0.3);
                p.alpha = rng.random_range(1.0..32.0);
                p
            })
            .collect();
        let router = Matrix::random_normal(inp, m, 1.0, &mut rng);
        let mut layer = SmoeLayer::new(experts, router, loras, k_full).map_err(|e| e.to_string())?;
        layer.rescaler = rng.random_range(0.2..3.0);
        if case % 4 == 3 {
            layer.gate_norm = GateNormalization::Raw;
        }
        // every fourth case uses k_i = k_full = M: the dense mixture
        let k = if case % 4 == 0 {
            layer.k_full = m;
            m
        } else {
            rng.random_range(1..=k_full)
        };
        let x = Matrix::random_normal(inp, 1, 1.0, &mut rng).into_vec();
        let (h, decision) = layer.forward(&x, k).map_err(|e| e.to_string())?;
        let (expected, chosen) = forward_oracle(&layer, &x, k);
        ensure(decision.selected == chosen, || format!("case {case}: selected {:?} vs {chosen:?}", decision.selected))?;
        if k == m {
            dense_cases += 1;
            ensure(chosen.len() == m, || format!("case {case}: k=M must select every expert"))?;
        }
        for (a, b) in h.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-10, || format!("case {case}: deviation {worst:e}"))?;
    }
    Ok(format!("100 configs ({dense_cases} with k_i = M), max deviation {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let load = |f: &str| ArchSpec::load(&shipped_config(f)).map_err(|e| e.to_string());
    let rank = compare_budgets(&load("olmoe_like_rank.toml")?.budget_specs().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let expert = compare_budgets(&load("olmoe_like_flame.toml")?.budget_specs().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (r_first, r_last) = (&rank.rows[0], rank.rows.last().unwrap());
    ensure(r_first.rank == 40 && r_last.rank == 12, || "rank sweep must run r 40 -> 12".into())?;
    let rank_change = 1.0 - r_last.report.total_flops as f64 / r_first.report.total_flops as f64;
    let (k_first, k_last) = (&expert.rows[0], expert.rows.last().unwrap());
    ensure(k_first.k_active == Some(8) && k_last.k_active == Some(1), || "expert sweep must run k 8 -> 1".into())?;
    let k_ratio = k_last.report.total_flops as f64 / k_first.report.total_flops as f64;
    ensure(rank_change < 0.05, || format!("rank sweep changes FLOPs by {:.1}%", rank_change * 100.0))?;
    ensure(k_ratio < 0.60, || format!("k=1 / k=8 ratio {k_ratio:.3}"))?;

    // hand count of the k = 1 tier: 16 blocks, T = 128 tokens, d = 2048, 64 experts
    let t = 128u64;
    let attention = 16 * 4 * (2 * t * 2048 * 2048 + 2 * t * (2048 * 20 + 20 * 2048));
    let router = 16 * (2 * t * 2048 * 64 + t * (64 + 64 * 6));
    let expert_ffn = 16 * 3 * (2 * t * 1024 * 2048 + 2 * t * (1024 * 20 + 20 * 2048));
    let head = 2 * t * 50304 * 2048;
    let by_hand = attention + router + expert_ffn + head;
    ensure(by_hand == 123_498_004_480, || format!("hand arithmetic slipped: {by_hand}"))?;
    ensure(k_last.report.total_flops == by_hand, || format!("counter {} vs hand {by_hand}", k_last.report.total_flops))?;
    let tiny = count_model(
        &ArchSpec::from_toml_str(
            "name = \"tiny\"\nseq_len = 3\n[[layers]]\nkind = \"smoe\"\nname = \"f\"\nnum_experts = 4\nk_active = 2\nrouter_dim = 5\nmatrices = [{ rows = 2, cols = 5 }]\nlora_rank = 1\n",
        )
        .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    // router 2·3·5·4 + 3·(4 + 4·2) = 156; experts 2·(2·3·2·5) = 120; LoRA 2·(2·3·(2 + 5)) = 84
    ensure(tiny.total_flops == 156 + 120 + 84, || format!("tiny spec counted {}", tiny.total_flops))?;
    Ok(format!(
        "rank 40->12 changes FLOPs by {:.2}%, k 8->1 ratio {:.1}%, hand count matches",
        rank_change * 100.0,
        k_ratio * 100.0
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let rows = rng.random_range(2..10);
        let cols = rng.random_range(2..10);
        let q = rows.min(cols);
        let rank = rng.random_range(1..q);
        let m = Matrix::random_normal(rows, cols, 1.0, &mut rng);
        let (l, r) = svd_truncate(&m, rank).map_err(|e| e.to_string())?;
        let err = frobenius_diff(&m, &l.matmul(&r).map_err(|e| e.to_string())?);

        let mtm: Vec<Vec<f64>> = (0..cols)
            .map(|i| (0..cols).map(|j| (0..rows).map(|k| m.get(k, i) * m.get(k, j)).sum()).collect())
            .collect();
        let sigma_sq = symmetric_eigenvalues(mtm);
        let expected = sigma_sq[rank..q].iter().sum::<f64>().sqrt();
        worst = worst.max((err - expected).abs());
        ensure((err - expected).abs() <= 1e-8, || format!("case {case}: error {err} vs tail {expected}"))?;

        for trial in 0..200 {
            let other = frobenius_diff(&m, &random_projection(&m, rank, &mut rng));
            ensure(err <= other + 1e-12, || format!("case {case}: random factorization {trial} won ({other} < {err})"))?;
        }
    }
    Ok(format!("50 matrices, tail identity within {worst:.1e}, never beaten in 200 trials"))
}

fn criterion_7() -> Outcome {
    let spec = TaskSpec {
        kind: TaskKind::Classification,
        classes: 6,
        per_class: 50,
        dim: 4,
        spread: 1.0,
        separation: 4.0,
        target_dim: 1,
    };
    let ds = generate_clustered_task(&spec, 7).map_err(|e| e.to_string())?;
    let clients = 5;
    for alpha in [0.1, 0.5, 5.0] {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let part = dirichlet_partition(&ds, clients, alpha, &mut rng).map_err(|e| e.to_string())?;
            let mut all: Vec<usize> = part.client_indices.iter().flatten().copied().collect();
            let distinct: BTreeSet<usize> = all.iter().copied().collect();
            all.sort_unstable();
            ensure(all.len() == distinct.len(), || format!("alpha {alpha} seed {seed}: overlapping clients"))?;
            ensure(all == (0..ds.len()).collect::<Vec<_>>(), || format!("alpha {alpha} seed {seed}: not a cover"))?;
            let counts = part.class_counts(&ds.labels, ds.class_count);
            let per_class: Vec<usize> = (0..ds.class_count).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
            ensure(per_class == ds.class_counts(), || format!("alpha {alpha} seed {seed}: class counts not conserved"))?;
        }
    }
    let mean = |alpha: f64| (0..20).map(|s| max_client_share(&ds, clients, alpha, 1000 + s)).sum::<f64>() / 20.0;
    let (skewed, mild) = (mean(0.5), mean(5.0));
    ensure(skewed > mild, || format!("mean max-client-share {skewed:.3} (alpha 0.5) vs {mild:.3} (alpha 5)"))?;
    Ok(format!("cover and counts exact; mean max-client-share {skewed:.3} at alpha 0.5 vs {mild:.3} at alpha 5"))
}

fn criterion_8() -> Outcome {
    let cfg = desk_config();
    let tiers: BTreeSet<usize> = cfg.tiers().iter().map(|t| cfg.tier_k(t)).collect();
    ensure(tiers == BTreeSet::from([1, 2, 4, 8]), || format!("desk config budgets give k = {tiers:?}"))?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut metrics = Vec::new();
    for d in &dirs {
        let run = run_experiment(&cfg, d.path(), &RunOptions::default()).map_err(|e| e.to_string())?.runs.remove(0);
        metrics.push(fs::read(&run.metrics_csv).unwrap());
    }
    ensure(metrics[0] == metrics[1], || "two runs with one seed differ".into())?;
    let rows = read_metrics(&dirs[0].path().join(&cfg.experiment.name).join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let last = rows.iter().map(|r| r.round).max().unwrap();
    let mut gains = Vec::new();
    for tier in cfg.tiers() {
        let acc = |round: usize| rows.iter().find(|r| r.round == round && r.budget == tier).and_then(|r| r.val_accuracy);
        let (before, after) = (acc(0).unwrap(), acc(last).unwrap());
        ensure(after - before >= 0.20, || format!("{tier}: {before:.3} -> {after:.3}"))?;
        gains.push(format!("{tier} {before:.2}->{after:.2}"));
    }
    Ok(format!("{} rounds, bitwise reproducible; {}", last, gains.join(", ")))
}

fn criterion_9() -> Outcome {
    let mut cfg = desk_config();
    cfg.experiment.rounds = 3;
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg, whole.path(), &RunOptions::default()).map_err(|e| e.to_string())?.runs.remove(0);
    let stop = RunOptions {
        stop_after: Some(1),
        ..RunOptions::default()
    };
    let first = run_experiment(&cfg, split.path(), &stop).map_err(|e| e.to_string())?.runs.remove(0);
    ensure(first.final_round == 1, || format!("interrupted run reached round {}", first.final_round))?;
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let b = run_experiment(&cfg, split.path(), &resume).map_err(|e| e.to_string())?.runs.remove(0);
    for file in [METRICS_FILE, ROUNDS_FILE] {
        ensure(fs::read(a.dir.join(file)).unwrap() == fs::read(b.dir.join(file)).unwrap(), || format!("{file} differs"))?;
    }
    let ckpt = |d: &Path| fs::read(checkpoint_path(d, 3)).unwrap();
    ensure(ckpt(&a.dir) == ckpt(&b.dir), || "final checkpoint differs".into())?;
    Ok("stop after round 1 + resume equals an uninterrupted 3-round run (metrics, round log, checkpoint)".into())
}

fn criterion_10() -> Outcome {
    let mut cfg = desk_config();
    cfg.federation.log_routing = true;
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, dir.path(), &RunOptions::default()).map_err(|e| e.to_string())?.runs.remove(0);
    let reports = read_round_reports(&run.dir).map_err(|e| e.to_string())?;
    let mut worst_cv = f64::INFINITY;
    for report in &reports {
        let csv = export_heatmap(&run.dir, report.round).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect();
        ensure(rows.iter().flatten().all(|f| (0.0..=1.0).contains(f)), || format!("round {}: frequency outside [0,1]", report.round))?;

        let live: Vec<_> = report.clients.iter().filter(|c| !c.diverged).collect();
        ensure(live.len() == rows.len(), || format!("round {}: {} rows for {} clients", report.round, rows.len(), live.len()))?;
        for (client, row) in live.iter().zip(&rows) {
            let log = client.routing_log.as_ref().ok_or("routing log missing")?;
            let mut counts = vec![0u64; report.num_experts];
            for step in log {
                let hit: BTreeSet<usize> = step.iter().flatten().copied().collect();
                hit.iter().for_each(|&j| counts[j] += 1);
            }
            let steps = log.len() as f64;
            for (j, (&c, &f)) in counts.iter().zip(row).enumerate() {
                ensure(c as f64 / steps == f, || format!("round {} client {} expert {j}: recount {} vs {f}", report.round, client.client_id, c as f64 / steps))?;
            }
        }

        let m = report.num_experts;
        let per_expert: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
        let mean = per_expert.iter().sum::<f64>() / m as f64;
        let sd = (per_expert.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / m as f64).sqrt();
        let cv = sd / mean;
        ensure(cv > 0.1, || format!("round {}: per-expert frequency CV {cv:.3}", report.round))?;
        worst_cv = worst_cv.min(cv);
    }
    Ok(format!("{} rounds recounted from routing logs; smallest per-expert CV {worst_cv:.3}", reports.len()))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("t=0 reduces to FedAvg", Duration::from_secs(5), criterion_1),
        ("aggregation edge cases", Duration::from_secs(1), criterion_2),
        ("gradient check", Duration::from_secs(30), criterion_3),
        ("sparse forward equals merged-weight oracle", Duration::from_secs(5), criterion_4),
        ("FLOPs: rank vs expert budgets", Duration::from_secs(1), criterion_5),
        ("SVD truncation optimality", Duration::from_secs(10), criterion_6),
        ("Dirichlet partition", Duration::from_secs(10), criterion_7),
        ("desk-scale learning and reproducibility", Duration::from_secs(120), criterion_8),
        ("checkpoint resume equivalence", Duration::from_secs(60), criterion_9),
        ("activation heatmap", Duration::from_secs(30), criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= *limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("[PASS] criterion {} {name}: {detail} ({elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {} {name}: {why} ({elapsed:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
