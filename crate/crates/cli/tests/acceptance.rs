//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 3`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spidernet_cli::{execute, Cli};
use spidernet_core::checkpoint::{RunDirectory, FINAL_TAG};
use spidernet_core::data::Split;
use spidernet_core::graph::{Genotype, ModelConfig, SupernetModel};
use spidernet_core::kernel::{
    alloc_primitive, apply_primitive, cosine_lr, finite_diff_gradcheck, Init, Mode, ParamId, ParamRole,
    ParamStore, PrimitiveKind, Shape4, Tape, Tensor, Var,
};
use spidernet_core::metrics::{condition_from_jacobian, count_regions_with, joint_rank, MetricPair};
use spidernet_core::mutation::{estimate_full_edge, estimate_model, triangular_mutate, Orientation};
use spidernet_core::pruning::{deadhead_pass, pruner_apply, PrunerState, DEFAULT_M, WINDOW_EPOCHS};
use spidernet_core::search::{AttemptOutcome, Phase, Report, RunLog, MIB};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const MICRO_SEED: u64 = 7;
const EXTRA_SEEDS: [u64; 2] = [8, 9];
const BUDGET_MB: usize = 512;

struct MicroRun {
    dir: PathBuf,
    elapsed: Duration,
    report: Report,
    log: RunLog,
}

struct Context {
    scratch: tempfile::TempDir,
    micro: Option<MicroRun>,
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut full = vec!["spidernet"];
    full.extend_from_slice(args);
    let parsed = Cli::try_parse_from(full).map_err(|e| e.to_string())?;
    execute(parsed.command).map_err(|e| e.to_string())
}

fn search(out: &Path, seed: u64) -> Result<(Duration, Report, RunLog), String> {
    let seed = seed.to_string();
    let budget = BUDGET_MB.to_string();
    let start = Instant::now();
    cli(&[
        "search",
        "--reductions", "2",
        "--channels", "8",
        "--vram-budget-mb", &budget,
        "--cycles", "3",
        "--mutations-per-cycle", "2",
        "--epochs-per-cycle", "2",
        "--train-epochs", "20",
        "--dataset", "synthetic",
        "--seed", &seed,
        "--out", out.to_str().unwrap(),
    ])?;
    let elapsed = start.elapsed();
    let run = RunDirectory::open(out).map_err(|e| e.to_string())?;
    let report = run.load_report().map_err(|e| e.to_string())?;
    let log = run.load_runlog().map_err(|e| e.to_string())?;
    Ok((elapsed, report, log))
}

impl Context {
    fn micro(&mut self) -> Result<&MicroRun, String> {
        if self.micro.is_none() {
            let dir = self.scratch.path().join(format!("search-{MICRO_SEED}"));
            let (elapsed, report, log) = search(&dir, MICRO_SEED)?;
            self.micro = Some(MicroRun { dir, elapsed, report, log });
        }
        Ok(self.micro.as_ref().unwrap())
    }
}

fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs(t: &[f64]) -> f64 {
    t.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn max_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn desk_config(reductions: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        reductions,
        init_channels: channels,
        in_channels: 3,
        image_size: 8,
        classes: 2,
        dropout: 0.2,
        pruner_m: DEFAULT_M,
    }
}

/// Pruner gradient equals the input sum; negative weights silence the op.
fn criterion_1(_: &mut Context) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_rel: f64 = 0.0;
    let mut negatives = 0;
    for trial in 0..1000 {
        let w = loop {
            let w: f64 = rng.random_range(-1.0..1.0);
            if (w * DEFAULT_M).fract() != 0.0 {
                break w;
            }
        };
        let shape = Shape4::new(rng.random_range(1..4), rng.random_range(1..5), 4, 4);
        let x = random_tensor(shape, &mut rng);
        let mut store = ParamStore::new();
        let id = store.alloc("w", ParamRole::Pruner, Shape4::new(1, 1, 1, 1), Init::Const(w), &mut rng);
        let state = PrunerState::new(id, DEFAULT_M, 1);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = pruner_apply(&mut tape, &store, xv, &state);
        let grads = tape.backward(y, Tensor::full(shape, 1.0)).map_err(|e| e.to_string())?;
        let g: f64 = tape.param_grads(&grads).filter(|(p, _)| *p == id).map(|(_, t)| t.data()[0]).sum();
        let oracle: f64 = x.data().iter().sum();
        let rel = (g - oracle).abs() / oracle.abs().max(1e-12);
        worst_rel = worst_rel.max(rel);
        ensure!(rel <= 1e-5, "trial {trial}: gradient {g} vs input sum {oracle}");
        if w < 0.0 {
            negatives += 1;
            let out = max_abs(tape.value(y).data());
            ensure!(
                out <= max_abs(x.data()) * 1e-9,
                "trial {trial}: w = {w} leaves output magnitude {out}"
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "1000 trials, worst relative error {worst_rel:.1e}, {negatives} silenced, {elapsed:.2?}"
    ))
}

/// Strict 75% deadhead threshold over a full window and a small logit shift.
fn criterion_2(_: &mut Context) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = SupernetModel::minimum_viable(desk_config(2, 8), &mut rng).map_err(|e| e.to_string())?;
    let batches_per_epoch = 25;
    let window = batches_per_epoch * WINDOW_EPOCHS;
    m.set_history_window(window);
    // one op per edge: odd edges off 76% of the window, even edges exactly 75%
    let targets: Vec<(usize, ParamId, PrimitiveKind, usize)> = {
        let mut seen = BTreeSet::new();
        let mut t = Vec::new();
        for (edge, op) in m.ops() {
            if seen.insert(edge.id) {
                let i = t.len();
                let off = if i % 2 == 1 { 76 } else { 75 };
                t.push((i, op.pruner.weight, op.kind, off));
            }
        }
        t
    };
    let edges: Vec<_> = {
        let mut seen = BTreeSet::new();
        m.ops().filter(|(e, _)| seen.insert(e.id)).map(|(e, _)| e.id).collect()
    };
    for step in 0..window {
        for &(_, w, _, off) in &targets {
            // the off stretch is the most recent one, so ops are off at deletion time
            let is_off = step >= window - off;
            m.params_mut().set_scalar(w, if is_off { -0.1 } else { 0.1 });
        }
        m.record_usage();
    }
    let x = random_tensor(Shape4::new(6, 3, 8, 8), &mut rng);
    let before = m.logits(x.clone(), Mode::Eval).map_err(|e| e.to_string())?;
    let out = deadhead_pass(&mut m, 0, WINDOW_EPOCHS - 1).map_err(|e| e.to_string())?;
    let after = m.logits(x, Mode::Eval).map_err(|e| e.to_string())?;
    let alive: BTreeSet<_> = m.ops().map(|(e, o)| (e.id, o.kind)).collect();
    let mut deleted = 0;
    for (i, _, kind, off) in &targets {
        let present = alive.contains(&(edges[*i], *kind));
        if *off == 76 {
            ensure!(!present, "{kind} on {} off 76% survived", edges[*i]);
            deleted += 1;
        } else {
            ensure!(present, "{kind} on {} off exactly 75% was deleted", edges[*i]);
        }
    }
    ensure!(out.records.len() == deleted, "{} records for {deleted} deletions", out.records.len());
    ensure!(
        out.records.iter().all(|r| (r.off_fraction - 0.76).abs() < 1e-12),
        "recorded off fractions {:?}",
        out.records.iter().map(|r| r.off_fraction).collect::<Vec<_>>()
    );
    let shift = max_gap(&before, &after);
    ensure!(shift <= 1e-4, "eval logits moved by {shift}");
    Ok(format!("{deleted} ops at 76% deleted, {} at 75% kept, logit shift {shift:.1e}", targets.len() - deleted))
}

/// Random mutation sequences keep cells acyclic, keep old paths and grow by
/// one node and two edges each.
fn criterion_3(_: &mut Context) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = SupernetModel::minimum_viable(desk_config(2, 1), &mut rng).map_err(|e| e.to_string())?;
    ensure!(base.node_count() == 12 && base.edge_count() == 9, "minimum viable model has wrong counts");
    let mut total = 0usize;
    for seq in 0..10_000 {
        let mut m = base.clone();
        let len = rng.random_range(0..=60);
        for k in 1..=len {
            let before: Vec<_> = m.cells().iter().map(|c| c.connectivity()).collect();
            let edges = m.edge_ids();
            let edge = edges[rng.random_range(0..edges.len())];
            let (ci, ei) = m.locate_edge(edge).ok_or("listed edge missing")?;
            let (cell, e) = (&m.cells()[ci], &m.cells()[ci].edges[ei]);
            let legal: Vec<Orientation> = Orientation::ALL.into_iter().filter(|o| o.applies_to(cell, e)).collect();
            let orientation = legal[rng.random_range(0..legal.len())];
            triangular_mutate(&mut m, edge, orientation, &mut rng).map_err(|e| e.to_string())?;
            for (cell, old) in m.cells().iter().zip(&before) {
                ensure!(cell.is_acyclic(), "sequence {seq} step {k}: cycle after {orientation} on {edge}");
                ensure!(
                    old.is_subset(&cell.connectivity()),
                    "sequence {seq} step {k}: {orientation} on {edge} broke an existing path"
                );
            }
            ensure!(
                m.node_count() == 12 + k && m.edge_count() == 9 + 2 * k,
                "sequence {seq} after {k} mutations: {} nodes, {} edges",
                m.node_count(),
                m.edge_count()
            );
        }
        total += len;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("10000 sequences, {total} mutations, {elapsed:.1?}"))
}

fn structure(g: &Genotype) -> Vec<(u64, Vec<u64>, Vec<(u64, u64, u64, Vec<PrimitiveKind>)>)> {
    g.cells
        .iter()
        .map(|c| {
            let nodes = c.nodes.iter().map(|n| n.id.0).collect();
            let edges = c
                .edges
                .iter()
                .map(|e| (e.id.0, e.from.0, e.to.0, e.ops.iter().map(|o| o.kind).collect()))
                .collect();
            (c.id.0, nodes, edges)
        })
        .collect()
}

/// Replays the logged structural trajectory and re-derives every trial and
/// gate condition from it.
fn criterion_4(ctx: &mut Context) -> Check {
    let run = ctx.micro()?;
    let log = &run.log;
    let config = &log.config;
    let mut replay = SupernetModel::minimum_viable(desk_config(config.reductions, config.init_channels), &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let batch = config.batch_size;
    let mut trials = 0;
    let mut applied = 0;
    let deletions_in = |phase: Phase| log.deletions.iter().filter(move |d| d.phase == phase);
    for cycle in 0..config.cycles {
        for d in deletions_in(Phase::Cycle(cycle)) {
            ensure!(
                replay.delete_op(d.edge, d.kind).is_deleted(),
                "logged deletion of {} on {} does not replay",
                d.kind,
                d.edge
            );
        }
        for attempt in log.attempts.iter().filter(|a| a.cycle == cycle) {
            for (i, t) in attempt.trials.iter().enumerate() {
                if t.error.is_some() {
                    continue;
                }
                trials += 1;
                ensure!(t.params_identical, "cycle {cycle} trial {i}: on/off parameters differ");
                let gap = t.off_logit_gap.ok_or("trial without an off-copy logit gap")?;
                ensure!(gap <= 1e-5, "cycle {cycle} trial {i}: off copy moved logits by {gap}");
                let (on, off) = (t.on.as_ref().ok_or("missing on metrics")?, t.off.as_ref().ok_or("missing off metrics")?);
                let admissible = on.ntk_condition <= off.ntk_condition && on.lrc >= off.lrc;
                ensure!(t.admitted == admissible, "cycle {cycle} trial {i}: admission flag disagrees with metrics");
            }
            if let Some(w) = attempt.winner {
                let t = &attempt.trials[w];
                ensure!(t.admitted, "cycle {cycle}: winner {w} was not admitted");
                let gate = attempt.gate.ok_or("winner without a memory gate")?;
                let model_bytes = estimate_model(&replay, batch).total;
                let (cell_idx, _) = replay.locate_edge(t.edge).ok_or("winner edge missing in replay")?;
                let edge_bytes = estimate_full_edge(&replay, cell_idx, batch).total;
                ensure!(
                    gate.model_bytes == model_bytes && gate.edge_bytes == edge_bytes,
                    "cycle {cycle}: logged gate {gate:?} vs replayed {model_bytes}/{edge_bytes}"
                );
                ensure!(
                    gate.passed == (model_bytes + 2 * edge_bytes < config.vram_budget),
                    "cycle {cycle}: gate verdict inconsistent"
                );
            }
            if attempt.outcome == AttemptOutcome::Applied {
                let gate = attempt.gate.ok_or("applied mutation without a gate")?;
                ensure!(gate.passed, "cycle {cycle}: applied mutation failed its gate");
                let w = attempt.winner.ok_or("applied mutation without a winner")?;
                let mr = log
                    .mutations
                    .iter()
                    .find(|m| m.cycle == cycle && m.attempt == attempt.attempt)
                    .ok_or("applied attempt without a mutation record")?;
                let t = &attempt.trials[w];
                ensure!(mr.edge == t.edge && mr.orientation == t.orientation, "mutation differs from winner");
                let out = triangular_mutate(&mut replay, mr.edge, mr.orientation, &mut ChaCha8Rng::seed_from_u64(0))
                    .map_err(|e| e.to_string())?;
                ensure!(out.node == mr.node && out.edges == mr.new_edges, "replayed mutation created different ids");
                let after = estimate_model(&replay, batch).total;
                ensure!(after == mr.memory_after, "memory after mutation {after} vs logged {}", mr.memory_after);
                applied += 1;
            }
        }
    }
    for d in deletions_in(Phase::Final) {
        ensure!(replay.delete_op(d.edge, d.kind).is_deleted(), "final deletion does not replay");
    }
    ensure!(applied == log.mutations.len(), "{applied} applied attempts for {} mutations", log.mutations.len());
    let saved = RunDirectory::open(&run.dir)
        .and_then(|d| d.load_genotype(FINAL_TAG))
        .map_err(|e| e.to_string())?;
    ensure!(
        structure(&replay.genotype(None)) == structure(&saved),
        "replayed structure differs from the saved final structure"
    );
    ensure!(trials > 0, "no trials were logged");
    Ok(format!("{trials} trials and {applied} mutations replayed"))
}

/// Regions of an arrangement of lines in general position inside the unit
/// square: one plus the lines crossing it plus the crossings inside it.
fn arrangement_regions(w: &[[f64; 2]], b: &[f64]) -> usize {
    let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let crossing = (0..w.len())
        .filter(|&k| {
            let s: Vec<f64> = corners.iter().map(|p| w[k][0] * p[0] + w[k][1] * p[1] + b[k]).collect();
            s.iter().any(|&v| v > 0.0) && s.iter().any(|&v| v < 0.0)
        })
        .count();
    let mut inside = 0;
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            let det = w[i][0] * w[j][1] - w[i][1] * w[j][0];
            if det.abs() < 1e-12 {
                continue;
            }
            let x = (-b[i] * w[j][1] + b[j] * w[i][1]) / det;
            let y = (-w[i][0] * b[j] + w[j][0] * b[i]) / det;
            if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                inside += 1;
            }
        }
    }
    1 + crossing + inside
}

fn linear_jacobian(w: &[Vec<f64>], probe: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, String> {
    let (classes, dim) = (w.len(), w[0].len());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wid = store.alloc("w", ParamRole::Weight, Shape4::new(classes, dim, 1, 1), Init::Const(0.0), &mut rng);
    store.value_mut(wid).data_mut().copy_from_slice(&w.concat());
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(Shape4::new(probe.len(), dim, 1, 1), probe.concat()).map_err(|e| e.to_string())?);
    let wv = tape.param(&store, wid);
    let b = tape.input(Tensor::zeros(Shape4::new(1, classes, 1, 1)));
    let y = tape.linear(x, wv, b).map_err(|e| e.to_string())?;
    let shape = tape.shape(y);
    let mut rows = Vec::new();
    for r in 0..shape.len() {
        let mut seed = Tensor::zeros(shape);
        seed.data_mut()[r] = 1.0;
        let grads = tape.backward(y, seed).map_err(|e| e.to_string())?;
        let row = tape
            .param_grads(&grads)
            .find(|(id, _)| *id == wid)
            .map(|(_, g)| g.data().to_vec())
            .ok_or("no weight gradient")?;
        rows.push(row);
    }
    Ok(rows)
}

/// Linear region and kernel conditioning oracles.
fn criterion_5(_: &mut Context) -> Check {
    // affine network: two stacked linear maps, no ReLU
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lin = |tape: &mut Tape, x: Var, rows: usize, cols: usize, seed: u64| -> spidernet_core::Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.input(random_tensor(Shape4::new(rows, cols, 1, 1), &mut r));
        let b = tape.input(random_tensor(Shape4::new(1, rows, 1, 1), &mut r));
        tape.linear(x, w, b)
    };
    let linear = count_regions_with(4, 1, 1000, &mut rng, |tape, x| {
        let h = lin(tape, x, 6, 4, 50)?;
        lin(tape, h, 3, 6, 51).map(|_| ())
    })
    .map_err(|e| e.to_string())?;
    ensure!(linear == 1, "ReLU-free network has {linear} regions");

    // three lines in the unit square, sampled through the region counter
    const W: [[f64; 2]; 3] = [[1.0, -1.0], [0.7, 0.4], [-0.3, 1.2]];
    const B: [f64; 3] = [0.1, -0.5, -0.4];
    let exact = arrangement_regions(&W, &B);
    let sampled = count_regions_with(2, 1, 10_000, &mut rng, |tape, x| {
        let w = tape.input(Tensor::from_vec(Shape4::new(3, 2, 1, 1), W.concat())?);
        let b = tape.input(Tensor::from_vec(Shape4::new(1, 3, 1, 1), B.to_vec())?);
        let h = tape.linear(x, w, b)?;
        tape.relu(h);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ensure!(sampled <= exact, "sampled {sampled} regions, arrangement has {exact}");
    ensure!(sampled > 1, "sampling found a single region");

    // orthonormal probe through a linear map
    let dim = 6;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < 4 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &basis {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let weights: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let kappa = condition_from_jacobian(&linear_jacobian(&weights, &basis)?).map_err(|e| e.to_string())?;
    ensure!((kappa - 1.0).abs() <= 1e-6, "orthonormal probe condition number {kappa}");
    Ok(format!(
        "affine LRC 1, sampled {sampled} <= {exact} regions, kappa - 1 = {:.1e}",
        kappa - 1.0
    ))
}

/// Worked ranking example and invariance under monotone transforms.
fn criterion_6(_: &mut Context) -> Check {
    let pairs = |k: &[f64], l: &[usize]| -> Vec<MetricPair> {
        k.iter().zip(l).map(|(&ntk_condition, &lrc)| MetricPair { ntk_condition, lrc }).collect()
    };
    let worked = joint_rank(&pairs(&[10.0, 20.0, 30.0], &[5, 9, 7]));
    ensure!(worked == Some(1), "worked example picked {worked:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let n = rng.random_range(2..9);
        let k: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1e4)).collect();
        let l: Vec<usize> = (0..n).map(|_| rng.random_range(1..200)).collect();
        let base = joint_rank(&pairs(&k, &l));
        let a = rng.random_range(0.1..10.0);
        let p = rng.random_range(0.2..3.0);
        let c = rng.random_range(-5.0..5.0);
        let tk: Vec<f64> = match trial % 3 {
            0 => k.iter().map(|v| a * v.powf(p) + c + 10.0).collect(),
            1 => k.iter().map(|v| v.ln() + 1.0).collect(),
            _ => k.iter().map(|v| a * v).collect(),
        };
        let la = rng.random_range(1..5);
        let lb = rng.random_range(0..50);
        let tl: Vec<usize> = match trial % 2 {
            0 => l.iter().map(|v| la * v + lb).collect(),
            _ => l.iter().map(|v| v * v + lb).collect(),
        };
        let transformed = joint_rank(&pairs(&tk, &tl));
        ensure!(
            transformed == base,
            "trial {trial}: winner {base:?} became {transformed:?} under a monotone transform"
        );
    }
    Ok("worked example picks candidate 1, 100 transform trials stable".into())
}

/// Multinomial logistic regression by full-batch gradient descent.
fn logistic_accuracy(train: &Split, test: &Split) -> f64 {
    let d = train.per_sample();
    let k = train.classes;
    let mut w = vec![0.0; k * (d + 1)];
    let lr = 0.1;
    for _ in 0..300 {
        let mut grad = vec![0.0; w.len()];
        for i in 0..train.len() {
            let x = train.image(i);
            let scores: Vec<f64> = (0..k)
                .map(|c| w[c * (d + 1) + d] + x.iter().zip(&w[c * (d + 1)..c * (d + 1) + d]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for c in 0..k {
                let p = (scores[c] - max).exp() / z - if c == train.labels[i] { 1.0 } else { 0.0 };
                for (g, xv) in grad[c * (d + 1)..c * (d + 1) + d].iter_mut().zip(x) {
                    *g += p * xv;
                }
                grad[c * (d + 1) + d] += p;
            }
        }
        let scale = lr / train.len() as f64;
        w.iter_mut().zip(&grad).for_each(|(a, g)| *a -= scale * g);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            let best = (0..k)
                .max_by(|&a, &b| {
                    let s = |c: usize| w[c * (d + 1) + d] + x.iter().zip(&w[c * (d + 1)..c * (d + 1) + d]).map(|(p, q)| p * q).sum::<f64>();
                    s(a).total_cmp(&s(b))
                })
                .unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

/// The micro-run: time, memory budget, accuracy, and a baseline oracle.
fn criterion_7(ctx: &mut Context) -> Check {
    let run = ctx.micro()?;
    let budget = BUDGET_MB * MIB;
    let log = &run.log;
    ensure!(run.elapsed < Duration::from_secs(15 * 60), "micro-run took {:?}", run.elapsed);
    ensure!(run.report.memory_budget_bytes == budget, "budget recorded as {}", run.report.memory_budget_bytes);
    let mut peak = log.peak_memory_bytes;
    for m in &log.mutations {
        peak = peak.max(m.memory_after);
    }
    for c in &log.cycles {
        peak = peak.max(c.memory_bytes);
    }
    ensure!(peak <= budget, "memory estimate peaked at {peak} bytes");
    ensure!(run.report.peak_memory_bytes == log.peak_memory_bytes, "report and log disagree on peak memory");
    ensure!(run.report.test_accuracy >= 0.95, "test accuracy {}", run.report.test_accuracy);

    let config = RunDirectory::open(&run.dir)
        .and_then(|d| d.load_config())
        .map_err(|e| e.to_string())?;
    let data = config.dataset.load(config.seed).map_err(|e| e.to_string())?;
    let oracle = logistic_accuracy(&data.train, &data.test);
    ensure!(oracle >= 0.95, "logistic regression reaches only {oracle}");
    Ok(format!(
        "{:.1?}, accuracy {:.4}, peak {:.1} MiB of {BUDGET_MB}, logistic oracle {:.4}",
        run.elapsed,
        run.report.test_accuracy,
        peak as f64 / MIB as f64,
        oracle
    ))
}

/// Final parameter count of the search never exceeds its R2 replay.
fn criterion_8(ctx: &mut Context) -> Check {
    let scratch = ctx.scratch.path().to_path_buf();
    let mut runs: Vec<(u64, PathBuf, Report, RunLog)> = Vec::new();
    {
        let m = ctx.micro()?;
        runs.push((MICRO_SEED, m.dir.clone(), m.report.clone(), m.log.clone()));
    }
    for seed in EXTRA_SEEDS {
        let dir = scratch.join(format!("search-{seed}"));
        let (_, report, log) = search(&dir, seed)?;
        runs.push((seed, dir, report, log));
    }
    let mut lines = Vec::new();
    let mut all_hold = true;
    for (seed, dir, report, log) in runs {
        let out = scratch.join(format!("r2-{seed}"));
        cli(&["random", "--variant", "2", "--reference", dir.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
        let r2 = RunDirectory::open(&out).map_err(|e| e.to_string())?;
        let r2_report = r2.load_report().map_err(|e| e.to_string())?;
        let r2_log = r2.load_runlog().map_err(|e| e.to_string())?;
        ensure!(
            r2_log.attempted_mutations() == log.attempted_mutations(),
            "seed {seed}: R2 attempted {} mutations, reference {}",
            r2_log.attempted_mutations(),
            log.attempted_mutations()
        );
        ensure!(r2_log.deletions.is_empty(), "seed {seed}: R2 deleted ops");
        let holds = report.parameter_count <= r2_report.parameter_count;
        all_hold &= holds;
        let rel = if holds { "<=" } else { ">" };
        lines.push(format!("seed {seed}: {} {rel} {}", report.parameter_count, r2_report.parameter_count));
    }
    ensure!(all_hold, "search parameters vs R2: {}", lines.join(", "));
    Ok(lines.join(", "))
}

/// Identical invocations give identical logs and structures.
fn criterion_9(ctx: &mut Context) -> Check {
    let second = ctx.scratch.path().join(format!("search-{MICRO_SEED}-again"));
    let (_, _, log_b) = search(&second, MICRO_SEED)?;
    let run = ctx.micro()?;
    let a = run.log.without_timings().to_json().map_err(|e| e.to_string())?;
    let b = log_b.without_timings().to_json().map_err(|e| e.to_string())?;
    ensure!(a == b, "run logs differ");
    let files = |dir: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut out = BTreeMap::new();
        for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            let name = entry.file_name().into_string().unwrap();
            if name.starts_with("genotype_") {
                out.insert(name, std::fs::read(entry.path()).map_err(|e| e.to_string())?);
            }
        }
        Ok(out)
    };
    let ga = files(&run.dir)?;
    let gb = files(&second)?;
    ensure!(ga.len() == run.log.config.cycles + 1, "expected a structure per cycle plus the final one");
    ensure!(ga == gb, "structure files differ");
    Ok(format!("run logs ({} bytes) and {} structure files identical", a.len(), ga.len()))
}

fn primitive_error(kind: PrimitiveKind, shape: Shape4, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = alloc_primitive(kind, shape.c, shape.c, &mut store, "p", &mut rng);
    let ids: Vec<ParamId> = params
        .ids()
        .into_iter()
        .filter(|id| store.get(*id).unwrap().role == ParamRole::Weight)
        .collect();
    for &id in &ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x0 = random_tensor(shape, &mut rng);
    let out_shape = {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let y = apply_primitive(&mut tape, &store, kind, &params, x, Mode::Train).map_err(|e| e.to_string())?;
        tape.shape(y)
    };
    let r = random_tensor(out_shape, &mut rng);
    let mut point = x0.data().to_vec();
    for &id in &ids {
        point.extend_from_slice(store.value(id).data());
    }
    let mut f = |v: &[f64]| {
        let mut off = shape.len();
        for &id in &ids {
            let dst = store.value_mut(id).data_mut();
            let n = dst.len();
            dst.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(shape, v[..shape.len()].to_vec())?);
        let y = apply_primitive(&mut tape, &store, kind, &params, x, Mode::Train)?;
        let value: f64 = tape.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let grads = tape.backward(y, r.clone())?;
        let mut g = grads.get(x).map_or(vec![0.0; shape.len()], |t| t.data().to_vec());
        for &id in &ids {
            let mut acc = vec![0.0; store.value(id).len()];
            for (pid, pg) in tape.param_grads(&grads) {
                if pid == id {
                    acc.iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b);
                }
            }
            g.extend(acc);
        }
        Ok((value, g))
    };
    finite_diff_gradcheck(&mut f, &point, 1e-5).map_err(|e| e.to_string())
}

/// Finite-difference gradients and cosine schedule endpoints.
fn criterion_10(_: &mut Context) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for kind in PrimitiveKind::SEARCHABLE {
        for trial in 0..2 {
            let shape = Shape4::new(
                rng.random_range(2..4),
                rng.random_range(1..5),
                rng.random_range(4..9),
                rng.random_range(4..9),
            );
            let err = primitive_error(kind, shape, 1000 + 10 * trial + kind as u64)?;
            ensure!(err < 1e-3, "{kind} at {shape}: relative error {err}");
            worst = worst.max(err);
        }
    }
    for t in [1, 2, 20, 600] {
        let start = cosine_lr(0, t, 0.01).map_err(|e| e.to_string())?;
        let end = cosine_lr(t, t, 0.01).map_err(|e| e.to_string())?;
        ensure!(start == 0.01 && end == 0.0, "schedule over {t} epochs runs {start} to {end}");
    }
    Ok(format!("worst gradcheck error {worst:.1e}, lr(0) = 0.01, lr(T) = 0"))
}

fn main() -> ExitCode {
    let criteria: [(usize, fn(&mut Context) -> Check); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Context {
        scratch: tempfile::tempdir().expect("scratch directory"),
        micro: None,
    };
    let mut failed = 0;
    for (n, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut ctx)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {n}: PASS ({detail}) [{elapsed:.1?}]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL ({why}) [{elapsed:.1?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
