use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SearchConfig;
use super::runlog::{AttemptOutcome, AttemptRecord, CycleRecord, FinalStats, MutationRecord, Phase, RunKind, RunLog};
use super::train::{evaluate, train_prune, PhaseDeletion, TrainSettings};
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::graph::{ChannelPlan, EdgeId, Genotype, SupernetModel};
use crate::metrics::{select_mutation_ntklrc, MemoryGate};
use crate::mutation::{estimate_full_edge, estimate_model, reinit_weights, triangular_mutate, Orientation};

/// How one deletion column of a random baseline behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    None,
    Random,
    Pruners,
}

/// The four random baselines. All mutate uniformly random edges; they
/// differ in inter-cycle and final-training deletion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandomVariant {
    R1,
    R2,
    R3,
    R4,
}

impl RandomVariant {
    pub const ALL: [RandomVariant; 4] = [RandomVariant::R1, RandomVariant::R2, RandomVariant::R3, RandomVariant::R4];

    pub fn number(self) -> u8 {
        match self {
            RandomVariant::R1 => 1,
            RandomVariant::R2 => 2,
            RandomVariant::R3 => 3,
            RandomVariant::R4 => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.number() == n)
            .ok_or_else(|| Error::Config(format!("random variant must be 1-4, got {n}")))
    }

    pub fn inter_cycle(self) -> DeletionMode {
        match self {
            RandomVariant::R1 | RandomVariant::R4 => DeletionMode::Random,
            RandomVariant::R2 | RandomVariant::R3 => DeletionMode::None,
        }
    }

    pub fn final_training(self) -> DeletionMode {
        match self {
            RandomVariant::R1 => DeletionMode::Random,
            RandomVariant::R2 => DeletionMode::None,
            RandomVariant::R3 | RandomVariant::R4 => DeletionMode::Pruners,
        }
    }
}

/// Hook called at every cycle boundary, e.g. to checkpoint the structure.
pub trait SearchObserver {
    fn cycle_end(&mut self, _cycle: usize, _model: &SupernetModel, _log: &RunLog) -> Result<()> {
        Ok(())
    }
}

impl SearchObserver for () {}

enum Driver<'a> {
    SpiderNet,
    Random { variant: RandomVariant, reference: &'a RunLog },
}

/// The full search: grow, train and prune over `config.cycles` cycles,
/// choosing mutations with the train-free metrics, then train the final
/// architecture from scratch.
pub fn run_spidernet(
    config: &SearchConfig,
    data: &Dataset,
    spec: Option<DatasetSpec>,
    observer: &mut dyn SearchObserver,
) -> Result<(SupernetModel, RunLog)> {
    run(Driver::SpiderNet, config, data, spec, observer)
}

/// A random baseline replaying the schedule of a finished reference run.
pub fn run_random_variant(
    variant: RandomVariant,
    reference: &RunLog,
    config: &SearchConfig,
    data: &Dataset,
    spec: Option<DatasetSpec>,
    observer: &mut dyn SearchObserver,
) -> Result<(SupernetModel, RunLog)> {
    reference.check_replayable()?;
    if reference.config.cycles != config.cycles {
        return Err(Error::Config(format!(
            "reference ran {} cycles, this run {}",
            reference.config.cycles, config.cycles
        )));
    }
    run(Driver::Random { variant, reference }, config, data, spec, observer)
}

fn phase_deletion(mode: DeletionMode, schedule: &[usize]) -> PhaseDeletion<'_> {
    match mode {
        DeletionMode::None => PhaseDeletion::Frozen,
        DeletionMode::Random => PhaseDeletion::Random(schedule),
        DeletionMode::Pruners => PhaseDeletion::Pruners,
    }
}

fn run(
    driver: Driver<'_>,
    config: &SearchConfig,
    data: &Dataset,
    spec: Option<DatasetSpec>,
    observer: &mut dyn SearchObserver,
) -> Result<(SupernetModel, RunLog)> {
    let start = Instant::now();
    config.validate()?;
    let kind = match &driver {
        Driver::SpiderNet => RunKind::SpiderNet,
        Driver::Random { variant, .. } => RunKind::Random { variant: variant.number() },
    };
    let mut log = RunLog::new(kind, config, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model_config = config.model_config(data.channels(), data.image_size(), data.classes());
    let mut model = SupernetModel::minimum_viable(model_config, &mut rng)?;
    let batch = config.batch_size;
    let initial = estimate_model(&model, batch).total;
    if initial >= config.vram_budget {
        return Err(Error::Config(format!(
            "memory budget of {} bytes does not fit the initial model ({initial} bytes)",
            config.vram_budget
        )));
    }
    log.peak_memory_bytes = initial;
    model.set_history_window(data.train.batches_per_epoch(batch) * crate::pruning::WINDOW_EPOCHS);
    let settings = TrainSettings {
        batch_size: batch,
        base_lr: config.base_lr,
    };

    for cycle in 0..config.cycles {
        reinit_weights(&mut model, &mut rng);
        let phase = Phase::Cycle(cycle);
        let (mode, mut schedule) = match &driver {
            Driver::SpiderNet => (DeletionMode::Pruners, Vec::new()),
            Driver::Random { variant, reference } => {
                let mut s = vec![0; config.epochs_per_cycle];
                s[config.epochs_per_cycle - 1] = reference.cycles[cycle].deleted;
                (variant.inter_cycle(), s)
            }
        };
        if mode != DeletionMode::Random {
            schedule.clear();
        }
        let deleted = train_prune(
            &mut model,
            data,
            phase,
            config.epochs_per_cycle,
            settings,
            phase_deletion(mode, &schedule),
            &mut rng,
            &mut log,
        )?;

        let attempts = match &driver {
            Driver::SpiderNet => config.mutations_per_cycle,
            Driver::Random { reference, .. } => reference.cycles[cycle].attempts,
        };
        let mut attempted = 0;
        let mut applied = 0;
        for attempt in 0..attempts {
            attempted += 1;
            let rng_word_pos = rng.get_word_pos();
            let (choice, record) = match &driver {
                Driver::SpiderNet => ntklrc_attempt(&model, config, data, cycle, attempt, &mut rng),
                Driver::Random { .. } => random_attempt(&model, config, cycle, attempt, &mut rng),
            };
            let stop = matches!(driver, Driver::SpiderNet)
                && matches!(record.outcome, AttemptOutcome::NoViable | AttemptOutcome::OverBudget | AttemptOutcome::Failed(_));
            log.attempts.push(record);
            if let Some((edge, orientation)) = choice {
                let out = triangular_mutate(&mut model, edge, orientation, &mut rng)?;
                let memory_after = estimate_model(&model, batch).total;
                if memory_after > config.vram_budget {
                    return Err(Error::Run(format!(
                        "mutation of {edge} raised the estimate to {memory_after} bytes, over the budget"
                    )));
                }
                log.peak_memory_bytes = log.peak_memory_bytes.max(memory_after);
                log.mutations.push(MutationRecord {
                    cycle,
                    attempt,
                    edge,
                    orientation,
                    node: out.node,
                    new_edges: out.edges,
                    rng_word_pos,
                    memory_after,
                });
                applied += 1;
            }
            if stop {
                break;
            }
        }
        log.cycles.push(CycleRecord {
            cycle,
            deleted,
            attempts: attempted,
            applied,
            op_count: model.op_count(),
            parameter_count: model.parameter_count(),
            memory_bytes: estimate_model(&model, batch).total,
        });
        log::info!(
            "cycle {cycle}: deleted {deleted}, applied {applied}/{attempted} mutations, {} ops",
            model.op_count()
        );
        observer.cycle_end(cycle, &model, &log)?;
    }
    log.timings.search_seconds = start.elapsed().as_secs_f64();

    reinit_weights(&mut model, &mut rng);
    let (mode, schedule) = match &driver {
        Driver::SpiderNet => (DeletionMode::Pruners, Vec::new()),
        Driver::Random { variant, reference } => {
            let mode = variant.final_training();
            let mut s = vec![0; config.train_epochs];
            if mode == DeletionMode::Random {
                for _ in 0..reference.final_deleted {
                    s[rng.random_range(0..config.train_epochs)] += 1;
                }
            }
            (mode, s)
        }
    };
    log.final_deleted = train_prune(
        &mut model,
        data,
        Phase::Final,
        config.train_epochs,
        settings,
        phase_deletion(mode, &schedule),
        &mut rng,
        &mut log,
    )?;
    let test_accuracy = evaluate(&model, &data.test, batch)?;
    log.final_stats = Some(FinalStats {
        test_accuracy,
        parameter_count: model.parameter_count(),
        peak_memory_bytes: log.peak_memory_bytes,
        memory_bytes: estimate_model(&model, batch).total,
        node_count: model.node_count(),
        edge_count: model.edge_count(),
        op_count: model.op_count(),
    });
    log.timings.total_seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Train a fixed structure from fresh weights for `config.train_epochs`
/// epochs with live pruners, then evaluate it. The structure's own
/// reductions and channels override those in `config`.
pub fn retrain_genotype(
    genotype: &Genotype,
    config: &SearchConfig,
    data: &Dataset,
    spec: Option<DatasetSpec>,
) -> Result<(SupernetModel, RunLog)> {
    let start = Instant::now();
    let mut config = config.clone();
    config.reductions = genotype.config.reductions;
    config.init_channels = genotype.config.init_channels;
    config.validate()?;
    let g = &genotype.config;
    if (g.in_channels, g.image_size, g.classes) != (data.channels(), data.image_size(), data.classes()) {
        return Err(Error::Config(format!(
            "structure expects {}x{}x{} inputs with {} classes, dataset has {}x{}x{} with {}",
            g.in_channels,
            g.image_size,
            g.image_size,
            g.classes,
            data.channels(),
            data.image_size(),
            data.image_size(),
            data.classes()
        )));
    }
    let mut log = RunLog::new(RunKind::Retrain, &config, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SupernetModel::instantiate(genotype, ChannelPlan::Recorded, &mut rng)?;
    let batch = config.batch_size;
    log.peak_memory_bytes = estimate_model(&model, batch).total;
    model.set_history_window(data.train.batches_per_epoch(batch) * crate::pruning::WINDOW_EPOCHS);
    let settings = TrainSettings {
        batch_size: batch,
        base_lr: config.base_lr,
    };
    log.final_deleted = train_prune(
        &mut model,
        data,
        Phase::Final,
        config.train_epochs,
        settings,
        PhaseDeletion::Pruners,
        &mut rng,
        &mut log,
    )?;
    let test_accuracy = evaluate(&model, &data.test, batch)?;
    log.final_stats = Some(FinalStats {
        test_accuracy,
        parameter_count: model.parameter_count(),
        peak_memory_bytes: log.peak_memory_bytes,
        memory_bytes: estimate_model(&model, batch).total,
        node_count: model.node_count(),
        edge_count: model.edge_count(),
        op_count: model.op_count(),
    });
    log.timings.total_seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

type Choice = Option<(EdgeId, Orientation)>;

fn ntklrc_attempt(
    model: &SupernetModel,
    config: &SearchConfig,
    data: &Dataset,
    cycle: usize,
    attempt: usize,
    rng: &mut ChaCha8Rng,
) -> (Choice, AttemptRecord) {
    let probe = data.probe(config.selection.probe_size, rng);
    match select_mutation_ntklrc(model, &config.selection, config.vram_budget, config.batch_size, &probe, rng) {
        Ok(sel) => {
            let outcome = match (sel.choice, sel.winner) {
                (Some(_), _) => AttemptOutcome::Applied,
                (None, Some(_)) => AttemptOutcome::OverBudget,
                (None, None) => AttemptOutcome::NoViable,
            };
            let record = AttemptRecord {
                cycle,
                attempt,
                outcome,
                winner: sel.winner,
                gate: sel.gate,
                trials: sel.trials,
            };
            (sel.choice, record)
        }
        Err(e) => {
            log::warn!("cycle {cycle} attempt {attempt}: selection failed: {e}");
            let record = AttemptRecord {
                cycle,
                attempt,
                outcome: AttemptOutcome::Failed(e.to_string()),
                winner: None,
                gate: None,
                trials: Vec::new(),
            };
            (None, record)
        }
    }
}

fn random_attempt(
    model: &SupernetModel,
    config: &SearchConfig,
    cycle: usize,
    attempt: usize,
    rng: &mut ChaCha8Rng,
) -> (Choice, AttemptRecord) {
    let edges = model.edge_ids();
    let edge = edges[rng.random_range(0..edges.len())];
    let (cell_idx, _) = model.locate_edge(edge).expect("listed edge exists");
    let gate = MemoryGate::check(
        estimate_model(model, config.batch_size).total,
        estimate_full_edge(model, cell_idx, config.batch_size).total,
        config.vram_budget,
    );
    let record = AttemptRecord {
        cycle,
        attempt,
        outcome: if gate.passed {
            AttemptOutcome::Applied
        } else {
            AttemptOutcome::OverBudget
        },
        winner: None,
        gate: Some(gate),
        trials: Vec::new(),
    };
    (gate.passed.then_some((edge, Orientation::Relay)), record)
}
