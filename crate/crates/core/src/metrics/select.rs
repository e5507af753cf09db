use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lrc::count_linear_regions;
use super::ntk::ntk_condition_number;
use super::rank::{joint_rank, MetricPair};
use crate::error::{Error, Result};
use crate::graph::{ChannelPlan, EdgeId, SupernetModel};
use crate::kernel::{Mode, Tensor};
use crate::mutation::{estimate_full_edge, estimate_model, triangular_mutate, Orientation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Stop evaluating once this many candidates are admitted.
    pub n_good: usize,
    /// Samples in the kernel probe batch.
    pub probe_size: usize,
    /// Uniform inputs per linear region count.
    pub lrc_samples: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            n_good: 5,
            probe_size: 8,
            lrc_samples: 500,
        }
    }
}

/// One evaluated candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub edge: EdgeId,
    pub orientation: Orientation,
    pub on: Option<MetricPair>,
    pub off: Option<MetricPair>,
    pub admitted: bool,
    /// Parameters of the on and off copies were bitwise equal.
    pub params_identical: bool,
    /// Largest eval-logit difference between the off copy and the unmutated slim model.
    pub off_logit_gap: Option<f64>,
    /// Set when a metric failed and the candidate was skipped.
    pub error: Option<String>,
}

/// The `s(M) + 2 s(e*) < s_max` check for the winning candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryGate {
    pub model_bytes: usize,
    pub edge_bytes: usize,
    pub budget_bytes: usize,
    pub passed: bool,
}

impl MemoryGate {
    pub fn check(model_bytes: usize, edge_bytes: usize, budget_bytes: usize) -> Self {
        MemoryGate {
            model_bytes,
            edge_bytes,
            budget_bytes,
            passed: model_bytes + 2 * edge_bytes < budget_bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub choice: Option<(EdgeId, Orientation)>,
    /// Index into `trials` of the rank winner, even if the gate refused it.
    pub winner: Option<usize>,
    pub trials: Vec<TrialRecord>,
    pub gate: Option<MemoryGate>,
}

/// Structural copy with every operation at one channel and fresh weights.
/// Pruner weights, and so gate states, are copied from `model`.
pub fn make_slim_copy<R: Rng + ?Sized>(model: &SupernetModel, rng: &mut R) -> Result<SupernetModel> {
    SupernetModel::instantiate(&model.genotype(None), ChannelPlan::Slim, rng)
}

fn measure(model: &SupernetModel, probe: &Tensor, lrc_samples: usize, lrc_seed: u64) -> Result<MetricPair> {
    Ok(MetricPair {
        ntk_condition: ntk_condition_number(model, probe)?,
        lrc: count_linear_regions(model, lrc_samples, &mut ChaCha8Rng::seed_from_u64(lrc_seed))?,
    })
}

fn max_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Choose the next mutation without training: evaluate trial mutations on a
/// slim copy with the new edges connected and disconnected, admit those that
/// improve neither metric's opposite, rank the admitted ones and apply the
/// memory gate for `batch`-sized activations.
pub fn select_mutation_ntklrc<R: Rng + ?Sized>(
    model: &SupernetModel,
    config: &SelectionConfig,
    budget_bytes: usize,
    batch: usize,
    probe: &Tensor,
    rng: &mut R,
) -> Result<Selection> {
    if config.n_good == 0 {
        return Err(Error::Config("n_good must be at least 1".into()));
    }
    let slim = make_slim_copy(model, rng)?;
    let template = slim.logits(probe.clone(), Mode::Eval)?;
    let mut order = model.edge_ids();
    order.shuffle(rng);
    let mut trials = Vec::new();
    let mut admitted = Vec::new();
    for edge in order {
        let orientation = Orientation::Relay;
        let mut on = slim.clone();
        let added = triangular_mutate(&mut on, edge, orientation, rng)?;
        let mut off = on.clone();
        for e in added.edges {
            off.set_disconnected(e, true)?;
        }
        let lrc_seed = rng.random::<u64>();
        let mut record = TrialRecord {
            edge,
            orientation,
            on: None,
            off: None,
            admitted: false,
            params_identical: on.params().bitwise_eq(off.params()),
            off_logit_gap: None,
            error: None,
        };
        let result = (|| -> Result<(MetricPair, MetricPair, f64)> {
            let gap = max_gap(&off.logits(probe.clone(), Mode::Eval)?, &template);
            let m_on = measure(&on, probe, config.lrc_samples, lrc_seed)?;
            let m_off = measure(&off, probe, config.lrc_samples, lrc_seed)?;
            Ok((m_on, m_off, gap))
        })();
        match result {
            Ok((m_on, m_off, gap)) => {
                record.on = Some(m_on);
                record.off = Some(m_off);
                record.off_logit_gap = Some(gap);
                record.admitted = m_on.no_worse_than(&m_off);
            }
            Err(e) => {
                log::warn!("candidate {edge} skipped: {e}");
                record.error = Some(e.to_string());
            }
        }
        if record.admitted {
            admitted.push(trials.len());
        }
        trials.push(record);
        if admitted.len() >= config.n_good {
            break;
        }
    }
    let pairs: Vec<MetricPair> = admitted.iter().map(|&i| trials[i].on.expect("admitted trials are measured")).collect();
    let Some(best) = joint_rank(&pairs).map(|i| admitted[i]) else {
        return Ok(Selection {
            choice: None,
            winner: None,
            trials,
            gate: None,
        });
    };
    let (cell_idx, _) = model.locate_edge(trials[best].edge).expect("candidate edge exists");
    let gate = MemoryGate::check(
        estimate_model(model, batch).total,
        estimate_full_edge(model, cell_idx, batch).total,
        budget_bytes,
    );
    Ok(Selection {
        choice: gate.passed.then_some((trials[best].edge, trials[best].orientation)),
        winner: Some(best),
        trials,
        gate: Some(gate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelConfig;
    use crate::kernel::Shape4;

    fn model(seed: u64) -> SupernetModel {
        let config = ModelConfig {
            reductions: 2,
            init_channels: 4,
            in_channels: 3,
            image_size: 8,
            classes: 2,
            dropout: 0.2,
            pruner_m: 1e9,
        };
        SupernetModel::minimum_viable(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn probe(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape4::new(8, 3, 8, 8);
        Tensor::from_vec(s, (0..s.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn small() -> SelectionConfig {
        SelectionConfig {
            n_good: 5,
            probe_size: 8,
            lrc_samples: 60,
        }
    }

    #[test]
    fn slim_copy_is_isomorphic_with_one_channel() {
        let m = model(1);
        let s = make_slim_copy(&m, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.is_slim());
        assert_eq!((s.edge_count(), s.node_count(), s.op_count()), (9, 12, 63));
        assert!(s.cells().iter().all(|c| c.channels == 1));
        for ((_, a), (_, b)) in m.ops().zip(s.ops()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(m.params().scalar(a.pruner.weight), s.params().scalar(b.pruner.weight));
        }
        let ss = make_slim_copy(&s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ss.parameter_count(), s.parameter_count());
        let wide = {
            let mut cfg = m.config().clone();
            cfg.init_channels = 9;
            SupernetModel::minimum_viable(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        };
        let sw = make_slim_copy(&wide, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(sw.parameter_count(), s.parameter_count());
        let copy = s.clone();
        assert!(copy.params().bitwise_eq(s.params()));
    }

    #[test]
    fn trials_are_faithful() {
        let m = model(4);
        let sel = select_mutation_ntklrc(&m, &small(), usize::MAX, 8, &probe(5), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(!sel.trials.is_empty());
        for t in &sel.trials {
            assert!(t.params_identical);
            if let Some(gap) = t.off_logit_gap {
                assert!(gap <= 1e-5, "{gap}");
            }
            if let (Some(on), Some(off)) = (t.on, t.off) {
                assert_eq!(t.admitted, on.no_worse_than(&off));
                assert!(on.ntk_condition >= 1.0 && on.lrc >= 1);
            }
        }
        let admitted = sel.trials.iter().filter(|t| t.admitted).count();
        assert!(admitted <= 5);
        if admitted < 5 {
            assert_eq!(sel.trials.len(), 9);
        }
        if let Some((edge, _)) = sel.choice {
            let w = &sel.trials[sel.winner.unwrap()];
            assert_eq!(w.edge, edge);
            assert!(w.admitted);
            assert!(sel.gate.unwrap().passed);
        }
    }

    #[test]
    fn selection_is_seeded() {
        let m = model(7);
        let run = || select_mutation_ntklrc(&m, &small(), usize::MAX, 8, &probe(8), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn memory_gate_refuses_over_budget() {
        let m = model(10);
        let total = estimate_model(&m, 8).total;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sel = select_mutation_ntklrc(&m, &small(), total + 1, 8, &probe(12), &mut rng).unwrap();
        assert_eq!(sel.choice, None);
        if let Some(g) = sel.gate {
            assert!(!g.passed);
            assert_eq!(g.model_bytes, total);
        }
    }

    #[test]
    fn gate_arithmetic() {
        assert!(MemoryGate::check(10, 4, 19).passed);
        assert!(!MemoryGate::check(10, 4, 18).passed);
    }
}
