use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::ids::{CellId, NodeId};
use super::model::{Cell, Edge, InputSource, NodeKind, Preprocessor, SupernetModel};
use crate::error::{Error, Result};
use crate::kernel::{apply_primitive, ConvSpec, Mode, PrimitiveKind, Tape, Tensor, Var};
use crate::pruning::pruner_apply;

impl Preprocessor {
    /// Shape-align `x` to the owning cell: one factorized reduce per scale
    /// step, then a 1x1 projection.
    pub fn apply(&self, tape: &mut Tape, model: &SupernetModel, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for r in &self.reduces {
            h = apply_primitive(tape, &model.params, PrimitiveKind::FactorizedReduce, r, h, mode)?;
        }
        apply_primitive(tape, &model.params, PrimitiveKind::Conv1x1, &self.projection, h, mode)
    }
}

/// Align a source tensor to the input node `node` of cell `cell_idx`.
pub fn align_input_preprocess(
    tape: &mut Tape,
    model: &SupernetModel,
    cell_idx: usize,
    node: NodeId,
    source: Var,
    mode: Mode,
) -> Result<Var> {
    let cell = model
        .cells
        .get(cell_idx)
        .ok_or_else(|| Error::Structural(format!("no cell at index {cell_idx}")))?;
    let pre = cell
        .preprocessors
        .iter()
        .find(|p| p.input == node)
        .ok_or_else(|| Error::Structural(format!("{node} has no preprocessor in {}", cell.id)))?;
    let s = tape.shape(source);
    let side = model.config.side_at(pre.source_scale);
    if s.c != pre.source_channels || s.h < side || s.w < side {
        return Err(Error::Structural(format!(
            "source {s} does not match {} channels at scale {} for {}",
            pre.source_channels, pre.source_scale, cell.id
        )));
    }
    pre.apply(tape, model, source, mode)
}

fn edge_forward(tape: &mut Tape, model: &SupernetModel, edge: &Edge, x: Var, mode: Mode) -> Result<Var> {
    if edge.disconnected {
        tape.set_relu_counted(false);
    }
    let result = (|| {
        let mut outs = Vec::with_capacity(edge.ops.len());
        for op in &edge.ops {
            let y = apply_primitive(tape, &model.params, op.kind, &op.params, x, mode)?;
            outs.push(pruner_apply(tape, &model.params, y, &op.pruner));
        }
        let sum = tape.add(&outs)?;
        Ok(if edge.disconnected {
            tape.scale(sum, 0.0)
        } else {
            sum
        })
    })();
    tape.set_relu_counted(true);
    result
}

fn cell_forward(
    tape: &mut Tape,
    model: &SupernetModel,
    cell_idx: usize,
    stem: Var,
    outputs: &BTreeMap<CellId, Var>,
    mode: Mode,
) -> Result<Var> {
    let cell: &Cell = &model.cells[cell_idx];
    let order = cell
        .topological_order()
        .ok_or_else(|| Error::Structural(format!("{} contains a cycle", cell.id)))?;
    let mut values: BTreeMap<NodeId, Var> = BTreeMap::new();
    for id in order {
        let node = cell.node(id).expect("ordered node exists");
        match node.kind {
            NodeKind::Input(src) => {
                if !cell.has_outbound(id) {
                    continue;
                }
                let source = match src {
                    InputSource::Stem => stem,
                    InputSource::Cell(c) => *outputs.get(&c).ok_or_else(|| {
                        Error::Structural(format!("{} reads {c} before it is computed", cell.id))
                    })?,
                };
                let v = align_input_preprocess(tape, model, cell_idx, id, source, mode)?;
                values.insert(id, v);
            }
            NodeKind::Intermediate | NodeKind::Output => {
                let mut inbound = Vec::new();
                for e in cell.inbound(id) {
                    let Some(&x) = values.get(&e.from) else {
                        continue;
                    };
                    inbound.push(edge_forward(tape, model, e, x, mode)?);
                }
                if inbound.is_empty() {
                    if node.kind == NodeKind::Output {
                        return Err(Error::Structural(format!(
                            "{} output unreachable from its inputs",
                            cell.id
                        )));
                    }
                    continue;
                }
                debug_assert!(inbound.windows(2).all(|w| tape.shape(w[0]) == tape.shape(w[1])));
                let v = tape.add(&inbound)?;
                values.insert(id, v);
            }
        }
    }
    values
        .get(&cell.output())
        .copied()
        .ok_or_else(|| Error::Structural(format!("{} output was not computed", cell.id)))
}

impl SupernetModel {
    /// Record a forward pass of `x` on `tape`, returning the logits variable.
    /// `dropout_rng` is used in train mode only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c != self.config.in_channels {
            return Err(Error::Structural(format!(
                "input {xs} has {} channels, model expects {}",
                xs.c, self.config.in_channels
            )));
        }
        let w = tape.param(&self.params, self.stem.conv);
        let h = tape.conv2d(x, w, ConvSpec::same(3, 1, 1, xs.h, xs.w))?;
        let stem = self.stem.bn.apply(tape, &self.params, h, mode)?;
        let mut outputs = BTreeMap::new();
        let mut last = stem;
        for (k, cell) in self.cells.iter().enumerate() {
            last = cell_forward(tape, self, k, stem, &outputs, mode)?;
            outputs.insert(cell.id, last);
        }
        let mut feat = tape.global_avg_pool(last);
        if mode == Mode::Train {
            if let Some(rng) = dropout_rng {
                feat = tape.dropout(feat, self.config.dropout, rng);
            }
        }
        apply_primitive(
            tape,
            &self.params,
            PrimitiveKind::LinearClassifier,
            &self.head,
            feat,
            mode,
        )
    }

    /// Train-mode forward that also folds BatchNorm running statistics into
    /// the model. Returns the tape and the logits variable.
    pub fn forward_train(&mut self, batch: Tensor, rng: &mut ChaCha8Rng) -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let logits = self.forward(&mut tape, x, Mode::Train, Some(rng))?;
        tape.apply_running_updates(&mut self.params);
        Ok((tape, logits))
    }

    /// Logits for `batch` in the given non-training mode.
    pub fn logits(&self, batch: Tensor, mode: Mode) -> Result<Tensor> {
        debug_assert!(mode != Mode::Train);
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let logits = self.forward(&mut tape, x, mode, None)?;
        let out = tape.value(logits).clone();
        if !out.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelConfig;
    use crate::kernel::Shape4;
    use rand::{Rng, SeedableRng};

    fn config(channels: usize, size: usize) -> ModelConfig {
        ModelConfig {
            reductions: 2,
            init_channels: channels,
            in_channels: 3,
            image_size: size,
            classes: 10,
            dropout: 0.2,
            pruner_m: 1e9,
        }
    }

    fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn logits_have_batch_by_classes_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = SupernetModel::minimum_viable(config(4, 32), &mut rng).unwrap();
        let x = random(Shape4::new(2, 3, 32, 32), &mut rng);
        let logits = m.logits(x.clone(), Mode::Eval).unwrap();
        assert_eq!(logits.shape(), Shape4::new(2, 10, 1, 1));
        assert!(logits.all_finite());
        let mut m2 = m.clone();
        let (tape, v) = m2.forward_train(x, &mut rng).unwrap();
        assert!(tape.value(v).all_finite());
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SupernetModel::minimum_viable(config(3, 8), &mut rng).unwrap();
        let x = random(Shape4::new(3, 3, 8, 8), &mut rng);
        let a = m.clone().logits(x.clone(), Mode::Eval).unwrap();
        let b = m.logits(x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_batch_gives_finite_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = SupernetModel::minimum_viable(config(3, 8), &mut rng).unwrap();
        let x = Tensor::zeros(Shape4::new(2, 3, 8, 8));
        assert!(m.logits(x.clone(), Mode::Eval).unwrap().all_finite());
        assert!(m.logits(x.clone(), Mode::Probe).unwrap().all_finite());
        let (tape, v) = m.forward_train(x, &mut rng).unwrap();
        assert!(tape.value(v).all_finite());
    }

    #[test]
    fn all_pruners_off_leaves_head_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = SupernetModel::minimum_viable(config(3, 8), &mut rng).unwrap();
        let ids: Vec<_> = m.ops().map(|(_, o)| o.pruner.weight).collect();
        for id in ids {
            m.params.set_scalar(id, -0.5);
        }
        let x = random(Shape4::new(2, 3, 8, 8), &mut rng);
        let logits = m.logits(x, Mode::Eval).unwrap();
        let crate::kernel::OpParams::Linear { bias, .. } = m.head else { unreachable!() };
        let b = m.params.value(bias).data().to_vec();
        for n in 0..2 {
            for (j, bj) in b.iter().enumerate() {
                assert!((logits.at(n, j, 0, 0) - bj).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn preprocess_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = SupernetModel::minimum_viable(config(4, 32), &mut rng).unwrap();
        let mut tape = Tape::new();
        // cell 2 (scale 1, 8 channels) reading the stem (4 channels at 32x32)
        let stem = tape.input(random(Shape4::new(2, 4, 32, 32), &mut rng));
        let node = m.cells[1].inputs().find(|n| n.kind == NodeKind::Input(InputSource::Stem)).unwrap().id;
        let y = align_input_preprocess(&mut tape, &m, 1, node, stem, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape4::new(2, 8, 16, 16));
        // cell 3 reading the stem: two reduces
        let node = m.cells[2].inputs().find(|n| n.kind == NodeKind::Input(InputSource::Stem)).unwrap().id;
        let y = align_input_preprocess(&mut tape, &m, 2, node, stem, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape4::new(2, 16, 8, 8));
        assert_eq!(m.cells[2].preprocessors.iter().find(|p| p.input == node).unwrap().reduces.len(), 2);
        // same-scale source: projection only
        let node = m.cells[0].inputs().next().unwrap().id;
        assert!(m.cells[0].preprocessors[0].reduces.is_empty());
        let y = align_input_preprocess(&mut tape, &m, 0, node, stem, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape4::new(2, 4, 32, 32));
        // a source smaller than expected is rejected
        let small = tape.input(random(Shape4::new(2, 4, 16, 16), &mut rng));
        assert!(matches!(
            align_input_preprocess(&mut tape, &m, 0, node, small, Mode::Train),
            Err(Error::Structural(_))
        ));
    }
}
