use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParamRole, ParamStore};
use super::tape::{ConvSpec, Mode, Tape, Var};
use super::tensor::Shape4;
use crate::error::{Error, Result};

/// Every primitive the kernel knows. The first seven are the searchable
/// operation set; the rest are fixed plumbing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Identity,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    Conv1x1,
    FactorizedReduce,
    BatchNorm,
    Relu,
    GlobalAvgPool,
    LinearClassifier,
}

impl PrimitiveKind {
    pub const SEARCHABLE: [PrimitiveKind; 7] = [
        PrimitiveKind::Identity,
        PrimitiveKind::MaxPool3x3,
        PrimitiveKind::AvgPool3x3,
        PrimitiveKind::SepConv3x3,
        PrimitiveKind::SepConv5x5,
        PrimitiveKind::DilConv3x3,
        PrimitiveKind::DilConv5x5,
    ];

    pub fn is_searchable(self) -> bool {
        Self::SEARCHABLE.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Identity => "identity",
            PrimitiveKind::MaxPool3x3 => "max_pool_3x3",
            PrimitiveKind::AvgPool3x3 => "avg_pool_3x3",
            PrimitiveKind::SepConv3x3 => "sep_conv_3x3",
            PrimitiveKind::SepConv5x5 => "sep_conv_5x5",
            PrimitiveKind::DilConv3x3 => "dil_conv_3x3",
            PrimitiveKind::DilConv5x5 => "dil_conv_5x5",
            PrimitiveKind::Conv1x1 => "conv_1x1",
            PrimitiveKind::FactorizedReduce => "factorized_reduce",
            PrimitiveKind::BatchNorm => "batch_norm",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::GlobalAvgPool => "global_avg_pool",
            PrimitiveKind::LinearClassifier => "linear_classifier",
        }
    }

    /// `(kernel, dilation, stages)` for the separable/dilated convolution family.
    fn conv_stack(self) -> Option<(usize, usize, usize)> {
        match self {
            PrimitiveKind::SepConv3x3 => Some((3, 1, 2)),
            PrimitiveKind::SepConv5x5 => Some((5, 1, 2)),
            PrimitiveKind::DilConv3x3 => Some((3, 2, 1)),
            PrimitiveKind::DilConv5x5 => Some((5, 2, 1)),
            _ => None,
        }
    }

    /// Trainable scalars for a `c_in -> c_out` instance. For the classifier
    /// `c_in` is the feature count and `c_out` the class count.
    pub fn param_count(self, c_in: usize, c_out: usize) -> usize {
        if let Some((k, _, stages)) = self.conv_stack() {
            return stages * (c_in * k * k + c_in * c_in + 2 * c_in);
        }
        match self {
            PrimitiveKind::Conv1x1 => c_in * c_out + 2 * c_out,
            PrimitiveKind::FactorizedReduce => c_in * c_out + 2 * c_out,
            PrimitiveKind::BatchNorm => 2 * c_in,
            PrimitiveKind::LinearClassifier => c_in * c_out + c_out,
            _ => 0,
        }
    }

    /// Non-trainable stored scalars (BatchNorm running statistics).
    pub fn buffer_count(self, c_in: usize, c_out: usize) -> usize {
        if let Some((_, _, stages)) = self.conv_stack() {
            return stages * 2 * c_in;
        }
        match self {
            PrimitiveKind::Conv1x1 | PrimitiveKind::FactorizedReduce => 2 * c_out,
            PrimitiveKind::BatchNorm => 2 * c_in,
            _ => 0,
        }
    }

    /// Elements of every intermediate tensor one sample produces, for an
    /// input of `c_in x h x w`.
    pub fn activation_elements(self, c_in: usize, c_out: usize, h: usize, w: usize) -> usize {
        let plane = h * w;
        if let Some((_, _, stages)) = self.conv_stack() {
            // relu, depthwise, pointwise, batch norm per stage
            return stages * 4 * c_in * plane;
        }
        match self {
            PrimitiveKind::Identity => 0,
            PrimitiveKind::MaxPool3x3 | PrimitiveKind::AvgPool3x3 => c_in * plane,
            PrimitiveKind::Conv1x1 => c_in * plane + 2 * c_out * plane,
            PrimitiveKind::FactorizedReduce => {
                let out_plane = h.div_ceil(2) * w.div_ceil(2);
                // relu, two strided convs, concat, batch norm
                c_in * plane + 3 * c_out * out_plane
            }
            PrimitiveKind::BatchNorm | PrimitiveKind::Relu => c_in * plane,
            PrimitiveKind::GlobalAvgPool => c_in,
            PrimitiveKind::LinearClassifier => c_out,
            _ => unreachable!("conv stacks handled above"),
        }
    }
}

impl std::fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    pub fn alloc<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Self {
        let s = Shape4::new(1, c, 1, 1);
        BnParams {
            gamma: store.alloc(format!("{name}.gamma"), ParamRole::Weight, s, Init::Const(1.0), rng),
            beta: store.alloc(format!("{name}.beta"), ParamRole::Weight, s, Init::Const(0.0), rng),
            running_mean: store.alloc(
                format!("{name}.running_mean"),
                ParamRole::Running,
                s,
                Init::Const(0.0),
                rng,
            ),
            running_var: store.alloc(
                format!("{name}.running_var"),
                ParamRole::Running,
                s,
                Init::Const(1.0),
                rng,
            ),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.running_mean, self.running_var]
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(x, g, b, (self.running_mean, self.running_var), store, mode)
    }
}

/// One ReLU → depthwise → pointwise → BatchNorm stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn: BnParams,
}

/// Parameters of one primitive instance, laid out per kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpParams {
    None,
    Stages(Vec<ConvStage>),
    Conv1x1 {
        conv: ParamId,
        bn: BnParams,
    },
    FactorizedReduce {
        even: ParamId,
        odd: Option<ParamId>,
        bn: BnParams,
    },
    BatchNorm(BnParams),
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
}

impl OpParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            OpParams::None => Vec::new(),
            OpParams::Stages(stages) => stages
                .iter()
                .flat_map(|s| {
                    let mut v = vec![s.depthwise, s.pointwise];
                    v.extend(s.bn.ids());
                    v
                })
                .collect(),
            OpParams::Conv1x1 { conv, bn } => {
                let mut v = vec![*conv];
                v.extend(bn.ids());
                v
            }
            OpParams::FactorizedReduce { even, odd, bn } => {
                let mut v = vec![*even];
                v.extend(odd.iter().copied());
                v.extend(bn.ids());
                v
            }
            OpParams::BatchNorm(bn) => bn.ids().to_vec(),
            OpParams::Linear { weight, bias } => vec![*weight, *bias],
        }
    }

    pub fn free(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.free(id);
        }
    }
}

fn conv_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: Shape4,
    rng: &mut R,
) -> ParamId {
    let fan_in = shape.c * shape.h * shape.w;
    store.alloc(name, ParamRole::Weight, shape, Init::fan_in(fan_in), rng)
}

/// Allocate parameters for a `c_in -> c_out` instance of `kind`.
pub fn alloc_primitive<R: Rng + ?Sized>(
    kind: PrimitiveKind,
    c_in: usize,
    c_out: usize,
    store: &mut ParamStore,
    name: &str,
    rng: &mut R,
) -> OpParams {
    if let Some((k, _, stages)) = kind.conv_stack() {
        let stages = (0..stages)
            .map(|i| ConvStage {
                depthwise: conv_weight(store, format!("{name}.{i}.dw"), Shape4::new(c_in, 1, k, k), rng),
                pointwise: conv_weight(
                    store,
                    format!("{name}.{i}.pw"),
                    Shape4::new(c_in, c_in, 1, 1),
                    rng,
                ),
                bn: BnParams::alloc(store, &format!("{name}.{i}.bn"), c_in, rng),
            })
            .collect();
        return OpParams::Stages(stages);
    }
    match kind {
        PrimitiveKind::Conv1x1 => OpParams::Conv1x1 {
            conv: conv_weight(store, format!("{name}.conv"), Shape4::new(c_out, c_in, 1, 1), rng),
            bn: BnParams::alloc(store, &format!("{name}.bn"), c_out, rng),
        },
        PrimitiveKind::FactorizedReduce => {
            let odd_c = c_out / 2;
            let even_c = c_out - odd_c;
            OpParams::FactorizedReduce {
                even: conv_weight(
                    store,
                    format!("{name}.even"),
                    Shape4::new(even_c, c_in, 1, 1),
                    rng,
                ),
                odd: (odd_c > 0).then(|| {
                    conv_weight(store, format!("{name}.odd"), Shape4::new(odd_c, c_in, 1, 1), rng)
                }),
                bn: BnParams::alloc(store, &format!("{name}.bn"), c_out, rng),
            }
        }
        PrimitiveKind::BatchNorm => OpParams::BatchNorm(BnParams::alloc(store, name, c_in, rng)),
        PrimitiveKind::LinearClassifier => OpParams::Linear {
            weight: store.alloc(
                format!("{name}.weight"),
                ParamRole::Weight,
                Shape4::new(c_out, c_in, 1, 1),
                Init::fan_in(c_in),
                rng,
            ),
            bias: store.alloc(
                format!("{name}.bias"),
                ParamRole::Weight,
                Shape4::new(1, c_out, 1, 1),
                Init::fan_in(c_in),
                rng,
            ),
        },
        _ => OpParams::None,
    }
}

fn mismatch(kind: PrimitiveKind, params: &OpParams, x: Shape4) -> Error {
    Error::Structural(format!(
        "{kind} cannot run on input {x} with parameters {params:?}"
    ))
}

/// Run one primitive forward, recording it on `tape`.
pub fn apply_primitive(
    tape: &mut Tape,
    store: &ParamStore,
    kind: PrimitiveKind,
    params: &OpParams,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let xs = tape.shape(x);
    let wrap = |e: Error| match e {
        Error::Structural(msg) => Error::Structural(format!("{kind} on {xs}: {msg}")),
        other => other,
    };
    match (kind, params) {
        (PrimitiveKind::Identity, OpParams::None) => Ok(x),
        (PrimitiveKind::MaxPool3x3, OpParams::None) => Ok(tape.max_pool3(x)),
        (PrimitiveKind::AvgPool3x3, OpParams::None) => Ok(tape.avg_pool3(x)),
        (PrimitiveKind::Relu, OpParams::None) => Ok(tape.relu(x)),
        (PrimitiveKind::GlobalAvgPool, OpParams::None) => Ok(tape.global_avg_pool(x)),
        (
            PrimitiveKind::SepConv3x3
            | PrimitiveKind::SepConv5x5
            | PrimitiveKind::DilConv3x3
            | PrimitiveKind::DilConv5x5,
            OpParams::Stages(stages),
        ) => {
            let (k, dilation, n) = kind.conv_stack().expect("conv stack kind");
            if stages.len() != n {
                return Err(mismatch(kind, params, xs));
            }
            let mut h = x;
            for stage in stages {
                h = tape.relu(h);
                let dw = tape.param(store, stage.depthwise);
                h = tape
                    .conv2d(h, dw, ConvSpec::same(k, dilation, xs.c, xs.h, xs.w))
                    .map_err(wrap)?;
                let pw = tape.param(store, stage.pointwise);
                h = tape
                    .conv2d(h, pw, ConvSpec::same(1, 1, 1, xs.h, xs.w))
                    .map_err(wrap)?;
                h = stage.bn.apply(tape, store, h, mode).map_err(wrap)?;
            }
            Ok(h)
        }
        (PrimitiveKind::Conv1x1, OpParams::Conv1x1 { conv, bn }) => {
            let h = tape.relu(x);
            let w = tape.param(store, *conv);
            let h = tape
                .conv2d(h, w, ConvSpec::same(1, 1, 1, xs.h, xs.w))
                .map_err(wrap)?;
            bn.apply(tape, store, h, mode).map_err(wrap)
        }
        (PrimitiveKind::FactorizedReduce, OpParams::FactorizedReduce { even, odd, bn }) => {
            let (oh, ow) = (xs.h.div_ceil(2), xs.w.div_ceil(2));
            let strided = |origin| ConvSpec {
                stride: 2,
                dilation: 1,
                origin,
                groups: 1,
                out_h: oh,
                out_w: ow,
            };
            let h = tape.relu(x);
            let we = tape.param(store, *even);
            let mut out = tape.conv2d(h, we, strided(0)).map_err(wrap)?;
            if let Some(odd) = odd {
                let wo = tape.param(store, *odd);
                let b = tape.conv2d(h, wo, strided(1)).map_err(wrap)?;
                out = tape.concat_channels(out, b).map_err(wrap)?;
            }
            bn.apply(tape, store, out, mode).map_err(wrap)
        }
        (PrimitiveKind::BatchNorm, OpParams::BatchNorm(bn)) => {
            bn.apply(tape, store, x, mode).map_err(wrap)
        }
        (PrimitiveKind::LinearClassifier, OpParams::Linear { weight, bias }) => {
            let w = tape.param(store, *weight);
            let b = tape.param(store, *bias);
            tape.linear(x, w, b).map_err(wrap)
        }
        _ => Err(mismatch(kind, params, xs)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(kind: PrimitiveKind, x: Tensor, zero_weights: bool) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let c = x.shape().c;
        let params = alloc_primitive(kind, c, c, &mut store, "op", &mut rng);
        if zero_weights {
            for (_, slot) in store.iter_mut() {
                if slot.name.ends_with(".dw") || slot.name.ends_with(".pw") {
                    slot.value.data_mut().fill(0.0);
                }
            }
        }
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = apply_primitive(&mut tape, &store, kind, &params, xv, Mode::Train).unwrap();
        (x, tape.value(y).clone())
    }

    #[test]
    fn identity_is_bit_identical() {
        let x = Tensor::from_vec(
            Shape4::new(1, 2, 2, 2),
            vec![0.1, -3.0, 7.5, 1e-300, -0.0, 2.0, 4.0, 9.0],
        )
        .unwrap();
        let (x, y) = run(PrimitiveKind::Identity, x, false);
        assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn max_pool_of_constant_is_constant() {
        let x = Tensor::full(Shape4::new(1, 1, 3, 3), 2.0);
        let (_, y) = run(PrimitiveKind::MaxPool3x3, x, false);
        assert!(y.data().iter().all(|&v| v == 2.0));
        assert_eq!(y.shape(), Shape4::new(1, 1, 3, 3));
    }

    #[test]
    fn zero_kernels_leave_only_batch_norm_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..2 * 3 * 5 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(Shape4::new(2, 3, 5, 5), data).unwrap();
        let (_, y) = run(PrimitiveKind::SepConv3x3, x, true);
        // beta initializes to zero, so the whole output is zero
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn searchable_ops_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in PrimitiveKind::SEARCHABLE {
            let s = Shape4::new(2, 4, 7, 6);
            let data = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, y) = run(kind, Tensor::from_vec(s, data).unwrap(), false);
            assert_eq!(y.shape(), s, "{kind}");
        }
    }

    #[test]
    fn conv1x1_parameter_count() {
        assert_eq!(PrimitiveKind::Conv1x1.param_count(8, 8), 80);
        assert_eq!(PrimitiveKind::Identity.param_count(8, 8), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in PrimitiveKind::SEARCHABLE
            .into_iter()
            .chain([PrimitiveKind::Conv1x1, PrimitiveKind::FactorizedReduce])
        {
            let mut store = ParamStore::new();
            alloc_primitive(kind, 6, 6, &mut store, "p", &mut rng);
            assert_eq!(store.trainable_count(), kind.param_count(6, 6), "{kind}");
            assert_eq!(store.stored_count(), kind.param_count(6, 6) + kind.buffer_count(6, 6), "{kind}");
        }
    }

    #[test]
    fn mismatched_params_are_structural_errors() {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let x = tape.input(Tensor::zeros(Shape4::new(1, 1, 2, 2)));
        let err =
            apply_primitive(&mut tape, &store, PrimitiveKind::SepConv3x3, &OpParams::None, x, Mode::Eval)
                .unwrap_err();
        assert!(err.to_string().contains("sep_conv_3x3"));
    }
}
