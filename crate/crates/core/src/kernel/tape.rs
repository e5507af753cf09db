//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every primitive pushes one node holding its forward value and whatever it
//! needs for the backward sweep. [`Tape::backward`] walks the nodes once, in
//! reverse push order, so the tape can be replayed with many output seeds
//! (the kernel Jacobian needs one sweep per logit).

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{Shape4, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How BatchNorm and dropout behave for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics without touching running stats; no dropout. Used by
    /// the train-free metrics on untrained models.
    Probe,
}

impl Mode {
    fn batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::Probe)
    }
}

/// Geometry of a 2-D convolution. Input row for output row `oh` and kernel
/// tap `kh` is `oh * stride + kh * dilation + origin`; out-of-range reads are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub origin: isize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvSpec {
    /// Stride-1 "same" convolution.
    pub fn same(k: usize, dilation: usize, groups: usize, h: usize, w: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            origin: -((dilation * (k - 1) / 2) as isize),
            groups,
            out_h: h,
            out_w: w,
        }
    }
}

#[derive(Clone, Debug)]
struct RunningUpdate {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Add(Vec<Var>),
    Scale {
        x: Var,
        factor: f64,
    },
    Pruner {
        x: Var,
        w: Var,
        factor: f64,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded ReLU application.
#[derive(Clone, Copy, Debug)]
pub struct ReluMark {
    /// Pre-activation input.
    pub input: Var,
    /// False for units whose output is multiplied away (disconnected edges).
    pub counted: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relus: Vec<ReluMark>,
    relu_counted: bool,
    running: Vec<RunningUpdate>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            relu_counted: true,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite() || !matches!(op, Op::Leaf));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn relu_marks(&self) -> &[ReluMark] {
        &self.relus
    }

    /// Marks subsequently recorded ReLUs as (not) contributing to the model function.
    pub fn set_relu_counted(&mut self, counted: bool) {
        self.relu_counted = counted;
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Copy BatchNorm running-stat updates from a train-mode pass into `store`.
    pub fn apply_running_updates(&mut self, store: &mut ParamStore) {
        for u in self.running.drain(..) {
            let unbias = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            let mean = store.value_mut(u.mean).data_mut();
            for (m, b) in mean.iter_mut().zip(&u.batch_mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = store.value_mut(u.var).data_mut();
            for (v, b) in var.iter_mut().zip(&u.batch_var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
            }
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let groups = spec.groups.max(1);
        if xs.c % groups != 0 || ws.n % groups != 0 || ws.c * groups != xs.c || ws.h != ws.w {
            return Err(Error::Structural(format!(
                "conv weight {ws} incompatible with input {xs} at {groups} groups"
            )));
        }
        let out_shape = Shape4::new(xs.n, ws.n, spec.out_h, spec.out_w);
        let mut out = Tensor::zeros(out_shape);
        conv_forward(self.value(x), self.value(w), &spec, &mut out);
        Ok(self.push(out, Op::Conv { x, w, spec }))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        store: &ParamStore,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(gamma).len() != xs.c || self.shape(beta).len() != xs.c {
            return Err(Error::Structural(format!(
                "batch norm affine of {} channels on input {xs}",
                self.shape(gamma).len()
            )));
        }
        let plane = xs.plane();
        let m = xs.n * plane;
        let (mean, var) = if mode.batch_stats() {
            let xv = self.value(x);
            let mut mean = vec![0.0; xs.c];
            let mut var = vec![0.0; xs.c];
            for c in 0..xs.c {
                let mut s = 0.0;
                for n in 0..xs.n {
                    let base = xv.index(n, c, 0, 0);
                    s += xv.data()[base..base + plane].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut q = 0.0;
                for n in 0..xs.n {
                    let base = xv.index(n, c, 0, 0);
                    q += xv.data()[base..base + plane]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[c] = mu;
                var[c] = q / m as f64;
            }
            (mean, var)
        } else {
            (
                store.value(running.0).data().to_vec(),
                store.value(running.1).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = Tensor::zeros(xs);
        {
            let xv = self.value(x);
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let od = out.data_mut();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = xv.index(n, c, 0, 0);
                    for i in base..base + plane {
                        od[i] = g[c] * (xv.data()[i] - mean[c]) * inv_std[c] + b[c];
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.running.push(RunningUpdate {
                mean: running.0,
                var: running.1,
                batch_mean: mean.clone(),
                batch_var: var,
                count: m,
            });
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: mode.batch_stats(),
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.relus.push(ReluMark {
            input: x,
            counted: self.relu_counted,
        });
        self.push(out, Op::Relu(x))
    }

    /// 3x3, stride 1, padding 1; padded cells never win.
    pub fn max_pool3(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(s);
        let mut argmax = vec![0usize; s.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for ii in i.saturating_sub(1)..(i + 2).min(s.h) {
                            for jj in j.saturating_sub(1)..(j + 2).min(s.w) {
                                let k = xv.index(n, c, ii, jj);
                                if xv.data()[k] > best {
                                    best = xv.data()[k];
                                    at = k;
                                }
                            }
                        }
                        let o = out.index(n, c, i, j);
                        out.data_mut()[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// 3x3, stride 1, padding 1, averaging only over in-bounds cells.
    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let (mut sum, mut cnt) = (0.0, 0.0);
                        for ii in i.saturating_sub(1)..(i + 2).min(s.h) {
                            for jj in j.saturating_sub(1)..(j + 2).min(s.w) {
                                sum += xv.at(n, c, ii, jj);
                                cnt += 1.0;
                            }
                        }
                        let o = out.index(n, c, i, j);
                        out.data_mut()[o] = sum / cnt;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool(x))
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::structural("sum over zero tensors"))?;
        let shape = self.shape(first);
        let mut out = self.value(first).clone();
        for &v in &xs[1..] {
            if self.shape(v) != shape {
                return Err(Error::Structural(format!(
                    "summing {} into {}",
                    self.shape(v),
                    shape
                )));
            }
            out.add_assign(self.value(v));
        }
        Ok(self.push(out, Op::Add(xs.to_vec())))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// `factor * x` where `factor` was computed from the scalar pruner weight `w`;
    /// the weight receives a straight-through gradient of slope one.
    pub fn pruner(&mut self, x: Var, w: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Pruner { x, w, factor })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::Structural(format!("concatenating {sa} with {sb}")));
        }
        let shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).sample(n));
            data.extend_from_slice(self.value(b).sample(n));
        }
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let plane = s.plane();
        let data: Vec<f64> = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::from_vec(Shape4::new(s.n, s.c, 1, 1), data).expect("pooled shape");
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// `x` flattened per sample to `F` features, `w` of shape `(K, F, 1, 1)`,
    /// `b` with `K` entries. Output `(N, K, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let f = xs.per_sample();
        if ws.per_sample() != f || self.shape(b).len() != ws.n {
            return Err(Error::Structural(format!(
                "linear weight {ws} on input {xs}"
            )));
        }
        let k = ws.n;
        let mut out = Tensor::zeros(Shape4::new(xs.n, k, 1, 1));
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for n in 0..xs.n {
                let row = xv.sample(n);
                for j in 0..k {
                    let wr = &wv[j * f..(j + 1) * f];
                    od[n * k + j] = bv[j] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse sweep from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::Structural(format!(
                "backward seed {} for output {}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, spec } => {
                    let (gx, gw) = conv_backward(self.value(*x), self.value(*w), spec, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let (gx, gg, gb) = bn_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        inv_std,
                        *batch_stats,
                        &g,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (o, &src) in argmax.iter().enumerate() {
                        gx.data_mut()[src] += g.data()[o];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::AvgPool(x) => {
                    let s = self.shape(*x);
                    let mut gx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for i in 0..s.h {
                                for j in 0..s.w {
                                    let (r0, r1) = (i.saturating_sub(1), (i + 2).min(s.h));
                                    let (c0, c1) = (j.saturating_sub(1), (j + 2).min(s.w));
                                    let cnt = ((r1 - r0) * (c1 - c0)) as f64;
                                    let gv = g.at(n, c, i, j) / cnt;
                                    for ii in r0..r1 {
                                        for jj in c0..c1 {
                                            let k = gx.index(n, c, ii, jj);
                                            gx.data_mut()[k] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(xs) => {
                    for &x in xs {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.map(|v| v * factor));
                }
                Op::Pruner { x, w, factor } => {
                    let gw: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    accumulate(&mut grads, *w, Tensor::full(self.shape(*w), gw));
                    accumulate(&mut grads, *x, g.map(|v| v * factor));
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (pa, pb) = (sa.per_sample(), sb.per_sample());
                    let mut ga = Vec::with_capacity(sa.len());
                    let mut gb = Vec::with_capacity(sb.len());
                    for n in 0..sa.n {
                        let row = g.sample(n);
                        ga.extend_from_slice(&row[..pa]);
                        gb.extend_from_slice(&row[pa..pa + pb]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(sa, ga)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(sb, gb)?);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let plane = s.plane();
                    let mut gx = Tensor::zeros(s);
                    for (chunk, gv) in gx.data_mut().chunks_mut(plane).zip(g.data()) {
                        chunk.fill(gv / plane as f64);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let (f, k) = (xs.per_sample(), ws.n);
                    let xv = self.value(*x);
                    let wv = self.value(*w).data();
                    let mut gx = Tensor::zeros(xs);
                    let mut gw = Tensor::zeros(ws);
                    let mut gb = Tensor::zeros(self.shape(*b));
                    for n in 0..xs.n {
                        let row = xv.sample(n);
                        for j in 0..k {
                            let gv = g.data()[n * k + j];
                            if gv == 0.0 {
                                continue;
                            }
                            gb.data_mut()[j] += gv;
                            let gwr = &mut gw.data_mut()[j * f..(j + 1) * f];
                            for (a, r) in gwr.iter_mut().zip(row) {
                                *a += gv * r;
                            }
                            let gxr = &mut gx.data_mut()[n * f..(n + 1) * f];
                            for (a, wr) in gxr.iter_mut().zip(&wv[j * f..(j + 1) * f]) {
                                *a += gv * wr;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (gv, m) in gx.data_mut().iter_mut().zip(mask) {
                        *gv *= m;
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf, in tape order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients,
    ) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        grads.grads.iter().enumerate().filter_map(move |(i, g)| {
            match (&self.nodes[i].op, g) {
                (Op::Param(id), Some(g)) => Some((*id, g)),
                _ => None,
            }
        })
    }

    /// Every parameter leaf, in tape order.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }
}

/// Result of one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn tap(o: usize, k: usize, spec: &ConvSpec, limit: usize) -> Option<usize> {
    let i = (o * spec.stride + k * spec.dilation) as isize + spec.origin;
    (i >= 0 && (i as usize) < limit).then_some(i as usize)
}

/// Range of output positions whose tap `k` lands inside `[0, limit)`.
fn valid_outputs(k: usize, spec: &ConvSpec, out: usize, limit: usize) -> std::ops::Range<usize> {
    let mut lo = 0;
    while lo < out && tap(lo, k, spec, limit).is_none() {
        lo += 1;
    }
    let mut hi = lo;
    while hi < out && tap(hi, k, spec, limit).is_some() {
        hi += 1;
    }
    lo..hi
}

fn conv_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec, out: &mut Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let groups = spec.groups.max(1);
    let (cin_g, cout_g) = (xs.c / groups, ws.n / groups);
    let k = ws.h;
    let (oh, ow) = (spec.out_h, spec.out_w);
    let rows: Vec<_> = (0..k).map(|kh| valid_outputs(kh, spec, oh, xs.h)).collect();
    let cols: Vec<_> = (0..k).map(|kw| valid_outputs(kw, spec, ow, xs.w)).collect();
    let pointwise = k == 1 && spec.stride == 1 && spec.origin == 0 && oh == xs.h && ow == xs.w;
    let xd = x.data();
    let wd = w.data();
    let os = out.shape();
    let od = out.data_mut();
    for n in 0..xs.n {
        for oc in 0..ws.n {
            let g = oc / cout_g;
            let obase = ((n * os.c) + oc) * oh * ow;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let xbase = ((n * xs.c) + ic) * xs.h * xs.w;
                if pointwise {
                    let wv = wd[oc * cin_g + icg];
                    let o = &mut od[obase..obase + oh * ow];
                    for (a, b) in o.iter_mut().zip(&xd[xbase..xbase + oh * ow]) {
                        *a += wv * b;
                    }
                    continue;
                }
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wd[((oc * cin_g + icg) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        if spec.stride == 1 {
                            let cs = cols[kw].clone();
                            if cs.is_empty() {
                                continue;
                            }
                            let shift = ((cs.start + kw * spec.dilation) as isize + spec.origin) as usize;
                            let len = cs.len();
                            for r in rows[kh].clone() {
                                let ir = tap(r, kh, spec, xs.h).unwrap();
                                let o = &mut od[obase + r * ow + cs.start..obase + r * ow + cs.end];
                                let xi = &xd[xbase + ir * xs.w + shift..xbase + ir * xs.w + shift + len];
                                for (a, b) in o.iter_mut().zip(xi) {
                                    *a += wv * b;
                                }
                            }
                            continue;
                        }
                        for r in rows[kh].clone() {
                            let ir = tap(r, kh, spec, xs.h).unwrap();
                            let orow = obase + r * ow;
                            let irow = xbase + ir * xs.w;
                            for c in cols[kw].clone() {
                                let icol = (c * spec.stride + kw * spec.dilation) as isize
                                    + spec.origin;
                                od[orow + c] += wv * xd[irow + icol as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(x: &Tensor, w: &Tensor, spec: &ConvSpec, g: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let groups = spec.groups.max(1);
    let (cin_g, cout_g) = (xs.c / groups, ws.n / groups);
    let k = ws.h;
    let (oh, ow) = (spec.out_h, spec.out_w);
    let rows: Vec<_> = (0..k).map(|kh| valid_outputs(kh, spec, oh, xs.h)).collect();
    let cols: Vec<_> = (0..k).map(|kw| valid_outputs(kw, spec, ow, xs.w)).collect();
    let pointwise = k == 1 && spec.stride == 1 && spec.origin == 0 && oh == xs.h && ow == xs.w;
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let gs = g.shape();
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        for n in 0..xs.n {
            for oc in 0..ws.n {
                let grp = oc / cout_g;
                let obase = ((n * gs.c) + oc) * oh * ow;
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    let xbase = ((n * xs.c) + ic) * xs.h * xs.w;
                    if pointwise {
                        let widx = oc * cin_g + icg;
                        let wv = wd[widx];
                        let plane = oh * ow;
                        let gs_ = &gd[obase..obase + plane];
                        let mut acc = 0.0;
                        for ((gv, xv), gx) in gs_.iter().zip(&xd[xbase..xbase + plane]).zip(&mut gxd[xbase..xbase + plane]) {
                            acc += gv * xv;
                            *gx += gv * wv;
                        }
                        gwd[widx] += acc;
                        continue;
                    }
                    for kh in 0..k {
                        for kw in 0..k {
                            let widx = ((oc * cin_g + icg) * k + kh) * k + kw;
                            let wv = wd[widx];
                            let mut acc = 0.0;
                            if spec.stride == 1 {
                                let cs = cols[kw].clone();
                                if !cs.is_empty() {
                                    let shift = ((cs.start + kw * spec.dilation) as isize + spec.origin) as usize;
                                    let len = cs.len();
                                    for r in rows[kh].clone() {
                                        let ir = tap(r, kh, spec, xs.h).unwrap();
                                        let go = &gd[obase + r * ow + cs.start..obase + r * ow + cs.end];
                                        let xi = xbase + ir * xs.w + shift;
                                        for ((gv, xv), gx) in go.iter().zip(&xd[xi..xi + len]).zip(&mut gxd[xi..xi + len]) {
                                            acc += gv * xv;
                                            *gx += gv * wv;
                                        }
                                    }
                                }
                                gwd[widx] += acc;
                                continue;
                            }
                            for r in rows[kh].clone() {
                                let ir = tap(r, kh, spec, xs.h).unwrap();
                                let orow = obase + r * ow;
                                let irow = xbase + ir * xs.w;
                                for c in cols[kw].clone() {
                                    let icol = ((c * spec.stride + kw * spec.dilation) as isize
                                        + spec.origin)
                                        as usize;
                                    let gv = gd[orow + c];
                                    acc += gv * xd[irow + icol];
                                    gxd[irow + icol] += gv * wv;
                                }
                            }
                            gwd[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn bn_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let plane = s.plane();
    let m = (s.n * plane) as f64;
    let gam = gamma.data();
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(gamma.shape());
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for n in 0..s.n {
            let base = x.index(n, c, 0, 0);
            for i in base..base + plane {
                let xhat = (x.data()[i] - mean[c]) * inv_std[c];
                sum_g += g.data()[i];
                sum_gx += g.data()[i] * xhat;
            }
        }
        gg.data_mut()[c] = sum_gx;
        gb.data_mut()[c] = sum_g;
        for n in 0..s.n {
            let base = x.index(n, c, 0, 0);
            for i in base..base + plane {
                gx.data_mut()[i] = if batch_stats {
                    let xhat = (x.data()[i] - mean[c]) * inv_std[c];
                    gam[c] * inv_std[c] / m * (m * g.data()[i] - sum_g - xhat * sum_gx)
                } else {
                    gam[c] * inv_std[c] * g.data()[i]
                };
            }
        }
    }
    (gx, gg, gb)
}
