use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::SupernetModel;
use crate::kernel::{Mode, ParamId, ParamRole, Tape, Tensor};

/// Smallest eigenvalue ratio below which the kernel counts as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

/// `lambda_max / lambda_min` of `J J^T` for a row-major Jacobian, or
/// `+inf` when the kernel is singular.
pub fn condition_from_jacobian(rows: &[Vec<f64>]) -> Result<f64> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Input("empty Jacobian".into()));
    }
    let mut theta = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            theta[(i, j)] = v;
            theta[(j, i)] = v;
        }
    }
    condition_of_symmetric(theta)
}

fn condition_of_symmetric(theta: DMatrix<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(theta);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !max.is_finite() || !min.is_finite() {
        return Err(Error::Numeric("non-finite kernel eigenvalues".into()));
    }
    if max <= 0.0 || min <= SINGULAR_RATIO * max {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Jacobian of every logit of `probe` with respect to all weight-role
/// parameters (pruners and running statistics excluded), one row per
/// `(sample, class)`. BatchNorm uses the probe batch's own statistics.
pub fn logit_jacobian(model: &SupernetModel, probe: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = tape.input(probe.clone());
    let logits = model.forward(&mut tape, x, Mode::Probe, None)?;
    let out = tape.value(logits).shape();
    let store = model.params();
    let blocks: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, s)| s.role == ParamRole::Weight)
        .map(|(id, s)| (id, s.value.len()))
        .collect();
    let mut rows = Vec::with_capacity(out.len());
    for r in 0..out.len() {
        let mut seed = Tensor::zeros(out);
        seed.data_mut()[r] = 1.0;
        let grads = tape.backward(logits, seed)?;
        let mut by_param: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (id, g) in tape.param_grads(&grads) {
            let acc = by_param.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let mut row = Vec::new();
        for &(id, len) in &blocks {
            match by_param.get(&id) {
                Some(g) => {
                    if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                        let name = store.get(id).map_or_else(String::new, |s| s.name.clone());
                        return Err(Error::Numeric(format!("Jacobian entry {bad} in block {name}")));
                    }
                    row.extend_from_slice(g);
                }
                None => row.extend(std::iter::repeat_n(0.0, len)),
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Condition number of the empirical neural tangent kernel on `probe`.
pub fn ntk_condition_number(model: &SupernetModel, probe: &Tensor) -> Result<f64> {
    if probe.shape().n < 2 {
        return Err(Error::Input("probe needs at least two samples".into()));
    }
    condition_from_jacobian(&logit_jacobian(model, probe)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelConfig;
    use crate::kernel::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Jacobian of `f(x) = W x` with one output, by the tape.
    fn linear_jacobian(w: [f64; 2], probe: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let n = probe.len();
        let x = tape.input(
            Tensor::from_vec(Shape4::new(n, 2, 1, 1), probe.iter().flatten().copied().collect()).unwrap(),
        );
        let wv = tape.input(Tensor::from_vec(Shape4::new(1, 2, 1, 1), w.to_vec()).unwrap());
        let b = tape.input(Tensor::zeros(Shape4::new(1, 1, 1, 1)));
        let y = tape.linear(x, wv, b).unwrap();
        (0..n)
            .map(|r| {
                let mut seed = Tensor::zeros(tape.shape(y));
                seed.data_mut()[r] = 1.0;
                let g = tape.backward(y, seed).unwrap();
                g.get(wv).unwrap().data().to_vec()
            })
            .collect()
    }

    #[test]
    fn orthonormal_probe_gives_identity_kernel() {
        let j = linear_jacobian([0.3, -1.7], &[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(j, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((condition_from_jacobian(&j).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_kernel() {
        // rows (1,0) and (1,1): Theta = [[1,1],[1,2]], eigenvalues (3 +- sqrt 5)/2
        let j = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let want = (3.0 + 5f64.sqrt()) / (3.0 - 5f64.sqrt());
        assert!((condition_from_jacobian(&j).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn duplicated_probe_rows_are_singular() {
        let j = linear_jacobian([0.5, 0.5], &[[0.2, 0.9], [0.2, 0.9]]);
        assert_eq!(condition_from_jacobian(&j).unwrap(), f64::INFINITY);
    }

    fn slim_model(seed: u64) -> SupernetModel {
        let config = ModelConfig {
            reductions: 1,
            init_channels: 1,
            in_channels: 3,
            image_size: 6,
            classes: 2,
            dropout: 0.0,
            pruner_m: 1e9,
        };
        SupernetModel::minimum_viable(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn probe(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape4::new(n, 3, 6, 6);
        Tensor::from_vec(s, (0..s.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn model_jacobian_shape_and_condition() {
        let m = slim_model(1);
        let p = probe(4, 2);
        let j = logit_jacobian(&m, &p).unwrap();
        assert_eq!(j.len(), 8);
        let weights: usize = m
            .params()
            .iter()
            .filter(|(_, s)| s.role == ParamRole::Weight)
            .map(|(_, s)| s.value.len())
            .sum();
        assert!(j.iter().all(|r| r.len() == weights));
        let k = ntk_condition_number(&m, &p).unwrap();
        assert!(k >= 1.0);
    }

    #[test]
    fn condition_is_invariant_under_probe_permutation() {
        let m = slim_model(3);
        let p = probe(4, 4);
        let s = p.shape();
        let per = s.per_sample();
        let mut data = Vec::new();
        for n in [2, 0, 3, 1] {
            data.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
        let q = Tensor::from_vec(s, data).unwrap();
        let a = ntk_condition_number(&m, &p).unwrap();
        let b = ntk_condition_number(&m, &q).unwrap();
        if a.is_finite() {
            assert!((a - b).abs() <= 1e-6 * a, "{a} {b}");
        } else {
            assert!(b.is_infinite());
        }
    }

    #[test]
    fn single_sample_probe_is_rejected() {
        let m = slim_model(5);
        assert!(matches!(ntk_condition_number(&m, &probe(1, 0)), Err(Error::Input(_))));
    }
}
