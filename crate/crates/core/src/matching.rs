//! Relevance (interaction matrix) and semantic (co-attention) matching heads.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Graph, Scalar, TensorError, Var};

/// Axis reduced when pooling the softmaxed interaction matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolAxis {
    /// Reduce over description rows, one output per code column.
    #[default]
    CodeColumn,
    /// Reduce over code columns, one output per description row.
    DescriptionRow,
}

impl PoolAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolAxis::CodeColumn => "code_column",
            PoolAxis::DescriptionRow => "description_row",
        }
    }
}

impl fmt::Display for PoolAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "code_column" => Ok(PoolAxis::CodeColumn),
            "description_row" => Ok(PoolAxis::DescriptionRow),
            other => Err(format!("unknown pooling axis `{other}` (expected code_column or description_row)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RelevanceVars {
    /// Softmaxed interaction matrix.
    pub r_hat: Var,
    pub max: Var,
    pub mean: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticVars {
    pub s: Var,
    pub a_desc: Var,
    pub a_code: Var,
    pub o_desc: Var,
    pub o_code: Var,
}

fn reject_empty(op: &'static str, mask: &[bool]) -> Result<(), TensorError> {
    if mask.iter().any(|m| *m) {
        Ok(())
    } else {
        Err(TensorError::EmptySlice { op, index: 0 })
    }
}

/// `R = D·Cᵀ`, softmax over code columns (code PADs excluded), then max and
/// mean pooling along `axis`. Masked outputs are zero.
pub fn relevance_match<T: Scalar>(
    g: &mut Graph<'_, T>,
    d: Var,
    d_mask: &[bool],
    c: Var,
    c_mask: &[bool],
    axis: PoolAxis,
) -> Result<RelevanceVars, TensorError> {
    reject_empty("relevance_match", d_mask)?;
    reject_empty("relevance_match", c_mask)?;
    let r = g.matmul_nt(d, c, Some(d_mask), Some(c_mask))?;
    let softmax_mask = c_mask.repeat(d_mask.len());
    let r_hat = g.softmax_rows(r, Some(&softmax_mask))?;
    let (max, mean) = match axis {
        PoolAxis::CodeColumn => (
            g.pool_max_cols(r_hat, Some(d_mask), Some(c_mask))?,
            g.pool_mean_cols(r_hat, Some(d_mask), Some(c_mask))?,
        ),
        PoolAxis::DescriptionRow => (
            g.pool_max_rows(r_hat, Some(d_mask), Some(c_mask))?,
            g.pool_mean_rows(r_hat, Some(d_mask), Some(c_mask))?,
        ),
    };
    Ok(RelevanceVars { r_hat, max, mean })
}

/// `S = tanh(D·W·Cᵀ)`, max pooling both ways, masked softmax attention and
/// the attended summaries `Dᵀa` and `Cᵀa`.
pub fn semantic_match<T: Scalar>(
    g: &mut Graph<'_, T>,
    d: Var,
    d_mask: &[bool],
    c: Var,
    c_mask: &[bool],
    w: Var,
) -> Result<SemanticVars, TensorError> {
    reject_empty("semantic_match", d_mask)?;
    reject_empty("semantic_match", c_mask)?;
    let dw = g.matmul(d, w)?;
    let raw = g.matmul_nt(dw, c, Some(d_mask), Some(c_mask))?;
    let s = g.tanh(raw);
    let u_desc = g.pool_max_rows(s, Some(d_mask), Some(c_mask))?;
    let u_code = g.pool_max_cols(s, Some(d_mask), Some(c_mask))?;
    let a_desc = g.softmax_rows(u_desc, Some(d_mask))?;
    let a_code = g.softmax_rows(u_code, Some(c_mask))?;
    let o_desc = attend(g, a_desc, d)?;
    let o_code = attend(g, a_code, c)?;
    Ok(SemanticVars {
        s,
        a_desc,
        a_code,
        o_desc,
        o_code,
    })
}

/// `xᵀ·a` as a vector.
fn attend<T: Scalar>(g: &mut Graph<'_, T>, a: Var, x: Var) -> Result<Var, TensorError> {
    let len = g.value(a).len();
    let dim = g.value(x).cols();
    let row = g.reshape(a, vec![1, len])?;
    let out = g.matmul(row, x)?;
    g.reshape(out, vec![dim])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Gradients, ParamSet, Tensor};

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Zeroes masked rows, as the encoder guarantees.
    fn zero_rows(mut t: Tensor<f64>, mask: &[bool]) -> Tensor<f64> {
        let cols = t.cols();
        for (i, m) in mask.iter().enumerate() {
            if !m {
                t.data_mut()[i * cols..(i + 1) * cols].fill(0.0);
            }
        }
        t
    }

    fn rel_oracle(d: &Tensor<f64>, dm: &[bool], c: &Tensor<f64>, cm: &[bool]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (d.rows(), c.rows());
        let mut rhat = vec![vec![0.0; n]; m];
        for i in 0..m {
            let mut r = vec![0.0; n];
            for j in 0..n {
                if dm[i] && cm[j] {
                    for k in 0..d.cols() {
                        r[j] += d.at(i, k) * c.at(j, k);
                    }
                }
            }
            let max = (0..n).filter(|&j| cm[j]).map(|j| r[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).filter(|&j| cm[j]).map(|j| (r[j] - max).exp()).sum();
            for j in 0..n {
                if cm[j] {
                    rhat[i][j] = (r[j] - max).exp() / z;
                }
            }
        }
        let mut mx = vec![0.0; n];
        let mut mean = vec![0.0; n];
        for j in (0..n).filter(|&j| cm[j]) {
            let live: Vec<f64> = (0..m).filter(|&i| dm[i]).map(|i| rhat[i][j]).collect();
            mx[j] = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mean[j] = live.iter().sum::<f64>() / live.len() as f64;
        }
        (mx, mean)
    }

    #[test]
    fn relevance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dm = [true, true, false, true];
        let cm = [true, false, true, true, true, false];
        let d = zero_rows(rand_matrix(&mut rng, 4, 5), &dm);
        let c = zero_rows(rand_matrix(&mut rng, 6, 5), &cm);
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv) = (g.input(d.clone()), g.input(c.clone()));
        let rel = relevance_match(&mut g, dv, &dm, cv, &cm, PoolAxis::CodeColumn).unwrap();
        let (mx, mean) = rel_oracle(&d, &dm, &c, &cm);
        for j in 0..6 {
            assert!((g.value(rel.max).data()[j] - mx[j]).abs() < 1e-6);
            assert!((g.value(rel.mean).data()[j] - mean[j]).abs() < 1e-6);
        }
        assert_eq!(g.value(rel.max).data()[1], 0.0);
        assert!(g.value(rel.r_hat).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_description_row_pools_to_that_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = rand_matrix(&mut rng, 1, 3);
        let c = rand_matrix(&mut rng, 4, 3);
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv) = (g.input(d), g.input(c));
        let all = [true; 4];
        let rel = relevance_match(&mut g, dv, &[true], cv, &all, PoolAxis::CodeColumn).unwrap();
        assert_eq!(g.value(rel.max).data(), g.value(rel.r_hat).data());
        assert_eq!(g.value(rel.mean).data(), g.value(rel.r_hat).data());
    }

    #[test]
    fn equal_dot_products_give_uniform_weights() {
        let d = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv) = (g.input(d), g.input(c));
        let cm = [true, true, false];
        let rel = relevance_match(&mut g, dv, &[true, true], cv, &cm, PoolAxis::CodeColumn).unwrap();
        assert_eq!(g.value(rel.mean).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_masks_are_rejected() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let dv = g.input(Tensor::<f64>::zeros(vec![2, 2]));
        let cv = g.input(Tensor::<f64>::zeros(vec![2, 2]));
        let w = g.input(Tensor::<f64>::zeros(vec![2, 2]));
        assert!(relevance_match(&mut g, dv, &[false, false], cv, &[true, true], PoolAxis::CodeColumn).is_err());
        assert!(semantic_match(&mut g, dv, &[true, true], cv, &[false, false], w).is_err());
    }

    #[test]
    fn row_axis_mean_is_constant_but_column_axis_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = rand_matrix(&mut rng, 5, 4);
        let c = rand_matrix(&mut rng, 7, 4);
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv) = (g.input(d), g.input(c));
        let (dm, cm) = ([true; 5], [true; 7]);
        let by_row = relevance_match(&mut g, dv, &dm, cv, &cm, PoolAxis::DescriptionRow).unwrap();
        let by_col = relevance_match(&mut g, dv, &dm, cv, &cm, PoolAxis::CodeColumn).unwrap();
        assert!(g.value(by_row.mean).data().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
        let col = g.value(by_col.mean).data();
        let mu = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(var > 0.0);
    }

    fn sem_oracle(d: &Tensor<f64>, dm: &[bool], c: &Tensor<f64>, cm: &[bool], w: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let (m, n, k) = (d.rows(), c.rows(), d.cols());
        let mut s = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        acc += d.at(i, a) * w.at(a, b) * c.at(j, b);
                    }
                }
                s[i][j] = if dm[i] && cm[j] { acc.tanh() } else { 0.0 };
            }
        }
        let softmax = |u: Vec<f64>, mask: &[bool]| {
            let max = u.iter().zip(mask).filter(|p| *p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = u.iter().zip(mask).filter(|p| *p.1).map(|p| (p.0 - max).exp()).sum();
            u.iter().zip(mask).map(|(v, m)| if *m { (v - max).exp() / z } else { 0.0 }).collect::<Vec<_>>()
        };
        let ud: Vec<f64> = (0..m)
            .map(|i| (0..n).filter(|&j| cm[j]).map(|j| s[i][j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let uc: Vec<f64> = (0..n)
            .map(|j| (0..m).filter(|&i| dm[i]).map(|i| s[i][j]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (ad, ac) = (softmax(ud, dm), softmax(uc, cm));
        let od = (0..k).map(|a| (0..m).map(|i| ad[i] * d.at(i, a)).sum()).collect();
        let oc = (0..k).map(|a| (0..n).map(|j| ac[j] * c.at(j, a)).sum()).collect();
        (od, oc)
    }

    #[test]
    fn semantic_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dm = [true, false, true];
        let cm = [true, true, false, true, true];
        let d = zero_rows(rand_matrix(&mut rng, 3, 4), &dm);
        let c = zero_rows(rand_matrix(&mut rng, 5, 4), &cm);
        let w = rand_matrix(&mut rng, 4, 4);
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv, wv) = (g.input(d.clone()), g.input(c.clone()), g.input(w.clone()));
        let sem = semantic_match(&mut g, dv, &dm, cv, &cm, wv).unwrap();
        let (od, oc) = sem_oracle(&d, &dm, &c, &cm, &w);
        for a in 0..4 {
            assert!((g.value(sem.o_desc).data()[a] - od[a]).abs() < 1e-6);
            assert!((g.value(sem.o_code).data()[a] - oc[a]).abs() < 1e-6);
        }
        let sum_d: f64 = g.value(sem.a_desc).data().iter().sum();
        let sum_c: f64 = g.value(sem.a_code).data().iter().sum();
        assert!((sum_d - 1.0).abs() < 1e-6 && (sum_c - 1.0).abs() < 1e-6);
        assert!(g.value(sem.s).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn semantic_gradient_wrt_w_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dm = [true, true, true];
        let cm = [true, true, false, true, true];
        let d = rand_matrix(&mut rng, 3, 4);
        let c = zero_rows(rand_matrix(&mut rng, 5, 4), &cm);
        let w0 = rand_matrix(&mut rng, 4, 4);
        let probe: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |w: &Tensor<f64>| {
            let (od, oc) = sem_oracle(&d, &dm, &c, &cm, w);
            od.iter().chain(&oc).zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv) = (g.input(d.clone()), g.input(c.clone()));
        let wv = g.input(w0.clone().with_requires_grad(true));
        let sem = semantic_match(&mut g, dv, &dm, cv, &cm, wv).unwrap();
        let out = g.concat(&[sem.o_desc, sem.o_code]).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        g.backward_from(out, probe.clone(), &mut grads).unwrap();
        let analytic = g.grad(wv).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..16 {
            let (mut p, mut m) = (w0.clone(), w0.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let numeric = (eval(&p) - eval(&m)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[i] - numeric).abs() / denom < 1e-5, "entry {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn zero_w_gives_mean_of_unmasked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dm = [true, true, false];
        let d = zero_rows(rand_matrix(&mut rng, 3, 2), &dm);
        let c = rand_matrix(&mut rng, 2, 2);
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let (dv, cv) = (g.input(d.clone()), g.input(c));
        let wv = g.input(Tensor::zeros(vec![2, 2]));
        let sem = semantic_match(&mut g, dv, &dm, cv, &[true, true], wv).unwrap();
        assert_eq!(g.value(sem.a_desc).data(), &[0.5, 0.5, 0.0]);
        for a in 0..2 {
            let mean = (d.at(0, a) + d.at(1, a)) / 2.0;
            assert!((g.value(sem.o_desc).data()[a] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_axis_parses() {
        assert_eq!("code_column".parse::<PoolAxis>().unwrap(), PoolAxis::CodeColumn);
        assert_eq!("description_row".parse::<PoolAxis>().unwrap(), PoolAxis::DescriptionRow);
        assert!("rows".parse::<PoolAxis>().is_err());
    }
}
