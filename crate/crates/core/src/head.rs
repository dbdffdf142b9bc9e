//! Class-balanced L2 logistic regression on concatenated features and embeddings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Inverse L2 strength: objective ½‖w‖² + C·Σ s_i ℓ_i, bias unpenalized.
    pub c: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            c: 0.5,
            tolerance: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedHead {
    pub scaler: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_weights: [f64; 2],
    /// Objective after each accepted iteration, starting at the zero model.
    pub objective_trace: Vec<f64>,
    pub gradient_norm: f64,
}

/// n/(2·n_c) for each class.
pub fn class_balanced_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let n = labels.len() as f64;
    let n1 = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n0 = n - n1;
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::Head(format!("head needs both classes, got {n0} negatives and {n1} positives")));
    }
    Ok([n / (2.0 * n0), n / (2.0 * n1)])
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    s: &'a DVector<f64>,
    c: f64,
}

impl Problem<'_> {
    /// theta = [w; b]
    fn margins(&self, theta: &DVector<f64>) -> DVector<f64> {
        let d = self.x.ncols();
        let w = theta.rows(0, d);
        let mut z = self.x * w;
        z.add_scalar_mut(theta[d]);
        z
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let d = self.x.ncols();
        let z = self.margins(theta);
        let mut loss = 0.0;
        for i in 0..z.len() {
            // log(1 + e^{−m}) with m = ±z, written stably
            let m = if self.y[i] > 0.5 { z[i] } else { -z[i] };
            let l = if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
            loss += self.s[i] * l;
        }
        0.5 * theta.rows(0, d).norm_squared() + self.c * loss
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = self.x.shape();
        let z = self.margins(theta);
        let mut xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { self.x[(i, j)] } else { 1.0 });
        let mut resid = DVector::zeros(n);
        let mut curv = DVector::zeros(n);
        for i in 0..n {
            let p = sigmoid(z[i]);
            resid[i] = self.c * self.s[i] * (p - self.y[i]);
            curv[i] = self.c * self.s[i] * p * (1.0 - p);
        }
        let mut grad = xa.transpose() * &resid;
        for j in 0..d {
            grad[j] += theta[j];
        }
        for i in 0..n {
            let r = curv[i].sqrt();
            xa.row_mut(i).scale_mut(r);
        }
        let mut hess = xa.transpose() * &xa;
        for j in 0..d {
            hess[(j, j)] += 1.0;
        }
        // a tiny ridge on the bias keeps the Cholesky well-posed when p(1−p) underflows
        hess[(d, d)] += 1e-12;
        (grad, hess)
    }
}

impl CalibratedHead {
    /// Fits on the rows `indices` of `[features ‖ embeddings]`.
    pub fn train(
        features: &DenseMatrix,
        embeddings: &DenseMatrix,
        labels: &[Option<u8>],
        indices: &[usize],
        cfg: &HeadConfig,
    ) -> Result<Self> {
        if features.rows() != embeddings.rows() {
            return Err(Error::dim("head", format!("{} feature rows, {} embedding rows", features.rows(), embeddings.rows())));
        }
        let ys: Vec<u8> = indices
            .iter()
            .map(|&i| labels[i].ok_or_else(|| Error::Head(format!("row {i} has no label"))))
            .collect::<Result<_>>()?;
        let class_weights = class_balanced_weights(&ys)?;
        let joined = features.select_rows(indices).hstack(&embeddings.select_rows(indices))?;
        let all: Vec<usize> = (0..joined.rows()).collect();
        let scaler = Standardizer::fit(&joined, &all)?;
        let z = scaler.apply(&joined);

        let (n, d) = z.shape();
        let x = DMatrix::from_row_slice(n, d, z.as_slice());
        let y = DVector::from_iterator(n, ys.iter().map(|&v| f64::from(v)));
        let s = DVector::from_iterator(n, ys.iter().map(|&v| class_weights[v as usize]));
        let problem = Problem { x: &x, y: &y, s: &s, c: cfg.c };

        let mut theta = DVector::zeros(d + 1);
        let mut f = problem.objective(&theta);
        let mut trace = vec![f];
        let mut gnorm = f64::INFINITY;
        for _ in 0..cfg.max_iter {
            let (g, h) = problem.gradient_hessian(&theta);
            gnorm = g.norm();
            if gnorm <= cfg.tolerance {
                break;
            }
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => g.clone(),
            };
            let slope = g.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &theta - &step * t;
                let fc = problem.objective(&cand);
                if fc <= f - 1e-4 * t * slope {
                    theta = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            trace.push(f);
        }
        let (g, _) = problem.gradient_hessian(&theta);
        gnorm = gnorm.min(g.norm());
        Ok(Self {
            scaler,
            weights: theta.rows(0, d).iter().copied().collect(),
            bias: theta[d],
            class_weights,
            objective_trace: trace,
            gradient_norm: gnorm,
        })
    }

    /// P(y = 1) for the given rows.
    pub fn predict_proba(&self, features: &DenseMatrix, embeddings: &DenseMatrix, indices: &[usize]) -> Result<Vec<f64>> {
        let joined = features.select_rows(indices).hstack(&embeddings.select_rows(indices))?;
        if joined.cols() != self.weights.len() {
            return Err(Error::dim("head", format!("{} inputs, head expects {}", joined.cols(), self.weights.len())));
        }
        let z = self.scaler.apply(&joined);
        Ok((0..z.rows())
            .map(|i| sigmoid(z.row(i).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias))
            .collect())
    }
}
