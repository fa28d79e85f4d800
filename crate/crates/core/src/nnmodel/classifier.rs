use ndarray::{Array1, Array2, Axis};

use crate::error::{invalid, FgsError, Result};
use crate::tensor::Grid;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    shape: (usize, usize),
    weights: Array2<f64>,
    bias: Array1<f64>,
}

fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn log_probabilities(&self, image: &Grid) -> Result<Vec<f64>> {
        if image.shape() != self.shape {
            return Err(FgsError::ShapeMismatch {
                expected: self.shape,
                got: image.shape(),
            });
        }
        let x = Array1::from(image.data().to_vec());
        let mut logits = (self.weights.dot(&x) + &self.bias).to_vec();
        log_softmax(&mut logits);
        Ok(logits)
    }

    pub fn classify(&self, image: &Grid) -> Result<Vec<f64>> {
        Ok(self
            .log_probabilities(image)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    pub fn predict(&self, image: &Grid) -> Result<usize> {
        let lp = self.log_probabilities(image)?;
        Ok(lp
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > lp[best] { i } else { best }))
    }
}

/// Full-batch gradient descent on cross-entropy; deterministic.
pub fn classifier_train(
    samples: &[(Grid, usize)],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<Classifier> {
    let first = samples
        .first()
        .ok_or_else(|| invalid("classifier needs training data"))?;
    let shape = first.0.shape();
    let dim = first.0.len();
    if classes < 2 {
        return Err(invalid("classifier needs at least two classes"));
    }
    let mut x = Array2::zeros((samples.len(), dim));
    let mut y = Array2::zeros((samples.len(), classes));
    for (i, (img, label)) in samples.iter().enumerate() {
        if img.shape() != shape {
            return Err(FgsError::ShapeMismatch {
                expected: shape,
                got: img.shape(),
            });
        }
        if *label >= classes {
            return Err(invalid(format!("label {label} out of range")));
        }
        x.row_mut(i).assign(&Array1::from(img.data().to_vec()));
        y[[i, *label]] = 1.0;
    }
    let m = samples.len() as f64;
    let mut weights = Array2::<f64>::zeros((classes, dim));
    let mut bias = Array1::<f64>::zeros(classes);
    for _ in 0..cfg.iterations {
        let mut logits = x.dot(&weights.t()) + &bias;
        for mut row in logits.rows_mut() {
            log_softmax(row.as_slice_mut().expect("standard layout"));
            row.mapv_inplace(f64::exp);
        }
        let resid = (logits - &y) / m;
        let gw = resid.t().dot(&x) + &(&weights * cfg.l2);
        let gb = resid.sum_axis(Axis(0));
        weights.scaled_add(-cfg.learning_rate, &gw);
        bias.scaled_add(-cfg.learning_rate, &gb);
    }
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("classifier training diverged"));
    }
    Ok(Classifier {
        shape,
        weights,
        bias,
    })
}
