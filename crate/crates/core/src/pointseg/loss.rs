use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::ClassProbabilities;

/// `[N, C]` one-hot encoding of class labels.
pub fn one_hot(labels: &[u8], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (n, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::InvalidArgument(format!("label {l} at point {n} with only {classes} classes")));
        }
        data[n * classes + l as usize] = 1.0;
    }
    Tensor::from_vec(vec![labels.len(), classes], data)
}

/// Class weights `1 / sum_n r_ln` (squared when asked); classes absent from
/// the truth get weight 0.
fn class_weights(col_sums: &[f64], squared: bool) -> Vec<f64> {
    col_sums
        .iter()
        .map(|&s| match s {
            s if s <= 0.0 => 0.0,
            s if squared => 1.0 / (s * s),
            s => 1.0 / s,
        })
        .collect()
}

fn column_sums(data: &[f64], classes: usize) -> Vec<f64> {
    let mut sums = vec![0.0; classes];
    for row in data.chunks(classes) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// Generalized Dice loss of predicted probabilities against a one-hot truth,
/// both `N x C` row-major.
pub fn gdl_loss(pred: &ClassProbabilities, truth: &[f64], squared: bool) -> Result<f64> {
    let c = pred.num_classes();
    if truth.len() != pred.data().len() {
        return Err(Error::shape("gdl_loss", format!("{} truth values for {} x {c} predictions", truth.len(), pred.len())));
    }
    for (n, row) in truth.chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("truth row {n} is not one-hot: {row:?}")));
        }
    }
    let w = class_weights(&column_sums(truth, c), squared);
    let (mut num, mut den) = (0.0, 0.0);
    for (p, r) in pred.data().chunks(c).zip(truth.chunks(c)) {
        for l in 0..c {
            num += w[l] * r[l] * p[l];
            den += w[l] * (r[l] + p[l]);
        }
    }
    Ok(1.0 - 2.0 * num / den)
}

/// Differentiable generalized Dice loss of `probs` (`[N, C]`) against labels.
pub fn gdl_graph(g: &mut Graph, probs: Var, labels: &[u8], squared: bool) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("gdl", format!("probabilities {s:?} for {} labels", labels.len())));
    }
    let r = one_hot(labels, s[1])?;
    let counts = column_sums(r.data(), s[1]);
    let w = class_weights(&counts, squared);
    let truth_mass: f64 = w.iter().zip(&counts).map(|(w, c)| w * c).sum();
    let r = g.constant(r);
    let w = g.constant(Tensor::from_vec(vec![s[1]], w)?);
    let overlap = g.mul(probs, r)?;
    let overlap = g.sum_axis(overlap, 0)?;
    let overlap = g.mul(overlap, w)?;
    let num = g.sum(overlap)?;
    let mass = g.sum_axis(probs, 0)?;
    let mass = g.mul(mass, w)?;
    let den = g.sum(mass)?;
    let den = g.add_scalar(den, truth_mass)?;
    let ratio = g.div(num, den)?;
    let ratio = g.scale(ratio, -2.0)?;
    g.add_scalar(ratio, 1.0)
}

/// Mean negative log-likelihood of the true class under `softmax(logits)`.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
    }
    let r = g.constant(one_hot(labels, s[1])?);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, r)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}
