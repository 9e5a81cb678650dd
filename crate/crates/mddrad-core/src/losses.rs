//! Margin losses, disparities and the cross-entropy family.
//!
//! Everything here is a plain function of f64 slices: these are the
//! non-differentiable evaluation forms used for metrics and property
//! checks. The differentiable counterparts that attach to the tape live in
//! [`crate::tensor`] ([`crate::tensor::Tape::lse_loss`],
//! [`crate::tensor::Tape::adv_loss`]); the soft-margin variants are the
//! same ops applied to margin-shifted scores.
//!
//! Labels are 1-based throughout (`y` in `1..=k`). Argmax ties resolve to
//! the lowest class index everywhere.

use crate::error::{MddError, Result};

/// Positive margin for the ramp function. Zero is only permitted for the
/// soft-margin family, which takes a raw `rho: f64 >= 0` instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margin(f64);

impl Margin {
    pub fn new(rho: f64) -> Result<Self> {
        if rho > 0.0 && rho.is_finite() {
            Ok(Margin(rho))
        } else {
            Err(MddError::contract(format!("margin must be positive, got {rho}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Validated score vector f(x). `values[y-1]` is the score of class y.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub values: Vec<f64>,
}

impl Scores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(MddError::contract("scores need k >= 2 classes"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MddError::Numeric("scores must be finite".into()));
        }
        Ok(Scores { values })
    }
}

fn check_label(f: &[f64], y: usize) -> Result<()> {
    if y < 1 || y > f.len() {
        return Err(MddError::contract(format!(
            "label {y} out of range 1..={}",
            f.len()
        )));
    }
    Ok(())
}

/// Stable log(sum(exp(z))) via max-shift.
pub fn logsumexp_slice(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Stable softmax via max-shift.
pub fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    softmax_slice(z)
}

/// 1-based argmax, lowest index on ties (the h_f tie rule).
pub fn argmax_label(f: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in f.iter().enumerate().skip(1) {
        if *v > f[best] {
            best = i;
        }
    }
    best + 1
}

/// The ramp function: 1 below zero, linear down to 0 at rho, 0 beyond.
pub fn margin_indicator(x: f64, rho: Margin) -> f64 {
    let rho = rho.get();
    if x >= rho {
        0.0
    } else if x <= 0.0 {
        1.0
    } else {
        1.0 - x / rho
    }
}

/// Half the gap between the score of y and the best other class.
pub fn score_margin(f: &[f64], y: usize) -> Result<f64> {
    check_label(f, y)?;
    let best_other = f
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y - 1)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (f[y - 1] - best_other))
}

/// Empirical margin loss: mean ramp of the score margins.
pub fn margin_loss_empirical(scores: &[Vec<f64>], labels: &[usize], rho: Margin) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(MddError::contract(format!(
            "margin_loss_empirical: {} score rows vs {} labels (need n >= 1)",
            scores.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (f, &y) in scores.iter().zip(labels) {
        total += margin_indicator(score_margin(f, y)?, rho);
    }
    Ok(total / scores.len() as f64)
}

/// Empirical margin disparity of f' against the argmax labels of f.
pub fn disparity_empirical(
    scores_fprime: &[Vec<f64>],
    scores_f: &[Vec<f64>],
    rho: Margin,
) -> Result<f64> {
    if scores_fprime.is_empty() || scores_fprime.len() != scores_f.len() {
        return Err(MddError::contract(format!(
            "disparity_empirical: {} f' rows vs {} f rows (need n >= 1)",
            scores_fprime.len(),
            scores_f.len()
        )));
    }
    let mut total = 0.0;
    for (fp, f) in scores_fprime.iter().zip(scores_f) {
        let h = argmax_label(f);
        total += margin_indicator(score_margin(fp, h)?, rho);
    }
    Ok(total / scores_fprime.len() as f64)
}

/// Target disparity minus source disparity. The sup over f' is realized by
/// adversarial training, not here.
pub fn mdd_empirical(disp_target: f64, disp_source: f64) -> f64 {
    disp_target - disp_source
}

/// LSE loss -log sigma_y(f) = log sum exp(f_y' - f_y).
pub fn lse_loss(f: &[f64], y: usize) -> Result<f64> {
    check_label(f, y)?;
    Ok(logsumexp_slice(f) - f[y - 1])
}

/// Clamp floor applied inside log(1 - sigma_y).
pub use crate::tensor::ADV_CLAMP;

/// Adversarial loss log(1 - sigma_y(f)), clamped at [`ADV_CLAMP`].
pub fn adversarial_loss(f: &[f64], y: usize) -> Result<f64> {
    check_label(f, y)?;
    let p = softmax_slice(f);
    Ok((1.0 - p[y - 1]).max(ADV_CLAMP).ln())
}

/// Scores with the true-class logit effectively shifted down by rho:
/// entry j != y gains rho. Softmax of the result at index y is the
/// soft-margin softmax entry.
pub fn margin_shifted(f: &[f64], y: usize, rho: f64) -> Vec<f64> {
    f.iter()
        .enumerate()
        .map(|(j, v)| if j == y - 1 { *v } else { *v + rho })
        .collect()
}

/// The y-th entry of the soft-margin softmax.
pub fn sm_softmax(f: &[f64], y: usize, rho: f64) -> Result<f64> {
    check_label(f, y)?;
    if rho < 0.0 {
        return Err(MddError::contract("sm_softmax: rho must be >= 0"));
    }
    Ok(softmax_slice(&margin_shifted(f, y, rho))[y - 1])
}

/// Soft-margin cross-entropy -log sm_softmax(f, y, rho).
pub fn sm_cross_entropy(f: &[f64], y: usize, rho: f64) -> Result<f64> {
    check_label(f, y)?;
    if rho < 0.0 {
        return Err(MddError::contract("sm_cross_entropy: rho must be >= 0"));
    }
    let g = margin_shifted(f, y, rho);
    Ok(logsumexp_slice(&g) - g[y - 1])
}

/// Soft-margin adversarial loss log(1 - sm_softmax), clamped.
pub fn sm_adversarial(f: &[f64], y: usize, rho: f64) -> Result<f64> {
    check_label(f, y)?;
    if rho < 0.0 {
        return Err(MddError::contract("sm_adversarial: rho must be >= 0"));
    }
    let p = sm_softmax(f, y, rho)?;
    Ok((1.0 - p).max(ADV_CLAMP).ln())
}

/// Generalized hinge loss max_y' (f_y' - f_y + theta * [y' != y]).
pub fn generalized_hinge(f: &[f64], y: usize, theta: f64) -> Result<f64> {
    check_label(f, y)?;
    Ok(f.iter()
        .enumerate()
        .map(|(j, v)| v - f[y - 1] + if j == y - 1 { 0.0 } else { theta })
        .fold(f64::NEG_INFINITY, f64::max))
}
