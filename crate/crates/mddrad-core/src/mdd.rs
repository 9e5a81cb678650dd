//! Assembly of the practical training objectives: the original adversarial
//! MDD with margin factor gamma, and the soft-margin variant where the
//! margin rho sits inside the loss (gamma fixed to 1).
//!
//! One tape carries both players. The graph minimizes
//! `classification + gamma*lse_src(f') - adv_tgt(f')` so that gradient
//! descent drives f' toward the inner supremum, while the gradient
//! reversal between psi and f' flips the sign into the feature extractor.
//! The reported `transfer` value is the discrepancy surrogate itself,
//! `adv_tgt - gamma*lse_src`.

use crate::error::{MddError, Result};
use crate::losses::{argmax_label, disparity_empirical, margin_loss_empirical, Margin};
use crate::model::{grl_apply, MddNetwork, ModelConfig, Part};
use crate::rng::Xoshiro256;
use crate::synthdata::{DomainDataset, SpectrogramSample};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    SoftMargin,
}

/// Default soft-margin rho = 2 log 2.
pub const DEFAULT_RHO: f64 = 2.0 * std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Margin factor on the source term (original variant only).
    pub gamma: f64,
    /// Soft margin (soft-margin variant only; 0 reduces to original gamma=1).
    pub rho: f64,
    /// Current gradient-reversal coefficient.
    pub grl_eta: f64,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::Original => {
                if self.gamma <= 0.0 {
                    return Err(MddError::contract("original variant needs gamma > 0"));
                }
            }
            Variant::SoftMargin => {
                if self.gamma != 1.0 {
                    return Err(MddError::contract(
                        "soft-margin variant fixes gamma to 1 (rho carries the margin)",
                    ));
                }
                if self.rho < 0.0 {
                    return Err(MddError::contract("rho must be >= 0"));
                }
            }
        }
        if self.grl_eta < 0.0 {
            return Err(MddError::contract("grl_eta must be >= 0"));
        }
        Ok(())
    }
}

/// Stack samples into batched [n,1,h,w] range and Doppler leaves.
pub fn batch_leaves(tape: &mut Tape, samples: &[&SpectrogramSample]) -> Result<(Var, Var)> {
    let first = samples
        .first()
        .ok_or_else(|| MddError::contract("empty batch"))?;
    let (h, w) = (first.h, first.w);
    let mut xr = Vec::with_capacity(samples.len() * h * w);
    let mut xd = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.h != h || s.w != w {
            return Err(MddError::Dimension {
                op: "batch_leaves",
                lhs: vec![h, w],
                rhs: vec![s.h, s.w],
            });
        }
        xr.extend_from_slice(&s.x_r);
        xd.extend_from_slice(&s.x_d);
    }
    let shape = [samples.len(), 1, h, w];
    let xr = tape.leaf(xr, &shape, false)?;
    let xd = tape.leaf(xd, &shape, false)?;
    Ok((xr, xd))
}

/// Add the soft-margin offset (rho on every non-label entry) to a score
/// matrix, as a constant. LSE/adversarial losses of the result are the
/// soft-margin losses of the original scores.
fn margin_shift(tape: &mut Tape, scores: Var, labels: &[usize], rho: f64) -> Result<Var> {
    if rho == 0.0 {
        return Ok(scores);
    }
    let k = tape.shape(scores)[1];
    let mut off = vec![rho; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        off[i * k + y - 1] = 0.0;
    }
    let off = tape.leaf(off, &[labels.len(), k], false)?;
    tape.add(scores, off)
}

fn rows(data: &[f64], k: usize) -> Vec<Vec<f64>> {
    data.chunks_exact(k).map(|r| r.to_vec()).collect()
}

/// The per-batch differentiable objective over one tape.
pub struct BatchObjective {
    pub bound: crate::model::BoundNetwork,
    /// Scalar to minimize: classification - transfer.
    pub total: Var,
    /// Mean classification loss on the labeled source batch.
    pub classification: Var,
    /// Discrepancy surrogate adv_tgt - gamma * lse_src (maximized by f').
    pub transfer: Var,
    /// Detached pseudo-labels h_f on the source/target batches.
    pub pseudo_source: Vec<usize>,
    pub pseudo_target: Vec<usize>,
}

/// Build the configured objective for one source/target batch pair.
/// `trainable` selects which parts get gradients (all three for training).
pub fn batch_objective(
    tape: &mut Tape,
    net: &MddNetwork,
    source: &[&SpectrogramSample],
    source_labels: &[usize],
    target: &[&SpectrogramSample],
    cfg: &ObjectiveConfig,
    trainable: impl Fn(Part) -> bool,
) -> Result<BatchObjective> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(MddError::contract("batch_objective: empty batch"));
    }
    if source_labels.len() != source.len() {
        return Err(MddError::contract("batch_objective: label count mismatch"));
    }
    let rho = match cfg.variant {
        Variant::Original => 0.0,
        Variant::SoftMargin => cfg.rho,
    };

    let bound = net.bind(tape, trainable)?;
    let (xr_s, xd_s) = batch_leaves(tape, source)?;
    let (xr_t, xd_t) = batch_leaves(tape, target)?;

    let feat_s = bound.forward_features(tape, xr_s, xd_s)?;
    let feat_t = bound.forward_features(tape, xr_t, xd_t)?;
    let scores_s = bound.forward_f(tape, feat_s)?;
    let scores_t = bound.forward_f(tape, feat_t)?;

    let k = net.config.num_classes;
    let pseudo_source: Vec<usize> = rows(tape.data(scores_s), k)
        .iter()
        .map(|r| argmax_label(r))
        .collect();
    let pseudo_target: Vec<usize> = rows(tape.data(scores_t), k)
        .iter()
        .map(|r| argmax_label(r))
        .collect();

    // classification term on true source labels
    let cls_scores = margin_shift(tape, scores_s, source_labels, rho)?;
    let cls_vec = tape.lse_loss(cls_scores, source_labels)?;
    let classification = tape.mean_axis(cls_vec, 0)?;

    // adversarial head over gradient-reversed features
    let rev_s = grl_apply(tape, feat_s, cfg.grl_eta)?;
    let rev_t = grl_apply(tape, feat_t, cfg.grl_eta)?;
    let adv_scores_s = bound.forward_f_adv(tape, rev_s)?;
    let adv_scores_t = bound.forward_f_adv(tape, rev_t)?;

    let src_shifted = margin_shift(tape, adv_scores_s, &pseudo_source, rho)?;
    let src_vec = tape.lse_loss(src_shifted, &pseudo_source)?;
    let src_term = tape.mean_axis(src_vec, 0)?;

    let tgt_shifted = margin_shift(tape, adv_scores_t, &pseudo_target, rho)?;
    let tgt_vec = tape.adv_loss(tgt_shifted, &pseudo_target)?;
    let tgt_term = tape.mean_axis(tgt_vec, 0)?;

    let src_weighted = tape.scale(src_term, cfg.gamma);
    let transfer = tape.sub(tgt_term, src_weighted)?;
    let total = tape.sub(classification, transfer)?;

    Ok(BatchObjective {
        bound,
        total,
        classification,
        transfer,
        pseudo_source,
        pseudo_target,
    })
}

/// Original MDD objective (gamma weighting, vanilla LSE/adversarial losses).
pub fn batch_objective_original(
    tape: &mut Tape,
    net: &MddNetwork,
    source: &[&SpectrogramSample],
    source_labels: &[usize],
    target: &[&SpectrogramSample],
    gamma: f64,
    grl_eta: f64,
) -> Result<BatchObjective> {
    batch_objective(
        tape,
        net,
        source,
        source_labels,
        target,
        &ObjectiveConfig {
            variant: Variant::Original,
            gamma,
            rho: 0.0,
            grl_eta,
        },
        |_| true,
    )
}

/// Soft-margin MDD objective (margin rho inside the losses, gamma = 1).
pub fn batch_objective_soft_margin(
    tape: &mut Tape,
    net: &MddNetwork,
    source: &[&SpectrogramSample],
    source_labels: &[usize],
    target: &[&SpectrogramSample],
    rho: f64,
    grl_eta: f64,
) -> Result<BatchObjective> {
    batch_objective(
        tape,
        net,
        source,
        source_labels,
        target,
        &ObjectiveConfig {
            variant: Variant::SoftMargin,
            gamma: 1.0,
            rho,
            grl_eta,
        },
        |_| true,
    )
}

/// Per-sample score rows of the main classifier and the adversary.
pub type ScorePair = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// f and f' scores over a whole dataset (evaluation mode, chunked).
pub fn score_dataset(net: &MddNetwork, ds: &DomainDataset) -> Result<ScorePair> {
    let k = net.config.num_classes;
    let mut f_scores = Vec::with_capacity(ds.len());
    let mut adv_scores = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(64) {
        let refs: Vec<&SpectrogramSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |_| false)?;
        let (xr, xd) = batch_leaves(&mut tape, &refs)?;
        let feat = bound.forward_features(&mut tape, xr, xd)?;
        let fs = bound.forward_f(&mut tape, feat)?;
        let fa = bound.forward_f_adv(&mut tape, feat)?;
        f_scores.extend(rows(tape.data(fs), k));
        adv_scores.extend(rows(tape.data(fa), k));
    }
    Ok((f_scores, adv_scores))
}

struct InnerSgd {
    velocity: Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
}

impl InnerSgd {
    fn new(sizes: &[usize], lr: f64) -> Self {
        InnerSgd {
            velocity: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            lr,
            momentum: 0.9,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

fn shuffled_cursor(n: usize, rng: &mut Xoshiro256) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

fn draw<'a>(
    ds: &'a DomainDataset,
    order: &mut Vec<usize>,
    pos: &mut usize,
    rng: &mut Xoshiro256,
    batch: usize,
) -> Vec<&'a SpectrogramSample> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        if *pos >= order.len() {
            *order = shuffled_cursor(ds.len(), rng);
            *pos = 0;
        }
        out.push(&ds.samples[order[*pos]]);
        *pos += 1;
    }
    out
}

/// Finite adversarial approximation of the MDD supremum: freeze psi and f,
/// train a fresh f' for `adversary_steps` to maximize the target-minus-
/// source disparity surrogate, then report the true ramp-based disparity
/// difference at margin rho. A lower bound on the supremum.
pub fn estimate_mdd(
    source: &DomainDataset,
    target: &DomainDataset,
    net: &MddNetwork,
    rho: Margin,
    adversary_steps: usize,
    seed: u64,
) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(MddError::contract("estimate_mdd: empty dataset"));
    }
    let mut probe = net.clone();
    probe.reset_adversary(seed);

    if adversary_steps > 0 {
        let batch = 32.min(source.len()).min(target.len());
        let mut rng = Xoshiro256::derive(seed, 0x616476);
        let mut s_order = shuffled_cursor(source.len(), &mut rng);
        let mut t_order = shuffled_cursor(target.len(), &mut rng);
        let (mut s_pos, mut t_pos) = (0, 0);

        let adv_indices: Vec<usize> = (0..probe.params().len())
            .filter(|i| probe.part_of(*i) == Part::FAdv)
            .collect();
        let sizes: Vec<usize> = adv_indices.iter().map(|i| probe.params()[*i].len()).collect();
        let mut sgd = InnerSgd::new(&sizes, 0.01);

        for _ in 0..adversary_steps {
            let src = draw(source, &mut s_order, &mut s_pos, &mut rng, batch);
            let tgt = draw(target, &mut t_order, &mut t_pos, &mut rng, batch);

            let mut tape = Tape::new();
            let bound = probe.bind(&mut tape, |p| p == Part::FAdv)?;
            let (xr_s, xd_s) = batch_leaves(&mut tape, &src)?;
            let (xr_t, xd_t) = batch_leaves(&mut tape, &tgt)?;
            let feat_s = bound.forward_features(&mut tape, xr_s, xd_s)?;
            let feat_t = bound.forward_features(&mut tape, xr_t, xd_t)?;
            let scores_s = bound.forward_f(&mut tape, feat_s)?;
            let scores_t = bound.forward_f(&mut tape, feat_t)?;
            let k = probe.config.num_classes;
            let h_s: Vec<usize> = rows(tape.data(scores_s), k).iter().map(|r| argmax_label(r)).collect();
            let h_t: Vec<usize> = rows(tape.data(scores_t), k).iter().map(|r| argmax_label(r)).collect();

            let adv_s = bound.forward_f_adv(&mut tape, feat_s)?;
            let adv_t = bound.forward_f_adv(&mut tape, feat_t)?;
            let s_shift = margin_shift(&mut tape, adv_s, &h_s, rho.get())?;
            let t_shift = margin_shift(&mut tape, adv_t, &h_t, rho.get())?;
            let s_vec = tape.lse_loss(s_shift, &h_s)?;
            let t_vec = tape.adv_loss(t_shift, &h_t)?;
            let s_term = tape.mean_axis(s_vec, 0)?;
            let t_term = tape.mean_axis(t_vec, 0)?;
            // minimize src - tgt == maximize tgt - src
            let loss = tape.sub(s_term, t_term)?;
            tape.backward(loss)?;

            let grads: Vec<Vec<f64>> = adv_indices
                .iter()
                .map(|i| tape.grad(bound.vars[*i]).unwrap().to_vec())
                .collect();
            let mut params = probe.params_mut();
            let mut adv_params: Vec<&mut Vec<f64>> = Vec::new();
            for (pos, p) in params.drain(..).enumerate() {
                if adv_indices.contains(&pos) {
                    adv_params.push(p);
                }
            }
            sgd.step(&mut adv_params, &grads);
        }
    }

    let (f_s, adv_s) = score_dataset(&probe, source)?;
    let (f_t, adv_t) = score_dataset(&probe, target)?;
    let disp_s = disparity_empirical(&adv_s, &f_s, rho)?;
    let disp_t = disparity_empirical(&adv_t, &f_t, rho)?;
    Ok(crate::losses::mdd_empirical(disp_t, disp_s))
}

/// Upper estimate of the ideal combined margin loss: train a fresh network
/// on the union of both labeled sets with the soft-margin cross-entropy at
/// 2*rho, then evaluate the true margin loss at rho on each set and sum.
pub fn ideal_combined_margin_loss(
    source_labeled: &DomainDataset,
    target_labeled: &DomainDataset,
    model_cfg: &ModelConfig,
    rho: Margin,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if !source_labeled.labeled || !target_labeled.labeled {
        return Err(MddError::contract(
            "ideal_combined_margin_loss: both datasets must be labeled",
        ));
    }
    if steps == 0 {
        return Err(MddError::contract("ideal_combined_margin_loss: steps >= 1"));
    }
    let mut star = MddNetwork::new(model_cfg.clone(), seed ^ 0x6C616D626461);
    let union: Vec<&SpectrogramSample> = source_labeled
        .samples
        .iter()
        .chain(&target_labeled.samples)
        .collect();
    let labels: Vec<usize> = union
        .iter()
        .map(|s| s.label.expect("labeled dataset"))
        .collect();

    let train_indices: Vec<usize> = (0..star.params().len())
        .filter(|i| star.part_of(*i) != Part::FAdv)
        .collect();
    let sizes: Vec<usize> = train_indices.iter().map(|i| star.params()[*i].len()).collect();
    let mut sgd = InnerSgd::new(&sizes, 0.01);
    let mut rng = Xoshiro256::derive(seed, 0x756E696F6E);
    let mut order = shuffled_cursor(union.len(), &mut rng);
    let mut pos = 0;
    let batch = 32.min(union.len());

    for _ in 0..steps {
        let mut bsamples = Vec::with_capacity(batch);
        let mut blabels = Vec::with_capacity(batch);
        for _ in 0..batch {
            if pos >= order.len() {
                order = shuffled_cursor(union.len(), &mut rng);
                pos = 0;
            }
            bsamples.push(union[order[pos]]);
            blabels.push(labels[order[pos]]);
            pos += 1;
        }
        let mut tape = Tape::new();
        let bound = star.bind(&mut tape, |p| p != Part::FAdv)?;
        let (xr, xd) = batch_leaves(&mut tape, &bsamples)?;
        let feat = bound.forward_features(&mut tape, xr, xd)?;
        let scores = bound.forward_f(&mut tape, feat)?;
        let shifted = margin_shift(&mut tape, scores, &blabels, 2.0 * rho.get())?;
        let vec = tape.lse_loss(shifted, &blabels)?;
        let loss = tape.mean_axis(vec, 0)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = train_indices
            .iter()
            .map(|i| tape.grad(bound.vars[*i]).unwrap().to_vec())
            .collect();
        let mut params = star.params_mut();
        let mut tparams: Vec<&mut Vec<f64>> = Vec::new();
        for (p_idx, p) in params.drain(..).enumerate() {
            if train_indices.contains(&p_idx) {
                tparams.push(p);
            }
        }
        sgd.step(&mut tparams, &grads);
    }

    let eval = |ds: &DomainDataset| -> Result<f64> {
        let (scores, _) = score_dataset(&star, ds)?;
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.label.unwrap()).collect();
        margin_loss_empirical(&scores, &labels, rho)
    };
    Ok(eval(source_labeled)? + eval(target_labeled)?)
}

/// Slack of the generalization bound: (err_S^rho + MDD + lambda) - err_T.
/// Reported, never asserted: the MDD estimate lower-bounds the supremum
/// while the lambda estimate upper-bounds lambda.
pub fn bound_gap(err_t: f64, err_s_margin: f64, mdd_estimate: f64, lambda_estimate: f64) -> f64 {
    (err_s_margin + mdd_estimate + lambda_estimate) - err_t
}
