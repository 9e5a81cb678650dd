//! Minibatch SGD training loops: source-only baseline, adversarial MDD,
//! evaluation, metrics logging and the cross-configuration accuracy matrix.

use crate::error::{MddError, Result};
use crate::losses::{margin_loss_empirical, Margin};
use crate::mdd::{
    batch_leaves, batch_objective, score_dataset, ObjectiveConfig, Variant, DEFAULT_RHO,
};
use crate::model::{MddNetwork, ModelConfig, Part};
use crate::rng::Xoshiro256;
use crate::synthdata::{make_domain_pair, DomainDataset, RadarConfigSpec, SpectrogramSample};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: Variant,
    /// Soft margin (soft-margin variant); ignored by the original variant.
    pub rho: f64,
    /// Source-term weight (original variant); must be 1 for soft-margin.
    pub gamma: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Learning-rate decay lr(p) = lr0 * (1 + alpha*p)^-beta.
    pub lr_alpha: f64,
    pub lr_beta: f64,
    /// Reversal ramp eta(p) = 2/(1+exp(-delta*p)) - 1.
    pub grl_delta: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn desk(seed: u64) -> Self {
        TrainingConfig {
            variant: Variant::SoftMargin,
            rho: DEFAULT_RHO,
            gamma: 1.0,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            total_steps: 3000,
            lr_alpha: 10.0,
            lr_beta: 0.75,
            grl_delta: 2.0,
            eval_every: 250,
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        TrainingConfig {
            total_steps: 10000,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.batch_size < 2 || self.total_steps == 0 {
            return Err(MddError::contract(
                "lr0 > 0, batch_size >= 2, total_steps >= 1 required",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MddError::contract("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.lr_alpha < 0.0 || self.lr_beta < 0.0 {
            return Err(MddError::contract("negative hyperparameter"));
        }
        if self.eval_every == 0 {
            return Err(MddError::contract("eval_every must be >= 1"));
        }
        self.objective(0.0).validate()
    }

    pub fn objective(&self, eta: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            variant: self.variant,
            gamma: self.gamma,
            rho: self.rho,
            grl_eta: eta,
        }
    }

    /// Margin used for reporting err^rho; falls back to the default when
    /// the configured rho is degenerate (original variant at rho 0).
    pub fn report_margin(&self) -> Margin {
        Margin::new(if self.rho > 0.0 { self.rho } else { DEFAULT_RHO }).unwrap()
    }
}

/// Annealed learning rate: lr0 * (1 + alpha*p)^-beta at progress p in [0,1].
pub fn lr_schedule(lr0: f64, alpha: f64, beta: f64, progress: f64) -> f64 {
    lr0 * (1.0 + alpha * progress).powf(-beta)
}

/// Reversal coefficient ramp: 0 at p=0, saturating toward 1.
pub fn grl_schedule(delta: f64, progress: f64) -> f64 {
    2.0 / (1.0 + (-delta * progress).exp()) - 1.0
}

/// Classic momentum SGD with decoupled-from-schedule weight decay folded
/// into the gradient: v <- m*v + g + wd*w; w <- w - lr*v.
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(sizes: &[usize]) -> Self {
        SgdState {
            velocity: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Vec<f64>],
        grads: &[Vec<f64>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(MddError::contract("sgd_step: tensor count mismatch"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() {
                return Err(MddError::contract("sgd_step: shape mismatch"));
            }
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub grl_eta: f64,
    pub classification_loss: f64,
    pub transfer_loss: Option<f64>,
    pub source_eval_accuracy: Option<f64>,
    pub source_err_rho: Option<f64>,
    pub target_eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,lr,grl_eta,classification_loss,transfer_loss,source_eval_accuracy,source_err_rho,target_eval_accuracy\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.8},{:.6},{:.6},{},{},{},{}\n",
                r.step,
                r.lr,
                r.grl_eta,
                r.classification_loss,
                opt(r.transfer_loss),
                opt(r.source_eval_accuracy),
                opt(r.source_err_rho),
                opt(r.target_eval_accuracy),
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub err01: f64,
    pub err_rho: f64,
    pub mean_lse: f64,
}

/// Accuracy, 0-1 error, ramp margin loss and mean LSE loss of the main
/// scorer on a labeled dataset. Read-only: the network is not modified.
pub fn evaluate(net: &MddNetwork, ds: &DomainDataset, rho: Margin) -> Result<EvalReport> {
    if !ds.labeled || ds.is_empty() {
        return Err(MddError::contract("evaluate: needs a nonempty labeled dataset"));
    }
    let (scores, _) = score_dataset(net, ds)?;
    let labels: Vec<usize> = ds.samples.iter().map(|s| s.label.unwrap()).collect();
    let mut correct = 0usize;
    let mut lse_sum = 0.0;
    for (row, &y) in scores.iter().zip(&labels) {
        if crate::losses::argmax_label(row) == y {
            correct += 1;
        }
        lse_sum += crate::losses::lse_loss(row, y)?;
    }
    let accuracy = correct as f64 / labels.len() as f64;
    Ok(EvalReport {
        accuracy,
        err01: 1.0 - accuracy,
        err_rho: margin_loss_empirical(&scores, &labels, rho)?,
        mean_lse: lse_sum / labels.len() as f64,
    })
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: Xoshiro256,
    n: usize,
}

impl Cursor {
    fn new(n: usize, rng: Xoshiro256) -> Self {
        let mut c = Cursor {
            order: Vec::new(),
            pos: 0,
            rng,
            n,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn draw(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather<'a>(ds: &'a DomainDataset, idx: &[usize]) -> (Vec<&'a SpectrogramSample>, Vec<usize>) {
    let samples: Vec<&SpectrogramSample> = idx.iter().map(|i| &ds.samples[*i]).collect();
    let labels: Vec<usize> = idx
        .iter()
        .map(|i| ds.samples[*i].label.unwrap_or(0))
        .collect();
    (samples, labels)
}

fn collect_grads(
    tape: &Tape,
    bound_vars: &[crate::tensor::Var],
    indices: &[usize],
) -> Vec<Vec<f64>> {
    indices
        .iter()
        .map(|i| {
            tape.grad(bound_vars[*i])
                .map(|g| g.to_vec())
                .unwrap_or_default()
        })
        .collect()
}

fn apply_sgd(
    net: &mut MddNetwork,
    sgd: &mut SgdState,
    indices: &[usize],
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params = net.params_mut();
    let mut selected: Vec<&mut Vec<f64>> = Vec::with_capacity(indices.len());
    for (pos, p) in params.drain(..).enumerate() {
        if indices.contains(&pos) {
            selected.push(p);
        }
    }
    sgd.step(&mut selected, grads, lr, momentum, weight_decay)
}

/// Polyak tail average: the returned model is the mean of the weights over
/// the last quarter of training, which smooths the oscillation that
/// adversarial games show once the classifier has converged.
struct TailAverage {
    start: usize,
    count: usize,
    acc: Vec<Vec<f64>>,
}

impl TailAverage {
    fn new(total_steps: usize, sizes: &[usize]) -> Self {
        TailAverage {
            start: total_steps - total_steps / 4,
            count: 0,
            acc: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    fn observe(&mut self, step: usize, net: &MddNetwork) {
        if step < self.start {
            return;
        }
        self.count += 1;
        for (a, p) in self.acc.iter_mut().zip(net.params()) {
            for (ai, pi) in a.iter_mut().zip(p) {
                *ai += pi;
            }
        }
    }

    fn apply(self, net: &mut MddNetwork) {
        if self.count == 0 {
            return;
        }
        let inv = 1.0 / self.count as f64;
        for (p, a) in net.params_mut().into_iter().zip(self.acc) {
            for (pi, ai) in p.iter_mut().zip(a) {
                *pi = ai * inv;
            }
        }
    }
}

fn check_compat(net: &MddNetwork, ds: &DomainDataset, what: &str) -> Result<()> {
    let (h, w) = (net.config.input_h, net.config.input_w);
    if ds.samples.iter().any(|s| s.h != h || s.w != w) {
        return Err(MddError::contract(format!(
            "{what}: sample shape does not match model input {h}x{w}"
        )));
    }
    if ds.k != net.config.num_classes {
        return Err(MddError::contract(format!(
            "{what}: dataset k {} != model classes {}",
            ds.k, net.config.num_classes
        )));
    }
    Ok(())
}

/// Supervised baseline: minimize the classification loss on labeled source
/// data only. The adversarial head is left untouched.
pub fn train_source_only(
    s_train: &DomainDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    s_eval: Option<&DomainDataset>,
    t_eval: Option<&DomainDataset>,
) -> Result<(MddNetwork, Metrics)> {
    cfg.validate()?;
    if !s_train.labeled || s_train.is_empty() {
        return Err(MddError::contract("train_source_only: labeled source required"));
    }
    let mut net = MddNetwork::new(model_cfg.clone(), cfg.seed);
    check_compat(&net, s_train, "train_source_only")?;

    let rho = match cfg.variant {
        Variant::Original => 0.0,
        Variant::SoftMargin => cfg.rho,
    };
    let train_idx: Vec<usize> = (0..net.params().len())
        .filter(|i| net.part_of(*i) != Part::FAdv)
        .collect();
    let sizes: Vec<usize> = train_idx.iter().map(|i| net.params()[*i].len()).collect();
    let mut sgd = SgdState::new(&sizes);
    let mut cursor = Cursor::new(s_train.len(), Xoshiro256::derive(cfg.seed, 0x737263));
    let mut metrics = Metrics::default();
    let report_rho = cfg.report_margin();
    let all_sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut tail = TailAverage::new(cfg.total_steps, &all_sizes);

    for step in 0..cfg.total_steps {
        let p = step as f64 / cfg.total_steps as f64;
        let lr = lr_schedule(cfg.lr0, cfg.lr_alpha, cfg.lr_beta, p);
        let idx = cursor.draw(cfg.batch_size.min(s_train.len()));
        let (samples, labels) = gather(s_train, &idx);

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |part| part != Part::FAdv)?;
        let (xr, xd) = batch_leaves(&mut tape, &samples)?;
        let feat = bound.forward_features(&mut tape, xr, xd)?;
        let scores = bound.forward_f(&mut tape, feat)?;
        let shifted = shift_scores(&mut tape, scores, &labels, rho)?;
        let vec = tape.lse_loss(shifted, &labels)?;
        let loss = tape.mean_axis(vec, 0)?;
        tape.backward(loss)?;
        let cls_value = tape.data(loss)[0];

        let grads = collect_grads(&tape, &bound.vars, &train_idx);
        apply_sgd(&mut net, &mut sgd, &train_idx, &grads, lr, cfg.momentum, cfg.weight_decay)?;
        tail.observe(step, &net);

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            let s_rep = match s_eval {
                Some(ds) => Some(evaluate(&net, ds, report_rho)?),
                None => None,
            };
            let t_rep = match t_eval {
                Some(ds) => Some(evaluate(&net, ds, report_rho)?),
                None => None,
            };
            metrics.rows.push(MetricsRow {
                step: step + 1,
                lr,
                grl_eta: 0.0,
                classification_loss: cls_value,
                transfer_loss: None,
                source_eval_accuracy: s_rep.map(|r| r.accuracy),
                source_err_rho: s_rep.map(|r| r.err_rho),
                target_eval_accuracy: t_rep.map(|r| r.accuracy),
            });
        }
    }
    tail.apply(&mut net);
    Ok((net, metrics))
}

fn shift_scores(
    tape: &mut Tape,
    scores: crate::tensor::Var,
    labels: &[usize],
    rho: f64,
) -> Result<crate::tensor::Var> {
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

/// Full adversarial MDD training on labeled source + unlabeled target.
pub fn train_mdd(
    s_train: &DomainDataset,
    t_train: &DomainDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    s_eval: Option<&DomainDataset>,
    t_eval: Option<&DomainDataset>,
) -> Result<(MddNetwork, Metrics)> {
    cfg.validate()?;
    if !s_train.labeled || s_train.is_empty() {
        return Err(MddError::contract("train_mdd: labeled source required"));
    }
    if t_train.is_empty() {
        return Err(MddError::contract("train_mdd: nonempty target required"));
    }
    let mut net = MddNetwork::new(model_cfg.clone(), cfg.seed);
    check_compat(&net, s_train, "train_mdd(source)")?;
    check_compat(&net, t_train, "train_mdd(target)")?;

    let all_idx: Vec<usize> = (0..net.params().len()).collect();
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut sgd = SgdState::new(&sizes);
    let mut s_cursor = Cursor::new(s_train.len(), Xoshiro256::derive(cfg.seed, 0x737263));
    let mut t_cursor = Cursor::new(t_train.len(), Xoshiro256::derive(cfg.seed, 0x746774));
    let mut metrics = Metrics::default();
    let report_rho = cfg.report_margin();
    let mut tail = TailAverage::new(cfg.total_steps, &sizes);

    for step in 0..cfg.total_steps {
        let p = step as f64 / cfg.total_steps as f64;
        let lr = lr_schedule(cfg.lr0, cfg.lr_alpha, cfg.lr_beta, p);
        let eta = grl_schedule(cfg.grl_delta, p);

        let s_idx = s_cursor.draw(cfg.batch_size.min(s_train.len()));
        let t_idx = t_cursor.draw(cfg.batch_size.min(t_train.len()));
        let (s_samples, s_labels) = gather(s_train, &s_idx);
        let (t_samples, _) = gather(t_train, &t_idx);

        let mut tape = Tape::new();
        let obj = batch_objective(
            &mut tape,
            &net,
            &s_samples,
            &s_labels,
            &t_samples,
            &cfg.objective(eta),
            |_| true,
        )?;
        tape.backward(obj.total)?;
        let cls_value = tape.data(obj.classification)[0];
        let transfer_value = tape.data(obj.transfer)[0];

        let grads = collect_grads(&tape, &obj.bound.vars, &all_idx);
        apply_sgd(&mut net, &mut sgd, &all_idx, &grads, lr, cfg.momentum, cfg.weight_decay)?;
        tail.observe(step, &net);

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            let s_rep = match s_eval {
                Some(ds) => Some(evaluate(&net, ds, report_rho)?),
                None => None,
            };
            let t_rep = match t_eval {
                Some(ds) => Some(evaluate(&net, ds, report_rho)?),
                None => None,
            };
            metrics.rows.push(MetricsRow {
                step: step + 1,
                lr,
                grl_eta: eta,
                classification_loss: cls_value,
                transfer_loss: Some(transfer_value),
                source_eval_accuracy: s_rep.map(|r| r.accuracy),
                source_err_rho: s_rep.map(|r| r.err_rho),
                target_eval_accuracy: t_rep.map(|r| r.accuracy),
            });
        }
    }
    tail.apply(&mut net);
    Ok((net, metrics))
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixCell {
    pub source: String,
    pub target: String,
    pub baseline_accuracy: f64,
    pub mdd_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixResult {
    pub cells: Vec<MatrixCell>,
}

/// Train and evaluate every ordered configuration pair, baseline and MDD.
/// Per-pair seeds are cfg.seed XOR the pair index, so cells are independent
/// of execution order; `jobs > 1` runs pairs on that many threads.
pub fn accuracy_matrix(
    configs: &[RadarConfigSpec],
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    n_train: usize,
    n_test: usize,
    jobs: usize,
) -> Result<MatrixResult> {
    if configs.len() < 2 {
        return Err(MddError::contract("accuracy_matrix: need >= 2 configs"));
    }
    let mut pairs = Vec::new();
    for s in configs {
        for t in configs {
            if s.name != t.name {
                pairs.push((s.clone(), t.clone()));
            }
        }
    }
    let jobs = jobs.max(1).min(pairs.len());
    let run_pair = |pair_index: usize, s: &RadarConfigSpec, t: &RadarConfigSpec| -> Result<MatrixCell> {
        let mut pcfg = cfg.clone();
        pcfg.seed = cfg.seed ^ pair_index as u64;
        let pair = make_domain_pair(
            s,
            t,
            n_train,
            n_test,
            model_cfg.num_classes,
            pcfg.seed,
            model_cfg.input_h,
            model_cfg.input_w,
        )?;
        let (base_net, _) = train_source_only(&pair.s_train, model_cfg, &pcfg, None, None)?;
        let base = evaluate(&base_net, &pair.t_test, pcfg.report_margin())?;
        let (mdd_net, _) = train_mdd(&pair.s_train, &pair.t_train, model_cfg, &pcfg, None, None)?;
        let mdd = evaluate(&mdd_net, &pair.t_test, pcfg.report_margin())?;
        Ok(MatrixCell {
            source: s.name.clone(),
            target: t.name.clone(),
            baseline_accuracy: base.accuracy,
            mdd_accuracy: mdd.accuracy,
        })
    };

    let mut cells: Vec<Option<MatrixCell>> = vec![None; pairs.len()];
    if jobs == 1 {
        for (i, (s, t)) in pairs.iter().enumerate() {
            cells[i] = Some(run_pair(i, s, t)?);
        }
    } else {
        let results: Vec<Result<(usize, MatrixCell)>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk_start in 0..jobs {
                let pairs = &pairs;
                let run_pair = &run_pair;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = chunk_start;
                    while i < pairs.len() {
                        let (s, t) = &pairs[i];
                        out.push(run_pair(i, s, t).map(|c| (i, c)));
                        i += jobs;
                    }
                    out
                }));
            }
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            let (i, cell) = r?;
            cells[i] = Some(cell);
        }
    }
    Ok(MatrixResult {
        cells: cells.into_iter().map(|c| c.unwrap()).collect(),
    })
}
