//! L1 objective, Adam, the mini-batch training loop and finite-difference
//! gradient checking.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{save_checkpoint, Model};
use crate::tensor::Tensor;

/// Mean absolute difference over all pixels.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::domain(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::domain("empty patch"));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.numel() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the learning rate by `factor` every `every` epochs.
    StepDecay {
        every: usize,
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Save the best model every this many epochs when `checkpoint_path` is set.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Drop training pairs whose target is identically zero.
    pub drop_empty_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            seed: 0,
            checkpoint_every: 1,
            checkpoint_path: None,
            schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            grad_clip: None,
            drop_empty_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::domain("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::domain("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::domain("parameter, gradient and moment lists differ in length"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::domain("parameter and gradient shapes differ"));
        }
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i] + cfg.weight_decay * pd[i];
            let mi = &mut m.data_mut()[i];
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Paired low-coverage inputs and high-coverage targets, each `1 x s x s`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::domain("inputs and targets differ in count"));
        }
        if inputs.iter().zip(&targets).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::domain("input and target shapes differ"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean per-patch L1 of `model` over `data`.
pub fn evaluate_l1(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let mut sum = 0.0;
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        sum += model.loss(x, t)?;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean training L1 over the epoch's mini-batches (pre-update losses).
    pub train_l1: f64,
    /// Validation L1 after the epoch, `NaN` without a validation set.
    pub val_l1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (training loss without a
    /// validation set).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub history: Vec<EpochRecord>,
}

/// Writes `step,train_l1,val_l1` rows.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,train_l1,val_l1")?;
    for r in history {
        writeln!(w, "{},{},{}", r.step, r.train_l1, r.val_l1)?;
    }
    Ok(())
}

fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::StepDecay { every, factor } => cfg.learning_rate * factor.powi((epoch / every.max(1)) as i32),
    }
}

pub fn train(model: Model, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..train_set.len())
        .filter(|&i| !cfg.drop_empty_targets || train_set.targets[i].max_abs() > 0.0)
        .collect();
    if order.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut state = OptimizerState::new(model.params().values());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut sample_loss = vec![0.0; train_set.len()];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = learning_rate(cfg, epoch);
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = model.loss_and_grad(&train_set.inputs[i], &train_set.targets[i])?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {loss} at epoch {epoch}, step {}, batch {batch_id}, sample {i}",
                        state.step
                    )));
                }
                sample_loss[i] = loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale(scale));
            if let Some(max_norm) = cfg.grad_clip {
                let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max_norm {
                    grads.iter_mut().for_each(|g| g.scale(max_norm / norm));
                }
            }
            adam_step(model.params_mut().values_mut(), &grads, &mut state, cfg, lr)?;
        }

        let train_l1 = order.iter().map(|&i| sample_loss[i]).sum::<f64>() / order.len() as f64;
        let val_l1 = match val_set {
            Some(v) => evaluate_l1(&model, v)?,
            None => f64::NAN,
        };
        if !val_l1.is_nan() && !val_l1.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss {val_l1} after epoch {epoch}"
            )));
        }
        let score = if val_set.is_some() { val_l1 } else { train_l1 };
        if best.as_ref().is_none_or(|(b, _, _)| score <= *b) {
            best = Some((score, epoch, model.clone()));
        }
        log::info!(
            "epoch {epoch}: step {} train_l1 {train_l1:.6} val_l1 {val_l1:.6}",
            state.step
        );
        history.push(EpochRecord {
            epoch,
            step: state.step,
            train_l1,
            val_l1,
        });
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&best.as_ref().expect("set above").2, path)?;
            }
        }
    }

    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model.clone(), 0),
    };
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&best_model, path)?;
    }
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

/// Worst element of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|)`, zero when both vanish.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// One entry per parameter tensor, sorted by descending relative error.
    pub entries: Vec<GradCheckEntry>,
    pub elements_checked: usize,
    /// Largest relative error among elements with `|analytic| >= abs_floor`.
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.name.as_str())
            .collect()
    }
}

fn element_passes(a: f64, n: f64, cfg: &GradCheckConfig) -> bool {
    let diff = (a - n).abs();
    if a.abs() < cfg.abs_floor {
        diff <= cfg.abs_floor
    } else {
        diff <= cfg.rel_tol * a.abs().max(n.abs())
    }
}

/// Compares every parameter's analytic L1 gradient with central differences.
pub fn grad_check(model: &Model, input: &Tensor, target: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grad(input, target)?;
    let mut probe = model.clone();
    let mut entries = Vec::new();
    let mut elements_checked = 0;
    let mut max_rel_error = 0.0f64;
    for id in model.params().ids() {
        let mut worst: Option<GradCheckEntry> = None;
        let mut tensor_passed = true;
        for i in 0..model.params().get(id).numel() {
            let orig = model.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + cfg.step;
            let up = probe.loss(input, target)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig - cfg.step;
            let down = probe.loss(input, target)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig;

            let n = (up - down) / (2.0 * cfg.step);
            let a = analytic[id.index()].data()[i];
            let scale = a.abs().max(n.abs());
            let rel_error = if scale == 0.0 { 0.0 } else { (a - n).abs() / scale };
            let passed = element_passes(a, n, cfg);
            tensor_passed &= passed;
            if a.abs() >= cfg.abs_floor {
                max_rel_error = max_rel_error.max(rel_error);
            }
            elements_checked += 1;
            let rank = |e: &GradCheckEntry| (!e.passed, e.rel_error);
            let candidate = GradCheckEntry {
                name: model.params().name(id).to_owned(),
                index: i,
                analytic: a,
                numeric: n,
                rel_error,
                passed,
            };
            if worst.as_ref().is_none_or(|w| rank(&candidate) > rank(w)) {
                worst = Some(candidate);
            }
        }
        if let Some(mut w) = worst {
            w.passed = tensor_passed;
            entries.push(w);
        }
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradCheckReport {
        entries,
        elements_checked,
        max_rel_error,
    })
}
