//! Optimizer, stopping rule and the per-stage training loop.

mod adamw;

pub use adamw::{collect_grads, AdamW, AdamWConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, SliceSet};
use crate::error::{Error, Result};
use crate::models::{ForwardOptions, Model};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub augment: bool,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Slices drawn per patient and epoch; all slices when `None`.
    pub slices_per_patient: Option<usize>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            batch_size: 8,
            patience: 10,
            augment: true,
            seed: 0,
            optimizer: AdamWConfig::default(),
            slices_per_patient: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Weights with the lowest validation loss.
    pub model: Model<f32>,
    /// Optimizer state at the best epoch.
    pub optimizer: AdamW<f32>,
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if pred.numel() == 0 {
        return Err(Error::InvalidArgument("l1 loss of empty tensors".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

/// True iff the lowest loss (earliest on ties) lies more than `patience`
/// epochs before the latest one.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if b <= v => acc,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best.0 > patience
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_l1,val_l1\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_l1, r.val_l1));
    }
    s
}

fn forward_batch(
    model: &mut Model<f32>,
    tape: &mut Tape<f32>,
    b: &Batch,
    train: bool,
) -> Result<(crate::Var, crate::Var)> {
    let x = tape.constant(b.input.clone());
    let s = b.latent.as_ref().map(|l| tape.constant(l.clone()));
    let y = tape.constant(b.target.clone());
    let out = model.forward(tape, x, s, train, ForwardOptions::default())?;
    Ok((out, y))
}

/// Eval-mode L1 over every slice of `set`, weighted by batch size.
pub fn evaluate_l1(model: &mut Model<f32>, set: &SliceSet<'_>, batch_size: usize) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in set.batches(batch_size)? {
        let b = b?;
        let mut tape = Tape::new();
        let (out, y) = forward_batch(model, &mut tape, &b, false)?;
        let rows = b.keys.len();
        total += l1_loss(tape.value(out), tape.value(y))? * rows as f64;
        n += rows;
    }
    Ok(total / n as f64)
}

fn epoch_order(set: &SliceSet<'_>, plan: &TrainPlan, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = match plan.slices_per_patient {
        None => (0..set.len()).collect(),
        Some(k) => set
            .positions_by_patient()
            .into_iter()
            .flat_map(|mut p| {
                p.shuffle(rng);
                p.truncate(k);
                p
            })
            .collect(),
    };
    order.shuffle(rng);
    order
}

/// Trains with L1 loss and AdamW, keeping the weights of the best
/// validation epoch.
pub fn train_stage(
    mut model: Model<f32>,
    plan: &TrainPlan,
    train: &SliceSet<'_>,
    val: &SliceSet<'_>,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation splits must be nonempty".into(),
        ));
    }
    if plan.max_epochs == 0 || plan.batch_size == 0 || plan.slices_per_patient == Some(0) {
        return Err(Error::InvalidArgument(
            "epochs, batch size and slices per patient must be positive".into(),
        ));
    }
    let mut opt = AdamW::new(plan.optimizer.clone(), model.params());
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>, AdamW<f32>)> = None;
    let mut stopped_early = false;
    for epoch in 1..=plan.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(epoch as u64);
        let order = epoch_order(train, plan, &mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(plan.batch_size) {
            let b = train.batch(chunk, plan.augment.then_some(&mut rng))?;
            let mut tape = Tape::new();
            let (out, y) = forward_batch(&mut model, &mut tape, &b, true)?;
            let loss = tape.l1_loss(out, y)?;
            total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            seen += chunk.len();
            tape.backward(loss)?;
            let grads = collect_grads(&tape, model.params());
            opt.step(model.params_mut(), &grads)?;
        }
        let val_l1 = evaluate_l1(&mut model, val, plan.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_l1: total / seen as f64,
            val_l1,
        };
        log::info!("epoch {epoch}: train_l1 {:.6} val_l1 {:.6}", rec.train_l1, rec.val_l1);
        history.push(rec);
        if best.as_ref().is_none_or(|b| val_l1 < b.1) {
            best = Some((epoch, val_l1, model.clone(), opt.clone()));
        }
        let vals: Vec<f64> = history.iter().map(|r| r.val_l1).collect();
        if early_stop(&vals, plan.patience) {
            stopped_early = epoch < plan.max_epochs;
            break;
        }
    }
    let (best_epoch, _, model, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_epoch,
        stopped_early,
        model,
        optimizer,
    })
}
