//! Losses, the NAdam optimizer, and the pre-train / fine-tune loops.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::Mode;
use crate::data::{DatasetSplit, EvalCase, ItemCatalog};
use crate::error::{Error, Result};
use crate::eval::evaluate_cases;
use crate::model::{candidate_reprs, forward_user, ModelConfig, ModelParams};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// Optimization hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global-norm clip threshold; zero or negative disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 64, epochs: 40, patience: 10, seed: 0, grad_clip: 5.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for in-batch negatives".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// In-batch cross-entropy: every user's own target is the positive, the other
/// targets in the batch are negatives. Duplicate targets are not masked; the
/// collision count is returned so their frequency stays observable.
pub fn inbatch_ce_loss(
    tape: &Tape,
    user_reprs: &Tensor,
    target_reprs: &Tensor,
    target_ids: &[usize],
    tau: f32,
) -> Result<(Tensor, usize)> {
    let (b, _) = user_reprs
        .shape()
        .as_matrix()
        .ok_or_else(|| Error::shape("inbatch_ce_loss", user_reprs.shape(), "rank-2"))?;
    if b < 2 {
        return Err(Error::Contract { op: "inbatch_ce_loss", msg: format!("batch size {b} < 2") });
    }
    if target_reprs.shape() != user_reprs.shape() || target_ids.len() != b {
        return Err(Error::shape("inbatch_ce_loss", user_reprs.shape(), target_reprs.shape()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let collisions = target_ids.iter().filter(|id| !seen.insert(**id)).count();

    let scores = tape.matmul(user_reprs, &tape.transpose(target_reprs)?)?;
    let scaled = tape.scale(&scores, 1.0 / tau);
    let lse = tape.logsumexp_rows(&scaled)?;
    let diag: Vec<usize> = (0..b).collect();
    let own = tape.gather_elems(&scaled, &diag)?;
    let per_user = tape.sub(&lse, &own)?;
    Ok((tape.mean(&per_user), collisions))
}

/// Full-corpus cross-entropy from precomputed candidate scores; the target
/// position indexes the score vector.
pub fn fullcorpus_ce_from_scores(tape: &Tape, scores: &Tensor, target_pos: usize, tau: f32) -> Result<Tensor> {
    let m = scores.numel();
    if target_pos >= m {
        return Err(Error::ItemIndexRange { index: target_pos, size: m });
    }
    let row = tape.reshape(scores, &[1, m])?;
    let scaled = tape.scale(&row, 1.0 / tau);
    let lse = tape.logsumexp_rows(&scaled)?;
    let own = tape.gather_elems(&scaled, &[target_pos])?;
    let diff = tape.sub(&lse, &own)?;
    Ok(tape.mean(&diff))
}

/// Full-corpus cross-entropy of one user against the whole catalog.
pub fn fullcorpus_ce_loss(
    tape: &Tape,
    u: &Tensor,
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    target_idx: usize,
) -> Result<Tensor> {
    if target_idx == 0 || target_idx > catalog.len() {
        return Err(Error::ItemIndexRange { index: target_idx, size: catalog.len() });
    }
    let all_ids: Vec<usize> = (1..=catalog.len()).collect();
    let scores = crate::model::score_candidates(tape, u, catalog, params, cfg, &all_ids)?;
    fullcorpus_ce_from_scores(tape, &scores, target_idx - 1, cfg.tau)
}

/// NAdam state: first/second moments plus the momentum-schedule product.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
    mu_product: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            mu_product: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_decay: 0.004,
        }
    }
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.momentum_decay))
    }
}

/// Rescale gradients to a maximum global L2 norm. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f32) -> f64 {
    let norm: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm as f64 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One NAdam update over every parameter with a gradient entry; deterministic
/// given the state.
pub fn nadam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let mu_t = state.mu(t);
    let mu_next = state.mu(t + 1);
    let mu_product_t = state.mu_product * mu_t;
    let mu_product_next = mu_product_t * mu_next;
    state.mu_product = mu_product_t;
    let bias2 = 1.0 - state.beta2.powi(t as i32);

    for (name, g) in grads {
        let p = params.get(name)?;
        if p.numel() != g.len() {
            return Err(Error::shape("nadam_step", p.numel(), g.len()));
        }
        let dims = p.dims().to_vec();
        let mut data = p.data().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = state.beta1 * m[i] as f64 + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v[i] as f64 + (1.0 - state.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat =
                mu_next * mi / (1.0 - mu_product_next) + (1.0 - mu_t) * gi / (1.0 - mu_product_t);
            let v_hat = vi / bias2;
            data[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + state.eps)) as f32;
        }
        let _ = dims;
        params.set_data(name, data)?;
    }
    Ok(())
}

/// Gradient map over canonical parameter names; parameters the loss never
/// touched get zeros.
pub fn gradient_map(watched: &ModelParams, grads: &Gradients) -> BTreeMap<String, Vec<f32>> {
    watched
        .entries()
        .map(|(name, t)| {
            let g = grads
                .wrt(t)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), g)
        })
        .collect()
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochLogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub ndcg10: Option<f64>,
    pub recall10: Option<f64>,
    pub seconds: f64,
}

/// Everything a training run reports back.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<EpochLogRecord>,
    pub epochs_run: usize,
    pub target_collisions: usize,
    pub final_loss: f64,
}

/// Convergence summary of a fine-tuning run.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    pub epochs_to_best: usize,
    pub seconds_per_epoch: f64,
}

fn forward_batch(
    tape: &Tape,
    batch: &[&EvalCase],
    catalog: &ItemCatalog,
    watched: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Result<(Tensor, Vec<usize>)> {
    let mut reprs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for case in batch {
        let (u, _) = forward_user(tape, &case.prefix, catalog, watched, cfg, mode)?;
        reprs.push(u);
        targets.push(case.target);
    }
    let refs: Vec<&Tensor> = reprs.iter().collect();
    Ok((tape.concat_rows(&refs)?, targets))
}

fn train_step_inbatch(
    batch: &[&EvalCase],
    catalog: &ItemCatalog,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    opt: &mut OptimizerState,
    dropout_rng: &RefCell<ChaCha8Rng>,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let watched = params.watched(&tape);
    let mode = Mode::Train { dropout: cfg.dropout, rng: dropout_rng };
    let (users, targets) = forward_batch(&tape, batch, catalog, &watched, cfg, mode)?;
    let target_reprs = candidate_reprs(&tape, catalog, &watched, cfg, &targets)?;
    let (loss, collisions) = inbatch_ce_loss(&tape, &users, &target_reprs, &targets, cfg.tau)?;
    let loss_value = loss.item() as f64;
    let grads = tape.backward(&loss)?;
    let mut gm = gradient_map(&watched, &grads);
    clip_global_norm(&mut gm, tcfg.grad_clip);
    nadam_step(params, &gm, opt, tcfg.lr)?;
    Ok((loss_value, collisions))
}

fn train_step_fullcorpus(
    batch: &[&EvalCase],
    catalog: &ItemCatalog,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    opt: &mut OptimizerState,
    dropout_rng: &RefCell<ChaCha8Rng>,
) -> Result<f64> {
    let tape = Tape::new();
    let watched = params.watched(&tape);
    let mode = Mode::Train { dropout: cfg.dropout, rng: dropout_rng };
    let all_ids: Vec<usize> = (1..=catalog.len()).collect();
    let all_reprs = candidate_reprs(&tape, catalog, &watched, cfg, &all_ids)?;
    let reprs_t = tape.transpose(&all_reprs)?;

    let mut losses = Vec::with_capacity(batch.len());
    for case in batch {
        let (u, _) = forward_user(&tape, &case.prefix, catalog, &watched, cfg, mode)?;
        let scores = tape.matmul(&u, &reprs_t)?;
        let loss = fullcorpus_ce_from_scores(&tape, &scores, case.target - 1, cfg.tau)?;
        losses.push(loss);
    }
    let refs: Vec<&Tensor> = losses.iter().collect();
    let stacked = tape.concat_rows(
        &refs
            .iter()
            .map(|t| tape.reshape(t, &[1, 1]))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .collect::<Vec<_>>(),
    )?;
    let loss = tape.mean(&stacked);
    let loss_value = loss.item() as f64;
    let grads = tape.backward(&loss)?;
    let mut gm = gradient_map(&watched, &grads);
    clip_global_norm(&mut gm, tcfg.grad_clip);
    nadam_step(params, &gm, opt, tcfg.lr)?;
    Ok(loss_value)
}

/// Pre-training: shuffled mini-batches under the in-batch objective for a
/// fixed number of epochs. `save_epoch` is invoked after every epoch with the
/// current parameters (checkpoint plumbing lives with the caller).
pub fn run_pretrain(
    split: &DatasetSplit,
    catalog: &ItemCatalog,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut save_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    cfg.validate()?;
    let examples = split.train_examples();
    if examples.len() < 2 {
        return Err(Error::Contract {
            op: "run_pretrain",
            msg: format!("need at least 2 training examples, got {}", examples.len()),
        });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1)));
    let mut opt = OptimizerState::new();
    let mut outcome = TrainOutcome::default();

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a singleton batch has no negatives
            }
            let batch: Vec<&EvalCase> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, collisions) =
                train_step_inbatch(&batch, catalog, params, cfg, tcfg, &mut opt, &dropout_rng)?;
            epoch_loss += loss;
            outcome.target_collisions += collisions;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;
        outcome.log.push(EpochLogRecord {
            epoch,
            split: "train".into(),
            loss: Some(mean_loss),
            ndcg10: None,
            recall10: None,
            seconds: started.elapsed().as_secs_f64(),
        });
        outcome.final_loss = mean_loss;
        outcome.epochs_run = epoch;
        save_epoch(epoch, params)?;
    }
    Ok(outcome)
}

/// Fine-tuning: full-corpus objective with early stopping on validation
/// NDCG@10. The parameters left in `params` are the best-epoch snapshot.
pub fn run_finetune(
    split: &DatasetSplit,
    catalog: &ItemCatalog,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ConvergenceReport, TrainOutcome)> {
    tcfg.validate()?;
    cfg.validate()?;
    let examples = split.train_examples();
    if examples.is_empty() {
        return Err(Error::Contract { op: "run_finetune", msg: "no training examples".into() });
    }
    if split.valid.is_empty() {
        return Err(Error::Contract { op: "run_finetune", msg: "empty validation split".into() });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1)));
    let mut opt = OptimizerState::new();
    let mut outcome = TrainOutcome::default();

    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut strikes = 0usize;
    let mut train_seconds = 0.0f64;

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size.max(1)) {
            let batch: Vec<&EvalCase> = chunk.iter().map(|&i| &examples[i]).collect();
            epoch_loss +=
                train_step_fullcorpus(&batch, catalog, params, cfg, tcfg, &mut opt, &dropout_rng)?;
            batches += 1;
        }
        let train_elapsed = started.elapsed().as_secs_f64();
        train_seconds += train_elapsed;
        let mean_loss = epoch_loss / batches.max(1) as f64;
        outcome.log.push(EpochLogRecord {
            epoch,
            split: "train".into(),
            loss: Some(mean_loss),
            ndcg10: None,
            recall10: None,
            seconds: train_elapsed,
        });
        outcome.final_loss = mean_loss;
        outcome.epochs_run = epoch;

        let eval_started = Instant::now();
        let report = evaluate_cases(&split.valid, catalog, params, cfg, &[10])?;
        let ndcg10 = report.ndcg(10);
        outcome.log.push(EpochLogRecord {
            epoch,
            split: "valid".into(),
            loss: None,
            ndcg10: Some(ndcg10),
            recall10: Some(report.recall(10)),
            seconds: eval_started.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().map(|(_, b, _)| ndcg10 > *b).unwrap_or(true);
        if improved {
            best = Some((epoch, ndcg10, params.clone()));
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= tcfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_ndcg10, best_params) = best.expect("at least one epoch ran");
    *params = best_params;
    let report = ConvergenceReport {
        epochs_run: outcome.epochs_run,
        best_epoch,
        best_ndcg10,
        epochs_to_best: best_epoch,
        seconds_per_epoch: train_seconds / outcome.epochs_run.max(1) as f64,
    };
    Ok((report, outcome))
}
