//! Patient-level splitting, MLM corruption, and the pretraining and
//! fine-tuning loops.
//!
//! Everything here runs on one thread and draws randomness only from the
//! streams in [`crate::rng`], so a fixed seed reproduces loss curves exactly.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::metrics::{MetricReport, DEFAULT_THRESHOLD};
use crate::model::{self, Batch, ModelConfig, ModelError, ModelParams, Objective};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::sequencer::{Encoded, MASK_ID, N_SPECIAL};
use crate::PersonId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    /// Shares of selected positions replaced by [MASK], by a random token,
    /// or left unchanged.
    pub mask_share: f64,
    pub random_share: f64,
    pub keep_share: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { mask_prob: 0.15, mask_share: 0.8, random_share: 0.1, keep_share: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.15, test: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub masking: MaskingConfig,
    pub split: SplitFractions,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Train only the classification head during fine-tuning.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 64,
            masking: MaskingConfig::default(),
            split: SplitFractions::default(),
            patience: None,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(&'static str),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training labels contain a single class ({positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("diverged in epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let s = self.split;
        let parts = [s.train, s.val, s.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config("split fractions must be in [0, 1] and sum to 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive"));
        }
        let m = self.masking;
        if !(0.0..=1.0).contains(&m.mask_prob) || ((m.mask_share + m.random_share + m.keep_share) - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config("masking probabilities are invalid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: BTreeSet<PersonId>,
    pub val: BTreeSet<PersonId>,
    pub test: BTreeSet<PersonId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn part_of(&self, id: PersonId) -> Option<SplitPart> {
        if self.train.contains(&id) {
            Some(SplitPart::Train)
        } else if self.val.contains(&id) {
            Some(SplitPart::Val)
        } else if self.test.contains(&id) {
            Some(SplitPart::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle of the distinct ids, then floor(train·n) / floor(val·n) /
/// remainder. Input order does not matter.
pub fn split_patients(ids: &[PersonId], fractions: SplitFractions, seed: u64) -> Split {
    let mut pool: Vec<PersonId> = ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    pool.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT));
    let n = pool.len() as f64;
    let n_train = libm::floor(fractions.train * n + 1e-9) as usize;
    let n_val = (libm::floor(fractions.val * n + 1e-9) as usize).min(pool.len() - n_train);
    let (train, rest) = pool.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Split {
        train: train.iter().copied().collect(),
        val: val.iter().copied().collect(),
        test: test.iter().copied().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub ids: Vec<u32>,
    pub targets: Vec<Option<u32>>,
    pub actions: Vec<Option<MaskAction>>,
}

/// BERT-style corruption. Only real, non-special positions are candidates.
pub fn apply_mlm_mask(ids: &[u32], mask: &[u8], vocab_size: usize, cfg: &MaskingConfig, rng: &mut Rng) -> MaskedRow {
    let mut out = MaskedRow { ids: ids.to_vec(), targets: alloc::vec![None; ids.len()], actions: alloc::vec![None; ids.len()] };
    for i in 0..ids.len() {
        if mask[i] == 0 || ids[i] < N_SPECIAL || !rng.random_bool(cfg.mask_prob) {
            continue;
        }
        let r: f64 = rng.random();
        let action = if r < cfg.mask_share {
            out.ids[i] = MASK_ID;
            MaskAction::Mask
        } else if r < cfg.mask_share + cfg.random_share && vocab_size as u32 > N_SPECIAL {
            out.ids[i] = rng.random_range(N_SPECIAL..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        out.targets[i] = Some(ids[i]);
        out.actions[i] = Some(action);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub initial_val_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// 0 when the returned parameters are the initialization.
    pub best_epoch: usize,
}

fn masked_batch(rows: &[MaskedRow], masks: &[&[u8]]) -> Result<Batch, ModelError> {
    let pairs: Vec<(&[u32], &[u8])> = rows.iter().zip(masks).map(|(r, m)| (r.ids.as_slice(), *m)).collect();
    let targets = rows.iter().flat_map(|r| r.targets.iter().copied()).collect();
    Ok(Batch::from_rows(&pairs)?.with_targets(targets))
}

/// Mean MLM loss over all target positions of `rows`.
fn mlm_eval(params: &ModelParams, examples: &[Encoded], rows: &[MaskedRow], batch_size: usize) -> Result<Option<f64>, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (ex_chunk, row_chunk) in examples.chunks(batch_size).zip(rows.chunks(batch_size)) {
        let n_targets = row_chunk.iter().flat_map(|r| &r.targets).flatten().count();
        if n_targets == 0 {
            continue;
        }
        let masks: Vec<&[u8]> = ex_chunk.iter().map(|e| e.mask.as_slice()).collect();
        let out = model::forward(params, &masked_batch(row_chunk, &masks)?, Objective::Mlm)?;
        total += out.loss * n_targets as f64;
        count += n_targets;
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn shuffled_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Masked-language-model pretraining from a seeded initialization.
/// Returns the parameters with the lowest validation loss (the last epoch's
/// when there is no validation data).
pub fn pretrain(
    train: &[Encoded],
    val: &[Encoded],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let vocab_size = model_cfg.vocab_size;
    let mut val_rng = rng::stream(cfg.seed, rng::STREAM_PRETRAIN_VAL_MASK);
    let val_rows: Vec<MaskedRow> =
        val.iter().map(|e| apply_mlm_mask(&e.ids, &e.mask, vocab_size, &cfg.masking, &mut val_rng)).collect();
    let initial_val_loss = mlm_eval(&params, val, &val_rows, cfg.batch_size)?;

    let mut rng = rng::stream(cfg.seed, rng::STREAM_PRETRAIN);
    let mut adam = Adam::new(cfg.adam, params.len());
    let mut best = (initial_val_loss, params.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled_order(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<MaskedRow> = chunk
                .iter()
                .map(|&i| apply_mlm_mask(&train[i].ids, &train[i].mask, vocab_size, &cfg.masking, &mut rng))
                .collect();
            if rows.iter().all(|r| r.targets.iter().all(Option::is_none)) {
                continue;
            }
            let masks: Vec<&[u8]> = chunk.iter().map(|&i| train[i].mask.as_slice()).collect();
            let batch = masked_batch(&rows, &masks)?;
            let (loss, grads) = model::loss_and_grad(&params, &batch, Objective::Mlm, Some(&mut rng))
                .map_err(|source| TrainError::Diverged { epoch, source })?;
            adam.step(&mut params.values, &grads);
            loss_sum += loss;
            n_batches += 1;
        }
        if !params.all_finite() {
            return Err(TrainError::Diverged { epoch, source: ModelError::NonFiniteLoss });
        }
        let val_loss = mlm_eval(&params, val, &val_rows, cfg.batch_size)
            .map_err(|source| TrainError::Diverged { epoch, source })?;
        let record = EpochRecord {
            epoch,
            train_loss: if n_batches > 0 { loss_sum / n_batches as f64 } else { 0.0 },
            val_loss,
            val_auc: None,
        };
        observer(&record);
        history.push(record);
        let improved = match (val_loss, best.0) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = (val_loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(PretrainOutcome { params: best.1, initial_val_loss, history, best_epoch: best.2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassExample {
    pub encoded: Encoded,
    pub label: u8,
}

/// P(case) for each example, evaluation mode.
pub fn predict(params: &ModelParams, examples: &[ClassExample], batch_size: usize) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = class_batch(chunk.iter())?;
        out.extend(model::forward(params, &batch, Objective::Classify)?.probabilities);
    }
    Ok(out)
}

fn class_batch<'a>(examples: impl Iterator<Item = &'a ClassExample> + Clone) -> Result<Batch, ModelError> {
    let rows: Vec<(&[u32], &[u8])> = examples.clone().map(|e| (e.encoded.ids.as_slice(), e.encoded.mask.as_slice())).collect();
    Ok(Batch::from_rows(&rows)?.with_labels(examples.map(|e| e.label).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub params: ModelParams,
    /// Validation metrics of the returned parameters, when validation has
    /// both classes.
    pub val_report: Option<MetricReport>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct ValScore {
    loss: Option<f64>,
    report: Option<MetricReport>,
}

impl ValScore {
    /// Higher is better: ROC-AUC when defined, otherwise negated loss.
    fn criterion(&self) -> Option<f64> {
        self.report.map(|r| r.roc_auc).or(self.loss.map(|l| -l))
    }
}

fn score_validation(params: &ModelParams, val: &[ClassExample], batch_size: usize) -> Result<ValScore, ModelError> {
    if val.is_empty() {
        return Ok(ValScore { loss: None, report: None });
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(val.len());
    for chunk in val.chunks(batch_size) {
        let out = model::forward(params, &class_batch(chunk.iter())?, Objective::Classify)?;
        loss += out.loss * chunk.len() as f64;
        probs.extend(out.probabilities);
    }
    let labels: Vec<u8> = val.iter().map(|e| e.label).collect();
    let report = MetricReport::compute(&probs, &labels, DEFAULT_THRESHOLD).ok();
    Ok(ValScore { loss: Some(loss / val.len() as f64), report })
}

/// Binary-classification fine-tuning with early stopping on validation
/// ROC-AUC. `stream_id` selects the random stream (see
/// [`rng::finetune_stream_id`]).
pub fn finetune(
    start: &ModelParams,
    train: &[ClassExample],
    val: &[ClassExample],
    cfg: &TrainConfig,
    stream_id: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let positives = train.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(TrainError::SingleClass { positives, total: train.len() });
    }
    let mut params = start.clone();
    let trainable = if cfg.freeze_encoder { params.layout.head_ranges() } else { alloc::vec![0..params.len()] };
    let mut rng = rng::stream(cfg.seed, stream_id);
    let mut adam = Adam::new(cfg.adam, params.len());

    let initial = score_validation(&params, val, cfg.batch_size)?;
    let mut best_criterion = initial.criterion();
    let mut best = (params.clone(), initial.report, 0usize);
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled_order(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = class_batch(chunk.iter().map(|&i| &train[i]))?;
            let (loss, grads) = model::loss_and_grad(&params, &batch, Objective::Classify, Some(&mut rng))
                .map_err(|source| TrainError::Diverged { epoch, source })?;
            adam.step_ranges(&mut params.values, &grads, &trainable);
            loss_sum += loss;
            n_batches += 1;
        }
        let score = score_validation(&params, val, cfg.batch_size)
            .map_err(|source| TrainError::Diverged { epoch, source })?;
        let train_loss = loss_sum / n_batches as f64;
        let record = EpochRecord { epoch, train_loss, val_loss: score.loss, val_auc: score.report.map(|r| r.roc_auc) };
        observer(&record);
        history.push(record);
        // Without validation data the latest epoch wins.
        let criterion = score.criterion();
        let improved = match (criterion, best_criterion) {
            (Some(c), Some(b)) => c > b,
            (Some(_), None) | (None, _) => true,
        };
        if improved {
            best_criterion = criterion;
            best = (params.clone(), score.report, epoch);
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(FinetuneOutcome { params: best.0, val_report: best.1, history, best_epoch: best.2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_ids_split_seven_one_two() {
        let ids: Vec<PersonId> = (0..10).collect();
        let s = split_patients(&ids, SplitFractions::default(), 5);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split_patients(&ids, SplitFractions::default(), 5));
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(s, split_patients(&reversed, SplitFractions::default(), 5));
    }

    #[test]
    fn special_only_rows_are_never_masked() {
        let ids = [1u32, 2, 2, 0, 0];
        let mask = [1u8, 1, 1, 0, 0];
        let mut rng = rng::stream(1, 1);
        for _ in 0..200 {
            let row = apply_mlm_mask(&ids, &mask, 50, &MaskingConfig::default(), &mut rng);
            assert!(row.targets.iter().all(Option::is_none));
            assert_eq!(row.ids, ids);
        }
    }

    #[test]
    fn unselected_positions_carry_no_target() {
        let ids: Vec<u32> = (5..60).collect();
        let mask = alloc::vec![1u8; ids.len()];
        let row = apply_mlm_mask(&ids, &mask, 60, &MaskingConfig::default(), &mut rng::stream(2, 2));
        for i in 0..ids.len() {
            match row.actions[i] {
                None => {
                    assert_eq!(row.targets[i], None);
                    assert_eq!(row.ids[i], ids[i]);
                }
                Some(a) => {
                    assert_eq!(row.targets[i], Some(ids[i]));
                    match a {
                        MaskAction::Mask => assert_eq!(row.ids[i], MASK_ID),
                        MaskAction::Keep => assert_eq!(row.ids[i], ids[i]),
                        MaskAction::Random => assert!(row.ids[i] >= N_SPECIAL),
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.split.test = 0.5;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
