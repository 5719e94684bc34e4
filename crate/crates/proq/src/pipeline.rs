//! In-memory pipeline stages shared by the CLI and the tests.

use std::collections::BTreeMap;

use proq_core::cdm::{CdmError, Dataset, EventRecord};
use proq_core::cohort::{self, CohortError};
use proq_core::metrics::{MetricError, MetricReport, DEFAULT_THRESHOLD};
use proq_core::model::{ModelConfig, ModelError, ModelParams};
use proq_core::outcome::{self, end_of_day};
use proq_core::quantizer::{collect_values, QuantizerError};
use proq_core::sequencer::{self, encode, SequencerError, TimeWindow};
use proq_core::training::{self, ClassExample, EpochRecord, FinetuneOutcome, PretrainOutcome, Split, SplitPart, TrainConfig, TrainError};
use proq_core::{rng, CohortConfig, CohortMember, Date, LabeledExample, PersonId, QuantileMap, TaskSpec, TokenSequence, Vocabulary};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cdm(#[from] CdmError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{task}: {source}")]
    Metric { task: String, source: MetricError },
    #[error("pretraining corpus is empty: no train-split member has a stage-3a index")]
    EmptyCorpus,
    #[error("leakage: person {person_id} has a token at {at} after anchor {anchor}")]
    Leakage { person_id: PersonId, at: proq_core::DateTime, anchor: Date },
}

/// Events of `person_id` inside `window`, in timeline order.
pub fn slice_in<'a>(ds: &'a Dataset, person_id: PersonId, window: TimeWindow) -> Result<&'a [EventRecord], CdmError> {
    let events = ds.events_for(person_id, Some(window.end))?;
    Ok(&events[events.partition_point(|e| e.at < window.start)..])
}

pub fn assessment_window(anchor: Date, assessment_days: u32) -> TimeWindow {
    let start = anchor - chrono::TimeDelta::days(i64::from(assessment_days));
    TimeWindow { start: start.and_time(chrono::NaiveTime::MIN), end: end_of_day(anchor) }
}

pub fn tokenize_window(
    ds: &Dataset,
    qm: &QuantileMap,
    person_id: PersonId,
    window: TimeWindow,
) -> Result<TokenSequence, PipelineError> {
    let person = ds.person(person_id).ok_or(CdmError::UnknownPerson(person_id))?;
    let visits = ds.visits_of(person_id)?;
    let slice = slice_in(ds, person_id, window)?;
    Ok(sequencer::tokenize(slice, person, &visits, qm, window)?)
}

pub fn tokenize_example(ds: &Dataset, qm: &QuantileMap, ex: &LabeledExample) -> Result<TokenSequence, PipelineError> {
    let mut seq = tokenize_window(ds, qm, ex.person_id, TimeWindow { start: ex.window_open(), end: ex.window_close() })?;
    seq.label = Some(ex.label);
    Ok(seq)
}

/// Members with a stage-3a index, which are the only ones any task can label.
pub fn anchored(cohort: &[CohortMember]) -> impl Iterator<Item = (PersonId, Date)> + '_ {
    cohort.iter().filter_map(|m| m.stage3a_index.map(|a| (m.person_id, a)))
}

/// Unlabeled sequences over the widest assessment window, for members of one
/// split part. These form the pretraining corpus.
pub fn corpus_sequences(
    ds: &Dataset,
    cohort: &[CohortMember],
    split: &Split,
    part: SplitPart,
    qm: &QuantileMap,
    widest_assessment: u32,
) -> Result<Vec<TokenSequence>, PipelineError> {
    anchored(cohort)
        .filter(|(id, _)| split.part_of(*id) == Some(part))
        .map(|(id, anchor)| tokenize_window(ds, qm, id, assessment_window(anchor, widest_assessment)))
        .collect()
}

/// Quantile cut points from train-split measurements inside the widest
/// assessment windows.
pub fn fit_quantiles(
    ds: &Dataset,
    cohort: &[CohortMember],
    split: &Split,
    widest_assessment: u32,
) -> Result<QuantileMap, PipelineError> {
    let mut values = BTreeMap::<_, Vec<f64>>::new();
    for (id, anchor) in anchored(cohort).filter(|(id, _)| split.train.contains(id)) {
        let slice = slice_in(ds, id, assessment_window(anchor, widest_assessment))?;
        for (concept, v) in collect_values(slice) {
            values.entry(concept).or_default().extend(v);
        }
    }
    Ok(QuantileMap::fit(&values)?)
}

/// Everything derived from the dataset before any model is trained.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cohort: Vec<CohortMember>,
    pub split: Split,
    pub quantiles: QuantileMap,
    pub vocab: Vocabulary,
    pub widest_assessment: u32,
}

pub fn prepare(
    ds: &Dataset,
    cohort_cfg: &CohortConfig,
    train_cfg: &TrainConfig,
    widest_assessment: u32,
) -> Result<Prepared, PipelineError> {
    let cohort = cohort::build_cohort(ds, cohort_cfg)?;
    let ids: Vec<PersonId> = cohort.iter().map(|m| m.person_id).collect();
    let split = training::split_patients(&ids, train_cfg.split, train_cfg.seed);
    let quantiles = fit_quantiles(ds, &cohort, &split, widest_assessment)?;
    let train_corpus = corpus_sequences(ds, &cohort, &split, SplitPart::Train, &quantiles, widest_assessment)?;
    let vocab = Vocabulary::build(&train_corpus);
    Ok(Prepared { cohort, split, quantiles, vocab, widest_assessment })
}

pub fn encode_all(seqs: &[TokenSequence], vocab: &Vocabulary, max_len: usize) -> Vec<sequencer::Encoded> {
    seqs.iter().map(|s| encode(&s.tokens, vocab, max_len)).collect()
}

pub fn pretrain(
    ds: &Dataset,
    prep: &Prepared,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<PretrainOutcome, PipelineError> {
    let corpus = |part| corpus_sequences(ds, &prep.cohort, &prep.split, part, &prep.quantiles, prep.widest_assessment);
    let train = encode_all(&corpus(SplitPart::Train)?, &prep.vocab, model_cfg.max_len);
    if train.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let val = encode_all(&corpus(SplitPart::Val)?, &prep.vocab, model_cfg.max_len);
    Ok(training::pretrain(&train, &val, model_cfg, train_cfg, observer)?)
}

/// Labeled sequences of one task, grouped by split part.
#[derive(Debug, Clone, Default)]
pub struct TaskSequences {
    pub train: Vec<TokenSequence>,
    pub val: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

pub fn task_sequences(ds: &Dataset, prep: &Prepared, task: TaskSpec) -> Result<TaskSequences, PipelineError> {
    let mut out = TaskSequences::default();
    for ex in outcome::label_cohort(&prep.cohort, task) {
        let seq = tokenize_example(ds, &prep.quantiles, &ex)?;
        match prep.split.part_of(ex.person_id) {
            Some(SplitPart::Train) => out.train.push(seq),
            Some(SplitPart::Val) => out.val.push(seq),
            Some(SplitPart::Test) => out.test.push(seq),
            None => {}
        }
    }
    Ok(out)
}

pub fn class_examples(seqs: &[TokenSequence], vocab: &Vocabulary, max_len: usize) -> Vec<ClassExample> {
    seqs.iter()
        .filter_map(|s| s.label.map(|l| ClassExample { encoded: encode(&s.tokens, vocab, max_len), label: l.as_u8() }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task: TaskSpec,
    pub finetune: FinetuneOutcome,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<u8>,
    pub test_report: MetricReport,
}

pub fn finetune_task(
    pretrained: &ModelParams,
    vocab: &Vocabulary,
    seqs: &TaskSequences,
    task: TaskSpec,
    train_cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TaskResult, PipelineError> {
    let max_len = pretrained.config.max_len;
    let train = class_examples(&seqs.train, vocab, max_len);
    let val = class_examples(&seqs.val, vocab, max_len);
    let test = class_examples(&seqs.test, vocab, max_len);
    let stream = rng::finetune_stream_id(task.followup_days, task.assessment_days);
    let finetune = training::finetune(pretrained, &train, &val, train_cfg, stream, observer)?;
    let test_scores = training::predict(&finetune.params, &test, train_cfg.batch_size)?;
    let test_labels: Vec<u8> = test.iter().map(|e| e.label).collect();
    let test_report = MetricReport::compute(&test_scores, &test_labels, DEFAULT_THRESHOLD)
        .map_err(|source| PipelineError::Metric { task: task.key(), source })?;
    Ok(TaskResult { task, finetune, test_scores, test_labels, test_report })
}

/// Checks that every token time is at or before the end of its anchor day.
pub fn audit_leakage(seqs: &[TokenSequence], anchors: &BTreeMap<PersonId, Date>) -> Result<usize, PipelineError> {
    let mut checked = 0;
    for s in seqs {
        let Some(&anchor) = anchors.get(&s.person_id) else { continue };
        let close = end_of_day(anchor);
        if let Some(&at) = s.times.iter().find(|&&t| t > close) {
            return Err(PipelineError::Leakage { person_id: s.person_id, at, anchor });
        }
        checked += s.times.len();
    }
    Ok(checked)
}
