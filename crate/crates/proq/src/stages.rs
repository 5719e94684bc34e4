//! File-backed pipeline stages. Each stage reads its inputs from the data or
//! work directory and writes its outputs under the work directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proq_core::cdm::Dataset;
use proq_core::metrics::{MetricReport, DEFAULT_THRESHOLD};
use proq_core::outcome::label_cohort;
use proq_core::sequencer::encode;
use proq_core::synth;
use proq_core::training::{self, ClassExample, EpochRecord, SplitPart};
use proq_core::{rng, Domain, PersonId, TaskSpec, Vocabulary};
use thiserror::Error;

use crate::artifacts::{self, Axis, ReportRow, SequenceRecord};
use crate::cdm_csv::{self, FormatError};
use crate::checkpoint::{self, CheckpointError};
use crate::config::PipelineConfig;
use crate::pipeline::{self, PipelineError, Prepared};

#[derive(Debug, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Model(#[from] proq_core::model::ModelError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Write zero wall-clock times so logs are byte-reproducible.
    pub deterministic: bool,
    /// Re-check token timestamps against anchors after tokenizing.
    pub audit_leakage: bool,
    pub quiet: bool,
}

/// Work-directory layout.
#[derive(Debug, Clone)]
pub struct WorkDir(pub PathBuf);

impl WorkDir {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }
    pub fn summary(&self) -> PathBuf {
        self.path("dataset_summary.csv")
    }
    pub fn cohort(&self) -> PathBuf {
        self.path("cohort.csv")
    }
    pub fn split(&self) -> PathBuf {
        self.path("split.csv")
    }
    pub fn labels(&self, t: TaskSpec) -> PathBuf {
        self.path(&format!("labels/{}.csv", t.key()))
    }
    pub fn quantiles(&self) -> PathBuf {
        self.path("quantiles.txt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.path("vocab.txt")
    }
    pub fn corpus(&self, part: SplitPart) -> PathBuf {
        self.path(&format!("sequences/pretrain_{}.tsv", part_name(part)))
    }
    pub fn task_sequences(&self, t: TaskSpec, part: SplitPart) -> PathBuf {
        self.path(&format!("sequences/{}_{}.tsv", t.key(), part_name(part)))
    }
    pub fn pretrained(&self) -> PathBuf {
        self.path("pretrained.ckpt")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.path("logs/pretrain.tsv")
    }
    pub fn model(&self, t: TaskSpec) -> PathBuf {
        self.path(&format!("models/{}.ckpt", t.key()))
    }
    pub fn finetune_log(&self, t: TaskSpec) -> PathBuf {
        self.path(&format!("logs/finetune_{}.tsv", t.key()))
    }
    pub fn metrics(&self, t: TaskSpec) -> PathBuf {
        self.path(&format!("metrics/{}.csv", t.key()))
    }
    pub fn predictions(&self, t: TaskSpec) -> PathBuf {
        self.path(&format!("predictions/{}.csv", t.key()))
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.csv")
    }
}

fn part_name(p: SplitPart) -> &'static str {
    match p {
        SplitPart::Train => "train",
        SplitPart::Val => "val",
        SplitPart::Test => "test",
    }
}

const PARTS: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];

pub struct Runner {
    pub cfg: PipelineConfig,
    pub opts: RunOptions,
    pub work: WorkDir,
}

impl Runner {
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Self {
        let work = WorkDir(cfg.work_dir.clone());
        Runner { cfg, opts, work }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn dataset(&self) -> Result<Dataset, StageFailure> {
        Ok(cdm_csv::read_dataset(&self.cfg.data_dir, self.cfg.current_year)?)
    }

    fn grid(&self) -> Result<Vec<TaskSpec>, StageFailure> {
        self.cfg.grid().map_err(|e| StageFailure::Other(e.to_string()))
    }

    pub fn synth(&self) -> Result<synth::SynthCounts, StageFailure> {
        self.cfg.synth.validate()?;
        let out = synth::generate(&self.cfg.synth)?;
        cdm_csv::write_tables(&self.cfg.data_dir, &out.persons, &out.visits, &out.events)?;
        self.say(format!(
            "synth: {} persons ({} progressors), {} visits, {} events -> {}",
            out.counts.persons,
            out.counts.progressors,
            out.counts.visits,
            out.events.len(),
            self.cfg.data_dir.display()
        ));
        Ok(out.counts)
    }

    pub fn ingest(&self) -> Result<Dataset, StageFailure> {
        let ds = self.dataset()?;
        let mut text = String::from("table,rows\n");
        let _ = writeln!(text, "person,{}", ds.n_persons());
        let _ = writeln!(text, "visit_occurrence,{}", ds.n_visits());
        for d in Domain::ALL {
            let _ = writeln!(text, "{},{}", d.table(), ds.n_events_in(d));
        }
        artifacts::write_text(&self.work.summary(), &text)?;
        self.say(format!("ingest: {ds}"));
        Ok(ds)
    }

    pub fn cohort(&self) -> Result<(), StageFailure> {
        let ds = self.dataset()?;
        let cohort = proq_core::cohort::build_cohort(&ds, &self.cfg.cohort).map_err(PipelineError::from)?;
        artifacts::write_text(&self.work.cohort(), &artifacts::cohort_csv(&cohort))?;
        self.say(format!("cohort: {} of {} persons admitted", cohort.len(), ds.n_persons()));
        Ok(())
    }

    pub fn label(&self) -> Result<(), StageFailure> {
        let cohort = artifacts::read_cohort(&self.work.cohort())?;
        let ids: Vec<PersonId> = cohort.iter().map(|m| m.person_id).collect();
        let split = training::split_patients(&ids, self.cfg.finetune.split, self.cfg.seed);
        artifacts::write_text(&self.work.split(), &artifacts::split_csv(&split))?;
        for task in self.grid()? {
            let labeled = label_cohort(&cohort, task);
            let cases = labeled.iter().filter(|e| e.label == proq_core::Label::Case).count();
            artifacts::write_text(&self.work.labels(task), &artifacts::labels_csv(&labeled))?;
            self.say(format!("label {}: {} examples, {} cases", task.key(), labeled.len(), cases));
        }
        Ok(())
    }

    pub fn quantiles(&self) -> Result<(), StageFailure> {
        let ds = self.dataset()?;
        let cohort = artifacts::read_cohort(&self.work.cohort())?;
        let split = artifacts::read_split(&self.work.split())?;
        let qm = pipeline::fit_quantiles(&ds, &cohort, &split, self.cfg.widest_assessment())?;
        artifacts::write_text(&self.work.quantiles(), &artifacts::quantiles_text(&qm))?;
        self.say(format!("quantiles: {} concepts", qm.len()));
        Ok(())
    }

    fn prepared(&self) -> Result<Prepared, StageFailure> {
        let qpath = self.work.quantiles();
        Ok(Prepared {
            cohort: artifacts::read_cohort(&self.work.cohort())?,
            split: artifacts::read_split(&self.work.split())?,
            quantiles: artifacts::parse_quantiles(&qpath, &artifacts::read_text(&qpath)?)?,
            vocab: Vocabulary::build(std::iter::empty()),
            widest_assessment: self.cfg.widest_assessment(),
        })
    }

    pub fn tokenize(&self) -> Result<(), StageFailure> {
        let ds = self.dataset()?;
        let mut prep = self.prepared()?;
        let anchors: BTreeMap<PersonId, proq_core::Date> = pipeline::anchored(&prep.cohort).collect();
        let mut audited = 0;
        for part in PARTS {
            let seqs = pipeline::corpus_sequences(&ds, &prep.cohort, &prep.split, part, &prep.quantiles, prep.widest_assessment)?;
            if part == SplitPart::Train {
                prep.vocab = Vocabulary::build(&seqs);
            }
            if self.opts.audit_leakage {
                audited += pipeline::audit_leakage(&seqs, &anchors)?;
            }
            artifacts::write_text(&self.work.corpus(part), &artifacts::sequences_text(&seqs))?;
        }
        artifacts::write_text(&self.work.vocab(), &prep.vocab.to_text())?;
        for task in self.grid()? {
            let labeled = artifacts::read_labels(&self.work.labels(task))?;
            let mut by_part: BTreeMap<SplitPart, Vec<_>> = BTreeMap::new();
            for ex in &labeled {
                let seq = pipeline::tokenize_example(&ds, &prep.quantiles, ex)?;
                if self.opts.audit_leakage {
                    audited += pipeline::audit_leakage(std::slice::from_ref(&seq), &BTreeMap::from([(ex.person_id, ex.anchor)]))?;
                }
                if let Some(part) = prep.split.part_of(ex.person_id) {
                    by_part.entry(part).or_default().push(seq);
                }
            }
            for part in PARTS {
                let seqs = by_part.remove(&part).unwrap_or_default();
                artifacts::write_text(&self.work.task_sequences(task, part), &artifacts::sequences_text(&seqs))?;
            }
        }
        self.say(format!("tokenize: vocabulary of {} tokens", prep.vocab.len()));
        if self.opts.audit_leakage {
            self.say(format!("tokenize: leakage audit passed over {audited} token timestamps"));
        }
        Ok(())
    }

    fn vocab(&self) -> Result<Vocabulary, StageFailure> {
        let path = self.work.vocab();
        Ok(artifacts::parse_vocab(&path, &artifacts::read_text(&path)?)?)
    }

    fn records(&self, path: &Path) -> Result<Vec<SequenceRecord>, StageFailure> {
        Ok(artifacts::parse_sequences(path, &artifacts::read_text(path)?)?)
    }

    fn wall(&self, started: Instant) -> f64 {
        if self.opts.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        }
    }

    pub fn pretrain(&self) -> Result<(), StageFailure> {
        let vocab = self.vocab()?;
        let model_cfg = self.cfg.model.for_vocab(vocab.len());
        model_cfg.validate()?;
        let encoded = |part| -> Result<Vec<_>, StageFailure> {
            Ok(self.records(&self.work.corpus(part))?.iter().map(|r| encode(&r.tokens, &vocab, model_cfg.max_len)).collect())
        };
        let (train, val) = (encoded(SplitPart::Train)?, encoded(SplitPart::Val)?);
        let started = Instant::now();
        let mut history = Vec::new();
        let outcome = training::pretrain(&train, &val, &model_cfg, &self.cfg.pretrain, &mut |r: &EpochRecord| {
            self.say(format!("pretrain epoch {}: train {:.4}, val {:?}", r.epoch, r.train_loss, r.val_loss));
            history.push((*r, self.wall(started)));
        })?;
        let mut log = artifacts::training_log(&history, "val_loss");
        if let Some(v) = outcome.initial_val_loss {
            log.insert_str(log.find('\n').map_or(0, |i| i + 1), &format!("0\t\t{v:?}\t0.000\n"));
        }
        artifacts::write_text(&self.work.pretrain_log(), &log)?;
        checkpoint::save(&self.work.pretrained(), &outcome.params, &vocab)?;
        self.say(format!("pretrain: best epoch {}", outcome.best_epoch));
        Ok(())
    }

    fn class_examples(&self, path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<PersonId>, Vec<ClassExample>), StageFailure> {
        let mut ids = Vec::new();
        let mut out = Vec::new();
        for r in self.records(path)? {
            let label = r.label.ok_or_else(|| StageFailure::Other(format!("{}: unlabeled sequence for person {}", path.display(), r.person_id)))?;
            ids.push(r.person_id);
            out.push(ClassExample { encoded: encode(&r.tokens, vocab, max_len), label: label.as_u8() });
        }
        Ok((ids, out))
    }

    pub fn finetune(&self, task: TaskSpec) -> Result<(), StageFailure> {
        let vocab = self.vocab()?;
        let start = checkpoint::load(&self.work.pretrained(), Some(&vocab))?;
        let max_len = start.config.max_len;
        let (_, train) = self.class_examples(&self.work.task_sequences(task, SplitPart::Train), &vocab, max_len)?;
        let (_, val) = self.class_examples(&self.work.task_sequences(task, SplitPart::Val), &vocab, max_len)?;
        let started = Instant::now();
        let mut history = Vec::new();
        let stream = rng::finetune_stream_id(task.followup_days, task.assessment_days);
        let outcome = training::finetune(&start, &train, &val, &self.cfg.finetune, stream, &mut |r: &EpochRecord| {
            self.say(format!("finetune {} epoch {}: train {:.4}, val auc {:?}", task.key(), r.epoch, r.train_loss, r.val_auc));
            history.push((*r, self.wall(started)));
        })?;
        artifacts::write_text(&self.work.finetune_log(task), &artifacts::training_log(&history, "val_auc"))?;
        checkpoint::save(&self.work.model(task), &outcome.params, &vocab)?;
        Ok(())
    }

    pub fn evaluate(&self, task: TaskSpec) -> Result<MetricReport, StageFailure> {
        let vocab = self.vocab()?;
        let params = checkpoint::load(&self.work.model(task), Some(&vocab))?;
        let (ids, test) = self.class_examples(&self.work.task_sequences(task, SplitPart::Test), &vocab, params.config.max_len)?;
        let scores = training::predict(&params, &test, self.cfg.finetune.batch_size)?;
        let labels: Vec<u8> = test.iter().map(|e| e.label).collect();
        let report = MetricReport::compute(&scores, &labels, DEFAULT_THRESHOLD)
            .map_err(|source| PipelineError::Metric { task: task.key(), source })?;
        let row = ReportRow { followup: Axis::Value(task.followup_days), assessment: Axis::Value(task.assessment_days), report };
        artifacts::write_text(&self.work.metrics(task), &artifacts::report_csv(&[row]))?;
        artifacts::write_text(&self.work.predictions(task), &artifacts::predictions_csv(&ids, &labels, &scores))?;
        self.say(format!("evaluate {}: roc_auc {:.4}, pr_auc {:.4}", task.key(), report.roc_auc, report.pr_auc));
        Ok(report)
    }

    pub fn grid_run(&self) -> Result<(), StageFailure> {
        for task in self.grid()? {
            self.finetune(task)?;
            self.evaluate(task)?;
        }
        self.report().map(|_| ())
    }

    pub fn report(&self) -> Result<Vec<ReportRow>, StageFailure> {
        let mut cells = Vec::new();
        for task in self.grid()? {
            let rows = artifacts::read_report(&self.work.metrics(task))?;
            let row = rows.first().ok_or_else(|| StageFailure::Other(format!("{}: no metric row", self.work.metrics(task).display())))?;
            cells.push((task, row.report));
        }
        let rows = artifacts::summarize(&cells);
        artifacts::write_text(&self.work.report(), &artifacts::report_csv(&rows))?;
        self.say(format!("report: {} rows -> {}", rows.len(), self.work.report().display()));
        Ok(rows)
    }
}
