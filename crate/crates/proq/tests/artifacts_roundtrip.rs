use std::collections::BTreeMap;

use proq::artifacts::*;
use proq::checkpoint::{self, CheckpointError};
use proq::pipeline;
use proq_core::cohort::build_cohort;
use proq_core::metrics::MetricReport;
use proq_core::outcome::label_cohort;
use proq_core::synth::{generate, SynthConfig};
use proq_core::training::{split_patients, SplitFractions};
use proq_core::{CohortConfig, Dataset, ModelConfig, ModelParams, QuantileMap, TaskSpec, Vocabulary};

fn dataset() -> Dataset {
    let out = generate(&SynthConfig { n_patients: 80, seed: 21, ..SynthConfig::default() }).unwrap();
    Dataset::from_records(out.persons, out.visits, out.events, 2026).unwrap()
}

#[test]
fn tabular_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset();
    let cohort = build_cohort(&ds, &CohortConfig::default()).unwrap();
    assert!(!cohort.is_empty());
    let p = dir.path().join("cohort.csv");
    write_text(&p, &cohort_csv(&cohort)).unwrap();
    assert_eq!(read_cohort(&p).unwrap(), cohort);

    let labels = label_cohort(&cohort, TaskSpec::new(365, 180).unwrap());
    let p = dir.path().join("labels/F365_A180.csv");
    write_text(&p, &labels_csv(&labels)).unwrap();
    assert_eq!(read_labels(&p).unwrap(), labels);

    let ids: Vec<_> = cohort.iter().map(|m| m.person_id).collect();
    let split = split_patients(&ids, SplitFractions::default(), 4);
    let p = dir.path().join("split.csv");
    write_text(&p, &split_csv(&split)).unwrap();
    assert_eq!(read_split(&p).unwrap(), split);
}

#[test]
fn quantiles_vocab_and_sequences_round_trip() {
    let ds = dataset();
    let qm = QuantileMap::fit(&proq_core::quantizer::collect_values(ds.events())).unwrap();
    let path = std::path::Path::new("quantiles.txt");
    assert_eq!(parse_quantiles(path, &quantiles_text(&qm)).unwrap().iter().map(|(c, q)| (c, q.cuts)).collect::<Vec<_>>(),
        qm.iter().map(|(c, q)| (c, q.cuts)).collect::<Vec<_>>());

    let cohort = build_cohort(&ds, &CohortConfig::default()).unwrap();
    let labels = label_cohort(&cohort, TaskSpec::new(180, 365).unwrap());
    let seqs: Vec<_> = labels.iter().map(|ex| pipeline::tokenize_example(&ds, &qm, ex).unwrap()).collect();
    let vocab = Vocabulary::build(&seqs);
    assert_eq!(parse_vocab(path, &vocab.to_text()).unwrap(), vocab);

    let back = parse_sequences(path, &sequences_text(&seqs)).unwrap();
    assert_eq!(back.len(), seqs.len());
    for (r, s) in back.iter().zip(&seqs) {
        assert_eq!((r.person_id, r.label, &r.tokens), (s.person_id, s.label, &s.tokens));
    }
}

#[test]
fn malformed_sequence_lines_report_their_line() {
    let p = std::path::Path::new("seq.tsv");
    let err = parse_sequences(p, "1\t\t[CLS] GENDER_F\n2\t1\t[CLS] NOT_A_TOKEN\n").unwrap_err();
    assert!(err.to_string().starts_with("seq.tsv:2:"), "{err}");
    assert!(parse_sequences(p, "1\t2\t[CLS]\n").is_err());
    assert!(parse_quantiles(p, "5,1,2,3\n").is_err());
    assert!(parse_quantiles(p, "5,9,8,7,6,5,4,3,2,1\n").is_err());
}

fn report(auc: f64, n_pos: usize) -> MetricReport {
    MetricReport {
        roc_auc: auc,
        pr_auc: auc * 0.9,
        accuracy: 0.8,
        specificity: 0.7,
        precision: 0.6,
        recall: 0.5,
        f1: 0.55,
        threshold: 0.5,
        n_pos,
        n_neg: 40,
        degenerate: false,
    }
}

#[test]
fn summary_rows_are_means_of_their_cells() {
    let cells: Vec<(TaskSpec, MetricReport)> = [(365, 180, 0.8), (180, 180, 0.9), (180, 365, 0.7), (365, 365, 0.6)]
        .iter()
        .enumerate()
        .map(|(i, &(f, a, auc))| (TaskSpec::new(f, a).unwrap(), report(auc, 10 + i)))
        .collect();
    let rows = summarize(&cells);
    let keys: Vec<(Axis, Axis)> = rows.iter().map(|r| (r.followup, r.assessment)).collect();
    use Axis::{Mean, Value as V};
    assert_eq!(
        keys,
        vec![
            (V(180), V(180)),
            (V(180), V(365)),
            (V(365), V(180)),
            (V(365), V(365)),
            (V(180), Mean),
            (V(365), Mean),
            (Mean, V(180)),
            (Mean, V(365)),
            (Mean, Mean)
        ]
    );
    let by_key: BTreeMap<_, _> = rows.iter().map(|r| ((r.followup, r.assessment), r.report.roc_auc)).collect();
    assert!((by_key[&(V(180), Mean)] - 0.8).abs() < 1e-12);
    assert!((by_key[&(Mean, V(365))] - 0.65).abs() < 1e-12);
    assert!((by_key[&(Mean, Mean)] - 0.75).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.csv");
    write_text(&p, &report_csv(&rows)).unwrap();
    assert_eq!(read_report(&p).unwrap(), rows);
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let vocab = Vocabulary::from_lines(["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "GENDER_F", "C_5"]).unwrap();
    let cfg = ModelConfig { max_len: 16, ..ModelConfig::desk_scale(vocab.len()) };
    let params = ModelParams::init(&cfg, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&p, &params, &vocab).unwrap();
    assert_eq!(checkpoint::load(&p, Some(&vocab)).unwrap(), params);

    let other = Vocabulary::from_lines(["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "GENDER_M", "C_5"]).unwrap();
    assert!(matches!(checkpoint::load(&p, Some(&other)), Err(CheckpointError::VocabMismatch { .. })));
    assert!(checkpoint::load(&p, None).is_ok());

    let text = std::fs::read_to_string(&p).unwrap();
    let renamed = text.replacen("tensor pos_emb", "tensor wrong", 1);
    assert!(matches!(checkpoint::from_text("x", &renamed, None), Err(CheckpointError::TensorOrder { .. })));
    let reshaped = text.replacen("tensor pos_emb 16 32", "tensor pos_emb 15 32", 1);
    assert!(matches!(checkpoint::from_text("x", &reshaped, None), Err(CheckpointError::Shape { .. })));
    let truncated: String = text.lines().take(14).collect::<Vec<_>>().join("\n");
    assert!(matches!(checkpoint::from_text("x", &truncated, None), Err(CheckpointError::Malformed { .. })));
}
