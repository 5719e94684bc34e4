//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any hard criterion fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use chrono::{NaiveDate, TimeDelta};
use proq::cli::{run_stage, Command};
use proq::config::PipelineConfig;
use proq::pipeline::{self, Prepared};
use proq::stages::{RunOptions, Runner};
use proq_core::cohort::{persistent_above, persistent_below};
use proq_core::metrics::{confusion_metrics, pr_auc, roc_auc};
use proq_core::model::Objective;
use proq_core::outcome::{end_of_day, label_cohort};
use proq_core::quantizer::QuantileMap;
use proq_core::rng;
use proq_core::sequencer::{MASK_ID, N_SPECIAL};
use proq_core::synth::{generate, SynthConfig};
use proq_core::training::{apply_mlm_mask, MaskAction, MaskingConfig, SplitPart};
use proq_core::{Dataset, ModelParams, TaskSpec};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric_oracles() -> Outcome {
    let started = Instant::now();
    let mut r = rng::stream(1, 1);
    let mut worst = (0.0f64, 0.0f64);
    let mut confusion_mismatches = 0;
    for _ in 0..200 {
        let n = r.random_range(2..=50);
        let levels = r.random_range(2..=30u32);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / f64::from(levels)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..=1u8)).collect();
        labels[0] = 1;
        labels[1] = 0;
        worst.0 = worst.0.max((roc_auc(&scores, &labels).unwrap() - oracles::roc_auc_pairs(&scores, &labels)).abs());
        worst.1 = worst.1.max((pr_auc(&scores, &labels).unwrap() - oracles::pr_auc_exhaustive(&scores, &labels)).abs());
        let t = scores[r.random_range(0..n)];
        let c = confusion_metrics(&scores, &labels, t).unwrap();
        confusion_mismatches += usize::from((c.tp, c.fp, c.tn, c.fn_) != oracles::confusion_counts(&scores, &labels, t));
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst.0 <= 1e-12 && worst.1 <= 1e-12 && confusion_mismatches == 0 && secs < 5.0,
        format!("max |roc diff| {:.1e}, max |pr diff| {:.1e}, confusion mismatches {confusion_mismatches}, {secs:.2}s", worst.0, worst.1),
    )
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, objective, tie) in [("mlm tied", Objective::Mlm, true), ("mlm untied", Objective::Mlm, false), ("classify", Objective::Classify, true)] {
        let (params, batch) = oracles::gradient_fixture(tie);
        let g = proq_core::model::backward(&params, &batch, objective).unwrap();
        let floor = 1e-3 * g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let r = oracles::gradient_check(&params, &batch, objective, 1e-3, floor);
        ok &= r.max_rel_err < 1e-3 && r.checked == params.len();
        parts.push(format!("{name} {:.2e} over {}", r.max_rel_err, r.checked));
    }
    let secs = started.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("max rel err: {}; {secs:.1}s", parts.join(", ")))
}

fn persistence_oracle() -> Outcome {
    let mut r = rng::stream(2, 1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(0..=20);
        let mut t = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(8, 0, 0).unwrap();
        let mut series = Vec::new();
        for _ in 0..n {
            t += TimeDelta::days(r.random_range(0..70)) + TimeDelta::seconds(r.random_range(0..7200));
            series.push((t, f64::from(r.random_range(40..80u32)) - 0.5 * f64::from(r.random_range(0..2u32))));
        }
        let days: u32 = r.random_range(0..=120);
        let below = persistent_below(&series, 60.0, days).unwrap();
        let above = persistent_above(&series, 60.0, days).unwrap();
        mismatches += usize::from(below != oracles::persistence_all_pairs(&series, days.into(), |v| v < 60.0));
        mismatches += usize::from(above != oracles::persistence_all_pairs(&series, days.into(), |v| v > 60.0));
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 1000 series, both directions"))
}

fn leakage_audit(ds: &Dataset, prep: &Prepared) -> Outcome {
    let mut violations = 0usize;
    let mut tokens = 0usize;
    let mut examples = 0usize;
    for task in TaskSpec::full_grid() {
        for ex in label_cohort(&prep.cohort, task) {
            let seq = pipeline::tokenize_example(ds, &prep.quantiles, &ex).map_err(|e| e.to_string())?;
            let close = end_of_day(ex.anchor);
            violations += seq.times.iter().filter(|&&t| t > close).count();
            tokens += seq.times.len();
            examples += 1;
        }
    }
    let anchors: BTreeMap<_, _> = pipeline::anchored(&prep.cohort).collect();
    for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
        let corpus = pipeline::corpus_sequences(ds, &prep.cohort, &prep.split, part, &prep.quantiles, 730).map_err(|e| e.to_string())?;
        for s in &corpus {
            let close = end_of_day(anchors[&s.person_id]);
            violations += s.times.iter().filter(|&&t| t > close).count();
            tokens += s.times.len();
        }
    }
    check(
        violations == 0 && examples > 0,
        format!("{violations} violations over {tokens} token timestamps ({examples} labeled examples, 15 cells, plus pretraining corpus)"),
    )
}

fn masking_statistics() -> Outcome {
    let cfg = MaskingConfig::default();
    let vocab = 500usize;
    let ids: Vec<u32> = (0..100).map(|i| N_SPECIAL + i * 3).collect();
    let mask = vec![1u8; ids.len()];
    let mut r = rng::stream(42, 7);
    let (mut candidates, mut selected) = (0usize, 0usize);
    let mut actions = [0usize; 3];
    let mut malformed = 0usize;
    while candidates < 100_000 {
        let row = apply_mlm_mask(&ids, &mask, vocab, &cfg, &mut r);
        candidates += ids.len();
        for (i, a) in row.actions.iter().enumerate() {
            let Some(a) = a else { continue };
            selected += 1;
            let (slot, good) = match a {
                MaskAction::Mask => (0, row.ids[i] == MASK_ID),
                MaskAction::Random => (1, (N_SPECIAL..vocab as u32).contains(&row.ids[i])),
                MaskAction::Keep => (2, row.ids[i] == ids[i]),
            };
            actions[slot] += 1;
            malformed += usize::from(!good || row.targets[i] != Some(ids[i]));
        }
    }
    let rate = selected as f64 / candidates as f64;
    let shares = actions.map(|k| k as f64 / selected as f64);
    let ok = (rate - 0.15).abs() <= 0.01
        && (shares[0] - 0.8).abs() <= 0.02
        && (shares[1] - 0.1).abs() <= 0.02
        && (shares[2] - 0.1).abs() <= 0.02
        && malformed == 0;
    check(
        ok,
        format!(
            "selection {rate:.4} over {candidates} positions, mask/random/keep {:.3}/{:.3}/{:.3}",
            shares[0], shares[1], shares[2]
        ),
    )
}

fn quantizer_properties() -> Outcome {
    let mut r = rng::stream(3, 1);
    let mut values = BTreeMap::new();
    for c in 0..10i64 {
        let n = r.random_range(20..500);
        let scale = 10f64.powi(r.random_range(-1..4));
        values.insert(c, (0..n).map(|_| r.random_range(0.0..1.0) * scale).collect::<Vec<f64>>());
    }
    let qm = QuantileMap::fit(&values).map_err(|e| e.to_string())?;
    let mut non_monotone = 0;
    for _ in 0..1000 {
        let c = r.random_range(0..10i64);
        let spread = values[&c].iter().fold(0.0f64, |m, v| m.max(*v)) * 1.2;
        let (a, b) = (r.random_range(-0.1 * spread..spread), r.random_range(-0.1 * spread..spread));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        non_monotone += usize::from(qm.assign(c, lo).unwrap() > qm.assign(c, hi).unwrap());
    }
    let mut oracle_mismatches = 0;
    for (c, v) in &values {
        let cuts = oracles::decile_cuts(v);
        oracle_mismatches += usize::from(qm.get(*c).unwrap().cuts != cuts);
        oracle_mismatches += v.iter().filter(|&&x| qm.assign(*c, x).unwrap() != oracles::bucket_of(&cuts, x)).count();
    }
    let mut unbalanced = 0;
    for n in [10usize, 57, 100, 333, 1000] {
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731).sin() * 1e3 + i as f64 * 1e-3).collect();
        let qm = QuantileMap::fit(&BTreeMap::from([(1, v.clone())])).unwrap();
        let mut counts = [0usize; 10];
        for &x in &v {
            counts[usize::from(qm.assign(1, x).unwrap()) - 1] += 1;
        }
        unbalanced += counts.iter().filter(|&&k| k + 1 < n / 10 || k > n.div_ceil(10) + 1).count();
    }
    check(
        non_monotone == 0 && oracle_mismatches == 0 && unbalanced == 0,
        format!("{non_monotone} non-monotone probes of 1000, {oracle_mismatches} oracle mismatches, {unbalanced} unbalanced deciles"),
    )
}

struct Trained {
    pretrained: ModelParams,
}

fn end_to_end(ds: &Dataset, prep: &Prepared, cfg: &PipelineConfig, started: Instant) -> (Outcome, Option<Trained>) {
    let model_cfg = cfg.model.for_vocab(prep.vocab.len());
    let pre = match pipeline::pretrain(ds, prep, &model_cfg, &cfg.pretrain, &mut |_| {}) {
        Ok(p) => p,
        Err(e) => return (Err(format!("pretrain: {e}")), None),
    };
    let task = TaskSpec::new(365, 365).unwrap();
    let result = pipeline::task_sequences(ds, prep, task)
        .and_then(|seqs| pipeline::finetune_task(&pre.params, &prep.vocab, &seqs, task, &cfg.finetune, &mut |_| {}));
    let secs = started.elapsed().as_secs_f64();
    let outcome = match result {
        Ok(r) => check(
            r.test_report.roc_auc >= 0.85 && r.test_report.pr_auc >= 0.70 && secs <= 600.0,
            format!(
                "F365/A365 test ROC-AUC {:.4}, PR-AUC {:.4} ({} pos / {} neg), pretrain {} epochs, {secs:.0}s from synth",
                r.test_report.roc_auc, r.test_report.pr_auc, r.test_report.n_pos, r.test_report.n_neg, cfg.pretrain.epochs
            ),
        ),
        Err(e) => Err(format!("finetune: {e}")),
    };
    (outcome, Some(Trained { pretrained: pre.params }))
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("synth.n_patients=600\npretrain.epochs=1\nfinetune.epochs=2\n").unwrap();
        cfg.data_dir = tmp.path().join(name).join("data");
        cfg.work_dir = tmp.path().join(name).join("work");
        let runner = Runner::new(cfg, RunOptions { deterministic: true, audit_leakage: true, quiet: true });
        run_stage(&runner, Command::All).map_err(|(stage, e)| format!("{}: {e}", stage.name()))?;
        Ok(files_under(&runner.work.0))
    };
    let (a, b) = (run("a")?, run("b")?);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != Some(&a[*k])).collect();
    let required = ["vocab.txt", "report.csv"];
    let sequences = a.keys().filter(|k| k.starts_with("sequences")).count();
    check(
        differing.is_empty() && a.len() == b.len() && required.iter().all(|f| a.contains_key(*f)) && sequences == 48,
        format!("{} work files compared ({sequences} sequence files, vocab, report), {} differ {:?}", a.len(), differing.len(), differing),
    )
}

fn horizon_trend(ds: &Dataset, prep: &Prepared, cfg: &PipelineConfig, trained: &Trained) -> Outcome {
    let mut means = Vec::new();
    for f in [180u32, 1460] {
        let mut aucs = Vec::new();
        for a in [180u32, 365, 730] {
            let task = TaskSpec::new(f, a).unwrap();
            let r = pipeline::task_sequences(ds, prep, task)
                .and_then(|s| pipeline::finetune_task(&trained.pretrained, &prep.vocab, &s, task, &cfg.finetune, &mut |_| {}))
                .map_err(|e| format!("{}: {e}", task.key()))?;
            aucs.push(r.test_report.roc_auc);
        }
        means.push(aucs.iter().sum::<f64>() / aucs.len() as f64);
    }
    check(means[0] >= means[1], format!("mean ROC-AUC F180 {:.4} vs F1460 {:.4}", means[0], means[1]))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    // The libtest harness is off, so ignore its flags and honour only --list.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut hard_failures = 0;
    let mut report = |id: u32, name: &str, soft: bool, outcome: Outcome| {
        let (tag, detail) = match (&outcome, soft) {
            (Ok(d), _) => ("PASS", d),
            (Err(d), true) => ("WARN", d),
            (Err(d), false) => {
                hard_failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{id}] {name}: {detail}");
    };

    report(1, "metric oracle equivalence", false, guarded(metric_oracles));
    report(2, "gradient check", false, guarded(gradient_check));
    report(3, "persistence-window oracle", false, guarded(persistence_oracle));

    let started = Instant::now();
    let cfg = PipelineConfig::default();
    let synth = SynthConfig { n_patients: 2000, progressor_fraction: 0.3, seed: 42, ..cfg.synth };
    let state = guarded(|| {
        let out = generate(&synth).map_err(|e| e.to_string())?;
        let ds = Dataset::from_records(out.persons, out.visits, out.events, cfg.current_year).map_err(|e| e.to_string())?;
        let prep = pipeline::prepare(&ds, &cfg.cohort, &cfg.pretrain, cfg.widest_assessment()).map_err(|e| e.to_string())?;
        Ok((ds, prep))
    });
    match &state {
        Ok((ds, prep)) => report(4, "leakage audit", false, guarded(|| leakage_audit(ds, prep))),
        Err(e) => report(4, "leakage audit", false, Err(format!("setup failed: {e}"))),
    }
    report(5, "MLM masking statistics", false, guarded(masking_statistics));
    report(6, "quantizer properties", false, guarded(quantizer_properties));

    let mut trained = None;
    match &state {
        Ok((ds, prep)) => {
            let outcome = guarded(|| {
                let (o, t) = end_to_end(ds, prep, &cfg, started);
                trained = t;
                o
            });
            report(7, "end-to-end planted signal", false, outcome);
        }
        Err(e) => report(7, "end-to-end planted signal", false, Err(format!("setup failed: {e}"))),
    }
    report(8, "determinism", false, guarded(determinism));
    match (&state, &trained) {
        (Ok((ds, prep)), Some(t)) => report(9, "horizon trend (soft)", true, guarded(|| horizon_trend(ds, prep, &cfg, t))),
        _ => report(9, "horizon trend (soft)", true, Err("no pretrained model from criterion 7".into())),
    }

    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
