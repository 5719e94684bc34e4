use proq_core::cohort::build_cohort;
use proq_core::outcome::{label_cohort, FOLLOWUP_GRID};
use proq_core::synth::{generate, SynthConfig};
use proq_core::{CohortConfig, Dataset, Label, TaskSpec};

fn dataset(cfg: &SynthConfig) -> Dataset {
    let out = generate(cfg).unwrap();
    Dataset::from_records(out.persons, out.visits, out.events, 2026).unwrap()
}

#[test]
fn cohort_admission_and_case_fraction() {
    let ds = dataset(&SynthConfig::default());
    let cohort = build_cohort(&ds, &CohortConfig::default()).unwrap();
    let admitted = cohort.len() as f64 / ds.n_persons() as f64;
    let labeled = label_cohort(&cohort, TaskSpec::new(365, 365).unwrap());
    let cases = labeled.iter().filter(|e| e.label == Label::Case).count();
    let frac = cases as f64 / labeled.len() as f64;
    println!("admitted {admitted:.4} labeled {} case fraction {frac:.4}", labeled.len());
    for f in FOLLOWUP_GRID {
        let l = label_cohort(&cohort, TaskSpec::new(f, 365).unwrap());
        let c = l.iter().filter(|e| e.label == Label::Case).count();
        println!("F={f}: {} labeled, {c} cases", l.len());
    }
    assert!(admitted >= 0.95);
    assert!((frac - 0.3).abs() <= 0.10);
}
