use proptest::prelude::*;
use proq_core::cdm::Dataset;
use proq_core::outcome::{assessment_slice, label_cohort, TaskSpec};
use proq_core::sequencer::{TimeBucket, MAX_AGE};
use proq_core::synth::{generate, SynthConfig};
use proq_core::{CohortConfig, Domain, Gender, Token, VisitType};
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn token() -> impl Strategy<Value = Token> {
    prop_oneof![
        prop::sample::select(Token::SPECIALS.to_vec()),
        prop::sample::select(vec![Gender::Male, Gender::Female, Gender::Unknown]).prop_map(Token::Gender),
        (0..=MAX_AGE).prop_map(Token::Age),
        prop::sample::select(VisitType::ALL.to_vec()).prop_map(Token::VisitStart),
        prop::sample::select(VisitType::ALL.to_vec()).prop_map(Token::VisitEnd),
        prop::sample::select(Domain::ALL.to_vec()).prop_map(Token::Domain),
        any::<i64>().prop_filter("i64::MIN has no canonical magnitude", |c| *c != i64::MIN).prop_map(Token::Concept),
        (1u8..=10).prop_map(Token::Quantile),
        prop::sample::select(TimeBucket::ALL.to_vec()).prop_map(Token::Time),
    ]
}

proptest! {
    #[test]
    fn token_text_round_trips(t in token()) {
        prop_assert_eq!(t.to_string().parse::<Token>().unwrap(), t);
    }
}

#[test]
fn non_canonical_spellings_are_rejected() {
    for s in ["AGE_07", "AGE_120", "Q0", "Q11", "C_", "C_-0", "C_+5", "C_007", "VS_XX", "TIME_", "cls", ""] {
        assert!(s.parse::<Token>().is_err(), "{s}");
    }
}

fn small_dataset(seed: u64) -> Dataset {
    let out = generate(&SynthConfig { n_patients: 120, seed, ..SynthConfig::default() }).unwrap();
    Dataset::from_records(out.persons, out.visits, out.events, 2026).unwrap()
}

#[test]
fn timelines_do_not_depend_on_input_order() {
    let out = generate(&SynthConfig { n_patients: 60, seed: 9, ..SynthConfig::default() }).unwrap();
    let ds = Dataset::from_records(out.persons.clone(), out.visits.clone(), out.events.clone(), 2026).unwrap();
    let mut events = out.events.clone();
    let mut visits = out.visits.clone();
    let mut persons = out.persons.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    events.shuffle(&mut rng);
    visits.shuffle(&mut rng);
    persons.shuffle(&mut rng);
    let shuffled = Dataset::from_records(persons, visits, events, 2026).unwrap();
    for p in ds.person_ids() {
        let a = ds.events_for(p, None).unwrap();
        assert_eq!(a, shuffled.events_for(p, None).unwrap());
        // Oracle: a fresh sort by (time, domain, concept, event id).
        let mut want: Vec<_> = out.events.iter().filter(|e| e.person_id == p).cloned().collect();
        want.sort_by_key(|e| (e.at, e.domain, e.concept_id, e.event_id));
        assert_eq!(a, want.as_slice());
    }
}

#[test]
fn assessment_slice_matches_filter() {
    let ds = small_dataset(4);
    let cohort = proq_core::cohort::build_cohort(&ds, &CohortConfig::default()).unwrap();
    let mut checked = 0;
    for task in TaskSpec::full_grid() {
        for ex in label_cohort(&cohort, task) {
            let slice = assessment_slice(&ds, &ex).unwrap();
            let want: Vec<_> = ds
                .events_for(ex.person_id, None)
                .unwrap()
                .iter()
                .filter(|e| e.at >= ex.window_open() && e.at <= ex.window_close())
                .cloned()
                .collect();
            assert_eq!(slice, want.as_slice());
            checked += 1;
        }
    }
    assert!(checked > 100);
}
