use proq_core::rng;
use proq_core::sequencer::N_SPECIAL;
use proq_core::training::{apply_mlm_mask, MaskAction, MaskingConfig};

#[test]
fn selection_rate_and_action_split() {
    let cfg = MaskingConfig::default();
    let vocab = 300usize;
    let len = 128;
    let ids: Vec<u32> = (0..len).map(|i| N_SPECIAL + (i as u32 * 7) % (vocab as u32 - N_SPECIAL)).collect();
    let mask = vec![1u8; len];
    let mut r = rng::stream(42, 99);
    let (mut candidates, mut selected) = (0usize, 0usize);
    let mut actions = [0usize; 3];
    while candidates < 200_000 {
        let row = apply_mlm_mask(&ids, &mask, vocab, &cfg, &mut r);
        candidates += len;
        for i in 0..len {
            match row.actions[i] {
                None => {
                    assert_eq!((row.ids[i], row.targets[i]), (ids[i], None));
                }
                Some(a) => {
                    selected += 1;
                    assert_eq!(row.targets[i], Some(ids[i]));
                    let slot = match a {
                        MaskAction::Mask => {
                            assert_eq!(row.ids[i], proq_core::sequencer::MASK_ID);
                            0
                        }
                        MaskAction::Random => {
                            assert!((N_SPECIAL..vocab as u32).contains(&row.ids[i]));
                            1
                        }
                        MaskAction::Keep => {
                            assert_eq!(row.ids[i], ids[i]);
                            2
                        }
                    };
                    actions[slot] += 1;
                }
            }
        }
    }
    let rate = selected as f64 / candidates as f64;
    assert!((rate - 0.15).abs() <= 0.01, "selection rate {rate}");
    for (k, want) in actions.iter().zip([0.8, 0.1, 0.1]) {
        let share = *k as f64 / selected as f64;
        assert!((share - want).abs() <= 0.02, "{actions:?}");
    }
}

#[test]
fn padding_and_specials_are_never_selected() {
    let cfg = MaskingConfig { mask_prob: 1.0, ..MaskingConfig::default() };
    let ids = [1, 9, 2, 3, 10, 0, 0];
    let mask = [1, 1, 1, 1, 1, 0, 0];
    let row = apply_mlm_mask(&ids, &mask, 20, &cfg, &mut rng::stream(1, 1));
    let chosen: Vec<usize> = (0..ids.len()).filter(|&i| row.actions[i].is_some()).collect();
    assert_eq!(chosen, vec![1, 4]);
}
