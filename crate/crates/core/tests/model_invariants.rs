use proq_core::model::{attention_maps, backward, forward, Batch, ModelConfig, ModelParams, Objective};

fn params() -> ModelParams {
    let cfg = ModelConfig { max_len: 12, dropout_p: 0.0, ..ModelConfig::desk_scale(24) };
    ModelParams::init(&cfg, 3).unwrap()
}

fn rows() -> Vec<(Vec<u32>, Vec<u8>)> {
    let mk = |ids: &[u32]| {
        let mut v = ids.to_vec();
        let mask: Vec<u8> = (0..12).map(|i| u8::from(i < ids.len())).collect();
        v.resize(12, 0);
        (v, mask)
    };
    vec![mk(&[1, 5, 9, 2, 7]), mk(&[1, 6, 2, 8, 8, 10, 11, 2, 19, 20, 21, 22]), mk(&[1, 12, 2])]
}

fn batch(order: &[usize], labels: &[u8]) -> Batch {
    let r = rows();
    let refs: Vec<(&[u32], &[u8])> = order.iter().map(|&i| (r[i].0.as_slice(), r[i].1.as_slice())).collect();
    let mut targets = Vec::new();
    for &i in order {
        let mut t = vec![None; 12];
        t[1] = Some(r[i].0[1] + 1);
        targets.extend(t);
    }
    Batch::from_rows(&refs).unwrap().with_targets(targets).with_labels(order.iter().map(|&i| labels[i]).collect())
}

#[test]
fn attention_rows_sum_to_one_over_real_keys() {
    let p = params();
    for (ids, mask) in rows() {
        let n = mask.iter().filter(|&&m| m == 1).count();
        for layer in attention_maps(&p, &ids, &mask) {
            for head in layer {
                assert_eq!(head.len(), n * n);
                for q in 0..n {
                    let s: f64 = head[q * n..(q + 1) * n].iter().sum();
                    assert!((s - 1.0).abs() <= 1e-6, "{s}");
                }
            }
        }
    }
}

#[test]
fn permuting_the_batch_permutes_outputs() {
    let p = params();
    let labels = [1, 0, 1];
    let a = forward(&p, &batch(&[0, 1, 2], &labels), Objective::Classify).unwrap();
    let b = forward(&p, &batch(&[2, 0, 1], &labels), Objective::Classify).unwrap();
    assert_eq!(b.probabilities, vec![a.probabilities[2], a.probabilities[0], a.probabilities[1]]);
    assert!((a.loss - b.loss).abs() < 1e-12);
}

#[test]
fn evaluation_is_bit_identical() {
    let p = params();
    let b = batch(&[0, 1, 2], &[1, 0, 0]);
    for obj in [Objective::Mlm, Objective::Classify] {
        assert_eq!(forward(&p, &b, obj).unwrap(), forward(&p, &b, obj).unwrap());
    }
}

#[test]
fn duplicating_an_example_keeps_mean_gradients() {
    let p = params();
    let labels = [1, 0, 1];
    for obj in [Objective::Mlm, Objective::Classify] {
        let once = backward(&p, &batch(&[0, 1], &labels), obj).unwrap();
        let twice = backward(&p, &batch(&[0, 0, 1, 1], &labels), obj).unwrap();
        let worst = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{obj:?}: {worst}");
    }
}
