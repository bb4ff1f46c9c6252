use negdistill_core::model::{
    forward_batch, init_parameters, softmax_with_temperature, ForwardOptions, ModelConfig, PaddedBatch, Parameters,
};
use proptest::prelude::*;

fn params() -> Parameters<f64> {
    init_parameters::<f64>(&ModelConfig::desk(20), 5).unwrap()
}

fn logits(p: &Parameters<f64>, batch: &PaddedBatch) -> ndarray::Array2<f64> {
    forward_batch(p, batch, &ForwardOptions::eval()).unwrap().trace.logits
}

#[test]
fn later_response_tokens_do_not_affect_earlier_logits() {
    let p = params();
    let q = [4usize, 5, 6];
    let r = [7usize, 8, 9, 10, 11];
    let base = logits(&p, &PaddedBatch::new(&[(&q[..], &r[..])], 16).unwrap());
    for j in 0..r.len() {
        let mut changed = r;
        changed[j] = 19;
        let out = logits(&p, &PaddedBatch::new(&[(&q[..], &changed[..])], 16).unwrap());
        // decoder input position j + 1 carries response token j
        for i in 0..=j {
            assert_eq!(base.row(i), out.row(i), "position {i} changed when token {j} did");
        }
        assert_ne!(base.row(j + 1), out.row(j + 1));
    }
}

#[test]
fn extra_padding_leaves_unmasked_logits_unchanged() {
    let p = params();
    let q = [4usize, 5];
    let r = [7usize, 8, 9];
    let pairs = [(&q[..], &r[..])];
    let tight = logits(&p, &PaddedBatch::new(&pairs, 16).unwrap());
    let loose_batch = PaddedBatch::with_min_lengths(&pairs, 7, 9, 16).unwrap();
    let loose = logits(&p, &loose_batch);
    for i in 0..=r.len() {
        for (a, b) in tight.row(i).iter().zip(loose.row(i)) {
            assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn batch_members_do_not_interact() {
    let p = params();
    let (q1, r1) = ([4usize, 5, 6], [7usize, 8]);
    let (q2, r2) = ([9usize], [10usize, 11, 12, 13]);
    let alone = logits(&p, &PaddedBatch::new(&[(&q1[..], &r1[..])], 16).unwrap());
    let both = logits(&p, &PaddedBatch::new(&[(&q1[..], &r1[..]), (&q2[..], &r2[..])], 16).unwrap());
    for i in 0..=r1.len() {
        for (a, b) in alone.row(i).iter().zip(both.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn head_width_must_divide_model_width() {
    let cfg = ModelConfig { d_k: 5, ..ModelConfig::desk(10) };
    assert!(init_parameters::<f32>(&cfg, 0).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalised(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..40),
        t in 0.1f64..10.0,
    ) {
        let p = softmax_with_temperature(&logits, t).unwrap();
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }
}
