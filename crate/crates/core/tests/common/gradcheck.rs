//! Central finite differences against the tape gradients on a 2-layer d_model=16 model.

use negdistill_core::corpus::{PAD, UNK};
use negdistill_core::losses::{
    combined_loss, kd_loss, mle_loss, nd_attention_loss, nd_hidden_loss, nd_pred_loss, ul_loss, DistillConfig,
    NegativeCandidateSet, NegativeTarget,
};
use negdistill_core::model::{
    forward_batch, init_parameters, ForwardOptions, ForwardTrace, ModelConfig, PaddedBatch, Parameters, TraceGrad,
};
use negdistill_core::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude on both sides a gradient entry is compared absolutely, since the
/// finite difference itself carries rounding error of roughly `1e-16 / STEP`.
pub const ABS_FLOOR: f64 = 1e-7;
pub const SAMPLES: usize = 120;

pub const LOSSES: [&str; 8] = [
    "mle_loss",
    "ul_loss",
    "kd_loss",
    "nd_pred_loss",
    "nd_hidden_loss",
    "nd_attention_loss",
    "nd_attention_loss+cross",
    "combined_loss",
];

pub struct Setup {
    pub student: Parameters<f64>,
    pub teacher: Parameters<f64>,
    pub batch: PaddedBatch,
}

pub fn setup() -> Setup {
    let cfg = ModelConfig::desk(12);
    let student = init_parameters::<f32>(&cfg, 11).unwrap().cast::<f64>();
    let teacher = init_parameters::<f32>(&cfg, 12).unwrap().cast::<f64>();
    let q1 = [4, 5, 6];
    let r1 = [7, 8, 9, 7];
    let q2 = [10, 11];
    let r2 = [5];
    let q3 = [UNK, 4, 9, 10];
    let r3 = [11, 6];
    let pairs: Vec<(&[usize], &[usize])> = vec![(&q1, &r1), (&q2, &r2), (&q3, &r3)];
    let batch = PaddedBatch::new(&pairs, cfg.max_sequence_length).unwrap();
    assert!(batch.targets.contains(&PAD), "the batch must exercise padding");
    Setup { student, teacher, batch }
}

fn trace_of(params: &Parameters<f64>, batch: &PaddedBatch, cross: bool) -> ForwardTrace<f64> {
    let opts = ForwardOptions { cross_attention: cross, ..ForwardOptions::eval() };
    forward_batch(params, batch, &opts).unwrap().trace
}

/// Loss value and trace gradient of `name` for the student parameters `p`.
pub fn loss(name: &str, s: &Setup, p: &Parameters<f64>, cross: bool) -> Result<(f64, TraceGrad<f64>)> {
    let student = trace_of(p, &s.batch, cross);
    let teacher = trace_of(&s.teacher, &s.batch, cross);
    let out = match name {
        "mle_loss" => mle_loss(&student, &student.targets, 0.1)?,
        "ul_loss" => ul_loss(&student, &NegativeCandidateSet::previous_context(&student))?,
        "kd_loss" => kd_loss(&teacher, &student, 2.0)?,
        "nd_pred_loss" => nd_pred_loss(&teacher, &student, 1.5)?,
        "nd_hidden_loss" => nd_hidden_loss(&teacher, &student)?,
        "nd_attention_loss" => nd_attention_loss(&teacher, &student, false)?,
        "nd_attention_loss+cross" => nd_attention_loss(&teacher, &student, true)?,
        "combined_loss" => {
            let cfg = DistillConfig {
                temperature: 1.3,
                include_cross_attention: cross,
                negative_target: NegativeTarget::Soft,
                ..DistillConfig::default()
            };
            let c = combined_loss(&student, &teacher, 0.35, &cfg, None)?;
            return Ok((c.total, c.grad));
        }
        other => panic!("unknown loss {other}"),
    };
    Ok((out.value, out.grad))
}

pub struct CheckReport {
    pub loss: &'static str,
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<(usize, f64, f64)>,
}

pub fn check(name: &'static str, s: &Setup, seed: u64) -> CheckReport {
    let cross = name.ends_with("+cross") || name == "combined_loss";
    let (_, tg) = loss(name, s, &s.student, cross).unwrap();
    let opts = ForwardOptions { cross_attention: cross, ..ForwardOptions::eval() };
    let pass = forward_batch(&s.student, &s.batch, &opts).unwrap();
    let analytic = pass.backward(&tg).unwrap();
    let n = s.student.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { loss: name, checked: 0, worst_rel: 0.0, failures: Vec::new() };
    for k in sample(&mut rng, n, SAMPLES).into_iter() {
        let (t, r, c) = s.student.flat_index(k);
        let eval = |delta: f64| {
            let mut p = s.student.clone();
            p.tensors_mut()[t][(r, c)] += delta;
            loss(name, s, &p, cross).unwrap().0
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        let a = analytic.flat(k);
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < ABS_FLOOR { 0.0 } else { (a - numeric).abs() / scale };
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if rel > REL_TOL {
            report.failures.push((k, a, numeric));
        }
    }
    report
}
