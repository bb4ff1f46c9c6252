//! Checks shared by the acceptance runner and the ordinary integration tests. Each check
//! returns a one-line summary on success and a description of the first problem on
//! failure.

use negdistill_core::corpus::{rank_and_split_indices, source_entropy, Dataset, RawPair, Split, Vocab};
use negdistill_core::decoding::{beam_search, greedy_decode, Hypothesis};
use negdistill_core::losses::{alpha_schedule, combined_loss, mrse, DistillConfig, NegativeTarget, ScheduleConfig};
use negdistill_core::metrics::{bleu_n, dist_n, kl_n, lf_ratio, KlDirection, KL_EPSILON};
use negdistill_core::model::{forward_batch, init_parameters, ForwardOptions, ModelConfig, PaddedBatch};
use negdistill_core::synth::{generate, SynthConfig};
use negdistill_core::training::{distill_student, lr_schedule, train_mle, OptimConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::oracles::{self, ToyModel};

pub type Outcome = std::result::Result<String, String>;

pub const ENTROPY_TOL: f64 = 1e-12;
pub const ENTROPY_DATASETS: usize = 50;
pub const ENTROPY_MAX_PAIRS: usize = 1000;
pub const MRSE_PAIRS: usize = 1000;
pub const EVENNESS_TOL: f64 = 1e-12;
pub const EVENNESS_SAMPLES: usize = 100;
pub const LR_TOL: f64 = 1e-12;
pub const METRIC_CORPORA: usize = 50;
pub const METRIC_MAX_RESPONSES: usize = 500;
pub const METRIC_TOL: f64 = 1e-9;
pub const TOY_MAX_VOCAB: usize = 5;
pub const TOY_MAX_LEN: usize = 5;
pub const GREEDY_MODELS: usize = 100;
/// Absolute slack allowed when removing a term from a sum of four f64 values.
pub const ABLATION_TOL: f64 = 1e-12;

fn fail(msg: impl Into<String>) -> Outcome {
    Err(msg.into())
}

pub fn gradient_suite() -> Outcome {
    let s = gradcheck::setup();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, name) in gradcheck::LOSSES.iter().enumerate() {
        let r = gradcheck::check(name, &s, 100 + i as u64);
        if !r.failures.is_empty() {
            return fail(format!(
                "{}: {} of {} parameters beyond {} relative (worst {:.3e})",
                r.loss,
                r.failures.len(),
                r.checked,
                gradcheck::REL_TOL,
                r.worst_rel
            ));
        }
        if r.checked < 100 {
            return fail(format!("{}: only {} parameters checked", r.loss, r.checked));
        }
        worst = worst.max(r.worst_rel);
        checked += r.checked;
    }
    Ok(format!(
        "{} losses, {checked} parameters, step {}, worst relative error {worst:.2e} (tol {})",
        gradcheck::LOSSES.len(),
        gradcheck::STEP,
        gradcheck::REL_TOL
    ))
}

/// Pairs drawn from small pools so responses repeat, with random case and spacing so
/// normalisation matters.
pub fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<RawPair> {
    let nq = rng.gen_range(1..=60);
    let nr = rng.gen_range(1..=40);
    let skew: f64 = rng.gen_range(0.0..3.0);
    let style = |rng: &mut ChaCha8Rng, words: &[String]| {
        words
            .iter()
            .map(|w| if rng.gen_bool(0.2) { w.to_uppercase() } else { w.clone() })
            .collect::<Vec<_>>()
            .join(if rng.gen_bool(0.2) { "  " } else { " " })
    };
    (0..n)
        .map(|_| {
            let q = rng.gen_range(0..nq);
            let r = ((rng.gen::<f64>().powf(1.0 + skew)) * nr as f64) as usize;
            let qw = vec![format!("q{}", q % 7), format!("w{q}")];
            let rw = vec![format!("r{}", r % 5), format!("v{r}")];
            RawPair::new(style(rng, &qw), style(rng, &rw))
        })
        .collect()
}

pub fn entropy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for d in 0..ENTROPY_DATASETS {
        let n = rng.gen_range(1..=ENTROPY_MAX_PAIRS);
        let pairs = random_pairs(&mut rng, n);
        let table = source_entropy(&pairs);
        let expected = oracles::entropy_per_pair(&pairs);
        for (p, e) in pairs.iter().zip(&expected) {
            let got = table.entropy_of(&p.response).map_err(|e| e.to_string())?;
            let err = (got - e).abs();
            worst = worst.max(err);
            if err > ENTROPY_TOL {
                return fail(format!("dataset {d}: entropy of {:?} is {got}, oracle {e}", p.response));
            }
        }
        let ratio = [0.1, 0.25, 0.5, 0.9][d % 4];
        check_partition(&pairs, &expected, ratio).map_err(|m| format!("dataset {d}: {m}"))?;
    }
    Ok(format!(
        "{ENTROPY_DATASETS} datasets of up to {ENTROPY_MAX_PAIRS} pairs, worst error {worst:.1e} (tol {ENTROPY_TOL:e}), partitions valid"
    ))
}

pub fn check_partition(pairs: &[RawPair], entropy: &[f64], ratio: f64) -> std::result::Result<(), String> {
    let table = source_entropy(pairs);
    let (neg, rest) = rank_and_split_indices(pairs, &table, ratio).map_err(|e| e.to_string())?;
    let n = pairs.len();
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    if neg.len() != k || neg.len() + rest.len() != n {
        return Err(format!("sizes {}+{} for n={n}, ratio {ratio}", neg.len(), rest.len()));
    }
    let mut seen = vec![false; n];
    for &i in neg.iter().chain(&rest) {
        if i >= n || seen[i] {
            return Err(format!("index {i} repeated or out of range"));
        }
        seen[i] = true;
    }
    if !neg.windows(2).all(|w| w[0] < w[1]) || !rest.windows(2).all(|w| w[0] < w[1]) {
        return Err("subsets are not in original order".into());
    }
    for &i in &neg {
        for &j in &rest {
            if entropy[i] < entropy[j] || (entropy[i] == entropy[j] && i > j) {
                return Err(format!("pair {j} (H={}) should precede pair {i} (H={})", entropy[j], entropy[i]));
            }
        }
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0))
}

pub fn mrse_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let value = |a: &Array2<f64>, b: &Array2<f64>, m: &Array2<bool>| mrse(a, b, m).map(|o| o.value).map_err(|e| e.to_string());
    for k in 0..MRSE_PAIRS {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let a = random_matrix(&mut rng, r, c);
        let b = random_matrix(&mut rng, r, c);
        let mut mask = Array2::from_shape_fn((r, c), |_| rng.gen_bool(0.8));
        mask[[0, 0]] = true;
        let same = value(&a, &a, &mask)?;
        if same != 1.0 {
            return fail(format!("pair {k}: MRSE(a, a) = {same}"));
        }
        let v = value(&a, &b, &mask)?;
        if !(v > 0.0 && v <= 1.0) {
            return fail(format!("pair {k}: MRSE = {v} outside (0, 1]"));
        }
        let back = value(&b, &a, &mask)?;
        if back != v {
            return fail(format!("pair {k}: MRSE(a, b) = {v} but MRSE(b, a) = {back}"));
        }
        let valid: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        let at = *valid.choose(&mut rng).unwrap();
        let d = b[at] - a[at];
        let mut further = b.clone();
        further[at] += if d >= 0.0 { 1.0 } else { -1.0 } * rng.gen_range(0.1..1.0);
        let moved = value(&a, &further, &mask)?;
        if moved >= v {
            return fail(format!("pair {k}: moving element {at:?} away gave {moved} >= {v}"));
        }
    }
    Ok(format!(
        "{MRSE_PAIRS} random masked pairs: identity exact, range (0,1], symmetric, strictly decreasing"
    ))
}

pub fn schedule_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (lambda, gamma) in [(4.0, 25600u64), (4.0, 2000), (1.0, 3000), (2.5, 777), (0.3, 1)] {
        let cfg = ScheduleConfig {
            lambda,
            beta: 6.0 / gamma as f64,
            gamma: gamma as f64,
            fixed_alpha: None,
        };
        let peak = alpha_schedule(gamma, &cfg);
        if peak != lambda / 4.0 {
            return fail(format!("alpha(gamma={gamma}) = {peak}, expected {}", lambda / 4.0));
        }
        if lambda == 4.0 && peak != 1.0 {
            return fail("lambda = 4 does not peak at exactly 1");
        }
        for _ in 0..EVENNESS_SAMPLES {
            let d = rng.gen_range(0..=gamma);
            let (hi, lo) = (alpha_schedule(gamma + d, &cfg), alpha_schedule(gamma - d, &cfg));
            if (hi - lo).abs() > EVENNESS_TOL {
                return fail(format!("alpha(gamma+{d}) = {hi} but alpha(gamma-{d}) = {lo}"));
            }
        }
    }
    for (wp, d_model) in [(4000u64, 512usize), (200, 64), (1000, 64), (8, 16)] {
        let cfg = OptimConfig {
            warmup_steps: wp,
            d_model,
            ..OptimConfig::desk(d_model)
        };
        let lr = |s: u64| lr_schedule(s, &cfg).map_err(|e| e.to_string());
        let scale = 2.0 / (d_model as f64).sqrt();
        let wpf = wp as f64;
        let rising = scale * wpf / wpf.powf(1.5);
        let falling = scale / wpf.sqrt();
        let at = lr(wp)?;
        if (rising - falling).abs() > LR_TOL || (at - rising).abs() > LR_TOL || (at - falling).abs() > LR_TOL {
            return fail(format!("lr discontinuous at warmup {wp}: {at} vs {rising} / {falling}"));
        }
        let quarter = scale * (wpf / 4.0) / wpf.powf(1.5);
        let four = scale / (4.0 * wpf).sqrt();
        let (q, f) = (lr(wp / 4)?, lr(4 * wp)?);
        if (q - quarter).abs() > LR_TOL || (f - four).abs() > LR_TOL {
            return fail(format!("lr({}) = {q} (want {quarter}), lr({}) = {f} (want {four})", wp / 4, 4 * wp));
        }
    }
    Ok(format!(
        "peak = lambda/4 exactly, evenness within {EVENNESS_TOL:e} on {EVENNESS_SAMPLES} offsets per config, lr continuous and hand values within {LR_TOL:e}"
    ))
}

pub struct MetricCorpus {
    pub generated: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
    pub vocab: Vocab,
}

pub fn random_metric_corpus(rng: &mut ChaCha8Rng) -> MetricCorpus {
    let words = rng.gen_range(2..40);
    let n = rng.gen_range(1..=METRIC_MAX_RESPONSES);
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let len = rng.gen_range(min..9);
        (0..len).map(|_| format!("t{}", rng.gen_range(0..words))).collect()
    };
    let generated: Vec<Vec<String>> = (0..n).map(|_| sentence(rng, 0)).collect();
    let references: Vec<Vec<String>> = (0..n).map(|_| sentence(rng, 1)).collect();
    let train: Vec<RawPair> = (0..rng.gen_range(50..3000))
        .map(|_| {
            let w = format!("t{}", (rng.gen::<f64>().powi(3) * (words + 10) as f64) as usize);
            RawPair::new("q", w)
        })
        .collect();
    let vocab = Vocab::build(&train, rng.gen_range(8..60)).unwrap();
    MetricCorpus {
        generated,
        references,
        vocab,
    }
}

pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for k in 0..METRIC_CORPORA {
        let c = random_metric_corpus(&mut rng);
        let (g, r) = (&c.generated, &c.references);
        for n in 1..=4 {
            match (dist_n(g, n), oracles::dist(g, n)) {
                (Ok(a), Some(b)) if a == b => {}
                (Err(_), None) => {}
                (a, b) => return fail(format!("corpus {k}: dist-{n} {a:?} vs oracle {b:?}")),
            }
            let kl = kl_n(g, r, n, KlDirection::RefGen);
            let want = oracles::kl(g, r, n, KL_EPSILON);
            match kl {
                Ok(v) => {
                    worst = worst.max((v - want).abs());
                    if (v - want).abs() > METRIC_TOL {
                        return fail(format!("corpus {k}: kl-{n} {v} vs oracle {want}"));
                    }
                }
                Err(e) => return fail(format!("corpus {k}: kl-{n} failed: {e}")),
            }
            let b = bleu_n(g, r, n).map_err(|e| e.to_string())?;
            let want = oracles::bleu(g, r, n);
            worst = worst.max((b - want).abs());
            if (b - want).abs() > METRIC_TOL {
                return fail(format!("corpus {k}: bleu-{n} {b} vs oracle {want}"));
            }
        }
        for threshold in [1, 5, 100] {
            let freq = |t: &str| c.vocab.id(t).filter(|&i| i != negdistill_core::corpus::UNK).map(|i| c.vocab.frequency(i));
            match (lf_ratio(g, &c.vocab, threshold), oracles::lf(g, freq, threshold)) {
                (Ok(a), Some(b)) if a == b => {}
                (Err(_), None) => {}
                (a, b) => return fail(format!("corpus {k}: lf@{threshold} {a:?} vs oracle {b:?}")),
            }
        }
    }
    Ok(format!(
        "{METRIC_CORPORA} corpora of up to {METRIC_MAX_RESPONSES} responses: counts exact, KL/BLEU worst {worst:.1e} (tol {METRIC_TOL:e}); hand examples run as unit tests"
    ))
}

fn toy_max_len_space(v: usize, l: usize) -> usize {
    v.pow(l as u32)
}

pub fn decoding_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for v in 3..=TOY_MAX_VOCAB {
        for l in 1..=TOY_MAX_LEN {
            for exponent in [0.0, 0.5, 1.0, 2.0] {
                for _ in 0..3 {
                    let model = ToyModel {
                        vocab: v,
                        seed: rng.gen(),
                        sharpness: rng.gen_range(0.5..4.0),
                    };
                    let beam = toy_max_len_space(v, l);
                    let (tokens, score, runner_up) = oracles::exhaustive_best(&model, l, exponent);
                    let got: Hypothesis = beam_search(&model, beam, exponent, l)
                        .map_err(|e| e.to_string())?
                        .ok_or("beam search returned nothing")?;
                    if (got.score - score).abs() > 1e-12 {
                        return fail(format!(
                            "V={v} L={l} e={exponent}: beam score {} vs exhaustive {score}",
                            got.score
                        ));
                    }
                    if score - runner_up > 1e-12 && got.tokens != tokens {
                        return fail(format!("V={v} L={l} e={exponent}: beam {:?} vs exhaustive {tokens:?}", got.tokens));
                    }
                    cases += 1;
                }
            }
        }
    }
    for m in 0..GREEDY_MODELS {
        let model = ToyModel {
            vocab: rng.gen_range(3..12),
            seed: rng.gen(),
            sharpness: rng.gen_range(0.5..4.0),
        };
        let max_len = rng.gen_range(1..10);
        let greedy = greedy_decode(&model, max_len).map_err(|e| e.to_string())?;
        let beam = beam_search(&model, 1, 0.0, max_len)
            .map_err(|e| e.to_string())?
            .ok_or("beam search returned nothing")?;
        if beam.tokens != greedy {
            return fail(format!("model {m}: beam-1 {:?} vs greedy {greedy:?}", beam.tokens));
        }
    }
    Ok(format!(
        "{cases} toy models (V<={TOY_MAX_VOCAB}, L<={TOY_MAX_LEN}, full-width beams) match exhaustive search; beam-1/e=0 equals greedy on {GREEDY_MODELS} models"
    ))
}

/// Small data and model shared by the training identity checks.
pub struct TinyRun {
    pub train: Dataset,
    pub valid: Dataset,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

pub fn tiny_run(steps: u64) -> TinyRun {
    let corpus = generate(&SynthConfig {
        queries: 60,
        valid_queries: 12,
        test_queries: 4,
        lexicon_size: 12,
        max_query_len: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = Vocab::build(&corpus.train, 200).unwrap();
    let model = ModelConfig {
        max_sequence_length: 16,
        ..ModelConfig::desk(vocab.len())
    };
    let optim = OptimConfig {
        warmup_steps: 10,
        batch_size: 8,
        max_steps: steps,
        validation_interval: 5,
        seed: 9,
        ..OptimConfig::desk(model.d_model)
    };
    TinyRun {
        train: Dataset::from_raw(&corpus.train, &vocab, Split::Train).unwrap(),
        valid: Dataset::from_raw(&corpus.valid, &vocab, Split::Valid).unwrap(),
        model,
        optim,
    }
}

pub fn lambda_zero_identity() -> Outcome {
    let run = tiny_run(30);
    let mle = train_mle(&run.train, &run.valid, &run.model, &run.optim).map_err(|e| e.to_string())?;
    let teacher = init_parameters::<f32>(&run.model, 77).map_err(|e| e.to_string())?;
    let schedule = ScheduleConfig {
        lambda: 0.0,
        ..ScheduleConfig::peaked_at(15.0)
    };
    let student = distill_student(
        &run.train,
        &run.valid,
        &teacher,
        &run.model,
        &run.optim,
        &schedule,
        &DistillConfig::default(),
        None,
    )
    .map_err(|e| e.to_string())?;
    let bytes = |s: &negdistill_core::training::TrainState| s.to_container().to_bytes().map_err(|e| e.to_string());
    if mle.params != student.params {
        return fail("best parameters differ");
    }
    if bytes(&mle.state)? != bytes(&student.state)? {
        return fail("serialised training states differ");
    }
    let trained = mle.params != init_parameters::<f32>(&run.model, run.optim.seed).map_err(|e| e.to_string())?;
    if !trained {
        return fail("the runs did not move the parameters");
    }
    Ok(format!(
        "{} steps: best parameters and full serialised state (moments, log) bitwise identical",
        run.optim.max_steps
    ))
}

pub fn ablation_wiring() -> Outcome {
    let cfg = ModelConfig::desk(14);
    let student = init_parameters::<f64>(&cfg, 21).map_err(|e| e.to_string())?;
    let teacher = init_parameters::<f64>(&cfg, 22).map_err(|e| e.to_string())?;
    let q = [4usize, 5, 6, 7];
    let r = [8usize, 9, 10];
    let q2 = [11usize, 12];
    let r2 = [13usize, 4, 5, 6, 9];
    let pairs: Vec<(&[usize], &[usize])> = vec![(&q, &r), (&q2, &r2)];
    let batch = PaddedBatch::new(&pairs, cfg.max_sequence_length).map_err(|e| e.to_string())?;
    let opts = ForwardOptions::eval();
    let s = forward_batch(&student, &batch, &opts).map_err(|e| e.to_string())?.trace;
    let t = forward_batch(&teacher, &batch, &opts).map_err(|e| e.to_string())?.trace;
    let mut lines = Vec::new();
    for target in [NegativeTarget::Soft, NegativeTarget::Hard] {
        for alpha in [0.3, 0.7, 1.0] {
            let full_cfg = DistillConfig {
                temperature: 1.5,
                negative_target: target,
                ..DistillConfig::default()
            };
            let full = combined_loss(&s, &t, alpha, &full_cfg, None).map_err(|e| e.to_string())?;
            for (name, off) in [
                ("pred", DistillConfig { include_pred: false, ..full_cfg }),
                ("attention", DistillConfig { include_attention: false, ..full_cfg }),
                ("hidden", DistillConfig { include_hidden: false, ..full_cfg }),
            ] {
                let ablated = combined_loss(&s, &t, alpha, &off, None).map_err(|e| e.to_string())?;
                let reported = match name {
                    "pred" => full.weighted.pred,
                    "attention" => full.weighted.attention,
                    _ => full.weighted.hidden,
                };
                let change = full.total - ablated.total;
                if reported == 0.0 || (change - reported).abs() > ABLATION_TOL {
                    return fail(format!(
                        "{target:?} alpha={alpha}: removing {name} changed the loss by {change}, breakdown says {reported}"
                    ));
                }
                let kept = |b: &negdistill_core::losses::Breakdown| match name {
                    "pred" => (b.mle, b.hidden, b.attention),
                    "attention" => (b.mle, b.pred, b.hidden),
                    _ => (b.mle, b.pred, b.attention),
                };
                if kept(&full.weighted) != kept(&ablated.weighted) {
                    return fail(format!("removing {name} altered the other components"));
                }
                lines.push((change - reported).abs());
            }
        }
    }
    let worst = lines.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{} toggles: change equals the reported component within {worst:.1e} (tol {ABLATION_TOL:e}), other components bitwise unchanged",
        lines.len()
    ))
}
