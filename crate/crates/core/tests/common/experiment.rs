//! The directional diversity experiment on the synthetic many-to-one corpus.

use std::time::{Duration, Instant};

use negdistill_core::corpus::{source_entropy, Dataset, Split, Vocab};
use negdistill_core::decoding::{decode_texts, DecodeConfig};
use negdistill_core::losses::{DistillConfig, NegativeTarget};
use negdistill_core::metrics::dist_n;
use negdistill_core::synth::{generate, SynthConfig};
use negdistill_core::training::{distill_student, train_mle, train_teacher, RunConfig};
use negdistill_core::Result;

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const STEPS: u64 = 5000;
pub const TEMPLATE_RATE_MIN: f64 = 0.6;
pub const SEED_BUDGET: Duration = Duration::from_secs(30 * 60);

/// Settings that differ from the library defaults.
pub const OVERRIDES: [(&str, &str); 4] = [
    ("optim.warmup_steps", "1000"),
    ("optim.validation_interval", "250"),
    ("schedule.lambda", "1"),
    ("schedule.gamma", "2000"),
];

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher_template_rate: f64,
    pub mle_dist2: f64,
    pub soft_dist2: f64,
    pub hard_dist2: f64,
    pub generic: [usize; 3],
    pub elapsed: Duration,
}

impl SeedResult {
    pub fn nd_beats_mle(&self) -> bool {
        self.soft_dist2 > self.mle_dist2
    }

    pub fn soft_at_least_hard(&self) -> bool {
        self.soft_dist2 >= self.hard_dist2
    }
}

pub fn run_config(seed: u64) -> RunConfig {
    let mut rc = RunConfig::default();
    for (k, v) in OVERRIDES {
        rc.set(k, v).expect("experiment override");
    }
    rc.optim.seed = seed;
    rc.optim.max_steps = STEPS;
    rc
}

fn tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|s| s.split_whitespace().map(str::to_string).collect()).collect()
}

pub fn run_seed(seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let corpus = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let rc = run_config(seed);
    let vocab = Vocab::build(&corpus.train, rc.vocab_max_size)?;
    let train = Dataset::from_raw(&corpus.train, &vocab, Split::Train)?;
    let valid = Dataset::from_raw(&corpus.valid, &vocab, Split::Valid)?;
    let (negative, _) = train.rank_and_split(&source_entropy(&corpus.train), rc.filter_ratio)?;
    let (negative_valid, _) = valid.rank_and_split(&source_entropy(&corpus.valid), rc.filter_ratio)?;
    let model = rc.model_config(vocab.len());
    let queries: Vec<String> = corpus.test.iter().map(|p| p.query.clone()).collect();
    let decode = DecodeConfig::default();
    let generic = |out: &[String]| out.iter().filter(|r| corpus.is_template(r)).count();
    let dist2 = |out: &[String]| dist_n(&tokens(out), 2);

    let teacher = train_teacher(&negative, &negative_valid, &model, &rc.optim)?;
    let teacher_out = decode_texts(&teacher.params, &vocab, &queries, &decode)?;
    let teacher_template_rate = generic(&teacher_out) as f64 / teacher_out.len() as f64;

    let mle = train_mle(&train, &valid, &model, &rc.optim)?;
    let mle_out = decode_texts(&mle.params, &vocab, &queries, &decode)?;

    let mut students = Vec::new();
    for target in [NegativeTarget::Soft, NegativeTarget::Hard] {
        let distill = DistillConfig {
            negative_target: target,
            ..rc.distill
        };
        let s = distill_student(
            &train,
            &valid,
            &teacher.params,
            &model,
            &rc.optim,
            &rc.schedule(),
            &distill,
            Some(&negative),
        )?;
        students.push(decode_texts(&s.params, &vocab, &queries, &decode)?);
    }
    Ok(SeedResult {
        seed,
        teacher_template_rate,
        mle_dist2: dist2(&mle_out)?,
        soft_dist2: dist2(&students[0])?,
        hard_dist2: dist2(&students[1])?,
        generic: [generic(&mle_out), generic(&students[0]), generic(&students[1])],
        elapsed: start.elapsed(),
    })
}
