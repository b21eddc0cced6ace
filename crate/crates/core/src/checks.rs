//! Finite-difference suites over every tape op, the CRF likelihood and the
//! full procedural and story losses. Used by the `gradcheck` subcommand and
//! the test suites.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{self, BlockedGoldPolicy, TransitionMatrix};
use crate::encoder::{attention, Ablations, EncoderConfig};
use crate::ingest::synth;
use crate::numerics::{
    gradcheck, seeded_rng, uniform_tensor, Bound, GradcheckConfig, GradcheckReport, NumericsError, Rng64, Tape,
    Tensor, Var,
};
use crate::schema::Action;
use crate::story::StoryModel;
use crate::trainer::{ProceduralModel, TrainConfig};

/// Aggregate outcome of one named check over several instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CheckResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            max_rel_err: 0.0,
            passed: true,
            failure: None,
        }
    }

    fn absorb(&mut self, report: GradcheckReport) {
        self.instances += 1;
        self.max_rel_err = self.max_rel_err.max(report.max_rel_err);
        if !report.passed && self.passed {
            self.passed = false;
            self.failure = Some(format!(
                "instance {}: {}",
                self.instances - 1,
                report.failure.unwrap_or_else(|| "tolerance exceeded".into())
            ));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Numerics,
    Crf,
    Encoder,
    Story,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Numerics, Suite::Crf, Suite::Encoder, Suite::Story];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn from_checks(suite: Suite, checks: Vec<CheckResult>) -> Self {
        Self {
            suite,
            max_rel_err: checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

pub fn run(suite: Suite, instances: usize, seed: u64) -> SuiteReport {
    let checks = match suite {
        Suite::Numerics => op_checks(instances, seed),
        Suite::Crf => crf_checks(instances, seed),
        Suite::Encoder => vec![procedural_loss_check(instances.min(3), seed)],
        Suite::Story => vec![story_loss_check(instances.min(3), seed)],
    };
    SuiteReport::from_checks(suite, checks)
}

/// One random instance of a tape op: inputs plus integer parameters.
struct OpCase {
    op: &'static str,
    points: Vec<Tensor>,
    ints: Vec<usize>,
    weight_seed: u64,
}

pub const OPS: [&str; 25] = [
    "matmul",
    "add",
    "mul",
    "scale",
    "add_bias",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "row",
    "slice_cols",
    "gather",
    "tanh",
    "gelu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "sum",
    "mean",
    "mean_rows",
    "cross_entropy",
    "layer_norm",
    "reshape",
    "attention",
    "map_with_grad",
];

fn t(shape: &[usize], rng: &mut Rng64) -> Tensor {
    uniform_tensor(shape, 1.0, rng)
}

fn sample_case(op: &'static str, rng: &mut Rng64) -> OpCase {
    let (r, c, k) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (points, ints) = match op {
        "matmul" => (vec![t(&[r, k], rng), t(&[k, c], rng)], vec![]),
        "add" | "mul" => (vec![t(&[r, c], rng), t(&[r, c], rng)], vec![]),
        "add_bias" | "layer_norm" => {
            let c = c + 1;
            let mut pts = vec![t(&[r, c], rng), t(&[c], rng)];
            if op == "layer_norm" {
                pts.push(t(&[c], rng));
            }
            (pts, vec![])
        }
        "concat_rows" => (vec![t(&[r, c], rng), t(&[k, c], rng)], vec![]),
        "concat_cols" => (vec![t(&[r, c], rng), t(&[r, k], rng)], vec![]),
        "slice_rows" | "row" => {
            let a = rng.gen_range(0..r);
            let b = rng.gen_range(a + 1..=r);
            (vec![t(&[r, c], rng)], vec![a, b])
        }
        "slice_cols" => {
            let a = rng.gen_range(0..c);
            let b = rng.gen_range(a + 1..=c);
            (vec![t(&[r, c], rng)], vec![a, b])
        }
        "gather" | "cross_entropy" => {
            let n = if op == "gather" { k + 1 } else { r };
            let ids = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let shape = if op == "gather" { [c, r] } else { [r, c] };
            (vec![t(&shape, rng)], ids)
        }
        "reshape" => (vec![t(&[r, c], rng)], vec![]),
        "attention" => {
            let heads = rng.gen_range(1..=2);
            let d = heads * rng.gen_range(1..=2);
            let (steps, len) = (rng.gen_range(1..=2), rng.gen_range(2..=3));
            let rows = steps * len;
            // the first key of every block stays valid
            let valid: Vec<usize> = (0..rows).map(|i| usize::from(i % len == 0 || rng.gen_bool(0.7))).collect();
            let mut ints = vec![steps, len, heads];
            ints.extend(valid);
            (vec![t(&[rows, d], rng), t(&[rows, d], rng), t(&[rows, d], rng)], ints)
        }
        _ => (vec![t(&[r, c], rng)], vec![]),
    };
    OpCase {
        op,
        points,
        ints,
        weight_seed: rng.gen(),
    }
}

/// Random linear functional of `v`, so every output entry matters.
fn scalarize<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>, NumericsError> {
    let shape = v.shape();
    if shape.is_empty() {
        return Ok(v);
    }
    let w = uniform_tensor(&shape, 1.0, &mut seeded_rng(seed));
    v.mul(tape.constant(w))?.sum()
}

fn apply<'t>(case: &OpCase, tape: &'t Tape, x: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
    let i = &case.ints;
    let out = match case.op {
        "matmul" => x[0].matmul(x[1])?,
        "add" => x[0].add(x[1])?,
        "mul" => x[0].mul(x[1])?,
        "scale" => x[0].scale(-1.7)?,
        "add_bias" => x[0].add_bias(x[1])?,
        "transpose" => x[0].transpose()?,
        "concat_rows" => Var::concat_rows(&[x[0], x[1]])?,
        "concat_cols" => Var::concat_cols(&[x[0], x[1]])?,
        "slice_rows" => x[0].slice_rows(i[0], i[1])?,
        "row" => x[0].row(i[0])?,
        "slice_cols" => x[0].slice_cols(i[0], i[1])?,
        "gather" => x[0].gather(i)?,
        "tanh" => x[0].tanh()?,
        "gelu" => x[0].gelu()?,
        "softmax" => x[0].softmax()?,
        "log_softmax" => x[0].log_softmax()?,
        "logsumexp" => x[0].logsumexp()?,
        "sum" => x[0].sum()?,
        "mean" => x[0].mean()?,
        "mean_rows" => x[0].mean_rows()?,
        "cross_entropy" => x[0].cross_entropy(i)?,
        "layer_norm" => x[0].layer_norm(x[1], x[2])?,
        "map_with_grad" => x[0].map_with_grad(f64::sin, f64::cos)?,
        "reshape" => {
            let n = x[0].shape().iter().product::<usize>();
            x[0].reshape(&[1, n])?
        }
        "attention" => {
            let valid = Rc::new(i[3..].iter().map(|&v| v == 1).collect());
            attention(x[0], x[1], x[2], valid, i[0], i[1], i[2])?
        }
        other => unreachable!("unknown op {other}"),
    };
    scalarize(tape, out, case.weight_seed)
}

/// Every op in [`OPS`] at `instances` random shapes each.
pub fn op_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = seeded_rng(seed);
    OPS.iter()
        .map(|&op| {
            let mut res = CheckResult::new(op);
            for _ in 0..instances {
                let case = sample_case(op, &mut rng);
                res.absorb(gradcheck(|tape, x| apply(&case, tape, x), &case.points, GradcheckConfig::default()));
            }
            res
        })
        .collect()
}

/// CRF likelihood with respect to emissions and unblocked transitions.
pub fn crf_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = seeded_rng(seed);
    let a = Action::ALL.len();
    let mut free = CheckResult::new("crf_nll");
    let mut masked = CheckResult::new("crf_nll_prior");
    for _ in 0..instances {
        let n = rng.gen_range(1..=4);
        let phi = uniform_tensor(&[n, a], 2.0, &mut rng);
        let psi = uniform_tensor(&[a + 1, a], 2.0, &mut rng);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a)).collect();
        free.absorb(gradcheck(
            |_, x| crf::nll(x[0], x[1], &gold, None, BlockedGoldPolicy::Error),
            &[phi.clone(), psi],
            GradcheckConfig::default(),
        ));
        // a prior from the gold path plus one random path; blocked entries
        // carry no probability mass and are checked as constants
        let other: Vec<usize> = (0..n.max(2)).map(|_| rng.gen_range(0..a)).collect();
        let mut seqs = vec![gold.clone(), other];
        if n == 1 {
            seqs.push(vec![gold[0], gold[0]]);
        }
        let prior = TransitionMatrix::from_sequences(&seqs, a).expect("adjacent pairs present");
        let blocked = prior.blocked.clone();
        let base = prior.tensor();
        masked.absorb(gradcheck(
            |tape, x| {
                let psi = tape.constant(base.clone()).add(x[1].mul(tape.constant(unblocked_mask(&blocked, a)))?)?;
                crf::nll(x[0], psi, &gold, Some(&blocked), BlockedGoldPolicy::Error)
            },
            &[phi, Tensor::zeros(&[a + 1, a])],
            GradcheckConfig::default(),
        ));
    }
    vec![free, masked]
}

fn unblocked_mask(blocked: &[bool], a: usize) -> Tensor {
    let data = blocked.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    Tensor::new(vec![a + 1, a], data).expect("mask shape")
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 64,
        d: 4,
        layers: 1,
        heads: 2,
        ff: 4,
        m_max: 48,
        max_span_len: 3,
    }
}

/// Full procedural loss on synthetic two-sentence paragraphs.
pub fn procedural_loss_check(instances: usize, seed: u64) -> CheckResult {
    let cfg = synth::SynthConfig {
        mean_sentences: 2.0,
        mean_entities: 1.0,
        ..Default::default()
    };
    let data = synth::corpus("check", instances.max(1) + 4, &cfg, seed).examples;
    let mut res = CheckResult::new("procedural_loss");
    for (k, ex) in data.iter().take(instances.max(1)).enumerate() {
        let ablations = Ablations {
            no_go: k % 2 == 1,
            ..Default::default()
        };
        let model = match ProceduralModel::for_data(tiny_encoder(), ablations, &data, seed + k as u64) {
            Ok(m) => m,
            Err(e) => {
                res.passed = false;
                res.failure = Some(e.to_string());
                return res;
            }
        };
        let config = TrainConfig::default();
        let Some(entity) = ex.entities.first() else { continue };
        res.absorb(gradcheck(
            |tape, x| {
                model
                    .entity_loss(tape, &Bound::from_vars(x.to_vec()), ex, entity, &config)
                    .map(|r| r.0)
            },
            &model.store.values(),
            GradcheckConfig {
                max_entries_per_input: Some(8),
                ..Default::default()
            },
        ));
    }
    res
}

/// Full story loss on two-sentence pairs with two attributes.
pub fn story_loss_check(instances: usize, seed: u64) -> CheckResult {
    let cfg = synth::StorySynthConfig {
        sentences: 2,
        distractors: 0,
    };
    let ds = synth::story_corpus(&cfg, instances.max(1), seed);
    let mut res = CheckResult::new("story_loss");
    for (k, pair) in ds.split.examples.iter().enumerate() {
        let model = match StoryModel::for_data(tiny_encoder(), ds.registry.clone(), &ds.split.examples, Ablations::default(), k % 2 == 1, seed + k as u64) {
            Ok(m) => m,
            Err(e) => {
                res.passed = false;
                res.failure = Some(e.to_string());
                return res;
            }
        };
        res.absorb(gradcheck(
            |_, x| model.pair_loss(&Bound::from_vars(x.to_vec()), pair),
            &model.store.values(),
            GradcheckConfig {
                max_entries_per_input: Some(8),
                ..Default::default()
            },
        ));
    }
    res
}
