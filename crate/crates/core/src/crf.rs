//! Linear-chain CRF over per-step labels: emission head, data-derived
//! transition prior, exact negative log-likelihood and Viterbi decoding.
//!
//! Transition scores are stored as an `[a + 1, a]` matrix whose row 0 is a
//! virtual START state; row `u + 1` holds transitions out of label `u`.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{logsumexp, uniform_init, Bound, NumericsError, ParamId, ParamStore, Rng64, Tensor, Var};

/// Score of a transition never seen in training data. `exp(BLOCKED)`
/// underflows to zero, so blocked paths carry no probability mass.
pub const BLOCKED: f64 = -1e4;

/// Row of the START state in a transition matrix.
pub const START: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrfError {
    #[error("prior needs at least one adjacent label pair")]
    NoTransitions,
    #[error("label {label} outside {labels} labels")]
    Label { label: usize, labels: usize },
    #[error("gold sequence of length {gold} for {steps} emission rows")]
    Length { gold: usize, steps: usize },
    #[error("gold path uses blocked transition {from} -> {to} at position {position}")]
    BlockedGold {
        position: usize,
        from: String,
        to: usize,
    },
    #[error("every path crosses a blocked transition")]
    AllPathsBlocked,
    #[error("non-finite emission score at step {step}, label {label}")]
    NonFinite { step: usize, label: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Transition scores with blocking mask and the counts they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub labels: usize,
    /// Row-major `[labels + 1, labels]`.
    pub scores: Vec<f64>,
    pub blocked: Vec<bool>,
    /// `Num(u, v)`, same layout as `scores` (row 0 counts first labels).
    pub pair_counts: Vec<u64>,
    /// `Num(u)` per row: outgoing pairs for labels, sequence count for START.
    pub row_counts: Vec<u64>,
    pub trainable: bool,
}

impl TransitionMatrix {
    /// All-zero, nothing blocked.
    pub fn uniform(labels: usize) -> Self {
        Self {
            labels,
            scores: vec![0.0; (labels + 1) * labels],
            blocked: vec![false; (labels + 1) * labels],
            pair_counts: vec![0; (labels + 1) * labels],
            row_counts: vec![0; labels + 1],
            trainable: true,
        }
    }

    /// `ψ[u, v] = log(Num(u, v) / Num(u))` from adjacent pairs; START row from
    /// first-label frequencies. Unseen pairs are blocked.
    pub fn from_sequences(sequences: &[Vec<usize>], labels: usize) -> Result<Self, CrfError> {
        let mut m = Self::uniform(labels);
        let mut adjacent = 0u64;
        for seq in sequences {
            if let Some(&bad) = seq.iter().find(|&&l| l >= labels) {
                return Err(CrfError::Label { label: bad, labels });
            }
            let Some(&first) = seq.first() else { continue };
            m.pair_counts[first] += 1;
            m.row_counts[START] += 1;
            for w in seq.windows(2) {
                m.pair_counts[(w[0] + 1) * labels + w[1]] += 1;
                m.row_counts[w[0] + 1] += 1;
                adjacent += 1;
            }
        }
        if adjacent == 0 {
            return Err(CrfError::NoTransitions);
        }
        for row in 0..=labels {
            for v in 0..labels {
                let i = row * labels + v;
                if m.pair_counts[i] == 0 {
                    m.scores[i] = BLOCKED;
                    m.blocked[i] = true;
                } else {
                    m.scores[i] = (m.pair_counts[i] as f64 / m.row_counts[row] as f64).ln();
                }
            }
        }
        Ok(m)
    }

    pub fn index(&self, from: Option<usize>, to: usize) -> usize {
        from.map_or(START, |u| u + 1) * self.labels + to
    }

    pub fn score(&self, from: Option<usize>, to: usize) -> f64 {
        self.scores[self.index(from, to)]
    }

    pub fn is_blocked(&self, from: Option<usize>, to: usize) -> bool {
        self.blocked[self.index(from, to)]
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.labels + 1, self.labels], self.scores.clone()).expect("transition shape")
    }

    /// Copy with scores replaced (e.g. after training); blocking unchanged.
    pub fn with_scores(&self, scores: &Tensor) -> Self {
        assert_eq!(scores.len(), self.scores.len(), "transition shape");
        Self {
            scores: scores.data().to_vec(),
            ..self.clone()
        }
    }

    /// First blocked transition on `path`, as `(position, from, to)`.
    pub fn first_blocked(&self, path: &[usize]) -> Option<(usize, Option<usize>, usize)> {
        path.iter().enumerate().find_map(|(t, &v)| {
            let from = if t == 0 { None } else { Some(path[t - 1]) };
            self.is_blocked(from, v).then_some((t, from, v))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn check_shapes(phi: &Tensor, psi: &Tensor) -> Result<(usize, usize), CrfError> {
    if phi.rank() != 2 || phi.rows() == 0 || psi.shape() != [phi.cols() + 1, phi.cols()] {
        return Err(NumericsError::Shape {
            op: "crf",
            detail: format!("phi {:?} with psi {:?}", phi.shape(), psi.shape()),
        }
        .into());
    }
    let (n, a) = (phi.rows(), phi.cols());
    for t in 0..n {
        if let Some(v) = phi.row(t).iter().position(|x| !x.is_finite()) {
            return Err(CrfError::NonFinite { step: t, label: v });
        }
    }
    Ok((n, a))
}

/// `Σ_t φ[t, y_t] + ψ[y_{t-1}, y_t]` with `y_{-1} = START`.
pub fn path_score(phi: &Tensor, psi: &Tensor, path: &[usize]) -> f64 {
    let a = phi.cols();
    let mut prev = START;
    let mut score = 0.0;
    for (t, &v) in path.iter().enumerate() {
        score += phi.at(t, v) + psi.data()[prev * a + v];
        prev = v + 1;
    }
    score
}

/// Forward and backward log-messages.
struct Messages {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn forward_backward(phi: &Tensor, psi: &Tensor) -> Messages {
    let (n, a) = (phi.rows(), phi.cols());
    let p = psi.data();
    let mut alpha = vec![0.0; n * a];
    let mut beta = vec![0.0; n * a];
    let mut buf = vec![0.0; a];
    for v in 0..a {
        alpha[v] = p[v] + phi.at(0, v);
    }
    for t in 1..n {
        for v in 0..a {
            for u in 0..a {
                buf[u] = alpha[(t - 1) * a + u] + p[(u + 1) * a + v];
            }
            alpha[t * a + v] = logsumexp(&buf) + phi.at(t, v);
        }
    }
    for t in (0..n - 1).rev() {
        for u in 0..a {
            for v in 0..a {
                buf[v] = p[(u + 1) * a + v] + phi.at(t + 1, v) + beta[(t + 1) * a + v];
            }
            beta[t * a + u] = logsumexp(&buf);
        }
    }
    let log_z = logsumexp(&alpha[(n - 1) * a..]);
    Messages { alpha, beta, log_z }
}

/// Log partition function by the forward algorithm.
pub fn log_partition(phi: &Tensor, psi: &Tensor) -> Result<f64, CrfError> {
    check_shapes(phi, psi)?;
    Ok(forward_backward(phi, psi).log_z)
}

/// Per-step label marginals `[n, a]`.
pub fn marginals(phi: &Tensor, psi: &Tensor) -> Result<Tensor, CrfError> {
    let (n, a) = check_shapes(phi, psi)?;
    let m = forward_backward(phi, psi);
    let data = (0..n * a).map(|i| (m.alpha[i] + m.beta[i] - m.log_z).exp()).collect();
    Ok(Tensor::new(vec![n, a], data)?)
}

/// What [`nll`] does when the gold path crosses a blocked transition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockedGoldPolicy {
    #[default]
    Error,
    Proceed,
}

/// `logZ - score(gold)` as one tape node. Gradients: label marginals minus
/// gold indicators for `φ`, expected minus gold transition counts for `ψ`.
pub fn nll<'t>(
    phi: Var<'t>,
    psi: Var<'t>,
    gold: &[usize],
    blocked: Option<&[bool]>,
    policy: BlockedGoldPolicy,
) -> Result<Var<'t>, CrfError> {
    let (phi_v, psi_v) = (phi.value(), psi.value());
    let (n, a) = check_shapes(&phi_v, &psi_v)?;
    if gold.len() != n {
        return Err(CrfError::Length {
            gold: gold.len(),
            steps: n,
        });
    }
    if let Some(&bad) = gold.iter().find(|&&l| l >= a) {
        return Err(CrfError::Label { label: bad, labels: a });
    }
    if let (Some(mask), BlockedGoldPolicy::Error) = (blocked, policy) {
        let mut prev = START;
        for (t, &v) in gold.iter().enumerate() {
            if mask[prev * a + v] {
                return Err(CrfError::BlockedGold {
                    position: t,
                    from: if prev == START { "START".into() } else { (prev - 1).to_string() },
                    to: v,
                });
            }
            prev = v + 1;
        }
    }
    let messages = forward_backward(&phi_v, &psi_v);
    let value = messages.log_z - path_score(&phi_v, &psi_v, gold);
    let gold = gold.to_vec();
    phi.tape().custom(&[phi, psi], Tensor::scalar(value), move |g, ins| {
        let g = g.item();
        let (phi, psi) = (&ins[0], &ins[1]);
        let Messages { alpha, beta, log_z } = &messages;
        let p = psi.data();
        let mut d_phi = Tensor::zeros(&[n, a]);
        let mut d_psi = Tensor::zeros(&[a + 1, a]);
        for t in 0..n {
            for v in 0..a {
                let marginal = (alpha[t * a + v] + beta[t * a + v] - log_z).exp();
                d_phi.data_mut()[t * a + v] = g * marginal;
                if t == 0 {
                    d_psi.data_mut()[v] += g * marginal;
                } else {
                    for u in 0..a {
                        let w = (alpha[(t - 1) * a + u] + p[(u + 1) * a + v] + phi.at(t, v) + beta[t * a + v] - log_z)
                            .exp();
                        d_psi.data_mut()[(u + 1) * a + v] += g * w;
                    }
                }
            }
        }
        let mut prev = START;
        for (t, &v) in gold.iter().enumerate() {
            d_phi.data_mut()[t * a + v] -= g;
            d_psi.data_mut()[prev * a + v] -= g;
            prev = v + 1;
        }
        vec![d_phi, d_psi]
    })
    .map_err(CrfError::from)
}

thread_local! {
    static VITERBI_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`viterbi`] calls made on this thread.
pub fn viterbi_call_count() -> u64 {
    VITERBI_CALLS.with(Cell::get)
}

/// Highest-scoring path and its score. Ties go to the lower label index at
/// every backtracking decision. Fails if the best path is blocked.
pub fn viterbi(phi: &Tensor, psi: &Tensor, blocked: Option<&[bool]>) -> Result<(Vec<usize>, f64), CrfError> {
    VITERBI_CALLS.with(|c| c.set(c.get() + 1));
    let (n, a) = check_shapes(phi, psi)?;
    let p = psi.data();
    let mut delta = vec![0.0; n * a];
    let mut back = vec![0usize; n * a];
    for v in 0..a {
        delta[v] = p[v] + phi.at(0, v);
    }
    for t in 1..n {
        for v in 0..a {
            let mut best = (0, f64::NEG_INFINITY);
            for u in 0..a {
                let s = delta[(t - 1) * a + u] + p[(u + 1) * a + v];
                if s > best.1 {
                    best = (u, s);
                }
            }
            delta[t * a + v] = best.1 + phi.at(t, v);
            back[t * a + v] = best.0;
        }
    }
    let mut last = 0;
    for v in 1..a {
        if delta[(n - 1) * a + v] > delta[(n - 1) * a + last] {
            last = v;
        }
    }
    let score = delta[(n - 1) * a + last];
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t * a + path[t]];
    }
    if let Some(mask) = blocked {
        let mut prev = START;
        for &v in &path {
            if mask[prev * a + v] {
                return Err(CrfError::AllPathsBlocked);
            }
            prev = v + 1;
        }
    }
    Ok((path, score))
}

/// Per-step argmax of the emission rows, lowest index on ties.
pub fn argmax_rows(phi: &Tensor) -> Vec<usize> {
    (0..phi.rows())
        .map(|t| {
            let row = phi.row(t);
            (1..row.len()).fold(0, |best, v| if row[v] > row[best] { v } else { best })
        })
        .collect()
}

/// Emission head `φ = tanh(x · W_d) · W_a` plus a trainable transition
/// matrix whose blocked entries are frozen.
#[derive(Debug, Clone)]
pub struct CrfHead {
    pub w_d: ParamId,
    pub w_a: ParamId,
    pub psi: ParamId,
    pub prior: TransitionMatrix,
}

impl CrfHead {
    pub fn new(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        prior: TransitionMatrix,
        store: &mut ParamStore,
        rng: &mut Rng64,
    ) -> Self {
        let labels = prior.labels;
        let w_d = store.add(format!("{prefix}.w_d"), uniform_init(&[input_dim, hidden], rng));
        let w_a = store.add(format!("{prefix}.w_a"), uniform_init(&[hidden, labels], rng));
        let psi = store.add(format!("{prefix}.psi"), prior.tensor());
        store.set_frozen_mask(psi, prior.blocked.clone());
        Self { w_d, w_a, psi, prior }
    }

    pub fn labels(&self) -> usize {
        self.prior.labels
    }

    pub fn emissions<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        x.matmul(bound.get(self.w_d))?.tanh()?.matmul(bound.get(self.w_a))
    }

    /// Current transition matrix, blocking and counts from the prior.
    pub fn transitions(&self, store: &ParamStore) -> TransitionMatrix {
        self.prior.with_scores(store.get(self.psi))
    }
}

/// Rows `[t, t + 1]` of `cls` side by side, for `t = 0..n`: `[n + 1, d]` to
/// `[n, 2d]`.
pub fn consecutive_pairs<'t>(cls: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let rows = cls.shape()[0];
    if rows < 2 {
        return Err(NumericsError::Shape {
            op: "consecutive_pairs",
            detail: format!("{rows} rows, need at least 2"),
        });
    }
    Var::concat_cols(&[cls.slice_rows(0, rows - 1)?, cls.slice_rows(1, rows)?])
}
