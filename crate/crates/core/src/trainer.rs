//! Joint span and action training for the procedural task, prediction,
//! self-training augmentation, checkpoints and run manifests.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::{self, BlockedGoldPolicy, CrfError, CrfHead, TransitionMatrix};
use crate::encoder::{build_entity_inputs, decode_span, Ablations, Encoder, EncoderConfig, SpanChoice, StepInput};
use crate::ingest::{data_hash, Vocab};
use crate::metrics::{procedural_report, ProceduralReport};
use crate::numerics::{
    seeded_rng, softmax, Adam, AdamConfig, Bound, NumericsError, ParamStore, Rng64, Tape, Tensor, Var,
};
use crate::schema::{
    derive_states_lenient, legal_first, legal_successors, validate_actions, Action, EntityEntry, EntityTimeline,
    ProceduralExample, RecreationPolicy, SchemaError,
};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("paragraph '{para}' has no gold timeline for entity '{entity}'")]
    MissingGold { para: String, entity: String },
    #[error("non-finite loss at epoch {epoch}, step {step} (paragraph '{para}', entity '{entity}')")]
    NonFinite {
        epoch: usize,
        step: usize,
        para: String,
        entity: String,
    },
    #[error("no trainable examples")]
    EmptyData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl TrainError {
    /// Numeric failures as opposed to bad data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Numerics(_) | TrainError::Crf(CrfError::NonFinite { .. })
        )
    }
}

/// Divisor of the summed location log-likelihoods.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocDivisor {
    /// `n + 1`, the number of summed terms.
    #[default]
    StepsPlusOne,
    /// `n`.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs on gold data.
    pub epochs: usize,
    /// Epochs of the second run on gold plus pseudo-labeled data.
    pub augmented_epochs: usize,
    /// Entities whose gradients are summed per optimizer step.
    pub accumulation: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub loc_divisor: LocDivisor,
    pub blocked_gold: BlockedGoldPolicy,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            augmented_epochs: 6,
            accumulation: 1,
            seed: 0,
            ablations: Ablations::default(),
            loc_divisor: LocDivisor::default(),
            blocked_gold: BlockedGoldPolicy::default(),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Published hyperparameters for a pretrained encoder.
    pub fn published() -> Self {
        Self {
            lr: 1e-5,
            accumulation: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.augmented_epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.accumulation == 0 {
            return Err(TrainError::Config("accumulation must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// sha256 of the canonical JSON form of any serializable value.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    data_hash(&serde_json::to_vec(value).expect("serializable"))
}

/// Location loss from `[S, m]` start and end logits.
pub fn location_loss<'t>(
    start: Var<'t>,
    end: Var<'t>,
    targets: &[(usize, usize)],
    divisor: LocDivisor,
) -> Result<Var<'t>, NumericsError> {
    let ys: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let ye: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let steps = targets.len();
    let denom = match divisor {
        LocDivisor::StepsPlusOne => steps,
        LocDivisor::Steps => steps.saturating_sub(1).max(1),
    };
    start.cross_entropy(&ys)?.add(end.cross_entropy(&ye)?)?.scale(1.0 / denom as f64)
}

/// Action indices of every gold timeline in annotated examples.
pub fn action_sequences(examples: &[ProceduralExample]) -> Vec<Vec<usize>> {
    examples
        .iter()
        .filter(|e| e.annotated)
        .flat_map(|e| e.entities.iter())
        .filter_map(|e| e.timeline.as_ref())
        .map(|tl| tl.actions().iter().map(|a| a.index()).collect())
        .collect()
}

/// Loss terms of one entity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub location: f64,
    pub action: f64,
}

/// Decoded output for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityDecode {
    pub entity: String,
    pub actions: Vec<Action>,
    pub spans: Vec<SpanChoice>,
    pub timeline: EntityTimeline,
    /// The raw action path was illegal, so the timeline uses the greedy
    /// legal path instead (only possible without the CRF).
    pub repaired: bool,
}

/// Encoder, span head and action CRF with their parameters.
#[derive(Debug, Clone)]
pub struct ProceduralModel {
    pub encoder: Encoder,
    pub head: CrfHead,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub ablations: Ablations,
}

impl ProceduralModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: EncoderConfig, ablations: Ablations, prior: TransitionMatrix, seed: u64) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        if prior.labels != Action::ALL.len() {
            return Err(TrainError::Config(format!("prior has {} labels, need 6", prior.labels)));
        }
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let encoder = Encoder::new(config, &mut store, &mut rng);
        let head = CrfHead::new("action", 2 * d, d, prior, &mut store, &mut rng);
        Ok(Self {
            encoder,
            head,
            store,
            vocab: Vocab::new(config.vocab_size),
            ablations,
        })
    }

    /// Fresh model whose transition prior comes from `train`.
    pub fn for_data(
        config: EncoderConfig,
        ablations: Ablations,
        train: &[ProceduralExample],
        seed: u64,
    ) -> Result<Self, TrainError> {
        let prior = TransitionMatrix::from_sequences(&action_sequences(train), Action::ALL.len())?;
        Self::new(config, ablations, prior, seed)
    }

    pub fn inputs(&self, example: &ProceduralExample, entity: &str) -> Vec<StepInput> {
        build_entity_inputs(example, entity, 0..=example.steps(), &self.vocab, &self.encoder.config, &self.ablations)
    }

    /// Start logits, end logits and emissions for every step of `entity`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        inputs: &[StepInput],
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>), NumericsError> {
        let encoded = self.encoder.encode(bound, inputs, self.ablations.no_t)?;
        let (start, end) = self.encoder.span_logits(tape, bound, &encoded, inputs)?;
        let phi = self.head.emissions(bound, crf::consecutive_pairs(encoded.cls()?)?)?;
        Ok((start, end, phi))
    }

    /// Joint loss of one annotated entity.
    pub fn entity_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        example: &ProceduralExample,
        entity: &EntityEntry,
        config: &TrainConfig,
    ) -> Result<(Var<'t>, LossParts), TrainError> {
        let timeline = entity.timeline.as_ref().ok_or_else(|| TrainError::MissingGold {
            para: example.para_id.clone(),
            entity: entity.name.clone(),
        })?;
        let inputs = self.inputs(example, &entity.name);
        let targets: Vec<(usize, usize)> = inputs
            .iter()
            .zip(timeline.states())
            .map(|(inp, s)| inp.target(s))
            .collect();
        let gold: Vec<usize> = timeline.actions().iter().map(|a| a.index()).collect();
        let (start, end, phi) = self.forward(tape, bound, &inputs)?;
        let loc = location_loss(start, end, &targets, config.loc_divisor)?;
        let action = if self.ablations.no_go {
            phi.cross_entropy(&gold)?
        } else {
            let blocked = &self.head.prior.blocked;
            crf::nll(phi, bound.get(self.head.psi), &gold, Some(blocked), config.blocked_gold)?
        };
        let parts = LossParts {
            location: loc.value().item(),
            action: action.value().item(),
        };
        Ok((loc.add(action)?, parts))
    }

    /// Actions and spans for every step of `entity`.
    pub fn decode_entity(&self, example: &ProceduralExample, entity: &str) -> Result<EntityDecode, TrainError> {
        let inputs = self.inputs(example, entity);
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let (start, end, phi) = self.forward(&tape, &bound, &inputs)?;
        let (ps, pe) = (softmax(&start.value()), softmax(&end.value()));
        let phi = phi.value();
        let labels = if self.ablations.no_go {
            crf::argmax_rows(&phi)
        } else {
            let psi = self.store.get(self.head.psi);
            crf::viterbi(&phi, psi, Some(&self.head.prior.blocked))?.0
        };
        let actions: Vec<Action> = labels
            .iter()
            .map(|&l| Action::from_index(l).expect("label inside the action space"))
            .collect();
        let mut spans = Vec::with_capacity(inputs.len());
        let mut texts = Vec::with_capacity(inputs.len());
        for (s, inp) in inputs.iter().enumerate() {
            let (choice, _) = decode_span(ps.row(s), pe.row(s), inp.paragraph.clone(), self.encoder.config.max_span_len);
            texts.push(match choice {
                SpanChoice::Cls => None,
                SpanChoice::Tokens { start, end } => inp.span_text(example, start, end),
            });
            spans.push(choice);
        }
        let repaired = validate_actions(&actions, RecreationPolicy::Reject).is_err();
        let path = if repaired { legal_argmax(&phi) } else { actions.clone() };
        let states = derive_states_lenient(&path, &texts)?;
        let timeline = EntityTimeline::with_actions(entity, states, path)?;
        Ok(EntityDecode {
            entity: entity.to_string(),
            actions,
            spans,
            timeline,
            repaired,
        })
    }

    /// `example` with every entity's timeline replaced by a prediction.
    pub fn predict(&self, example: &ProceduralExample) -> Result<ProceduralExample, TrainError> {
        let mut out = example.clone();
        out.annotated = true;
        for e in &mut out.entities {
            e.timeline = Some(self.decode_entity(example, &e.name)?.timeline);
        }
        Ok(out)
    }

    pub fn predict_all(&self, examples: &[ProceduralExample]) -> Result<Vec<ProceduralExample>, TrainError> {
        examples.iter().map(|e| self.predict(e)).collect()
    }
}

/// Step-by-step argmax restricted to legal successors of the previous pick.
fn legal_argmax(phi: &Tensor) -> Vec<Action> {
    let mut path: Vec<Action> = Vec::with_capacity(phi.rows());
    for t in 0..phi.rows() {
        let row = phi.row(t);
        let allowed: Vec<Action> = match path.last() {
            None => Action::ALL.iter().copied().filter(|&a| legal_first(a)).collect(),
            Some(&prev) => legal_successors(prev).to_vec(),
        };
        let best = allowed
            .into_iter()
            .fold(None, |best: Option<Action>, a| match best {
                Some(b) if row[b.index()] >= row[a.index()] => Some(b),
                _ => Some(a),
            })
            .expect("every action has a legal successor");
        path.push(best);
    }
    path
}

/// How well a model reproduces gold actions and span targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub action_accuracy: f64,
    pub span_accuracy: f64,
    pub actions: usize,
    pub spans: usize,
    pub repaired: usize,
}

pub fn fit_report(model: &ProceduralModel, examples: &[ProceduralExample]) -> Result<FitReport, TrainError> {
    let (mut act_ok, mut acts, mut span_ok, mut spans, mut repaired) = (0, 0, 0, 0, 0);
    for ex in examples.iter().filter(|e| e.annotated) {
        for e in &ex.entities {
            let Some(gold) = &e.timeline else { continue };
            let dec = model.decode_entity(ex, &e.name)?;
            repaired += dec.repaired as usize;
            acts += gold.actions().len();
            act_ok += gold.actions().iter().zip(&dec.actions).filter(|(g, p)| g == p).count();
            let inputs = model.inputs(ex, &e.name);
            for ((inp, state), choice) in inputs.iter().zip(gold.states()).zip(&dec.spans) {
                let target = match inp.target(state) {
                    (0, 0) => SpanChoice::Cls,
                    (start, end) => SpanChoice::Tokens { start, end },
                };
                spans += 1;
                span_ok += (target == *choice) as usize;
            }
        }
    }
    let rate = |ok: usize, total: usize| if total == 0 { 1.0 } else { ok as f64 / total as f64 };
    Ok(FitReport {
        action_accuracy: rate(act_ok, acts),
        span_accuracy: rate(span_ok, spans),
        actions: acts,
        spans,
        repaired,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_location_loss: f64,
    pub mean_action_loss: f64,
    pub optimizer_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_fit: Option<FitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_metrics: Option<ProceduralReport>,
}

/// Runs the optimizer over `order` once. `loss` returns the unit's loss and
/// its logged components; `label` names a unit in error messages.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch<L, N>(
    store: &mut ParamStore,
    adam: &mut Adam,
    order: &[usize],
    accumulation: usize,
    epoch: usize,
    mut loss: L,
    label: N,
) -> Result<(f64, Vec<f64>), TrainError>
where
    L: for<'t> FnMut(&'t Tape, &Bound<'t>, usize) -> Result<(Var<'t>, Vec<f64>), TrainError>,
    N: Fn(usize) -> (String, String),
{
    let mut acc: Option<Vec<Tensor>> = None;
    let mut pending = 0;
    let (mut total, mut parts_total) = (0.0, Vec::new());
    for (step, &unit) in order.iter().enumerate() {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (l, parts) = loss(&tape, &bound, unit)?;
        let value = l.value().item();
        let mut grads = tape.backward(l)?;
        let grads = store.collect_grads(&bound, &mut grads);
        if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            let (para, entity) = label(unit);
            return Err(TrainError::NonFinite {
                epoch,
                step,
                para,
                entity,
            });
        }
        total += value;
        parts_total.resize(parts.len(), 0.0);
        for (t, p) in parts_total.iter_mut().zip(&parts) {
            *t += p;
        }
        match &mut acc {
            None => acc = Some(grads),
            Some(sum) => sum.iter_mut().zip(&grads).for_each(|(s, g)| s.add_assign(g)),
        }
        pending += 1;
        if pending == accumulation {
            adam.step(store, &acc.take().expect("accumulated"));
            pending = 0;
        }
    }
    if let Some(sum) = acc {
        adam.step(store, &sum);
    }
    let count = order.len().max(1) as f64;
    Ok((total / count, parts_total.iter().map(|p| p / count).collect()))
}

fn training_units(examples: &[ProceduralExample]) -> Result<Vec<(usize, usize)>, TrainError> {
    let mut units = Vec::new();
    for (i, ex) in examples.iter().enumerate().filter(|(_, e)| e.annotated) {
        for (j, e) in ex.entities.iter().enumerate() {
            if e.timeline.is_none() {
                return Err(TrainError::MissingGold {
                    para: ex.para_id.clone(),
                    entity: e.name.clone(),
                });
            }
            units.push((i, j));
        }
    }
    if units.is_empty() {
        return Err(TrainError::EmptyData);
    }
    Ok(units)
}

/// Shuffling stream, separate from the initialization stream.
pub(crate) fn shuffle_rng(seed: u64) -> Rng64 {
    seeded_rng(seed ^ 0x9E37_79B9_7F4A_7C15)
}

/// Trains for `epochs` epochs, evaluating on `dev` after each one.
pub fn train(
    model: &mut ProceduralModel,
    data: &[ProceduralExample],
    dev: Option<&[ProceduralExample]>,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochRecord>, TrainError> {
    train_with(model, data, dev, config, epochs, |_, _| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch. The callback sees the updated
/// model and may stop training by returning `Break`.
pub fn train_with(
    model: &mut ProceduralModel,
    data: &[ProceduralExample],
    dev: Option<&[ProceduralExample]>,
    config: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &ProceduralModel) -> ControlFlow<()>,
) -> Result<Vec<EpochRecord>, TrainError> {
    config.validate()?;
    let units = training_units(data)?;
    let mut adam = Adam::new(config.adam(), &model.store);
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        // the loss reads parameters only through the tape, so the store can
        // be lent to the optimizer while the model is borrowed
        let mut store = std::mem::take(&mut model.store);
        let view: &ProceduralModel = model;
        let result = run_epoch(
            &mut store,
            &mut adam,
            &order,
            config.accumulation,
            epoch,
            |tape, bound, u| {
                let (ei, ni) = units[u];
                let (l, p) = view.entity_loss(tape, bound, &data[ei], &data[ei].entities[ni], config)?;
                Ok((l, vec![p.location, p.action]))
            },
            |u| {
                let (ei, ni) = units[u];
                (data[ei].para_id.clone(), data[ei].entities[ni].name.clone())
            },
        );
        model.store = store;
        let (mean_loss, parts) = result?;
        let (dev_fit, dev_metrics) = match dev {
            Some(dev) => (
                Some(fit_report(model, dev)?),
                Some(procedural_report(dev, &model.predict_all(dev)?)),
            ),
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            mean_loss,
            mean_location_loss: parts[0],
            mean_action_loss: parts[1],
            optimizer_steps: adam.steps(),
            dev_fit,
            dev_metrics,
        };
        let flow = on_epoch(&record, model);
        history.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(history)
}

/// Pseudo-labels every pool paragraph that lists entities. Returns the
/// labeled examples and the ids of skipped paragraphs.
pub fn augment(
    model: &ProceduralModel,
    pool: &[ProceduralExample],
) -> Result<(Vec<ProceduralExample>, Vec<String>), TrainError> {
    let mut labeled = Vec::new();
    let mut skipped = Vec::new();
    for ex in pool {
        if ex.entities.is_empty() {
            skipped.push(ex.para_id.clone());
            continue;
        }
        let mut p = model.predict(ex)?;
        p.pseudo = true;
        labeled.push(p);
    }
    Ok((labeled, skipped))
}

/// A parameter tensor by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

pub(crate) fn dump_params(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .ids()
        .map(|id| NamedTensor {
            name: store.name(id).to_string(),
            value: store.get(id).clone(),
        })
        .collect()
}

pub(crate) fn load_params(store: &mut ParamStore, params: &[NamedTensor]) -> Result<(), TrainError> {
    if params.len() != store.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} tensors stored, model has {}",
            params.len(),
            store.len()
        )));
    }
    for p in params {
        let id = store
            .id(&p.name)
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter '{}'", p.name)))?;
        if store.get(id).shape() != p.value.shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                p.name,
                p.value.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, p.value.clone());
    }
    Ok(())
}

/// JSON checkpoint of a procedural model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task: String,
    pub encoder: EncoderConfig,
    pub ablations: Ablations,
    pub prior: TransitionMatrix,
    /// sha256 of the training data.
    pub data_hash: String,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &ProceduralModel, data_hash: String) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            task: "procedural".into(),
            encoder: model.encoder.config,
            ablations: model.ablations,
            prior: model.head.prior.clone(),
            data_hash,
            params: dump_params(&model.store),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        if ck.task != "procedural" {
            return Err(TrainError::Checkpoint(format!("expected a procedural checkpoint, found '{}'", ck.task)));
        }
        Ok(ck)
    }

    pub fn into_model(self) -> Result<ProceduralModel, TrainError> {
        let mut model = ProceduralModel::new(self.encoder, self.ablations, self.prior, 0)?;
        load_params(&mut model.store, &self.params)?;
        Ok(model)
    }
}

/// Record of one training run or pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub stage: String,
    pub task: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub data_hashes: BTreeMap<String, String>,
    pub ablations: Ablations,
    pub epochs: usize,
    pub history: Vec<serde_json::Value>,
    pub final_metrics: serde_json::Value,
    /// sha256 of the checkpoint JSON written by this stage, if any.
    pub checkpoint_hash: Option<String>,
    /// `manifest_hash` of upstream stages.
    pub parents: Vec<String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    /// sha256 of this manifest's JSON.
    pub fn manifest_hash(&self) -> String {
        json_hash(self)
    }
}

/// Artifacts of one procedural training stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub model: ProceduralModel,
    pub checkpoint: Checkpoint,
    pub manifest: RunManifest,
    pub history: Vec<EpochRecord>,
}

/// Builds a model for `data`, trains it and records the run.
pub fn train_stage(
    stage: &str,
    encoder: EncoderConfig,
    data: &[ProceduralExample],
    dev: Option<&[ProceduralExample]>,
    config: &TrainConfig,
    epochs: usize,
    parents: Vec<String>,
) -> Result<StageOutput, TrainError> {
    let mut model = ProceduralModel::for_data(encoder, config.ablations, data, config.seed)?;
    let history = train(&mut model, data, dev, config, epochs)?;
    let train_hash = data_hash(crate::ingest::procedural::to_jsonl(data, true).as_bytes());
    let checkpoint = Checkpoint::from_model(&model, train_hash.clone());
    let mut data_hashes = BTreeMap::from([("train".to_string(), train_hash)]);
    if let Some(dev) = dev {
        data_hashes.insert(
            "dev".into(),
            data_hash(crate::ingest::procedural::to_jsonl(dev, true).as_bytes()),
        );
    }
    let final_metrics = serde_json::json!({
        "train_fit": fit_report(&model, data)?,
        "dev": history.last().and_then(|h| h.dev_metrics.clone()),
    });
    let config_json = serde_json::json!({ "train": config, "encoder": encoder });
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        stage: stage.into(),
        task: "procedural".into(),
        seed: config.seed,
        config_hash: json_hash(&config_json),
        config: config_json,
        data_hashes,
        ablations: config.ablations,
        epochs,
        history: history.iter().map(|h| serde_json::to_value(h).expect("serializable")).collect(),
        final_metrics,
        checkpoint_hash: Some(data_hash(checkpoint.to_json().as_bytes())),
        parents,
        notes: Vec::new(),
    };
    Ok(StageOutput {
        model,
        checkpoint,
        manifest,
        history,
    })
}

/// Gold training, pseudo-labeling and the second run.
#[derive(Debug, Clone)]
pub struct AugmentationRun {
    pub gold: StageOutput,
    pub pseudo_labels: Vec<ProceduralExample>,
    pub label_manifest: RunManifest,
    pub augmented: StageOutput,
}

/// Trains on gold for `config.epochs`, labels `pool`, then trains a fresh
/// model on gold plus pseudo-labels for `config.augmented_epochs`.
pub fn augmentation_pipeline(
    encoder: EncoderConfig,
    gold: &[ProceduralExample],
    pool: &[ProceduralExample],
    dev: Option<&[ProceduralExample]>,
    config: &TrainConfig,
) -> Result<AugmentationRun, TrainError> {
    let first = train_stage("gold", encoder, gold, dev, config, config.epochs, Vec::new())?;
    let (labels, skipped) = augment(&first.model, pool)?;
    let pool_hash = data_hash(crate::ingest::procedural::to_jsonl(pool, false).as_bytes());
    let labels_hash = data_hash(crate::ingest::procedural::to_jsonl(&labels, true).as_bytes());
    let label_manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        stage: "pseudo_label".into(),
        task: "procedural".into(),
        seed: config.seed,
        config: first.manifest.config.clone(),
        config_hash: first.manifest.config_hash.clone(),
        data_hashes: BTreeMap::from([("pool".to_string(), pool_hash), ("pseudo_labels".to_string(), labels_hash)]),
        ablations: config.ablations,
        epochs: 0,
        history: Vec::new(),
        final_metrics: serde_json::json!({ "labeled": labels.len(), "skipped": skipped.len() }),
        checkpoint_hash: None,
        parents: vec![first.manifest.manifest_hash()],
        notes: skipped
            .iter()
            .map(|id| format!("skipped '{id}': no entity list"))
            .collect(),
    };
    let mut mixed = gold.to_vec();
    mixed.extend(labels.iter().cloned());
    let second = train_stage(
        "augmented",
        encoder,
        &mixed,
        dev,
        config,
        config.augmented_epochs,
        vec![label_manifest.manifest_hash()],
    )?;
    Ok(AugmentationRun {
        gold: first,
        pseudo_labels: labels,
        label_manifest,
        augmented: second,
    })
}
