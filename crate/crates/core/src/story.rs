//! Story pairs: per-attribute precondition and effect CRFs over step
//! encodings, conflicting-pair detection and plausibility classification.
//!
//! Each story of a pair is encoded once per entity over steps `1..=n`. The
//! plausibility and conflict logits of the entities are averaged at
//! prediction time; during training each entity contributes its own loss
//! terms and the story loss is the mean over entities.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::crf::{self, BlockedGoldPolicy, CrfError, CrfHead, TransitionMatrix};
use crate::encoder::{build_entity_inputs, Ablations, Encoder, EncoderConfig, StepInput};
use crate::ingest::{data_hash, Vocab};
use crate::metrics::{story_metrics, PredictedAttributes, PredictedEntity, StoryOutput, StoryReport};
use crate::numerics::{
    seeded_rng, softmax, uniform_init, Adam, AdamConfig, Bound, NumericsError, ParamId, ParamStore, Tape, Tensor,
    Var,
};
use crate::schema::{pair_count, pair_from_index, pair_index, AttributeRegistry, ProceduralExample, StoryPair};
use crate::trainer::{
    dump_params, json_hash, load_params, run_epoch, shuffle_rng, NamedTensor, RunManifest, TrainError,
    CHECKPOINT_VERSION, MANIFEST_VERSION,
};

/// Precondition or effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Pre,
    Eff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoryConfig {
    pub lr: f64,
    pub epochs: usize,
    pub accumulation: usize,
    pub seed: u64,
    pub ablations: Ablations,
    /// Per-step cross-entropy instead of the attribute CRFs.
    pub no_crf: bool,
    /// Train the plausible story of every pair a second time per epoch.
    pub upsample_plausible: bool,
    pub shuffle: bool,
}

impl Default for StoryConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            accumulation: 1,
            seed: 0,
            ablations: Ablations::default(),
            no_crf: true,
            upsample_plausible: false,
            shuffle: true,
        }
    }
}

impl StoryConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.accumulation == 0 {
            return Err(TrainError::Config("epochs and accumulation must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

/// Label sequences of one attribute and side over every entity and story.
fn attribute_sequences(pairs: &[StoryPair], b: usize, side: Side) -> Vec<Vec<usize>> {
    pairs
        .iter()
        .flat_map(|p| p.entities.iter().flatten())
        .map(|e| match side {
            Side::Pre => e.pre_sequence(b),
            Side::Eff => e.eff_sequence(b),
        })
        .collect()
}

/// Data-derived prior, or an all-zero matrix when the data has no
/// adjacent steps.
pub fn attribute_prior(pairs: &[StoryPair], labels: usize, b: usize, side: Side) -> Result<TransitionMatrix, CrfError> {
    match TransitionMatrix::from_sequences(&attribute_sequences(pairs, b, side), labels) {
        Err(CrfError::NoTransitions) => Ok(TransitionMatrix::uniform(labels)),
        other => other,
    }
}

/// Logits of one entity's view of one story.
pub struct StoryLogits<'t> {
    /// `[n, d]` step encodings.
    pub steps: Var<'t>,
    /// `[1, 2]`, class 1 is plausible.
    pub plausibility: Var<'t>,
    /// `[1, n(n-1)/2]` in row-major pair order; `None` when `n < 2`.
    pub conflict: Option<Var<'t>>,
}

/// Encoder plus the `2B` attribute CRFs, conflict and plausibility heads.
#[derive(Debug, Clone)]
pub struct StoryModel {
    pub encoder: Encoder,
    pub registry: AttributeRegistry,
    pub pre: Vec<CrfHead>,
    pub eff: Vec<CrfHead>,
    pub w_confl: ParamId,
    pub w_plau: ParamId,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub ablations: Ablations,
    pub no_crf: bool,
}

impl StoryModel {
    pub fn new(
        config: EncoderConfig,
        registry: AttributeRegistry,
        priors: Vec<(TransitionMatrix, TransitionMatrix)>,
        ablations: Ablations,
        no_crf: bool,
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        if priors.len() != registry.len() {
            return Err(TrainError::Config(format!(
                "{} priors for {} attributes",
                priors.len(),
                registry.len()
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let encoder = Encoder::new(config, &mut store, &mut rng);
        let (mut pre, mut eff) = (Vec::new(), Vec::new());
        for ((pp, pe), attr) in priors.into_iter().zip(&registry.attributes) {
            if pp.labels != attr.labels || pe.labels != attr.labels {
                return Err(TrainError::Config(format!("prior label count mismatch for '{}'", attr.name)));
            }
            pre.push(CrfHead::new(&format!("pre.{}", attr.name), d, d, pp, &mut store, &mut rng));
            eff.push(CrfHead::new(&format!("eff.{}", attr.name), d, d, pe, &mut store, &mut rng));
        }
        let w_confl = store.add("w_confl", uniform_init(&[2 * d, 1], &mut rng));
        let w_plau = store.add("w_plau", uniform_init(&[d, 2], &mut rng));
        Ok(Self {
            encoder,
            vocab: Vocab::new(config.vocab_size),
            registry,
            pre,
            eff,
            w_confl,
            w_plau,
            store,
            ablations,
            no_crf,
        })
    }

    /// Fresh model with priors from `pairs`.
    pub fn for_data(
        config: EncoderConfig,
        registry: AttributeRegistry,
        pairs: &[StoryPair],
        ablations: Ablations,
        no_crf: bool,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut priors = Vec::with_capacity(registry.len());
        for (b, attr) in registry.attributes.iter().enumerate() {
            priors.push((
                attribute_prior(pairs, attr.labels, b, Side::Pre)?,
                attribute_prior(pairs, attr.labels, b, Side::Eff)?,
            ));
        }
        Self::new(config, registry, priors, ablations, no_crf, seed)
    }

    pub fn heads(&self, side: Side) -> &[CrfHead] {
        match side {
            Side::Pre => &self.pre,
            Side::Eff => &self.eff,
        }
    }

    /// Step inputs of `entity` for sentences `1..=n` of a story.
    pub fn inputs(&self, sentences: &[String], entity: &str) -> Vec<StepInput> {
        let ex = ProceduralExample {
            para_id: String::new(),
            sentences: sentences.to_vec(),
            entities: Vec::new(),
            annotated: false,
            pseudo: false,
        };
        build_entity_inputs(&ex, entity, 1..=sentences.len(), &self.vocab, &self.encoder.config, &self.ablations)
    }

    pub fn encode_story<'t>(
        &self,
        bound: &Bound<'t>,
        sentences: &[String],
        entity: &str,
    ) -> Result<Var<'t>, NumericsError> {
        let inputs = self.inputs(sentences, entity);
        self.encoder.encode(bound, &inputs, self.ablations.no_t)?.cls()
    }

    /// Conflict and plausibility logits from `[n, d]` step encodings.
    pub fn heads_logits<'t>(&self, bound: &Bound<'t>, steps: Var<'t>) -> Result<StoryLogits<'t>, NumericsError> {
        let n = steps.shape()[0];
        let d = steps.shape()[1];
        let plausibility = steps.mean_rows()?.reshape(&[1, d])?.matmul(bound.get(self.w_plau))?;
        let conflict = if n >= 2 {
            let p = pair_count(n);
            let (mut left, mut right) = (Vec::with_capacity(p), Vec::with_capacity(p));
            for i in 0..p {
                let (t, j) = pair_from_index(n, i).expect("index below pair count");
                left.push(t - 1);
                right.push(j - 1);
            }
            let pairs = Var::concat_cols(&[steps.gather(&left)?, steps.gather(&right)?])?;
            Some(pairs.matmul(bound.get(self.w_confl))?.reshape(&[1, p])?)
        } else {
            None
        };
        Ok(StoryLogits {
            steps,
            plausibility,
            conflict,
        })
    }

    /// Attribute loss of one entity: mean over attributes of the
    /// precondition and effect sequence losses.
    pub fn attribute_loss<'t>(
        &self,
        bound: &Bound<'t>,
        steps: Var<'t>,
        entity: &crate::schema::StoryEntity,
    ) -> Result<Var<'t>, TrainError> {
        let b = self.registry.len();
        let mut terms = Vec::with_capacity(2 * b);
        for k in 0..b {
            for (side, gold) in [(Side::Pre, entity.pre_sequence(k)), (Side::Eff, entity.eff_sequence(k))] {
                let head = &self.heads(side)[k];
                let phi = head.emissions(bound, steps)?;
                terms.push(if self.no_crf {
                    phi.cross_entropy(&gold)?
                } else {
                    let psi = bound.get(head.psi);
                    crf::nll(phi, psi, &gold, Some(&head.prior.blocked), BlockedGoldPolicy::Proceed)?
                });
            }
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = total.add(*t)?;
        }
        Ok(total.scale(1.0 / b as f64)?)
    }

    /// Loss of story `s` of `pair`, averaged over its entities.
    pub fn story_loss<'t>(&self, bound: &Bound<'t>, pair: &StoryPair, s: usize) -> Result<Var<'t>, TrainError> {
        let sentences = &pair.stories[s];
        let n = sentences.len();
        let plausible = s == pair.plausible;
        let entities = &pair.entities[s];
        if entities.is_empty() {
            return Err(TrainError::Config(format!("pair '{}' story {s} has no entities", pair.pair_id)));
        }
        let mut total: Option<Var<'t>> = None;
        for e in entities {
            let steps = self.encode_story(bound, sentences, &e.name)?;
            let logits = self.heads_logits(bound, steps)?;
            let mut l = logits.plausibility.cross_entropy(&[plausible as usize])?;
            if !plausible {
                let target = pair_index(n, pair.conflict.0, pair.conflict.1)
                    .ok_or_else(|| TrainError::Config(format!("pair '{}' has an invalid conflict", pair.pair_id)))?;
                let conflict = logits
                    .conflict
                    .ok_or_else(|| TrainError::Config(format!("pair '{}' has fewer than 2 sentences", pair.pair_id)))?;
                l = l.add(conflict.cross_entropy(&[target])?)?;
            }
            l = l.add(self.attribute_loss(bound, steps, e)?)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(l)?,
            });
        }
        Ok(total.expect("nonempty").scale(1.0 / entities.len() as f64)?)
    }

    /// Sum of both stories' losses.
    pub fn pair_loss<'t>(&self, bound: &Bound<'t>, pair: &StoryPair) -> Result<Var<'t>, TrainError> {
        Ok(self.story_loss(bound, pair, 0)?.add(self.story_loss(bound, pair, 1)?)?)
    }

    /// Attribute labels of every step from `[n, d]` step encodings.
    fn decode_attributes(&self, bound: &Bound<'_>, steps: Var<'_>, side: Side) -> Result<Vec<Vec<usize>>, TrainError> {
        let n = steps.shape()[0];
        let mut rows = vec![Vec::with_capacity(self.registry.len()); n];
        for head in self.heads(side) {
            let phi = head.emissions(bound, steps)?.value();
            let labels = if self.no_crf {
                crf::argmax_rows(&phi)
            } else {
                match crf::viterbi(&phi, self.store.get(head.psi), Some(&head.prior.blocked)) {
                    Ok((path, _)) => path,
                    // a label sequence never seen in training; fall back to local decisions
                    Err(CrfError::AllPathsBlocked) => crf::argmax_rows(&phi),
                    Err(e) => return Err(e.into()),
                }
            };
            for (row, l) in rows.iter_mut().zip(labels) {
                row.push(l);
            }
        }
        Ok(rows)
    }

    /// Entity-averaged logits and attribute predictions of one story.
    pub fn predict_story(&self, sentences: &[String], entities: &[String]) -> Result<StoryPrediction, TrainError> {
        let n = sentences.len();
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let mut plau = [0.0; 2];
        let mut confl = vec![0.0; pair_count(n)];
        let mut attrs = Vec::with_capacity(entities.len());
        for name in entities {
            let steps = self.encode_story(&bound, sentences, name)?;
            let logits = self.heads_logits(&bound, steps)?;
            for (a, x) in plau.iter_mut().zip(logits.plausibility.value().data()) {
                *a += x;
            }
            if let Some(c) = logits.conflict {
                for (a, x) in confl.iter_mut().zip(c.value().data()) {
                    *a += x;
                }
            }
            attrs.push(PredictedEntity {
                name: name.clone(),
                pre: self.decode_attributes(&bound, steps, Side::Pre)?,
                eff: self.decode_attributes(&bound, steps, Side::Eff)?,
            });
        }
        let k = entities.len().max(1) as f64;
        plau.iter_mut().for_each(|x| *x /= k);
        confl.iter_mut().for_each(|x| *x /= k);
        let plausibility = softmax(&Tensor::vector(plau.to_vec()));
        let conflict = if confl.is_empty() {
            Vec::new()
        } else {
            softmax(&Tensor::vector(confl.clone())).into_data()
        };
        Ok(StoryPrediction {
            plausibility_logits: plau,
            plausibility: [plausibility.data()[0], plausibility.data()[1]],
            conflict_logits: confl,
            conflict,
            entities: attrs,
        })
    }

    /// Pair decision: the story with the larger plausible-class probability
    /// is chosen (story 0 on ties); the conflict is read from the other one.
    pub fn predict_pair(&self, pair: &StoryPair) -> Result<(StoryOutput, [StoryPrediction; 2]), TrainError> {
        let names = |s: usize| pair.entities[s].iter().map(|e| e.name.clone()).collect::<Vec<_>>();
        let p0 = self.predict_story(&pair.stories[0], &names(0))?;
        let p1 = self.predict_story(&pair.stories[1], &names(1))?;
        let chosen = if p1.plausibility[1] > p0.plausibility[1] { 1 } else { 0 };
        let other = if chosen == 0 { &p1 } else { &p0 };
        let n = pair.steps();
        let best = argmax_first(&other.conflict_logits);
        let (c1, c2) = best.and_then(|i| pair_from_index(n, i)).unwrap_or((0, 0));
        let output = StoryOutput {
            pair_id: pair.pair_id.clone(),
            chosen,
            conflict: [c1, c2],
            attributes: PredictedAttributes {
                stories: [p0.entities.clone(), p1.entities.clone()],
            },
            plausibility: Some([p0.plausibility[1], p1.plausibility[1]]),
        };
        Ok((output, [p0, p1]))
    }

    pub fn predict_all(&self, pairs: &[StoryPair]) -> Result<Vec<StoryOutput>, TrainError> {
        pairs.iter().map(|p| self.predict_pair(p).map(|x| x.0)).collect()
    }
}

fn argmax_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|b| b.0)
}

/// Entity-averaged outputs for one story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryPrediction {
    pub plausibility_logits: [f64; 2],
    pub plausibility: [f64; 2],
    pub conflict_logits: Vec<f64>,
    /// Distribution over sentence pairs in row-major order.
    pub conflict: Vec<f64>,
    pub entities: Vec<PredictedEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryEpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub optimizer_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<StoryReport>,
}

/// One training unit: a full pair, or the plausible story alone.
#[derive(Debug, Clone, Copy)]
enum Unit {
    Pair(usize),
    Plausible(usize),
}

pub fn train_story(
    model: &mut StoryModel,
    pairs: &[StoryPair],
    dev: Option<&[StoryPair]>,
    config: &StoryConfig,
) -> Result<Vec<StoryEpochRecord>, TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut units: Vec<Unit> = (0..pairs.len()).map(Unit::Pair).collect();
    if config.upsample_plausible {
        units.extend((0..pairs.len()).map(Unit::Plausible));
    }
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.store);
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut store = std::mem::take(&mut model.store);
        let view: &StoryModel = model;
        let result = run_epoch(
            &mut store,
            &mut adam,
            &order,
            config.accumulation,
            epoch,
            |_tape, bound, u| {
                let l = match units[u] {
                    Unit::Pair(i) => view.pair_loss(bound, &pairs[i])?,
                    Unit::Plausible(i) => view.story_loss(bound, &pairs[i], pairs[i].plausible)?,
                };
                Ok((l, Vec::new()))
            },
            |u| {
                let i = match units[u] {
                    Unit::Pair(i) | Unit::Plausible(i) => i,
                };
                (pairs[i].pair_id.clone(), String::new())
            },
        );
        model.store = store;
        let (mean_loss, _) = result?;
        let dev_report = match dev {
            Some(dev) => Some(story_metrics(&model.registry, dev, &model.predict_all(dev)?).map_err(|e| TrainError::Config(e.to_string()))?),
            None => None,
        };
        history.push(StoryEpochRecord {
            epoch,
            mean_loss,
            optimizer_steps: adam.steps(),
            dev: dev_report,
        });
    }
    Ok(history)
}

/// JSON checkpoint of a story model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryCheckpoint {
    pub format_version: u32,
    pub task: String,
    pub encoder: EncoderConfig,
    pub ablations: Ablations,
    pub no_crf: bool,
    pub registry: AttributeRegistry,
    pub priors: Vec<(TransitionMatrix, TransitionMatrix)>,
    pub data_hash: String,
    pub params: Vec<NamedTensor>,
}

impl StoryCheckpoint {
    pub fn from_model(model: &StoryModel, data_hash: String) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            task: "story".into(),
            encoder: model.encoder.config,
            ablations: model.ablations,
            no_crf: model.no_crf,
            registry: model.registry.clone(),
            priors: model
                .pre
                .iter()
                .zip(&model.eff)
                .map(|(p, e)| (p.prior.clone(), e.prior.clone()))
                .collect(),
            data_hash,
            params: dump_params(&model.store),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION || ck.task != "story" {
            return Err(TrainError::Checkpoint(format!(
                "expected a version {CHECKPOINT_VERSION} story checkpoint, found version {} '{}'",
                ck.format_version, ck.task
            )));
        }
        Ok(ck)
    }

    pub fn into_model(self) -> Result<StoryModel, TrainError> {
        let mut model = StoryModel::new(self.encoder, self.registry, self.priors, self.ablations, self.no_crf, 0)?;
        load_params(&mut model.store, &self.params)?;
        Ok(model)
    }
}

/// Trains a story model on `pairs` and records the run.
pub fn train_story_stage(
    encoder: EncoderConfig,
    registry: &AttributeRegistry,
    pairs: &[StoryPair],
    dev: Option<&[StoryPair]>,
    config: &StoryConfig,
) -> Result<(StoryModel, StoryCheckpoint, RunManifest), TrainError> {
    let mut model = StoryModel::for_data(encoder, registry.clone(), pairs, config.ablations, config.no_crf, config.seed)?;
    let history = train_story(&mut model, pairs, dev, config)?;
    let train_hash = data_hash(crate::ingest::story::to_jsonl(registry, pairs).as_bytes());
    let checkpoint = StoryCheckpoint::from_model(&model, train_hash.clone());
    let mut data_hashes = BTreeMap::from([("train".to_string(), train_hash)]);
    if let Some(dev) = dev {
        data_hashes.insert("dev".into(), data_hash(crate::ingest::story::to_jsonl(registry, dev).as_bytes()));
    }
    let train_report = story_metrics(registry, pairs, &model.predict_all(pairs)?).map_err(|e| TrainError::Config(e.to_string()))?;
    let config_json = serde_json::json!({ "train": config, "encoder": encoder });
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        stage: "story".into(),
        task: "story".into(),
        seed: config.seed,
        config_hash: json_hash(&config_json),
        config: config_json,
        data_hashes,
        ablations: config.ablations,
        epochs: config.epochs,
        history: history.iter().map(|h| serde_json::to_value(h).expect("serializable")).collect(),
        final_metrics: serde_json::json!({
            "train": train_report,
            "dev": history.last().and_then(|h| h.dev.clone()),
        }),
        checkpoint_hash: Some(data_hash(checkpoint.to_json().as_bytes())),
        parents: Vec::new(),
        notes: Vec::new(),
    };
    Ok((model, checkpoint, manifest))
}
