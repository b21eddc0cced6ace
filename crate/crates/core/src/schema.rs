//! Domain types for both tasks and the algebra linking actions, location
//! spans and precondition/effect states.
//!
//! A procedural entity timeline over `n` steps holds `n + 1` states, one per
//! step boundary: `states[t - 1]` is the precondition of step `t` and
//! `states[t]` its effect, so effect/precondition continuity holds by
//! construction.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-step entity action. The two `OutOf*` labels refine the evaluation-time
/// NONE label during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Create,
    Exist,
    Move,
    Destroy,
    OutOfCreate,
    OutOfDestroy,
}

pub const NUM_ACTIONS: usize = 6;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Create,
        Action::Exist,
        Action::Move,
        Action::Destroy,
        Action::OutOfCreate,
        Action::OutOfDestroy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Label used by evaluators: both `OutOf*` actions collapse to `NONE`.
    pub fn eval_label(self) -> &'static str {
        match self {
            Action::Create => "CREATE",
            Action::Exist => "EXIST",
            Action::Move => "MOVE",
            Action::Destroy => "DESTROY",
            Action::OutOfCreate | Action::OutOfDestroy => "NONE",
        }
    }

    /// Whether the entity exists after this action.
    pub fn leaves_present(self) -> bool {
        matches!(self, Action::Create | Action::Exist | Action::Move)
    }

    /// Whether the entity exists before this action.
    pub fn requires_present(self) -> bool {
        matches!(self, Action::Exist | Action::Move | Action::Destroy)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Hard commonsense adjacency used by validators and test oracles. The model
/// itself is governed by data-estimated transition priors.
pub fn legal_successors(a: Action) -> &'static [Action] {
    use Action::*;
    match a {
        OutOfCreate => &[OutOfCreate, Create],
        Create | Exist | Move => &[Exist, Move, Destroy],
        Destroy => &[OutOfDestroy],
        OutOfDestroy => &[OutOfDestroy],
    }
}

/// Actions that may open a timeline: anything but `OutOfDestroy`, which
/// presupposes an earlier destruction.
pub fn legal_first(a: Action) -> bool {
    a != Action::OutOfDestroy
}

/// A location mention: surface text, its 1-based sentence, and byte offsets
/// into the paragraph text (sentences joined by single spaces).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub text: String,
    pub sent: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(text: impl Into<String>, sent: usize, start: usize, end: usize) -> Self {
        Self {
            text: text.into(),
            sent,
            start,
            end,
        }
    }

    /// Case-folded surface text, the key used for location comparisons.
    pub fn key(&self) -> String {
        fold(&self.text)
    }

    pub fn same_location(&self, other: &Span) -> bool {
        self.key() == other.key()
    }
}

/// Case folding applied to every text comparison in metrics and algebra.
pub fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateTag {
    NonExistence,
    UnknownLocation,
    Location,
}

/// Entity state at one step boundary. The span exists exactly for
/// `Location`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityState {
    NonExistence,
    UnknownLocation,
    Location(Span),
}

impl EntityState {
    pub fn tag(&self) -> StateTag {
        match self {
            EntityState::NonExistence => StateTag::NonExistence,
            EntityState::UnknownLocation => StateTag::UnknownLocation,
            EntityState::Location(_) => StateTag::Location,
        }
    }

    pub fn span(&self) -> Option<&Span> {
        match self {
            EntityState::Location(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_present(&self) -> bool {
        !matches!(self, EntityState::NonExistence)
    }

    /// State of a present entity given a decoded span (`None` is the [CLS]
    /// span, i.e. no concrete location).
    pub fn present(span: Option<&Span>) -> EntityState {
        match span {
            Some(s) => EntityState::Location(s.clone()),
            None => EntityState::UnknownLocation,
        }
    }

    /// Location key for comparisons: `None` for non-existence, `"?"` for an
    /// unknown location, otherwise the folded span text.
    pub fn location_key(&self) -> Option<String> {
        match self {
            EntityState::NonExistence => None,
            EntityState::UnknownLocation => Some("?".to_string()),
            EntityState::Location(s) => Some(s.key()),
        }
    }

    /// Same existence and same location up to span surface form.
    pub fn equivalent(&self, other: &EntityState) -> bool {
        self.location_key() == other.location_key()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("timeline for '{entity}' has {states} states and {actions} actions (need states = actions + 1)")]
    Length {
        entity: String,
        states: usize,
        actions: usize,
    },
    #[error("{found} cannot open a timeline")]
    IllegalFirst { found: Action },
    #[error("illegal transition {from} -> {to} at action index {index} (step {})", index + 1)]
    IllegalTransition { index: usize, from: Action, to: Action },
    #[error("re-creation after destruction at action index {index} (step {})", index + 1)]
    Recreation { index: usize },
    #[error("action {action} at action index {index} (step {}) disagrees with states: {detail}", index + 1)]
    Inconsistent {
        index: usize,
        action: Action,
        detail: String,
    },
    #[error("{0} spans supplied for {1} actions (need actions + 1)")]
    SpanCount(usize, usize),
    #[error("invalid example '{id}': {detail}")]
    Example { id: String, detail: String },
}

impl SchemaError {
    pub fn example(id: &str, detail: impl Into<String>) -> Self {
        SchemaError::Example {
            id: id.to_string(),
            detail: detail.into(),
        }
    }
}

/// How validators treat `Create` after a destruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecreationPolicy {
    #[default]
    Reject,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaWarning {
    pub index: usize,
    pub message: String,
}

/// Checks an action sequence against [`legal_successors`].
pub fn validate_actions(actions: &[Action], policy: RecreationPolicy) -> Result<Vec<SchemaWarning>, SchemaError> {
    let mut warnings = Vec::new();
    let Some(&first) = actions.first() else {
        return Ok(warnings);
    };
    if !legal_first(first) {
        return Err(SchemaError::IllegalFirst { found: first });
    }
    for (i, pair) in actions.windows(2).enumerate() {
        let (from, to) = (pair[0], pair[1]);
        if legal_successors(from).contains(&to) {
            continue;
        }
        let recreation = matches!(from, Action::Destroy | Action::OutOfDestroy) && to == Action::Create;
        match (recreation, policy) {
            (true, RecreationPolicy::Warn) => warnings.push(SchemaWarning {
                index: i + 1,
                message: format!("re-creation after destruction ({from} -> Create)"),
            }),
            (true, RecreationPolicy::Reject) => return Err(SchemaError::Recreation { index: i + 1 }),
            (false, _) => return Err(SchemaError::IllegalTransition { index: i + 1, from, to }),
        }
    }
    Ok(warnings)
}

/// States implied by actions and per-boundary spans, without legality checks.
///
/// `spans[t]` is the span decoded for step input `t`; `None` is the [CLS]
/// span. Actions take precedence: an entity the actions say is absent is
/// `NonExistence` whatever its span, and a present entity with a [CLS] span
/// is `UnknownLocation`.
pub fn derive_states_lenient(actions: &[Action], spans: &[Option<Span>]) -> Result<Vec<EntityState>, SchemaError> {
    if spans.len() != actions.len() + 1 {
        return Err(SchemaError::SpanCount(spans.len(), actions.len()));
    }
    let mut states = Vec::with_capacity(spans.len());
    states.push(match actions.first() {
        Some(a) if a.requires_present() => EntityState::present(spans[0].as_ref()),
        _ => EntityState::NonExistence,
    });
    for (t, &a) in actions.iter().enumerate() {
        states.push(if a.leaves_present() {
            EntityState::present(spans[t + 1].as_ref())
        } else {
            EntityState::NonExistence
        });
    }
    Ok(states)
}

/// [`derive_states_lenient`] after validating the action sequence.
pub fn derive_states(actions: &[Action], spans: &[Option<Span>]) -> Result<Vec<EntityState>, SchemaError> {
    validate_actions(actions, RecreationPolicy::Warn)?;
    derive_states_lenient(actions, spans)
}

/// Actions implied by a state sequence.
///
/// A change between an unknown and a concrete location counts as `Move`.
pub fn derive_actions(states: &[EntityState]) -> Vec<Action> {
    let mut destroyed = false;
    states
        .windows(2)
        .map(|pair| {
            let action = match (pair[0].is_present(), pair[1].is_present()) {
                (false, false) if destroyed => Action::OutOfDestroy,
                (false, false) => Action::OutOfCreate,
                (false, true) => Action::Create,
                (true, false) => Action::Destroy,
                (true, true) if pair[0].equivalent(&pair[1]) => Action::Exist,
                (true, true) => Action::Move,
            };
            if action == Action::Destroy {
                destroyed = true;
            }
            action
        })
        .collect()
}

/// One entity's states at the `n + 1` step boundaries and its `n` actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTimeline {
    entity: String,
    states: Vec<EntityState>,
    actions: Vec<Action>,
}

impl EntityTimeline {
    /// Gold-style timeline: actions derived from states.
    pub fn from_states(entity: impl Into<String>, states: Vec<EntityState>) -> Result<Self, SchemaError> {
        let entity = entity.into();
        if states.len() < 2 {
            return Err(SchemaError::Length {
                entity,
                states: states.len(),
                actions: states.len().saturating_sub(1),
            });
        }
        let actions = derive_actions(&states);
        Ok(Self {
            entity,
            states,
            actions,
        })
    }

    /// Timeline from explicit states and actions, checked for existence
    /// consistency. Location changes under `Exist` are tolerated, since
    /// predicted spans may disagree with predicted actions.
    pub fn with_actions(
        entity: impl Into<String>,
        states: Vec<EntityState>,
        actions: Vec<Action>,
    ) -> Result<Self, SchemaError> {
        let entity = entity.into();
        if states.len() != actions.len() + 1 || actions.is_empty() {
            return Err(SchemaError::Length {
                entity,
                states: states.len(),
                actions: actions.len(),
            });
        }
        for (i, &a) in actions.iter().enumerate() {
            let before = states[i].is_present();
            let after = states[i + 1].is_present();
            let ok = match a {
                Action::Create => !before && after,
                Action::Exist | Action::Move => before && after,
                Action::Destroy => before && !after,
                Action::OutOfCreate | Action::OutOfDestroy => !before && !after,
            };
            if !ok {
                return Err(SchemaError::Inconsistent {
                    index: i,
                    action: a,
                    detail: format!("present before: {before}, present after: {after}"),
                });
            }
        }
        Ok(Self {
            entity,
            states,
            actions,
        })
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    pub fn states(&self) -> &[EntityState] {
        &self.states
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// Legality of the action sequence under [`legal_successors`].
    pub fn validate(&self, policy: RecreationPolicy) -> Result<Vec<SchemaWarning>, SchemaError> {
        validate_actions(&self.actions, policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityEntry {
    pub name: String,
    /// Gold (or pseudo-labeled) timeline; absent for unannotated paragraphs.
    pub timeline: Option<EntityTimeline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralExample {
    pub para_id: String,
    pub sentences: Vec<String>,
    pub entities: Vec<EntityEntry>,
    pub annotated: bool,
    /// Labels come from a model rather than annotators.
    #[serde(default)]
    pub pseudo: bool,
}

impl ProceduralExample {
    pub fn steps(&self) -> usize {
        self.sentences.len()
    }

    /// Sentences joined by single spaces; span offsets index into this.
    pub fn paragraph_text(&self) -> String {
        self.sentences.join(" ")
    }

    /// Byte offset of each sentence within [`Self::paragraph_text`].
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut pos = 0;
        for s in &self.sentences {
            offsets.push(pos);
            pos += s.len() + 1;
        }
        offsets
    }

    /// Builds a span for `text` found (case-insensitively) in 1-based
    /// sentence `sent`.
    pub fn locate_span(&self, text: &str, sent: usize) -> Option<Span> {
        let sentence = self.sentences.get(sent.checked_sub(1)?)?;
        let lower = sentence.to_lowercase();
        let needle = text.trim().to_lowercase();
        if needle.is_empty() || lower.len() != sentence.len() {
            return None;
        }
        let at = find_word(&lower, &needle)?;
        let base = self.sentence_offsets()[sent - 1];
        Some(Span::new(
            sentence[at..at + needle.len()].to_string(),
            sent,
            base + at,
            base + at + needle.len(),
        ))
    }

    pub fn timeline(&self, name: &str) -> Option<&EntityTimeline> {
        self.entities
            .iter()
            .find(|e| e.name == name)
            .and_then(|e| e.timeline.as_ref())
    }

    /// Structural checks plus timeline legality.
    pub fn validate(&self, policy: RecreationPolicy) -> Result<Vec<SchemaWarning>, SchemaError> {
        let id = &self.para_id;
        if self.sentences.is_empty() {
            return Err(SchemaError::example(id, "paragraph has no sentences"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut warnings = Vec::new();
        for e in &self.entities {
            if e.name.trim().is_empty() {
                return Err(SchemaError::example(id, "empty entity name"));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(SchemaError::example(id, format!("duplicate entity '{}'", e.name)));
            }
            match (&e.timeline, self.annotated) {
                (Some(_), false) => {
                    return Err(SchemaError::example(
                        id,
                        format!("unannotated paragraph carries a timeline for '{}'", e.name),
                    ))
                }
                (None, true) => {
                    return Err(SchemaError::example(id, format!("entity '{}' lacks a timeline", e.name)))
                }
                _ => {}
            }
            if let Some(tl) = &e.timeline {
                if tl.steps() != self.steps() {
                    return Err(SchemaError::Length {
                        entity: e.name.clone(),
                        states: tl.states().len(),
                        actions: tl.steps(),
                    });
                }
                for s in tl.states() {
                    if let Some(span) = s.span() {
                        if span.sent == 0 || span.sent > self.steps() {
                            return Err(SchemaError::example(
                                id,
                                format!("span '{}' refers to sentence {}", span.text, span.sent),
                            ));
                        }
                    }
                }
                warnings.extend(tl.validate(policy).map_err(|err| {
                    SchemaError::example(id, format!("entity '{}': {}", e.name, err))
                })?);
            }
        }
        Ok(warnings)
    }
}

/// First occurrence of `needle` in `haystack` on word boundaries.
fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    let is_word = |c: char| c.is_alphanumeric();
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(needle) {
        let at = from + rel;
        let before_ok = haystack[..at].chars().next_back().is_none_or(|c| !is_word(c));
        let after_ok = haystack[at + needle.len()..].chars().next().is_none_or(|c| !is_word(c));
        if before_ok && after_ok {
            return Some(at);
        }
        from = at + haystack[at..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub labels: usize,
}

/// Attribute names and label-set sizes for the story task. Label 0 is the
/// default/irrelevant value of every attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRegistry {
    pub attributes: Vec<Attribute>,
}

impl AttributeRegistry {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.labels).collect()
    }
}

/// Per-step attribute vectors of one entity in one story: `pre[t][b]` and
/// `eff[t][b]` for 0-based step `t` and attribute `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryEntity {
    pub name: String,
    pub pre: Vec<Vec<usize>>,
    pub eff: Vec<Vec<usize>>,
}

impl StoryEntity {
    /// Label sequence of attribute `b` over all steps.
    pub fn pre_sequence(&self, b: usize) -> Vec<usize> {
        self.pre.iter().map(|v| v[b]).collect()
    }

    pub fn eff_sequence(&self, b: usize) -> Vec<usize> {
        self.eff.iter().map(|v| v[b]).collect()
    }
}

/// Two stories differing in one sentence. `conflict` holds 1-based sentence
/// indices `(c1, c2)`, `c1 < c2`, in the implausible story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryPair {
    pub pair_id: String,
    pub stories: [Vec<String>; 2],
    pub plausible: usize,
    pub conflict: (usize, usize),
    pub entities: [Vec<StoryEntity>; 2],
}

impl StoryPair {
    pub fn implausible(&self) -> usize {
        1 - self.plausible
    }

    pub fn steps(&self) -> usize {
        self.stories[0].len()
    }

    pub fn validate(&self, registry: &AttributeRegistry) -> Result<(), SchemaError> {
        let id = &self.pair_id;
        let n = self.stories[0].len();
        if n == 0 || self.stories[1].len() != n {
            return Err(SchemaError::example(
                id,
                format!("stories have {} and {} sentences", n, self.stories[1].len()),
            ));
        }
        let differing = (0..n).filter(|&i| self.stories[0][i] != self.stories[1][i]).count();
        if differing != 1 {
            return Err(SchemaError::example(
                id,
                format!("stories must differ in exactly one sentence, found {differing}"),
            ));
        }
        if self.plausible > 1 {
            return Err(SchemaError::example(id, format!("plausible index {}", self.plausible)));
        }
        let (c1, c2) = self.conflict;
        if !(1 <= c1 && c1 < c2 && c2 <= n) {
            return Err(SchemaError::example(
                id,
                format!("conflict ({c1}, {c2}) outside 1 <= c1 < c2 <= {n}"),
            ));
        }
        let b = registry.len();
        for (s, ents) in self.entities.iter().enumerate() {
            if ents.is_empty() {
                return Err(SchemaError::example(id, format!("story {s} has no entities")));
            }
            for e in ents {
                for (side, rows) in [("pre", &e.pre), ("eff", &e.eff)] {
                    if rows.len() != n {
                        return Err(SchemaError::example(
                            id,
                            format!("entity '{}' {} has {} steps, story has {}", e.name, side, rows.len(), n),
                        ));
                    }
                    for (t, row) in rows.iter().enumerate() {
                        if row.len() != b {
                            return Err(SchemaError::example(
                                id,
                                format!("entity '{}' {} step {} has {} attributes, registry has {}", e.name, side, t + 1, row.len(), b),
                            ));
                        }
                        for (k, (&v, attr)) in row.iter().zip(&registry.attributes).enumerate() {
                            if v >= attr.labels {
                                return Err(SchemaError::example(
                                    id,
                                    format!("entity '{}' {} step {} attribute {} value {} outside {} labels", e.name, side, t + 1, k, v, attr.labels),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Number of sentence pairs `(t, j)`, `t < j`, in an `n`-sentence story.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Row-major flat index of the 1-based pair `(t, j)`, `t < j <= n`:
/// `(1,2), (1,3), ..., (1,n), (2,3), ...`.
pub fn pair_index(n: usize, t: usize, j: usize) -> Option<usize> {
    if !(1 <= t && t < j && j <= n) {
        return None;
    }
    // pairs whose first element is below t
    let before: usize = (1..t).map(|k| n - k).sum();
    Some(before + (j - t - 1))
}

/// Inverse of [`pair_index`].
pub fn pair_from_index(n: usize, mut index: usize) -> Option<(usize, usize)> {
    for t in 1..n {
        let row = n - t;
        if index < row {
            return Some((t, t + 1 + index));
        }
        index -= row;
    }
    None
}
