//! Evaluation for both tasks.
//!
//! # Conventions
//!
//! Sentence level, per (paragraph, entity, event), with events `created`,
//! `moved`, `destroyed` read from the evaluation-facing actions:
//!
//! * Cat1 is asked for every question and is correct when gold and
//!   prediction agree on whether the event occurs at all.
//! * Cat2 is asked when the event occurs in both gold and prediction. It is
//!   correct when the sets of steps match exactly (all move steps for moves).
//! * Cat3 is asked when Cat2 is asked and at least one gold event location is
//!   concrete. It is correct when the event locations, in step order, match
//!   as case-folded strings (`?` for unknown). The location of a creation or
//!   move is the state after the step; of a destruction, the state before.
//! * A category with no questions asked scores 1.0.
//! * An entity missing from the prediction answers every Cat1 question
//!   wrongly and is listed in `missing`.
//!
//! Document level, per paragraph, tuple sets are compared:
//!
//! * inputs: entities present at state 0, destroyed at some step, and absent
//!   at state n;
//! * outputs: entities absent at state 0 and present at state n;
//! * conversions: `(step, destroyed entities, created entities)` for steps
//!   where both sets are nonempty;
//! * moves: `(entity, step, from, to)` for every Move action.
//!
//! Precision and recall are 1 when both sets are empty; otherwise an
//! undefined ratio counts as 0. Both are averaged over paragraphs per
//! category, F1 is taken from the averaged P and R (0 when P + R = 0), and
//! the overall P, R and F1 are plain means over the four categories.
//!
//! Story level, per pair: accuracy requires the chosen story to be the
//! plausible one; consistency additionally requires the exact conflict pair;
//! verifiability additionally requires, for every entity of the implausible
//! story, the predicted effects at `c1` and preconditions at `c2` to equal
//! every non-default gold value. Attribute F1 is multi-class F1 over all
//! (pair, story, entity, step) slots, macro-averaged over the labels that
//! occur in gold or prediction, then averaged over attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Action, AttributeRegistry, EntityState, EntityTimeline, ProceduralExample, StoryPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction for pair '{pair}' has {found} attributes, registry has {expected}")]
    Registry { pair: String, found: usize, expected: usize },
    #[error("prediction for pair '{pair}' is malformed: {detail}")]
    Malformed { pair: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Created,
    Moved,
    Destroyed,
}

impl Event {
    pub const ALL: [Event; 3] = [Event::Created, Event::Moved, Event::Destroyed];

    fn action(self) -> Action {
        match self {
            Event::Created => Action::Create,
            Event::Moved => Action::Move,
            Event::Destroyed => Action::Destroy,
        }
    }
}

/// 1-based steps of `event` and the location key at each.
fn event_occurrences(tl: &EntityTimeline, event: Event) -> Vec<(usize, String)> {
    let states = tl.states();
    tl.actions()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == event.action())
        .map(|(i, _)| {
            let state = if event == Event::Destroyed { &states[i] } else { &states[i + 1] };
            (i + 1, state.location_key().unwrap_or_else(|| "?".into()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub asked: usize,
}

impl Tally {
    fn add(&mut self, correct: bool) {
        self.asked += 1;
        if correct {
            self.correct += 1;
        }
    }

    /// Accuracy, 1.0 when nothing was asked.
    pub fn rate(&self) -> f64 {
        if self.asked == 0 {
            1.0
        } else {
            self.correct as f64 / self.asked as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceLevelReport {
    pub cat1: f64,
    pub cat2: f64,
    pub cat3: f64,
    pub macro_avg: f64,
    pub micro_avg: f64,
    pub tallies: [Tally; 3],
    /// `(para_id, entity)` pairs present in gold but not in the prediction.
    pub missing: Vec<(String, String)>,
}

fn find_pred<'a>(pred: &'a [ProceduralExample], id: &str) -> Option<&'a ProceduralExample> {
    pred.iter().find(|p| p.para_id == id)
}

pub fn sentence_level(gold: &[ProceduralExample], pred: &[ProceduralExample]) -> SentenceLevelReport {
    let mut tallies = [Tally::default(); 3];
    let mut missing = Vec::new();
    for g in gold {
        let p = find_pred(pred, &g.para_id);
        for e in &g.entities {
            let Some(gt) = &e.timeline else { continue };
            let Some(pt) = p.and_then(|p| p.timeline(&e.name)) else {
                missing.push((g.para_id.clone(), e.name.clone()));
                for _ in Event::ALL {
                    tallies[0].add(false);
                }
                continue;
            };
            for ev in Event::ALL {
                let go = event_occurrences(gt, ev);
                let po = event_occurrences(pt, ev);
                tallies[0].add(go.is_empty() == po.is_empty());
                if go.is_empty() || po.is_empty() {
                    continue;
                }
                let steps = |o: &[(usize, String)]| o.iter().map(|x| x.0).collect::<BTreeSet<_>>();
                tallies[1].add(steps(&go) == steps(&po));
                if go.iter().any(|(_, l)| l != "?") {
                    let locs = |o: &[(usize, String)]| o.iter().map(|x| x.1.clone()).collect::<Vec<_>>();
                    tallies[2].add(locs(&go) == locs(&po));
                }
            }
        }
    }
    let [c1, c2, c3] = tallies.map(|t| t.rate());
    let (correct, asked) = tallies.iter().fold((0, 0), |(c, a), t| (c + t.correct, a + t.asked));
    SentenceLevelReport {
        cat1: c1,
        cat2: c2,
        cat3: c3,
        macro_avg: (c1 + c2 + c3) / 3.0,
        micro_avg: if asked == 0 { 1.0 } else { correct as f64 / asked as f64 },
        tallies,
        missing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocCategory {
    Inputs,
    Outputs,
    Conversions,
    Moves,
}

impl DocCategory {
    pub const ALL: [DocCategory; 4] = [
        DocCategory::Inputs,
        DocCategory::Outputs,
        DocCategory::Conversions,
        DocCategory::Moves,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentLevelReport {
    pub categories: BTreeMap<DocCategory, Prf>,
    pub overall: Prf,
    pub paragraphs: usize,
}

type TupleSets = [BTreeSet<String>; 4];

fn doc_tuples(ex: &ProceduralExample) -> TupleSets {
    let mut sets: TupleSets = Default::default();
    let timelines: Vec<(&str, &EntityTimeline)> = ex
        .entities
        .iter()
        .filter_map(|e| e.timeline.as_ref().map(|t| (e.name.as_str(), t)))
        .collect();
    for (name, tl) in &timelines {
        let states = tl.states();
        let first = states[0].is_present();
        let last = states[states.len() - 1].is_present();
        let destroyed = tl.actions().contains(&Action::Destroy);
        if first && destroyed && !last {
            sets[0].insert(name.to_string());
        }
        if !first && last {
            sets[1].insert(name.to_string());
        }
        for (i, a) in tl.actions().iter().enumerate() {
            if *a == Action::Move {
                let key = |s: &EntityState| s.location_key().unwrap_or_else(|| "?".into());
                sets[3].insert(format!("{name}\t{}\t{}\t{}", i + 1, key(&states[i]), key(&states[i + 1])));
            }
        }
    }
    for step in 0..ex.steps() {
        let with = |act: Action| -> Vec<&str> {
            let mut v: Vec<&str> = timelines
                .iter()
                .filter(|(_, tl)| tl.actions().get(step) == Some(&act))
                .map(|(n, _)| *n)
                .collect();
            v.sort_unstable();
            v
        };
        let (d, c) = (with(Action::Destroy), with(Action::Create));
        if !d.is_empty() && !c.is_empty() {
            sets[2].insert(format!("{}\t{}\t{}", step + 1, d.join(","), c.join(",")));
        }
    }
    sets
}

/// `(precision, recall)` under the documented empty-set convention.
pub fn set_pr(gold: &BTreeSet<String>, pred: &BTreeSet<String>) -> (f64, f64) {
    if gold.is_empty() && pred.is_empty() {
        return (1.0, 1.0);
    }
    let hit = gold.intersection(pred).count() as f64;
    let p = if pred.is_empty() { 0.0 } else { hit / pred.len() as f64 };
    let r = if gold.is_empty() { 0.0 } else { hit / gold.len() as f64 };
    (p, r)
}

pub fn document_level(gold: &[ProceduralExample], pred: &[ProceduralExample]) -> DocumentLevelReport {
    let mut sums = [(0.0, 0.0); 4];
    let mut paragraphs = 0;
    for g in gold.iter().filter(|g| g.annotated) {
        paragraphs += 1;
        let gs = doc_tuples(g);
        let ps = find_pred(pred, &g.para_id).map(doc_tuples).unwrap_or_default();
        for c in 0..4 {
            let (p, r) = set_pr(&gs[c], &ps[c]);
            sums[c].0 += p;
            sums[c].1 += r;
        }
    }
    let denom = paragraphs.max(1) as f64;
    let mut categories = BTreeMap::new();
    for (c, cat) in DocCategory::ALL.iter().enumerate() {
        let (p, r) = if paragraphs == 0 {
            (1.0, 1.0)
        } else {
            (sums[c].0 / denom, sums[c].1 / denom)
        };
        categories.insert(
            *cat,
            Prf {
                precision: p,
                recall: r,
                f1: f1(p, r),
            },
        );
    }
    let mean = |f: fn(&Prf) -> f64| categories.values().map(f).sum::<f64>() / 4.0;
    let overall = Prf {
        precision: mean(|x| x.precision),
        recall: mean(|x| x.recall),
        f1: mean(|x| x.f1),
    };
    DocumentLevelReport {
        categories,
        overall,
        paragraphs,
    }
}

/// Predicted attribute values of one entity in one story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub name: String,
    pub pre: Vec<Vec<usize>>,
    pub eff: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedAttributes {
    pub stories: [Vec<PredictedEntity>; 2],
}

/// One line of a story prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryOutput {
    pub pair_id: String,
    pub chosen: usize,
    pub conflict: [usize; 2],
    pub attributes: PredictedAttributes,
    /// Plausible-class probability of each story.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plausibility: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryReport {
    pub accuracy: f64,
    pub consistency: f64,
    pub verifiability: f64,
    pub pairs: usize,
    /// Per attribute, in registry order.
    pub precondition_f1: Vec<f64>,
    pub effect_f1: Vec<f64>,
    pub precondition_macro_f1: f64,
    pub effect_macro_f1: f64,
}

/// Multi-class F1 macro-averaged over labels seen in gold or prediction.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> f64 {
    let labels: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
    if labels.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for &l in &labels {
        let tp = gold.iter().zip(pred).filter(|&(&g, &p)| g == l && p == l).count() as f64;
        let np = pred.iter().filter(|&&p| p == l).count() as f64;
        let ng = gold.iter().filter(|&&g| g == l).count() as f64;
        let p = if np == 0.0 { 0.0 } else { tp / np };
        let r = if ng == 0.0 { 0.0 } else { tp / ng };
        total += f1(p, r);
    }
    total / labels.len() as f64
}

fn check_entity(pair: &str, e: &PredictedEntity, n: usize, b: usize) -> Result<(), MetricsError> {
    for rows in [&e.pre, &e.eff] {
        if rows.len() != n {
            return Err(MetricsError::Malformed {
                pair: pair.into(),
                detail: format!("entity '{}' has {} steps, story has {}", e.name, rows.len(), n),
            });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != b) {
            return Err(MetricsError::Registry {
                pair: pair.into(),
                found: r.len(),
                expected: b,
            });
        }
    }
    Ok(())
}

pub fn story_metrics(
    registry: &AttributeRegistry,
    gold: &[StoryPair],
    pred: &[StoryOutput],
) -> Result<StoryReport, MetricsError> {
    let b = registry.len();
    let (mut acc, mut con, mut ver) = (0usize, 0usize, 0usize);
    let mut slots_pre: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); b];
    let mut slots_eff = slots_pre.clone();
    for g in gold {
        let n = g.steps();
        let Some(p) = pred.iter().find(|p| p.pair_id == g.pair_id) else {
            // an unanswered pair is wrong on every metric; its slots count as label 0
            for ents in &g.entities {
                for e in ents {
                    for t in 0..n {
                        for k in 0..b {
                            slots_pre[k].0.push(e.pre[t][k]);
                            slots_pre[k].1.push(0);
                            slots_eff[k].0.push(e.eff[t][k]);
                            slots_eff[k].1.push(0);
                        }
                    }
                }
            }
            continue;
        };
        for (s, ents) in g.entities.iter().enumerate() {
            for e in ents {
                let pe = p.attributes.stories[s].iter().find(|x| x.name == e.name);
                if let Some(pe) = pe {
                    check_entity(&g.pair_id, pe, n, b)?;
                }
                for t in 0..n {
                    for k in 0..b {
                        slots_pre[k].0.push(e.pre[t][k]);
                        slots_pre[k].1.push(pe.map_or(0, |x| x.pre[t][k]));
                        slots_eff[k].0.push(e.eff[t][k]);
                        slots_eff[k].1.push(pe.map_or(0, |x| x.eff[t][k]));
                    }
                }
            }
        }
        if p.chosen != g.plausible {
            continue;
        }
        acc += 1;
        if (p.conflict[0], p.conflict[1]) != g.conflict {
            continue;
        }
        con += 1;
        let (c1, c2) = g.conflict;
        let bad = g.implausible();
        let verified = g.entities[bad].iter().all(|e| {
            let Some(pe) = p.attributes.stories[bad].iter().find(|x| x.name == e.name) else {
                return false;
            };
            (0..b).all(|k| {
                (e.eff[c1 - 1][k] == 0 || pe.eff[c1 - 1][k] == e.eff[c1 - 1][k])
                    && (e.pre[c2 - 1][k] == 0 || pe.pre[c2 - 1][k] == e.pre[c2 - 1][k])
            })
        });
        if verified {
            ver += 1;
        }
    }
    let pairs = gold.len();
    let rate = |x: usize| if pairs == 0 { 1.0 } else { x as f64 / pairs as f64 };
    let pre_f1: Vec<f64> = slots_pre.iter().map(|(g, p)| macro_f1(g, p)).collect();
    let eff_f1: Vec<f64> = slots_eff.iter().map(|(g, p)| macro_f1(g, p)).collect();
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(StoryReport {
        accuracy: rate(acc),
        consistency: rate(con),
        verifiability: rate(ver),
        pairs,
        precondition_macro_f1: mean(&pre_f1),
        effect_macro_f1: mean(&eff_f1),
        precondition_f1: pre_f1,
        effect_f1: eff_f1,
    })
}

/// Gold pairs written as predictions, for self-evaluation.
pub fn story_outputs_from_gold(gold: &[StoryPair]) -> Vec<StoryOutput> {
    gold.iter()
        .map(|g| StoryOutput {
            pair_id: g.pair_id.clone(),
            chosen: g.plausible,
            conflict: [g.conflict.0, g.conflict.1],
            attributes: PredictedAttributes {
                stories: g.entities.clone().map(|ents| {
                    ents.into_iter()
                        .map(|e| PredictedEntity {
                            name: e.name,
                            pre: e.pre,
                            eff: e.eff,
                        })
                        .collect()
                }),
            },
            plausibility: None,
        })
        .collect()
}

/// Both procedural reports together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralReport {
    pub sentence: SentenceLevelReport,
    pub document: DocumentLevelReport,
}

pub fn procedural_report(gold: &[ProceduralExample], pred: &[ProceduralExample]) -> ProceduralReport {
    ProceduralReport {
        sentence: sentence_level(gold, pred),
        document: document_level(gold, pred),
    }
}

impl ProceduralReport {
    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let s = &self.sentence;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8}", "sentence", "score");
        for (name, v) in [
            ("cat1", s.cat1),
            ("cat2", s.cat2),
            ("cat3", s.cat3),
            ("macro", s.macro_avg),
            ("micro", s.micro_avg),
        ] {
            let _ = writeln!(out, "{name:<12} {v:>8.4}");
        }
        let _ = writeln!(out, "\n{:<12} {:>9} {:>9} {:>9}", "document", "precision", "recall", "f1");
        let row = |out: &mut String, name: &str, x: &Prf| {
            let _ = writeln!(out, "{name:<12} {:>9.4} {:>9.4} {:>9.4}", x.precision, x.recall, x.f1);
        };
        for (cat, prf) in &self.document.categories {
            row(&mut out, &format!("{cat:?}").to_lowercase(), prf);
        }
        row(&mut out, "overall", &self.document.overall);
        out
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let s = &self.sentence;
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("cat1", s.cat1),
            ("cat2", s.cat2),
            ("cat3", s.cat3),
            ("sentence_macro", s.macro_avg),
            ("sentence_micro", s.micro_avg),
        ] {
            let _ = writeln!(out, "{name},{v}");
        }
        for (cat, prf) in &self.document.categories {
            let c = format!("{cat:?}").to_lowercase();
            let _ = writeln!(out, "{c}_precision,{}\n{c}_recall,{}\n{c}_f1,{}", prf.precision, prf.recall, prf.f1);
        }
        let o = &self.document.overall;
        let _ = writeln!(out, "overall_precision,{}\noverall_recall,{}\noverall_f1,{}", o.precision, o.recall, o.f1);
        out
    }
}

impl StoryReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("consistency", self.consistency),
            ("verifiability", self.verifiability),
            ("pre_f1", self.precondition_macro_f1),
            ("eff_f1", self.effect_macro_f1),
        ] {
            let _ = writeln!(out, "{name:<14} {v:>8.4}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("consistency", self.consistency),
            ("verifiability", self.verifiability),
            ("precondition_macro_f1", self.precondition_macro_f1),
            ("effect_macro_f1", self.effect_macro_f1),
        ] {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }
}
