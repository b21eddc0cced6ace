//! Deterministic synthetic corpora for smoke tests and desk-scale runs.
//!
//! Procedural paragraphs are built from a handful of templates, one event per
//! sentence:
//!
//! ```text
//! {e} forms in {loc} .            create
//! {e} moves from {a} to {b} .     move
//! {e} is used in {loc} .          destroy
//! {p} becomes {c} in {loc} .      destroy p, create c
//! nothing happens .               no event
//! ```
//!
//! Entities that exist before the first sentence take their initial location
//! from the first sentence that mentions them; entities never mentioned stay
//! at an unknown location.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::story::StoryDataset;
use super::DatasetSplit;
use crate::numerics::{seeded_rng, Rng64};
use crate::schema::{
    Attribute, AttributeRegistry, EntityEntry, EntityState, EntityTimeline, ProceduralExample, StoryEntity,
    StoryPair,
};

pub const ENTITY_NAMES: &[&str] = &[
    "water", "sugar", "oxygen", "gas", "ice", "seed", "rock", "sand", "salt", "energy", "magma", "steam", "mineral",
    "spore", "pollen", "carbon",
];

pub const LOCATION_NAMES: &[&str] = &[
    "soil", "root", "leaf", "stem", "air", "ocean", "river", "cell", "ground", "sky", "blood", "lung",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub mean_sentences: f64,
    pub mean_entities: f64,
    /// Probability that an entity exists before the first sentence.
    pub initial_presence: f64,
    /// Probability of a "nothing happens" sentence when an event is possible.
    pub idle_rate: f64,
}

impl Default for SynthConfig {
    /// Small paragraphs that a toy encoder can fit in minutes.
    fn default() -> Self {
        Self {
            mean_sentences: 3.5,
            mean_entities: 2.0,
            initial_presence: 0.5,
            idle_rate: 0.1,
        }
    }
}

impl SynthConfig {
    /// Paragraph shape of the full-size benchmark training split.
    pub fn benchmark_shape() -> Self {
        Self {
            mean_sentences: 6.7,
            mean_entities: 3.8,
            ..Self::default()
        }
    }
}

/// Integer counts whose running mean tracks `mean` exactly where possible.
fn count_for(index: usize, mean: f64) -> usize {
    let base = mean.floor();
    let frac = mean - base;
    let extra = ((index + 1) as f64 * frac).floor() - (index as f64 * frac).floor();
    (base + extra) as usize
}

#[derive(Clone)]
enum Status {
    Absent,
    Present(Option<&'static str>),
    Gone,
}

#[derive(Clone, Copy)]
enum Event {
    Create(usize, &'static str),
    Move(usize, &'static str, &'static str),
    Destroy(usize, &'static str),
    Convert(usize, usize, &'static str),
    Idle,
}

/// One paragraph with gold timelines.
pub fn paragraph(id: &str, n: usize, k: usize, cfg: &SynthConfig, rng: &mut Rng64) -> ProceduralExample {
    assert!(n >= 1 && k >= 1 && k <= ENTITY_NAMES.len());
    let mut names: Vec<&'static str> = ENTITY_NAMES.to_vec();
    names.shuffle(rng);
    names.truncate(k);

    let mut status: Vec<Status> = (0..k)
        .map(|_| {
            if rng.gen_bool(cfg.initial_presence) {
                Status::Present(None)
            } else {
                Status::Absent
            }
        })
        .collect();
    let pick_loc = |rng: &mut Rng64, not: Option<&str>| loop {
        let l = *LOCATION_NAMES.choose(rng).expect("nonempty");
        if Some(l) != not {
            break l;
        }
    };

    let mut events = Vec::with_capacity(n);
    let mut history: Vec<Vec<Status>> = vec![status.clone()];
    for _ in 0..n {
        let mut options: Vec<Event> = Vec::new();
        for e in 0..k {
            match status[e] {
                Status::Absent => options.push(Event::Create(e, pick_loc(rng, None))),
                Status::Present(loc) => {
                    let from = loc.unwrap_or_else(|| pick_loc(rng, None));
                    options.push(Event::Move(e, from, pick_loc(rng, Some(from))));
                    options.push(Event::Destroy(e, from));
                    for c in 0..k {
                        if matches!(status[c], Status::Absent) {
                            options.push(Event::Convert(e, c, from));
                        }
                    }
                }
                Status::Gone => {}
            }
        }
        let event = if options.is_empty() || rng.gen_bool(cfg.idle_rate) {
            Event::Idle
        } else {
            *options.choose(rng).expect("nonempty")
        };
        match event {
            Event::Create(e, l) => status[e] = Status::Present(Some(l)),
            Event::Move(e, _, to) => status[e] = Status::Present(Some(to)),
            Event::Destroy(e, _) => status[e] = Status::Gone,
            Event::Convert(p, c, l) => {
                status[p] = Status::Gone;
                status[c] = Status::Present(Some(l));
            }
            Event::Idle => {}
        }
        events.push(event);
        history.push(status.clone());
    }

    let sentences: Vec<String> = events
        .iter()
        .map(|ev| match *ev {
            Event::Create(e, l) => format!("{} forms in {l} .", names[e]),
            Event::Move(e, a, b) => format!("{} moves from {a} to {b} .", names[e]),
            Event::Destroy(e, l) => format!("{} is used in {l} .", names[e]),
            Event::Convert(p, c, l) => format!("{} becomes {} in {l} .", names[p], names[c]),
            Event::Idle => "nothing happens .".to_string(),
        })
        .collect();
    let mut ex = ProceduralExample {
        para_id: id.to_string(),
        sentences,
        entities: Vec::with_capacity(k),
        annotated: true,
        pseudo: false,
    };

    for (e, name) in names.iter().enumerate() {
        // (location, sentence it is read from) at each boundary
        let mut located: Vec<Option<(&'static str, usize)>> = vec![None; n + 1];
        let mut current: Option<(&'static str, usize)> = None;
        for (t, ev) in events.iter().enumerate() {
            let sent = t + 1;
            match *ev {
                Event::Create(x, l) if x == e => current = Some((l, sent)),
                Event::Convert(_, c, l) if c == e => current = Some((l, sent)),
                Event::Move(x, a, b) if x == e => {
                    if current.is_none() {
                        for slot in located.iter_mut().take(sent) {
                            *slot = Some((a, sent));
                        }
                    }
                    current = Some((b, sent));
                }
                Event::Destroy(x, l) | Event::Convert(x, _, l) if x == e => {
                    if current.is_none() {
                        for slot in located.iter_mut().take(sent) {
                            *slot = Some((l, sent));
                        }
                    }
                    current = None;
                }
                _ => {}
            }
            if current.is_some() {
                located[sent] = current;
            }
        }
        let states: Vec<EntityState> = (0..=n)
            .map(|t| match history[t][e] {
                Status::Absent | Status::Gone => EntityState::NonExistence,
                Status::Present(_) => match located[t] {
                    Some((l, sent)) => EntityState::Location(ex.locate_span(l, sent).expect("template location")),
                    None => EntityState::UnknownLocation,
                },
            })
            .collect();
        let timeline = EntityTimeline::from_states(*name, states).expect("generated timeline is consistent");
        ex.entities.push(EntityEntry {
            name: name.to_string(),
            timeline: Some(timeline),
        });
    }
    ex
}

/// `count` annotated paragraphs.
pub fn corpus(name: &str, count: usize, cfg: &SynthConfig, seed: u64) -> DatasetSplit<ProceduralExample> {
    let mut rng = seeded_rng(seed);
    let examples = (0..count)
        .map(|i| {
            let n = count_for(i, cfg.mean_sentences).max(1);
            let k = count_for(i, cfg.mean_entities).clamp(1, ENTITY_NAMES.len());
            paragraph(&format!("{name}-{i}"), n, k, cfg, &mut rng)
        })
        .collect();
    DatasetSplit::new(name, examples)
}

/// Unannotated paragraphs: entity names kept, timelines removed.
pub fn pool(count: usize, cfg: &SynthConfig, seed: u64) -> DatasetSplit<ProceduralExample> {
    let mut split = corpus("pool", count, cfg, seed);
    for ex in &mut split.examples {
        ex.annotated = false;
        for e in &mut ex.entities {
            e.timeline = None;
        }
    }
    split
}

/// Train/dev/test splits shaped like the benchmark (391/43/54 paragraphs).
pub fn benchmark_splits(seed: u64) -> [DatasetSplit<ProceduralExample>; 3] {
    let cfg = SynthConfig::benchmark_shape();
    [
        corpus("train", 391, &cfg, seed),
        corpus("dev", 43, &cfg, seed.wrapping_add(1)),
        corpus("test", 54, &cfg, seed.wrapping_add(2)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorySynthConfig {
    pub sentences: usize,
    /// Distractor objects per story beyond the one carrying the conflict.
    pub distractors: usize,
}

impl Default for StorySynthConfig {
    fn default() -> Self {
        Self {
            sentences: 4,
            distractors: 1,
        }
    }
}

const PEOPLE: &[&str] = &["ann", "bob", "cy", "dee", "eve"];
const OBJECTS: &[&str] = &["door", "lamp", "box", "radio", "window", "oven", "fan", "tap"];
const FILLERS: &[&str] = &["smiled", "sat down", "looked around", "yawned"];

/// `open` and `powered`, each with labels {0: irrelevant, 1: off/closed, 2: on/open}.
pub fn story_registry() -> AttributeRegistry {
    AttributeRegistry {
        attributes: vec![
            Attribute {
                name: "open".into(),
                labels: 3,
            },
            Attribute {
                name: "powered".into(),
                labels: 3,
            },
        ],
    }
}

/// Sentence step: (object, attribute, new value) or a filler.
#[derive(Clone, Copy, PartialEq)]
enum StoryStep {
    Act(usize, usize, usize),
    Filler(usize),
}

fn act_text(person: &str, obj: &str, attr: usize, value: usize) -> String {
    let verb = match (attr, value) {
        (0, 2) => "opened",
        (0, _) => "closed",
        (_, 2) => "turned on",
        _ => "turned off",
    };
    format!("{person} {verb} the {obj} .")
}

fn story_entities(steps: &[StoryStep], objects: &[&str]) -> Vec<StoryEntity> {
    objects
        .iter()
        .enumerate()
        .map(|(o, name)| {
            let mut pre = Vec::with_capacity(steps.len());
            let mut eff = Vec::with_capacity(steps.len());
            for s in steps {
                let (mut p, mut e) = (vec![0, 0], vec![0, 0]);
                if let StoryStep::Act(x, attr, v) = *s {
                    if x == o {
                        p[attr] = 3 - v;
                        e[attr] = v;
                    }
                }
                pre.push(p);
                eff.push(e);
            }
            StoryEntity {
                name: name.to_string(),
                pre,
                eff,
            }
        })
        .collect()
}

/// One plausible/implausible pair. The implausible story repeats the action
/// of sentence `c1` at `c2` with no reversal in between, so the precondition
/// at `c2` contradicts the effect at `c1`.
pub fn story_pair(id: &str, cfg: &StorySynthConfig, rng: &mut Rng64) -> StoryPair {
    let n = cfg.sentences.max(2);
    let person = *PEOPLE.choose(rng).expect("nonempty");
    let mut objs: Vec<&str> = OBJECTS.to_vec();
    objs.shuffle(rng);
    objs.truncate(1 + cfg.distractors);

    let c2 = rng.gen_range(2..=n);
    let c1 = rng.gen_range(1..c2);
    let attr = rng.gen_range(0..2);
    // state[o][attr]: 1 or 2
    let mut state: Vec<[usize; 2]> = (0..objs.len()).map(|_| [rng.gen_range(1..=2), rng.gen_range(1..=2)]).collect();
    let mut steps = Vec::with_capacity(n);
    for t in 1..=n {
        let step = if t == c1 {
            StoryStep::Act(0, attr, 3 - state[0][attr])
        } else if t > c1 && t < c2 {
            // keep (0, attr) untouched between c1 and c2
            let o = rng.gen_range(0..objs.len());
            let a = rng.gen_range(0..2);
            if (o, a) == (0, attr) || rng.gen_bool(0.3) {
                StoryStep::Filler(rng.gen_range(0..FILLERS.len()))
            } else {
                StoryStep::Act(o, a, 3 - state[o][a])
            }
        } else if t == c2 {
            // plausible sentence: anything but a repeat of the c1 action
            let a = 1 - attr;
            if rng.gen_bool(0.5) {
                StoryStep::Act(0, attr, 3 - state[0][attr])
            } else {
                StoryStep::Act(0, a, 3 - state[0][a])
            }
        } else if rng.gen_bool(0.3) {
            StoryStep::Filler(rng.gen_range(0..FILLERS.len()))
        } else {
            let o = rng.gen_range(0..objs.len());
            let a = rng.gen_range(0..2);
            StoryStep::Act(o, a, 3 - state[o][a])
        };
        if let StoryStep::Act(o, a, v) = step {
            state[o][a] = v;
        }
        steps.push(step);
    }
    let mut bad = steps.clone();
    let StoryStep::Act(_, _, v1) = steps[c1 - 1] else {
        unreachable!("c1 is an action")
    };
    bad[c2 - 1] = StoryStep::Act(0, attr, v1);
    let render = |steps: &[StoryStep]| -> Vec<String> {
        steps
            .iter()
            .map(|s| match *s {
                StoryStep::Act(o, a, v) => act_text(person, objs[o], a, v),
                StoryStep::Filler(f) => format!("{person} {} .", FILLERS[f]),
            })
            .collect()
    };
    let plausible = rng.gen_range(0..2);
    let (good_text, bad_text) = (render(&steps), render(&bad));
    let (good_ents, bad_ents) = (story_entities(&steps, &objs), story_entities(&bad, &objs));
    let (stories, entities) = if plausible == 0 {
        ([good_text, bad_text], [good_ents, bad_ents])
    } else {
        ([bad_text, good_text], [bad_ents, good_ents])
    };
    StoryPair {
        pair_id: id.to_string(),
        stories,
        plausible,
        conflict: (c1, c2),
        entities,
    }
}

pub fn story_corpus(cfg: &StorySynthConfig, count: usize, seed: u64) -> StoryDataset {
    let mut rng = seeded_rng(seed);
    let pairs = (0..count).map(|i| story_pair(&format!("pair-{i}"), cfg, &mut rng)).collect();
    StoryDataset {
        registry: story_registry(),
        split: DatasetSplit::new("stories", pairs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::RecreationPolicy;

    #[test]
    fn generated_paragraphs_validate() {
        let split = corpus("train", 200, &SynthConfig::default(), 5);
        for ex in &split.examples {
            ex.validate(RecreationPolicy::Reject).unwrap();
        }
    }

    #[test]
    fn benchmark_shape_stats() {
        let [train, dev, test] = benchmark_splits(1);
        assert_eq!((train.len(), dev.len(), test.len()), (391, 43, 54));
        let s = train.stats();
        assert_eq!(s.paragraphs, 391);
        assert!((s.mean_entities - 3.8).abs() < 0.01, "{s:?}");
        assert!((s.mean_sentences - 6.7).abs() < 0.01, "{s:?}");
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = corpus("x", 10, &SynthConfig::default(), 9);
        let b = corpus("x", 10, &SynthConfig::default(), 9);
        assert_eq!(a, b);
        assert_ne!(a, corpus("x", 10, &SynthConfig::default(), 10));
    }

    #[test]
    fn pool_has_no_timelines() {
        let p = pool(5, &SynthConfig::default(), 2);
        assert_eq!(p.pool().count(), 5);
        for ex in &p.examples {
            ex.validate(RecreationPolicy::Reject).unwrap();
            assert!(ex.entities.iter().all(|e| e.timeline.is_none()));
        }
    }

    #[test]
    fn story_pairs_validate() {
        let ds = story_corpus(&StorySynthConfig::default(), 100, 4);
        for p in &ds.split.examples {
            p.validate(&ds.registry).unwrap();
            let bad = &p.entities[p.implausible()][0];
            let (c1, c2) = p.conflict;
            // the conflicting attribute: effect at c1 disagrees with precondition at c2
            assert!((0..2).any(|b| bad.eff[c1 - 1][b] != 0 && bad.pre[c2 - 1][b] != 0 && bad.eff[c1 - 1][b] != bad.pre[c2 - 1][b]));
        }
    }
}
