//! Procedural paragraph formats: canonical JSONL and the grid TSV used for
//! hand-written fixtures.

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::schema::{
    Action, EntityEntry, EntityState, EntityTimeline, ProceduralExample, RecreationPolicy, SchemaError, Span,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProceduralFormat {
    Jsonl,
    GridTsv,
}

impl ProceduralFormat {
    /// `.tsv` selects the grid format; anything else is JSONL.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => ProceduralFormat::GridTsv,
            _ => ProceduralFormat::Jsonl,
        }
    }
}

/// Where entity actions come from when reading a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSource {
    /// Always derived from states (gold data).
    Derive,
    /// Read from an `actions` field when present (prediction files).
    FileIfPresent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpan {
    text: String,
    sent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawTag {
    None,
    Unknown,
    Loc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawState {
    tag: RawTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<RawSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntity {
    name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    states: Vec<RawState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actions: Option<Vec<Action>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    para_id: String,
    sentences: Vec<String>,
    #[serde(default)]
    entities: Vec<RawEntity>,
    annotated: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pseudo: bool,
}

fn resolve_span(ex: &ProceduralExample, raw: &RawSpan) -> Result<Span, SchemaError> {
    let id = &ex.para_id;
    match (raw.start, raw.end) {
        (Some(start), Some(end)) => {
            let text = ex.paragraph_text();
            let surface = text
                .get(start..end)
                .ok_or_else(|| SchemaError::example(id, format!("span offsets {start}..{end} out of range")))?;
            if surface.to_lowercase() != raw.text.trim().to_lowercase() {
                return Err(SchemaError::example(
                    id,
                    format!("span offsets {start}..{end} cover '{surface}', not '{}'", raw.text),
                ));
            }
            Ok(Span::new(surface, raw.sent, start, end))
        }
        (None, None) => ex.locate_span(&raw.text, raw.sent).ok_or_else(|| {
            SchemaError::example(id, format!("span '{}' not found in sentence {}", raw.text, raw.sent))
        }),
        _ => Err(SchemaError::example(id, "span needs both start and end, or neither")),
    }
}

fn convert(raw: RawExample, actions: ActionSource) -> Result<ProceduralExample, SchemaError> {
    let mut ex = ProceduralExample {
        para_id: raw.para_id,
        sentences: raw.sentences,
        entities: Vec::with_capacity(raw.entities.len()),
        annotated: raw.annotated,
        pseudo: raw.pseudo,
    };
    for e in raw.entities {
        let timeline = if e.states.is_empty() {
            None
        } else {
            let mut states = Vec::with_capacity(e.states.len());
            for s in &e.states {
                states.push(match (s.tag, &s.span) {
                    (RawTag::None, None) => EntityState::NonExistence,
                    (RawTag::Unknown, None) => EntityState::UnknownLocation,
                    (RawTag::Loc, Some(span)) => EntityState::Location(resolve_span(&ex, span)?),
                    (RawTag::Loc, None) => {
                        return Err(SchemaError::example(&ex.para_id, format!("'{}': loc state without span", e.name)))
                    }
                    (_, Some(_)) => {
                        return Err(SchemaError::example(
                            &ex.para_id,
                            format!("'{}': span on a non-location state", e.name),
                        ))
                    }
                });
            }
            if states.len() != ex.sentences.len() + 1 {
                return Err(SchemaError::Length {
                    entity: e.name.clone(),
                    states: states.len(),
                    actions: ex.sentences.len(),
                });
            }
            Some(match (&e.actions, actions) {
                (Some(a), ActionSource::FileIfPresent) => EntityTimeline::with_actions(&e.name, states, a.clone())?,
                _ => EntityTimeline::from_states(&e.name, states)?,
            })
        };
        ex.entities.push(EntityEntry { name: e.name, timeline });
    }
    Ok(ex)
}

fn to_raw(ex: &ProceduralExample, include_actions: bool) -> RawExample {
    RawExample {
        para_id: ex.para_id.clone(),
        sentences: ex.sentences.clone(),
        annotated: ex.annotated,
        pseudo: ex.pseudo,
        entities: ex
            .entities
            .iter()
            .map(|e| RawEntity {
                name: e.name.clone(),
                states: e
                    .timeline
                    .iter()
                    .flat_map(|tl| tl.states())
                    .map(|s| match s {
                        EntityState::NonExistence => RawState {
                            tag: RawTag::None,
                            span: None,
                        },
                        EntityState::UnknownLocation => RawState {
                            tag: RawTag::Unknown,
                            span: None,
                        },
                        EntityState::Location(span) => RawState {
                            tag: RawTag::Loc,
                            span: Some(RawSpan {
                                text: span.text.clone(),
                                sent: span.sent,
                                start: Some(span.start),
                                end: Some(span.end),
                            }),
                        },
                    })
                    .collect(),
                actions: if include_actions {
                    e.timeline.as_ref().map(|tl| tl.actions().to_vec())
                } else {
                    None
                },
            })
            .collect(),
    }
}

/// Parses JSONL text, validating every example.
pub fn parse_jsonl(
    text: &str,
    actions: ActionSource,
    policy: RecreationPolicy,
) -> Result<Vec<ProceduralExample>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| IngestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let ex = convert(raw, actions).map_err(|source| IngestError::Validation { line: line_no, source })?;
        if actions == ActionSource::Derive || ex.annotated {
            ex.validate(policy)
                .map_err(|source| IngestError::Validation { line: line_no, source })?;
        }
        out.push(ex);
    }
    Ok(out)
}

/// One example per line; `include_actions` writes predicted actions too.
pub fn to_jsonl(examples: &[ProceduralExample], include_actions: bool) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&to_raw(ex, include_actions)).expect("serializable"));
        out.push('\n');
    }
    out
}

const GRID_SENTENCES: &str = "#sentences";

/// Parses the grid TSV format.
///
/// ```text
/// para_id  entity      state_0  state_1  ...
/// p1       #sentences  <s1>     <s2>     ...
/// p1       water       -        soil     ...
/// ```
///
/// Cells: `-` non-existence, `?` unknown location, otherwise location text,
/// optionally suffixed `@k` to pin the 1-based sentence it is read from.
/// Without a suffix the text is searched in the sentence of that boundary,
/// then in sentences `1..=n` in order.
pub fn parse_grid(text: &str, policy: RecreationPolicy) -> Result<Vec<ProceduralExample>, IngestError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if !header.starts_with("para_id\tentity") {
        return Err(IngestError::Parse {
            line: 1,
            message: "grid header must start with 'para_id<TAB>entity'".into(),
        });
    }
    let mut examples: Vec<(usize, ProceduralExample)> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() < 3 {
            return Err(IngestError::Parse {
                line: line_no,
                message: format!("expected at least 3 columns, found {}", cells.len()),
            });
        }
        let (para_id, name, rest) = (cells[0], cells[1], &cells[2..]);
        if name == GRID_SENTENCES {
            if examples.iter().any(|(_, e)| e.para_id == para_id) {
                return Err(IngestError::Parse {
                    line: line_no,
                    message: format!("paragraph '{para_id}' declared twice"),
                });
            }
            examples.push((
                line_no,
                ProceduralExample {
                    para_id: para_id.to_string(),
                    sentences: rest.iter().map(|s| s.to_string()).collect(),
                    entities: Vec::new(),
                    annotated: true,
                    pseudo: false,
                },
            ));
            continue;
        }
        let ex = match examples.last_mut() {
            Some((_, ex)) if ex.para_id == para_id => ex,
            _ => {
                return Err(IngestError::Parse {
                    line: line_no,
                    message: format!("entity row for '{para_id}' before its {GRID_SENTENCES} row"),
                })
            }
        };
        let n = ex.sentences.len();
        if rest.len() != n + 1 {
            return Err(IngestError::Parse {
                line: line_no,
                message: format!("entity '{name}' has {} state cells, expected {}", rest.len(), n + 1),
            });
        }
        let mut states = Vec::with_capacity(n + 1);
        for (t, cell) in rest.iter().enumerate() {
            states.push(parse_cell(ex, cell.trim(), t).map_err(|source| IngestError::Validation { line: line_no, source })?);
        }
        let timeline =
            EntityTimeline::from_states(name, states).map_err(|source| IngestError::Validation { line: line_no, source })?;
        ex.entities.push(EntityEntry {
            name: name.to_string(),
            timeline: Some(timeline),
        });
    }
    let mut out = Vec::with_capacity(examples.len());
    for (line, ex) in examples {
        ex.validate(policy)
            .map_err(|source| IngestError::Validation { line, source })?;
        out.push(ex);
    }
    Ok(out)
}

fn parse_cell(ex: &ProceduralExample, cell: &str, boundary: usize) -> Result<EntityState, SchemaError> {
    match cell {
        "-" => return Ok(EntityState::NonExistence),
        "?" => return Ok(EntityState::UnknownLocation),
        "" => return Err(SchemaError::example(&ex.para_id, format!("empty cell at boundary {boundary}"))),
        _ => {}
    }
    let pinned = cell
        .rsplit_once('@')
        .and_then(|(text, k)| k.parse::<usize>().ok().map(|k| (text, k)));
    let span = match pinned {
        Some((text, k)) => ex.locate_span(text, k),
        None => {
            let n = ex.sentences.len();
            let first = boundary.clamp(1, n);
            std::iter::once(first)
                .chain((1..=n).filter(|&s| s != first))
                .find_map(|s| ex.locate_span(cell, s))
        }
    };
    span.map(EntityState::Location).ok_or_else(|| {
        SchemaError::example(&ex.para_id, format!("location '{cell}' not found in the paragraph"))
    })
}

/// Writes the grid TSV form; location cells always carry their `@k` pin.
pub fn to_grid(examples: &[ProceduralExample]) -> String {
    let width = examples.iter().map(|e| e.sentences.len() + 1).max().unwrap_or(1);
    let mut out = String::from("para_id\tentity");
    for t in 0..width {
        out.push_str(&format!("\tstate_{t}"));
    }
    out.push('\n');
    for ex in examples {
        out.push_str(&format!("{}\t{}", ex.para_id, GRID_SENTENCES));
        for s in &ex.sentences {
            out.push('\t');
            out.push_str(s);
        }
        out.push('\n');
        for e in &ex.entities {
            let Some(tl) = &e.timeline else { continue };
            out.push_str(&format!("{}\t{}", ex.para_id, e.name));
            for s in tl.states() {
                out.push('\t');
                match s {
                    EntityState::NonExistence => out.push('-'),
                    EntityState::UnknownLocation => out.push('?'),
                    EntityState::Location(span) => out.push_str(&format!("{}@{}", span.text, span.sent)),
                }
            }
            out.push('\n');
        }
    }
    out
}
