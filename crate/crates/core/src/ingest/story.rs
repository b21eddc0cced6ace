//! Story-pair JSONL: a header line declaring the attribute registry, then one
//! pair per line.

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, IngestError};
use crate::schema::{AttributeRegistry, StoryPair};

#[derive(Debug, Clone, PartialEq)]
pub struct StoryDataset {
    pub registry: AttributeRegistry,
    pub split: DatasetSplit<StoryPair>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    pair_id: String,
    stories: [Vec<String>; 2],
    plausible: usize,
    conflict: [usize; 2],
    entities: [Vec<crate::schema::StoryEntity>; 2],
}

pub fn parse(text: &str, name: String) -> Result<StoryDataset, IngestError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(IngestError::Parse {
        line: 1,
        message: "missing attribute header".into(),
    })?;
    let registry: AttributeRegistry = serde_json::from_str(header).map_err(|e| IngestError::Parse {
        line: hline + 1,
        message: format!("attribute header: {e}"),
    })?;
    if registry.attributes.iter().any(|a| a.labels < 2) {
        return Err(IngestError::Parse {
            line: hline + 1,
            message: "every attribute needs at least 2 labels".into(),
        });
    }
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let raw: RawPair = serde_json::from_str(line).map_err(|e| IngestError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let pair = StoryPair {
            pair_id: raw.pair_id,
            stories: raw.stories,
            plausible: raw.plausible,
            conflict: (raw.conflict[0], raw.conflict[1]),
            entities: raw.entities,
        };
        pair.validate(&registry)
            .map_err(|source| IngestError::Validation { line: i + 1, source })?;
        pairs.push(pair);
    }
    Ok(StoryDataset {
        registry,
        split: DatasetSplit::new(name, pairs),
    })
}

pub fn to_jsonl(registry: &AttributeRegistry, pairs: &[StoryPair]) -> String {
    let mut out = serde_json::to_string(registry).expect("serializable");
    out.push('\n');
    for p in pairs {
        let raw = RawPair {
            pair_id: p.pair_id.clone(),
            stories: p.stories.clone(),
            plausible: p.plausible,
            conflict: [p.conflict.0, p.conflict.1],
            entities: p.entities.clone(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("serializable"));
        out.push('\n');
    }
    out
}
