//! Dataset formats, loaders, the hashed vocabulary and the synthetic corpus
//! generator.

pub mod procedural;
pub mod story;
pub mod synth;
pub mod vocab;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ProceduralExample, RecreationPolicy, SchemaError, StoryPair};

pub use procedural::{ActionSource, ProceduralFormat};
pub use story::StoryDataset;
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Validation {
        line: usize,
        #[source]
        source: SchemaError,
    },
}

/// Counts recomputed from the examples themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub paragraphs: usize,
    pub mean_entities: f64,
    pub mean_sentences: f64,
}

impl SplitStats {
    fn from_counts(counts: impl Iterator<Item = (usize, usize)>) -> Self {
        let (mut paragraphs, mut ents, mut sents) = (0usize, 0usize, 0usize);
        for (e, s) in counts {
            paragraphs += 1;
            ents += e;
            sents += s;
        }
        let mean = |x: usize| if paragraphs == 0 { 0.0 } else { x as f64 / paragraphs as f64 };
        Self {
            paragraphs,
            mean_entities: mean(ents),
            mean_sentences: mean(sents),
        }
    }
}

/// Something a split can hold.
pub trait Countable {
    /// `(entities, sentences)` for statistics.
    fn counts(&self) -> (usize, usize);
}

impl Countable for ProceduralExample {
    fn counts(&self) -> (usize, usize) {
        (self.entities.len(), self.sentences.len())
    }
}

impl Countable for StoryPair {
    /// Unique-story statistics: entities of the first story.
    fn counts(&self) -> (usize, usize) {
        (self.entities[0].len(), self.steps())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub name: String,
    pub examples: Vec<T>,
}

impl<T: Countable> DatasetSplit<T> {
    pub fn new(name: impl Into<String>, examples: Vec<T>) -> Self {
        Self {
            name: name.into(),
            examples,
        }
    }

    pub fn stats(&self) -> SplitStats {
        SplitStats::from_counts(self.examples.iter().map(Countable::counts))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl DatasetSplit<ProceduralExample> {
    /// Unannotated paragraphs, i.e. the augmentation pool.
    pub fn pool(&self) -> impl Iterator<Item = &ProceduralExample> {
        self.examples.iter().filter(|e| !e.annotated)
    }

    pub fn annotated(&self) -> impl Iterator<Item = &ProceduralExample> {
        self.examples.iter().filter(|e| e.annotated)
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn split_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("split")
        .to_string()
}

/// Loads gold procedural data. Actions are always derived from states.
pub fn load_procedural(
    path: &Path,
    format: ProceduralFormat,
    policy: RecreationPolicy,
) -> Result<DatasetSplit<ProceduralExample>, IngestError> {
    let text = read_file(path)?;
    let examples = match format {
        ProceduralFormat::Jsonl => procedural::parse_jsonl(&text, ActionSource::Derive, policy)?,
        ProceduralFormat::GridTsv => procedural::parse_grid(&text, policy)?,
    };
    Ok(DatasetSplit::new(split_name(path), examples))
}

/// Loads a prediction file, keeping predicted actions when present.
pub fn load_predictions(path: &Path) -> Result<Vec<ProceduralExample>, IngestError> {
    let text = read_file(path)?;
    procedural::parse_jsonl(&text, ActionSource::FileIfPresent, RecreationPolicy::Warn)
}

pub fn load_story(path: &Path) -> Result<StoryDataset, IngestError> {
    let text = read_file(path)?;
    story::parse(&text, split_name(path))
}

/// SHA-256 over file contents, hex encoded.
pub fn data_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
