//! Raw trajectories to discrete token sequences.
//!
//! The pipeline is: split an agent's trajectory into fixed time windows, find
//! the persistent locations (stay points) in each window, map every stay to a
//! hierarchical spatial cell and a duration block, then lay the two
//! sub-sequences out as `[BOS, cells…, PAD…, SEP, durations…, PAD…, EOS]`.

mod cell;
mod ingest;
mod sequence;
mod stays;
mod vocab;
mod window;

pub use cell::{map_cell, CellId, MAX_ZOOM};
pub use ingest::{ingest_csv, ingest_reader, parse_timestamp, IngestReport};
pub use sequence::{
    assemble_sequence, read_dataset, tokenize_corpus, tokenize_with_vocab, write_dataset, LabelKind, TokenSequence,
    TokenizeConfig, TokenizedCorpus,
};
pub use stays::{detect_stays, StayConfig};
pub use vocab::{build_vocabulary, discretize_duration, SpecialIds, TokenKind, Vocabulary, VOCAB_VERSION};
pub use window::{partition_windows, window_index, DAY_SECONDS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    CoordinateOutOfRange { lat: f64, lon: f64 },
    #[error("zoom {0} exceeds the maximum of 30")]
    InvalidZoom(u8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty corpus: no persistent locations found")]
    EmptyCorpus,
    #[error("window {window} of agent {agent_id} has {count} stays, more than the {max} allowed")]
    SequenceOverflow { agent_id: String, window: i64, count: usize, max: usize },
    #[error("cell {0:?} is not in the vocabulary")]
    UnknownCell(CellId),
    #[error("csv schema: missing column `{0}`")]
    MissingColumn(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since the Unix epoch.
    pub t: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub agent_id: String,
    pub points: Vec<RawPoint>,
}

impl RawTrajectory {
    pub fn new(agent_id: impl Into<String>, points: Vec<RawPoint>) -> Self {
        Self { agent_id: agent_id.into(), points }
    }

    /// Sorts by time and drops repeated timestamps (first occurrence wins).
    /// Returns the number of dropped points.
    pub fn normalize(&mut self) -> usize {
        self.points.sort_by_key(|p| p.t);
        let before = self.points.len();
        self.points.dedup_by_key(|p| p.t);
        before - self.points.len()
    }

    pub fn is_sorted(&self) -> bool {
        self.points.windows(2).all(|w| w[0].t < w[1].t)
    }
}

/// A stay point: the agent remained within a small radius for a while.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistentLocation {
    pub centroid_lat: f64,
    pub centroid_lon: f64,
    pub arrival_t: i64,
    pub departure_t: i64,
    pub cell_id: CellId,
    /// Number of raw points that formed the stay.
    pub n_points: usize,
}

impl PersistentLocation {
    pub fn dwell_seconds(&self) -> i64 {
        self.departure_t - self.arrival_t
    }
}
