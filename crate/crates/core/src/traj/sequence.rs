use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::stays::{detect_stays, StayConfig};
use super::vocab::{build_vocabulary, TokenKind, Vocabulary};
use super::window::{partition_windows, DAY_SECONDS};
use super::{PersistentLocation, RawTrajectory, TrajError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Agent,
    Subpop,
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelKind::Agent => "agent",
            LabelKind::Subpop => "subpop",
        })
    }
}

/// One discretized window of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub agent_id: String,
    /// Window index (windows since the epoch in local time).
    pub m: i64,
    pub label: usize,
    pub tokens: Vec<u32>,
    /// Positions of the cell tokens.
    pub loc_span: Range<usize>,
    /// Positions of the duration tokens.
    pub time_span: Range<usize>,
}

impl TokenSequence {
    pub fn n_stays(&self) -> usize {
        self.loc_span.len()
    }

    /// Positions holding cell tokens, i.e. the only maskable positions.
    pub fn cell_positions(&self) -> Range<usize> {
        self.loc_span.clone()
    }

    /// Number of non-PAD tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != 0).count()
    }

    /// Rebuilds a sequence from raw tokens, checking the layout.
    pub fn from_tokens(
        agent_id: String,
        m: i64,
        label: usize,
        tokens: Vec<u32>,
        vocab: &Vocabulary,
    ) -> Result<Self, TrajError> {
        let bad = |why: &str| TrajError::Dataset(format!("agent {agent_id} window {m}: {why}"));
        if tokens.len() != vocab.seq_len() {
            return Err(bad(&format!(
                "length {} differs from vocabulary sequence length {}",
                tokens.len(),
                vocab.seq_len()
            )));
        }
        let s = vocab.special_ids;
        let sep = vocab.max_loc_len + 1;
        if tokens[0] != s.bos || tokens[sep] != s.sep || tokens[tokens.len() - 1] != s.eos {
            return Err(bad("BOS/SEP/EOS not at their fixed positions"));
        }
        let count_run = |range: Range<usize>, want_cell: bool| -> Result<usize, TrajError> {
            let mut n = 0;
            let mut seen_pad = false;
            for &t in &tokens[range] {
                match vocab.classify(t) {
                    Some(TokenKind::Pad) => seen_pad = true,
                    Some(TokenKind::Cell(_)) if want_cell && !seen_pad => n += 1,
                    Some(TokenKind::Time(_)) if !want_cell && !seen_pad => n += 1,
                    _ => return Err(bad(&format!("unexpected token {t}"))),
                }
            }
            Ok(n)
        };
        let n_loc = count_run(1..sep, true)?;
        let n_time = count_run(sep + 1..tokens.len() - 1, false)?;
        if n_loc != n_time {
            return Err(bad("cell and duration counts differ"));
        }
        Ok(Self { agent_id, m, label, tokens, loc_span: 1..1 + n_loc, time_span: sep + 1..sep + 1 + n_time })
    }
}

/// Lays out one window as `[BOS, cells…, PAD…, SEP, durations…, PAD…, EOS]`,
/// padding both halves to the vocabulary's frozen maximum lengths.
pub fn assemble_sequence(
    agent_id: &str,
    m: i64,
    label: usize,
    stays: &[PersistentLocation],
    vocab: &Vocabulary,
) -> Result<TokenSequence, TrajError> {
    let max_len = vocab.max_loc_len.min(vocab.max_time_len);
    if stays.len() > max_len {
        return Err(TrajError::SequenceOverflow {
            agent_id: agent_id.to_string(),
            window: m,
            count: stays.len(),
            max: max_len,
        });
    }
    let s = vocab.special_ids;
    let mut tokens = Vec::with_capacity(vocab.seq_len());
    tokens.push(s.bos);
    for pl in stays {
        tokens.push(vocab.cell_token(&pl.cell_id)?);
    }
    tokens.resize(1 + vocab.max_loc_len, s.pad);
    tokens.push(s.sep);
    let time_start = tokens.len();
    for pl in stays {
        tokens.push(vocab.time_token(pl.dwell_seconds()));
    }
    tokens.resize(time_start + vocab.max_time_len, s.pad);
    tokens.push(s.eos);
    Ok(TokenSequence {
        agent_id: agent_id.to_string(),
        m,
        label,
        tokens,
        loc_span: 1..1 + stays.len(),
        time_span: time_start..time_start + stays.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizeConfig {
    pub window_seconds: i64,
    pub timezone_offset: i64,
    pub stay: StayConfig,
    pub block_seconds: i64,
    pub max_dwell: i64,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        Self {
            window_seconds: DAY_SECONDS,
            timezone_offset: 0,
            stay: StayConfig::default(),
            block_seconds: 600,
            max_dwell: DAY_SECONDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCorpus {
    pub vocab: Vocabulary,
    pub sequences: Vec<TokenSequence>,
    pub label_kind: LabelKind,
    /// Label index → agent id or subpopulation id.
    pub label_names: Vec<String>,
    /// Windows that produced no stay and therefore no sequence.
    pub skipped_windows: usize,
}

type WindowStays = (String, i64, Vec<PersistentLocation>);

fn collect_stays(trajs: &[RawTrajectory], cfg: &TokenizeConfig) -> Result<(Vec<WindowStays>, usize), TrajError> {
    let mut order: Vec<&RawTrajectory> = trajs.iter().collect();
    order.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
    let mut out = Vec::new();
    let mut skipped = 0;
    for traj in order {
        for (m, w) in partition_windows(traj, cfg.window_seconds, cfg.timezone_offset)? {
            let stays = detect_stays(&w, &cfg.stay)?;
            if stays.is_empty() {
                debug!("agent {} window {m}: no stays, skipped", traj.agent_id);
                skipped += 1;
                continue;
            }
            out.push((traj.agent_id.clone(), m, stays));
        }
    }
    if skipped > 0 {
        warn!("{skipped} windows without persistent locations were skipped");
    }
    Ok((out, skipped))
}

fn label_table(
    windows: &[WindowStays],
    kind: LabelKind,
    subpops: Option<&BTreeMap<String, u32>>,
) -> Result<(Vec<String>, BTreeMap<String, usize>), TrajError> {
    let agents: BTreeSet<&str> = windows.iter().map(|w| w.0.as_str()).collect();
    match kind {
        LabelKind::Agent => {
            let names: Vec<String> = agents.iter().map(|s| s.to_string()).collect();
            let map = names.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
            Ok((names, map))
        }
        LabelKind::Subpop => {
            let subpops = subpops
                .ok_or_else(|| TrajError::Dataset("subpopulation labels requested but no label map given".into()))?;
            let mut groups = BTreeSet::new();
            for a in &agents {
                let g =
                    subpops.get(*a).ok_or_else(|| TrajError::Dataset(format!("agent {a} missing from label map")))?;
                groups.insert(*g);
            }
            let names: Vec<String> = groups.iter().map(|g| g.to_string()).collect();
            let pos: BTreeMap<u32, usize> = groups.iter().enumerate().map(|(i, &g)| (g, i)).collect();
            let map = agents.iter().map(|a| (a.to_string(), pos[&subpops[*a]])).collect();
            Ok((names, map))
        }
    }
}

fn assemble_all(
    windows: &[WindowStays],
    vocab: &Vocabulary,
    labels: &BTreeMap<String, usize>,
) -> Result<Vec<TokenSequence>, TrajError> {
    windows.iter().map(|(agent, m, stays)| assemble_sequence(agent, *m, labels[agent], stays, vocab)).collect()
}

/// Full pipeline over a corpus: windows, stays, vocabulary, sequences.
/// Agents are processed in id order so the output is deterministic.
pub fn tokenize_corpus(
    trajs: &[RawTrajectory],
    cfg: &TokenizeConfig,
    label_kind: LabelKind,
    subpops: Option<&BTreeMap<String, u32>>,
) -> Result<TokenizedCorpus, TrajError> {
    let (windows, skipped_windows) = collect_stays(trajs, cfg)?;
    let all: Vec<Vec<PersistentLocation>> = windows.iter().map(|w| w.2.clone()).collect();
    let vocab = build_vocabulary(&all, cfg.stay.zoom, cfg.block_seconds, cfg.max_dwell)?;
    let (label_names, labels) = label_table(&windows, label_kind, subpops)?;
    let sequences = assemble_all(&windows, &vocab, &labels)?;
    Ok(TokenizedCorpus { vocab, sequences, label_kind, label_names, skipped_windows })
}

/// Tokenizes new trajectories against an existing vocabulary.
pub fn tokenize_with_vocab(
    trajs: &[RawTrajectory],
    cfg: &TokenizeConfig,
    vocab: &Vocabulary,
    label_kind: LabelKind,
    subpops: Option<&BTreeMap<String, u32>>,
) -> Result<TokenizedCorpus, TrajError> {
    let (windows, skipped_windows) = collect_stays(trajs, cfg)?;
    let (label_names, labels) = label_table(&windows, label_kind, subpops)?;
    let sequences = assemble_all(&windows, vocab, &labels)?;
    Ok(TokenizedCorpus { vocab: vocab.clone(), sequences, label_kind, label_names, skipped_windows })
}

#[derive(Serialize, Deserialize)]
struct Record {
    agent_id: String,
    m: i64,
    label: usize,
    label_kind: LabelKind,
    tokens: Vec<u32>,
}

/// Writes one JSON object per line: `{agent_id, m, label, label_kind, tokens}`.
pub fn write_dataset(path: &Path, sequences: &[TokenSequence], label_kind: LabelKind) -> Result<(), TrajError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sequences {
        let rec = Record { agent_id: s.agent_id.clone(), m: s.m, label: s.label, label_kind, tokens: s.tokens.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], validating every record
/// against the vocabulary layout.
pub fn read_dataset(path: &Path, vocab: &Vocabulary) -> Result<(Vec<TokenSequence>, LabelKind), TrajError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut kind = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| TrajError::Dataset(format!("line {}: {e}", lineno + 1)))?;
        match kind {
            None => kind = Some(rec.label_kind),
            Some(k) if k != rec.label_kind => {
                return Err(TrajError::Dataset(format!("line {}: mixed label kinds", lineno + 1)))
            }
            _ => {}
        }
        out.push(TokenSequence::from_tokens(rec.agent_id, rec.m, rec.label, rec.tokens, vocab)?);
    }
    let kind = kind.ok_or_else(|| TrajError::Dataset(format!("{} holds no records", path.display())))?;
    Ok((out, kind))
}
