use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellId, PersistentLocation, TrajError};

pub const VOCAB_VERSION: u32 = 1;

/// Number of duration blocks for a dwell: round-half-even of `dwell / block`,
/// never less than one block.
pub fn discretize_duration(dwell: i64, block: i64) -> u32 {
    assert!(block > 0, "block length must be positive");
    let blocks = (dwell.max(0) as f64 / block as f64).round_ties_even();
    (blocks as u32).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub sep: u32,
    pub eos: u32,
    pub mask: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    /// 1-based cell index.
    Cell(u32),
    /// Duration in blocks, 1-based.
    Time(u32),
    Bos,
    Sep,
    Eos,
    Mask,
}

impl TokenKind {
    pub fn is_special(&self) -> bool {
        matches!(self, TokenKind::Bos | TokenKind::Sep | TokenKind::Eos | TokenKind::Mask)
    }
}

/// Token-id layout: `PAD = 0`, cells `1..=n_cells`, duration blocks
/// `n_cells + 1..=n_cells + n_time_blocks`, then `BOS, SEP, EOS, MASK`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub version: u32,
    pub zoom: u8,
    pub block_seconds: i64,
    pub n_cells: usize,
    pub n_time_blocks: usize,
    /// Cell index at `zoom` → token id.
    pub cell_index_map: BTreeMap<u64, u32>,
    pub special_ids: SpecialIds,
    pub max_loc_len: usize,
    pub max_time_len: usize,
}

impl Vocabulary {
    /// Lays out a vocabulary over the given cells, ordered by cell index.
    pub fn from_cells(
        zoom: u8,
        block_seconds: i64,
        cells: impl IntoIterator<Item = CellId>,
        n_time_blocks: usize,
        max_loc_len: usize,
        max_time_len: usize,
    ) -> Result<Self, TrajError> {
        if block_seconds <= 0 || n_time_blocks == 0 {
            return Err(TrajError::InvalidParameter("block length and time-block count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for c in cells {
            if c.zoom != zoom {
                return Err(TrajError::Vocabulary(format!("cell at zoom {} in a zoom-{zoom} vocabulary", c.zoom)));
            }
            set.insert(c.index);
        }
        let cell_index_map: BTreeMap<u64, u32> =
            set.into_iter().enumerate().map(|(i, idx)| (idx, i as u32 + 1)).collect();
        let n_cells = cell_index_map.len();
        let top = (n_cells + n_time_blocks) as u32;
        Ok(Self {
            version: VOCAB_VERSION,
            zoom,
            block_seconds,
            n_cells,
            n_time_blocks,
            cell_index_map,
            special_ids: SpecialIds { pad: 0, bos: top + 1, sep: top + 2, eos: top + 3, mask: top + 4 },
            max_loc_len,
            max_time_len,
        })
    }

    /// Total number of token ids, PAD included.
    pub fn size(&self) -> usize {
        self.n_cells + self.n_time_blocks + 5
    }

    /// Fixed sequence length: both padded sub-sequences plus BOS, SEP, EOS.
    pub fn seq_len(&self) -> usize {
        self.max_loc_len + self.max_time_len + 3
    }

    pub fn classify(&self, id: u32) -> Option<TokenKind> {
        let n_cells = self.n_cells as u32;
        let n_time = self.n_time_blocks as u32;
        let s = &self.special_ids;
        Some(match id {
            0 => TokenKind::Pad,
            i if i <= n_cells => TokenKind::Cell(i),
            i if i <= n_cells + n_time => TokenKind::Time(i - n_cells),
            i if i == s.bos => TokenKind::Bos,
            i if i == s.sep => TokenKind::Sep,
            i if i == s.eos => TokenKind::Eos,
            i if i == s.mask => TokenKind::Mask,
            _ => return None,
        })
    }

    pub fn cell_token(&self, cell: &CellId) -> Result<u32, TrajError> {
        if cell.zoom != self.zoom {
            return Err(TrajError::UnknownCell(*cell));
        }
        self.cell_index_map.get(&cell.index).copied().ok_or(TrajError::UnknownCell(*cell))
    }

    /// Inverse of [`Vocabulary::cell_token`].
    pub fn token_cell(&self, id: u32) -> Option<CellId> {
        // cell_index_map is ordered by cell index and ids are assigned in that order
        if id == 0 || id as usize > self.n_cells {
            return None;
        }
        self.cell_index_map.iter().nth(id as usize - 1).map(|(&index, _)| CellId { zoom: self.zoom, index })
    }

    /// Duration block for a dwell, clamped to `[1, n_time_blocks]`.
    pub fn time_block(&self, dwell: i64) -> u32 {
        discretize_duration(dwell, self.block_seconds).min(self.n_time_blocks as u32)
    }

    pub fn time_token(&self, dwell: i64) -> u32 {
        self.n_cells as u32 + self.time_block(dwell)
    }

    fn validate(&self) -> Result<(), TrajError> {
        if self.version != VOCAB_VERSION {
            return Err(TrajError::Vocabulary(format!("unsupported vocabulary version {}", self.version)));
        }
        if self.cell_index_map.len() != self.n_cells {
            return Err(TrajError::Vocabulary("cell map size differs from n_cells".into()));
        }
        for (i, (_, &id)) in self.cell_index_map.iter().enumerate() {
            if id != i as u32 + 1 {
                return Err(TrajError::Vocabulary("cell ids are not 1..=n_cells in cell order".into()));
            }
        }
        let top = (self.n_cells + self.n_time_blocks) as u32;
        let s = self.special_ids;
        if s.pad != 0 || s.bos != top + 1 || s.sep != top + 2 || s.eos != top + 3 || s.mask != top + 4 {
            return Err(TrajError::Vocabulary("special ids do not follow the layout".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, TrajError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TrajError> {
        let v: Self = serde_json::from_str(s)?;
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrajError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrajError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Builds the vocabulary over every stay of every window. The maximum
/// sub-sequence lengths are the largest per-window stay count.
pub fn build_vocabulary(
    windows: &[Vec<PersistentLocation>],
    zoom: u8,
    block_seconds: i64,
    max_dwell: i64,
) -> Result<Vocabulary, TrajError> {
    if block_seconds <= 0 || max_dwell <= 0 {
        return Err(TrajError::InvalidParameter("block length and max dwell must be positive".into()));
    }
    let total: usize = windows.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(TrajError::EmptyCorpus);
    }
    let n_time_blocks = ((max_dwell + block_seconds - 1) / block_seconds) as usize;
    let max_len = windows.iter().map(Vec::len).max().unwrap_or(0);
    Vocabulary::from_cells(
        zoom,
        block_seconds,
        windows.iter().flatten().map(|pl| pl.cell_id),
        n_time_blocks,
        max_len,
        max_len,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cells(n: u64) -> Vec<CellId> {
        (0..n).map(|i| CellId { zoom: 16, index: 1000 + 7 * i }).collect()
    }

    #[test]
    fn eight_hours_in_half_hour_blocks() {
        assert_eq!(discretize_duration(8 * 3600, 1800), 16);
        assert_eq!([8, 6, 2, 2, 6].map(|h| discretize_duration(h * 3600, 1800)), [16, 12, 4, 4, 12]);
    }

    #[test]
    fn short_dwells_clamp_to_one_block() {
        for d in [1, 60, 299, 300] {
            assert_eq!(discretize_duration(d, 600), 1, "{d}");
        }
        assert_eq!(discretize_duration(0, 600), 1);
    }

    #[test]
    fn ties_round_to_even() {
        // table of dwell/block ratios exactly at .5 and their half-even results
        let table = [(25 * 60, 600, 2), (35 * 60, 600, 4), (45 * 60, 600, 4), (15 * 60, 600, 2), (26 * 60, 600, 3)];
        for (dwell, block, want) in table {
            assert_eq!(discretize_duration(dwell, block), want, "{dwell}/{block}");
        }
    }

    #[test]
    fn layout_arithmetic() {
        let v = Vocabulary::from_cells(16, 1800, cells(20), 48, 5, 5).unwrap();
        let s = v.special_ids;
        assert_eq!((s.bos, s.sep, s.eos, s.mask), (69, 70, 71, 72));
        assert_eq!(v.size(), 73);
        assert_eq!(v.time_token(8 * 3600), 36);
        assert_eq!(v.classify(0), Some(TokenKind::Pad));
        assert_eq!(v.classify(20), Some(TokenKind::Cell(20)));
        assert_eq!(v.classify(21), Some(TokenKind::Time(1)));
        assert_eq!(v.classify(68), Some(TokenKind::Time(48)));
        assert_eq!(v.classify(72), Some(TokenKind::Mask));
        assert_eq!(v.classify(73), None);
        // durations beyond the last block clamp to it
        assert_eq!(v.time_block(100 * 3600), 48);
    }

    #[test]
    fn cell_tokens_follow_cell_order() {
        let mut cs = cells(5);
        cs.reverse();
        let v = Vocabulary::from_cells(16, 600, cs.clone(), 10, 3, 3).unwrap();
        for (i, c) in cells(5).iter().enumerate() {
            assert_eq!(v.cell_token(c).unwrap(), i as u32 + 1);
            assert_eq!(v.token_cell(i as u32 + 1), Some(*c));
        }
        assert!(v.cell_token(&CellId { zoom: 16, index: 1 }).is_err());
        assert!(v.cell_token(&CellId { zoom: 15, index: 1000 }).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocabulary(&[vec![], vec![]], 16, 600, 86_400), Err(TrajError::EmptyCorpus)));
    }

    #[test]
    fn tampered_layout_is_rejected() {
        let v = Vocabulary::from_cells(16, 600, cells(3), 10, 3, 3).unwrap();
        let mut bad = v.clone();
        bad.special_ids.mask = 99;
        assert!(Vocabulary::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = v;
        bad.version = 7;
        assert!(Vocabulary::from_json(&bad.to_json().unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn json_roundtrip(idx in proptest::collection::btree_set(0u64..(1u64 << 32), 1..40), nt in 1usize..200, ml in 1usize..30) {
            let v = Vocabulary::from_cells(16, 600, idx.into_iter().map(|index| CellId { zoom: 16, index }), nt, ml, ml).unwrap();
            prop_assert_eq!(Vocabulary::from_json(&v.to_json().unwrap()).unwrap(), v);
        }

        #[test]
        fn classification_is_total_and_disjoint(nc in 1u64..50, nt in 1usize..100) {
            let v = Vocabulary::from_cells(16, 600, cells(nc), nt, 3, 3).unwrap();
            let mut counts = [0usize; 4];
            for id in 0..v.size() as u32 {
                match v.classify(id).expect("every id below size classifies") {
                    TokenKind::Pad => counts[0] += 1,
                    TokenKind::Cell(_) => counts[1] += 1,
                    TokenKind::Time(_) => counts[2] += 1,
                    _ => counts[3] += 1,
                }
            }
            prop_assert_eq!(counts, [1, nc as usize, nt, 4]);
        }
    }
}
