use log::warn;
use rand::seq::index::sample;
use rand::Rng;

use crate::traj::TokenSequence;

/// Inputs with some cell tokens replaced by MASK, plus what was hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// X': tokens with MASK substitutions.
    pub inputs: Vec<Vec<u32>>,
    /// X: the original tokens.
    pub originals: Vec<Vec<u32>>,
    /// Masked positions per sequence, ascending.
    pub positions: Vec<Vec<usize>>,
    /// Index into the source slice of each kept sequence.
    pub source: Vec<usize>,
}

impl MaskedBatch {
    /// Original token at every masked position, in (sequence, position) order.
    pub fn targets(&self) -> Vec<usize> {
        self.positions
            .iter()
            .zip(&self.originals)
            .flat_map(|(ps, orig)| ps.iter().map(move |&p| orig[p] as usize))
            .collect()
    }

    pub fn n_masked(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

/// Number of cell tokens hidden in a sequence with `n_cells` of them.
pub fn mask_count(n_cells: usize, fraction: f64) -> usize {
    ((fraction * n_cells as f64).ceil() as usize).clamp(1, n_cells)
}

/// Hides `⌈fraction·n⌉` (at least one) of each sequence's cell tokens, chosen
/// uniformly without replacement. Durations and special tokens are never
/// touched; sequences without cell tokens are dropped.
pub fn mask_batch<R: Rng + ?Sized>(seqs: &[&TokenSequence], fraction: f64, mask_id: u32, rng: &mut R) -> MaskedBatch {
    let mut out = MaskedBatch {
        inputs: Vec::with_capacity(seqs.len()),
        originals: Vec::with_capacity(seqs.len()),
        positions: Vec::with_capacity(seqs.len()),
        source: Vec::with_capacity(seqs.len()),
    };
    for (i, s) in seqs.iter().enumerate() {
        let span = s.cell_positions();
        if span.is_empty() {
            warn!("agent {} window {}: no cell tokens to mask, skipped", s.agent_id, s.m);
            continue;
        }
        let n = mask_count(span.len(), fraction);
        let mut pos: Vec<usize> = sample(rng, span.len(), n).into_iter().map(|j| span.start + j).collect();
        pos.sort_unstable();
        let mut input = s.tokens.clone();
        for &p in &pos {
            input[p] = mask_id;
        }
        out.inputs.push(input);
        out.originals.push(s.tokens.clone());
        out.positions.push(pos);
        out.source.push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::stream_rng;

    fn seq(n_cells: usize) -> TokenSequence {
        // [BOS, cells.., PAD, SEP, times.., PAD, EOS] with max 6 per half
        let mut tokens = vec![90];
        tokens.extend((1..=n_cells as u32).take(n_cells));
        tokens.resize(7, 0);
        tokens.push(91);
        tokens.extend((0..n_cells).map(|_| 50));
        tokens.resize(14, 0);
        tokens.push(92);
        TokenSequence {
            agent_id: "a".into(),
            m: 0,
            label: 0,
            tokens,
            loc_span: 1..1 + n_cells,
            time_span: 8..8 + n_cells,
        }
    }

    #[test]
    fn counts_follow_ceiling_rule() {
        assert_eq!(mask_count(5, 0.15), 1);
        assert_eq!(mask_count(10, 0.15), 2);
        assert_eq!(mask_count(3, 1e-9), 1);
        assert_eq!(mask_count(4, 0.99), 4);
    }

    #[test]
    fn masks_only_cells_and_keeps_originals() {
        let s = seq(6);
        let mut rng = stream_rng(0, "m");
        let b = mask_batch(&[&s], 0.5, 93, &mut rng);
        assert_eq!(b.positions[0].len(), 3);
        for &p in &b.positions[0] {
            assert!(s.loc_span.contains(&p));
            assert_eq!(b.inputs[0][p], 93);
        }
        assert_eq!(b.originals[0], s.tokens);
        let changed = (0..s.tokens.len()).filter(|&i| b.inputs[0][i] != s.tokens[i]).count();
        assert_eq!(changed, 3);
    }

    #[test]
    fn empty_sequences_are_skipped() {
        let (a, b) = (seq(0), seq(2));
        let mut rng = stream_rng(0, "m");
        let mb = mask_batch(&[&a, &b], 0.15, 93, &mut rng);
        assert_eq!(mb.source, vec![1]);
        assert_eq!(mb.n_masked(), 1);
    }
}
