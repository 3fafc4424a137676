//! Positional-encoding policies: mappings from (query position, key
//! position, sequence metadata) to shared encoding slots, plus the slot
//! tables holding the learnable vectors.
//!
//! Pairwise encodings attach to the attention keys only: for a pair with
//! slot `s`, the key content entering query `i`'s score is
//! `W_K z_j + p_s`. APE contributes at the embedding instead and has no
//! pairwise slot.

use crate::datagen::Span;
use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Positional-encoding family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PeVariant {
    /// No positional information at all.
    Nope,
    /// A unique learned vector added per absolute position before layer 0.
    Ape { max_len: usize },
    /// Pairwise vectors indexed by the clamped offset `i - j`.
    Rpe { max_offset: usize },
    /// Designated key positions contribute one constant vector to every
    /// query; all other pairs fall back to relative slots.
    Upe {
        uniform_positions: Vec<usize>,
        rpe_max_offset: usize,
    },
    /// Relative slots indexed by the difference of digit significances,
    /// for text-interleaved inputs; non-digit pairs carry no bias.
    SigRpe { max_offset: usize },
}

/// A positional-encoding policy together with its vector dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeScheme {
    pub variant: PeVariant,
    /// Dimension of each encoding vector (`d_z/H` for pairwise variants,
    /// `d_z` for APE).
    pub slot_dim: usize,
}

/// Sequence metadata a slot lookup may need.
#[derive(Debug, Clone, Copy, Default)]
pub struct PosMeta {
    pub digit_spans: Option<(Span, Span)>,
}

impl PosMeta {
    pub fn from_spans(spans: Option<(Span, Span)>) -> Self {
        PosMeta { digit_spans: spans }
    }
}

fn clamp_offset(diff: i64, max_offset: usize) -> usize {
    let m = max_offset as i64;
    (diff.clamp(-m, m) + m) as usize
}

/// Significance of `pos` inside a digit span (least-significant digit has
/// significance 1), or `None` outside the span.
fn significance(pos: usize, span: Span) -> Option<usize> {
    let (start, len) = span;
    (start..start + len).contains(&pos).then(|| start + len - pos)
}

impl PeScheme {
    /// RPE clamped just past the addition dependency window: sigma_rel
    /// needs offsets up to l+1, so everything farther is collapsed into
    /// the boundary slots. The tight clamp measurably improves length
    /// generalization over an unclamped table.
    pub fn rpe_for_add(l: usize, slot_dim: usize) -> Self {
        PeScheme {
            variant: PeVariant::Rpe { max_offset: l + 2 },
            slot_dim,
        }
    }

    /// UPE over the multiplier digit positions combined with RPE sized
    /// for the multiplication format.
    pub fn upe_for_mul(l: usize, multiplier_len: usize, slot_dim: usize) -> Self {
        PeScheme {
            variant: PeVariant::Upe {
                uniform_positions: (0..multiplier_len).collect(),
                rpe_max_offset: l + multiplier_len + 1,
            },
            slot_dim,
        }
    }

    pub fn ape(max_len: usize, slot_dim: usize) -> Self {
        PeScheme {
            variant: PeVariant::Ape { max_len },
            slot_dim,
        }
    }

    /// Number of pairwise slots (0 for APE / NoPE).
    pub fn slot_count(&self) -> usize {
        match &self.variant {
            PeVariant::Nope | PeVariant::Ape { .. } => 0,
            PeVariant::Rpe { max_offset } => 2 * max_offset + 1,
            PeVariant::Upe {
                uniform_positions,
                rpe_max_offset,
            } => 2 * rpe_max_offset + 1 + uniform_positions.len(),
            PeVariant::SigRpe { max_offset } => 2 * max_offset + 1,
        }
    }

    /// Whether an APE table of the given length is required.
    pub fn ape_len(&self) -> Option<usize> {
        match self.variant {
            PeVariant::Ape { max_len } => Some(max_len),
            _ => None,
        }
    }

    /// Shared encoding slot for query `i` attending key `j`, or `None`
    /// when the pair carries no positional bias.
    pub fn pairwise_slot(&self, i: usize, j: usize, meta: &PosMeta) -> Option<usize> {
        let diff = i as i64 - j as i64;
        match &self.variant {
            PeVariant::Nope | PeVariant::Ape { .. } => None,
            PeVariant::Rpe { max_offset } => Some(clamp_offset(diff, *max_offset)),
            PeVariant::Upe {
                uniform_positions,
                rpe_max_offset,
            } => {
                if let Some(idx) = uniform_positions.iter().position(|&p| p == j) {
                    Some(2 * rpe_max_offset + 1 + idx)
                } else {
                    Some(clamp_offset(diff, *rpe_max_offset))
                }
            }
            PeVariant::SigRpe { max_offset } => {
                let (s1, s2) = meta.digit_spans?;
                let sig = |pos| significance(pos, s1).or_else(|| significance(pos, s2));
                let (si, sj) = (sig(i)?, sig(j)?);
                Some(clamp_offset(si as i64 - sj as i64, *max_offset))
            }
        }
    }

    /// Human-readable slot label, used for the positional-map export.
    pub fn slot_label(&self, slot: usize) -> String {
        match &self.variant {
            PeVariant::Rpe { max_offset } | PeVariant::SigRpe { max_offset } => {
                format!("off_{}", slot as i64 - *max_offset as i64)
            }
            PeVariant::Upe { rpe_max_offset, .. } => {
                let rel = 2 * rpe_max_offset + 1;
                if slot < rel {
                    format!("off_{}", slot as i64 - *rpe_max_offset as i64)
                } else {
                    format!("c_{}", slot - rel + 1)
                }
            }
            PeVariant::Ape { .. } => format!("pos_{slot}"),
            PeVariant::Nope => format!("slot_{slot}"),
        }
    }
}

/// Learnable vectors, one per slot id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTable {
    pub vectors: Array2<f64>,
    pub trainable: bool,
}

impl SlotTable {
    pub fn zeros(slots: usize, dim: usize) -> Self {
        SlotTable {
            vectors: Array2::zeros((slots, dim)),
            trainable: true,
        }
    }

    pub fn slots(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Pre-softmax attention logits with key-side positional bias:
/// `logit(i, j) = q_i . (k_j + p_slot(i, j))`, unscaled.
pub fn biased_attention_logits(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    scheme: &PeScheme,
    table: Option<&SlotTable>,
    meta: &PosMeta,
) -> Result<Array2<f64>> {
    let n = q.nrows();
    if k.nrows() != n || k.ncols() != q.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "q {:?} vs k {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if let Some(t) = table {
        if t.slots() != scheme.slot_count() || t.dim() != q.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "slot table {}x{} for scheme with {} slots of dim {}",
                t.slots(),
                t.dim(),
                scheme.slot_count(),
                q.ncols()
            )));
        }
    }
    let mut logits = q.dot(&k.t());
    if let Some(t) = table {
        for i in 0..n {
            for j in 0..n {
                if let Some(s) = scheme.pairwise_slot(i, j, meta) {
                    logits[[i, j]] += q.row(i).dot(&t.vectors.row(s));
                }
            }
        }
    }
    Ok(logits)
}

/// Write one slot table as CSV: rows labeled by slot, columns by vector
/// component.
pub fn export_slot_table<W: Write>(
    out: W,
    scheme: &PeScheme,
    table: &SlotTable,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slot".to_string()];
    header.extend((0..table.dim()).map(|c| format!("v{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in 0..table.slots() {
        let mut row = vec![scheme.slot_label(s)];
        row.extend(table.vectors.row(s).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
