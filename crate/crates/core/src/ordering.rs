//! Scan orderings: the bijections from an N-d index grid to 1-D sequence
//! positions, written (k₁..k_N)± — an axis permutation plus a traversal
//! direction. For rank N there are exactly 2·N! of them.
//!
//! Canonical axis names: 2-D data is (H, W); 3-D data is (T, H, W).
//! Shorthand tokens follow the usual convention: the named axis is the one
//! traversed contiguously, e.g. 3-D `H` means `(TWH)` and `L` is the plain
//! memory order `(THW)`.
//!
//! Orderings are implemented as permute + reshape + optional reverse, so
//! applying one on a tape keeps gradients flowing through existing ops.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{invert_permutation, is_permutation, NdArray};
use itertools::Itertools;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScanOrdering {
    /// Axis indices in nesting order; the last entry is traversed with
    /// stride 1 in the flattened sequence.
    pub perm: Vec<usize>,
    /// Traverse the flattened sequence back to front.
    pub reversed: bool,
}

/// Axis letters for the canonical ranks.
fn axis_letters(rank: usize) -> Result<&'static [char]> {
    match rank {
        1 => Ok(&['L']),
        2 => Ok(&['H', 'W']),
        3 => Ok(&['T', 'H', 'W']),
        _ => Err(Error::InvalidOrdering(format!("no axis names for rank {rank}"))),
    }
}

fn axis_index(letter: char, rank: usize) -> Result<usize> {
    axis_letters(rank)?
        .iter()
        .position(|&c| c == letter)
        .ok_or_else(|| Error::InvalidOrdering(format!("axis '{letter}' invalid for rank {rank}")))
}

impl ScanOrdering {
    pub fn new(perm: Vec<usize>, reversed: bool) -> Result<Self> {
        let rank = perm.len();
        if !is_permutation(&perm, rank) {
            return Err(Error::InvalidOrdering(format!("{perm:?} is not an axis permutation")));
        }
        Ok(ScanOrdering { perm, reversed })
    }

    pub fn rank(&self) -> usize {
        self.perm.len()
    }

    /// The plain row-major order (THW / HW / ...), forward.
    pub fn memory_order(rank: usize) -> Self {
        ScanOrdering { perm: (0..rank).collect(), reversed: false }
    }

    /// Shorthand for scanning contiguously along `axis`: all other axes in
    /// their natural order first, `axis` last.
    pub fn along_axis(axis: usize, rank: usize, reversed: bool) -> Result<Self> {
        if axis >= rank {
            return Err(Error::InvalidOrdering(format!("axis {axis} out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        perm.push(axis);
        Ok(ScanOrdering { perm, reversed })
    }

    /// Parse a token: shorthand `H+ H- W+ W- T+ T- L+ L-` or explicit
    /// `(TWH)+` / `(WH)-` forms. Shorthand needs the rank to resolve.
    pub fn parse(token: &str, rank: usize) -> Result<Self> {
        let token = token.trim();
        let (body, reversed) = match token.chars().last() {
            Some('+') => (&token[..token.len() - 1], false),
            Some('-') => (&token[..token.len() - 1], true),
            _ => return Err(Error::InvalidOrdering(format!("'{token}' missing +/- direction"))),
        };
        if body.starts_with('(') && body.ends_with(')') {
            let letters: Vec<char> = body[1..body.len() - 1].chars().collect();
            if letters.len() != rank {
                return Err(Error::InvalidOrdering(format!(
                    "'{token}' names {} axes, expected {rank}",
                    letters.len()
                )));
            }
            let perm = letters
                .iter()
                .map(|&c| axis_index(c, rank))
                .collect::<Result<Vec<_>>>()?;
            return ScanOrdering::new(perm, reversed);
        }
        let mut chars = body.chars();
        let (Some(letter), None) = (chars.next(), chars.next()) else {
            return Err(Error::InvalidOrdering(format!("cannot parse '{token}'")));
        };
        if letter == 'L' {
            return Ok(ScanOrdering { perm: (0..rank).collect(), reversed });
        }
        ScanOrdering::along_axis(axis_index(letter, rank)?, rank, reversed)
    }

    /// Explicit `(AXES)±` form.
    pub fn explicit_name(&self) -> String {
        let letters = axis_letters(self.rank()).expect("rank has names");
        let body: String = self.perm.iter().map(|&a| letters[a]).collect();
        format!("({}){}", body, if self.reversed { '-' } else { '+' })
    }

    /// Shorthand if this ordering has one, else the explicit form.
    pub fn name(&self) -> String {
        let rank = self.rank();
        let sign = if self.reversed { '-' } else { '+' };
        if let Ok(letters) = axis_letters(rank) {
            for &letter in letters {
                if letter != 'L' {
                    if let Ok(idx) = axis_index(letter, rank) {
                        if let Ok(short) = ScanOrdering::along_axis(idx, rank, self.reversed) {
                            if short.perm == self.perm {
                                return format!("{letter}{sign}");
                            }
                        }
                    }
                }
            }
        }
        self.explicit_name()
    }

    /// Flatten an N-d array into the 1-D sequence this ordering defines.
    pub fn apply(&self, a: &NdArray) -> Result<NdArray> {
        if a.rank() != self.rank() {
            return Err(Error::InvalidOrdering(format!(
                "ordering rank {} vs array rank {}",
                self.rank(),
                a.rank()
            )));
        }
        let seq = a.permute(&self.perm)?.reshape(&[a.len()])?;
        Ok(if self.reversed { seq.reverse_flat() } else { seq })
    }

    /// Inverse of `apply`: bit-exact round trip back to `original_shape`.
    pub fn invert(&self, seq: &NdArray, original_shape: &[usize]) -> Result<NdArray> {
        if original_shape.len() != self.rank() {
            return Err(Error::InvalidOrdering(format!(
                "ordering rank {} vs shape {:?}",
                self.rank(),
                original_shape
            )));
        }
        let n: usize = original_shape.iter().product();
        if seq.len() != n || seq.rank() != 1 {
            return Err(Error::shape(format!(
                "sequence of {} elements vs shape {:?}",
                seq.len(),
                original_shape
            )));
        }
        let seq = if self.reversed { seq.reverse_flat() } else { seq.clone() };
        let permuted_shape: Vec<usize> = self.perm.iter().map(|&p| original_shape[p]).collect();
        seq.reshape(&permuted_shape)?.permute(&invert_permutation(&self.perm))
    }

    /// Reorder a channeled token grid on the tape: `v` is (L, C) in memory
    /// order over `grid_dims`; the result is (L, C) in this ordering's
    /// sequence. Channels ride along unchanged.
    pub fn apply_tape(&self, tape: &mut Tape, v: VarId, grid_dims: &[usize]) -> Result<VarId> {
        let rank = self.rank();
        if grid_dims.len() != rank {
            return Err(Error::InvalidOrdering(format!(
                "ordering rank {rank} vs grid {grid_dims:?}"
            )));
        }
        let (l, c) = seq_dims(tape, v, grid_dims)?;
        let mut shape: Vec<usize> = grid_dims.to_vec();
        shape.push(c);
        let mut full_perm = self.perm.clone();
        full_perm.push(rank);
        let g = tape.reshape(v, &shape)?;
        let p = tape.permute(g, &full_perm)?;
        let seq = if self.reversed {
            let mut mask = vec![true; rank];
            mask.push(false);
            tape.flip_axes(p, &mask)?
        } else {
            p
        };
        tape.reshape(seq, &[l, c])
    }

    /// Inverse of `apply_tape`.
    pub fn invert_tape(&self, tape: &mut Tape, v: VarId, grid_dims: &[usize]) -> Result<VarId> {
        let rank = self.rank();
        let (l, c) = seq_dims(tape, v, grid_dims)?;
        let mut permuted_shape: Vec<usize> = self.perm.iter().map(|&p| grid_dims[p]).collect();
        permuted_shape.push(c);
        let g = tape.reshape(v, &permuted_shape)?;
        let unflipped = if self.reversed {
            let mut mask = vec![true; rank];
            mask.push(false);
            tape.flip_axes(g, &mask)?
        } else {
            g
        };
        let mut inv = invert_permutation(&self.perm);
        inv.push(rank);
        let back = tape.permute(unflipped, &inv)?;
        tape.reshape(back, &[l, c])
    }
}

fn seq_dims(tape: &Tape, v: VarId, grid_dims: &[usize]) -> Result<(usize, usize)> {
    let val = tape.value(v);
    let l: usize = grid_dims.iter().product();
    if val.rank() != 2 || val.shape()[0] != l {
        return Err(Error::shape(format!(
            "expected ({l}, C) sequence for grid {grid_dims:?}, got {:?}",
            val.shape()
        )));
    }
    Ok((l, val.shape()[1]))
}

impl fmt::Display for ScanOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl Serialize for ScanOrdering {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.explicit_name())
    }
}

impl<'de> Deserialize<'de> for ScanOrdering {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        // Explicit form carries its own rank.
        let inner = s.trim();
        let body_len = inner
            .strip_prefix('(')
            .and_then(|rest| rest.find(')'))
            .ok_or_else(|| D::Error::custom(format!("expected explicit (AXES)± form, got '{s}'")))?;
        ScanOrdering::parse(inner, body_len).map_err(D::Error::custom)
    }
}

/// All 2·N! scan orderings of rank N: every axis permutation in both
/// directions. Deterministic order: lexicographic permutations, + then −.
pub fn enumerate(rank: usize) -> Vec<ScanOrdering> {
    let mut out = Vec::new();
    for perm in (0..rank).permutations(rank) {
        for reversed in [false, true] {
            out.push(ScanOrdering { perm: perm.clone(), reversed });
        }
    }
    out
}

/// One alternating-cycle configuration for 3-D data: a direction-per-axis
/// prefix choice (each contiguous axis has two possible nesting prefixes)
/// plus the order in which the three axes appear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlternatingConfig {
    /// The three scan axes in cycle order.
    pub axis_order: [usize; 3],
    /// For each axis (indexed by axis id), whether the two remaining axes
    /// appear swapped in the nesting prefix.
    pub prefix_swapped: [bool; 3],
}

impl AlternatingConfig {
    fn ordering_for_axis(&self, axis: usize, reversed: bool) -> ScanOrdering {
        let mut others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        if self.prefix_swapped[axis] {
            others.swap(0, 1);
        }
        others.push(axis);
        ScanOrdering { perm: others, reversed }
    }

    /// The 6-layer ordering cycle X₁+ X₁− X₂+ X₂− X₃+ X₃−.
    pub fn cycle(&self) -> Vec<ScanOrdering> {
        let mut out = Vec::with_capacity(6);
        for &axis in &self.axis_order {
            out.push(self.ordering_for_axis(axis, false));
            out.push(self.ordering_for_axis(axis, true));
        }
        out
    }
}

/// The 2³·3! = 48 alternating-cycle configurations for rank-3 data.
pub fn alternating_design_space() -> Vec<AlternatingConfig> {
    let mut out = Vec::with_capacity(48);
    for order in (0..3usize).permutations(3) {
        for bits in 0..8u8 {
            out.push(AlternatingConfig {
                axis_order: [order[0], order[1], order[2]],
                prefix_swapped: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
            });
        }
    }
    out
}
