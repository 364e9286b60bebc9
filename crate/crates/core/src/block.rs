//! Block-level wiring of Mamba layers: alternating-directional chains,
//! parallel direction groups, scan-factorization policies, and the DAG
//! depth view of an arrangement.
//!
//! An arrangement is an ordered list of groups. A chain group holds exactly
//! one layer; a parallel group holds two or more layers that all read the
//! same input and have their outputs summed. Identity-initialized layers
//! stay identity through either kind of group: parallel outputs are summed
//! after removing the per-member residual, then a single residual is added.

use crate::error::{Error, Result};
use crate::layer::{LayerDims, LayerKind, MambaLayer};
use crate::ordering::ScanOrdering;
use crate::tape::{Tape, VarId};
use crate::tensor::NdArray;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FactorizationPolicy {
    /// One monolithic sequence (also the only choice for 2-D grids).
    #[default]
    #[serde(rename = "3d")]
    Mono3d,
    /// Spatial layers scan T sequences of length HW; temporal layers scan
    /// HW sequences of length T.
    #[serde(rename = "2d+1d")]
    TwoPlusOne,
    /// Spatial layers scan T sequences of length HW; temporal layers scan
    /// the full sequence.
    #[serde(rename = "2d+3d")]
    TwoPlusThree,
    /// Every layer scans single-axis rows.
    #[serde(rename = "1d+1d+1d")]
    OnePlusOnePlusOne,
}

impl FactorizationPolicy {
    /// Asymptotic number of simultaneous sequences, B = batch and D = the
    /// length of a single dimension.
    pub fn sequence_count_order(&self) -> &'static str {
        match self {
            FactorizationPolicy::Mono3d => "O(B)",
            FactorizationPolicy::TwoPlusThree => "O(BD)",
            FactorizationPolicy::TwoPlusOne | FactorizationPolicy::OnePlusOnePlusOne => "O(BD^2)",
        }
    }
}

/// How one layer's scan splits under a policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorizationPlan {
    pub sub_len: usize,
    pub count: usize,
    /// Restart positions handed to the scan kernel.
    pub boundaries: Vec<usize>,
}

/// Sub-sequence plan for a layer scanning `ordering` over `grid_dims`.
/// Temporal layers are the ones scanning contiguously along axis T (= 0).
pub fn factorization_plan(
    policy: FactorizationPolicy,
    ordering: &ScanOrdering,
    grid_dims: &[usize],
) -> Result<FactorizationPlan> {
    let l: usize = grid_dims.iter().product();
    let whole = FactorizationPlan { sub_len: l, count: 1, boundaries: Vec::new() };
    if policy == FactorizationPolicy::Mono3d {
        return Ok(whole);
    }
    if grid_dims.len() != 3 || ordering.rank() != 3 {
        return Err(Error::Factorization(format!(
            "policy {policy:?} needs a 3-D grid, got {grid_dims:?}"
        )));
    }
    let temporal = *ordering.perm.last().unwrap() == 0;
    // A sub-sequence is the product of the trailing k permuted extents.
    let trailing = |k: usize| -> usize {
        ordering.perm[ordering.perm.len() - k..]
            .iter()
            .map(|&a| grid_dims[a])
            .product()
    };
    let sub_len = match (policy, temporal) {
        (FactorizationPolicy::TwoPlusOne, true) => trailing(1),
        (FactorizationPolicy::TwoPlusOne, false) => trailing(2),
        (FactorizationPolicy::TwoPlusThree, true) => l,
        (FactorizationPolicy::TwoPlusThree, false) => trailing(2),
        (FactorizationPolicy::OnePlusOnePlusOne, _) => trailing(1),
        (FactorizationPolicy::Mono3d, _) => unreachable!(),
    };
    let boundaries: Vec<usize> = (sub_len..l).step_by(sub_len).collect();
    Ok(FactorizationPlan { sub_len, count: l / sub_len, boundaries })
}

/// One layer slot: which variant and which (primary) ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub kind: LayerKind,
    pub ordering: ScanOrdering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrangementGroup {
    pub parallel: bool,
    pub members: Vec<LayerSlot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrangementSpec {
    pub groups: Vec<ArrangementGroup>,
    #[serde(default)]
    pub factorization: FactorizationPolicy,
}

impl ArrangementSpec {
    pub fn n_layers(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.groups.iter().enumerate() {
            if !g.parallel && g.members.len() != 1 {
                return Err(Error::Arrangement(format!(
                    "chain group {i} must have exactly 1 member, has {}",
                    g.members.len()
                )));
            }
            if g.parallel && g.members.len() < 2 {
                return Err(Error::Arrangement(format!(
                    "parallel group {i} needs >= 2 members, has {}",
                    g.members.len()
                )));
            }
        }
        Ok(())
    }

    /// Flat per-layer slot list in execution order.
    pub fn slots(&self) -> Vec<&LayerSlot> {
        self.groups.iter().flat_map(|g| g.members.iter()).collect()
    }

    pub fn dag(&self) -> ArrangementDag {
        let mut edges = Vec::new();
        let mut start = 0usize;
        let mut prev: Vec<usize> = Vec::new();
        for g in &self.groups {
            let current: Vec<usize> = (start..start + g.members.len()).collect();
            for &p in &prev {
                for &c in &current {
                    edges.push((p, c));
                }
            }
            start += g.members.len();
            prev = current;
        }
        ArrangementDag { n_nodes: start, edges }
    }

    /// Longest layer path through the arrangement; equals the layer count
    /// iff the arrangement is a pure chain.
    pub fn effective_depth(&self) -> usize {
        self.dag().longest_path()
    }
}

/// Dataflow DAG over layers; edges point in computation order.
#[derive(Clone, Debug)]
pub struct ArrangementDag {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl ArrangementDag {
    /// Longest path measured in nodes. Nodes are already topologically
    /// ordered by construction.
    pub fn longest_path(&self) -> usize {
        if self.n_nodes == 0 {
            return 0;
        }
        let mut depth = vec![1usize; self.n_nodes];
        for &(src, dst) in &self.edges {
            depth[dst] = depth[dst].max(depth[src] + 1);
        }
        depth.into_iter().max().unwrap_or(0)
    }
}

fn chain(kind: LayerKind, ordering: ScanOrdering) -> ArrangementGroup {
    ArrangementGroup { parallel: false, members: vec![LayerSlot { kind, ordering }] }
}

fn parallel(kind: LayerKind, orderings: Vec<ScanOrdering>) -> ArrangementGroup {
    ArrangementGroup {
        parallel: true,
        members: orderings.into_iter().map(|o| LayerSlot { kind, ordering: o }).collect(),
    }
}

/// Axis cycle H, W, then T: [H, W] in 2-D, [H, W, T] in 3-D.
fn cycle_axes(rank: usize) -> Vec<usize> {
    match rank {
        3 => vec![1, 2, 0],
        _ => (0..rank).collect(),
    }
}

/// One cycle of groups for a named preset.
fn preset_cycle(name: &str, kind: LayerKind, rank: usize) -> Result<Vec<ArrangementGroup>> {
    let axes: Vec<usize> = cycle_axes(rank);
    let axis_pair = |a: usize| -> Result<(ScanOrdering, ScanOrdering)> {
        Ok((
            ScanOrdering::along_axis(a, rank, false)?,
            ScanOrdering::along_axis(a, rank, true)?,
        ))
    };
    match name {
        // H+H-W+W-(T+T-) as a chain; Bi layers carry one slot per axis and
        // handle the minus direction internally; Nd/MultiHead repeat a
        // single slot since their orderings are fixed inside the layer.
        "alternating" => match kind {
            LayerKind::OneD => {
                let mut cycle = Vec::new();
                for &a in &axes {
                    let (fwd, rev) = axis_pair(a)?;
                    cycle.push(chain(kind, fwd));
                    cycle.push(chain(kind, rev));
                }
                Ok(cycle)
            }
            LayerKind::Bi => axes
                .iter()
                .map(|&a| Ok(chain(kind, ScanOrdering::along_axis(a, rank, false)?)))
                .collect(),
            LayerKind::Nd | LayerKind::MultiHead => {
                Ok(vec![chain(kind, ScanOrdering::memory_order(rank))])
            }
        },
        // Naive memory-order stack.
        "uni" => Ok(vec![chain(kind, ScanOrdering::memory_order(rank))]),
        // [H+H-][W+W-]([T+T-])
        "bi-blocks" => {
            let mut cycle = Vec::new();
            for &a in &axes {
                let (fwd, rev) = axis_pair(a)?;
                cycle.push(parallel(kind, vec![fwd, rev]));
            }
            Ok(cycle)
        }
        // [H+H-W+W-][T+T-]
        "quad" => {
            if rank != 3 {
                return Err(Error::Arrangement("quad preset is for 3-D data".into()));
            }
            let (h_f, h_r) = axis_pair(1)?;
            let (w_f, w_r) = axis_pair(2)?;
            let (t_f, t_r) = axis_pair(0)?;
            Ok(vec![
                parallel(kind, vec![h_f, h_r, w_f, w_r]),
                parallel(kind, vec![t_f, t_r]),
            ])
        }
        // [H+H-W+W-T+T-]: every direction in one wide group.
        "hex" => {
            if rank != 3 {
                return Err(Error::Arrangement("hex preset is for 3-D data".into()));
            }
            let mut all = Vec::new();
            for &a in &[1usize, 2, 0] {
                let (f, r) = axis_pair(a)?;
                all.push(f);
                all.push(r);
            }
            Ok(vec![parallel(kind, all)])
        }
        grammar => parse_grammar(grammar, kind, rank),
    }
}

/// Grammar: whitespace-optional ordering tokens, with `[...]` marking a
/// parallel group, e.g. `H+H-W+W-T+T-` or `[H+ H-][W+ W-][T+ T-]`.
/// Sign-less axis letters are accepted for Bi layers (`HW` means an H layer
/// then a W layer).
fn parse_grammar(text: &str, kind: LayerKind, rank: usize) -> Result<Vec<ArrangementGroup>> {
    let mut groups = Vec::new();
    let mut chars = text.chars().peekable();
    let mut in_bracket = false;
    let mut bracket_members: Vec<LayerSlot> = Vec::new();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' => {
                chars.next();
            }
            '[' => {
                if in_bracket {
                    return Err(Error::Arrangement("nested '[' in arrangement".into()));
                }
                in_bracket = true;
                bracket_members = Vec::new();
                chars.next();
            }
            ']' => {
                if !in_bracket {
                    return Err(Error::Arrangement("unmatched ']' in arrangement".into()));
                }
                if bracket_members.len() < 2 {
                    return Err(Error::Arrangement(
                        "parallel group needs >= 2 members".into(),
                    ));
                }
                groups.push(ArrangementGroup {
                    parallel: true,
                    members: std::mem::take(&mut bracket_members),
                });
                in_bracket = false;
                chars.next();
            }
            _ => {
                let token = lex_token(&mut chars, kind)?;
                let ordering = ScanOrdering::parse(&token, rank)?;
                let slot = LayerSlot { kind, ordering };
                if in_bracket {
                    bracket_members.push(slot);
                } else {
                    groups.push(ArrangementGroup { parallel: false, members: vec![slot] });
                }
            }
        }
    }
    if in_bracket {
        return Err(Error::Arrangement("unterminated '[' in arrangement".into()));
    }
    if groups.is_empty() {
        return Err(Error::Arrangement(format!("no layers in arrangement '{text}'")));
    }
    Ok(groups)
}

/// One ordering token: `X+`, `X-`, `(AXES)+`, or a bare axis letter for Bi.
fn lex_token(
    chars: &mut std::iter::Peekable<std::str::Chars>,
    kind: LayerKind,
) -> Result<String> {
    let mut token = String::new();
    let first = chars.next().ok_or_else(|| Error::Arrangement("empty token".into()))?;
    token.push(first);
    if first == '(' {
        for c in chars.by_ref() {
            token.push(c);
            if c == ')' {
                break;
            }
        }
    }
    match chars.peek() {
        Some(&s @ ('+' | '-')) => {
            token.push(s);
            chars.next();
        }
        _ if kind == LayerKind::Bi && first != '(' => {
            // Bi layers take sign-less axis letters; direction is internal.
            token.push('+');
        }
        _ => {
            return Err(Error::Arrangement(format!(
                "token '{token}' missing +/- direction"
            )))
        }
    }
    Ok(token)
}

/// Resolve a preset name or grammar string into a fully expanded spec with
/// exactly `n_layers` layers, repeating the cycle and truncating the final
/// repetition at group granularity.
pub fn build(
    arrangement: &str,
    kind: LayerKind,
    rank: usize,
    n_layers: usize,
    factorization: FactorizationPolicy,
) -> Result<ArrangementSpec> {
    let cycle = preset_cycle(arrangement, kind, rank)?;
    let mut groups = Vec::new();
    let mut remaining = n_layers;
    'fill: while remaining > 0 {
        for g in &cycle {
            if remaining == 0 {
                break 'fill;
            }
            if g.members.len() > remaining {
                return Err(Error::Arrangement(format!(
                    "cannot reach {n_layers} layers: group of {} does not fit in remaining {remaining}",
                    g.members.len()
                )));
            }
            remaining -= g.members.len();
            groups.push(g.clone());
        }
    }
    let spec = ArrangementSpec { groups, factorization };
    spec.validate()?;
    debug_assert_eq!(spec.n_layers(), n_layers);
    Ok(spec)
}

/// The materialized stack of layers for a spec.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub spec: ArrangementSpec,
    pub groups: Vec<Vec<MambaLayer>>,
}

impl BlockStack {
    pub fn init(
        spec: ArrangementSpec,
        dims: LayerDims,
        rank: usize,
        euler_b: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut groups = Vec::with_capacity(spec.groups.len());
        for g in &spec.groups {
            let mut layers = Vec::with_capacity(g.members.len());
            for slot in &g.members {
                let orderings = match slot.kind {
                    LayerKind::OneD | LayerKind::Bi => vec![slot.ordering.clone()],
                    LayerKind::Nd | LayerKind::MultiHead => {
                        crate::layer::directional_orderings(rank)
                    }
                };
                layers.push(MambaLayer::init(slot.kind, orderings, dims, euler_b, rng)?);
            }
            groups.push(layers);
        }
        Ok(BlockStack { spec, groups })
    }

    pub fn n_layers(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &MambaLayer> {
        self.groups.iter().flatten()
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut MambaLayer> {
        self.groups.iter_mut().flatten()
    }

    pub fn for_each_param<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a NdArray)) {
        for (i, layer) in self.layers().enumerate() {
            layer.for_each_param(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &mut NdArray),
    ) {
        for (i, layer) in self.groups.iter_mut().flatten().enumerate() {
            layer.for_each_param_mut(&format!("{prefix}.{i}"), f);
        }
    }

    /// Forward through all groups. `x` is the (L, D) memory-order token
    /// sequence over `grid_dims`; `branch_scales` gives the per-layer
    /// drop-path factor (empty = all 1.0). Parallel groups run each member
    /// on the same input, sum the outputs, and keep a single residual:
    /// out = Σ member(x) − (k−1)·x.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut crate::layer::Bindings,
        prefix: &str,
        x: VarId,
        grid_dims: &[usize],
        branch_scales: &[f64],
    ) -> Result<VarId> {
        let policy = self.spec.factorization;
        let mut cur = x;
        let mut li = 0usize;
        for group in &self.groups {
            let scale_of = |i: usize| branch_scales.get(i).copied().unwrap_or(1.0);
            if group.len() == 1 {
                let bfn = |o: &ScanOrdering| {
                    factorization_plan(policy, o, grid_dims).map(|p| p.boundaries)
                };
                cur = group[0].forward(
                    tape,
                    binds,
                    &format!("{prefix}.{li}"),
                    cur,
                    grid_dims,
                    scale_of(li),
                    &bfn,
                )?;
                li += 1;
            } else {
                let mut acc: Option<VarId> = None;
                for layer in group {
                    let bfn = |o: &ScanOrdering| {
                        factorization_plan(policy, o, grid_dims).map(|p| p.boundaries)
                    };
                    let y = layer.forward(
                        tape,
                        binds,
                        &format!("{prefix}.{li}"),
                        cur,
                        grid_dims,
                        scale_of(li),
                        &bfn,
                    )?;
                    li += 1;
                    acc = Some(match acc {
                        None => y,
                        Some(prev) => tape.add(prev, y)?,
                    });
                }
                let summed = acc.expect("parallel group nonempty");
                let extra = tape.scale(cur, -((group.len() - 1) as f64));
                cur = tape.add(summed, extra)?;
            }
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Bindings;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(spec: &ArrangementSpec) -> Vec<String> {
        spec.slots().iter().map(|s| s.ordering.name()).collect()
    }

    #[test]
    fn alternating_3d_twelve_layers() {
        let spec = build("alternating", LayerKind::OneD, 3, 12, FactorizationPolicy::Mono3d)
            .unwrap();
        let want = ["H+", "H-", "W+", "W-", "T+", "T-"];
        let got = names(&spec);
        assert_eq!(got.len(), 12);
        for (i, n) in got.iter().enumerate() {
            assert_eq!(n, want[i % 6]);
        }
        assert!(spec.groups.iter().all(|g| !g.parallel));
    }

    #[test]
    fn alternating_2d_24_layers() {
        let spec = build("alternating", LayerKind::OneD, 2, 24, FactorizationPolicy::Mono3d)
            .unwrap();
        let want = ["H+", "H-", "W+", "W-"];
        let got = names(&spec);
        assert_eq!(got.len(), 24);
        for (i, n) in got.iter().enumerate() {
            assert_eq!(n, want[i % 4]);
        }
    }

    #[test]
    fn truncated_cycle_32_layers() {
        // 32 = 5 full H+H-W+W-T+T- cycles + H+H-.
        let spec = build("alternating", LayerKind::OneD, 3, 32, FactorizationPolicy::Mono3d)
            .unwrap();
        let got = names(&spec);
        assert_eq!(got.len(), 32);
        assert_eq!(&got[30..], &["H+", "H-"]);
    }

    #[test]
    fn bracket_grammar_parallel_groups() {
        let spec = build(
            "[H+ H-][W+ W-][T+ T-]",
            LayerKind::OneD,
            3,
            12,
            FactorizationPolicy::Mono3d,
        )
        .unwrap();
        assert_eq!(spec.groups.len(), 6);
        assert!(spec.groups.iter().all(|g| g.parallel && g.members.len() == 2));
        assert_eq!(spec.n_layers(), 12);
    }

    #[test]
    fn grammar_without_spaces() {
        let spec =
            build("H+H-W+W-T+T-", LayerKind::OneD, 3, 6, FactorizationPolicy::Mono3d).unwrap();
        assert_eq!(names(&spec), ["H+", "H-", "W+", "W-", "T+", "T-"]);
    }

    #[test]
    fn grammar_errors() {
        assert!(build("H+ [W+] H-", LayerKind::OneD, 2, 3, FactorizationPolicy::Mono3d).is_err());
        assert!(build("H", LayerKind::OneD, 2, 1, FactorizationPolicy::Mono3d).is_err());
        assert!(build("Q+", LayerKind::OneD, 2, 1, FactorizationPolicy::Mono3d).is_err());
        // 12-layer hex cannot make 13 layers.
        assert!(build("hex", LayerKind::OneD, 3, 13, FactorizationPolicy::Mono3d).is_err());
    }

    #[test]
    fn bi_signless_grammar_roundtrips() {
        // The alternating Bi variant: H layers odd, W layers even.
        let spec = build("HW", LayerKind::Bi, 2, 8, FactorizationPolicy::Mono3d).unwrap();
        assert_eq!(spec.n_layers(), 8);
        let got = names(&spec);
        for (i, n) in got.iter().enumerate() {
            assert_eq!(n, if i % 2 == 0 { "H+" } else { "W+" });
        }
        assert!(spec.slots().iter().all(|s| s.kind == LayerKind::Bi));
        let json = serde_json::to_string(&spec).unwrap();
        let back: ArrangementSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn effective_depths() {
        let chain = build("alternating", LayerKind::OneD, 3, 12, FactorizationPolicy::Mono3d)
            .unwrap();
        assert_eq!(chain.effective_depth(), 12);
        let pairs = build("bi-blocks", LayerKind::OneD, 3, 12, FactorizationPolicy::Mono3d)
            .unwrap();
        assert_eq!(pairs.effective_depth(), 6);
        let hex = build("hex", LayerKind::OneD, 3, 12, FactorizationPolicy::Mono3d).unwrap();
        assert_eq!(hex.effective_depth(), 2);
        let quad = build("quad", LayerKind::OneD, 3, 12, FactorizationPolicy::Mono3d).unwrap();
        assert_eq!(quad.effective_depth(), 4);
    }

    #[test]
    fn depth_bounded_by_layers() {
        for preset in ["alternating", "bi-blocks", "quad", "hex"] {
            let spec = build(preset, LayerKind::OneD, 3, 12, FactorizationPolicy::Mono3d)
                .unwrap();
            assert!(spec.effective_depth() <= spec.n_layers());
        }
    }

    #[test]
    fn factorization_plans_4x4x4() {
        let grid = [4usize, 4, 4];
        let h_plus = ScanOrdering::parse("H+", 3).unwrap();
        let t_plus = ScanOrdering::parse("T+", 3).unwrap();

        // Spatial step of 2D+1D: T sequences of length HW.
        let p = factorization_plan(FactorizationPolicy::TwoPlusOne, &h_plus, &grid).unwrap();
        assert_eq!((p.count, p.sub_len), (4, 16));
        assert_eq!(p.boundaries, vec![16, 32, 48]);
        // Temporal step of 2D+1D: HW sequences of length T.
        let p = factorization_plan(FactorizationPolicy::TwoPlusOne, &t_plus, &grid).unwrap();
        assert_eq!((p.count, p.sub_len), (16, 4));
        // 2D+3D: temporal layers keep the monolithic scan.
        let p = factorization_plan(FactorizationPolicy::TwoPlusThree, &t_plus, &grid).unwrap();
        assert_eq!((p.count, p.sub_len), (1, 64));
        // Mono3D: one sequence of 64.
        let p = factorization_plan(FactorizationPolicy::Mono3d, &h_plus, &grid).unwrap();
        assert_eq!((p.count, p.sub_len), (1, 64));
        // 1D factorization: every layer scans rows.
        let p =
            factorization_plan(FactorizationPolicy::OnePlusOnePlusOne, &h_plus, &grid).unwrap();
        assert_eq!((p.count, p.sub_len), (16, 4));
    }

    #[test]
    fn sequence_count_orders_match_table() {
        assert_eq!(FactorizationPolicy::Mono3d.sequence_count_order(), "O(B)");
        assert_eq!(FactorizationPolicy::TwoPlusThree.sequence_count_order(), "O(BD)");
        assert_eq!(FactorizationPolicy::TwoPlusOne.sequence_count_order(), "O(BD^2)");
        assert_eq!(
            FactorizationPolicy::OnePlusOnePlusOne.sequence_count_order(),
            "O(BD^2)"
        );
    }

    #[test]
    fn identity_layers_identity_for_every_preset() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dims = LayerDims { d_model: 3, expand: 2, state_dim: 4, conv_width: 4 };
        let grid = [2usize, 2, 2];
        let x = NdArray::from_fn(&[8, 3], |i| (i as f64).sin());
        for preset in ["alternating", "uni", "bi-blocks", "quad", "hex"] {
            let spec =
                build(preset, LayerKind::OneD, 3, 6, FactorizationPolicy::Mono3d).unwrap();
            let mut stack = BlockStack::init(spec, dims, 3, false, &mut rng).unwrap();
            for layer in stack.layers_mut() {
                layer.zero_out_proj();
            }
            let mut tape = Tape::new();
            let mut binds = Bindings::default();
            let v = tape.leaf(x.clone());
            let out = stack.forward(&mut tape, &mut binds, "layers", v, &grid, &[]).unwrap();
            let y = tape.value(out);
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12, "{preset}: identity broken");
            }
        }
    }

    #[test]
    fn hex_group_decomposes_into_branches() {
        // Hex output = Σ six single-ordering layer outputs − 5·input.
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let dims = LayerDims { d_model: 3, expand: 2, state_dim: 4, conv_width: 4 };
        let grid = [2usize, 2, 2];
        let x = NdArray::from_fn(&[8, 3], |i| ((i * 7 % 5) as f64) * 0.25 - 0.5);
        let spec = build("hex", LayerKind::OneD, 3, 6, FactorizationPolicy::Mono3d).unwrap();
        let stack = BlockStack::init(spec, dims, 3, false, &mut rng).unwrap();

        let mut tape = Tape::new();
        let mut binds = Bindings::default();
        let v = tape.leaf(x.clone());
        let out = stack.forward(&mut tape, &mut binds, "layers", v, &grid, &[]).unwrap();
        let combined = tape.value(out).clone();

        let mut expect = x.scale(-5.0);
        for layer in stack.layers() {
            let mut t2 = Tape::new();
            let mut b2 = Bindings::default();
            let v2 = t2.leaf(x.clone());
            let y2 = layer
                .forward(&mut t2, &mut b2, "l", v2, &grid, 1.0, crate::layer::NO_BOUNDARIES)
                .unwrap();
            expect.add_assign(t2.value(y2)).unwrap();
        }
        for (a, b) in combined.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10, "hex decomposition: {a} vs {b}");
        }
    }

    #[test]
    fn factorization_policy_serde_names() {
        let json = serde_json::to_string(&FactorizationPolicy::TwoPlusOne).unwrap();
        assert_eq!(json, "\"2d+1d\"");
        let back: FactorizationPolicy = serde_json::from_str("\"1d+1d+1d\"").unwrap();
        assert_eq!(back, FactorizationPolicy::OnePlusOnePlusOne);
    }
}
