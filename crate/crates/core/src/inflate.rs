//! 2D→3D checkpoint surgery: temporal duplication of the patch embedding,
//! positional-embedding inflation, insertion of fresh T+T− layers with a
//! configurable Δ scale, and bit-exact transfer of every spatial weight.
//!
//! Each 2-D layer sees only a flattened 1-D sequence, so its weight shapes
//! match the 3-D model's layers exactly and copy over unchanged; the 2-D
//! ordering lifts to the corresponding 3-D ordering (H stays H, W stays W)
//! with the temporal axis prepended to the nesting prefix.

use crate::block::{ArrangementGroup, ArrangementSpec, BlockStack, LayerSlot};
use crate::error::{Error, Result};
use crate::layer::{LayerKind, MambaLayer};
use crate::model::{Arrangement, Model, ModelConfig, Readout};
use crate::ordering::ScanOrdering;
use crate::tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbedPolicy {
    /// Every temporal slice holds e2d / T.
    ScaledCopy,
    /// Slice ⌊T/2⌋ holds e2d; all other slices are zero.
    CenterPlace,
}

fn default_delta_scale() -> f64 {
    1.0
}
fn default_period() -> usize {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InflationPlan {
    /// Temporal extent of the 3-D input, pre-patchify.
    pub frames: usize,
    /// Temporal patch size; the spatial patch sizes carry over.
    pub t_patch: usize,
    pub pos_policy: PosEmbedPolicy,
    /// Multiplier on the expected initial Δ of the new temporal layers.
    #[serde(default = "default_delta_scale")]
    pub delta_scale: f64,
    /// Insert one T+T− pair after every this many spatial layers.
    #[serde(default = "default_period")]
    pub t_layer_period: usize,
    #[serde(default)]
    pub seed: u64,
}

impl InflationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.t_patch == 0 || self.frames == 0 || self.frames % self.t_patch != 0 {
            return Err(Error::Inflate(format!(
                "frames {} must be a positive multiple of t_patch {}",
                self.frames, self.t_patch
            )));
        }
        if self.delta_scale <= 0.0 {
            return Err(Error::Inflate(format!(
                "delta_scale must be positive, got {}",
                self.delta_scale
            )));
        }
        if self.t_layer_period == 0 {
            return Err(Error::Inflate("t_layer_period must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let plan: InflationPlan = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Lift a rank-2 ordering to rank-3: spatial axes shift by one and the
/// temporal axis joins the front of the nesting prefix, so (WH)± becomes
/// (TWH)± — H stays the contiguously scanned axis.
pub fn lift_ordering(o: &ScanOrdering) -> Result<ScanOrdering> {
    if o.rank() != 2 {
        return Err(Error::Inflate(format!("can only lift rank-2 orderings, got {o}")));
    }
    let mut perm = vec![0usize];
    perm.extend(o.perm.iter().map(|&a| a + 1));
    ScanOrdering::new(perm, o.reversed)
}

/// Duplicate the 2-D patch-embedding weight along `t_patch` temporal taps,
/// dividing by t_patch, so a clip of identical frames embeds exactly like
/// the single frame. (K, D) -> (t_patch·K, D).
pub fn inflate_patch_embed(w2d: &NdArray, t_patch: usize) -> Result<NdArray> {
    if w2d.rank() != 2 {
        return Err(Error::Inflate(format!(
            "patch embedding must be (K, D), got {:?}",
            w2d.shape()
        )));
    }
    let (k, d) = (w2d.shape()[0], w2d.shape()[1]);
    let scaled = w2d.scale(1.0 / t_patch as f64);
    let mut data = Vec::with_capacity(t_patch * k * d);
    for _ in 0..t_patch {
        data.extend_from_slice(scaled.data());
    }
    NdArray::new(vec![t_patch * k, d], data)
}

/// Inflate a (h, w, D) positional embedding to (t, h, w, D). Both policies
/// preserve the temporal sum exactly: Σ_t e3d[t] == e2d.
pub fn inflate_pos_embed(e2d: &NdArray, t: usize, policy: PosEmbedPolicy) -> Result<NdArray> {
    if e2d.rank() != 3 {
        return Err(Error::Inflate(format!(
            "2-D positional embedding must be (h, w, D), got {:?}",
            e2d.shape()
        )));
    }
    if t == 0 {
        return Err(Error::Inflate("temporal extent must be >= 1".into()));
    }
    let plane = e2d.len();
    let mut shape = vec![t];
    shape.extend_from_slice(e2d.shape());
    let mut data = vec![0.0; t * plane];
    match policy {
        PosEmbedPolicy::ScaledCopy => {
            let scaled = e2d.scale(1.0 / t as f64);
            for slice in 0..t {
                data[slice * plane..(slice + 1) * plane].copy_from_slice(scaled.data());
            }
        }
        PosEmbedPolicy::CenterPlace => {
            let mid = t / 2;
            data[mid * plane..(mid + 1) * plane].copy_from_slice(e2d.data());
        }
    }
    NdArray::new(shape, data)
}

/// The 3-D layer schedule: lifted spatial slots with a T+T− pair appended
/// after every `period` spatial layers (counted at group boundaries).
fn inflated_groups(
    spec2d: &ArrangementSpec,
    period: usize,
) -> Result<(Vec<ArrangementGroup>, Vec<Option<usize>>)> {
    let mut groups = Vec::new();
    // For each 3-D layer in order: Some(source 2-D layer index) or None for
    // a fresh temporal layer.
    let mut sources: Vec<Option<usize>> = Vec::new();
    let t_plus = ScanOrdering::along_axis(0, 3, false)?;
    let t_minus = ScanOrdering::along_axis(0, 3, true)?;
    let mut spatial_seen = 0usize;
    let mut src_idx = 0usize;
    for g in &spec2d.groups {
        let mut members = Vec::with_capacity(g.members.len());
        for slot in &g.members {
            members.push(LayerSlot {
                kind: slot.kind,
                ordering: lift_ordering(&slot.ordering)?,
            });
            sources.push(Some(src_idx));
            src_idx += 1;
        }
        spatial_seen += g.members.len();
        groups.push(ArrangementGroup { parallel: g.parallel, members });
        if spatial_seen >= period {
            spatial_seen -= period;
            for o in [t_plus.clone(), t_minus.clone()] {
                groups.push(ArrangementGroup {
                    parallel: false,
                    members: vec![LayerSlot { kind: LayerKind::OneD, ordering: o }],
                });
                sources.push(None);
            }
        }
    }
    Ok((groups, sources))
}

/// Derive the 3-D config implied by a 2-D config and a plan.
pub fn inflated_config(cfg2d: &ModelConfig, plan: &InflationPlan) -> Result<ModelConfig> {
    plan.validate()?;
    if cfg2d.rank != 2 {
        return Err(Error::Inflate(format!("source model must be 2-D, rank {}", cfg2d.rank)));
    }
    let spec2d = cfg2d.arrangement_spec()?;
    let (groups, _) = inflated_groups(&spec2d, plan.t_layer_period)?;
    let spec3d = ArrangementSpec { groups, factorization: cfg2d.factorization };
    let mut input_shape = vec![plan.frames];
    input_shape.extend_from_slice(&cfg2d.input_shape);
    let mut patch_size = vec![plan.t_patch];
    patch_size.extend_from_slice(&cfg2d.patch_size);
    let cfg3d = ModelConfig {
        rank: 3,
        input_shape,
        patch_size,
        hidden_dim: cfg2d.hidden_dim,
        n_layers: spec3d.n_layers(),
        arrangement: Arrangement::Explicit(spec3d),
        layer_variant: cfg2d.layer_variant,
        factorization: cfg2d.factorization,
        head: cfg2d.head.clone(),
        readout: match cfg2d.readout {
            Readout::MeanPool => Readout::MeanPool,
            Readout::FixedPosition(idx) => Readout::FixedPosition(idx),
        },
        state_dim: cfg2d.state_dim,
        conv_width: cfg2d.conv_width,
        expand: cfg2d.expand,
        euler_b: cfg2d.euler_b,
        dropout: cfg2d.dropout,
        drop_path: cfg2d.drop_path,
    };
    cfg3d.validate()?;
    Ok(cfg3d)
}

/// Inflate a 2-D model to 3-D in memory. Spatial layers copy bit-exactly;
/// new T layers initialize fresh with zero out-projections (the inflation
/// is function-preserving) and Δ bias scaled per the plan.
pub fn inflate_model(model2d: &Model, plan: &InflationPlan) -> Result<Model> {
    let cfg3d = inflated_config(&model2d.config, plan)?;
    let spec2d = model2d.config.arrangement_spec()?;
    let (_, sources) = inflated_groups(&spec2d, plan.t_layer_period)?;
    let spec3d = cfg3d.arrangement_spec()?;

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let dims = cfg3d.layer_dims();
    let layers2d: Vec<&MambaLayer> = model2d.blocks.layers().collect();

    let mut groups = Vec::with_capacity(spec3d.groups.len());
    let mut flat_idx = 0usize;
    for g in &spec3d.groups {
        let mut layers = Vec::with_capacity(g.members.len());
        for slot in &g.members {
            let layer = match sources[flat_idx] {
                Some(src) => {
                    let src_layer = layers2d.get(src).ok_or_else(|| {
                        Error::Inflate(format!("missing source layer {src}"))
                    })?;
                    let mut l = (*src_layer).clone();
                    l.orderings = match slot.kind {
                        LayerKind::OneD | LayerKind::Bi => vec![slot.ordering.clone()],
                        LayerKind::Nd | LayerKind::MultiHead => {
                            crate::layer::directional_orderings(3)
                        }
                    };
                    l
                }
                None => {
                    let mut l = MambaLayer::init_with_delta_scale(
                        slot.kind,
                        vec![slot.ordering.clone()],
                        dims,
                        cfg3d.euler_b,
                        plan.delta_scale,
                        &mut rng,
                    )?;
                    l.zero_out_proj();
                    l
                }
            };
            flat_idx += 1;
            layers.push(layer);
        }
        groups.push(layers);
    }

    let t_tokens = plan.frames / plan.t_patch;
    Ok(Model {
        patch_w: inflate_patch_embed(&model2d.patch_w, plan.t_patch)?,
        patch_b: model2d.patch_b.clone(),
        pos_embed: inflate_pos_embed(&model2d.pos_embed, t_tokens, plan.pos_policy)?,
        blocks: BlockStack { spec: spec3d, groups },
        head_gamma: model2d.head_gamma.clone(),
        head_w: model2d.head_w.clone(),
        head_b: model2d.head_b.clone(),
        config: cfg3d,
    })
}

/// Checkpoint-to-checkpoint transform: load 2-D, inflate, save 3-D.
pub fn inflate_checkpoint(in_dir: &Path, plan: &InflationPlan, out_dir: &Path) -> Result<()> {
    let model2d = Model::load_checkpoint(in_dir)?;
    let model3d = inflate_model(&model2d, plan)?;
    model3d.save_checkpoint(out_dir)
}
