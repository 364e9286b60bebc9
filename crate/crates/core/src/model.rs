//! End-to-end model: patchify → patch + positional embeddings → block stack
//! → task head, with JSON config, deterministic seeded init, and parameter
//! visitors for the optimizer and checkpointing.

use crate::block::{self, ArrangementSpec, BlockStack, FactorizationPolicy};
use crate::error::{Error, Result};
use crate::layer::{Bindings, LayerDims, LayerKind};
use crate::tape::{Tape, VarId};
use crate::tensor::NdArray;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadConfig {
    Classification { n_classes: usize },
    Regression { channels: usize },
}

impl HeadConfig {
    pub fn out_dim(&self) -> usize {
        match self {
            HeadConfig::Classification { n_classes } => *n_classes,
            HeadConfig::Regression { channels } => *channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    MeanPool,
    /// Read a single token at this flattened memory-order (L+) index.
    FixedPosition(usize),
}

/// Arrangement as a preset/grammar string or a fully explicit spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Arrangement {
    Preset(String),
    Explicit(ArrangementSpec),
}

fn default_state_dim() -> usize {
    16
}
fn default_conv_width() -> usize {
    4
}
fn default_expand() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Grid rank: 2 for images, 3 for video-like data.
    pub rank: usize,
    /// Spatial extents plus trailing channel count, e.g. [224, 224, 3].
    pub input_shape: Vec<usize>,
    /// Patch size per spatial axis.
    pub patch_size: Vec<usize>,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub arrangement: Arrangement,
    pub layer_variant: LayerKind,
    #[serde(default)]
    pub factorization: FactorizationPolicy,
    pub head: HeadConfig,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    /// Use the Euler simplification B̄ = ΔB instead of exact ZOH.
    #[serde(default)]
    pub euler_b: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub drop_path: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 || self.rank > 3 {
            return Err(Error::config("rank", format!("must be 1..=3, got {}", self.rank)));
        }
        if self.input_shape.len() != self.rank + 1 {
            return Err(Error::config(
                "input_shape",
                format!("needs {} extents + channels, got {:?}", self.rank, self.input_shape),
            ));
        }
        if self.patch_size.len() != self.rank {
            return Err(Error::config(
                "patch_size",
                format!("needs {} entries, got {:?}", self.rank, self.patch_size),
            ));
        }
        for (i, (&extent, &patch)) in
            self.input_shape.iter().zip(&self.patch_size).enumerate()
        {
            if patch == 0 || extent % patch != 0 {
                return Err(Error::Patch { extent, patch })
                    .map_err(|e| Error::config(format!("patch_size[{i}]"), e.to_string()));
            }
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be positive"));
        }
        if self.head.out_dim() == 0 {
            return Err(Error::config("head", "output dimension must be positive"));
        }
        if let Readout::FixedPosition(idx) = self.readout {
            let l = self.n_tokens();
            if idx >= l {
                return Err(Error::config(
                    "readout",
                    format!("fixed position {idx} out of range for {l} tokens"),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("dropout/drop_path", "rates must be in [0, 1)"));
        }
        self.arrangement_spec()?.validate()
    }

    /// Token grid extents after patchify.
    pub fn token_grid(&self) -> Vec<usize> {
        self.input_shape
            .iter()
            .zip(&self.patch_size)
            .map(|(&e, &p)| e / p)
            .collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn channels(&self) -> usize {
        *self.input_shape.last().unwrap()
    }

    /// Raw token width: patch volume times channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size.iter().product::<usize>() * self.channels()
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.hidden_dim,
            expand: self.expand,
            state_dim: self.state_dim,
            conv_width: self.conv_width,
        }
    }

    pub fn arrangement_spec(&self) -> Result<ArrangementSpec> {
        match &self.arrangement {
            Arrangement::Preset(name) => block::build(
                name,
                self.layer_variant,
                self.rank,
                self.n_layers,
                self.factorization,
            ),
            Arrangement::Explicit(spec) => {
                if spec.n_layers() != self.n_layers {
                    return Err(Error::config(
                        "n_layers",
                        format!(
                            "explicit arrangement has {} layers, config says {}",
                            spec.n_layers(),
                            self.n_layers
                        ),
                    ));
                }
                let mut spec = spec.clone();
                spec.factorization = self.factorization;
                Ok(spec)
            }
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// (patch_dim, D) and (D,)
    pub patch_w: NdArray,
    pub patch_b: NdArray,
    /// Grid-shaped learned absolute positions: (g1, .., gN, D).
    pub pos_embed: NdArray,
    pub blocks: BlockStack,
    pub head_gamma: NdArray,
    /// (D, out) and (out,); zero-initialized, so an untrained model with a
    /// zero head emits all-zero logits.
    pub head_w: NdArray,
    pub head_b: NdArray,
}

/// Everything a caller may want to differentiate through: the raw input,
/// the block-stack output tokens, and the head output.
pub struct Traced {
    pub input: VarId,
    pub tokens: VarId,
    pub output: VarId,
}

/// Per-sample stochastic regularization state. `Eval` is deterministic;
/// `Train` draws dropout/drop-path masks from its own seeded stream.
pub enum ForwardMode {
    Eval,
    Train { rng: ChaCha8Rng },
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let k = config.patch_dim();
        let k_patch = 1.0 / (k as f64).sqrt();
        let spec = config.arrangement_spec()?;
        let mut pos_shape = config.token_grid();
        pos_shape.push(d);
        let model = Model {
            patch_w: NdArray::from_fn(&[k, d], |_| rng.gen_range(-k_patch..k_patch)),
            patch_b: NdArray::zeros(&[d]),
            pos_embed: NdArray::from_fn(&pos_shape, |_| rng.gen_range(-0.02..0.02)),
            blocks: BlockStack::init(spec, config.layer_dims(), config.rank, config.euler_b, rng)?,
            head_gamma: NdArray::full(&[d], 1.0),
            head_w: NdArray::zeros(&[d, config.head.out_dim()]),
            head_b: NdArray::zeros(&[config.head.out_dim()]),
            config,
        };
        Ok(model)
    }

    pub fn for_each_param<'a>(&'a self, f: &mut impl FnMut(String, &'a NdArray)) {
        f("patch_embed.w".into(), &self.patch_w);
        f("patch_embed.b".into(), &self.patch_b);
        f("pos_embed".into(), &self.pos_embed);
        self.blocks.for_each_param("layers", f);
        f("head.norm.gamma".into(), &self.head_gamma);
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(String, &mut NdArray)) {
        f("patch_embed.w".into(), &mut self.patch_w);
        f("patch_embed.b".into(), &mut self.patch_b);
        f("pos_embed".into(), &mut self.pos_embed);
        self.blocks.for_each_param_mut("layers", f);
        f("head.norm.gamma".into(), &mut self.head_gamma);
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, arr| n += arr.len());
        n
    }

    /// Named parameter list in visitor order.
    pub fn named_params(&self) -> Vec<(String, &NdArray)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, arr| out.push((name, arr)));
        out
    }

    /// Differentiable patchify: reshape-permute-reshape, structure kept.
    /// (D1..DN, C) -> (L, patch_dim) with the token grid in memory order.
    fn patchify(&self, tape: &mut Tape, input: VarId) -> Result<VarId> {
        let cfg = &self.config;
        let rank = cfg.rank;
        let grid = cfg.token_grid();
        // Split every spatial axis i into (grid_i, patch_i) in place.
        let mut interleaved = Vec::with_capacity(2 * rank + 1);
        for i in 0..rank {
            interleaved.push(grid[i]);
            interleaved.push(cfg.patch_size[i]);
        }
        interleaved.push(cfg.channels());
        let split = tape.reshape(input, &interleaved)?;
        // (g1, p1, g2, p2, .., C) -> (g1, g2, .., p1, p2, .., C)
        let mut perm: Vec<usize> = (0..rank).map(|i| 2 * i).collect();
        perm.extend((0..rank).map(|i| 2 * i + 1));
        perm.push(2 * rank);
        let grouped = tape.permute(split, &perm)?;
        tape.reshape(grouped, &[cfg.n_tokens(), cfg.patch_dim()])
    }

    /// Forward pass, returning handles for input, token grid, and head
    /// output. Deterministic given weights and the mode's RNG state.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        input: &NdArray,
        mode: &mut ForwardMode,
    ) -> Result<Traced> {
        let cfg = &self.config;
        if input.shape() != cfg.input_shape {
            return Err(Error::shape(format!(
                "input {:?} vs configured {:?}",
                input.shape(),
                cfg.input_shape
            )));
        }
        let input_id = tape.leaf(input.clone());
        let patches = self.patchify(tape, input_id)?;
        let pw = binds.bind(tape, "patch_embed.w".into(), &self.patch_w);
        let pb = binds.bind(tape, "patch_embed.b".into(), &self.patch_b);
        let pe = binds.bind(tape, "pos_embed".into(), &self.pos_embed);
        let l = cfg.n_tokens();
        let d = cfg.hidden_dim;
        let projected = tape.matmul(patches, pw)?;
        let embedded = tape.add_bias(projected, pb)?;
        let pos_flat = tape.reshape(pe, &[l, d])?;
        let mut tokens = tape.add(embedded, pos_flat)?;

        // Dropout on the embedded tokens; per-layer drop-path on branches.
        let mut branch_scales: Vec<f64> = Vec::new();
        if let ForwardMode::Train { rng } = mode {
            if cfg.dropout > 0.0 {
                let keep = 1.0 - cfg.dropout;
                let mask = NdArray::from_fn(&[l, d], |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = tape.leaf(mask);
                tokens = tape.mul(tokens, m)?;
            }
            if cfg.drop_path > 0.0 {
                let keep = 1.0 - cfg.drop_path;
                branch_scales = (0..cfg.n_layers)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
            }
        }

        let grid = cfg.token_grid();
        let tokens =
            self.blocks
                .forward(tape, binds, "layers", tokens, &grid, &branch_scales)?;

        let hg = binds.bind(tape, "head.norm.gamma".into(), &self.head_gamma);
        let hw = binds.bind(tape, "head.w".into(), &self.head_w);
        let hb = binds.bind(tape, "head.b".into(), &self.head_b);
        let normed = tape.rms_norm(tokens, hg, 1e-6)?;
        let feat = match cfg.readout {
            Readout::MeanPool => {
                let pooled = tape.mean_rows(normed)?;
                tape.reshape(pooled, &[1, d])?
            }
            Readout::FixedPosition(idx) => tape.slice_axis(normed, 0, idx, 1)?,
        };
        let logits_row = tape.matmul(feat, hw)?;
        let logits_row = tape.add_bias(logits_row, hb)?;
        let output = tape.reshape(logits_row, &[cfg.head.out_dim()])?;
        Ok(Traced { input: input_id, tokens, output })
    }

    /// Plain inference: head output values.
    pub fn forward(&self, input: &NdArray) -> Result<NdArray> {
        let mut tape = Tape::new();
        let mut binds = Bindings::default();
        let traced = self.forward_traced(&mut tape, &mut binds, input, &mut ForwardMode::Eval)?;
        Ok(tape.value(traced.output).clone())
    }
}

/// Ready-made desk-scale and paper-scale configs.
pub fn named_config(name: &str) -> Result<ModelConfig> {
    let (rank, input_shape, patch, d, layers, classes): (
        usize,
        Vec<usize>,
        Vec<usize>,
        usize,
        usize,
        usize,
    ) = match name {
        // Toy configs exercised by tests.
        "2d-tiny" => (2, vec![8, 8, 1], vec![1, 1], 64, 8, 2),
        "3d-tiny" => (3, vec![4, 4, 4, 1], vec![1, 1, 1], 64, 12, 2),
        // Paper-scale shapes (not exercised in CI).
        "mamba2d-s" => (2, vec![224, 224, 3], vec![8, 8], 384, 24, 1000),
        "mamba2d-b" => (2, vec![224, 224, 3], vec![8, 8], 768, 24, 1000),
        "mamba3d-s" => (3, vec![32, 224, 224, 3], vec![2, 16, 16], 384, 32, 400),
        other => return Err(Error::config("model", format!("unknown named config '{other}'"))),
    };
    Ok(ModelConfig {
        rank,
        input_shape,
        patch_size: patch,
        hidden_dim: d,
        n_layers: layers,
        arrangement: Arrangement::Preset("alternating".into()),
        layer_variant: LayerKind::OneD,
        factorization: FactorizationPolicy::Mono3d,
        head: HeadConfig::Classification { n_classes: classes },
        readout: Readout::MeanPool,
        state_dim: 16,
        conv_width: 4,
        expand: 2,
        euler_b: false,
        dropout: 0.0,
        drop_path: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        let mut cfg = named_config("2d-tiny").unwrap();
        cfg.hidden_dim = 8;
        cfg.n_layers = 4;
        cfg.state_dim = 4;
        cfg
    }

    #[test]
    fn patchify_shapes() {
        let mut cfg = named_config("mamba2d-s").unwrap();
        assert_eq!(cfg.token_grid(), vec![28, 28]);
        cfg.patch_size = vec![16, 16];
        assert_eq!(cfg.token_grid(), vec![14, 14]);
        cfg.patch_size = vec![8, 8];
        assert_eq!(cfg.token_grid(), vec![28, 28]);

        let mut v = named_config("mamba3d-s").unwrap();
        assert_eq!(v.token_grid(), vec![16, 14, 14]);
        v.patch_size = vec![2, 16, 16];
        assert_eq!(v.token_grid()[0], 16);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let mut cfg = tiny_config();
        cfg.patch_size = vec![3, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patchify_groups_pixels_correctly() {
        // 4x4 single-channel input with patch 2: token (i,j) must hold the
        // 2x2 block at (2i, 2j), row-major within the patch.
        let mut cfg = tiny_config();
        cfg.input_shape = vec![4, 4, 1];
        cfg.patch_size = vec![2, 2];
        cfg.n_layers = 0;
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(cfg, &mut rng).unwrap();
        let input = NdArray::from_fn(&[4, 4, 1], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.leaf(input);
        let patches = model.patchify(&mut tape, v).unwrap();
        let p = tape.value(patches);
        assert_eq!(p.shape(), &[4, 4]);
        // token (0,0): pixels (0,0),(0,1),(1,0),(1,1) = 0,1,4,5
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // token (1,1): pixels (2,2),(2,3),(3,2),(3,3) = 10,11,14,15
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_head_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::init(tiny_config(), &mut rng).unwrap();
        let input = NdArray::from_fn(&[8, 8, 1], |i| (i % 2) as f64);
        let out = model.forward(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Model::init(tiny_config(), &mut rng).unwrap();
        // Non-zero head so the logits carry signal.
        model.head_w = NdArray::from_fn(&[8, 2], |i| (i as f64 * 0.7).sin());
        let input = NdArray::from_fn(&[8, 8, 1], |i| ((i * 31 % 7) as f64) / 7.0);
        let a = model.forward(&input).unwrap();
        let b = model.forward(&input).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_matches_param_spec_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(tiny_config(), &mut rng).unwrap();
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names[0], "patch_embed.w");
        assert_eq!(names[2], "pos_embed");
        assert!(names.iter().any(|n| n == "layers.3.out_proj.w"));
        assert_eq!(names.last().unwrap(), "head.b");
        // Every name unique.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn mean_pool_invariant_to_arrangement_when_identity() {
        let input = NdArray::from_fn(&[8, 8, 1], |i| ((i * 13 % 11) as f64) / 11.0);
        let mut outs = Vec::new();
        for preset in ["alternating", "uni", "bi-blocks"] {
            let mut cfg = tiny_config();
            cfg.arrangement = Arrangement::Preset(preset.into());
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut model = Model::init(cfg, &mut rng).unwrap();
            for layer in model.blocks.layers_mut() {
                layer.zero_out_proj();
            }
            model.head_w = NdArray::from_fn(&[8, 2], |i| (i as f64 * 0.3).cos());
            outs.push(model.forward(&input).unwrap());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn bindings_align_with_visitor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::init(tiny_config(), &mut rng).unwrap();
        let input = NdArray::zeros(&[8, 8, 1]);
        let mut tape = Tape::new();
        let mut binds = Bindings::default();
        model
            .forward_traced(&mut tape, &mut binds, &input, &mut ForwardMode::Eval)
            .unwrap();
        let visitor: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        let bound: Vec<String> = binds.ids.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visitor, bound);
    }
}
