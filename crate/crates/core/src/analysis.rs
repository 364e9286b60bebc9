//! Effective receptive field maps and the closed-form FLOP/complexity
//! model comparing attention blocks with scan layers.

use crate::error::{Error, Result};
use crate::layer::Bindings;
use crate::model::{ForwardMode, Model};
use crate::tape::Tape;
use crate::tensor::NdArray;

/// Per-token sensitivity of one output position to the input, |gradient|
/// reduced over channels and patch pixels, normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct ErfMap {
    /// Token grid extents.
    pub grid: Vec<usize>,
    /// Row-major over the grid; max == 1 unless the map is all zero.
    pub values: Vec<f64>,
}

impl ErfMap {
    /// Exact values as CSV: one line per row of the trailing axis; for 3-D
    /// grids the leading axes are flattened into consecutive row blocks.
    pub fn to_csv(&self) -> String {
        let cols = *self.grid.last().unwrap_or(&1);
        let rows = self.values.len() / cols.max(1);
        let mut out = String::new();
        out.push_str(&format!(
            "# grid: {}\n",
            self.grid.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        ));
        for r in 0..rows {
            let line: Vec<String> = self.values[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// 8-bit visualization, ASCII PGM (P2). 3-D grids stack frames
    /// vertically.
    pub fn to_pgm(&self) -> String {
        let cols = *self.grid.last().unwrap_or(&1);
        let rows = self.values.len() / cols.max(1);
        let mut out = format!("P2\n{cols} {rows}\n255\n");
        for r in 0..rows {
            let line: Vec<String> = self.values[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| format!("{}", (v.clamp(0.0, 1.0) * 255.0).round() as u8))
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Flattened index of the central token.
pub fn center_token(grid: &[usize]) -> usize {
    let mut idx = 0;
    for &extent in grid {
        idx = idx * extent + extent / 2;
    }
    idx
}

/// Backpropagate a unit gradient from every channel of the probe token in
/// the block-stack output and reduce |∂/∂input| onto the token grid.
/// Deterministic; computed on the single given input.
pub fn erf(model: &Model, input: &NdArray, probe: Option<usize>) -> Result<ErfMap> {
    let grid = model.config.token_grid();
    let l: usize = grid.iter().product();
    let probe = probe.unwrap_or_else(|| center_token(&grid));
    if probe >= l {
        return Err(Error::ProbeOutOfRange { index: probe, len: l });
    }
    let d = model.config.hidden_dim;
    let mut tape = Tape::new();
    let mut binds = Bindings::default();
    let traced = model.forward_traced(&mut tape, &mut binds, input, &mut ForwardMode::Eval)?;
    let mut seed = NdArray::zeros(&[l, d]);
    for ch in 0..d {
        seed.set(&[probe, ch], 1.0);
    }
    let grads = tape.backward_seeded(traced.tokens, seed)?;
    let g = grads
        .get(traced.input)
        .ok_or_else(|| Error::shape("no gradient reached the input"))?;

    // Accumulate |grad| per token: each input position belongs to exactly
    // one patch.
    let cfg = &model.config;
    let rank = cfg.rank;
    let mut values = vec![0.0; l];
    let in_shape = &cfg.input_shape;
    let mut pos = vec![0usize; rank + 1];
    for &gv in g.data() {
        let mut token = 0usize;
        for ax in 0..rank {
            token = token * grid[ax] + pos[ax] / cfg.patch_size[ax];
        }
        values[token] += gv.abs();
        for ax in (0..rank + 1).rev() {
            pos[ax] += 1;
            if pos[ax] < in_shape[ax] {
                break;
            }
            pos[ax] = 0;
        }
    }
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    Ok(ErfMap { grid, values })
}

/// Closed-form cost model, in multiply-accumulates per forward pass.
/// An attention block costs c_proj·L·D² + c_attn·L²·D; a scan layer is
/// linear in L. The coefficients are stated here and configurable.
#[derive(Clone, Debug)]
pub struct FlopModel {
    /// QKV(3) + output(1) + MLP(2·ratio) projections; 12 at ratio 4.
    pub vit_proj_coeff: f64,
    /// QKᵀ + AV.
    pub vit_attn_coeff: f64,
    pub expand: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    /// Per-(step, channel, state) cost of discretize + recurrence + output.
    pub scan_coeff: f64,
}

impl Default for FlopModel {
    fn default() -> Self {
        FlopModel {
            vit_proj_coeff: 12.0,
            vit_attn_coeff: 2.0,
            expand: 2,
            state_dim: 16,
            conv_width: 4,
            scan_coeff: 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Vit,
    Mamba,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vit" => Ok(Arch::Vit),
            "mamba" => Ok(Arch::Mamba),
            other => Err(Error::config("arch", format!("unknown arch '{other}'"))),
        }
    }
}

impl FlopModel {
    pub fn vit_block(&self, l: usize, d: usize) -> f64 {
        let (l, d) = (l as f64, d as f64);
        self.vit_proj_coeff * l * d * d + self.vit_attn_coeff * l * l * d
    }

    pub fn mamba_layer(&self, l: usize, d: usize) -> f64 {
        let e = self.expand as f64;
        let n = self.state_dim as f64;
        let ed = e * d as f64;
        let dt_rank = ((self.expand * d).div_ceil(16)) as f64;
        let per_token = 3.0 * e * (d as f64) * (d as f64)      // in- and out-projections
            + ed * (dt_rank + 2.0 * n)                          // x_proj
            + dt_rank * ed                                      // dt_proj
            + ed * self.conv_width as f64                       // depthwise conv
            + ed * n * self.scan_coeff; // selective scan
        l as f64 * per_token
    }

    pub fn model(&self, arch: Arch, l: usize, d: usize, layers: usize) -> f64 {
        let per = match arch {
            Arch::Vit => self.vit_block(l, d),
            Arch::Mamba => self.mamba_layer(l, d),
        };
        layers as f64 * per
    }
}

/// Trainable parameters of one standard attention block at width D:
/// QKV + output projection with biases, 4× MLP with biases, two norms.
pub fn vit_block_params(d: usize) -> usize {
    12 * d * d + 13 * d
}

#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub l: usize,
    pub vit: f64,
    /// Same layer count as the ViT.
    pub mamba_half: f64,
    /// Twice the layers: the parameter-matched configuration.
    pub mamba_matched: f64,
}

/// Cost curve over a sequence-length range (inclusive); geometric sweep
/// with both endpoints pinned.
pub fn complexity_curve(
    model: &FlopModel,
    l_min: usize,
    l_max: usize,
    d: usize,
    vit_layers: usize,
    points: usize,
) -> Vec<CurvePoint> {
    let points = points.max(2);
    let ratio = (l_max as f64 / l_min as f64).powf(1.0 / (points - 1) as f64);
    let mut out = Vec::with_capacity(points);
    let mut prev = 0usize;
    for i in 0..points {
        let l = if i == points - 1 {
            l_max
        } else {
            ((l_min as f64) * ratio.powi(i as i32)).round() as usize
        };
        let l = l.max(prev + 1).min(l_max);
        prev = l;
        out.push(CurvePoint {
            l,
            vit: model.model(Arch::Vit, l, d, vit_layers),
            mamba_half: model.model(Arch::Mamba, l, d, vit_layers),
            mamba_matched: model.model(Arch::Mamba, l, d, 2 * vit_layers),
        });
    }
    out
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("l,vit,mamba_half,mamba_matched\n");
    for p in curve {
        out.push_str(&format!("{},{:.6e},{:.6e},{:.6e}\n", p.l, p.vit, p.mamba_half, p.mamba_matched));
    }
    out
}
