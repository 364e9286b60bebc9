//! Tape-based reverse-mode differentiation over a closed op set.
//!
//! Operations execute eagerly and record themselves on the tape in
//! topological order; `backward` replays the tape in reverse, accumulating
//! vector-Jacobian products. A tape is single-threaded; parallelism runs
//! across independent tapes (one per batch element).
//!
//! The op set is closed: elementwise add/mul/neg/exp/softplus/silu, matmul,
//! depthwise causal 1-D convolution, permute/flip/reshape, slice/concat,
//! reduce sum/mean, RMS normalization, log-softmax, embedding lookup, and
//! the selective scan (which supplies its own analytic backward). Each VJP
//! is checked against central finite differences in the test suite.

use crate::error::{Error, Result};
use crate::math;
use crate::ssm::{self, ScanSaved};
use crate::tensor::{invert_permutation, NdArray};

pub type VarId = usize;

enum Op {
    Leaf,
    Add(VarId, VarId),
    /// x + b with b broadcast along the last axis.
    AddBias(VarId, VarId),
    Mul(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    Exp(VarId),
    Softplus(VarId),
    Silu(VarId),
    MatMul(VarId, VarId),
    Permute(VarId, Vec<usize>),
    FlipAxes(VarId, Vec<bool>),
    Reshape(VarId),
    SliceAxis { input: VarId, axis: usize, start: usize },
    ConcatAxis { inputs: Vec<VarId>, axis: usize },
    SumAll(VarId),
    /// (L, D) -> (D,), mean over rows.
    MeanRows(VarId),
    RmsNorm { input: VarId, gamma: VarId, eps: f64 },
    LogSoftmax(VarId),
    ConvDw1d { input: VarId, weight: VarId, bias: VarId },
    Embedding { table: VarId, ids: Vec<usize> },
    SelectiveScan {
        u: VarId,
        delta: VarId,
        b: VarId,
        c: VarId,
        a: VarId,
        d_skip: VarId,
        euler_b: bool,
        boundaries: Vec<usize>,
        saved: Box<ScanSaved>,
    },
}

struct Node {
    value: NdArray,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape node id, populated by `backward`.
pub struct Grads {
    by_id: Vec<Option<NdArray>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&NdArray> {
        self.by_id.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<NdArray> {
        self.by_id.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &NdArray {
        &self.nodes[id].value
    }

    fn push(&mut self, value: NdArray, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: NdArray) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// x + bias, bias broadcast over all leading axes of x.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = *xv.shape().last().ok_or_else(|| Error::shape("add_bias on scalar"))?;
        if bv.shape() != [d] {
            return Err(Error::shape(format!(
                "bias {:?} does not match last axis {d}",
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        for (i, slot) in out.data_mut().iter_mut().enumerate() {
            *slot += bv.data()[i % d];
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(math::softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(math::silu);
        self.push(v, Op::Silu(a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn permute(&mut self, a: VarId, perm: &[usize]) -> Result<VarId> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec())))
    }

    pub fn flip_axes(&mut self, a: VarId, mask: &[bool]) -> Result<VarId> {
        let v = self.value(a).flip_axes(mask)?;
        Ok(self.push(v, Op::FlipAxes(a, mask.to_vec())))
    }

    pub fn reverse_flat(&mut self, a: VarId) -> VarId {
        let mask = vec![true; self.value(a).rank()];
        let v = self.value(a).reverse_flat();
        self.push(v, Op::FlipAxes(a, mask))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn slice_axis(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let v = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(v, Op::SliceAxis { input: a, axis, start }))
    }

    pub fn concat_axis(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId> {
        let arrays: Vec<&NdArray> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = NdArray::concat_axis(&arrays, axis)?;
        Ok(self.push(v, Op::ConcatAxis { inputs: inputs.to_vec(), axis }))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = NdArray::scalar(self.value(a).sum_all());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let xv = self.value(a);
        if xv.rank() != 2 {
            return Err(Error::shape(format!("mean_rows expects rank 2, got {:?}", xv.shape())));
        }
        let (l, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d];
        for row in 0..l {
            for col in 0..d {
                out[col] += xv.data()[row * d + col];
            }
        }
        for slot in &mut out {
            *slot /= l as f64;
        }
        Ok(self.push(NdArray::new(vec![d], out)?, Op::MeanRows(a)))
    }

    /// RMS normalization over the last axis: y = x·γ / sqrt(mean(x²) + eps).
    pub fn rms_norm(&mut self, x: VarId, gamma: VarId, eps: f64) -> Result<VarId> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let d = *xv.shape().last().ok_or_else(|| Error::shape("rms_norm on scalar"))?;
        if gv.shape() != [d] {
            return Err(Error::shape(format!("gamma {:?} vs last axis {d}", gv.shape())));
        }
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for i in 0..d {
                out[r * d + i] = row[i] * inv * gv.data()[i];
            }
        }
        let v = NdArray::new(xv.shape().to_vec(), out)?;
        Ok(self.push(v, Op::RmsNorm { input: x, gamma, eps }))
    }

    /// Log-softmax of a rank-1 vector.
    pub fn log_softmax(&mut self, a: VarId) -> Result<VarId> {
        let xv = self.value(a);
        if xv.rank() != 1 {
            return Err(Error::shape(format!("log_softmax expects rank 1, got {:?}", xv.shape())));
        }
        let max = xv.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + xv.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let v = xv.map(|x| x - lse);
        Ok(self.push(v, Op::LogSoftmax(a)))
    }

    /// Depthwise causal 1-D convolution over (L, C) with weight (C, K) and
    /// bias (C,). Left-pads K-1 zeros so y_t sees positions ≤ t only.
    pub fn conv1d_depthwise(&mut self, x: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        if xv.rank() != 2 || wv.rank() != 2 {
            return Err(Error::shape("conv1d expects x:(L,C) w:(C,K)"));
        }
        let (l, c) = (xv.shape()[0], xv.shape()[1]);
        let k = wv.shape()[1];
        if wv.shape()[0] != c || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "conv1d channels: x{:?} w{:?} b{:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut acc = bv.data()[ch];
                // tap j reads x[t - (K-1) + j]
                let lo = (k - 1).saturating_sub(t);
                for j in lo..k {
                    let src = t + j + 1 - k;
                    acc += wv.data()[ch * k + j] * xv.data()[src * c + ch];
                }
                out[t * c + ch] = acc;
            }
        }
        let v = NdArray::new(vec![l, c], out)?;
        Ok(self.push(v, Op::ConvDw1d { input: x, weight, bias }))
    }

    /// Row lookup: out[i] = table[ids[i]], table (V, D) -> out (len, D).
    pub fn embedding(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embedding table must be (V, D)"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(format!("embedding id {id} out of range {v}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let arr = NdArray::new(vec![ids.len(), d], out)?;
        Ok(self.push(arr, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Fused selective scan; `delta` must already be positive (softplus it
    /// first). Gradients flow to all six inputs through the kernel's own
    /// analytic backward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: VarId,
        delta: VarId,
        b: VarId,
        c: VarId,
        a: VarId,
        d_skip: VarId,
        euler_b: bool,
        boundaries: &[usize],
    ) -> Result<VarId> {
        let (y, saved) = ssm::selective_scan_forward(
            self.value(u),
            self.value(delta),
            self.value(b),
            self.value(c),
            self.value(a),
            self.value(d_skip),
            euler_b,
            boundaries,
        )?;
        Ok(self.push(
            y,
            Op::SelectiveScan {
                u,
                delta,
                b,
                c,
                a,
                d_skip,
                euler_b,
                boundaries: boundaries.to_vec(),
                saved: Box::new(saved),
            },
        ))
    }

    /// Reverse pass from a scalar root (all-ones seed of shape []).
    pub fn backward(&self, root: VarId) -> Result<Grads> {
        if !self.value(root).is_scalar() {
            return Err(Error::MissingSeed);
        }
        let seed = NdArray::new(self.value(root).shape().to_vec(), vec![1.0])?;
        self.backward_seeded(root, seed)
    }

    /// Reverse pass with an explicit seed gradient at `root`.
    pub fn backward_seeded(&self, root: VarId, seed: NdArray) -> Result<Grads> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(format!(
                "seed {:?} vs root value {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut by_id: Vec<Option<NdArray>> = (0..=root).map(|_| None).collect();
        by_id[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = by_id[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut by_id)?;
            by_id[id] = Some(g);
        }
        Ok(Grads { by_id })
    }

    fn accumulate(by_id: &mut [Option<NdArray>], id: VarId, grad: NdArray) -> Result<()> {
        match &mut by_id[id] {
            Some(acc) => acc.add_assign(&grad)?,
            slot @ None => *slot = Some(grad),
        }
        Ok(())
    }

    fn accumulate_inputs(
        &self,
        id: VarId,
        g: &NdArray,
        by_id: &mut [Option<NdArray>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(by_id, *a, g.clone())?;
                Self::accumulate(by_id, *b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                Self::accumulate(by_id, *x, g.clone())?;
                let d = self.value(*bias).len();
                let mut db = vec![0.0; d];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % d] += gv;
                }
                Self::accumulate(by_id, *bias, NdArray::new(vec![d], db)?)?;
            }
            Op::Mul(a, b) => {
                Self::accumulate(by_id, *a, g.mul(self.value(*b))?)?;
                Self::accumulate(by_id, *b, g.mul(self.value(*a))?)?;
            }
            Op::Neg(a) => Self::accumulate(by_id, *a, g.scale(-1.0))?,
            Op::Scale(a, c) => Self::accumulate(by_id, *a, g.scale(*c))?,
            Op::Exp(a) => {
                // d/dx e^x = e^x, which is this node's own value.
                Self::accumulate(by_id, *a, g.mul(&self.nodes[id].value)?)?;
            }
            Op::Softplus(a) => {
                let dx = self.value(*a).map(math::softplus_grad);
                Self::accumulate(by_id, *a, g.mul(&dx)?)?;
            }
            Op::Silu(a) => {
                let dx = self.value(*a).map(math::silu_grad);
                Self::accumulate(by_id, *a, g.mul(&dx)?)?;
            }
            Op::MatMul(a, b) => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = self.value(*b).permute(&[1, 0])?;
                let at = self.value(*a).permute(&[1, 0])?;
                Self::accumulate(by_id, *a, g.matmul(&bt)?)?;
                Self::accumulate(by_id, *b, at.matmul(g)?)?;
            }
            Op::Permute(a, perm) => {
                let inv = invert_permutation(perm);
                Self::accumulate(by_id, *a, g.permute(&inv)?)?;
            }
            Op::FlipAxes(a, mask) => {
                Self::accumulate(by_id, *a, g.flip_axes(mask)?)?;
            }
            Op::Reshape(a) => {
                let back = g.reshape(self.value(*a).shape())?;
                Self::accumulate(by_id, *a, back)?;
            }
            Op::SliceAxis { input, axis, start } => {
                let src = self.value(*input);
                let mut dx = NdArray::zeros(src.shape());
                let outer: usize = src.shape()[..*axis].iter().product();
                let inner: usize = src.shape()[*axis + 1..].iter().product();
                let slice_extent = g.shape()[*axis];
                for o in 0..outer {
                    for j in 0..slice_extent {
                        let dst = (o * src.shape()[*axis] + start + j) * inner;
                        let srcoff = (o * slice_extent + j) * inner;
                        dx.data_mut()[dst..dst + inner]
                            .copy_from_slice(&g.data()[srcoff..srcoff + inner]);
                    }
                }
                Self::accumulate(by_id, *input, dx)?;
            }
            Op::ConcatAxis { inputs, axis } => {
                let mut start = 0usize;
                for &inp in inputs {
                    let extent = self.value(inp).shape()[*axis];
                    let piece = g.slice_axis(*axis, start, extent)?;
                    Self::accumulate(by_id, inp, piece)?;
                    start += extent;
                }
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                Self::accumulate(by_id, *a, NdArray::full(self.value(*a).shape(), gv))?;
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let (l, d) = (src.shape()[0], src.shape()[1]);
                let mut dx = vec![0.0; l * d];
                for row in 0..l {
                    for col in 0..d {
                        dx[row * d + col] = g.data()[col] / l as f64;
                    }
                }
                Self::accumulate(by_id, *a, NdArray::new(vec![l, d], dx)?)?;
            }
            Op::RmsNorm { input, gamma, eps } => {
                let xv = self.value(*input);
                let gv = self.value(*gamma);
                let d = *xv.shape().last().unwrap();
                let rows = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    // s = Σ_j γ_j g_j x_j
                    let mut s = 0.0;
                    for j in 0..d {
                        s += gv.data()[j] * grow[j] * row[j];
                        dgamma[j] += grow[j] * row[j] * inv;
                    }
                    let coeff = s * inv * inv * inv / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = gv.data()[j] * grow[j] * inv - row[j] * coeff;
                    }
                }
                Self::accumulate(by_id, *input, NdArray::new(xv.shape().to_vec(), dx)?)?;
                Self::accumulate(by_id, *gamma, NdArray::new(vec![d], dgamma)?)?;
            }
            Op::LogSoftmax(a) => {
                // dx = g − softmax(x)·Σg
                let y = &self.nodes[id].value; // log-softmax values
                let gsum: f64 = g.data().iter().sum();
                let dx = NdArray::new(
                    y.shape().to_vec(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&ly, &gi)| gi - ly.exp() * gsum)
                        .collect(),
                )?;
                Self::accumulate(by_id, *a, dx)?;
            }
            Op::ConvDw1d { input, weight, bias } => {
                let xv = self.value(*input);
                let wv = self.value(*weight);
                let (l, c) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[1];
                let mut dx = vec![0.0; l * c];
                let mut dw = vec![0.0; c * k];
                let mut db = vec![0.0; c];
                for t in 0..l {
                    for ch in 0..c {
                        let gv = g.data()[t * c + ch];
                        if gv == 0.0 {
                            continue;
                        }
                        db[ch] += gv;
                        let lo = (k - 1).saturating_sub(t);
                        for j in lo..k {
                            let src = t + j + 1 - k;
                            dw[ch * k + j] += gv * xv.data()[src * c + ch];
                            dx[src * c + ch] += gv * wv.data()[ch * k + j];
                        }
                    }
                }
                Self::accumulate(by_id, *input, NdArray::new(vec![l, c], dx)?)?;
                Self::accumulate(by_id, *weight, NdArray::new(vec![c, k], dw)?)?;
                Self::accumulate(by_id, *bias, NdArray::new(vec![c], db)?)?;
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = NdArray::zeros(tv.shape());
                for (i, &id_) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[id_ * d + j] += g.data()[i * d + j];
                    }
                }
                Self::accumulate(by_id, *table, dt)?;
            }
            Op::SelectiveScan { u, delta, b, c, a, d_skip, euler_b, boundaries, saved } => {
                let grads = ssm::selective_scan_backward(
                    self.value(*u),
                    self.value(*delta),
                    self.value(*b),
                    self.value(*c),
                    self.value(*a),
                    self.value(*d_skip),
                    *euler_b,
                    boundaries,
                    saved,
                    g,
                )?;
                Self::accumulate(by_id, *u, grads.du)?;
                Self::accumulate(by_id, *delta, grads.ddelta)?;
                Self::accumulate(by_id, *b, grads.db)?;
                Self::accumulate(by_id, *c, grads.dc)?;
                Self::accumulate(by_id, *a, grads.da)?;
                Self::accumulate(by_id, *d_skip, grads.dd_skip)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_grad() {
        // f(x) = Σ x², grad = 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_needs_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::MissingSeed)));
        let seed = NdArray::new(vec![2], vec![1.0, 0.0]).unwrap();
        let grads = tape.backward_seeded(x, seed).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_grads() {
        // f = sum(A·B); dA = 1·Bᵀ, dB = Aᵀ·1.
        let mut tape = Tape::new();
        let a = tape.leaf(NdArray::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let b = tape.leaf(NdArray::new(vec![2, 1], vec![5.0, 7.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn permute_roundtrip_grad_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_fn(&[2, 3], |i| i as f64));
        let p = tape.permute(x, &[1, 0]).unwrap();
        let q = tape.permute(p, &[1, 0]).unwrap();
        assert_eq!(tape.value(q), tape.value(x));
        let s = tape.sum_all(q);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn causal_conv_zero_future_grad() {
        // Output at t must not see inputs after t.
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_fn(&[5, 1], |i| i as f64));
        let w = tape.leaf(NdArray::full(&[1, 3], 0.5));
        let b = tape.leaf(NdArray::zeros(&[1]));
        let y = tape.conv1d_depthwise(x, w, b).unwrap();
        let mut seed = NdArray::zeros(&[5, 1]);
        seed.set(&[2, 0], 1.0);
        let grads = tape.backward_seeded(y, seed).unwrap();
        let dx = grads.get(x).unwrap();
        assert_eq!(dx.get(&[3, 0]), 0.0);
        assert_eq!(dx.get(&[4, 0]), 0.0);
        assert!(dx.get(&[2, 0]) != 0.0);
    }

    #[test]
    fn embedding_lookup_and_grad() {
        let mut tape = Tape::new();
        let table = tape.leaf(NdArray::from_fn(&[3, 2], |i| i as f64));
        let e = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = tape.sum_all(e);
        let grads = tape.backward(s).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn log_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let ls = tape.log_softmax(x).unwrap();
        let total: f64 = tape.value(ls).data().iter().map(|&v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grads_flow_through_branches() {
        // y = x + x uses x twice; gradient must accumulate to 2.
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
