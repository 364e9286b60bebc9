//! Dense N-dimensional array, row-major, `f64` storage.
//!
//! `NdArray` is the universal value type for activations, weights, and
//! gradients. Values are immutable in spirit: ops return new arrays, and a
//! constructed array is safe to share across threads. Checkpoints store
//! 32-bit floats; conversion lives in the checkpoint module.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Pairwise summation: deterministic and accurate enough that a full-array
/// reduce stays within 1e-12 relative of the mathematical sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        NdArray { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides: stride[i] = product(shape[i+1..]).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        let strides = self.strides();
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off += ix * strides[i];
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Axis permutation: out.shape[i] == self.shape[perm[i]] and the element
    /// at output index (j_0..j_{N-1}) is the input element whose index along
    /// axis perm[i] is j_i.
    pub fn permute(&self, perm: &[usize]) -> Result<NdArray> {
        let rank = self.rank();
        if !is_permutation(perm, rank) {
            return Err(Error::InvalidPermutation { perm: perm.to_vec(), rank });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        // Stride of output axis i in the input layout.
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; rank];
        let mut in_off = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[in_off];
            // Odometer increment over the output index space.
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                in_off += mapped[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                in_off -= mapped[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        NdArray::new(out_shape, out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<NdArray> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(NdArray { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Reverse the flat (row-major) element order; shape preserved.
    /// Equivalent to flipping every axis simultaneously.
    pub fn reverse_flat(&self) -> NdArray {
        let mut data = self.data.clone();
        data.reverse();
        NdArray { shape: self.shape.clone(), data }
    }

    /// Flip traversal direction of the axes marked true.
    pub fn flip_axes(&self, mask: &[bool]) -> Result<NdArray> {
        if mask.len() != self.rank() {
            return Err(Error::shape(format!(
                "flip mask length {} != rank {}",
                mask.len(),
                self.rank()
            )));
        }
        if mask.iter().all(|&m| m) {
            return Ok(self.reverse_flat());
        }
        if mask.iter().all(|&m| !m) {
            return Ok(self.clone());
        }
        let strides = self.strides();
        let mut out = vec![0.0; self.data.len()];
        let rank = self.rank();
        let mut idx = vec![0usize; rank];
        for (out_off, slot) in out.iter_mut().enumerate() {
            let mut in_off = 0;
            for ax in 0..rank {
                let j = if mask[ax] { self.shape[ax] - 1 - idx[ax] } else { idx[ax] };
                in_off += j * strides[ax];
            }
            *slot = self.data[in_off];
            let _ = out_off;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        NdArray::new(self.shape.clone(), out)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<NdArray> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * self.shape[axis] * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        NdArray::new(out_shape, out)
    }

    pub fn concat_axis(arrays: &[&NdArray], axis: usize) -> Result<NdArray> {
        let first = arrays.first().ok_or_else(|| Error::shape("concat of zero arrays"))?;
        if axis >= first.rank() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = first.shape.clone();
        for a in &arrays[1..] {
            if a.rank() != first.rank() {
                return Err(Error::shape("concat rank mismatch"));
            }
            for ax in 0..first.rank() {
                if ax != axis && a.shape[ax] != first.shape[ax] {
                    return Err(Error::shape(format!(
                        "concat shape mismatch on axis {ax}: {:?} vs {:?}",
                        first.shape, a.shape
                    )));
                }
            }
            out_shape[axis] += a.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for a in arrays {
                let chunk = a.shape[axis] * inner;
                out.extend_from_slice(&a.data[o * chunk..(o + 1) * chunk]);
            }
        }
        NdArray::new(out_shape, out)
    }

    /// 2-D matrix product (m,k)·(k,n) -> (m,n).
    pub fn matmul(&self, rhs: &NdArray) -> Result<NdArray> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous.
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[l * n..(l + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        NdArray::new(vec![m, n], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &NdArray, f: impl Fn(f64, f64) -> f64) -> Result<NdArray> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        Ok(NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, rhs: &NdArray) -> Result<NdArray> {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn mul(&self, rhs: &NdArray) -> Result<NdArray> {
        self.zip_map(rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> NdArray {
        self.map(|x| x * c)
    }

    /// Pairwise-summed total of all elements.
    pub fn sum_all(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// Accumulate `rhs` into self (for gradient accumulation).
    pub fn add_assign(&mut self, rhs: &NdArray) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "add_assign {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

pub fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Inverse of an axis permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_array(shape: &[usize], rng: &mut StdRng) -> NdArray {
        NdArray::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_permute_is_noop() {
        let a = NdArray::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        let b = a.permute(&[0, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transpose_2x2() {
        let a = NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = a.permute(&[1, 0]).unwrap();
        assert_eq!(b.data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn permute_roundtrip_3d() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let a = random_array(&[3, 4, 5], &mut rng);
            let perm = [2usize, 0, 1];
            let inv = invert_permutation(&perm);
            let back = a.permute(&perm).unwrap().permute(&inv).unwrap();
            assert_eq!(a, back);
        }
    }

    #[test]
    fn permute_rejects_bad_perm() {
        let a = NdArray::zeros(&[2, 3]);
        assert!(matches!(
            a.permute(&[0, 0]),
            Err(Error::InvalidPermutation { .. })
        ));
        assert!(matches!(a.permute(&[0]), Err(Error::InvalidPermutation { .. })));
    }

    #[test]
    fn reverse_flat_basics() {
        let a = NdArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.reverse_flat().data(), &[3.0, 2.0, 1.0]);
        let b = NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(b.reverse_flat().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(b.reverse_flat().reverse_flat(), b);
    }

    #[test]
    fn reverse_flat_equals_flip_all_axes() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_array(&[2, 3, 4], &mut rng);
        assert_eq!(a.reverse_flat(), a.flip_axes(&[true, true, true]).unwrap());
    }

    #[test]
    fn flip_single_axis() {
        let a = NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rows = a.flip_axes(&[true, false]).unwrap();
        assert_eq!(rows.data(), &[3.0, 4.0, 1.0, 2.0]);
        let cols = a.flip_axes(&[false, true]).unwrap();
        assert_eq!(cols.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let a = NdArray::new(vec![2, 4], (0..8).map(|x| x as f64).collect()).unwrap();
        let left = a.slice_axis(1, 0, 2).unwrap();
        let right = a.slice_axis(1, 2, 2).unwrap();
        let back = NdArray::concat_axis(&[&left, &right], 1).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn matmul_small() {
        let a = NdArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = NdArray::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn pairwise_sum_accuracy() {
        // Alternating large/small magnitudes where naive order loses digits.
        let n = 1 << 16;
        let xs: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 1e-13 }).collect();
        let exact = (n / 2) as f64 * (1.0 + 1e-13);
        let got = pairwise_sum(&xs);
        assert!((got - exact).abs() / exact < 1e-12);
    }

    #[test]
    fn strides_law() {
        let a = NdArray::zeros(&[2, 3, 4]);
        assert_eq!(a.strides(), vec![12, 4, 1]);
    }
}
