//! Selective state-space scan kernel.
//!
//! Zero-order-hold discretization, the input-dependent linear recurrence
//!   h_t = Ā_t h_{t-1} + B̄_t x_t,   y_t = ⟨C_t, h_t⟩ + D·x_t,
//! in sequential and associative-parallel form, the analytic backward pass,
//! and factorized (boundary-reset) scans.
//!
//! Shape conventions, all row-major `f64`:
//!   u, delta : (L, D)      per-step input and positive step size
//!   b, c     : (L, N)      input-dependent projections
//!   a        : (D, N)      diagonal state matrix, strictly negative
//!   d_skip   : (D,)        per-channel skip
//!   abar, bbar, h : (L, D, N)
//!
//! A scan boundary at position p forces Ā_p to zero, so the recurrence
//! restarts there; running independent scans over the sub-sequences gives
//! bit-identical results.

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// φ(z) = (e^z − 1)/z, the ZOH input-weighting factor; series fallback keeps
/// the small-|z| branch accurate.
pub fn zoh_phi(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// dφ/dz = ((z − 1)e^z + 1)/z². The exact numerator cancels to O(z²), so
/// the series takes over below 1e-3 where the cancellation costs digits.
pub fn zoh_phi_grad(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        ((z - 1.0) * z.exp() + 1.0) / (z * z)
    }
}

fn check_scan_shapes(
    abar: &NdArray,
    bbarx: &NdArray,
    c: &NdArray,
    d_skip: &NdArray,
    u: &NdArray,
) -> Result<(usize, usize, usize)> {
    if abar.rank() != 3 {
        return Err(Error::shape(format!("abar must be (L,D,N), got {:?}", abar.shape())));
    }
    let (l, d, n) = (abar.shape()[0], abar.shape()[1], abar.shape()[2]);
    if bbarx.shape() != abar.shape() {
        return Err(Error::shape(format!(
            "bbarx {:?} vs abar {:?}",
            bbarx.shape(),
            abar.shape()
        )));
    }
    if c.shape() != [l, n] {
        return Err(Error::shape(format!("c must be ({l},{n}), got {:?}", c.shape())));
    }
    if d_skip.shape() != [d] {
        return Err(Error::shape(format!("d_skip must be ({d},), got {:?}", d_skip.shape())));
    }
    if u.shape() != [l, d] {
        return Err(Error::shape(format!("u must be ({l},{d}), got {:?}", u.shape())));
    }
    Ok((l, d, n))
}

/// Boundaries must be strictly increasing within [1, L).
fn check_boundaries(boundaries: &[usize], l: usize) -> Result<()> {
    for (i, &p) in boundaries.iter().enumerate() {
        if p < 1 || p >= l || (i > 0 && p <= boundaries[i - 1]) {
            return Err(Error::InvalidBoundary { position: p, len: l });
        }
    }
    Ok(())
}

/// Step mask: 0.0 at reset positions, 1.0 elsewhere.
fn boundary_mask(l: usize, boundaries: &[usize]) -> Vec<f64> {
    let mut m = vec![1.0; l];
    for &p in boundaries {
        m[p] = 0.0;
    }
    m
}

/// ZOH discretization: Ā = exp(ΔA), B̄ = φ(ΔA)·ΔB per (step, channel, state).
/// With `euler_b`, B̄ = ΔB (the reference simplification).
pub fn discretize(
    a: &NdArray,
    b: &NdArray,
    delta: &NdArray,
    euler_b: bool,
) -> Result<(NdArray, NdArray)> {
    if a.rank() != 2 || b.rank() != 2 || delta.rank() != 2 {
        return Err(Error::shape("discretize expects a:(D,N) b:(L,N) delta:(L,D)"));
    }
    let (d, n) = (a.shape()[0], a.shape()[1]);
    let l = delta.shape()[0];
    if delta.shape()[1] != d || b.shape() != [l, n] {
        return Err(Error::shape(format!(
            "discretize shapes a{:?} b{:?} delta{:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        )));
    }
    for &dt in delta.data() {
        if dt <= 0.0 {
            return Err(Error::InvalidDelta(dt));
        }
    }
    let mut abar = vec![0.0; l * d * n];
    let mut bbar = vec![0.0; l * d * n];
    let ad = a.data();
    let bd = b.data();
    let dd = delta.data();
    for t in 0..l {
        for ch in 0..d {
            let dt = dd[t * d + ch];
            let base = (t * d + ch) * n;
            for s in 0..n {
                let z = dt * ad[ch * n + s];
                abar[base + s] = z.exp();
                bbar[base + s] = if euler_b {
                    dt * bd[t * n + s]
                } else {
                    zoh_phi(z) * dt * bd[t * n + s]
                };
            }
        }
    }
    Ok((
        NdArray::new(vec![l, d, n], abar)?,
        NdArray::new(vec![l, d, n], bbar)?,
    ))
}

/// Sequential scan: h_t = Ā_t h_{t-1} + (B̄x)_t, y_t = ⟨C_t, h_t⟩ + D·x_t.
pub fn scan_sequential(
    abar: &NdArray,
    bbarx: &NdArray,
    c: &NdArray,
    d_skip: &NdArray,
    u: &NdArray,
) -> Result<NdArray> {
    scan_factorized(abar, bbarx, c, d_skip, u, &[])
}

/// Sequential scan with restart boundaries: Ā is forced to zero at each
/// boundary position, which equals running independent scans on each
/// sub-sequence.
pub fn scan_factorized(
    abar: &NdArray,
    bbarx: &NdArray,
    c: &NdArray,
    d_skip: &NdArray,
    u: &NdArray,
    boundaries: &[usize],
) -> Result<NdArray> {
    let (l, d, n) = check_scan_shapes(abar, bbarx, c, d_skip, u)?;
    check_boundaries(boundaries, l)?;
    let mask = boundary_mask(l, boundaries);
    let h = scan_states(abar, bbarx, &mask, l, d, n);
    output_from_states(&h, c, d_skip, u, l, d, n)
}

/// Inclusive states of the masked recurrence, flat (L,D,N).
fn scan_states(abar: &NdArray, bbarx: &NdArray, mask: &[f64], l: usize, d: usize, n: usize) -> Vec<f64> {
    let mut h = vec![0.0; l * d * n];
    let a = abar.data();
    let bx = bbarx.data();
    let dn = d * n;
    // t = 0: h = bbarx (h_{-1} = 0).
    h[..dn].copy_from_slice(&bx[..dn]);
    for t in 1..l {
        let m = mask[t];
        let (prev, cur) = h.split_at_mut(t * dn);
        let prev = &prev[(t - 1) * dn..];
        let cur = &mut cur[..dn];
        let at = &a[t * dn..(t + 1) * dn];
        let bt = &bx[t * dn..(t + 1) * dn];
        for i in 0..dn {
            cur[i] = m * at[i] * prev[i] + bt[i];
        }
    }
    h
}

fn output_from_states(
    h: &[f64],
    c: &NdArray,
    d_skip: &NdArray,
    u: &NdArray,
    l: usize,
    d: usize,
    n: usize,
) -> Result<NdArray> {
    let cd = c.data();
    let dk = d_skip.data();
    let ud = u.data();
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let crow = &cd[t * n..(t + 1) * n];
        for ch in 0..d {
            let hrow = &h[(t * d + ch) * n..(t * d + ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                acc += crow[s] * hrow[s];
            }
            y[t * d + ch] = acc + dk[ch] * ud[t * d + ch];
        }
    }
    NdArray::new(vec![l, d], y)
}

/// Associative combine for the linear recurrence: composing (a₁,b₁) then
/// (a₂,b₂) gives (a₁a₂, a₂b₁ + b₂).
#[inline]
fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Balanced-tree inclusive scan over one lane, Blelloch-style pairing.
/// Deterministic: the tree shape depends only on the length.
fn tree_scan(elems: &mut [(f64, f64)]) {
    let len = elems.len();
    if len <= 1 {
        return;
    }
    let half = len / 2;
    let mut paired: Vec<(f64, f64)> = (0..half)
        .map(|i| combine(elems[2 * i], elems[2 * i + 1]))
        .collect();
    if len % 2 == 1 {
        paired.push(elems[len - 1]);
    }
    tree_scan(&mut paired);
    // paired[i] is now the inclusive prefix through element 2i+1 (or the
    // trailing element). Expand back to the full resolution.
    let first = elems[0];
    for i in (0..len).rev() {
        elems[i] = if i % 2 == 1 {
            paired[i / 2]
        } else if i == 0 {
            first
        } else {
            combine(paired[i / 2 - 1], elems[i])
        };
    }
}

/// Associative-parallel scan; identical contract to [`scan_sequential`].
pub fn scan_parallel(
    abar: &NdArray,
    bbarx: &NdArray,
    c: &NdArray,
    d_skip: &NdArray,
    u: &NdArray,
) -> Result<NdArray> {
    let (l, d, n) = check_scan_shapes(abar, bbarx, c, d_skip, u)?;
    let a = abar.data();
    let bx = bbarx.data();
    let dn = d * n;
    let mut h = vec![0.0; l * dn];
    let mut lane: Vec<(f64, f64)> = Vec::with_capacity(l);
    for i in 0..dn {
        lane.clear();
        lane.extend((0..l).map(|t| (a[t * dn + i], bx[t * dn + i])));
        tree_scan(&mut lane);
        for t in 0..l {
            h[t * dn + i] = lane[t].1;
        }
    }
    output_from_states(&h, c, d_skip, u, l, d, n)
}

/// Forward state saved for the analytic backward pass.
#[derive(Debug, Clone)]
pub struct ScanSaved {
    pub abar: NdArray,
    pub bbar: NdArray,
    pub h: NdArray,
}

/// Gradients of the fused discretize+scan with respect to every input.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub du: NdArray,
    pub ddelta: NdArray,
    pub db: NdArray,
    pub dc: NdArray,
    pub da: NdArray,
    pub dd_skip: NdArray,
}

/// Fused selective scan: discretize, apply the (optionally boundary-reset)
/// recurrence, and emit outputs plus the saved state backward needs.
pub fn selective_scan_forward(
    u: &NdArray,
    delta: &NdArray,
    b: &NdArray,
    c: &NdArray,
    a: &NdArray,
    d_skip: &NdArray,
    euler_b: bool,
    boundaries: &[usize],
) -> Result<(NdArray, ScanSaved)> {
    let (abar, bbar) = discretize(a, b, delta, euler_b)?;
    let (l, d, n) = check_scan_shapes(&abar, &bbar, c, d_skip, u)?;
    check_boundaries(boundaries, l)?;
    let mask = boundary_mask(l, boundaries);
    // bbarx = bbar * u, broadcast over the state axis.
    let mut bbarx = vec![0.0; l * d * n];
    let bb = bbar.data();
    let ud = u.data();
    for t in 0..l {
        for ch in 0..d {
            let x = ud[t * d + ch];
            let base = (t * d + ch) * n;
            for s in 0..n {
                bbarx[base + s] = bb[base + s] * x;
            }
        }
    }
    let bbarx = NdArray::new(vec![l, d, n], bbarx)?;
    let h = scan_states(&abar, &bbarx, &mask, l, d, n);
    let y = output_from_states(&h, c, d_skip, u, l, d, n)?;
    let h = NdArray::new(vec![l, d, n], h)?;
    Ok((y, ScanSaved { abar, bbar, h }))
}

/// Reverse-time adjoint of [`selective_scan_forward`].
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward(
    u: &NdArray,
    delta: &NdArray,
    b: &NdArray,
    c: &NdArray,
    a: &NdArray,
    d_skip: &NdArray,
    euler_b: bool,
    boundaries: &[usize],
    saved: &ScanSaved,
    gy: &NdArray,
) -> Result<ScanGrads> {
    let (l, d, n) = check_scan_shapes(&saved.abar, &saved.bbar, c, d_skip, u)?;
    if gy.shape() != [l, d] {
        return Err(Error::shape(format!("gy must be ({l},{d}), got {:?}", gy.shape())));
    }
    let mask = boundary_mask(l, boundaries);
    let dn = d * n;
    let ab = saved.abar.data();
    let bb = saved.bbar.data();
    let h = saved.h.data();
    let ad = a.data();
    let bd = b.data();
    let cd = c.data();
    let dd = delta.data();
    let ud = u.data();
    let gyd = gy.data();
    let dkd = d_skip.data();

    let mut du = vec![0.0; l * d];
    let mut ddelta = vec![0.0; l * d];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut da = vec![0.0; d * n];
    let mut dd_skip = vec![0.0; d];

    // λ holds ∂L/∂h for the step being processed; updated in reverse time.
    let mut lambda = vec![0.0; dn];
    for t in (0..l).rev() {
        let next_mask = if t + 1 < l { mask[t + 1] } else { 0.0 };
        for ch in 0..d {
            let g = gyd[t * d + ch];
            let x = ud[t * d + ch];
            let dt = dd[t * d + ch];
            let base = (t * d + ch) * n;
            dd_skip[ch] += g * x;
            du[t * d + ch] += g * dkd[ch];
            let mut du_acc = 0.0;
            let mut ddt_acc = 0.0;
            for s in 0..n {
                let i = base + s;
                // Adjoint: contribution from y_t plus the propagated state.
                let lam = g * cd[t * n + s]
                    + if t + 1 < l {
                        next_mask * ab[i + dn] * lambda[ch * n + s]
                    } else {
                        0.0
                    };
                lambda[ch * n + s] = lam;

                dc[t * n + s] += g * h[i];
                du_acc += lam * bb[i];
                let dbbar = lam * x;
                let h_prev = if t > 0 { h[i - dn] } else { 0.0 };
                let dabar = mask[t] * lam * h_prev;
                let aval = ad[ch * n + s];
                let z = dt * aval;
                let (phi, dphi) = if euler_b {
                    (1.0, 0.0)
                } else {
                    (zoh_phi(z), zoh_phi_grad(z))
                };
                db[t * n + s] += dbbar * phi * dt;
                let dz = dabar * ab[i] + dbbar * dphi * dt * bd[t * n + s];
                ddt_acc += dz * aval + dbbar * phi * bd[t * n + s];
                da[ch * n + s] += dz * dt;
            }
            du[t * d + ch] += du_acc;
            ddelta[t * d + ch] += ddt_acc;
        }
    }

    Ok(ScanGrads {
        du: NdArray::new(vec![l, d], du)?,
        ddelta: NdArray::new(vec![l, d], ddelta)?,
        db: NdArray::new(vec![l, n], db)?,
        dc: NdArray::new(vec![l, n], dc)?,
        da: NdArray::new(vec![d, n], da)?,
        dd_skip: NdArray::new(vec![d], dd_skip)?,
    })
}
