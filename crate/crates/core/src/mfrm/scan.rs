//! Selective scan: `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t`, `y_t = C_t h_t + D ⊙ x_t`.

use crate::error::{Error, Result};
use crate::numeric::{CustomOp, Real, Var};

/// Sizes of one scan: `len` positions, `dim` channels, `state` per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub dim: usize,
    pub state: usize,
}

/// Scan direction; backward is reverse, scan, reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Plain inputs of one scan, all row-major.
/// `u`, `delta`: len×dim. `a`: dim×state. `b`, `c`: len×state. `d_skip`: dim.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d_skip: &'a [T],
}

impl<T> ScanInputs<'_, T> {
    fn check(&self, d: ScanDims) -> Result<()> {
        let want = [
            ("u", self.u.len(), d.len * d.dim),
            ("delta", self.delta.len(), d.len * d.dim),
            ("A", self.a.len(), d.dim * d.state),
            ("B", self.b.len(), d.len * d.state),
            ("C", self.c.len(), d.len * d.state),
            ("D", self.d_skip.len(), d.dim),
        ];
        for (name, got, expected) in want {
            if got != expected {
                return Err(Error::shape("selective_scan", format!("{name} has {got} elements, expected {expected}")));
            }
        }
        Ok(())
    }
}

/// Forward scan returning outputs and every hidden state (`len×dim×state`).
pub fn scan_forward<T: Real>(x: &ScanInputs<'_, T>, d: ScanDims) -> Result<(Vec<T>, Vec<T>)> {
    x.check(d)?;
    let ScanDims { len, dim, state } = d;
    let mut y = vec![T::zero(); len * dim];
    let mut states = vec![T::zero(); len * dim * state];
    let mut h = vec![T::zero(); dim * state];
    for t in 0..len {
        let bt = &x.b[t * state..(t + 1) * state];
        let ct = &x.c[t * state..(t + 1) * state];
        for ch in 0..dim {
            let dt = x.delta[t * dim + ch];
            let u = x.u[t * dim + ch];
            let du = dt * u;
            let hrow = &mut h[ch * state..(ch + 1) * state];
            let arow = &x.a[ch * state..(ch + 1) * state];
            let mut acc = T::zero();
            for n in 0..state {
                hrow[n] = (dt * arow[n]).exp() * hrow[n] + du * bt[n];
                acc = acc + ct[n] * hrow[n];
            }
            y[t * dim + ch] = acc + x.d_skip[ch] * u;
        }
        states[t * dim * state..(t + 1) * dim * state].copy_from_slice(&h);
    }
    Ok((y, states))
}

/// Gradients of a scan for an upstream `gy`, in the order u, delta, A, B, C, D.
pub fn scan_backward<T: Real>(x: &ScanInputs<'_, T>, d: ScanDims, states: &[T], gy: &[T]) -> [Vec<T>; 6] {
    let ScanDims { len, dim, state } = d;
    let mut du = vec![T::zero(); len * dim];
    let mut ddelta = vec![T::zero(); len * dim];
    let mut da = vec![T::zero(); dim * state];
    let mut db = vec![T::zero(); len * state];
    let mut dc = vec![T::zero(); len * state];
    let mut dd = vec![T::zero(); dim];
    let mut dh = vec![T::zero(); dim * state];
    let zeros = vec![T::zero(); dim * state];
    for t in (0..len).rev() {
        let h_t = &states[t * dim * state..(t + 1) * dim * state];
        let h_prev = if t == 0 { &zeros[..] } else { &states[(t - 1) * dim * state..t * dim * state] };
        let bt = &x.b[t * state..(t + 1) * state];
        let ct = &x.c[t * state..(t + 1) * state];
        for ch in 0..dim {
            let i = t * dim + ch;
            let (g, u, dt) = (gy[i], x.u[i], x.delta[i]);
            dd[ch] = dd[ch] + g * u;
            let mut gu = g * x.d_skip[ch];
            let mut gdt = T::zero();
            for n in 0..state {
                let k = ch * state + n;
                dc[t * state + n] = dc[t * state + n] + g * h_t[k];
                let gh = dh[k] + g * ct[n];
                let an = x.a[k];
                let abar = (dt * an).exp();
                let gh_prev_term = gh * abar * h_prev[k];
                gdt = gdt + gh_prev_term * an + gh * bt[n] * u;
                da[k] = da[k] + gh_prev_term * dt;
                db[t * state + n] = db[t * state + n] + gh * dt * u;
                gu = gu + gh * dt * bt[n];
                dh[k] = gh * abar;
            }
            du[i] = gu;
            ddelta[i] = gdt;
        }
    }
    [du, ddelta, da, db, dc, dd]
}

/// Reference-direction wrapper over plain slices.
pub fn scan_direction<T: Real>(x: &ScanInputs<'_, T>, d: ScanDims, dir: Direction) -> Result<Vec<T>> {
    match dir {
        Direction::Forward => Ok(scan_forward(x, d)?.0),
        Direction::Backward => {
            let rev = |v: &[T], w: usize| -> Vec<T> { v.chunks(w).rev().flatten().copied().collect() };
            let (u, delta, b, c) = (rev(x.u, d.dim), rev(x.delta, d.dim), rev(x.b, d.state), rev(x.c, d.state));
            let inner = ScanInputs { u: &u, delta: &delta, a: x.a, b: &b, c: &c, d_skip: x.d_skip };
            Ok(rev(&scan_forward(&inner, d)?.0, d.dim))
        }
    }
}

struct ScanOp<T> {
    dims: ScanDims,
    states: Vec<T>,
}

impl<T: Real> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = ScanInputs { u: inputs[0], delta: inputs[1], a: inputs[2], b: inputs[3], c: inputs[4], d_skip: inputs[5] };
        scan_backward(&x, self.dims, &self.states, grad_out).into_iter().map(Some).collect()
    }
}

/// Differentiable forward-direction scan on graph values.
pub fn selective_scan<'g, T: Real>(
    u: Var<'g, T>,
    delta: Var<'g, T>,
    a: Var<'g, T>,
    b: Var<'g, T>,
    c: Var<'g, T>,
    d_skip: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let us = u.shape();
    let as_ = a.shape();
    let (&[len, dim], &[adim, state]) = (&us[..], &as_[..]) else {
        return Err(Error::shape("selective_scan", format!("u {us:?} and A {as_:?} must be 2-D")));
    };
    if adim != dim {
        return Err(Error::shape("selective_scan", format!("A has {adim} rows for {dim} channels")));
    }
    let dims = ScanDims { len, dim, state };
    let (uv, dv, av, bv, cv, sv) = (u.value(), delta.value(), a.value(), b.value(), c.value(), d_skip.value());
    let x = ScanInputs { u: &uv, delta: &dv, a: &av, b: &bv, c: &cv, d_skip: &sv };
    let (y, states) = scan_forward(&x, dims)?;
    u.graph().custom(&[u, delta, a, b, c, d_skip], vec![len, dim], y, Box::new(ScanOp { dims, states }))
}
