//! Forward and vector-Jacobian kernels for the tape primitives.
//!
//! Volumes are channels-last: `[depth, height, width, channels]`.
//! Convolution weights are `[k, k, k, c_in, c_out]` with odd `k` and
//! "same" padding of `k / 2`.

use super::{Array, DiffError};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &Array, weight: &Array, bias: &Array, stride: usize) -> Result<Self, DiffError> {
        let (is, ws, bs) = (input.shape(), weight.shape(), bias.shape());
        let bad = || DiffError::shape("conv3d", &[is, ws, bs]);
        if is.len() != 4 || ws.len() != 5 || bs.len() != 1 || stride == 0 {
            return Err(bad());
        }
        let k = ws[0];
        if k % 2 == 0 || ws[1] != k || ws[2] != k || ws[3] != is[3] || bs[0] != ws[4] {
            return Err(bad());
        }
        let pad = k / 2;
        let out = |n: usize| (n + 2 * pad - k) / stride + 1;
        Ok(Self {
            d: is[0],
            h: is[1],
            w: is[2],
            cin: is[3],
            k,
            cout: ws[4],
            stride,
            od: out(is[0]),
            oh: out(is[1]),
            ow: out(is[2]),
        })
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// Output voxels processed per im2col block.
const BLOCK_ELEMS: usize = 1 << 18;

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.k * self.cin
    }

    fn outputs(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn block(&self) -> usize {
        (BLOCK_ELEMS / self.patch_len()).clamp(1, self.outputs())
    }

    /// Calls `f(o, t, i)` for every output `o` in `o0..o1`, tap `t` and the
    /// input voxel `i` it reads, skipping taps that fall in the padding.
    #[inline(always)]
    fn for_each_source(&self, o0: usize, o1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (k, p, s) = (self.k as isize, self.pad(), self.stride as isize);
        let span = |o: usize, n: usize| {
            let start = o as isize * s - p;
            let lo = (-start).max(0);
            let hi = (n as isize - start).min(k);
            (start, lo, hi)
        };
        for o in o0..o1 {
            let (x, y, z) = (o % self.ow, (o / self.ow) % self.oh, o / (self.ow * self.oh));
            let (sz, z0, z1) = span(z, self.d);
            let (sy, y0, y1) = span(y, self.h);
            let (sx, x0, x1) = span(x, self.w);
            for kz in z0..z1 {
                for ky in y0..y1 {
                    let row = ((sz + kz) as usize * self.h + (sy + ky) as usize) * self.w;
                    let tap = ((kz * k + ky) * k) as usize;
                    for kx in x0..x1 {
                        f(o, tap + kx as usize, row + (sx + kx) as usize);
                    }
                }
            }
        }
    }

    /// Fills `buf` with the patches of outputs `o0..o0 + rows`.
    fn im2col(&self, x: &[f64], o0: usize, rows: usize, buf: &mut [f64]) {
        let (cin, taps) = (self.cin, self.taps());
        buf[..rows * taps * cin].fill(0.0);
        self.for_each_source(o0, o0 + rows, |o, t, i| {
            let r = o - o0;
            buf[(r * taps + t) * cin..(r * taps + t + 1) * cin].copy_from_slice(&x[i * cin..(i + 1) * cin]);
        });
    }

    /// Scatter-adds patch gradients back onto the input gradient.
    fn col2im(&self, buf: &[f64], o0: usize, rows: usize, gx: &mut [f64]) {
        let (cin, taps) = (self.cin, self.taps());
        self.for_each_source(o0, o0 + rows, |o, t, i| {
            let r = o - o0;
            let src = &buf[(r * taps + t) * cin..(r * taps + t + 1) * cin];
            for (a, v) in gx[i * cin..(i + 1) * cin].iter_mut().zip(src) {
                *a += v;
            }
        });
    }
}

/// `c = alpha * a @ b + beta * c` for row-major operands given as (rows, cols, row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the strided extent implied by its dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn inputs(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Narrow outputs are cheaper as per-tap products of the input followed
    /// by shifted accumulation than as patch matrices.
    fn use_shift(&self) -> bool {
        4 * self.cout * self.inputs() <= self.cin * self.outputs()
    }

    /// Weights regrouped as `[cin, taps * cout]`.
    fn wide_weight(&self, w: &[f64]) -> Vec<f64> {
        let (cin, cout, tc) = (self.cin, self.cout, self.taps() * self.cout);
        let mut wall = vec![0.0; cin * tc];
        for t in 0..self.taps() {
            for ci in 0..cin {
                let src = &w[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                wall[ci * tc + t * cout..ci * tc + (t + 1) * cout].copy_from_slice(src);
            }
        }
        wall
    }

    fn narrow_weight(&self, wall: &[f64]) -> Vec<f64> {
        let (cin, cout, tc) = (self.cin, self.cout, self.taps() * self.cout);
        let mut w = vec![0.0; wall.len()];
        for t in 0..self.taps() {
            for ci in 0..cin {
                w[(t * cin + ci) * cout..(t * cin + ci + 1) * cout]
                    .copy_from_slice(&wall[ci * tc + t * cout..ci * tc + (t + 1) * cout]);
            }
        }
        w
    }
}

pub(crate) fn conv3d(input: &Array, weight: &Array, bias: &Array, stride: usize) -> Result<Array, DiffError> {
    let g = ConvGeom::new(input, weight, bias, stride)?;
    let (kl, cout, total) = (g.patch_len(), g.cout, g.outputs());
    let mut out = vec![0.0; total * cout];
    for o in out.chunks_exact_mut(cout) {
        o.copy_from_slice(bias.data());
    }
    if g.use_shift() {
        let tc = g.taps() * cout;
        let wall = g.wide_weight(weight.data());
        let mut z = vec![0.0; g.inputs() * tc];
        gemm(g.inputs(), g.cin, tc, input.data(), (g.cin as isize, 1), &wall, (tc as isize, 1), 0.0, &mut z);
        g.for_each_source(0, total, |o, t, i| {
            let acc = &mut out[o * cout..(o + 1) * cout];
            for (a, v) in acc.iter_mut().zip(&z[i * tc + t * cout..i * tc + (t + 1) * cout]) {
                *a += v;
            }
        });
    } else {
        let block = g.block();
        let mut buf = vec![0.0; block * kl];
        let mut o0 = 0;
        while o0 < total {
            let rows = block.min(total - o0);
            g.im2col(input.data(), o0, rows, &mut buf);
            let c = &mut out[o0 * cout..(o0 + rows) * cout];
            gemm(rows, kl, cout, &buf, (kl as isize, 1), weight.data(), (cout as isize, 1), 1.0, c);
            o0 += rows;
        }
    }
    Array::new(vec![g.od, g.oh, g.ow, cout], out)
}

/// Output gradient spread onto the per-tap input products (`[inputs, taps * cout]`).
fn shift_grad(g: &ConvGeom, grad_out: &Array) -> Vec<f64> {
    let (cout, tc) = (g.cout, g.taps() * g.cout);
    let mut dz = vec![0.0; g.inputs() * tc];
    let gy = grad_out.data();
    g.for_each_source(0, g.outputs(), |o, t, i| {
        for (a, v) in dz[i * tc + t * cout..i * tc + (t + 1) * cout].iter_mut().zip(&gy[o * cout..(o + 1) * cout]) {
            *a += v;
        }
    });
    dz
}

pub(crate) fn conv3d_grad_input(grad_out: &Array, input: &Array, weight: &Array, bias: &Array, stride: usize) -> Result<Array, DiffError> {
    let g = ConvGeom::new(input, weight, bias, stride)?;
    let (kl, cout, total) = (g.patch_len(), g.cout, g.outputs());
    let mut gx = vec![0.0; input.len()];
    if g.use_shift() {
        let tc = g.taps() * cout;
        let dz = shift_grad(&g, grad_out);
        let wall = g.wide_weight(weight.data());
        // dX = dZ @ Wall^T
        gemm(g.inputs(), tc, g.cin, &dz, (tc as isize, 1), &wall, (1, tc as isize), 0.0, &mut gx);
        return Array::new(input.shape().to_vec(), gx);
    }
    let block = g.block();
    let mut buf = vec![0.0; block * kl];
    let mut o0 = 0;
    while o0 < total {
        let rows = block.min(total - o0);
        let gy = &grad_out.data()[o0 * cout..(o0 + rows) * cout];
        // patch gradient = dY @ W^T
        gemm(rows, cout, kl, gy, (cout as isize, 1), weight.data(), (1, cout as isize), 0.0, &mut buf[..rows * kl]);
        g.col2im(&buf, o0, rows, &mut gx);
        o0 += rows;
    }
    Array::new(input.shape().to_vec(), gx)
}

pub(crate) fn conv3d_grad_weight(grad_out: &Array, input: &Array, weight: &Array, bias: &Array, stride: usize) -> Result<Array, DiffError> {
    let g = ConvGeom::new(input, weight, bias, stride)?;
    let (kl, cout, total) = (g.patch_len(), g.cout, g.outputs());
    if g.use_shift() {
        let tc = g.taps() * cout;
        let dz = shift_grad(&g, grad_out);
        let mut dwall = vec![0.0; g.cin * tc];
        // dWall = X^T @ dZ
        gemm(g.cin, g.inputs(), tc, input.data(), (1, g.cin as isize), &dz, (tc as isize, 1), 0.0, &mut dwall);
        return Array::new(weight.shape().to_vec(), g.narrow_weight(&dwall));
    }
    let mut gw = vec![0.0; weight.len()];
    let block = g.block();
    let mut buf = vec![0.0; block * kl];
    let mut o0 = 0;
    while o0 < total {
        let rows = block.min(total - o0);
        g.im2col(input.data(), o0, rows, &mut buf);
        let gy = &grad_out.data()[o0 * cout..(o0 + rows) * cout];
        // dW += P^T @ dY
        gemm(kl, rows, cout, &buf, (1, kl as isize), gy, (cout as isize, 1), 1.0, &mut gw);
        o0 += rows;
    }
    Array::new(weight.shape().to_vec(), gw)
}

pub(crate) fn channel_sum(grad_out: &Array) -> Array {
    let c = *grad_out.shape().last().unwrap_or(&1);
    let mut acc = vec![0.0; c];
    for chunk in grad_out.data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Array::from_vec(acc)
}

fn volume_dims(op: &'static str, x: &Array) -> Result<[usize; 4], DiffError> {
    match x.shape() {
        &[d, h, w, c] => Ok([d, h, w, c]),
        s => Err(DiffError::shape(op, &[s])),
    }
}

pub(crate) fn upsample(x: &Array, factor: usize) -> Result<Array, DiffError> {
    let [d, h, w, c] = volume_dims("upsample", x)?;
    if factor == 0 {
        return Err(DiffError::shape("upsample", &[x.shape()]));
    }
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = vec![0.0; od * oh * ow * c];
    let src = x.data();
    for z in 0..od {
        for y in 0..oh {
            for xx in 0..ow {
                let i = ((z / factor) * h + y / factor) * w + xx / factor;
                let o = (z * oh + y) * ow + xx;
                out[o * c..(o + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
    }
    Array::new(vec![od, oh, ow, c], out)
}

pub(crate) fn upsample_grad(grad_out: &Array, input_shape: &[usize], factor: usize) -> Array {
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let go = grad_out.shape();
    let (oh, ow) = (go[1], go[2]);
    let mut gx = vec![0.0; input_shape.iter().product()];
    let g = grad_out.data();
    for z in 0..go[0] {
        for y in 0..oh {
            for xx in 0..ow {
                let i = ((z / factor) * h + y / factor) * w + xx / factor;
                let o = (z * oh + y) * ow + xx;
                for ch in 0..c {
                    gx[i * c + ch] += g[o * c + ch];
                }
            }
        }
    }
    Array::new(input_shape.to_vec(), gx).expect("upsample grad shape")
}

pub(crate) fn downsample(x: &Array, factor: usize) -> Result<Array, DiffError> {
    let [d, h, w, c] = volume_dims("downsample", x)?;
    if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(DiffError::shape("downsample", &[x.shape()]));
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = vec![0.0; od * oh * ow * c];
    let src = x.data();
    for z in 0..od {
        for y in 0..oh {
            for xx in 0..ow {
                let i = ((z * factor) * h + y * factor) * w + xx * factor;
                let o = (z * oh + y) * ow + xx;
                out[o * c..(o + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
    }
    Array::new(vec![od, oh, ow, c], out)
}

pub(crate) fn downsample_grad(grad_out: &Array, input_shape: &[usize], factor: usize) -> Array {
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let go = grad_out.shape();
    let (oh, ow) = (go[1], go[2]);
    let mut gx = vec![0.0; input_shape.iter().product()];
    let g = grad_out.data();
    for z in 0..go[0] {
        for y in 0..oh {
            for xx in 0..ow {
                let i = ((z * factor) * h + y * factor) * w + xx * factor;
                let o = (z * oh + y) * ow + xx;
                gx[i * c..(i + 1) * c].copy_from_slice(&g[o * c..(o + 1) * c]);
            }
        }
    }
    Array::new(input_shape.to_vec(), gx).expect("downsample grad shape")
}

/// Maps `[d, h, w, f^3 * c]` to `[f d, f h, f w, c]`: channel block
/// `(a * f + b) * f + e` becomes offset `(a, b, e)` inside each output cell.
fn shuffle_index(shape: &[usize], factor: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let c = shape[3] / (factor * factor * factor);
    let (oh, ow) = (h * factor, w * factor);
    (0..d * h * w).flat_map(move |i| {
        let (x, y, z) = (i % w, (i / w) % h, i / (w * h));
        (0..factor * factor * factor).map(move |blk| {
            let (e, b, a) = (blk % factor, (blk / factor) % factor, blk / (factor * factor));
            let o = ((z * factor + a) * oh + y * factor + b) * ow + x * factor + e;
            ((i * factor * factor * factor + blk) * c, o * c)
        })
    })
}

pub(crate) fn depth_to_space(x: &Array, factor: usize) -> Result<Array, DiffError> {
    let [d, h, w, cc] = volume_dims("depth_to_space", x)?;
    let cube = factor * factor * factor;
    if factor == 0 || cc % cube != 0 {
        return Err(DiffError::shape("depth_to_space", &[x.shape()]));
    }
    let c = cc / cube;
    let mut out = vec![0.0; x.len()];
    for (src, dst) in shuffle_index(x.shape(), factor) {
        out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
    }
    Array::new(vec![d * factor, h * factor, w * factor, c], out)
}

pub(crate) fn depth_to_space_grad(grad_out: &Array, input_shape: &[usize], factor: usize) -> Array {
    let c = input_shape[3] / (factor * factor * factor);
    let mut gx = vec![0.0; grad_out.len()];
    for (src, dst) in shuffle_index(input_shape, factor) {
        gx[src..src + c].copy_from_slice(&grad_out.data()[dst..dst + c]);
    }
    Array::new(input_shape.to_vec(), gx).expect("depth_to_space grad shape")
}

pub(crate) fn matmul(a: &Array, b: &Array) -> Result<Array, DiffError> {
    let bad = || DiffError::shape("matmul", &[a.shape(), b.shape()]);
    let (m, k) = match a.shape() {
        &[m, k] => (m, k),
        _ => return Err(bad()),
    };
    let (k2, n, vector) = match b.shape() {
        &[k2] => (k2, 1, true),
        &[k2, n] => (k2, n, false),
        _ => return Err(bad()),
    };
    if k != k2 {
        return Err(bad());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    let shape = if vector { vec![m] } else { vec![m, n] };
    Array::new(shape, out)
}

/// Returns `(grad_a, grad_b)` for `a · b`.
pub(crate) fn matmul_grad(grad_out: &Array, a: &Array, b: &Array) -> (Array, Array) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if b.rank() == 1 { 1 } else { b.shape()[1] };
    let (ad, bd, g) = (a.data(), b.data(), grad_out.data());
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let grow = &g[i * n..(i + 1) * n];
            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = ad[i * k + p];
            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    (
        Array::new(a.shape().to_vec(), ga).expect("matmul grad a"),
        Array::new(b.shape().to_vec(), gb).expect("matmul grad b"),
    )
}

pub(crate) fn add_channel(x: &Array, bias: &Array) -> Result<Array, DiffError> {
    let c = match (x.shape().last(), bias.shape()) {
        (Some(&c), &[bc]) if c == bc => c,
        _ => return Err(DiffError::shape("add_channel", &[x.shape(), bias.shape()])),
    };
    let mut out = x.data().to_vec();
    for chunk in out.chunks_exact_mut(c) {
        for (o, b) in chunk.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Array::new(x.shape().to_vec(), out)
}

/// Weighted mean binary cross-entropy. With no weights every element counts once.
pub(crate) fn bce(pred: &Array, target: &Array, weight: Option<&Array>) -> Result<f64, DiffError> {
    check_bce(pred, target, weight)?;
    let mut total = 0.0;
    let mut norm = 0.0;
    for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        let w = weight.map_or(1.0, |w| w.data()[i]);
        if w == 0.0 {
            continue;
        }
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total += w * -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        norm += w;
    }
    Ok(if norm > 0.0 { total / norm } else { 0.0 })
}

/// Gradient with respect to `pred`. The clamp is treated as identity so that
/// saturated but wrong predictions keep a useful slope.
pub(crate) fn bce_grad(upstream: f64, pred: &Array, target: &Array, weight: Option<&Array>) -> Array {
    let norm = weight.map_or(pred.len() as f64, Array::sum);
    let mut g = vec![0.0; pred.len()];
    if norm > 0.0 {
        for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
            let w = weight.map_or(1.0, |w| w.data()[i]);
            if w == 0.0 {
                continue;
            }
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            g[i] = upstream * w / norm * (pc - y) / (pc * (1.0 - pc));
        }
    }
    Array::new(pred.shape().to_vec(), g).expect("bce grad shape")
}

fn check_bce(pred: &Array, target: &Array, weight: Option<&Array>) -> Result<(), DiffError> {
    let mismatch = pred.shape() != target.shape() || weight.is_some_and(|w| w.shape() != pred.shape());
    if mismatch {
        let mut shapes = vec![pred.shape(), target.shape()];
        if let Some(w) = weight {
            shapes.push(w.shape());
        }
        return Err(DiffError::shape("bce", &shapes));
    }
    Ok(())
}
