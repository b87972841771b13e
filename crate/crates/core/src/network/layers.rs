//! Forward and backward kernels for the network's building blocks.
//!
//! Feature maps are stored channel-major as `[channel][time][freq]`.

use super::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Fmap<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Fmap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Fmap {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.h, self.w)
    }
}

/// Output rows (or columns) `lo..hi` for which `i + d - pad` stays in `0..n`.
#[inline]
fn valid_range(n: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (n + pad).saturating_sub(d).min(n);
    (lo, hi.max(lo))
}

/// Same-padded 2-D convolution. `weight` is `[cout][cin][k][k]`.
pub(crate) fn conv2d<T: Scalar>(x: &Fmap<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Fmap<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let pad = k / 2;
    let mut out = Fmap::zeros(cout, h, w);
    for oc in 0..cout {
        let plane = &mut out.data[oc * h * w..(oc + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..cin {
            let src = x.plane(ic);
            for dy in 0..k {
                let (y0, y1) = valid_range(h, dy, pad);
                for dx in 0..k {
                    let wv = weight[((oc * cin + ic) * k + dy) * k + dx];
                    let (x0, x1) = valid_range(w, dx, pad);
                    for y in y0..y1 {
                        let sy = y + dy - pad;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + dx - pad..sy * w + x1 + dx - pad];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Fmap<T>,
    weight: &[T],
    grad_out: &Fmap<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    k: usize,
    want_input_grad: bool,
) -> Option<Fmap<T>> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = grad_out.c;
    let pad = k / 2;
    let mut grad_in = want_input_grad.then(|| x.zeros_like());
    for oc in 0..cout {
        let g = grad_out.plane(oc);
        grad_bias[oc] += g.iter().copied().sum::<T>();
        for ic in 0..cin {
            let src = x.plane(ic);
            for dy in 0..k {
                let (y0, y1) = valid_range(h, dy, pad);
                for dx in 0..k {
                    let wi = ((oc * cin + ic) * k + dy) * k + dx;
                    let (x0, x1) = valid_range(w, dx, pad);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = y + dy - pad;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + dx - pad..sy * w + x1 + dx - pad];
                        for (&a, &b) in gr.iter().zip(s) {
                            acc += a * b;
                        }
                    }
                    grad_weight[wi] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let wv = weight[wi];
                        let dst_plane = &mut gi.data[ic * h * w..(ic + 1) * h * w];
                        for y in y0..y1 {
                            let sy = y + dy - pad;
                            let gr = &g[y * w + x0..y * w + x1];
                            let d = &mut dst_plane[sy * w + x0 + dx - pad..sy * w + x1 + dx - pad];
                            for (dv, &gv) in d.iter_mut().zip(gr) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Fmap<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes gradient entries where the rectified activation was not positive.
pub(crate) fn relu_backward<T: Scalar>(activation: &Fmap<T>, grad: &mut Fmap<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling over even-sized maps; returns the pooled map and, per
/// output cell, which of the four inputs won (first maximum on ties).
pub(crate) fn maxpool2<T: Scalar>(x: &Fmap<T>) -> (Fmap<T>, Vec<u8>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c, h2, w2);
    let mut arg = vec![0u8; x.c * h2 * w2];
    for c in 0..x.c {
        let src = x.plane(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let cand = [
                    src[(2 * y) * x.w + 2 * xx],
                    src[(2 * y) * x.w + 2 * xx + 1],
                    src[(2 * y + 1) * x.w + 2 * xx],
                    src[(2 * y + 1) * x.w + 2 * xx + 1],
                ];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(grad_out: &Fmap<T>, arg: &[u8], h: usize, w: usize) -> Fmap<T> {
    let mut g = Fmap::zeros(grad_out.c, h, w);
    let (h2, w2) = (grad_out.h, grad_out.w);
    for c in 0..grad_out.c {
        for y in 0..h2 {
            for x in 0..w2 {
                let o = (c * h2 + y) * w2 + x;
                let a = arg[o] as usize;
                let (sy, sx) = (2 * y + a / 2, 2 * x + a % 2);
                g.data[(c * h + sy) * w + sx] += grad_out.data[o];
            }
        }
    }
    g
}

/// Nearest-neighbour 2× upsampling in both axes.
pub(crate) fn upsample2<T: Scalar>(x: &Fmap<T>) -> Fmap<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Fmap::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(grad_out: &Fmap<T>) -> Fmap<T> {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut g = Fmap::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                g.data[(c * h + y / 2) * w + x / 2] += grad_out.data[(c * grad_out.h + y) * grad_out.w + x];
            }
        }
    }
    g
}

pub(crate) fn concat_channels<T: Scalar>(a: &Fmap<T>, b: &Fmap<T>) -> Fmap<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Fmap {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split_channels<T: Scalar>(x: Fmap<T>, first: usize) -> (Fmap<T>, Fmap<T>) {
    let n = x.h * x.w;
    let mut data = x.data;
    let tail = data.split_off(first * n);
    (
        Fmap {
            c: first,
            h: x.h,
            w: x.w,
            data,
        },
        Fmap {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: tail,
        },
    )
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Weights of one LSTM direction: `w_ih` is `[4H][F]`, `w_hh` is `[4H][H]`,
/// gate order input, forget, cell, output.
pub(crate) struct LstmWeights<'a, T> {
    pub w_ih: &'a [T],
    pub w_hh: &'a [T],
    pub bias: &'a [T],
    pub hidden: usize,
    pub input: usize,
}

/// Per-step cache of one LSTM direction, indexed by processing step.
#[derive(Debug, Clone)]
pub(crate) struct LstmTrace<T> {
    /// gate activations i, f, g, o for each step: `[steps][4H]`
    pub gates: Vec<T>,
    pub cell: Vec<T>,
    pub cell_tanh: Vec<T>,
    pub hidden: Vec<T>,
    pub reverse: bool,
}

/// Runs one direction over `x` (`[T][F]`), writing hidden states into
/// `out` (`[T][out_stride]`) at column `out_offset`.
pub(crate) fn lstm_forward<T: Scalar>(
    wts: &LstmWeights<T>,
    x: &[T],
    steps: usize,
    reverse: bool,
    out: &mut [T],
    out_stride: usize,
    out_offset: usize,
) -> LstmTrace<T> {
    let (hn, f) = (wts.hidden, wts.input);
    let mut trace = LstmTrace {
        gates: vec![T::zero(); steps * 4 * hn],
        cell: vec![T::zero(); steps * hn],
        cell_tanh: vec![T::zero(); steps * hn],
        hidden: vec![T::zero(); steps * hn],
        reverse,
    };
    let mut z = vec![T::zero(); 4 * hn];
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let xt = &x[t * f..(t + 1) * f];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = wts.bias[r];
            for (&w, &v) in wts.w_ih[r * f..(r + 1) * f].iter().zip(xt) {
                acc += w * v;
            }
            if s > 0 {
                let hp = &trace.hidden[(s - 1) * hn..s * hn];
                for (&w, &v) in wts.w_hh[r * hn..(r + 1) * hn].iter().zip(hp) {
                    acc += w * v;
                }
            }
            *zr = acc;
        }
        for j in 0..hn {
            let i = sigmoid(z[j]);
            let fg = sigmoid(z[hn + j]);
            let g = z[2 * hn + j].tanh();
            let o = sigmoid(z[3 * hn + j]);
            let c_prev = if s > 0 { trace.cell[(s - 1) * hn + j] } else { T::zero() };
            let c = fg * c_prev + i * g;
            let tc = c.tanh();
            let h = o * tc;
            let gb = s * 4 * hn;
            trace.gates[gb + j] = i;
            trace.gates[gb + hn + j] = fg;
            trace.gates[gb + 2 * hn + j] = g;
            trace.gates[gb + 3 * hn + j] = o;
            trace.cell[s * hn + j] = c;
            trace.cell_tanh[s * hn + j] = tc;
            trace.hidden[s * hn + j] = h;
            out[t * out_stride + out_offset + j] = h;
        }
    }
    trace
}

pub(crate) struct LstmGrads<'a, T> {
    pub w_ih: &'a mut [T],
    pub w_hh: &'a mut [T],
    pub bias: &'a mut [T],
}

/// Backpropagation through time for one direction. `grad_out` is the
/// gradient with respect to the concatenated output rows; input gradients
/// are accumulated into `grad_x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward<T: Scalar>(
    wts: &LstmWeights<T>,
    trace: &LstmTrace<T>,
    x: &[T],
    steps: usize,
    grad_out: &[T],
    out_stride: usize,
    out_offset: usize,
    grads: &mut LstmGrads<T>,
    grad_x: &mut [T],
) {
    let (hn, f) = (wts.hidden, wts.input);
    let one = T::one();
    let mut dh_next = vec![T::zero(); hn];
    let mut dc_next = vec![T::zero(); hn];
    let mut dz = vec![T::zero(); 4 * hn];
    for s in (0..steps).rev() {
        let t = if trace.reverse { steps - 1 - s } else { s };
        let gb = s * 4 * hn;
        for j in 0..hn {
            let i = trace.gates[gb + j];
            let fg = trace.gates[gb + hn + j];
            let g = trace.gates[gb + 2 * hn + j];
            let o = trace.gates[gb + 3 * hn + j];
            let tc = trace.cell_tanh[s * hn + j];
            let c_prev = if s > 0 { trace.cell[(s - 1) * hn + j] } else { T::zero() };
            let dh = grad_out[t * out_stride + out_offset + j] + dh_next[j];
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o * (one - tc * tc);
            let di = dc * g;
            let dg = dc * i;
            let df = dc * c_prev;
            dc_next[j] = dc * fg;
            dz[j] = di * i * (one - i);
            dz[hn + j] = df * fg * (one - fg);
            dz[2 * hn + j] = dg * (one - g * g);
            dz[3 * hn + j] = d_o * o * (one - o);
        }
        let xt = &x[t * f..(t + 1) * f];
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        let gx = &mut grad_x[t * f..(t + 1) * f];
        for (r, &d) in dz.iter().enumerate() {
            grads.bias[r] += d;
            let wrow = &wts.w_ih[r * f..(r + 1) * f];
            let grow = &mut grads.w_ih[r * f..(r + 1) * f];
            for ((gw, &xv), (gxv, &w)) in grow.iter_mut().zip(xt).zip(gx.iter_mut().zip(wrow)) {
                *gw += d * xv;
                *gxv += d * w;
            }
            if s > 0 {
                let hp = &trace.hidden[(s - 1) * hn..s * hn];
                let wrow = &wts.w_hh[r * hn..(r + 1) * hn];
                let grow = &mut grads.w_hh[r * hn..(r + 1) * hn];
                for ((gw, &hv), (dhn, &w)) in grow.iter_mut().zip(hp).zip(dh_next.iter_mut().zip(wrow)) {
                    *gw += d * hv;
                    *dhn += d * w;
                }
            }
        }
    }
}
