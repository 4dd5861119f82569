//! Reverse-mode tape over the fixed op set used by the 1D U-net.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! borrowed rather than copied onto the tape.

use std::borrow::Cow;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, gemm_tn_into, lane_sum};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Input and its logistic sigmoid.
    Silu(Var, Vec<T>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Upsample(Var),
    Attention {
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        heads: usize,
        q: Vec<T>,
        k: Vec<T>,
        v: Vec<T>,
        probs: Vec<T>,
        o: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

/// Interprets a rank-2 `[C, L]` or rank-3 `[N, C, L]` shape.
fn ncl(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::dim(op, format!("expected [C, L] or [N, C, L], got {shape:?}"))),
    }
}

fn with_ncl(like: &[usize], n: usize, c: usize, l: usize) -> Vec<usize> {
    if like.len() == 2 {
        vec![c, l]
    } else {
        vec![n, c, l]
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Geometry of one strided, padded 1D convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

impl ConvGeom {
    fn source(&self, lo: usize, kk: usize) -> Option<usize> {
        let li = (lo * self.stride + kk) as isize - self.pad as isize;
        (li >= 0 && (li as usize) < self.len).then_some(li as usize)
    }

    /// Output positions `lo..hi` whose tap `kk` lands inside the input
    /// (stride 1 only).
    fn valid(&self, kk: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk).min(self.lout);
        let hi = (self.len + self.pad).saturating_sub(kk).min(self.lout).max(lo);
        (lo, hi)
    }
}

/// Unfolds one item `x` (`[cin, len]`) into columns of `col`, whose rows have
/// stride `ld`; row `c·k + kk`, column `lo` holds the input tap.
fn im2col<T: Real>(x: &[T], g: ConvGeom, col: &mut [T], ld: usize) {
    for c in 0..g.cin {
        let xrow = &x[c * g.len..(c + 1) * g.len];
        for kk in 0..g.k {
            let row = &mut col[(c * g.k + kk) * ld..(c * g.k + kk) * ld + g.lout];
            if g.stride == 1 {
                let (lo, hi) = g.valid(kk);
                row[..lo].fill(T::zero());
                row[hi..].fill(T::zero());
                let src = lo + kk - g.pad;
                row[lo..hi].copy_from_slice(&xrow[src..src + hi - lo]);
            } else {
                for (lo, slot) in row.iter_mut().enumerate() {
                    *slot = g.source(lo, kk).map_or(T::zero(), |li| xrow[li]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
fn col2im<T: Real>(col: &[T], g: ConvGeom, ld: usize, dx: &mut [T]) {
    for c in 0..g.cin {
        let drow = &mut dx[c * g.len..(c + 1) * g.len];
        for kk in 0..g.k {
            let row = &col[(c * g.k + kk) * ld..(c * g.k + kk) * ld + g.lout];
            if g.stride == 1 {
                let (lo, hi) = g.valid(kk);
                let dst = lo + kk - g.pad;
                accumulate(&mut drow[dst..dst + hi - lo], &row[lo..hi]);
            } else {
                for (lo, &v) in row.iter().enumerate() {
                    if let Some(li) = g.source(lo, kk) {
                        drow[li] += v;
                    }
                }
            }
        }
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned input tensor.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a borrowed parameter tensor without copying it.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, len) = ncl("conv1d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::dim(
                "conv1d",
                format!("weight {ws:?} does not match input channels {cin} (axis 1)"),
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.shape(b) != [cout] {
            return Err(Error::dim(
                "conv1d",
                format!("bias {:?} does not match output channels {cout} (axis 0)", self.shape(b)),
            ));
        }
        if stride == 0 || len + 2 * padding < k {
            return Err(Error::dim(
                "conv1d",
                format!("length {len} with padding {padding} too short for kernel {k}"),
            ));
        }
        let lout = (len + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            len,
            k,
            stride,
            pad: padding,
            lout,
        };
        // One GEMM over the whole batch: [cout, cin·k] × [cin·k, n·lout].
        let ld = n * lout;
        let mut col = vec![T::zero(); cin * k * ld];
        let mut tmp = vec![T::zero(); cout * ld];
        let mut out = vec![T::zero(); n * cout * lout];
        {
            let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
            for s in 0..n {
                im2col(&xd[s * cin * len..(s + 1) * cin * len], geom, &mut col[s * lout..], ld);
            }
            gemm_nn(cout, cin * k, ld, wd, &col, &mut tmp);
            for s in 0..n {
                for co in 0..cout {
                    let src = &tmp[co * ld + s * lout..co * ld + (s + 1) * lout];
                    let dst = &mut out[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v + bd[co];
                    }
                }
            }
        }
        let shape = with_ncl(self.shape(x), n, cout, lout);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c, len) = ncl("group_norm", self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", "gamma/beta must have shape [C]"));
        }
        if eps <= T::zero() {
            return Err(Error::Domain("group_norm eps must be positive".into()));
        }
        let per = c / groups * len;
        let m = T::lit(per as f64);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for g in 0..groups {
                let off = s * c * len + g * per;
                let seg = &xd[off..off + per];
                let mean = lane_sum(seg) / m;
                let centred: Vec<T> = seg.iter().map(|&v| v - mean).collect();
                let var = dot(&centred, &centred) / m;
                let r = T::one() / (var + eps).sqrt();
                rstd[s * groups + g] = r;
                for (ci, cs) in centred.chunks_exact(len).enumerate() {
                    let ch = g * (c / groups) + ci;
                    let o = off + ci * len;
                    let (ga, be) = (gd[ch], bd[ch]);
                    for ((h, y), &v) in xhat[o..o + len].iter_mut().zip(&mut out[o..o + len]).zip(cs) {
                        *h = v * r;
                        *y = ga * *h + be;
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let sig: Vec<T> = t.data().iter().map(|&v| sigmoid(v)).collect();
        let out: Vec<T> = t.data().iter().zip(&sig).map(|(&v, &sg)| v * sg).collect();
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::Silu(x, sig))
    }

    /// `x·Wᵀ + b` for `x` of shape `[N, F]` or `[F]`, `W` of shape `[O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, f) = match *xs.as_slice() {
            [f] => (1, f),
            [n, f] => (n, f),
            _ => return Err(Error::dim("linear", format!("input must be rank 1 or 2, got {xs:?}"))),
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != f {
            return Err(Error::dim("linear", format!("weight {ws:?} vs input features {f} (axis 1)")));
        }
        let o = ws[0];
        if self.shape(b) != [o] {
            return Err(Error::dim("linear", format!("bias {:?} vs outputs {o}", self.shape(b))));
        }
        let mut out = vec![T::zero(); n * o];
        for s in 0..n {
            out[s * o..(s + 1) * o].copy_from_slice(self.data(b));
        }
        gemm_nt(n, f, o, self.data(x), self.data(w), &mut out);
        let shape = if xs.len() == 1 { vec![o] } else { vec![n, o] };
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    /// Feature-wise modulation `x·(1 + scale) + shift`, with `scale` and
    /// `shift` of shape `[N, C]` broadcast along the length axis.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, len) = ncl("film", self.shape(x))?;
        let want = [n, c];
        if self.shape(scale) != want || self.shape(shift) != want {
            return Err(Error::dim(
                "film",
                format!(
                    "scale {:?} / shift {:?} must be {want:?}",
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        let (xd, sd, td) = (self.data(x), self.data(scale), self.data(shift));
        let mut out = vec![T::zero(); xd.len()];
        for row in 0..n * c {
            let (a, t) = (T::one() + sd[row], td[row]);
            for i in row * len..(row + 1) * len {
                out[i] = xd[i] * a + t;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Film { x, scale, shift }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    /// Adds `b` of shape `[C, L]` to every batch item of `x` (`[N, C, L]`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, len) = ncl("add_broadcast", self.shape(x))?;
        if self.shape(b) != [c, len] {
            return Err(Error::dim(
                "add_broadcast",
                format!("{:?} cannot broadcast over {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let (xd, bd) = (self.data(x), self.data(b));
        let row = c * len;
        let out: Vec<T> = (0..n * row).map(|i| xd[i] + bd[i % row]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBroadcast(x, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies batch item `i` (leading axis) by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != coeffs.len() {
            return Err(Error::dim(
                "scale_rows",
                format!("{} coefficients for leading axis of {shape:?}", coeffs.len()),
            ));
        }
        let row = self.value(x).len() / coeffs.len();
        let xd = self.data(x);
        let out: Vec<T> = xd.iter().enumerate().map(|(i, &v)| v * coeffs[i / row]).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(x, coeffs.to_vec())))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, la) = ncl("concat_channels", self.shape(a))?;
        let (nb, cb, lb) = ncl("concat_channels", self.shape(b))?;
        if na != nb || la != lb || self.shape(a).len() != self.shape(b).len() {
            return Err(Error::dim(
                "concat_channels",
                format!("{:?} vs {:?} (batch/length axes)", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for s in 0..na {
            out.extend_from_slice(&ad[s * ca * la..(s + 1) * ca * la]);
            out.extend_from_slice(&bd[s * cb * lb..(s + 1) * cb * lb]);
        }
        let shape = with_ncl(self.shape(a), na, ca + cb, la);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (n, c, len) = ncl("slice_channels", self.shape(x))?;
        if start + count > c {
            return Err(Error::dim(
                "slice_channels",
                format!("channels {start}..{} out of {c}", start + count),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * count * len);
        for s in 0..n {
            let off = s * c * len + start * len;
            out.extend_from_slice(&xd[off..off + count * len]);
        }
        let shape = with_ncl(self.shape(x), n, count, len);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }))
    }

    /// Nearest-neighbour ×2 upsampling cropped to `out_len`.
    pub fn upsample_nearest(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let (n, c, len) = ncl("upsample_nearest", self.shape(x))?;
        if out_len > 2 * len || out_len == 0 {
            return Err(Error::dim(
                "upsample_nearest",
                format!("cannot upsample length {len} to {out_len}"),
            ));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * out_len];
        for row in 0..n * c {
            for l in 0..out_len {
                out[row * out_len + l] = xd[row * len + l / 2];
            }
        }
        let shape = with_ncl(self.shape(x), n, c, out_len);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample(x)))
    }

    /// Multi-head scaled dot-product self-attention over the length axis.
    /// Projections are channel-mixing `[C, C]` matrices without bias.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var, heads: usize) -> Result<Var> {
        let (n, c, len) = ncl("self_attention", self.shape(x))?;
        for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
            if self.shape(w) != [c, c] {
                return Err(Error::dim(
                    "self_attention",
                    format!("{name} has shape {:?}, expected [{c}, {c}]", self.shape(w)),
                ));
            }
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim("self_attention", format!("{heads} heads do not divide {c} channels")));
        }
        let dh = c / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let cl = c * len;
        let xd = self.data(x);
        let mut q = vec![T::zero(); n * cl];
        let mut k = vec![T::zero(); n * cl];
        let mut v = vec![T::zero(); n * cl];
        let mut o = vec![T::zero(); n * cl];
        let mut probs = vec![T::zero(); n * heads * len * len];
        let mut out = vec![T::zero(); n * cl];
        for s in 0..n {
            let xs = &xd[s * cl..(s + 1) * cl];
            let r = s * cl..(s + 1) * cl;
            gemm_nn(c, c, len, self.data(wq), xs, &mut q[r.clone()]);
            gemm_nn(c, c, len, self.data(wk), xs, &mut k[r.clone()]);
            gemm_nn(c, c, len, self.data(wv), xs, &mut v[r.clone()]);
            for h in 0..heads {
                let hr = s * cl + h * dh * len..s * cl + (h + 1) * dh * len;
                let p = &mut probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
                gemm_tn(len, dh, len, &q[hr.clone()], &k[hr.clone()], p);
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                    let mut z = T::zero();
                    for e in row.iter_mut() {
                        *e = (*e * scale - mx).exp();
                        z += *e;
                    }
                    for e in row.iter_mut() {
                        *e = *e / z;
                    }
                }
                gemm_nt(dh, len, len, &v[hr.clone()], p, &mut o[hr]);
            }
            gemm_nn(c, c, len, self.data(wo), &o[r.clone()], &mut out[r]);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                x,
                wq,
                wk,
                wv,
                wo,
                heads,
                q,
                k,
                v,
                probs,
                o,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Reverse sweep from `output` seeded with `seed`. Every leaf on the tape
    /// receives a gradient (zero if it does not influence `output`).
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let count = self.nodes.len();
        if count == 0 {
            return Ok(Gradients { grads: Vec::new() });
        }
        if output.0 >= count {
            return Err(Error::dim("backward", format!("output node {} not on tape", output.0)));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::dim(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        grads[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(&node.op, &g, &mut grads)?;
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(d) => Tensor::new(shape, d).expect("gradient matches leaf shape"),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backprop(&self, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (n, cin, len) = ncl("conv1d", self.shape(*x))?;
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let lout = g.len() / (n * cout);
                let geom = ConvGeom {
                    cin,
                    len,
                    k,
                    stride: *stride,
                    pad: *padding,
                    lout,
                };
                let ld = n * lout;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut col = vec![T::zero(); cin * k * ld];
                let mut gt = vec![T::zero(); cout * ld];
                for s in 0..n {
                    im2col(&xd[s * cin * len..(s + 1) * cin * len], geom, &mut col[s * lout..], ld);
                    for co in 0..cout {
                        gt[co * ld + s * lout..co * ld + (s + 1) * lout]
                            .copy_from_slice(&g[(s * cout + co) * lout..(s * cout + co + 1) * lout]);
                    }
                }
                let mut dw = vec![T::zero(); wd.len()];
                gemm_nt(cout, ld, cin * k, &gt, &col, &mut dw);
                let db: Vec<T> = (0..cout).map(|co| lane_sum(&gt[co * ld..(co + 1) * ld])).collect();
                let mut dcol = col;
                gemm_tn_into(cin * k, cout, ld, wd, &gt, &mut dcol);
                let mut dx = vec![T::zero(); xd.len()];
                for s in 0..n {
                    col2im(&dcol[s * lout..], geom, ld, &mut dx[s * cin * len..(s + 1) * cin * len]);
                }
                give(grads, *x, dx);
                give(grads, *w, dw);
                give(grads, *b, db);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c, len) = ncl("group_norm", self.shape(*x))?;
                let cg = c / groups;
                let per = cg * len;
                let m = T::lit(per as f64);
                let gd = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                let mut dxhat = vec![T::zero(); per];
                for s in 0..n {
                    for grp in 0..*groups {
                        let off = s * c * len + grp * per;
                        for ch in 0..cg {
                            let cc = grp * cg + ch;
                            let r = off + ch * len..off + (ch + 1) * len;
                            dgamma[cc] += dot(&g[r.clone()], &xhat[r.clone()]);
                            dbeta[cc] += lane_sum(&g[r.clone()]);
                            for (i, idx) in r.enumerate() {
                                dxhat[ch * len + i] = g[idx] * gd[cc];
                            }
                        }
                        let xh = &xhat[off..off + per];
                        let mean_d = lane_sum(&dxhat) / m;
                        let mean_dx = dot(&dxhat, xh) / m;
                        let r = rstd[s * groups + grp];
                        for i in 0..per {
                            dx[off + i] = r * (dxhat[i] - mean_d - xh[i] * mean_dx);
                        }
                    }
                }
                give(grads, *x, dx);
                give(grads, *gamma, dgamma);
                give(grads, *beta, dbeta);
            }
            Op::Silu(x, sig) => {
                let xd = self.data(*x);
                let dx: Vec<T> = g
                    .iter()
                    .zip(xd)
                    .zip(sig)
                    .map(|((&gi, &xi), &sg)| gi * sg * (T::one() + xi * (T::one() - sg)))
                    .collect();
                give(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, f) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
                let o = self.shape(*w)[0];
                let mut dx = vec![T::zero(); n * f];
                gemm_nn(n, o, f, g, self.data(*w), &mut dx);
                let mut dw = vec![T::zero(); o * f];
                gemm_tn(o, n, f, g, self.data(*x), &mut dw);
                let mut db = vec![T::zero(); o];
                for s in 0..n {
                    for j in 0..o {
                        db[j] += g[s * o + j];
                    }
                }
                give(grads, *x, dx);
                give(grads, *w, dw);
                give(grads, *b, db);
            }
            Op::Film { x, scale, shift } => {
                let (n, c, len) = ncl("film", self.shape(*x))?;
                let xd = self.data(*x);
                let sd = self.data(*scale);
                let mut dx = vec![T::zero(); xd.len()];
                let mut ds = vec![T::zero(); n * c];
                let mut dt = vec![T::zero(); n * c];
                for row in 0..n * c {
                    let r = row * len..(row + 1) * len;
                    ds[row] = dot(&g[r.clone()], &xd[r.clone()]);
                    dt[row] = lane_sum(&g[r.clone()]);
                    let a = T::one() + sd[row];
                    for i in r {
                        dx[i] = g[i] * a;
                    }
                }
                give(grads, *x, dx);
                give(grads, *scale, ds);
                give(grads, *shift, dt);
            }
            Op::Add(a, b) => {
                give(grads, *a, g.to_vec());
                give(grads, *b, g.to_vec());
            }
            Op::AddBroadcast(x, b) => {
                give(grads, *x, g.to_vec());
                let buf = self.grad_buf(grads, *b);
                let row = buf.len();
                for chunk in g.chunks_exact(row) {
                    accumulate(buf, chunk);
                }
            }
            Op::Sub(a, b) => {
                give(grads, *a, g.to_vec());
                axpy(-T::one(), g, self.grad_buf(grads, *b));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let da: Vec<T> = g.iter().zip(bd).map(|(&u, &v)| u * v).collect();
                let db: Vec<T> = g.iter().zip(ad).map(|(&u, &v)| u * v).collect();
                give(grads, *a, da);
                give(grads, *b, db);
            }
            Op::Scale(x, c) => axpy(*c, g, self.grad_buf(grads, *x)),
            Op::ScaleRows(x, coeffs) => {
                let row = g.len() / coeffs.len();
                let buf = self.grad_buf(grads, *x);
                for (i, c) in coeffs.iter().enumerate() {
                    axpy(*c, &g[i * row..(i + 1) * row], &mut buf[i * row..(i + 1) * row]);
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, len) = ncl("concat_channels", self.shape(*a))?;
                let (_, cb, _) = ncl("concat_channels", self.shape(*b))?;
                let (sa, sb) = (ca * len, cb * len);
                {
                    let buf = self.grad_buf(grads, *a);
                    for s in 0..n {
                        accumulate(&mut buf[s * sa..(s + 1) * sa], &g[s * (sa + sb)..s * (sa + sb) + sa]);
                    }
                }
                let buf = self.grad_buf(grads, *b);
                for s in 0..n {
                    accumulate(&mut buf[s * sb..(s + 1) * sb], &g[s * (sa + sb) + sa..(s + 1) * (sa + sb)]);
                }
            }
            Op::Slice { x, start } => {
                let (n, c, len) = ncl("slice_channels", self.shape(*x))?;
                let count = g.len() / (n * len);
                let buf = self.grad_buf(grads, *x);
                for s in 0..n {
                    let off = s * c * len + start * len;
                    accumulate(&mut buf[off..off + count * len], &g[s * count * len..(s + 1) * count * len]);
                }
            }
            Op::Upsample(x) => {
                let (n, c, len) = ncl("upsample_nearest", self.shape(*x))?;
                let out_len = g.len() / (n * c);
                let buf = self.grad_buf(grads, *x);
                for row in 0..n * c {
                    for l in 0..out_len {
                        buf[row * len + l / 2] += g[row * out_len + l];
                    }
                }
            }
            Op::Attention {
                x,
                wq,
                wk,
                wv,
                wo,
                heads,
                q,
                k,
                v,
                probs,
                o,
            } => {
                let (n, c, len) = ncl("self_attention", self.shape(*x))?;
                let dh = c / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let cl = c * len;
                let xd = self.data(*x);
                let mut dwq = vec![T::zero(); c * c];
                let mut dwk = vec![T::zero(); c * c];
                let mut dwv = vec![T::zero(); c * c];
                let mut dwo = vec![T::zero(); c * c];
                let mut dx = vec![T::zero(); xd.len()];
                let mut d_o = vec![T::zero(); cl];
                let mut dq = vec![T::zero(); cl];
                let mut dk = vec![T::zero(); cl];
                let mut dv = vec![T::zero(); cl];
                let mut da = vec![T::zero(); len * len];
                for s in 0..n {
                    let r = s * cl..(s + 1) * cl;
                    let gs = &g[r.clone()];
                    let xs = &xd[r.clone()];
                    gemm_nt(c, len, c, gs, &o[r.clone()], &mut dwo);
                    d_o.fill(T::zero());
                    gemm_tn(c, c, len, self.data(*wo), gs, &mut d_o);
                    dq.fill(T::zero());
                    dk.fill(T::zero());
                    dv.fill(T::zero());
                    for h in 0..*heads {
                        let hr = h * dh * len..(h + 1) * dh * len;
                        let p = &probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
                        let vh = &v[s * cl + hr.start..s * cl + hr.end];
                        let qh = &q[s * cl + hr.start..s * cl + hr.end];
                        let kh = &k[s * cl + hr.start..s * cl + hr.end];
                        da.fill(T::zero());
                        gemm_tn(len, dh, len, &d_o[hr.clone()], vh, &mut da);
                        gemm_nn(dh, len, len, &d_o[hr.clone()], p, &mut dv[hr.clone()]);
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut da[i * len..(i + 1) * len];
                            let inner = dot(pr, dr);
                            for j in 0..len {
                                dr[j] = pr[j] * (dr[j] - inner) * scale;
                            }
                        }
                        gemm_nt(dh, len, len, kh, &da, &mut dq[hr.clone()]);
                        gemm_nn(dh, len, len, qh, &da, &mut dk[hr.clone()]);
                    }
                    gemm_nt(c, len, c, &dq, xs, &mut dwq);
                    gemm_nt(c, len, c, &dk, xs, &mut dwk);
                    gemm_nt(c, len, c, &dv, xs, &mut dwv);
                    let dxs = &mut dx[r];
                    gemm_tn(c, c, len, self.data(*wq), &dq, dxs);
                    gemm_tn(c, c, len, self.data(*wk), &dk, dxs);
                    gemm_tn(c, c, len, self.data(*wv), &dv, dxs);
                }
                give(grads, *x, dx);
                give(grads, *wq, dwq);
                give(grads, *wk, dwk);
                give(grads, *wv, dwv);
                give(grads, *wo, dwo);
            }
            Op::Sum(x) => {
                let buf = self.grad_buf(grads, *x);
                for e in buf.iter_mut() {
                    *e += g[0];
                }
            }
            Op::Mean(x) => {
                let buf = self.grad_buf(grads, *x);
                let d = g[0] / T::lit(buf.len() as f64);
                for e in buf.iter_mut() {
                    *e += d;
                }
            }
        }
        Ok(())
    }
}

/// Adds `d` into the gradient slot of `v`, taking ownership when it is empty.
fn give<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => accumulate(buf, &d),
        slot => *slot = Some(d),
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
impl Var {
    pub(crate) fn default_for_tests() -> Self {
        Var(0)
    }
}
