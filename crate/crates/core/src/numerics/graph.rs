//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes in exact reverse order. Tensors are laid out channel-last, so a
//! feature map `[h, w, c]` and a token matrix `[h*w, c]` share storage order.

use crate::error::{Error, Result};
use crate::spectral::fft;

use super::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Real/imaginary pair of graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    frac: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, T),
    MulConst(usize, Vec<T>),
    AddBias(usize, usize),
    Relu(usize),
    Softmax(usize),
    Reshape(usize),
    ConcatLast(Vec<usize>),
    SliceLast { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    Resize {
        a: usize,
        rows: Vec<Lerp>,
        cols: Vec<Lerp>,
        in_w: usize,
        c: usize,
    },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    CrossEntropy { logits: usize, target: Vec<usize>, probs: Vec<T> },
    Sum(usize),
    Mean(usize),
    Dfft2 { a: usize, h: usize, w: usize, c: usize },
    Idfft2 { a: usize, h: usize, w: usize, c: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax_rows",
            Op::Reshape(..) => "reshape",
            Op::ConcatLast(..) => "concat_channels",
            Op::SliceLast { .. } => "slice_channels",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Resize { .. } => "bilinear_resize",
            Op::Conv2d { .. } => "conv2d",
            Op::CrossEntropy { .. } => "cross_entropy_loss",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dfft2 { .. } => "dfft2",
            Op::Idfft2 { .. } => "idfft2",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded sequence of executed ops.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Largest imaginary residue `idfft2` tolerates before reporting an
/// upstream inconsistency.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Sign pattern of every relu input, used to detect finite-difference
    /// probes that straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a].value.data().iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("{what} must be rank 2, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dims differ: {:?}{} · {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let sa = if ta { (1, m as isize) } else { (k as isize, 1) };
        let sb = if tb { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            sa,
            self.value(b).data(),
            sb,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::c(factor);
        let v = self.value(a).map(|x| x * f);
        self.push(v, Op::Scale(a.0, f), &[a.0])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, k: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != k.shape() {
            return Err(Error::dim(format!(
                "mul_const: shape {:?} vs {:?}",
                self.shape(a),
                k.shape()
            )));
        }
        let v = self.value(a).zip_map(k, |x, y| x * y)?;
        self.push(v, Op::MulConst(a.0, k.data().to_vec()), &[a.0])
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::dim(format!(
                "bias of shape {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            for (y, &bb) in row.iter_mut().zip(&bias) {
                *y = *y + bb;
            }
        }
        self.push(v, Op::AddBias(x.0, b.0), &[x.0, b.0])
    }

    /// `x·W + b` on `[n, in]` rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a.0), &[a.0])
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if n == 0 {
            return Err(Error::dim("softmax over an empty row"));
        }
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(v, Op::Softmax(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a.0), &[a.0])
    }

    /// Concatenate along the last (channel) axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let lead = lead.to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat_channels: leading extents {:?} vs {:?}",
                    &s[..s.len() - 1],
                    lead
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, out)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        self.push(v, Op::ConcatLast(ids.clone()), &ids)
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().unwrap();
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::SliceLast { a: a.0, start }, &[a.0])
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat_rows: trailing extents {:?} vs {:?}",
                    &s[1..],
                    tail
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        self.push(v, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::dim(format!(
                "row slice {start}..{} of {}",
                start + len,
                s[0]
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::SliceRows { a: a.0, start }, &[a.0])
    }

    /// Bilinear interpolation of `[h, w, c]` to `[out_h, out_w, c]` with
    /// half-pixel centers (align_corners = false).
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = match *self.shape(a) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim(format!("resize expects [h, w, c], got {s:?}"))),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("resize target extent must be positive"));
        }
        let rows = lerp_table(h, out_h);
        let cols = lerp_table(w, out_w);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); out_h * out_w * c];
        for (oy, ry) in rows.iter().enumerate() {
            let fy = T::c(ry.frac);
            for (ox, rx) in cols.iter().enumerate() {
                let fx = T::c(rx.frac);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let p00 = (ry.i0 * w + rx.i0) * c;
                let p01 = (ry.i0 * w + rx.i1) * c;
                let p10 = (ry.i1 * w + rx.i0) * c;
                let p11 = (ry.i1 * w + rx.i1) * c;
                let o = (oy * out_w + ox) * c;
                for ch in 0..c {
                    out[o + ch] = w00 * src[p00 + ch]
                        + w01 * src[p01 + ch]
                        + w10 * src[p10 + ch]
                        + w11 * src[p11 + ch];
                }
            }
        }
        let v = Tensor::new([out_h, out_w, c], out)?;
        self.push(
            v,
            Op::Resize {
                a: a.0,
                rows,
                cols,
                in_w: w,
                c,
            },
            &[a.0],
        )
    }

    /// 2D convolution of `[h, w, cin]` with a `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::param("conv2d stride must be at least 1"));
        }
        let (h, w, cin) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim(format!("conv2d input must be [h, w, c], got {s:?}"))),
        };
        let (kh, kw, kc, cout) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(Error::dim(format!(
                    "conv2d kernel must be [kh, kw, cin, cout], got {s:?}"
                )))
            }
        };
        if kc != cin {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} input channels, input has {cin}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.ho * geom.wo;
        let kdim = kh * kw * cin;
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            kdim,
            cout,
            T::one(),
            &cols,
            (kdim as isize, 1),
            self.value(kernel).data(),
            (cout as isize, 1),
            T::zero(),
            &mut out,
        );
        let v = Tensor::new([geom.ho, geom.wo, cout], out)?;
        self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: kernel.0,
                geom,
            },
            &[x.0, kernel.0],
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`; logits are
    /// `[..., K]` with one target per leading position.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let k = *self.shape(logits).last().unwrap();
        let rows = self.value(logits).len() / k;
        if target.len() != rows {
            return Err(Error::dim(format!(
                "cross entropy: {rows} logit rows but {} targets",
                target.len()
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= k) {
            return Err(Error::Data(format!(
                "class id {bad} out of range for {k} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(k).zip(target) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += (lse - row[t]).f64();
            softmax_in_place(row);
        }
        let v = Tensor::scalar(T::c(total / rows as f64));
        self.push(
            v,
            Op::CrossEntropy {
                logits: logits.0,
                target: target.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let v = Tensor::scalar(self.value(a).sum() / T::c(n as f64));
        self.push(v, Op::Mean(a.0), &[a.0])
    }

    /// Orthonormal per-channel 2D DFT of `[h, w, c]` in centered layout.
    pub fn dfft2(&mut self, a: Var) -> Result<CVar> {
        let (h, w, c) = match *self.shape(a) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim(format!("dfft2 expects [h, w, c], got {s:?}"))),
        };
        let (re, im) = fft::forward_centered(self.value(a).data(), None, h, w, c);
        let mut packed = re;
        packed.extend(im);
        let v = Tensor::new([2, h, w, c], packed)?;
        let p = self.push(v, Op::Dfft2 { a: a.0, h, w, c }, &[a.0])?;
        let re = self.slice_rows(p, 0, 1)?;
        let re = self.reshape(re, [h, w, c])?;
        let im = self.slice_rows(p, 1, 1)?;
        let im = self.reshape(im, [h, w, c])?;
        Ok(CVar { re, im })
    }

    /// Inverse of [`Graph::dfft2`], keeping the real part. Fails when the
    /// discarded imaginary part exceeds [`IMAG_RESIDUE_LIMIT`].
    pub fn idfft2(&mut self, z: CVar) -> Result<Var> {
        self.same_shape(z.re, z.im, "idfft2 re/im")?;
        let (h, w, c) = match *self.shape(z.re) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim(format!("idfft2 expects [h, w, c], got {s:?}"))),
        };
        let re = self.reshape(z.re, [1, h, w, c])?;
        let im = self.reshape(z.im, [1, h, w, c])?;
        let p = self.concat_rows(&[re, im])?;
        let n = h * w * c;
        let data = self.value(p).data();
        let (out, resid) = fft::inverse_centered(&data[..n], &data[n..], h, w, c);
        let residue = resid.iter().map(|x| x.f64().abs()).fold(0.0, f64::max);
        if residue > IMAG_RESIDUE_LIMIT {
            return Err(Error::Numerical(format!(
                "idfft2 imaginary residue {residue:.3e} exceeds {IMAG_RESIDUE_LIMIT:e}"
            )));
        }
        let v = Tensor::new([h, w, c], out)?;
        self.push(v, Op::Idfft2 { a: p.0, h, w, c }, &[p.0])
    }

    /// Reverse-mode gradients of a single-element `loss` with respect to
    /// every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], i: usize) -> Option<&'a mut Vec<T>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (mi, ki, ni) = (m as isize, k as isize, n as isize);
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                if let Some(ga) = self.slot(grads, a) {
                    if !ta {
                        // dA[m×k] = dC · op(b)ᵀ
                        let sb = if tb { (ki, 1) } else { (1, ni) };
                        T::gemm(m, n, k, T::one(), g, (ni, 1), bv, sb, T::one(), ga);
                    } else {
                        // dA[k×m] = op(b) · dCᵀ
                        let sb = if tb { (1, ki) } else { (ni, 1) };
                        T::gemm(k, n, m, T::one(), bv, sb, g, (1, ni), T::one(), ga);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    if !tb {
                        // dB[k×n] = op(a)ᵀ · dC
                        let sa = if ta { (mi, 1) } else { (1, ki) };
                        T::gemm(k, m, n, T::one(), av, sa, g, (ni, 1), T::one(), gb);
                    } else {
                        // dB[n×k] = dCᵀ · op(a)
                        let sa = if ta { (1, mi) } else { (ki, 1) };
                        T::gemm(n, m, k, T::one(), g, (1, ni), av, sa, T::one(), gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s * f;
                    }
                }
            }
            Op::MulConst(a, k) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &kk) in ga.iter_mut().zip(g).zip(k) {
                        *d = *d + s * kk;
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Relu(a) => {
                let inp = self.nodes[a].value.data();
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(inp) {
                        if x > T::zero() {
                            *d = *d + s;
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(ga) = self.slot(grads, a) {
                    for ((drow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gg, &yy)| gg * yy).sum();
                        for ((d, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + yy * (gg - dot);
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
            }
            Op::ConcatLast(ids) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.len() / total;
                let mut offset = 0;
                for &id in ids {
                    let w = *self.nodes[id].value.shape().last().unwrap();
                    if let Some(gi) = self.slot(grads, id) {
                        for r in 0..rows {
                            add_into(
                                &mut gi[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceLast { a, start } => {
                let len = *node.value.shape().last().unwrap();
                let c = *self.nodes[a].value.shape().last().unwrap();
                if let Some(ga) = self.slot(grads, a) {
                    for (drow, grow) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut drow[start..start + len], grow);
                    }
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &id in ids {
                    let n = self.nodes[id].value.len();
                    if let Some(gi) = self.slot(grads, id) {
                        add_into(gi, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { a, start } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                if let Some(ga) = self.slot(grads, a) {
                    add_into(&mut ga[start * inner..start * inner + g.len()], g);
                }
            }
            Op::Resize {
                a,
                rows,
                cols,
                in_w,
                c,
            } => {
                let (w, c) = (*in_w, *c);
                if let Some(ga) = self.slot(grads, *a) {
                    let out_w = cols.len();
                    for (oy, ry) in rows.iter().enumerate() {
                        let fy = T::c(ry.frac);
                        for (ox, rx) in cols.iter().enumerate() {
                            let fx = T::c(rx.frac);
                            let taps = [
                                ((ry.i0 * w + rx.i0) * c, (T::one() - fy) * (T::one() - fx)),
                                ((ry.i0 * w + rx.i1) * c, (T::one() - fy) * fx),
                                ((ry.i1 * w + rx.i0) * c, fy * (T::one() - fx)),
                                ((ry.i1 * w + rx.i1) * c, fy * fx),
                            ];
                            let o = (oy * out_w + ox) * c;
                            for (p, wt) in taps {
                                for ch in 0..c {
                                    ga[p + ch] = ga[p + ch] + wt * g[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let rows = geom.ho * geom.wo;
                let kdim = geom.kh * geom.kw * geom.cin;
                let cout = geom.cout as isize;
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[w].value.data();
                let need_x = self.nodes[x].requires_grad;
                if let Some(gw) = self.slot(grads, w) {
                    let cols = im2col(xv, &geom);
                    // dW[kdim×cout] = colsᵀ · dOut
                    T::gemm(
                        kdim,
                        rows,
                        geom.cout,
                        T::one(),
                        &cols,
                        (1, kdim as isize),
                        g,
                        (cout, 1),
                        T::one(),
                        gw,
                    );
                }
                if need_x {
                    let mut dcols = vec![T::zero(); rows * kdim];
                    // dCols[rows×kdim] = dOut · Wᵀ
                    T::gemm(
                        rows,
                        geom.cout,
                        kdim,
                        T::one(),
                        g,
                        (cout, 1),
                        wv,
                        (1, cout),
                        T::zero(),
                        &mut dcols,
                    );
                    let gx = self.slot(grads, x).unwrap();
                    col2im_add(&dcols, &geom, gx);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let k = probs.len() / target.len();
                let scale = g[0] / T::c(target.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((drow, prow), &t) in gl.chunks_mut(k).zip(probs.chunks(k)).zip(target) {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let y = if j == t { T::one() } else { T::zero() };
                            *d = *d + (p - y) * scale;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                let n = T::c(self.nodes[a].value.len() as f64);
                if let Some(ga) = self.slot(grads, a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0] / n;
                    }
                }
            }
            &Op::Dfft2 { a, h, w, c } => {
                // Adjoint of the unitary centered DFT is its inverse.
                if let Some(ga) = self.slot(grads, a) {
                    let n = h * w * c;
                    let (re, _) = fft::inverse_centered(&g[..n], &g[n..], h, w, c);
                    add_into(ga, &re);
                }
            }
            &Op::Idfft2 { a, h, w, c } => {
                if let Some(ga) = self.slot(grads, a) {
                    let n = h * w * c;
                    let (re, im) = fft::forward_centered(g, None, h, w, c);
                    add_into(&mut ga[..n], &re);
                    add_into(&mut ga[n..], &im);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(d) => Tensor::new(g.shape(v).to_vec(), d.to_vec()).unwrap(),
            None => Tensor::zeros(g.shape(v).to_vec()),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

fn lerp_table(n_in: usize, n_out: usize) -> Vec<Lerp> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Lerp { i0, i1, frac }
        })
        .collect()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kdim = g.kh * g.kw * g.cin;
    let mut cols = vec![T::zero(); g.ho * g.wo * kdim];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let kdim = g.kh * g.kw * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dcols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    add_into(&mut dx[dst..dst + g.cin], &row[src..src + g.cin]);
                }
            }
        }
    }
}
