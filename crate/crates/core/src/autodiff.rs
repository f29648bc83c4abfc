//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every op computes its value eagerly
//! and records what the backward pass needs. Nodes are created in
//! topological order, so [`Graph::backward`] walks the tape in reverse.
//!
//! Layout conventions: feature maps are `(B, C, H, W)` or `(B, C, L)`,
//! per-channel vectors are `(B, C)`, dense activations are `(B, F)`.

use crate::scalar::{cst, Scalar};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over `(B, C, H, W)` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Affine { x: Var, scale: T },
    AddChannel { x: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Var, geom: ConvGeom, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Modulate { x: Var, scale: Var, shift: Var },
    Glu { x: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    Reshape { x: Var },
    Upsample2 { x: Var },
    CropRows { x: Var },
    Concat1 { xs: Vec<Var> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: one optional gradient per node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(g.value(v).shape()),
        }
    }

    pub fn take(&mut self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Per-(batch, channel) view of a `(B, C, ...)` shape: returns `(B, C, S)`.
fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter list as leaves, trainable or frozen.
    pub fn bind(&mut self, tensors: &[Tensor<T>], trainable: bool) -> Vec<Var> {
        tensors.iter().map(|t| self.push(t.clone(), Op::Leaf, trainable)).collect()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `scale * x + offset`, with `offset` a constant of the same shape.
    pub fn affine(&mut self, x: Var, scale: T, offset: Option<&Tensor<T>>) -> Var {
        let mut value = self.value(x).map(|v| v * scale);
        if let Some(o) = offset {
            value.axpy(T::one(), o);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    /// Broadcast-adds a `(B, C)` tensor over the trailing axes of `x`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x);
        let (bn, c, s) = bcs(xs.shape());
        assert_eq!(self.value(b).shape(), &[bn, c], "add_channel shape");
        let bd = self.value(b).data();
        let mut out = xs.clone();
        for (row, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let add = bd[row];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddChannel { x, b }, rg)
    }

    /// 2-D cross-correlation. `w` is `(cout, cin, kh, kw)`, `bias` is `(cout)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (B,C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (O,I,kh,kw)");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            cin: ws[1],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            h: xs[2],
            w: xs[3],
        };
        let b = xs[0];
        let (k, n) = (geom.k(), geom.n());
        let mut cols = vec![T::zero(); b * k * n];
        let xd = self.value(x).data();
        let per_in = geom.cin * geom.h * geom.w;
        for bi in 0..b {
            im2col(&xd[bi * per_in..(bi + 1) * per_in], &geom, &mut cols[bi * k * n..(bi + 1) * k * n]);
        }
        let mut out = vec![T::zero(); b * geom.cout * n];
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        for bi in 0..b {
            let o = &mut out[bi * geom.cout * n..(bi + 1) * geom.cout * n];
            for (co, row) in o.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[co]);
            }
            gemm(geom.cout, k, n, T::one(), wd, false, &cols[bi * k * n..], false, T::one(), o);
        }
        let value = Tensor::new(vec![b, geom.cout, geom.out_h(), geom.out_w()], out)
            .expect("conv output shape");
        let rg = self.rg(&[x, w, bias]);
        self.push(value, Op::Conv2d { x, w, bias, geom, cols }, rg)
    }

    /// 1-D convolution over `(B, C, L)` with stride 1 and symmetric padding.
    /// `w` is `(cout, cin, 1, k)`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, pad: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "conv1d input must be (B,C,L)");
        let x4 = self.reshape(x, &[s[0], s[1], 1, s[2]]);
        let y4 = self.conv2d(x4, w, bias, (1, 1), (0, pad));
        let ys = self.value(y4).shape().to_vec();
        self.reshape(y4, &[ys[0], ys[1], ys[3]])
    }

    /// `x (B, in) · wᵀ + b` with `w (out, in)` and `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs[1], ws[1], "linear input width");
        let (bn, din, dout) = (xs[0], xs[1], ws[0]);
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(bn * dout);
        for _ in 0..bn {
            out.extend_from_slice(bd);
        }
        gemm(bn, din, dout, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let value = Tensor::new(vec![bn, dout], out).expect("linear shape");
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let xs = self.value(x);
        let (bn, c, s) = bcs(xs.shape());
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let n = c / groups * s;
        let eps = cst::<T>(NORM_EPS);
        let nt = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); bn * groups];
        for (gi, (src, dst)) in xs.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = src.iter().fold(T::zero(), |a, &v| a + v) / nt;
            let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), xhat.clone()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::GroupNorm { x, groups, xhat, inv_std }, rg)
    }

    /// `x * (1 + scale) + shift` with `(B, C)` modulation broadcast over the rest.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.value(x);
        let (bn, c, s) = bcs(xs.shape());
        assert_eq!(self.value(scale).shape(), &[bn, c], "modulate scale shape");
        assert_eq!(self.value(shift).shape(), &[bn, c], "modulate shift shape");
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = xs.clone();
        for (row, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let (a, b) = (T::one() + sc[row], sh[row]);
            chunk.iter_mut().for_each(|v| *v = *v * a + b);
        }
        let rg = self.rg(&[x, scale, shift]);
        self.push(out, Op::Modulate { x, scale, shift }, rg)
    }

    /// Gated linear unit over the channel axis: `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (bn, c2, s) = bcs(xs.shape());
        assert!(c2 % 2 == 0, "glu needs an even channel count");
        let c = c2 / 2;
        let d = xs.data();
        let mut out = Vec::with_capacity(bn * c * s);
        for bi in 0..bn {
            let base = bi * c2 * s;
            for i in 0..c * s {
                out.push(d[base + i] * sigmoid(d[base + c * s + i]));
            }
        }
        let mut shape = xs.shape().to_vec();
        shape[1] = c;
        let value = Tensor::new(shape, out).expect("glu shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Glu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape size");
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Nearest-neighbour 2x upsampling of the last two axes of `(B, C, H, W)`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let s = xs.shape();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let d = xs.data();
        let mut out = vec![T::zero(); bc * 4 * h * w];
        for p in 0..bc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = d[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out).expect("upsample shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample2 { x }, rg)
    }

    /// Keeps the first `rows` entries of axis 2 of `(B, C, H, W)`.
    pub fn crop_rows(&mut self, x: Var, rows: usize) -> Var {
        let xs = self.value(x);
        let s = xs.shape();
        assert!(rows <= s[2], "crop larger than input");
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let d = xs.data();
        let mut out = Vec::with_capacity(bc * rows * w);
        for p in 0..bc {
            out.extend_from_slice(&d[p * h * w..p * h * w + rows * w]);
        }
        let value = Tensor::new(vec![s[0], s[1], rows, w], out).expect("crop shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::CropRows { x }, rg)
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat1(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]).shape().to_vec();
        let bn = first[0];
        let tail = &first[2..];
        let mut channels = 0;
        for &v in xs {
            let s = self.value(v).shape();
            assert!(s[0] == bn && &s[2..] == tail, "concat1 shape mismatch");
            channels += s[1];
        }
        let s: usize = tail.iter().product();
        let mut out = Vec::with_capacity(bn * channels * s);
        for bi in 0..bn {
            for &v in xs {
                let t = self.value(v);
                let per = t.dim(1) * s;
                out.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, out).expect("concat shape");
        let rg = self.rg(xs);
        self.push(value, Op::Concat1 { xs: xs.to_vec() }, rg)
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, seed) in seeds {
            assert_eq!(seed.shape(), self.value(*v).shape(), "seed shape");
            accumulate(&mut grads, *v, seed.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, gy.clone());
                }
                if want(b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Affine { x, scale } => {
                if want(x) {
                    let s = *scale;
                    accumulate(grads, *x, gy.map(|v| v * s));
                }
            }
            Op::AddChannel { x, b } => {
                if want(x) {
                    accumulate(grads, *x, gy.clone());
                }
                if want(b) {
                    let s = bcs(gy.shape()).2;
                    let db: Vec<T> = gy.data().chunks(s).map(sum).collect();
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(grads, *b, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let bn = gy.dim(0);
                let (k, n, co) = (geom.k(), geom.n(), geom.cout);
                let gd = gy.data();
                if want(w) {
                    let mut dw = vec![T::zero(); co * k];
                    for bi in 0..bn {
                        gemm(co, n, k, T::one(), &gd[bi * co * n..], false, &cols[bi * k * n..], true, T::one(), &mut dw);
                    }
                    let shape = self.value(*w).shape().to_vec();
                    accumulate(grads, *w, Tensor::new(shape, dw).unwrap());
                }
                if want(bias) {
                    let mut db = vec![T::zero(); co];
                    for (r, row) in gd.chunks(n).enumerate() {
                        db[r % co] += sum(row);
                    }
                    accumulate(grads, *bias, Tensor::new(vec![co], db).unwrap());
                }
                if want(x) {
                    let wd = self.value(*w).data();
                    let per_in = geom.cin * geom.h * geom.w;
                    let mut dx = vec![T::zero(); bn * per_in];
                    let mut dcols = vec![T::zero(); k * n];
                    for bi in 0..bn {
                        gemm(k, co, n, T::one(), wd, true, &gd[bi * co * n..], false, T::zero(), &mut dcols);
                        col2im(&dcols, geom, &mut dx[bi * per_in..(bi + 1) * per_in]);
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bn, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if want(x) {
                    let mut dx = vec![T::zero(); bn * din];
                    gemm(bn, dout, din, T::one(), gy.data(), false, wv.data(), false, T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::new(vec![bn, din], dx).unwrap());
                }
                if want(w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(dout, bn, din, T::one(), gy.data(), true, xv.data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(vec![dout, din], dw).unwrap());
                }
                if want(b) {
                    let mut db = vec![T::zero(); dout];
                    for row in gy.data().chunks(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![dout], db).unwrap());
                }
            }
            Op::GroupNorm { x, groups, xhat, inv_std } => {
                if want(x) {
                    let (_, c, s) = bcs(gy.shape());
                    let n = c / groups * s;
                    let nt = T::from_usize(n).unwrap();
                    let mut dx = vec![T::zero(); gy.len()];
                    for (gi, ((g, xh), d)) in gy
                        .data()
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let s1 = sum(g);
                        let s2 = g.iter().zip(xh).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                        let f = inv_std[gi] / nt;
                        for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xh) {
                            *dv = f * (nt * gv - s1 - xv * s2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Modulate { x, scale, shift } => {
                let s = bcs(gy.shape()).2;
                let xv = self.value(*x);
                if want(x) {
                    let sc = self.value(*scale).data();
                    let mut dx = gy.clone();
                    for (row, chunk) in dx.data_mut().chunks_mut(s).enumerate() {
                        let a = T::one() + sc[row];
                        chunk.iter_mut().for_each(|v| *v *= a);
                    }
                    accumulate(grads, *x, dx);
                }
                if want(scale) {
                    let ds: Vec<T> = gy
                        .data()
                        .chunks(s)
                        .zip(xv.data().chunks(s))
                        .map(|(g, xr)| g.iter().zip(xr).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv))
                        .collect();
                    let shape = self.value(*scale).shape().to_vec();
                    accumulate(grads, *scale, Tensor::new(shape, ds).unwrap());
                }
                if want(shift) {
                    let ds: Vec<T> = gy.data().chunks(s).map(sum).collect();
                    let shape = self.value(*shift).shape().to_vec();
                    accumulate(grads, *shift, Tensor::new(shape, ds).unwrap());
                }
            }
            Op::Glu { x } => {
                if want(x) {
                    let xv = self.value(*x);
                    let (bn, c2, s) = bcs(xv.shape());
                    let c = c2 / 2;
                    let d = xv.data();
                    let g = gy.data();
                    let mut dx = vec![T::zero(); xv.len()];
                    for bi in 0..bn {
                        let base = bi * c2 * s;
                        for i in 0..c * s {
                            let a = d[base + i];
                            let sg = sigmoid(d[base + c * s + i]);
                            let gv = g[bi * c * s + i];
                            dx[base + i] = gv * sg;
                            dx[base + c * s + i] = gv * a * sg * (T::one() - sg);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Sigmoid { x } => {
                if want(x) {
                    let y = &node.value;
                    accumulate(grads, *x, gy.zip_map(y, |g, s| g * s * (T::one() - s)));
                }
            }
            Op::Silu { x } => {
                if want(x) {
                    let xv = self.value(*x);
                    accumulate(
                        grads,
                        *x,
                        gy.zip_map(xv, |g, v| {
                            let s = sigmoid(v);
                            g * (s + v * s * (T::one() - s))
                        }),
                    );
                }
            }
            Op::Reshape { x } => {
                if want(x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, gy.clone().reshape(&shape).unwrap());
                }
            }
            Op::Upsample2 { x } => {
                if want(x) {
                    let s = self.value(*x).shape().to_vec();
                    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let g = gy.data();
                    let mut dx = vec![T::zero(); bc * h * w];
                    for p in 0..bc {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(s, dx).unwrap());
                }
            }
            Op::CropRows { x } => {
                if want(x) {
                    let s = self.value(*x).shape().to_vec();
                    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let rows = gy.dim(2);
                    let mut dx = vec![T::zero(); bc * h * w];
                    for p in 0..bc {
                        dx[p * h * w..p * h * w + rows * w]
                            .copy_from_slice(&gy.data()[p * rows * w..(p + 1) * rows * w]);
                    }
                    accumulate(grads, *x, Tensor::new(s, dx).unwrap());
                }
            }
            Op::Concat1 { xs } => {
                let bn = gy.dim(0);
                let s: usize = gy.shape()[2..].iter().product();
                let total = gy.dim(1) * s;
                let mut offset = 0;
                for v in xs {
                    let shape = self.value(*v).shape().to_vec();
                    let per = shape[1] * s;
                    if want(v) {
                        let mut dx = Vec::with_capacity(bn * per);
                        for bi in 0..bn {
                            let start = bi * total + offset;
                            dx.extend_from_slice(&gy.data()[start..start + per]);
                        }
                        accumulate(grads, *v, Tensor::new(shape, dx).unwrap());
                    }
                    offset += per;
                }
            }
        }
    }
}

fn sum<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &v| a + v)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(T::one(), &g),
        slot => *slot = Some(g),
    }
}

/// Output columns `ox` whose input column `ox * sw + j - pw` lies in `0..w`.
fn valid_cols(g: &ConvGeom, j: usize, wo: usize) -> (usize, usize) {
    let lo = if g.pw > j { (g.pw - j).div_ceil(g.sw) } else { 0 };
    let hi = if g.w + g.pw > j { ((g.w + g.pw - j - 1) / g.sw + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    if is_pointwise(g) {
        cols.copy_from_slice(x);
        return;
    }
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * n..][..n];
                let (lo, hi) = valid_cols(g, j, wo);
                for oy in 0..ho {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.sw == 1 {
                        let start = lo + j - g.pw;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ox) * g.sw + j - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    if is_pointwise(g) {
        for (d, &c) in dx.iter_mut().zip(cols) {
            *d += c;
        }
        return;
    }
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * n..][..n];
                let (lo, hi) = valid_cols(g, j, wo);
                for oy in 0..ho {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    if g.sw == 1 {
                        let start = lo + j - g.pw;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.sw + j - g.pw] += src[ox];
                        }
                    }
                }
            }
        }
    }
}
