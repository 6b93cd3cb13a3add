use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use super::kernels::{self, ConvGeom, DeformArgs, DeformGeom, DeformGrads, TAPS};
use super::{Float, ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Integer `(dy, dx)` per output pixel, `N * H * W` entries.
pub type Shifts = Arc<[[i32; 2]]>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    PixelShuffle { x: Var, r: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    KernelMix { alpha: Var, bank: Var },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, per_sample: bool },
    ConvTranspose { x: Var, w: Var, geom: ConvGeom },
    Deform { x: Var, off: Var, mask: Var, w: Var, b: Option<Var>, geom: DeformGeom, pre: Option<Shifts> },
    Shift { x: Var, pre: Shifts, hr: usize, wr: usize },
    Tile { x: Var, n: usize },
    Spread { x: Var, hw: usize },
    Mean(Var),
    Sum(Var),
    SumPerSample(Var),
    L1(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    grad: bool,
}

/// Tape of one or more forward passes.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, ParamId), Var>,
    touched: BTreeSet<(u64, ParamId)>,
    record: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            touched: BTreeSet::new(),
            record: true,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
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
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    fn opt_any(&self, b: Option<Var>) -> bool {
        b.is_some_and(|b| self.nodes[b.0].grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        self.touched.insert(key);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(key, v);
        v
    }

    /// Parameters of `store` read since the last call, in id order.
    pub fn take_touched(&mut self, store: &ParamStore<T>) -> Vec<ParamId> {
        let uid = store.uid();
        let ids: Vec<ParamId> = self
            .touched
            .iter()
            .filter(|(u, _)| *u == uid)
            .map(|&(_, id)| id)
            .collect();
        self.touched.retain(|(u, _)| *u != uid);
        ids
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let g = self.any(&[a, b]);
        self.push(t, op, g)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let g = self.any(&[a]);
        self.push(t, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::c(s);
        self.unary(a, Op::Scale(a, s), |x| x * st)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let st = T::c(s);
        self.unary(a, Op::AddScalar(a), |x| x + st)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let st = T::c(slope);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * st })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.max(T::zero()).sqrt())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.nodes[a.0].value.clone().reshape(shape);
        let g = self.any(&[a]);
        self.push(t, Op::Reshape(a), g)
    }

    /// Channel concatenation of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat: incompatible {:?}", self.shape(p));
            ctot += pc;
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let per = v.numel() / n;
                data.extend_from_slice(&v.data()[s * per..(s + 1) * per]);
            }
        }
        let g = self.any(parts);
        self.push(Tensor::from_vec(&[n, ctot, h, w], data), Op::Concat(parts.to_vec()), g)
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "narrow past channel count");
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            data.extend_from_slice(&src[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&[n, len, h, w], data), Op::Narrow { x, start }, g)
    }

    /// `(N, C*r*r, H, W) -> (N, C, H*r, W*r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let (n, cin, h, w) = self.value(x).dims4();
        assert_eq!(cin % (r * r), 0, "pixel shuffle needs channels divisible by r^2");
        let c = cin / (r * r);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let ic = ch * r * r + i * r + j;
                        for y in 0..h {
                            for xx in 0..w {
                                let o = ((s * c + ch) * h * r + y * r + i) * w * r + xx * r + j;
                                out[o] = src[((s * cin + ic) * h + y) * w + xx];
                            }
                        }
                    }
                }
            }
        }
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&[n, c, h * r, w * r], out), Op::PixelShuffle { x, r }, g)
    }

    /// `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::c(1.0 / hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), g)
    }

    /// `x: (N, I)`, `w: (O, I)`, `b: (O)` gives `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, i) = (vx.shape()[0], vx.shape()[1]);
        let o = vw.shape()[0];
        assert_eq!(vw.shape(), &[o, i], "linear weight shape");
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, i, o, vx.data(), (i, 1), vw.data(), (1, i), &mut out, T::zero());
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let g = self.any(&[x, w]) || self.opt_any(b);
        self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, g)
    }

    /// Per-sample mixture of a kernel bank: `alpha: (N, K)`,
    /// `bank: (K, ...)` gives `(N, ...)` with `out[n] = sum_k alpha[n,k] bank[k]`.
    pub fn kernel_mix(&mut self, alpha: Var, bank: Var) -> Var {
        let (va, vb) = (self.value(alpha), self.value(bank));
        let (n, k) = (va.shape()[0], va.shape()[1]);
        assert_eq!(vb.shape()[0], k, "kernel bank size");
        let per = vb.numel() / k;
        let mut out = vec![T::zero(); n * per];
        T::gemm(n, k, per, va.data(), (k, 1), vb.data(), (per, 1), &mut out, T::zero());
        let mut shape = vb.shape().to_vec();
        shape[0] = n;
        let g = self.any(&[alpha, bank]);
        self.push(Tensor::from_vec(&shape, out), Op::KernelMix { alpha, bank }, g)
    }

    /// Square-kernel convolution. `w` is `(Co, Ci, k, k)` or, for one kernel
    /// per sample, `(N, Co, Ci, k, k)`; `b` is `(Co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        let (per_sample, co, wci, k) = match ws.len() {
            4 => (false, ws[0], ws[1], ws[2]),
            5 => {
                assert_eq!(ws[0], n, "per-sample weights need one kernel per sample");
                (true, ws[1], ws[2], ws[3])
            }
            _ => panic!("conv weight must be rank 4 or 5, got {ws:?}"),
        };
        assert_eq!(wci, ci, "conv: input has {ci} channels, weight expects {wci}");
        let geom = ConvGeom::new(ci, h, wd, co, k, stride, pad).expect("conv: kernel larger than padded input");
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_forward(&geom, n, self.value(x).data(), self.value(w).data(), per_sample, bias);
        let t = Tensor::from_vec(&[n, co, geom.ho, geom.wo], out);
        let g = self.any(&[x, w]) || self.opt_any(b);
        self.push(t, Op::Conv { x, w, b, geom, per_sample }, g)
    }

    /// Adjoint of [`Graph::conv2d`] without bias: maps `(N, Co, Ho, Wo)` back
    /// to `(N, Ci, out_h, out_w)` with `w: (Co, Ci, k, k)`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_hw: (usize, usize)) -> Var {
        let (n, co, ho, wo) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "transposed conv takes a shared weight");
        assert_eq!(ws[0], co, "conv_transpose: channel mismatch");
        let geom = ConvGeom::new(ws[1], out_hw.0, out_hw.1, co, ws[2], stride, pad).expect("conv_transpose geometry");
        assert_eq!((geom.ho, geom.wo), (ho, wo), "conv_transpose: output size inconsistent with input");
        let out = kernels::conv_grad_input(&geom, n, self.value(x).data(), self.value(w).data(), false);
        let t = Tensor::from_vec(&[n, ws[1], out_hw.0, out_hw.1], out);
        let g = self.any(&[x, w]);
        self.push(t, Op::ConvTranspose { x, w, geom }, g)
    }

    /// Modulated 3x3 deformable convolution (padding 1, stride 1).
    ///
    /// `x: (N, C, Hr, Wr)` is sampled for every pixel of an `H x W` grid at
    /// `p + pre[p] + tap + offset`, bilinearly with zeros outside, and each
    /// sample is scaled by its mask. `offset: (N, 18, H, W)` holds `dy, dx`
    /// interleaved per tap, `mask: (N, 9, H, W)`, `w: (Co, C, 3, 3)`.
    pub fn deform_conv(
        &mut self,
        x: Var,
        offset: Var,
        mask: Var,
        w: Var,
        b: Option<Var>,
        pre: Option<Shifts>,
    ) -> Var {
        let (n, c, hr, wr) = self.value(x).dims4();
        let (on, oc, h, wd) = self.value(offset).dims4();
        assert_eq!((on, oc), (n, 2 * TAPS), "deform offset shape");
        assert_eq!(self.value(mask).dims4(), (n, TAPS, h, wd), "deform mask shape");
        let ws = self.shape(w).to_vec();
        assert_eq!(&ws[1..], &[c, 3, 3], "deform weight shape");
        if let Some(p) = &pre {
            assert_eq!(p.len(), n * h * wd, "pre-offset count");
        }
        let geom = DeformGeom { c, hr, wr, co: ws[0], h, w: wd };
        let hw = h * wd;
        let mut out = vec![T::zero(); n * geom.co * hw];
        {
            let (vx, vo, vm) = (self.value(x).data(), self.value(offset).data(), self.value(mask).data());
            let (vw, vb) = (self.value(w).data(), b.map(|b| self.value(b).data()));
            for (s, os) in out.chunks_exact_mut(geom.co * hw).enumerate() {
                let args = DeformArgs::sample(&geom, s, vx, vo, vm, pre.as_deref());
                kernels::deform_forward(&geom, &args, vw, vb, os);
            }
        }
        let t = Tensor::from_vec(&[n, geom.co, h, wd], out);
        let g = self.any(&[x, offset, mask, w]) || self.opt_any(b);
        self.push(t, Op::Deform { x, off: offset, mask, w, b, geom, pre }, g)
    }

    /// Integer gather: `out[n, c, y, x] = x[n, c, y + dy, x + dx]` with the
    /// per-pixel shift of an `out_h x out_w` grid; zero when outside.
    pub fn shift(&mut self, x: Var, pre: Shifts, out_hw: (usize, usize)) -> Var {
        let (n, c, hr, wr) = self.value(x).dims4();
        let (h, w) = out_hw;
        assert_eq!(pre.len(), n * h * w, "shift count");
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * h * w];
        for s in 0..n {
            for p in 0..h * w {
                let [dy, dx] = pre[s * h * w + p];
                let (yy, xx) = ((p / w) as i64 + dy as i64, (p % w) as i64 + dx as i64);
                if yy < 0 || xx < 0 || yy >= hr as i64 || xx >= wr as i64 {
                    continue;
                }
                let q = yy as usize * wr + xx as usize;
                for ch in 0..c {
                    out[(s * c + ch) * h * w + p] = src[(s * c + ch) * hr * wr + q];
                }
            }
        }
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::Shift { x, pre, hr, wr }, g)
    }

    /// Repeats a tensor with leading axis 1 `n` times along that axis.
    pub fn tile(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape()[0], 1, "tile expects a leading axis of 1");
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let data = v.data().repeat(n);
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&shape, data), Op::Tile { x, n }, g)
    }

    /// `(N, C) -> (N, C, h, w)`, every pixel a copy of its channel value.
    pub fn spread(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape().len(), 2, "spread expects (N, C)");
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let data = v.data().iter().flat_map(|&a| std::iter::repeat_n(a, h * w)).collect();
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&[n, c, h, w], data), Op::Spread { x, hw: h * w }, g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::c(v.numel() as f64);
        let g = self.any(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.any(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Sum over all but the leading axis, giving `(N)`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.numel() / n;
        let data = v.data().chunks_exact(per).map(|c| c.iter().copied().sum()).collect();
        let g = self.any(&[x]);
        self.push(Tensor::from_vec(&[n], data), Op::SumPerSample(x), g)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "l1");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum();
        let m = s / T::c(va.len() as f64);
        let g = self.any(&[a, b]);
        self.push(Tensor::scalar(m), Op::L1(a, b), g)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].grad {
            return;
        }
        debug_assert_eq!(t.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn acc_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let t = Tensor::from_vec(self.shape(v), data);
        self.acc(grads, v, t);
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = gd.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    self.acc_vec(grads, *a, d);
                }
                if needs(*b) {
                    let d = gd.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    self.acc_vec(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                let st = T::c(*s);
                self.acc(grads, *a, g.map(|v| v * st));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = Tensor::from_vec(self.shape(*a), gd.to_vec());
                self.acc(grads, *a, t);
            }
            Op::LeakyRelu(a, s) => {
                let st = T::c(*s);
                let d = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { gv * st })
                    .collect();
                self.acc_vec(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                self.acc_vec(grads, *a, d);
            }
            Op::Square(a) => {
                let two = T::c(2.0);
                let d = gd.iter().zip(val(*a)).map(|(&gv, &x)| gv * two * x).collect();
                self.acc_vec(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let y = self.nodes[i].value.data();
                let half = T::c(0.5);
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&gv, &s)| if s > T::zero() { gv * half / s } else { T::zero() })
                    .collect();
                self.acc_vec(grads, *a, d);
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let per_total = g.numel() / n;
                let mut start = 0;
                for &p in parts {
                    let per = self.value(p).numel() / n;
                    if needs(p) {
                        let mut d = Vec::with_capacity(per * n);
                        for s in 0..n {
                            d.extend_from_slice(&gd[s * per_total + start..s * per_total + start + per]);
                        }
                        self.acc_vec(grads, p, d);
                    }
                    start += per;
                }
            }
            Op::Narrow { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.shape()[1];
                let hw = h * w;
                let mut d = vec![T::zero(); n * c * hw];
                for s in 0..n {
                    d[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&gd[s * len * hw..(s + 1) * len * hw]);
                }
                self.acc_vec(grads, *x, d);
            }
            Op::PixelShuffle { x, r } => {
                let r = *r;
                let (n, cin, h, w) = self.value(*x).dims4();
                let c = cin / (r * r);
                let mut d = vec![T::zero(); gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for a in 0..r {
                            for b in 0..r {
                                let ic = ch * r * r + a * r + b;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let o = ((s * c + ch) * h * r + y * r + a) * w * r + xx * r + b;
                                        d[((s * cin + ic) * h + y) * w + xx] = gd[o];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc_vec(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let inv = T::c(1.0 / (h * w) as f64);
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, h * w)).collect();
                self.acc_vec(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if needs(*x) {
                    let mut d = vec![T::zero(); n * i];
                    T::gemm(n, o, i, gd, (o, 1), val(*w), (i, 1), &mut d, T::zero());
                    self.acc_vec(grads, *x, d);
                }
                if needs(*w) {
                    let mut d = vec![T::zero(); o * i];
                    T::gemm(o, n, i, gd, (1, o), val(*x), (i, 1), &mut d, T::zero());
                    self.acc_vec(grads, *w, d);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut d = vec![T::zero(); o];
                    for row in gd.chunks_exact(o) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.acc_vec(grads, b, d);
                }
            }
            Op::KernelMix { alpha, bank } => {
                let (n, k) = (self.shape(*alpha)[0], self.shape(*alpha)[1]);
                let per = self.value(*bank).numel() / k;
                if needs(*alpha) {
                    let mut d = vec![T::zero(); n * k];
                    T::gemm(n, per, k, gd, (per, 1), val(*bank), (1, per), &mut d, T::zero());
                    self.acc_vec(grads, *alpha, d);
                }
                if needs(*bank) {
                    let mut d = vec![T::zero(); k * per];
                    T::gemm(k, n, per, val(*alpha), (1, k), gd, (per, 1), &mut d, T::zero());
                    self.acc_vec(grads, *bank, d);
                }
            }
            Op::Conv { x, w, b, geom, per_sample } => {
                let n = self.shape(*x)[0];
                if needs(*x) {
                    let d = kernels::conv_grad_input(geom, n, gd, val(*w), *per_sample);
                    self.acc_vec(grads, *x, d);
                }
                if needs(*w) {
                    let d = kernels::conv_grad_weight(geom, n, val(*x), gd, *per_sample);
                    self.acc_vec(grads, *w, d);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let d = kernels::bias_grad(n, geom.co, geom.ho * geom.wo, gd);
                    self.acc_vec(grads, b, d);
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                let n = self.shape(*x)[0];
                if needs(*x) {
                    let d = kernels::conv_forward(geom, n, gd, val(*w), false, None);
                    self.acc_vec(grads, *x, d);
                }
                if needs(*w) {
                    let d = kernels::conv_grad_weight(geom, n, gd, val(*x), false);
                    self.acc_vec(grads, *w, d);
                }
            }
            Op::Deform { x, off, mask, w, b, geom, pre } => {
                let n = self.shape(*x)[0];
                let hw = geom.h * geom.w;
                let xl = geom.c * geom.hr * geom.wr;
                let mut gx = needs(*x).then(|| vec![T::zero(); n * xl]);
                let mut go = needs(*off).then(|| vec![T::zero(); n * 2 * TAPS * hw]);
                let mut gm = needs(*mask).then(|| vec![T::zero(); n * TAPS * hw]);
                let mut gw = needs(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                for s in 0..n {
                    let args = DeformArgs::sample(geom, s, val(*x), val(*off), val(*mask), pre.as_deref());
                    let gys = &gd[s * geom.co * hw..(s + 1) * geom.co * hw];
                    let out = DeformGrads {
                        x: gx.as_mut().map(|v| &mut v[s * xl..(s + 1) * xl]),
                        off: go.as_mut().map(|v| &mut v[s * 2 * TAPS * hw..(s + 1) * 2 * TAPS * hw]),
                        mask: gm.as_mut().map(|v| &mut v[s * TAPS * hw..(s + 1) * TAPS * hw]),
                        w: gw.as_deref_mut(),
                    };
                    kernels::deform_backward(geom, &args, val(*w), gys, out);
                }
                for (v, d) in [(*x, gx), (*off, go), (*mask, gm), (*w, gw)] {
                    if let Some(d) = d {
                        self.acc_vec(grads, v, d);
                    }
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let d = kernels::bias_grad(n, geom.co, hw, gd);
                    self.acc_vec(grads, b, d);
                }
            }
            Op::Shift { x, pre, hr, wr } => {
                let (n, c, h, w) = g.dims4();
                let mut d = vec![T::zero(); n * c * hr * wr];
                for s in 0..n {
                    for p in 0..h * w {
                        let [dy, dx] = pre[s * h * w + p];
                        let (yy, xx) = ((p / w) as i64 + dy as i64, (p % w) as i64 + dx as i64);
                        if yy < 0 || xx < 0 || yy >= *hr as i64 || xx >= *wr as i64 {
                            continue;
                        }
                        let q = yy as usize * wr + xx as usize;
                        for ch in 0..c {
                            d[(s * c + ch) * hr * wr + q] += gd[(s * c + ch) * h * w + p];
                        }
                    }
                }
                self.acc_vec(grads, *x, d);
            }
            Op::Tile { x, n } => {
                let per = gd.len() / n;
                let mut d = vec![T::zero(); per];
                for chunk in gd.chunks_exact(per) {
                    d.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                self.acc_vec(grads, *x, d);
            }
            Op::Spread { x, hw } => {
                let d = gd.chunks_exact(*hw).map(|c| c.iter().copied().sum()).collect();
                self.acc_vec(grads, *x, d);
            }
            Op::Mean(x) => {
                let numel = self.value(*x).numel();
                let v = gd[0] / T::c(numel as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), v));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::SumPerSample(x) => {
                let per = self.value(*x).numel() / gd.len();
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect();
                self.acc_vec(grads, *x, d);
            }
            Op::L1(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let scale = gd[0] / T::c(va.len() as f64);
                let d: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        let diff = x - y;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if needs(*b) {
                    self.acc_vec(grads, *b, d.iter().map(|&v| -v).collect());
                }
                self.acc_vec(grads, *a, d);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&(store.uid(), id)).and_then(|&v| self.wrt(v))
    }
}

#[cfg(test)]
mod tests;
