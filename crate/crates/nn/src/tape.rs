//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and enough of its inputs
//! to compute the vector-Jacobian product later. Parameter nodes borrow their
//! value from the [`ParamStore`], so building a tape never copies weights.

use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    MulMap {
        x: Var,
        map: Tensor,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    Bce {
        logits: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in store order, zero-filled where unused.
    pub fn dense(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                self.params
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is wanted (used by finite-difference checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// 2-d convolution with square kernels, zero padding and equal strides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a per-sample, per-channel vector `v: [N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[n, c], "add_channel shape mismatch");
        let mut out = self.value(x).clone();
        let hw = h * w;
        let vd = self.value(v).data().to_vec();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bias = vd[i];
            plane.iter_mut().for_each(|p| *p += bias);
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(out, Op::AddChannel { x, v }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let gsize = (c / groups) * h * w;
        let hw = h * w;
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; n * groups];
        for (gi, (chunk, out)) in xt.data().chunks(gsize).zip(xhat.chunks_mut(gsize)).enumerate() {
            let mean = chunk.iter().sum::<f64>() / gsize as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gsize as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[gi] = r;
            for (o, v) in out.iter_mut().zip(chunk) {
                *o = (v - mean) * r;
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut y = Tensor::zeros(vec![n, c, h, w]);
        for (i, (yp, xp)) in y.data_mut().chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = i % c;
            for (o, v) in yp.iter_mut().zip(xp) {
                *o = v * g[ch] + bt[ch];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let mut out = Tensor::zeros(vec![n, c, 2 * h, 2 * w]);
        let src = xt.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat geometry mismatch");
        let hw = h * w;
        let mut out = Tensor::zeros(vec![n, ca + cb, h, w]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let od = out.data_mut();
        for i in 0..n {
            let o = &mut od[i * (ca + cb) * hw..(i + 1) * (ca + cb) * hw];
            o[..ca * hw].copy_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
            o[ca * hw..].copy_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "narrow out of range");
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&src[base..base + len * hw]);
        }
        let out = Tensor::new(vec![n, len, h, w], data).expect("shape");
        let ng = self.needs(x);
        self.push(out, Op::Narrow { x, start }, ng)
    }

    /// `x: [N, In]`, `w: [Out, In]`, `b: [Out]` → `[N, Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fin) = self.value(x).dims2();
        let (fout, fin_w) = self.value(w).dims2();
        assert_eq!(fin, fin_w, "linear input width mismatch");
        let mut out = Tensor::zeros(vec![n, fout]);
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            out.data_mut(),
            (fout, 1),
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.data_mut().chunks_mut(fout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Mean over the spatial axes: `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(vec![n, c], data).expect("pool shape");
        let ng = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    /// Multiplies every channel of `x: [N, C, h, w]` by a constant spatial map
    /// `map: [N, 1, h, w]`. The map is treated as data, not as a differentiable
    /// input.
    pub fn mul_map(&mut self, x: Var, map: Tensor) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(map.shape(), &[n, 1, h, w], "spatial map shape mismatch");
        let hw = h * w;
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let m = &map.data()[(i / c) * hw..(i / c + 1) * hw];
            for (o, mv) in plane.iter_mut().zip(m) {
                *o *= mv;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MulMap { x, map }, ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        let ng = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, ng)
    }

    /// Mean binary cross-entropy of sigmoid(logits) with probabilities
    /// clamped to `[eps, 1 - eps]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>, eps: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), labels.len(), "bce length mismatch");
        let loss = bce_mean(z.data(), &labels, eps);
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::Bce { logits, labels, eps }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.backward_with(loss, Tensor::full(self.value(loss).shape().to_vec(), 1.0))
    }

    /// Reverse pass seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                params[pid] = grads[v.0].clone();
            }
        }
        Grads { by_node: grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddChannel { x, v } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*v) {
                    let (n, c, h, w) = g.dims4();
                    let data = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    accumulate(grads, *v, Tensor::new(vec![n, c], data).expect("shape"));
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| {
                        let s = sigmoid(a);
                        gv * s * (1.0 + a * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c, h, w) = g.dims4();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; g.len()];
                for (p, (gp, xp)) in g.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    let dxp = &mut dxhat[p * hw..(p + 1) * hw];
                    for ((d, gv), xv) in dxp.iter_mut().zip(gp).zip(xp) {
                        dgamma[ch] += gv * xv;
                        dbeta[ch] += gv;
                        *d = gv * gam[ch];
                    }
                }
                if self.needs(*x) {
                    let gsize = (c / groups) * hw;
                    let mut dx = vec![0.0; g.len()];
                    for (gi, &r) in rstd.iter().enumerate() {
                        let range = gi * gsize..(gi + 1) * gsize;
                        let dh = &dxhat[range.clone()];
                        let xh = &xhat[range.clone()];
                        let m1 = dh.iter().sum::<f64>() / gsize as f64;
                        let m2 = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / gsize as f64;
                        for ((o, d), xv) in dx[range].iter_mut().zip(dh).zip(xh) {
                            *o = r * (d - m1 - xv * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx).expect("shape"));
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).expect("shape"));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![c], dbeta).expect("shape"));
                }
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = Tensor::zeros(vec![n, c, h, w]);
                let gd = g.data();
                let d = dx.data_mut();
                for p in 0..n * c {
                    let gp = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dp[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let gd = g.data();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for i in 0..n {
                        let base = i * (ca + cb) * hw;
                        da.extend_from_slice(&gd[base..base + ca * hw]);
                    }
                    accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da).expect("shape"));
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        let base = i * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&gd[base..base + cb * hw]);
                    }
                    accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db).expect("shape"));
                }
            }
            Op::Narrow { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = g.dims4().1;
                let hw = h * w;
                let mut dx = Tensor::zeros(vec![n, c, h, w]);
                for i in 0..n {
                    let base = (i * c + start) * hw;
                    dx.data_mut()[base..base + len * hw].copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2();
                let fout = self.value(*w).dims2().0;
                if self.needs(*x) {
                    // dx[N, In] = g[N, Out] · W[Out, In]
                    let mut dx = Tensor::zeros(vec![n, fin]);
                    gemm(
                        n,
                        fout,
                        fin,
                        g.data(),
                        (fout, 1),
                        self.value(*w).data(),
                        (fin, 1),
                        dx.data_mut(),
                        (fin, 1),
                        false,
                    );
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    // dW[Out, In] = gᵀ[Out, N] · x[N, In]
                    let mut dw = Tensor::zeros(vec![fout, fin]);
                    gemm(
                        fout,
                        n,
                        fin,
                        g.data(),
                        (1, fout),
                        self.value(*x).data(),
                        (fin, 1),
                        dw.data_mut(),
                        (fin, 1),
                        false,
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; fout];
                        for row in g.data().chunks(fout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(vec![fout], db).expect("shape"));
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Vec::with_capacity(n * c * hw);
                for gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx).expect("shape"));
            }
            Op::MulMap { x, map } => {
                let (_, c, h, w) = g.dims4();
                let hw = h * w;
                let mut dx = g.clone();
                for (i, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let m = &map.data()[(i / c) * hw..(i / c + 1) * hw];
                    for (o, mv) in plane.iter_mut().zip(m) {
                        *o *= mv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.data()[0] / p.len() as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), data).expect("shape"));
            }
            Op::Bce { logits, labels, eps } => {
                let z = self.value(*logits);
                let n = labels.len() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&zv, &y)| {
                        let p = sigmoid(zv);
                        // The clamp is flat outside [eps, 1 - eps].
                        if p <= *eps || p >= 1.0 - eps {
                            0.0
                        } else {
                            g.data()[0] * (p - y) / n
                        }
                    })
                    .collect();
                accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), data).expect("shape"));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean clamped binary cross-entropy of `sigmoid(z)` against `labels`.
pub fn bce_mean(z: &[f64], labels: &[f64], eps: f64) -> f64 {
    let total: f64 = z
        .iter()
        .zip(labels)
        .map(|(&zv, &y)| {
            let p = sigmoid(zv).clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / labels.len() as f64
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `(row, col)` strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover every strided index
    // addressed by an m×k, k×n and m×n view, and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[C, H, W]` sample into `[C·k·k, Ho·Wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, cin_w, k, k2) = w.dims4();
    assert_eq!(cin, cin_w, "conv input channels mismatch");
    assert_eq!(k, k2, "conv kernels must be square");
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(wd, k, stride, pad);
    let kk = cin * k * k;
    let p = ho * wo;
    let mut out = Tensor::zeros(vec![n, cout, ho, wo]);
    let pointwise = is_pointwise(k, stride, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    for i in 0..n {
        let xs = &x.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
        let col_ref: &[f64] = if pointwise {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        let os = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
        if let Some(b) = b {
            for (plane, bv) in os.chunks_mut(p).zip(b.data()) {
                plane.fill(*bv);
            }
        }
        gemm(cout, kk, p, w.data(), (kk, 1), col_ref, (p, 1), os, (p, 1), b.is_some());
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let kk = cin * k * k;
    let p = ho * wo;
    let pointwise = is_pointwise(k, stride, pad);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = vec![0.0; cout];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = if want_dx && !pointwise {
        vec![0.0; kk * p]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let xs = &x.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
        let gs = &g.data()[i * cout * p..(i + 1) * cout * p];
        for (d, plane) in db.iter_mut().zip(gs.chunks(p)) {
            *d += plane.iter().sum::<f64>();
        }
        let col_ref: &[f64] = if pointwise {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        // dW[Cout, K] += g[Cout, P] · colsᵀ[P, K]
        gemm(cout, p, kk, gs, (p, 1), col_ref, (1, p), dw.data_mut(), (kk, 1), true);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[i * cin * h * wd..(i + 1) * cin * h * wd];
            if pointwise {
                // dx[Cin, P] = Wᵀ[Cin, Cout] · g[Cout, P]
                gemm(cin, cout, p, w.data(), (1, kk), gs, (p, 1), dxs, (p, 1), false);
            } else {
                gemm(kk, cout, p, w.data(), (1, kk), gs, (p, 1), &mut dcols, (p, 1), false);
                col2im_add(&dcols, cin, h, wd, k, stride, pad, dxs);
            }
        }
    }
    (dx, dw, Tensor::new(vec![cout], db).expect("shape"))
}
