//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op whose inputs need gradients. [`Var`] carries its value
//! directly, so a non-recording tape keeps nothing alive beyond the live `Var`s.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeom, Taps, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Tracks how many attention-affinity elements are alive at once.
#[derive(Default, Debug)]
pub struct AffinityMeter {
    live: Cell<usize>,
    peak: Cell<usize>,
    total: Cell<usize>,
}

impl AffinityMeter {
    pub fn acquire(&self, elements: usize) {
        let live = self.live.get() + elements;
        self.live.set(live);
        self.total.set(self.total.get() + elements);
        if live > self.peak.get() {
            self.peak.set(live);
        }
    }

    pub fn release(&self, elements: usize) {
        self.live.set(self.live.get().saturating_sub(elements));
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    /// Elements allocated over the tape's lifetime.
    pub fn total(&self) -> usize {
        self.total.get()
    }
}

pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, (usize, Rc<Tensor>)>>,
    meter: AffinityMeter,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            meter: AffinityMeter::default(),
        }
    }

    /// A tape for inference: nothing is recorded and intermediates are freed eagerly.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn meter(&self) -> &AffinityMeter {
        &self.meter
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let node = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Binds a stored parameter; repeated calls return the same leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some((node, value)) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                value: value.clone(),
                node: self.recording.then_some(*node),
            };
        }
        let value = Rc::new(store.value(id).clone());
        let node = if self.recording && store.is_trainable(id) {
            self.push(Node {
                parents: Vec::new(),
                backward: None,
            })
        } else {
            None
        };
        if let Some(n) = node {
            self.params.borrow_mut().insert(id, (n, value.clone()));
        }
        Var {
            tape: self,
            value,
            node,
        }
    }

    fn push(&self, node: Node) -> Option<usize> {
        if !self.recording {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Some(nodes.len() - 1)
    }

    /// Records an op. `backward` receives the output gradient and a mask of which
    /// inputs need gradients, and returns one entry per input.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            self.push(Node {
                parents: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
            })
        } else {
            None
        };
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        if output.value.numel() != 1 {
            return Err(Error::invalid("backward requires a scalar output"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = output.node else {
            return Ok(Gradients {
                grads,
                params: HashMap::new(),
            });
        };
        grads[root] = Some(Tensor::ones(output.value.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let mask: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
                let parent_grads = bw(&g, &mask);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(p), Some(pg)) = (p, pg) {
                        match &mut grads[*p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            } else {
                grads[id] = Some(g);
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(pid, (node, _))| (*pid, *node))
            .collect();
        Ok(Gradients { grads, params })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn of(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|n| self.grads.get(n)?.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }
}

#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Rc<Tensor>,
    node: Option<usize>,
}

fn need(mask: &[bool], i: usize) -> bool {
    mask.get(i).copied().unwrap_or(false)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let out = self.value.zip_map(&other.value, |a, b| a + b);
        Ok(self.tape.record(out, &[self, other], |g, m| {
            vec![need(m, 0).then(|| g.clone()), need(m, 1).then(|| g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let out = self.value.zip_map(&other.value, |a, b| a - b);
        Ok(self.tape.record(out, &[self, other], |g, m| {
            vec![need(m, 0).then(|| g.clone()), need(m, 1).then(|| g.scale(-1.0))]
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let out = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(out, &[self, other], move |g, m| {
            vec![
                need(m, 0).then(|| g.zip_map(&b, |g, b| g * b)),
                need(m, 1).then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        }))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let out = self.value.scale(factor);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.scale(factor))])
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        if s.value.numel() != 1 {
            return Err(Error::shape("mul_scalar", &[1], s.shape()));
        }
        let sv = s.value.data()[0];
        let out = self.value.scale(sv);
        let x = self.value.clone();
        let shape = s.shape().to_vec();
        Ok(self.tape.record(out, &[self, s], move |g, m| {
            vec![
                need(m, 0).then(|| g.scale(sv)),
                need(m, 1).then(|| {
                    let d: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
                    Tensor::full(&shape, d)
                }),
            ]
        }))
    }

    /// Adds a one-element variable to every element.
    pub fn add_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        if s.value.numel() != 1 {
            return Err(Error::shape("add_scalar", &[1], s.shape()));
        }
        let sv = s.value.data()[0];
        let out = self.value.map(|v| v + sv);
        let shape = s.shape().to_vec();
        Ok(self.tape.record(out, &[self, s], move |g, m| {
            vec![
                need(m, 0).then(|| g.clone()),
                need(m, 1).then(|| Tensor::full(&shape, g.sum())),
            ]
        }))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value.map(|v| v.max(0.0));
        let x = self.value.clone();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value.map(sigmoid);
        let y = out.clone();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn asinh(&self) -> Var<'t> {
        let out = self.value.map(f64::asinh);
        let x = self.value.clone();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| g / (x * x + 1.0).sqrt()))]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self
            .tape
            .record(out, &[self], move |g, _| vec![Some(g.clone().reshaped(&orig))]))
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let &[b, r, c] = self.shape() else {
            return Err(Error::invalid("transpose_last expects a 3-D tensor"));
        };
        let out = transpose3(&self.value, b, r, c);
        Ok(self
            .tape
            .record(out, &[self], move |g, _| vec![Some(transpose3(g, b, c, r))]))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]`. A `*_trans` flag means the
    /// operand is stored with its last two axes swapped.
    pub fn bmm(&self, other: &Var<'t>, a_trans: bool, b_trans: bool) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let batch = sa[0];
        let (m, k) = if a_trans { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if b_trans { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (a, b) = (self.value.clone(), other.value.clone());
        for i in 0..batch {
            tensor::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                a_trans,
                &b.data()[i * k * n..(i + 1) * k * n],
                b_trans,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        let (a_shape, b_shape) = (sa.to_vec(), sb.to_vec());
        Ok(self.tape.record(out, &[self, other], move |g, mask| {
            let gd = g.data();
            let da = need(mask, 0).then(|| {
                let mut d = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let di = &mut d[i * m * k..(i + 1) * m * k];
                    if a_trans {
                        tensor::gemm(k, n, m, bi, b_trans, gi, true, 0.0, di);
                    } else {
                        tensor::gemm(m, n, k, gi, false, bi, !b_trans, 0.0, di);
                    }
                }
                Tensor::new(&a_shape, d).expect("bmm grad shape")
            });
            let db = need(mask, 1).then(|| {
                let mut d = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if b_trans {
                        tensor::gemm(n, m, k, gi, true, ai, a_trans, 0.0, di);
                    } else {
                        tensor::gemm(k, m, n, ai, !a_trans, gi, false, 0.0, di);
                    }
                }
                Tensor::new(&b_shape, d).expect("bmm grad shape")
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t> {
        let n = *self.shape().last().expect("softmax of scalar");
        let mut out = self.value.as_ref().clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let y = out.clone();
        self.tape.record(out, &[self], move |g, _| {
            let mut dx = g.clone();
            for (dxr, yr) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: f64 = dxr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (d, y) in dxr.iter_mut().zip(yr) {
                    *d = y * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// 2-D convolution of `[B, C, H, W]` with weights `[O, C, k, k]` and optional bias `[O]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let &[batch, channels, height, width] = self.shape() else {
            return Err(Error::invalid("conv2d input must be [B, C, H, W]"));
        };
        let &[out_ch, in_ch, kh, kw] = weight.shape() else {
            return Err(Error::invalid("conv2d weight must be [O, C, k, k]"));
        };
        if in_ch != channels || kh != kw {
            return Err(Error::shape(
                "conv2d",
                &[out_ch, channels, kh, kh],
                weight.shape(),
            ));
        }
        if stride == 0 || height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh} does not fit a {height}x{width} input with padding {padding}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [out_ch] {
                return Err(Error::shape("conv2d bias", &[out_ch], b.shape()));
            }
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel: kh,
            stride,
            padding,
        };
        let pointwise = kh == 1 && stride == 1 && padding == 0;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let x = self.value.clone();
        let w = weight.value.clone();
        let mut out = vec![0.0; batch * out_ch * cols];
        let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * cols] };
        let in_per = channels * height * width;
        for b in 0..batch {
            let xb = &x.data()[b * in_per..(b + 1) * in_per];
            let src: &[f64] = if pointwise {
                xb
            } else {
                tensor::im2col(xb, &geom, &mut col);
                &col
            };
            let ob = &mut out[b * out_ch * cols..(b + 1) * out_ch * cols];
            if let Some(bias) = bias {
                for (o, plane) in ob.chunks_mut(cols).enumerate() {
                    plane.fill(bias.value.data()[o]);
                }
            }
            tensor::gemm(
                out_ch,
                rows,
                cols,
                w.data(),
                false,
                src,
                false,
                if bias.is_some() { 1.0 } else { 0.0 },
                ob,
            );
        }
        let out = Tensor::new(&[batch, out_ch, oh, ow], out)?;
        let inputs: Vec<&Var<'t>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let w_shape = weight.shape().to_vec();
        let x_shape = self.shape().to_vec();
        Ok(self.tape.record(out, &inputs, move |g, mask| {
            let gd = g.data();
            let mut dx = need(mask, 0).then(|| vec![0.0; batch * in_per]);
            let mut dw = need(mask, 1).then(|| vec![0.0; out_ch * rows]);
            let mut col = vec![0.0; if pointwise { 0 } else { rows * cols }];
            let mut dcol = vec![0.0; rows * cols];
            for b in 0..batch {
                let gb = &gd[b * out_ch * cols..(b + 1) * out_ch * cols];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[b * in_per..(b + 1) * in_per];
                    let src: &[f64] = if pointwise {
                        xb
                    } else {
                        tensor::im2col(xb, &geom, &mut col);
                        &col
                    };
                    tensor::gemm(out_ch, cols, rows, gb, false, src, true, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * in_per..(b + 1) * in_per];
                    if pointwise {
                        tensor::gemm(rows, out_ch, cols, w.data(), true, gb, false, 0.0, dxb);
                    } else {
                        tensor::gemm(rows, out_ch, cols, w.data(), true, gb, false, 0.0, &mut dcol);
                        tensor::col2im(&dcol, &geom, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(&x_shape, d).expect("conv dx")),
                dw.map(|d| Tensor::new(&w_shape, d).expect("conv dw")),
            ];
            if mask.len() == 3 {
                grads.push(need(mask, 2).then(|| {
                    let mut db = vec![0.0; out_ch];
                    for b in 0..batch {
                        for (o, v) in db.iter_mut().enumerate() {
                            let s = (b * out_ch + o) * cols;
                            *v += gd[s..s + cols].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(&[out_ch], db).expect("conv db")
                }));
            }
            grads
        }))
    }

    /// Per-sample normalisation over `[C, H, W]` with a per-channel affine transform.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let &[batch, channels, h, w] = self.shape() else {
            return Err(Error::invalid("layer_norm input must be [B, C, H, W]"));
        };
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(Error::shape("layer_norm affine", &[channels], gamma.shape()));
        }
        let hw = h * w;
        let per = channels * hw;
        let x = self.value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; batch];
        for b in 0..batch {
            let xs = &x[b * per..(b + 1) * per];
            let mean = xs.iter().sum::<f64>() / per as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[b] = is;
            for (o, v) in xhat[b * per..(b + 1) * per].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let (gv, bv) = (gamma.value.clone(), beta.value.clone());
        let mut out = xhat.clone();
        for (i, v) in out.iter_mut().enumerate() {
            let c = (i / hw) % channels;
            *v = *v * gv.data()[c] + bv.data()[c];
        }
        let out = Tensor::new(self.shape(), out)?;
        let shape = self.shape().to_vec();
        Ok(self.tape.record(out, &[self, gamma, beta], move |g, mask| {
            let gd = g.data();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for (i, (&gi, &xh)) in gd.iter().zip(&xhat).enumerate() {
                let c = (i / hw) % channels;
                dgamma[c] += gi * xh;
                dbeta[c] += gi;
            }
            let dx = need(mask, 0).then(|| {
                let mut dx = vec![0.0; gd.len()];
                for b in 0..batch {
                    let r = b * per..(b + 1) * per;
                    let dxh: Vec<f64> = gd[r.clone()]
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * gv.data()[i / hw])
                        .collect();
                    let xh = &xhat[r.clone()];
                    let m1 = dxh.iter().sum::<f64>() / per as f64;
                    let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / per as f64;
                    for ((d, a), x) in dx[r].iter_mut().zip(&dxh).zip(xh) {
                        *d = inv_std[b] * (a - m1 - x * m2);
                    }
                }
                Tensor::new(&shape, dx).expect("layer_norm dx")
            });
            vec![
                dx,
                need(mask, 1).then(|| Tensor::new(&[channels], dgamma.clone()).unwrap()),
                need(mask, 2).then(|| Tensor::new(&[channels], dbeta.clone()).unwrap()),
            ]
        }))
    }

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let &[batch, _, h, w] = first.shape() else {
            return Err(Error::invalid("concat_channels expects [B, C, H, W]"));
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != batch || s[2] != h || s[3] != w {
                return Err(Error::shape("concat_channels", first.shape(), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(batch * total * hw);
        for b in 0..batch {
            for (p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[batch, total, h, w], out)?;
        let tape = first.tape;
        Ok(tape.record(out, parts, move |g, mask| {
            let mut grads: Vec<Vec<f64>> = widths
                .iter()
                .map(|&c| Vec::with_capacity(batch * c * hw))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..batch {
                for (gr, &c) in grads.iter_mut().zip(&widths) {
                    gr.extend_from_slice(&gd[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (d, &c))| {
                    need(mask, i).then(|| Tensor::new(&[batch, c, h, w], d).unwrap())
                })
                .collect()
        }))
    }

    /// Concatenates tensors along axis 0.
    pub fn concat_batch(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value.as_ref().clone()).collect();
        let out = Tensor::stack_batch(&values)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.value.numel()).collect();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        Ok(first.tape.record(out, &refs, move |g, mask| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&shapes)
                .enumerate()
                .map(|(i, (&n, s))| {
                    let part = need(mask, i)
                        .then(|| Tensor::new(s, g.data()[off..off + n].to_vec()).unwrap());
                    off += n;
                    part
                })
                .collect()
        }))
    }

    /// Rows `start..start + len` of axis 0.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let rows = self.shape()[0];
        if start + len > rows || len == 0 {
            return Err(Error::invalid(format!(
                "slice_batch {start}+{len} out of range for {rows} rows"
            )));
        }
        let per = self.value.numel() / rows;
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(
            &shape,
            self.value.data()[start * per..(start + len) * per].to_vec(),
        )?;
        let full = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut d = Tensor::zeros(&full);
            d.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
            vec![Some(d)]
        }))
    }

    /// Separable spatial resampling of a `[B, C, H, W]` tensor.
    pub(crate) fn resample(&self, rows: Taps, cols: Taps) -> Result<Var<'t>> {
        let &[batch, channels, h, w] = self.shape() else {
            return Err(Error::invalid("resample expects [B, C, H, W]"));
        };
        let (oh, ow) = (rows.len(), cols.len());
        let out = tensor::resample_planes(self.value.data(), batch * channels, (h, w), &rows, &cols);
        let out = Tensor::new(&[batch, channels, oh, ow], out)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            let d = tensor::resample_planes_adjoint(g.data(), batch * channels, (h, w), &rows, &cols);
            vec![Some(Tensor::new(&[batch, channels, h, w], d).unwrap())]
        }))
    }

    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear expects [B, C, H, W]"));
        }
        if (s[2], s[3]) == (out_h, out_w) {
            return Ok(self.clone());
        }
        self.resample(
            tensor::bilinear_taps(s[2], out_h),
            tensor::bilinear_taps(s[3], out_w),
        )
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::invalid("upsample_nearest expects [B, C, H, W]"));
        }
        self.resample(
            tensor::nearest_taps(s[2], factor),
            tensor::nearest_taps(s[3], factor),
        )
    }

    /// Box-average downsampling by an integer factor that divides both spatial sides.
    pub fn downsample_area(&self, factor: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 || !s[2].is_multiple_of(factor) || !s[3].is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot downsample {:?} by {factor}",
                s
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        self.resample(
            tensor::area_taps(s[2], factor),
            tensor::area_taps(s[3], factor),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn transpose3(t: &Tensor, b: usize, r: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; b * r * c];
    let d = t.data();
    for k in 0..b {
        let src = &d[k * r * c..(k + 1) * r * c];
        let dst = &mut out[k * r * c..(k + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::new(&[b, c, r], out).expect("transpose shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    fn ramp(shape: &[usize], phase: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + phase) * 0.61).sin())
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let tape = Tape::inference();
        let x = tape.constant(ramp(&[2, 3, 5], 0.0).scale(7.0));
        let y = x.softmax_last();
        for row in y.value().data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x = ramp(&[2, 2, 5, 4], 0.3);
        let w = ramp(&[3, 2, 3, 3], 1.1);
        let b = ramp(&[3], 2.0);
        let err = check_gradient(&[x, w, b], |tape, v| {
            let y = v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?;
            let probe = tape.constant(ramp(y.shape(), 0.5));
            Ok(y.mul(&probe)?.sum())
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let x = ramp(&[1, 1, 6, 6], 0.1);
        let w = ramp(&[2, 1, 3, 3], 0.9);
        let err = check_gradient(&[x, w], |tape, v| {
            let y = v[0].conv2d(&v[1], None, 2, 0)?;
            let probe = tape.constant(ramp(y.shape(), 0.2));
            Ok(y.mul(&probe)?.sum())
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn bmm_gradients_cover_transposed_operands() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = ramp(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 0.0);
            let b = ramp(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 1.0);
            let err = check_gradient(&[a, b], |tape, v| {
                let y = v[0].bmm(&v[1], ta, tb)?;
                let probe = tape.constant(ramp(y.shape(), 0.7));
                Ok(y.mul(&probe)?.sum())
            });
            assert!(err < 1e-6, "ta={ta} tb={tb}: {err}");
        }
    }

    #[test]
    fn softmax_layer_norm_and_resample_gradients() {
        let x = ramp(&[2, 3, 4, 4], 0.4);
        let g = ramp(&[3], 3.0);
        let b = ramp(&[3], 4.0);
        let err = check_gradient(&[x, g, b], |tape, v| {
            let y = v[0].layer_norm(&v[1], &v[2], 1e-5)?;
            let y = y.upsample_bilinear(7, 6)?.downsample_area(1)?;
            let y = y.reshape(&[2, 3, 42])?.softmax_last();
            let probe = tape.constant(ramp(y.shape(), 0.9));
            Ok(y.mul(&probe)?.sum())
        });
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn pointwise_op_gradients() {
        let x = ramp(&[3, 4], 0.2);
        let s = Tensor::scalar(0.7);
        let err = check_gradient(&[x, s], |tape, v| {
            let y = v[0].mul_scalar(&v[1])?.add_scalar(&v[1])?.asinh();
            let y = y.sigmoid().add(&y.relu())?.sub(&y.scale(0.3))?;
            let probe = tape.constant(ramp(y.shape(), 0.1));
            Ok(y.mul(&probe)?.sum())
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(!x.is_tracked());
        assert!(!x.relu().is_tracked());
    }

    #[test]
    fn meter_tracks_peak() {
        let m = AffinityMeter::default();
        m.acquire(10);
        m.acquire(5);
        m.release(10);
        m.acquire(3);
        assert_eq!((m.live(), m.peak(), m.total()), (8, 15, 18));
    }
}
