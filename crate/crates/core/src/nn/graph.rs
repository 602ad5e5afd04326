//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! its output. [`Graph::backward`] then walks the tape in reverse.

use std::rc::Rc;

use super::kernels::{self, col2im, gemm, im2col, Mat};
use super::layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, BN_EPS, BN_MOMENTUM};
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; outputs depend only on the inputs.
    Eval,
}

enum Op {
    Leaf,
    Conv { x: NodeId, layer: Conv2d },
    ConvT { x: NodeId, layer: ConvTranspose2x2 },
    BatchNorm { x: NodeId, layer: BatchNorm2d, xhat: Vec<f32>, inv_std: Vec<f32> },
    BatchNormEval { x: NodeId, layer: BatchNorm2d },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: f32 },
    Add { a: NodeId, b: NodeId },
    Concat { xs: Vec<NodeId> },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Resample { x: NodeId, ah: Rc<Mat>, aw: Rc<Mat> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics to blend into running statistics after a training step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f32>,
    /// Unbiased.
    pub batch_var: Vec<f32>,
}

impl ParamStore {
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (r, &b) in self.buffer_mut(u.mean).iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in self.buffer_mut(u.var).iter_mut().zip(&u.batch_var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    mode: Mode,
    param_grads: bool,
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Vec<f32>>>,
    leaves: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params[id.0].as_deref()
    }

    pub fn into_params(self) -> Vec<Option<Vec<f32>>> {
        self.params
    }

    /// Gradient of a leaf created with [`Graph::variable`].
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn take_leaf(&mut self, id: NodeId) -> Option<Tensor> {
        let i = self.leaves.iter().position(|(n, _)| *n == id)?;
        Some(self.leaves.swap_remove(i).1)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn accumulate_vec(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Graph { store, mode, param_grads: true, nodes: Vec::new(), bn_updates: Vec::new() }
    }

    /// Skip parameter gradients; useful when only input gradients matter.
    pub fn without_param_grads(mut self) -> Self {
        self.param_grads = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, x: NodeId) -> bool {
        self.nodes[x.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::leaf`].
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn conv2d(&mut self, x: NodeId, layer: &Conv2d) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        assert_eq!(c, layer.in_ch, "conv input channels");
        let g = layer.geom;
        let (ho, wo) = (g.out_len(h).expect("kernel fits"), g.out_len(w).expect("kernel fits"));
        let kk = c * g.kernel * g.kernel;
        let wt = self.store.value(layer.weight);
        let mut y = Tensor::zeros([n, layer.out_ch, ho, wo]);
        let plane = ho * wo;
        let col = batched_col(xv, g, ho, wo);
        let mut yt = vec![0.0; layer.out_ch * n * plane];
        gemm(layer.out_ch, kk, n * plane, wt, false, &col, false, &mut yt, 0.0);
        scatter_batch(&yt, &mut y, plane);
        if let Some(b) = layer.bias {
            let bias = self.store.value(b);
            let plane = ho * wo;
            for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
                let bv = bias[i % layer.out_ch];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.needs(x) || self.param_grads;
        self.push(y, Op::Conv { x, layer: *layer }, ng)
    }

    pub fn conv_transpose2x2(&mut self, x: NodeId, layer: &ConvTranspose2x2) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        assert_eq!(c, layer.in_ch, "transposed conv input channels");
        let co = layer.out_ch;
        let wt = self.store.value(layer.weight);
        let bias = self.store.value(layer.bias);
        let mut y = Tensor::zeros([n, co, 2 * h, 2 * w]);
        let mut t = vec![0.0; co * 4 * h * w];
        for s in 0..n {
            gemm(co * 4, c, h * w, wt, true, xv.sample(s), false, &mut t, 0.0);
            let ys = y.sample_mut(s);
            for o in 0..co {
                for a in 0..2 {
                    for b in 0..2 {
                        let src = &t[(o * 4 + a * 2 + b) * h * w..][..h * w];
                        for i in 0..h {
                            let row = &mut ys[(o * 2 * h + 2 * i + a) * 2 * w..][..2 * w];
                            for j in 0..w {
                                row[2 * j + b] = src[i * w + j] + bias[o];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.param_grads;
        self.push(y, Op::ConvT { x, layer: *layer }, ng)
    }

    pub fn batch_norm(&mut self, x: NodeId, layer: &BatchNorm2d) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        assert_eq!(c, layer.channels, "batch norm channels");
        let gamma = self.store.value(layer.gamma);
        let beta = self.store.value(layer.beta);
        let plane = h * w;
        let mut y = Tensor::zeros(xv.shape());
        let ng = self.needs(x) || self.param_grads;
        match self.mode {
            Mode::Eval => {
                let rm = self.store.buffer(layer.running_mean);
                let rv = self.store.buffer(layer.running_var);
                for s in 0..n {
                    for ch in 0..c {
                        let scale = gamma[ch] / (rv[ch] + BN_EPS).sqrt();
                        let shift = beta[ch] - rm[ch] * scale;
                        let off = (s * c + ch) * plane;
                        for (yv, &xv) in y.data_mut()[off..off + plane].iter_mut().zip(&xv.data()[off..off + plane]) {
                            *yv = xv * scale + shift;
                        }
                    }
                }
                self.push(y, Op::BatchNormEval { x, layer: *layer }, ng)
            }
            Mode::Train => {
                let m = (n * plane) as f64;
                let mut mean = vec![0.0f32; c];
                let mut var_b = vec![0.0f32; c];
                let mut var_u = vec![0.0f32; c];
                let mut inv_std = vec![0.0f32; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        sum += xv.plane(s, ch).iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = sum / m;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        sq += xv.plane(s, ch).iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var_b[ch] = (sq / m) as f32;
                    var_u[ch] = if m > 1.0 { (sq / (m - 1.0)) as f32 } else { 0.0 };
                    inv_std[ch] = 1.0 / (var_b[ch] + BN_EPS).sqrt();
                }
                let mut xhat = vec![0.0f32; xv.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                        for i in off..off + plane {
                            let xh = (xv.data()[i] - mu) * is;
                            xhat[i] = xh;
                            y.data_mut()[i] = g * xh + b;
                        }
                    }
                }
                self.bn_updates.push(BnUpdate {
                    mean: layer.running_mean,
                    var: layer.running_var,
                    batch_mean: mean,
                    batch_var: var_u,
                });
                self.push(y, Op::BatchNorm { x, layer: *layer, xhat, inv_std }, ng)
            }
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.nodes[x.0].value.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.needs(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let mut y = self.nodes[x.0].value.clone();
        y.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        let ng = self.needs(x);
        self.push(y, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.nodes[a.0].value.clone();
        assert_eq!(y.shape(), self.nodes[b.0].value.shape(), "add shapes");
        y.add_assign(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Add { a, b }, ng)
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let first = self.nodes[xs[0].0].value.shape();
        let (n, h, w) = (first[0], first[2], first[3]);
        let c: usize = xs.iter().map(|x| self.nodes[x.0].value.c()).sum();
        let mut y = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            let mut off = 0;
            for x in xs {
                let v = &self.nodes[x.0].value;
                assert_eq!((v.n(), v.h(), v.w()), (n, h, w), "concat shapes");
                let src = v.sample(s);
                y.sample_mut(s)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(y, Op::Concat { xs: xs.to_vec() }, ng)
    }

    /// 3×3 max pooling with stride 2 and padding 1.
    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let mut y = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0usize;
                    for ki in 0..3 {
                        let ih = (oh * 2 + ki) as isize - 1;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..3 {
                            let iw = (ow * 2 + kj) as isize - 1;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let i = ih as usize * w + iw as usize;
                            if src[i] > best {
                                best = src[i];
                                at = i;
                            }
                        }
                    }
                    let o = (p * ho + oh) * wo + ow;
                    y.data_mut()[o] = best;
                    argmax[o] = at as u32;
                }
            }
        }
        let ng = self.needs(x);
        self.push(y, Op::MaxPool { x, argmax }, ng)
    }

    /// Separable linear resampling of every plane: `a_h · x · a_wᵀ`.
    pub fn resample(&mut self, x: NodeId, ah: Rc<Mat>, aw: Rc<Mat>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        assert_eq!((ah.cols, aw.cols), (h, w), "resample input size");
        let (ho, wo) = (ah.rows, aw.rows);
        let mut y = Tensor::zeros([n, c, ho, wo]);
        let mut tmp = vec![0.0; h * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            kernels::resample_plane(src, &ah, &aw, &mut tmp, &mut y.data_mut()[p * ho * wo..(p + 1) * ho * wo]);
        }
        let ng = self.needs(x);
        self.push(y, Op::Resample { x, ah, aw }, ng)
    }

    /// Bilinear resize to `(h, w)`; identity when the size already matches.
    pub fn resize(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        if (v.h(), v.w()) == (h, w) {
            return x;
        }
        let ah = Rc::new(Mat::bilinear(v.h(), h));
        let aw = Rc::new(Mat::bilinear(v.w(), w));
        self.resample(x, ah, aw)
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        let store = self.store;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.nodes[id.0].value.shape(), "seed shape");
            accumulate(&mut grads[id.0], g);
        }
        let mut pgrads: Vec<Option<Vec<f32>>> = (0..store.len()).map(|_| None).collect();
        let mut leaves = Vec::new();

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves.push((NodeId(i), gy)),
                Op::Conv { x, layer } => {
                    let gx = self.conv_backward(*x, layer, &gy, &mut pgrads);
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::ConvT { x, layer } => {
                    let gx = self.convt_backward(*x, layer, &gy, &mut pgrads);
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::BatchNorm { x, layer, xhat, inv_std } => {
                    let [n, c, h, w] = gy.shape();
                    let plane = h * w;
                    let m = (n * plane) as f32;
                    let gamma = store.value(layer.gamma);
                    let mut sum_g = vec![0.0f64; c];
                    let mut sum_gx = vec![0.0f64; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for k in off..off + plane {
                                sum_g[ch] += gy.data()[k] as f64;
                                sum_gx[ch] += (gy.data()[k] * xhat[k]) as f64;
                            }
                        }
                    }
                    if self.param_grads {
                        let gg = accumulate_vec(&mut pgrads[layer.gamma.0], c);
                        for ch in 0..c {
                            gg[ch] += sum_gx[ch] as f32;
                        }
                        let gb = accumulate_vec(&mut pgrads[layer.beta.0], c);
                        for ch in 0..c {
                            gb[ch] += sum_g[ch] as f32;
                        }
                    }
                    if self.needs(*x) {
                        let mut gx = Tensor::zeros(gy.shape());
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * plane;
                                let k1 = gamma[ch] * inv_std[ch] / m;
                                let (sg, sgx) = (sum_g[ch] as f32, sum_gx[ch] as f32);
                                for k in off..off + plane {
                                    gx.data_mut()[k] = k1 * (m * gy.data()[k] - sg - xhat[k] * sgx);
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::BatchNormEval { x, layer } => {
                    let [n, c, h, w] = gy.shape();
                    let plane = h * w;
                    let gamma = store.value(layer.gamma);
                    let rm = store.buffer(layer.running_mean);
                    let rv = store.buffer(layer.running_var);
                    let xv = &self.nodes[x.0].value;
                    if self.param_grads {
                        let mut dg = vec![0.0f32; c];
                        let mut db = vec![0.0f32; c];
                        for s in 0..n {
                            for ch in 0..c {
                                let is = 1.0 / (rv[ch] + BN_EPS).sqrt();
                                let off = (s * c + ch) * plane;
                                for k in off..off + plane {
                                    dg[ch] += gy.data()[k] * (xv.data()[k] - rm[ch]) * is;
                                    db[ch] += gy.data()[k];
                                }
                            }
                        }
                        let gg = accumulate_vec(&mut pgrads[layer.gamma.0], c);
                        gg.iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
                        let gb = accumulate_vec(&mut pgrads[layer.beta.0], c);
                        gb.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                    }
                    if self.needs(*x) {
                        let mut gx = gy.clone();
                        for s in 0..n {
                            for ch in 0..c {
                                let scale = gamma[ch] / (rv[ch] + BN_EPS).sqrt();
                                let off = (s * c + ch) * plane;
                                gx.data_mut()[off..off + plane].iter_mut().for_each(|v| *v *= scale);
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Relu { x } => {
                    let mut gx = gy;
                    for (g, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let mut gx = gy;
                    for (g, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y < 0.0 {
                            *g *= slope;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], gy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Concat { xs } => {
                    let n = gy.n();
                    let mut off = 0;
                    for x in xs {
                        let shape = self.nodes[x.0].value.shape();
                        let len = shape[1] * shape[2] * shape[3];
                        if self.needs(*x) {
                            let mut gx = Tensor::zeros(shape);
                            for s in 0..n {
                                gx.sample_mut(s).copy_from_slice(&gy.sample(s)[off..off + len]);
                            }
                            accumulate(&mut grads[x.0], gx);
                        }
                        off += len;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let shape = self.nodes[x.0].value.shape();
                    let plane_in = shape[2] * shape[3];
                    let plane_out = gy.h() * gy.w();
                    let mut gx = Tensor::zeros(shape);
                    for (o, (&g, &at)) in gy.data().iter().zip(argmax).enumerate() {
                        let p = o / plane_out;
                        gx.data_mut()[p * plane_in + at as usize] += g;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Resample { x, ah, aw } => {
                    let shape = self.nodes[x.0].value.shape();
                    let (h, w) = (shape[2], shape[3]);
                    let (ho, wo) = (ah.rows, aw.rows);
                    let mut gx = Tensor::zeros(shape);
                    let mut tmp = vec![0.0; ho * w];
                    for p in 0..shape[0] * shape[1] {
                        kernels::resample_plane_backward(
                            &gy.data()[p * ho * wo..(p + 1) * ho * wo],
                            ah,
                            aw,
                            &mut tmp,
                            &mut gx.data_mut()[p * h * w..(p + 1) * h * w],
                        );
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Gradients { params: pgrads, leaves }
    }

    fn conv_backward(
        &self,
        x: NodeId,
        layer: &Conv2d,
        gy: &Tensor,
        pgrads: &mut [Option<Vec<f32>>],
    ) -> Option<Tensor> {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let g = layer.geom;
        let (ho, wo) = (gy.h(), gy.w());
        let kk = c * g.kernel * g.kernel;
        let co = layer.out_ch;
        let wt = self.store.value(layer.weight);
        let want_x = self.needs(x);
        let mut gx = want_x.then(|| Tensor::zeros(xv.shape()));
        let plane = ho * wo;
        let np = n * plane;
        let gyt = gather_batch(gy, plane);
        let mut dw = self.param_grads.then(|| vec![0.0f32; co * kk]);
        if let Some(dw) = dw.as_mut() {
            let col = batched_col(xv, g, ho, wo);
            gemm(co, np, kk, &gyt, false, &col, true, dw, 0.0);
        }
        if let Some(gx) = gx.as_mut() {
            let mut col = vec![0.0; kk * np];
            gemm(kk, co, np, wt, true, &gyt, false, &mut col, 0.0);
            for s in 0..n {
                let dst = gx.sample_mut(s);
                if g.is_pointwise() {
                    for (ci, d) in dst.chunks_mut(plane).enumerate() {
                        let src = &col[ci * np + s * plane..ci * np + (s + 1) * plane];
                        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                } else {
                    col2im(&col[s * plane..], c, h, w, g, dst, np);
                }
            }
        }
        if let Some(dw) = dw {
            let slot = accumulate_vec(&mut pgrads[layer.weight.0], co * kk);
            slot.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            if let Some(b) = layer.bias {
                let plane = ho * wo;
                let slot = accumulate_vec(&mut pgrads[b.0], co);
                for (i, chunk) in gy.data().chunks(plane).enumerate() {
                    slot[i % co] += chunk.iter().sum::<f32>();
                }
            }
        }
        gx
    }

    fn convt_backward(
        &self,
        x: NodeId,
        layer: &ConvTranspose2x2,
        gy: &Tensor,
        pgrads: &mut [Option<Vec<f32>>],
    ) -> Option<Tensor> {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let co = layer.out_ch;
        let wt = self.store.value(layer.weight);
        let want_x = self.needs(x);
        let mut gx = want_x.then(|| Tensor::zeros(xv.shape()));
        let mut dw = self.param_grads.then(|| vec![0.0f32; c * co * 4]);
        let mut db = vec![0.0f32; co];
        let mut t = vec![0.0; co * 4 * h * w];
        for s in 0..n {
            let gys = gy.sample(s);
            for o in 0..co {
                for a in 0..2 {
                    for b in 0..2 {
                        let dst = &mut t[(o * 4 + a * 2 + b) * h * w..][..h * w];
                        for i in 0..h {
                            let row = &gys[(o * 2 * h + 2 * i + a) * 2 * w..][..2 * w];
                            for j in 0..w {
                                dst[i * w + j] = row[2 * j + b];
                            }
                        }
                    }
                }
                db[o] += gys[o * 4 * h * w..(o + 1) * 4 * h * w].iter().sum::<f32>();
            }
            if let Some(gx) = gx.as_mut() {
                gemm(c, co * 4, h * w, wt, false, &t, false, gx.sample_mut(s), 1.0);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(c, h * w, co * 4, xv.sample(s), false, &t, true, dw, 1.0);
            }
        }
        if let Some(dw) = dw {
            let slot = accumulate_vec(&mut pgrads[layer.weight.0], c * co * 4);
            slot.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            let slot = accumulate_vec(&mut pgrads[layer.bias.0], co);
            slot.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        }
        gx
    }
}

/// Unfolds a whole batch into one `(c*k*k) × (n*ho*wo)` matrix, sample `s`
/// occupying columns `s*ho*wo..`.
fn batched_col(x: &Tensor, g: kernels::ConvGeom, ho: usize, wo: usize) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    if g.is_pointwise() && n == 1 {
        return x.data().to_vec();
    }
    let plane = ho * wo;
    let np = n * plane;
    let kk = c * g.kernel * g.kernel;
    let mut col = vec![0.0; kk * np];
    for s in 0..n {
        if g.is_pointwise() {
            for (ci, src) in x.sample(s).chunks(plane).enumerate() {
                col[ci * np + s * plane..ci * np + (s + 1) * plane].copy_from_slice(src);
            }
        } else {
            im2col(x.sample(s), c, h, w, g, &mut col[s * plane..], np);
        }
    }
    col
}

/// `(c, n*p)` channel-major rows to an NCHW tensor.
fn scatter_batch(src: &[f32], y: &mut Tensor, plane: usize) {
    let [n, c, _, _] = y.shape();
    let np = n * plane;
    for s in 0..n {
        for (ci, d) in y.sample_mut(s).chunks_mut(plane).enumerate() {
            d.copy_from_slice(&src[ci * np + s * plane..ci * np + (s + 1) * plane]);
        }
    }
    debug_assert_eq!(src.len(), c * np);
}

/// Inverse of [`scatter_batch`].
fn gather_batch(y: &Tensor, plane: usize) -> Vec<f32> {
    let [n, c, _, _] = y.shape();
    let np = n * plane;
    let mut out = vec![0.0; c * np];
    for s in 0..n {
        for (ci, src) in y.sample(s).chunks(plane).enumerate() {
            out[ci * np + s * plane..ci * np + (s + 1) * plane].copy_from_slice(src);
        }
    }
    out
}
