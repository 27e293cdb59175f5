//! Single-use reverse-mode differentiation tape.
//!
//! Operations append nodes in execution order, so the node list is already a
//! topological order and one reverse sweep propagates gradients. A value used
//! by several downstream ops accumulates the sum of all path gradients.
//!
//! The operator set is exactly what the embedding pipeline needs: convolution,
//! the pointwise nonlinearities, spatial softmax, map weighting, pooling, the
//! per-part linear reduction, concatenation and L2 normalization, plus the
//! small elementwise ops the test oracles build hinge losses from.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(u32);

impl ValueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    },
    Relu(ValueId),
    Sigmoid(ValueId),
    SoftmaxSpatial(ValueId),
    AvgPoolFull(ValueId),
    /// [H,W,C] feature map weighted pointwise by an [H,W] map.
    MulMap {
        x: ValueId,
        map: ValueId,
    },
    Linear {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    },
    Concat(Vec<ValueId>),
    L2Normalize {
        x: ValueId,
        eps: f64,
    },
    Reshape(ValueId),
    Affine {
        x: ValueId,
        scale: f64,
    },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Sum(ValueId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value (parameter or data); leaves receive gradients
    /// but propagate nothing further.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    /// Gradient of the last backward pass w.r.t. `id`, if any reached it.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.nodes[id.index()].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        id
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.index()].value.shape()
    }

    // ---- operators ----

    /// 2-D cross-correlation of an [H,W,Cin] input with [kh,kw,Cin,Cout]
    /// filters plus a [Cout] bias.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects [H,W,Cin] input and [kh,kw,Cin,Cout] filters, got {:?} and {:?}",
                xs, ws
            )));
        }
        let (h, wid, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input {:?} has Cin={} but filters {:?} expect Cin={}",
                xs, cin, ws, wcin
            )));
        }
        if bs != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias {:?} does not match Cout={}",
                bs, cout
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wid + 2 * pad {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                wid + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wid + 2 * pad - kw) / stride + 1;

        let xv = self.nodes[x.index()].value.data();
        let wv = self.nodes[w.index()].value.data();
        let bv = self.nodes[b.index()].value.data();
        let mut out = vec![0.0; oh * ow * cout];
        let mut acc = vec![0.0; cout];
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(bv);
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= wid as isize {
                            continue;
                        }
                        let xoff = (iy as usize * wid + ix as usize) * cin;
                        let woff = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xval = xv[xoff + ci];
                            let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                            for (a, wv_) in acc.iter_mut().zip(wrow) {
                                *a += xval * wv_;
                            }
                        }
                    }
                }
                out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout].copy_from_slice(&acc);
            }
        }
        let value = Tensor::new(vec![oh, ow, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let mut value = self.nodes[x.index()].value.clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(x))
    }

    /// Elementwise logistic function; outputs lie strictly inside (0,1).
    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let mut value = self.nodes[x.index()].value.clone();
        for v in value.data_mut() {
            *v = stable_sigmoid(*v);
        }
        self.push(value, Op::Sigmoid(x))
    }

    /// Softmax over all H*W positions of a 2-D map, with max subtraction.
    pub fn softmax_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_spatial expects an [H,W] map, got {:?}",
                xs
            )));
        }
        let mut value = self.nodes[x.index()].value.clone();
        let data = value.data_mut();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in data.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in data.iter_mut() {
            *v /= sum;
        }
        Ok(self.push(value, Op::SoftmaxSpatial(x)))
    }

    /// Per-channel mean over all spatial positions: [H,W,C] -> [C].
    pub fn avgpool_full(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "avgpool_full expects [H,W,C], got {:?}",
                xs
            )));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let xv = self.nodes[x.index()].value.data();
        let mut out = vec![0.0; c];
        for pos in 0..h * w {
            for ci in 0..c {
                out[ci] += xv[pos * c + ci];
            }
        }
        let inv = 1.0 / (h * w) as f64;
        for v in &mut out {
            *v *= inv;
        }
        Ok(self.push(Tensor::new(vec![c], out)?, Op::AvgPoolFull(x)))
    }

    /// Weights an [H,W,C] feature map by an [H,W] part map.
    pub fn mul_map(&mut self, x: ValueId, map: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        let ms = self.shape(map);
        if xs.len() != 3 || ms.len() != 2 || xs[0] != ms[0] || xs[1] != ms[1] {
            return Err(Error::ShapeMismatch(format!(
                "mul_map expects [H,W,C] and matching [H,W], got {:?} and {:?}",
                xs, ms
            )));
        }
        let c = xs[2];
        let xv = self.nodes[x.index()].value.data();
        let mv = self.nodes[map.index()].value.data();
        let mut out = vec![0.0; xv.len()];
        for (pos, &m) in mv.iter().enumerate() {
            for ci in 0..c {
                out[pos * c + ci] = xv[pos * c + ci] * m;
            }
        }
        let shape = xs.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulMap { x, map }))
    }

    /// Matrix-vector product y = W x (+ b when given); W is [d,n], x is [n].
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch(format!(
                "linear expects [d,n] weights by [n] input, got {:?} and {:?}",
                ws, xs
            )));
        }
        let (d, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [d] {
                return Err(Error::ShapeMismatch(format!(
                    "linear bias {:?} does not match output width {}",
                    bs, d
                )));
            }
        }
        let xv = self.nodes[x.index()].value.data();
        let wv = self.nodes[w.index()].value.data();
        let mut out = vec![0.0; d];
        for (row, o) in out.iter_mut().enumerate() {
            let wrow = &wv[row * n..(row + 1) * n];
            *o = wrow.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        if let Some(b) = b {
            let bv = self.nodes[b.index()].value.data();
            for (o, bv_) in out.iter_mut().zip(bv) {
                *o += bv_;
            }
        }
        Ok(self.push(Tensor::new(vec![d], out)?, Op::Linear { x, w, b }))
    }

    /// Concatenates 1-D vectors in order.
    pub fn concat(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::InvalidConfig("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &id in xs {
            let s = self.shape(id);
            if s.len() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "concat expects 1-D parts, got {:?}",
                    s
                )));
            }
            out.extend_from_slice(self.nodes[id.index()].value.data());
        }
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Concat(xs.to_vec())))
    }

    /// x / max(||x||, eps). Output norm is 1 whenever ||x|| >= eps.
    pub fn l2_normalize(&mut self, x: ValueId, eps: f64) -> ValueId {
        let value = &self.nodes[x.index()].value;
        let norm = value.squared_norm().sqrt();
        let r = norm.max(eps);
        let mut out = value.clone();
        for v in out.data_mut() {
            *v /= r;
        }
        self.push(out, Op::L2Normalize { x, eps })
    }

    /// Reinterprets the data buffer under a new shape of equal length.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let value = &self.nodes[x.index()].value;
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape of {:?} to {:?}",
                value.shape(),
                shape
            )));
        }
        let t = Tensor::new(shape, value.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: ValueId, scale: f64, shift: f64) -> ValueId {
        let mut value = self.nodes[x.index()].value.clone();
        for v in value.data_mut() {
            *v = scale * *v + shift;
        }
        self.push(value, Op::Affine { x, scale })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op between {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.nodes[a.index()].value.data();
        let bv = self.nodes[b.index()].value.data();
        let out: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let t = Tensor::new(shape, out).expect("same length by construction");
        Ok(self.push(t, op))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.nodes[x.index()].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    // ---- backward ----

    /// Propagates gradients from `root` to every reachable node.
    ///
    /// A scalar root defaults to seed 1; any other root requires an explicit
    /// seed of matching shape. Tapes are single-use: a second call fails.
    pub fn backward(&mut self, root: ValueId, seed: Option<Tensor>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;

        let seed = match seed {
            Some(s) => {
                if s.shape() != self.shape(root) {
                    return Err(Error::ShapeMismatch(format!(
                        "backward seed {:?} does not match root {:?}",
                        s.shape(),
                        self.shape(root)
                    )));
                }
                s
            }
            None => {
                if self.nodes[root.index()].value.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "backward from a non-scalar root requires a seed gradient".into(),
                    ));
                }
                Tensor::scalar(1.0)
            }
        };
        self.nodes[root.index()].grad = Some(seed);

        for i in (0..=root.index()).rev() {
            let go = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.backward_conv2d(i, x, w, b, stride, pad, &go)
                }
                Op::Relu(x) => {
                    let mask: Vec<f64> = self.nodes[x.index()]
                        .value
                        .data()
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    self.accumulate(x, |dx| {
                        for ((d, &g), m) in dx.iter_mut().zip(go.data()).zip(mask) {
                            *d += g * m;
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.data().to_vec();
                    self.accumulate(x, |dx| {
                        for ((d, &g), y) in dx.iter_mut().zip(go.data()).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
                Op::SoftmaxSpatial(x) => {
                    let y = self.nodes[i].value.data().to_vec();
                    let dot: f64 = y.iter().zip(go.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(x, |dx| {
                        for ((d, &g), y) in dx.iter_mut().zip(go.data()).zip(y) {
                            *d += y * (g - dot);
                        }
                    });
                }
                Op::AvgPoolFull(x) => {
                    let xs = self.shape(x).to_vec();
                    let (h, w, c) = (xs[0], xs[1], xs[2]);
                    let inv = 1.0 / (h * w) as f64;
                    self.accumulate(x, |dx| {
                        for pos in 0..h * w {
                            for ci in 0..c {
                                dx[pos * c + ci] += go.data()[ci] * inv;
                            }
                        }
                    });
                }
                Op::MulMap { x, map } => {
                    let c = self.shape(x)[2];
                    let xv = self.nodes[x.index()].value.data().to_vec();
                    let mv = self.nodes[map.index()].value.data().to_vec();
                    self.accumulate(x, |dx| {
                        for (pos, &m) in mv.iter().enumerate() {
                            for ci in 0..c {
                                dx[pos * c + ci] += go.data()[pos * c + ci] * m;
                            }
                        }
                    });
                    self.accumulate(map, |dm| {
                        for (pos, d) in dm.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for ci in 0..c {
                                s += go.data()[pos * c + ci] * xv[pos * c + ci];
                            }
                            *d += s;
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let ws = self.shape(w).to_vec();
                    let (d, n) = (ws[0], ws[1]);
                    let xv = self.nodes[x.index()].value.data().to_vec();
                    let wv = self.nodes[w.index()].value.data().to_vec();
                    self.accumulate(x, |dx| {
                        for row in 0..d {
                            let g = go.data()[row];
                            for (dxj, wj) in dx.iter_mut().zip(&wv[row * n..(row + 1) * n]) {
                                *dxj += g * wj;
                            }
                        }
                    });
                    self.accumulate(w, |dw| {
                        for row in 0..d {
                            let g = go.data()[row];
                            for (dwj, xj) in dw[row * n..(row + 1) * n].iter_mut().zip(&xv) {
                                *dwj += g * xj;
                            }
                        }
                    });
                    if let Some(b) = b {
                        self.accumulate(b, |db| {
                            for (d, &g) in db.iter_mut().zip(go.data()) {
                                *d += g;
                            }
                        });
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for part in parts {
                        let len = self.nodes[part.index()].value.len();
                        let slice = go.data()[off..off + len].to_vec();
                        self.accumulate(part, |dp| {
                            for (d, g) in dp.iter_mut().zip(slice) {
                                *d += g;
                            }
                        });
                        off += len;
                    }
                }
                Op::L2Normalize { x, eps } => {
                    let norm = self.nodes[x.index()].value.squared_norm().sqrt();
                    if norm >= eps {
                        let y = self.nodes[i].value.data().to_vec();
                        let dot: f64 = y.iter().zip(go.data()).map(|(a, b)| a * b).sum();
                        self.accumulate(x, |dx| {
                            for ((d, &g), y) in dx.iter_mut().zip(go.data()).zip(y) {
                                *d += (g - y * dot) / norm;
                            }
                        });
                    } else {
                        // Clamped branch: constant denominator eps.
                        self.accumulate(x, |dx| {
                            for (d, &g) in dx.iter_mut().zip(go.data()) {
                                *d += g / eps;
                            }
                        });
                    }
                }
                Op::Reshape(x) => {
                    self.accumulate(x, |dx| {
                        for (d, &g) in dx.iter_mut().zip(go.data()) {
                            *d += g;
                        }
                    });
                }
                Op::Affine { x, scale } => {
                    self.accumulate(x, |dx| {
                        for (d, &g) in dx.iter_mut().zip(go.data()) {
                            *d += scale * g;
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.accumulate(a, |da| {
                        for (d, &g) in da.iter_mut().zip(go.data()) {
                            *d += g;
                        }
                    });
                    self.accumulate(b, |db| {
                        for (d, &g) in db.iter_mut().zip(go.data()) {
                            *d += g;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, |da| {
                        for (d, &g) in da.iter_mut().zip(go.data()) {
                            *d += g;
                        }
                    });
                    self.accumulate(b, |db| {
                        for (d, &g) in db.iter_mut().zip(go.data()) {
                            *d -= g;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.index()].value.data().to_vec();
                    let bv = self.nodes[b.index()].value.data().to_vec();
                    self.accumulate(a, |da| {
                        for ((d, &g), b) in da.iter_mut().zip(go.data()).zip(bv) {
                            *d += g * b;
                        }
                    });
                    self.accumulate(b, |db| {
                        for ((d, &g), a) in db.iter_mut().zip(go.data()).zip(av) {
                            *d += g * a;
                        }
                    });
                }
                Op::Sum(x) => {
                    let g = go.data()[0];
                    self.accumulate(x, |dx| {
                        for d in dx.iter_mut() {
                            *d += g;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[id.index()];
        let grad = node.grad.get_or_insert_with(|| node.value.zeros_like());
        f(grad.data_mut());
    }

    fn backward_conv2d(
        &mut self,
        out: usize,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
        go: &Tensor,
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let os = self.nodes[out].value.shape().to_vec();
        let (h, wid, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[0], os[1]);

        let xv = self.nodes[x.index()].value.data().to_vec();
        let wv = self.nodes[w.index()].value.data().to_vec();
        let gov = go.data();

        let mut dx = vec![0.0; xv.len()];
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; cout];

        for oy in 0..oh {
            for ox in 0..ow {
                let goff = (oy * ow + ox) * cout;
                let g = &gov[goff..goff + cout];
                for (dbi, gi) in db.iter_mut().zip(g) {
                    *dbi += gi;
                }
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= wid as isize {
                            continue;
                        }
                        let xoff = (iy as usize * wid + ix as usize) * cin;
                        let woff = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xval = xv[xoff + ci];
                            let wrow = woff + ci * cout;
                            let mut acc = 0.0;
                            for co in 0..cout {
                                let gi = g[co];
                                dw[wrow + co] += xval * gi;
                                acc += wv[wrow + co] * gi;
                            }
                            dx[xoff + ci] += acc;
                        }
                    }
                }
            }
        }

        self.accumulate(x, |d| {
            for (a, b) in d.iter_mut().zip(&dx) {
                *a += b;
            }
        });
        self.accumulate(w, |d| {
            for (a, b) in d.iter_mut().zip(&dw) {
                *a += b;
            }
        });
        self.accumulate(b, |d| {
            for (a, b) in d.iter_mut().zip(&db) {
                *a += b;
            }
        });
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
