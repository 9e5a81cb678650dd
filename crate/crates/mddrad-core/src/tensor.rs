//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every [`Tensor`] created during a forward pass; operations
//! append nodes, so the tape index order is a topological order of the
//! computation. [`Tape::backward`] replays the tape in reverse, accumulating
//! gradients at fan-in. There is no graph optimization; everything is a flat
//! arena of nodes.

use crate::error::{MddError, Result};

/// Handle into a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One node on the tape: the forward value plus the recipe that produced it.
#[derive(Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    /// True when this node, or anything upstream of it, requires gradients.
    track: bool,
    op: Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
    },
    /// [n,k] + broadcast row [k]
    AddRow(Var, Var),
    /// [n,c,h,w] + broadcast per-channel bias [c]
    AddChan(Var, Var),
    Sum(Var),
    MeanAxis(Var, usize),
    /// Subgradient routes to the first maximal index on ties.
    MaxAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    LogSumExp(Var),
    /// Forward identity; backward multiplies by -eta.
    GradReverse(Var, f64),
    /// Per-row log-sum-exp loss for 1-based labels: [n,k] -> [n].
    LseLoss(Var, Vec<usize>),
    /// Per-row adversarial loss log(1 - sigma_y): [n,k] -> [n].
    AdvLoss(Var, Vec<usize>),
}

/// Floor applied to 1 - sigma_y before the log in the adversarial losses.
/// When the clamp is active the gradient is zero.
pub const ADV_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, track: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            track,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].track
    }

    /// Insert a leaf value. `requires_grad` leaves receive a populated
    /// gradient buffer after [`Tape::backward`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(MddError::Dimension {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let v = self.push(shape.to_vec(), data, requires_grad, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![1], vec![x], false, Op::Leaf)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(MddError::Dimension {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, track, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, track, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, track, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let track = self.tracked(a);
        self.push(self.nodes[a.0].shape.clone(), data, track, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let track = self.tracked(a);
        self.push(self.nodes[a.0].shape.clone(), data, track, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let track = self.tracked(a);
        self.push(self.nodes[a.0].shape.clone(), data, track, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let track = self.tracked(a);
        self.push(self.nodes[a.0].shape.clone(), data, track, Op::Log(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MddError::Dimension {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * p];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for l in 0..n {
                    let av = da[i * n + l];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &db[l * p..(l + 1) * p];
                    let out = &mut data[i * p..(i + 1) * p];
                    for j in 0..p {
                        out[j] += av * row[j];
                    }
                }
            }
        }
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, p], data, track, Op::MatMul(a, b)))
    }

    /// Valid (unpadded) 2-d convolution. `input` is [c,h,w] or [n,c,h,w];
    /// `kernels` is [o,c,kh,kw]. Output is [o,h',w'] or [n,o,h',w'] with
    /// h' = floor((h-kh)/stride)+1.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernels.0].shape.clone();
        if sk.len() != 4 || (si.len() != 3 && si.len() != 4) {
            return Err(MddError::Dimension {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let batched = si.len() == 4;
        let (n, c, h, w) = if batched {
            (si[0], si[1], si[2], si[3])
        } else {
            (1, si[0], si[1], si[2])
        };
        let (o, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c || kh > h || kw > w || stride == 0 {
            return Err(MddError::Dimension {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut data = vec![0.0; n * o * oh * ow];
        {
            let din = &self.nodes[input.0].data;
            let dk = &self.nodes[kernels.0].data;
            for bi in 0..n {
                for oc in 0..o {
                    for ic in 0..c {
                        let kbase = ((oc * c) + ic) * kh * kw;
                        let ibase = (bi * c + ic) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0.0;
                                for ky in 0..kh {
                                    let irow = ibase + (oy * stride + ky) * w + ox * stride;
                                    let krow = kbase + ky * kw;
                                    for kx in 0..kw {
                                        acc += din[irow + kx] * dk[krow + kx];
                                    }
                                }
                                data[((bi * o + oc) * oh + oy) * ow + ox] += acc;
                            }
                        }
                    }
                }
            }
        }
        let out_shape = if batched {
            vec![n, o, oh, ow]
        } else {
            vec![o, oh, ow]
        };
        let track = self.tracked(input) || self.tracked(kernels);
        Ok(self.push(
            out_shape,
            data,
            track,
            Op::Conv2d {
                input,
                kernels,
                stride,
            },
        ))
    }

    /// [n,k] plus a broadcast row [k].
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (sm, sr) = (&self.nodes[m.0].shape, &self.nodes[row.0].shape);
        if sm.len() != 2 || sr.len() != 1 || sm[1] != sr[0] {
            return Err(MddError::Dimension {
                op: "add_row",
                lhs: sm.clone(),
                rhs: sr.clone(),
            });
        }
        let (n, k) = (sm[0], sm[1]);
        let mut data = self.nodes[m.0].data.clone();
        for i in 0..n {
            for j in 0..k {
                data[i * k + j] += self.nodes[row.0].data[j];
            }
        }
        let track = self.tracked(m) || self.tracked(row);
        Ok(self.push(vec![n, k], data, track, Op::AddRow(m, row)))
    }

    /// [n,c,h,w] (or [c,h,w]) plus a broadcast per-channel bias [c].
    pub fn add_chan(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sb = &self.nodes[bias.0].shape;
        let (c_axis, ok) = match sx.len() {
            3 => (0, sb.len() == 1 && sb[0] == sx[0]),
            4 => (1, sb.len() == 1 && sb[0] == sx[1]),
            _ => (0, false),
        };
        if !ok {
            return Err(MddError::Dimension {
                op: "add_chan",
                lhs: sx,
                rhs: sb.clone(),
            });
        }
        let c = sx[c_axis];
        let inner: usize = sx[c_axis + 1..].iter().product();
        let outer: usize = sx[..c_axis].iter().product();
        let mut data = self.nodes[x.0].data.clone();
        for b in 0..outer {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let bv = self.nodes[bias.0].data[ch];
                for t in &mut data[base..base + inner] {
                    *t += bv;
                }
            }
        }
        let track = self.tracked(x) || self.tracked(bias);
        Ok(self.push(sx, data, track, Op::AddChan(x, bias)))
    }

    /// Sum of all entries, as a scalar tensor of shape [1].
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let track = self.tracked(a);
        self.push(vec![1], vec![s], track, Op::Sum(a))
    }

    /// Mean along one axis; the axis is removed (a rank-1 input yields [1]).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(MddError::contract(format!(
                "mean_axis: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for b in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[b * inner + i] += self.nodes[a.0].data[(b * len + l) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v /= len as f64;
        }
        let out_shape = removed_axis_shape(&shape, axis);
        let track = self.tracked(a);
        Ok(self.push(out_shape, data, track, Op::MeanAxis(a, axis)))
    }

    /// Max along one axis; ties route the subgradient to the first maximal
    /// index. The axis is removed (a rank-1 input yields [1]).
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(MddError::contract(format!(
                "max_axis: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        for b in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = self.nodes[a.0].data[(b * len + l) * inner + i];
                    if v > data[b * inner + i] {
                        data[b * inner + i] = v;
                    }
                }
            }
        }
        let out_shape = removed_axis_shape(&shape, axis);
        let track = self.tracked(a);
        Ok(self.push(out_shape, data, track, Op::MaxAxis(a, axis)))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        if numel(new_shape) != self.nodes[a.0].data.len() {
            return Err(MddError::Dimension {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let track = self.tracked(a);
        Ok(self.push(new_shape.to_vec(), data, track, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        self.reshape(a, &[n]).expect("flatten cannot fail")
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(MddError::contract("concat: empty input list"));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(MddError::contract(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(MddError::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        for b in 0..outer {
            let mut off = 0;
            for p in parts {
                let plen = self.nodes[p.0].shape[axis];
                let src = &self.nodes[p.0].data[b * plen * inner..(b + 1) * plen * inner];
                let dst_base = (b * axis_total + off) * inner;
                data[dst_base..dst_base + plen * inner].copy_from_slice(src);
                off += plen;
            }
        }
        let track = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(out_shape, data, track, Op::Concat(parts.to_vec(), axis)))
    }

    /// Numerically stable log-sum-exp of a rank-1 tensor, as a scalar.
    pub fn logsumexp(&mut self, z: Var) -> Result<Var> {
        let s = &self.nodes[z.0].shape;
        if s.len() != 1 || s[0] == 0 {
            return Err(MddError::Dimension {
                op: "logsumexp",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let d = &self.nodes[z.0].data;
        if d.iter().any(|x| x.is_nan()) {
            return Err(MddError::Numeric("logsumexp: NaN input".into()));
        }
        let v = crate::losses::logsumexp_slice(d);
        let track = self.tracked(z);
        Ok(self.push(vec![1], vec![v], track, Op::LogSumExp(z)))
    }

    /// Gradient reversal: identity forward, incoming gradient scaled by
    /// -eta on the way back.
    pub fn grad_reverse(&mut self, a: Var, eta: f64) -> Var {
        let data = self.nodes[a.0].data.clone();
        let track = self.tracked(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            track,
            Op::GradReverse(a, eta),
        )
    }

    /// Per-row LSE (cross-entropy) loss for 1-based labels: [n,k] -> [n].
    pub fn lse_loss(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_scores("lse_loss", scores, labels)?;
        let mut data = vec![0.0; n];
        for i in 0..n {
            let row = &self.nodes[scores.0].data[i * k..(i + 1) * k];
            data[i] = crate::losses::logsumexp_slice(row) - row[labels[i] - 1];
        }
        let track = self.tracked(scores);
        Ok(self.push(
            vec![n],
            data,
            track,
            Op::LseLoss(scores, labels.to_vec()),
        ))
    }

    /// Per-row adversarial loss log(1 - sigma_y): [n,k] -> [n], with the
    /// [`ADV_CLAMP`] floor inside the log.
    pub fn adv_loss(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_scores("adv_loss", scores, labels)?;
        let mut data = vec![0.0; n];
        for i in 0..n {
            let row = &self.nodes[scores.0].data[i * k..(i + 1) * k];
            let p = crate::losses::softmax_slice(row);
            data[i] = (1.0 - p[labels[i] - 1]).max(ADV_CLAMP).ln();
        }
        let track = self.tracked(scores);
        Ok(self.push(
            vec![n],
            data,
            track,
            Op::AdvLoss(scores, labels.to_vec()),
        ))
    }

    fn check_scores(&self, op: &'static str, scores: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let s = &self.nodes[scores.0].shape;
        if s.len() != 2 {
            return Err(MddError::Dimension {
                op,
                lhs: s.clone(),
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(MddError::contract(format!(
                "{op}: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y < 1 || y > k) {
            return Err(MddError::contract(format!(
                "{op}: label {bad} out of range 1..={k}"
            )));
        }
        Ok((n, k))
    }

    /// Reverse pass from a scalar root. Gradients accumulate (sum) at
    /// fan-in; every tracked node reachable from the root ends up with a
    /// populated gradient buffer (zeros where unreachable).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(MddError::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for node in &mut self.nodes {
            if node.track {
                node.grad = Some(vec![0.0; node.data.len()]);
            } else {
                node.grad = None;
            }
        }
        if !self.nodes[root.0].track {
            // Nothing requires gradients anywhere upstream.
            return Ok(());
        }
        self.nodes[root.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].track || self.nodes[i].grad.is_none() {
                continue;
            }
            let gout = self.nodes[i].grad.clone().unwrap();
            if gout.iter().all(|g| *g == 0.0) {
                continue;
            }
            self.apply_vjp(i, &gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if self.nodes[v.0].track {
            if let Some(g) = self.nodes[v.0].grad.as_mut() {
                contrib(g);
            }
        }
    }

    fn apply_vjp(&mut self, i: usize, gout: &[f64]) {
        // Ops only reference earlier indices, so splitting the borrow by
        // cloning the small metadata is unnecessary; we match on a raw
        // pointer-free copy of the op via indices.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(*b, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(*b, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                self.add_grad(*a, |g| {
                    for ((gi, go), bv) in g.iter_mut().zip(gout).zip(&db) {
                        *gi += go * bv;
                    }
                });
                self.add_grad(*b, |g| {
                    for ((gi, go), av) in g.iter_mut().zip(gout).zip(&da) {
                        *gi += go * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(*a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                });
            }
            Op::Relu(a) => {
                let da = self.nodes[a.0].data.clone();
                self.add_grad(*a, |g| {
                    for ((gi, go), x) in g.iter_mut().zip(gout).zip(&da) {
                        if *x > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let dout = self.nodes[i].data.clone();
                self.add_grad(*a, |g| {
                    for ((gi, go), y) in g.iter_mut().zip(gout).zip(&dout) {
                        *gi += go * y;
                    }
                });
            }
            Op::Log(a) => {
                let da = self.nodes[a.0].data.clone();
                self.add_grad(*a, |g| {
                    for ((gi, go), x) in g.iter_mut().zip(gout).zip(&da) {
                        *gi += go / x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let p = self.nodes[b.0].shape[1];
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                // dA = gout * B^T
                self.add_grad(*a, |g| {
                    for i2 in 0..m {
                        for l in 0..n {
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += gout[i2 * p + j] * db[l * p + j];
                            }
                            g[i2 * n + l] += acc;
                        }
                    }
                });
                // dB = A^T * gout
                self.add_grad(*b, |g| {
                    for l in 0..n {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += da[i2 * n + l] * gout[i2 * p + j];
                            }
                            g[l * p + j] += acc;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
            } => {
                self.conv2d_vjp(*input, *kernels, *stride, gout);
            }
            Op::AddRow(m, row) => {
                let (n, k) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                self.add_grad(*m, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(*row, |g| {
                    for i2 in 0..n {
                        for j in 0..k {
                            g[j] += gout[i2 * k + j];
                        }
                    }
                });
            }
            Op::AddChan(x, bias) => {
                let sx = self.nodes[x.0].shape.clone();
                let c_axis = if sx.len() == 4 { 1 } else { 0 };
                let c = sx[c_axis];
                let inner: usize = sx[c_axis + 1..].iter().product();
                let outer: usize = sx[..c_axis].iter().product();
                self.add_grad(*x, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(*bias, |g| {
                    for b in 0..outer {
                        for (ch, gc) in g.iter_mut().enumerate() {
                            let base = (b * c + ch) * inner;
                            let mut acc = 0.0;
                            for t in &gout[base..base + inner] {
                                acc += t;
                            }
                            *gc += acc;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let go = gout[0];
                self.add_grad(*a, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let scale = 1.0 / len as f64;
                self.add_grad(*a, |g| {
                    for b in 0..outer {
                        for l in 0..len {
                            for i2 in 0..inner {
                                g[(b * len + l) * inner + i2] += gout[b * inner + i2] * scale;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(a, axis) => {
                let shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let da = self.nodes[a.0].data.clone();
                self.add_grad(*a, |g| {
                    for b in 0..outer {
                        for i2 in 0..inner {
                            let mut best = 0;
                            let mut bestv = da[(b * len) * inner + i2];
                            for l in 1..len {
                                let v = da[(b * len + l) * inner + i2];
                                if v > bestv {
                                    bestv = v;
                                    best = l;
                                }
                            }
                            g[(b * len + best) * inner + i2] += gout[b * inner + i2];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.add_grad(*a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let out_shape = self.nodes[i].shape.clone();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut off = 0;
                for p in parts {
                    let plen = self.nodes[p.0].shape[*axis];
                    let poff = off;
                    self.add_grad(*p, |g| {
                        for b in 0..outer {
                            let src_base = (b * axis_total + poff) * inner;
                            let dst_base = b * plen * inner;
                            for t in 0..plen * inner {
                                g[dst_base + t] += gout[src_base + t];
                            }
                        }
                    });
                    off += plen;
                }
            }
            Op::LogSumExp(z) => {
                let p = crate::losses::softmax_slice(&self.nodes[z.0].data);
                let go = gout[0];
                self.add_grad(*z, |g| {
                    for (gi, pi) in g.iter_mut().zip(&p) {
                        *gi += go * pi;
                    }
                });
            }
            Op::GradReverse(a, eta) => {
                let eta = *eta;
                self.add_grad(*a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi -= eta * go;
                    }
                });
            }
            Op::LseLoss(scores, labels) => {
                let k = self.nodes[scores.0].shape[1];
                let d = self.nodes[scores.0].data.clone();
                self.add_grad(*scores, |g| {
                    for (i2, &y) in labels.iter().enumerate() {
                        let row = &d[i2 * k..(i2 + 1) * k];
                        let p = crate::losses::softmax_slice(row);
                        let go = gout[i2];
                        for j in 0..k {
                            let onehot = if j == y - 1 { 1.0 } else { 0.0 };
                            g[i2 * k + j] += go * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::AdvLoss(scores, labels) => {
                let k = self.nodes[scores.0].shape[1];
                let d = self.nodes[scores.0].data.clone();
                self.add_grad(*scores, |g| {
                    for (i2, &y) in labels.iter().enumerate() {
                        let row = &d[i2 * k..(i2 + 1) * k];
                        let p = crate::losses::softmax_slice(row);
                        let py = p[y - 1];
                        // Gradient flows only while the clamp is inactive.
                        if 1.0 - py <= ADV_CLAMP {
                            continue;
                        }
                        let go = gout[i2];
                        for j in 0..k {
                            let onehot = if j == y - 1 { 1.0 } else { 0.0 };
                            g[i2 * k + j] -= go * py * (onehot - p[j]) / (1.0 - py);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn conv2d_vjp(&mut self, input: Var, kernels: Var, stride: usize, gout: &[f64]) {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernels.0].shape.clone();
        let batched = si.len() == 4;
        let (n, c, h, w) = if batched {
            (si[0], si[1], si[2], si[3])
        } else {
            (1, si[0], si[1], si[2])
        };
        let (o, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let din = self.nodes[input.0].data.clone();
        let dk = self.nodes[kernels.0].data.clone();
        self.add_grad(input, |g| {
            for bi in 0..n {
                for oc in 0..o {
                    for ic in 0..c {
                        let kbase = ((oc * c) + ic) * kh * kw;
                        let ibase = (bi * c + ic) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout[((bi * o + oc) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let irow = ibase + (oy * stride + ky) * w + ox * stride;
                                    let krow = kbase + ky * kw;
                                    for kx in 0..kw {
                                        g[irow + kx] += go * dk[krow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.add_grad(kernels, |g| {
            for bi in 0..n {
                for oc in 0..o {
                    for ic in 0..c {
                        let kbase = ((oc * c) + ic) * kh * kw;
                        let ibase = (bi * c + ic) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout[((bi * o + oc) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let irow = ibase + (oy * stride + ky) * w + ox * stride;
                                    let krow = kbase + ky * kw;
                                    for kx in 0..kw {
                                        g[krow + kx] += go * din[irow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn removed_axis_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != axis)
        .map(|(_, d)| *d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Compare the reverse-mode gradient of `f` at `point` against central
/// finite differences. Returns the worst relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, point: &[f64], shape: &[usize], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(MddError::contract("grad_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.to_vec(), shape, true)?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("leaf requires grad").to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(data.to_vec(), shape, false)?;
        let out = f(&mut t, v)?;
        Ok(t.data(out)[0])
    };

    let mut worst = 0.0_f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let fp = eval(&probe)?;
        probe[i] = point[i] - step;
        let fm = eval(&probe)?;
        probe[i] = point[i];
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t
            .leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false)
            .unwrap();
        let a = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false)
            .unwrap();
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_basis() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 0.0], &[1, 2], false).unwrap();
        let b = t.leaf(vec![0.0, 1.0], &[2, 1], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        // d sum(A B) / dA = 1 * B^T
        let bdat = vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.5];
        let adat = vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.5];
        let mut t = Tape::new();
        let a = t.leaf(adat.clone(), &[2, 3], true).unwrap();
        let b = t.leaf(bdat.clone(), &[3, 2], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        let g = t.grad(a).unwrap();
        for i in 0..2 {
            for l in 0..3 {
                let expected: f64 = bdat[l * 2] + bdat[l * 2 + 1];
                assert!((g[i * 3 + l] - expected).abs() < 1e-12);
            }
        }
        // Same thing against finite differences.
        let err = grad_check(
            |t, x| {
                let b = t.leaf(bdat.clone(), &[3, 2], false)?;
                let c = t.matmul(x, b)?;
                Ok(t.sum(c))
            },
            &adat,
            &[2, 3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn conv2d_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0; 9], &[1, 3, 3], false).unwrap();
        let k = t.leaf(vec![1.0; 4], &[1, 1, 2, 2], false).unwrap();
        let y = t.conv2d(x, k, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
        assert!(t.data(y).iter().all(|v| (*v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn conv2d_delta_kernel_crops_top_left() {
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut t = Tape::new();
        let x = t.leaf(input.clone(), &[1, 4, 4], false).unwrap();
        let k = t
            .leaf(vec![1.0, 0.0, 0.0, 0.0], &[1, 1, 2, 2], false)
            .unwrap();
        let y = t.conv2d(x, k, 1).unwrap();
        // Output (i,j) equals input (i,j) for the top-left 3x3 crop.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.data(y)[i * 3 + j], input[i * 4 + j]);
            }
        }
    }

    #[test]
    fn conv2d_kernel_larger_than_input_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 4], &[1, 2, 2], false).unwrap();
        let k = t.leaf(vec![0.0; 9], &[1, 1, 3, 3], false).unwrap();
        assert!(matches!(
            t.conv2d(x, k, 1),
            Err(MddError::Dimension { .. })
        ));
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rngv = crate::rng::Xoshiro256::seed_from_u64(11);
        let input: Vec<f64> = (0..2 * 4 * 5).map(|_| rngv.uniform(-1.0, 1.0)).collect();
        let kern: Vec<f64> = (0..3 * 2 * 2 * 2).map(|_| rngv.uniform(-1.0, 1.0)).collect();
        // w.r.t. input
        let kern2 = kern.clone();
        let err = grad_check(
            move |t, x| {
                let k = t.leaf(kern2.clone(), &[3, 2, 2, 2], false)?;
                let y = t.conv2d(x, k, 2)?;
                Ok(t.sum(y))
            },
            &input,
            &[2, 4, 5],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "input grad rel err {err}");
        // w.r.t. kernels
        let input2 = input.clone();
        let err = grad_check(
            move |t, kv| {
                let x = t.leaf(input2.clone(), &[2, 4, 5], false)?;
                let y = t.conv2d(x, kv, 2)?;
                Ok(t.sum(y))
            },
            &kern,
            &[3, 2, 2, 2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "kernel grad rel err {err}");
    }

    #[test]
    fn logsumexp_examples() {
        let mut t = Tape::new();
        let z = t.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let v = t.logsumexp(z).unwrap();
        assert!((t.data(v)[0] - 2.0_f64.ln()).abs() < 1e-12);

        let z = t.leaf(vec![1000.0, 1000.0], &[2], false).unwrap();
        let v = t.logsumexp(z).unwrap();
        assert!((t.data(v)[0] - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);

        let z = t.leaf(vec![1.0, 0.0], &[2], false).unwrap();
        let v = t.logsumexp(z).unwrap();
        assert!((t.data(v)[0] - (1.0_f64.exp() + 1.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_nan_is_numeric_error() {
        let mut t = Tape::new();
        let z = t.leaf(vec![f64::NAN, 0.0], &[2], false).unwrap();
        assert!(matches!(t.logsumexp(z), Err(MddError::Numeric(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(matches!(t.backward(x), Err(MddError::Contract(_))));
    }

    #[test]
    fn fan_in_accumulates_both_branches() {
        // y = sum(x*x) + sum(2x): dy/dx = 2x + 2
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -3.0, 0.5], &[3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s1 = t.sum(sq);
        let dbl = t.scale(x, 2.0);
        let s2 = t.sum(dbl);
        let y = t.add(s1, s2).unwrap();
        t.backward(y).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip([1.0, -3.0, 0.5]) {
            assert!((gi - (2.0 * xi + 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &[1.0, 2.0, 3.0],
            &[3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn grad_check_logsumexp_at_origin() {
        let err = grad_check(|t, x| t.logsumexp(x), &[0.0, 0.0], &[2], 1e-5).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact_zero() {
        let err = grad_check(
            |t, _x| Ok(t.scalar(3.0)),
            &[1.0, 2.0],
            &[2],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_reverse_flips_and_scales() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        let r = t.grad_reverse(x, 1.0);
        assert_eq!(t.data(r), t.data(x));
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| (*g + 1.0).abs() < 1e-15));
    }

    #[test]
    fn grad_reverse_eta_zero_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let r = t.grad_reverse(x, 0.0);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn max_axis_ties_route_to_first_index() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0, 2.0, 1.0], &[3], true).unwrap();
        let m = t.max_axis(x, 0).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_roundtrip_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let b = t.leaf(vec![5.0, 6.0], &[2, 1], true).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(t.grad(b).unwrap(), &[1.0; 2]);
    }
}
