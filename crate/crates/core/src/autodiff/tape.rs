use std::borrow::Cow;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::sinkhorn::{sinkhorn_unrolled, CostMatrix, Matrix, SinkhornTrace};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        factor: usize,
    },
    ChannelMean {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sinkhorn {
        cost: Var,
        trace: Box<SinkhornTrace>,
    },
    MatMul {
        left: Var,
        right: Var,
        scale: f64,
    },
    L2Normalize {
        input: Var,
        norm: f64,
    },
    Distance {
        a: Var,
        b: Var,
    },
    SoftMarginTriplet {
        pos: Var,
        neg: Var,
        gamma: f64,
    },
    Mean {
        inputs: Vec<Var>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    fn id(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::AvgPool { .. } => "avg_pool",
            Op::ChannelMean { .. } => "channel_mean",
            Op::Reshape { .. } => "reshape",
            Op::Affine { .. } => "affine",
            Op::Sinkhorn { .. } => "sinkhorn",
            Op::MatMul { .. } => "matmul",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Distance { .. } => "distance",
            Op::SoftMarginTriplet { .. } => "soft_margin_triplet",
            Op::Mean { .. } => "mean",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

/// One recorded forward op: what ran, what it saved, and its output shape.
#[derive(Debug)]
pub struct TapeNode<'p> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
}

impl TapeNode<'_> {
    pub fn op_id(&self) -> &'static str {
        self.op.id()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }
}

/// Records differentiable ops in execution order. Parameters are borrowed,
/// not copied, so one parameter store can back many tapes at once.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<TapeNode<'p>>,
    params: Vec<(String, Var)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode<'p> {
        &self.nodes[v.0]
    }

    pub fn nodes(&self) -> &[TapeNode<'p>] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Cow<'p, [f64]>) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.id());
        self.nodes.push(TapeNode { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable tensor.
    pub fn param(&mut self, name: &str, tensor: &'p Tensor) -> Var {
        let v = self.push(Op::Leaf, tensor.shape().to_vec(), Cow::Borrowed(tensor.data()));
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers an input that is not a parameter. Gradients are still
    /// available through [`Gradients::wrt`].
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("tape input", &shape, &[data.len()]));
        }
        Ok(self.push(Op::Leaf, shape, Cow::Owned(data)))
    }

    pub fn input_borrowed(&mut self, shape: Vec<usize>, data: &'p [f64]) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("tape input", &shape, &[data.len()]));
        }
        Ok(self.push(Op::Leaf, shape, Cow::Borrowed(data)))
    }

    fn expect_rank(&self, v: Var, rank: usize, context: &str) -> Result<&[usize]> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(Error::shape(context, &vec![0; rank], shape));
        }
        Ok(shape)
    }

    /// 2-D convolution over an `(h, w, c_in)` grid with weights
    /// `(k, k, c_in, c_out)`, zero padding `(k - 1) / 2`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let [h, w, ci] = *self.expect_rank(input, 3, "conv2d input")? else { unreachable!() };
        let [k, k2, wci, co] = *self.expect_rank(weight, 4, "conv2d weight")? else { unreachable!() };
        if k != k2 || k % 2 == 0 || wci != ci {
            return Err(Error::shape("conv2d weight", &[k, k, ci, co], &[k, k2, wci, co]));
        }
        if self.shape(bias) != [co] {
            return Err(Error::shape("conv2d bias", &[co], self.shape(bias)));
        }
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::shape("conv2d stride", &[h, w], &[stride]));
        }
        let padding = (k - 1) / 2;
        let (ho, wo) = ((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1);
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![0.0; ho * wo * co];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                o.copy_from_slice(b);
                for ky in 0..k {
                    let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&y| y < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&x| x < w) else {
                            continue;
                        };
                        let xs = &x[(iy * w + ix) * ci..(iy * w + ix + 1) * ci];
                        for (c, &xv) in xs.iter().enumerate() {
                            let wrow = &wt[((ky * k + kx) * ci + c) * co..((ky * k + kx) * ci + c + 1) * co];
                            for (ov, wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            vec![ho, wo, co],
            Cow::Owned(out),
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push(Op::Relu { input }, shape, Cow::Owned(out))
    }

    /// Non-overlapping spatial average pooling by `factor`.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [h, w, c] = *self.expect_rank(input, 3, "avg_pool input")? else { unreachable!() };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape("avg_pool factor", &[h, w], &[factor]));
        }
        let (ho, wo) = (h / factor, w / factor);
        let x = self.value(input);
        let scale = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let dst = ((y / factor) * wo + xx / factor) * c;
                for ch in 0..c {
                    out[dst + ch] += x[(y * w + xx) * c + ch] * scale;
                }
            }
        }
        Ok(self.push(Op::AvgPool { input, factor }, vec![ho, wo, c], Cow::Owned(out)))
    }

    /// `(h, w, c) -> (h·w)`: mean over channels per spatial cell.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let [h, w, c] = *self.expect_rank(input, 3, "channel_mean input")? else { unreachable!() };
        let out = self
            .value(input)
            .chunks(c)
            .map(|cell| cell.iter().sum::<f64>() / c as f64)
            .collect();
        Ok(self.push(Op::ChannelMean { input }, vec![h * w], Cow::Owned(out)))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(input)) {
            return Err(Error::shape("reshape", self.shape(input), &shape));
        }
        let value = self.value(input).to_vec();
        Ok(self.push(Op::Reshape { input }, shape, Cow::Owned(value)))
    }

    /// `W x + b` with `W` of shape `(out, in)`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n_in = numel(self.shape(input));
        let [n_out, w_in] = *self.expect_rank(weight, 2, "affine weight")? else { unreachable!() };
        if w_in != n_in {
            return Err(Error::shape("affine input", &[w_in], &[n_in]));
        }
        if self.shape(bias) != [n_out] {
            return Err(Error::shape("affine bias", &[n_out], self.shape(bias)));
        }
        let x = self.value(input);
        let out = self
            .value(weight)
            .chunks(n_in)
            .zip(self.value(bias))
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        Ok(self.push(Op::Affine { input, weight, bias }, vec![n_out], Cow::Owned(out)))
    }

    /// Unrolled `iterations` Sinkhorn rounds on an `(n, n)` cost.
    pub fn sinkhorn(&mut self, cost: Var, lambda: f64, iterations: usize) -> Result<Var> {
        let [r, c] = *self.expect_rank(cost, 2, "sinkhorn cost")? else { unreachable!() };
        let matrix = CostMatrix::new(r, c, self.value(cost).to_vec())?;
        let trace = sinkhorn_unrolled(&matrix, lambda, iterations)?;
        let out = trace.output().data().to_vec();
        Ok(self.push(
            Op::Sinkhorn {
                cost,
                trace: Box::new(trace),
            },
            vec![r, c],
            Cow::Owned(out),
        ))
    }

    /// The Sinkhorn output recorded at `v`, as a matrix.
    pub fn sinkhorn_output(&self, v: Var) -> Option<&Matrix> {
        match &self.nodes[v.0].op {
            Op::Sinkhorn { trace, .. } => Some(trace.output()),
            _ => None,
        }
    }

    /// `scale · A B` for `A: (n, k)`, `B: (k, m)`.
    pub fn matmul(&mut self, left: Var, right: Var, scale: f64) -> Result<Var> {
        let [n, k] = *self.expect_rank(left, 2, "matmul left")? else { unreachable!() };
        let [k2, m] = *self.expect_rank(right, 2, "matmul right")? else { unreachable!() };
        if k != k2 {
            return Err(Error::shape("matmul inner", &[n, k], &[k2, m]));
        }
        let a = self.value(left);
        let b = self.value(right);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                let s = scale * av;
                for (ov, bv) in o.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                    *ov += s * bv;
                }
            }
        }
        Ok(self.push(Op::MatMul { left, right, scale }, vec![n, m], Cow::Owned(out)))
    }

    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let norm = crate::grid::l2_norm(x);
        if norm <= crate::grid::MIN_NORM {
            return Err(Error::ZeroVector { norm });
        }
        let out = x.iter().map(|v| v / norm).collect();
        let shape = self.shape(input).to_vec();
        Ok(self.push(Op::L2Normalize { input, norm }, shape, Cow::Owned(out)))
    }

    /// Euclidean distance between two equally sized tensors.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if numel(self.shape(a)) != numel(self.shape(b)) {
            return Err(Error::shape("distance", self.shape(a), self.shape(b)));
        }
        let d = crate::grid::l2_distance(self.value(a), self.value(b));
        Ok(self.push(Op::Distance { a, b }, vec![1], Cow::Owned(vec![d])))
    }

    /// `log(1 + exp(γ (d_pos - d_neg)))`.
    pub fn soft_margin_triplet(&mut self, pos: Var, neg: Var, gamma: f64) -> Result<Var> {
        for v in [pos, neg] {
            if self.shape(v) != [1] {
                return Err(Error::shape("triplet distance", &[1], self.shape(v)));
            }
        }
        let loss = crate::metric::triplet_loss(self.value(pos)[0], self.value(neg)[0], gamma);
        Ok(self.push(Op::SoftMarginTriplet { pos, neg, gamma }, vec![1], Cow::Owned(vec![loss])))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, inputs: Vec<Var>) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Domain("mean of no values".into()));
        }
        let mut total = 0.0;
        for &v in &inputs {
            if self.shape(v) != [1] {
                return Err(Error::shape("mean input", &[1], self.shape(v)));
            }
            total += self.value(v)[0];
        }
        let m = total / inputs.len() as f64;
        Ok(self.push(Op::Mean { inputs }, vec![1], Cow::Owned(vec![m])))
    }

    /// `Σ_i weights_i · x_i`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != numel(self.shape(input)) {
            return Err(Error::shape("weighted_sum", self.shape(input), &[weights.len()]));
        }
        let s = self.value(input).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::WeightedSum { input, weights }, vec![1], Cow::Owned(vec![s])))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let ones = vec![1.0; numel(self.shape(input))];
        self.weighted_sum(input, ones)
    }

    /// Propagates `seed` (the gradient of some scalar w.r.t. `root`) back
    /// through every node recorded up to `root`.
    pub fn backward(&self, root: Var, seed: &[f64]) -> Result<Gradients> {
        let root_len = numel(self.shape(root));
        if seed.len() != root_len {
            return Err(Error::shape(
                format!("backward seed for {}", self.node(root).op_id()),
                self.shape(root),
                &[seed.len()],
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed.to_vec());
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if g.len() != node.value.len() {
                return Err(Error::shape(
                    format!("upstream gradient of {}", node.op_id()),
                    &node.shape,
                    &[g.len()],
                ));
            }
            for (parent, grad) in self.vjp(node, &g)? {
                let expected = self.nodes[parent.0].value.len();
                if grad.len() != expected {
                    return Err(Error::shape(
                        format!("{} gradient for input", node.op_id()),
                        &self.nodes[parent.0].shape,
                        &[grad.len()],
                    ));
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
            adj[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = adj
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            adjoints: adj,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
            params,
        })
    }

    fn vjp(&self, node: &TapeNode<'_>, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let [h, w, ci] = *self.shape(input) else { unreachable!() };
                let [k, _, _, co] = *self.shape(weight) else { unreachable!() };
                let [ho, wo, _] = *node.shape.as_slice() else { unreachable!() };
                let x = self.value(input);
                let wt = self.value(weight);
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; wt.len()];
                let mut gb = vec![0.0; co];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = &g[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                        gb.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                        for ky in 0..k {
                            let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&y| y < h) else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&x| x < w) else {
                                    continue;
                                };
                                let base = (iy * w + ix) * ci;
                                for c in 0..ci {
                                    let widx = ((ky * k + kx) * ci + c) * co;
                                    let wrow = &wt[widx..widx + co];
                                    let xv = x[base + c];
                                    let mut acc = 0.0;
                                    for ((gwv, wv), gov) in gw[widx..widx + co].iter_mut().zip(wrow).zip(go) {
                                        *gwv += xv * gov;
                                        acc += wv * gov;
                                    }
                                    gx[base + c] += acc;
                                }
                            }
                        }
                    }
                }
                vec![(input, gx), (weight, gw), (bias, gb)]
            }
            &Op::Relu { input } => {
                let x = self.value(input);
                let gx = x.iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                vec![(input, gx)]
            }
            &Op::AvgPool { input, factor } => {
                let [h, w, c] = *self.shape(input) else { unreachable!() };
                let wo = w / factor;
                let scale = 1.0 / (factor * factor) as f64;
                let mut gx = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let src = ((y / factor) * wo + xx / factor) * c;
                        for ch in 0..c {
                            gx[(y * w + xx) * c + ch] = g[src + ch] * scale;
                        }
                    }
                }
                vec![(input, gx)]
            }
            &Op::ChannelMean { input } => {
                let c = self.shape(input)[2];
                let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / c as f64, c)).collect();
                vec![(input, gx)]
            }
            &Op::Reshape { input } => vec![(input, g.to_vec())],
            &Op::Affine { input, weight, bias } => {
                let x = self.value(input);
                let wt = self.value(weight);
                let n_in = x.len();
                let mut gx = vec![0.0; n_in];
                let mut gw = vec![0.0; wt.len()];
                for (o, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let row = &wt[o * n_in..(o + 1) * n_in];
                    for ((gxv, wv), (gwv, xv)) in gx.iter_mut().zip(row).zip(gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x)) {
                        *gxv += wv * gv;
                        *gwv = xv * gv;
                    }
                }
                vec![(input, gx), (weight, gw), (bias, g.to_vec())]
            }
            Op::Sinkhorn { cost, trace } => vec![(*cost, trace.vjp(g)?)],
            &Op::MatMul { left, right, scale } => {
                let [n, k] = *self.shape(left) else { unreachable!() };
                let m = self.shape(right)[1];
                let a = self.value(left);
                let b = self.value(right);
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &b[p * m..(p + 1) * m];
                        ga[i * k + p] = scale * gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        let s = scale * a[i * k + p];
                        for (gbv, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(gi) {
                            *gbv += s * gv;
                        }
                    }
                }
                vec![(left, ga), (right, gb)]
            }
            &Op::L2Normalize { input, norm } => {
                let y = &node.value;
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let gx = y.iter().zip(g).map(|(yv, gv)| (gv - yv * dot) / norm).collect();
                vec![(input, gx)]
            }
            &Op::Distance { a, b } => {
                let d = node.value[0];
                let (av, bv) = (self.value(a), self.value(b));
                let ga: Vec<f64> = if d > 0.0 {
                    av.iter().zip(bv).map(|(x, y)| g[0] * (x - y) / d).collect()
                } else {
                    vec![0.0; av.len()]
                };
                let gb = ga.iter().map(|v| -v).collect();
                vec![(a, ga), (b, gb)]
            }
            &Op::SoftMarginTriplet { pos, neg, gamma } => {
                let dl = crate::metric::triplet_loss_grad(self.value(pos)[0], self.value(neg)[0], gamma);
                vec![(pos, vec![g[0] * dl]), (neg, vec![-g[0] * dl])]
            }
            Op::Mean { inputs } => {
                let share = g[0] / inputs.len() as f64;
                inputs.iter().map(|&v| (v, vec![share])).collect()
            }
            Op::WeightedSum { input, weights } => {
                vec![(*input, weights.iter().map(|w| w * g[0]).collect())]
            }
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    params: IndexMap<String, Vec<f64>>,
}

impl Gradients {
    /// Gradient for every registered parameter, in registration order.
    /// Parameters the root does not depend on get exact zeros.
    pub fn params(&self) -> &IndexMap<String, Vec<f64>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn into_params(self) -> IndexMap<String, Vec<f64>> {
        self.params
    }

    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.adjoints
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![4.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let va = tape.param("a", &a);
        let vb = tape.param("b", &b);
        let sa = tape.sum(va).unwrap();
        let sb = tape.sum(vb).unwrap();
        let loss = tape.mean(vec![sa, sb]).unwrap();
        // mean of two sums halves the seed
        let grads = tape.backward(loss, &[2.0]).unwrap();
        assert_eq!(grads.param("a").unwrap(), &[1.0; 3]);
        assert_eq!(grads.param("b").unwrap(), &[1.0; 2]);
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        tape.param("a", &a);
        let c = tape.input(vec![1], vec![7.0]).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss, &[1.0]).unwrap();
        assert_eq!(grads.param("a").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let x = tape.input(vec![2, 2], vec![1.0; 4]).unwrap();
        let err = tape.backward(x, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(tape.backward(x, &[1.0; 4]).is_ok());
    }

    #[test]
    fn nodes_report_op_and_shape() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let m = tape.channel_mean(x).unwrap();
        assert_eq!(tape.node(m).op_id(), "channel_mean");
        assert_eq!(tape.node(m).output_shape(), &[1]);
        assert_eq!(tape.value(m), &[2.0]);
    }

    #[test]
    fn single_1x1_conv_is_scalar_affine_relu() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![-2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        for x in [-1.0, 0.1, 3.0] {
            let mut tape = Tape::new();
            let vx = tape.input(vec![1, 1, 1], vec![x]).unwrap();
            let vw = tape.param("w", &w);
            let vb = tape.param("b", &b);
            let c = tape.conv2d(vx, vw, vb, 1).unwrap();
            let r = tape.relu(c);
            assert_eq!(tape.value(r), &[(-2.0 * x + 0.5f64).max(0.0)]);
        }
    }

    #[test]
    fn conv_output_shape_with_stride() {
        let w = Tensor::zeros(vec![3, 3, 3, 8]);
        let b = Tensor::zeros(vec![8]);
        let mut tape = Tape::new();
        let x = tape.input(vec![32, 32, 3], vec![0.0; 32 * 32 * 3]).unwrap();
        let vw = tape.param("w", &w);
        let vb = tape.param("b", &b);
        let y = tape.conv2d(x, vw, vb, 2).unwrap();
        assert_eq!(tape.shape(y), &[16, 16, 8]);
        let bad = tape.input(vec![5, 5, 3], vec![0.0; 75]).unwrap();
        assert!(tape.conv2d(bad, vw, vb, 2).is_err());
    }
}
