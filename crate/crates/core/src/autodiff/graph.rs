use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Emax(Var, Var),
    Emin(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    PowScalar(Var, f64),
    Matmul(Var, Var),
    Softmax(Var, usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    AvgPoolTime(Var),
    MaxPoolTime2(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        from: usize,
        to: usize,
    },
    ShiftClamp {
        x: Var,
        offset: isize,
    },
    BinShift {
        x: Var,
        toward_past: bool,
    },
    RowwiseDot(Var, Var),
    ScaleRows {
        x: Var,
        s: Var,
    },
    SumAll(Var),
    SumAxis(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Single-owner computation tape. Ops append nodes in topological order;
/// `backward` walks the tape in reverse exactly once per call, accumulating
/// gradients into every node that (transitively) requires them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Insert a tensor treated as a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        op: Op,
        value: Tensor,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(op_name));
        }
        let needs = self.needs(inputs);
        Ok(self.push(op, value, needs))
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected 2-D tensor, got shape {s:?}"),
            ));
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("operand shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.finish("add", Op::Add(a, b), out, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.finish("mul", Op::Mul(a, b), out, &[a, b])
    }

    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("emax", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| if x >= y { *x } else { *y })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.finish("emax", Op::Emax(a, b), out, &[a, b])
    }

    pub fn emin(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("emin", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.finish("emin", Op::Emin(a, b), out, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.finish("div", Op::Div(a, b), out, &[a, b])
    }

    /// Broadcast add of a `[1, D]` row over a `[T, D]` map.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, d) = self.require_2d("add_row", x)?;
        let (rr, rd) = self.require_2d("add_row", row)?;
        if rr != 1 || rd != d {
            return Err(Error::shape(
                "add_row",
                format!("row shape [{rr}, {rd}] does not broadcast over [{t}, {d}]"),
            ));
        }
        let xd = self.value(x).data();
        let rowd = self.value(row).data();
        let mut data = Vec::with_capacity(t * d);
        for ti in 0..t {
            for di in 0..d {
                data.push(xd[ti * d + di] + rowd[di]);
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        self.finish("add_row", Op::AddRow(x, row), out, &[x, row])
    }

    // ── scalar broadcast ─────────────────────────────────────────────

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("add_scalar", Op::AddScalar(x), out, &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("mul_scalar", Op::MulScalar(x, c), out, &[x])
    }

    // ── elementwise unary ────────────────────────────────────────────

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| -v).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("neg", Op::Neg(x), out, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("relu", Op::Relu(x), out, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| sigmoid(*v)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("sigmoid", Op::Sigmoid(x), out, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| softplus(*v)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("softplus", Op::Softplus(x), out, &[x])
    }

    /// Elementwise `x^p` for `x >= 0`.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.powf(p)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.finish("pow_scalar", Op::PowScalar(x, p), out, &[x])
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.finish("matmul", Op::Matmul(a, b), out, &[a, b])
    }

    /// Softmax along `axis` (0 = down each column, 1 = across each row),
    /// stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (t, d) = self.require_2d("softmax", x)?;
        if axis > 1 {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for 2-D"),
            ));
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; t * d];
        let (lanes, lane_len, stride, base) = if axis == 1 {
            (t, d, 1, d)
        } else {
            (d, t, d, 1)
        };
        for lane in 0..lanes {
            let idx = |i: usize| lane * base + i * stride;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..lane_len {
                mx = mx.max(xd[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (xd[idx(i)] - mx).exp();
                data[idx(i)] = e;
                sum += e;
            }
            for i in 0..lane_len {
                data[idx(i)] /= sum;
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        self.finish("softmax", Op::Softmax(x, axis), out, &[x])
    }

    /// 1-D convolution over the temporal axis with zero same-padding.
    ///
    /// `x` is `[T, D_in]`, `w` is `[D_out, D_in, K]` with odd `K`,
    /// `b` (optional) is `[1, D_out]`. Output is `[ceil(T/stride), D_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (t, d_in) = self.require_2d("conv1d", x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("weight must be 3-D, got {ws:?}"),
            ));
        }
        let (d_out, wd_in, k) = (ws[0], ws[1], ws[2]);
        if wd_in != d_in {
            return Err(Error::shape(
                "conv1d",
                format!("weight in-channels {wd_in} vs input channels {d_in}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel length {k} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        if let Some(bv) = b {
            let (br, bc) = self.require_2d("conv1d", bv)?;
            if br != 1 || bc != d_out {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias shape [{br}, {bc}] vs out-channels {d_out}"),
                ));
            }
        }
        let pad = (k - 1) / 2;
        let out_t = (t - 1) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut data = vec![0.0; out_t * d_out];
        if let Some(bv) = b {
            let bd = self.value(bv).data();
            for ti in 0..out_t {
                for o in 0..d_out {
                    data[ti * d_out + o] = bd[o];
                }
            }
        }
        for ti in 0..out_t {
            for j in 0..k {
                let src = ti as isize * stride as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xd[src as usize * d_in..(src as usize + 1) * d_in];
                for o in 0..d_out {
                    let wrow = &wd[(o * d_in) * k..];
                    let mut acc = 0.0;
                    for i in 0..d_in {
                        acc += wrow[i * k + j] * xrow[i];
                    }
                    data[ti * d_out + o] += acc;
                }
            }
        }
        let out = Tensor::new(vec![out_t, d_out], data)?;
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        self.finish("conv1d", Op::Conv1d { x, w, b, stride }, out, &inputs)
    }

    /// Temporal average pooling: `[T, D] -> [1, D]`.
    pub fn avg_pool_time(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.require_2d("avg_pool_time", x)?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; d];
        for ti in 0..t {
            for di in 0..d {
                data[di] += xd[ti * d + di];
            }
        }
        for v in data.iter_mut() {
            *v /= t as f64;
        }
        let out = Tensor::new(vec![1, d], data)?;
        self.finish("avg_pool_time", Op::AvgPoolTime(x), out, &[x])
    }

    /// Temporal max pooling, kernel 2 stride 2, ceil mode: `[T, D] -> [ceil(T/2), D]`.
    pub fn max_pool_time2(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.require_2d("max_pool_time2", x)?;
        let out_t = t.div_ceil(2);
        let xd = self.value(x).data();
        let mut data = vec![0.0; out_t * d];
        for ti in 0..out_t {
            let a = 2 * ti;
            let bend = (2 * ti + 2).min(t);
            for di in 0..d {
                let mut m = xd[a * d + di];
                for u in (a + 1)..bend {
                    let v = xd[u * d + di];
                    if v > m {
                        m = v;
                    }
                }
                data[ti * d + di] = m;
            }
        }
        let out = Tensor::new(vec![out_t, d], data)?;
        self.finish("max_pool_time2", Op::MaxPoolTime2(x), out, &[x])
    }

    /// Concatenate 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (t, _) = self.require_2d("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pt, pd) = self.require_2d("concat_cols", p)?;
            if pt != t {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {t} vs {pt}"),
                ));
            }
            total += pd;
        }
        let mut data = Vec::with_capacity(t * total);
        for ti in 0..t {
            for &p in parts {
                let pd = self.value(p).cols();
                let row = &self.value(p).data()[ti * pd..(ti + 1) * pd];
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::new(vec![t, total], data)?;
        self.finish("concat_cols", Op::ConcatCols(parts.to_vec()), out, parts)
    }

    /// Column slice `[T, D] -> [T, to-from]` over `from..to`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (t, d) = self.require_2d("slice_cols", x)?;
        if from >= to || to > d {
            return Err(Error::shape(
                "slice_cols",
                format!("range {from}..{to} invalid for {d} columns"),
            ));
        }
        let xd = self.value(x).data();
        let width = to - from;
        let mut data = Vec::with_capacity(t * width);
        for ti in 0..t {
            data.extend_from_slice(&xd[ti * d + from..ti * d + to]);
        }
        let out = Tensor::new(vec![t, width], data)?;
        self.finish("slice_cols", Op::SliceCols { x, from, to }, out, &[x])
    }

    /// Row shift with index clamping: `out[t] = x[clamp(t + offset, 0, T-1)]`.
    pub fn shift_clamp(&mut self, x: Var, offset: isize) -> Result<Var> {
        let (t, d) = self.require_2d("shift_clamp", x)?;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(t * d);
        for ti in 0..t {
            let src = (ti as isize + offset).clamp(0, t as isize - 1) as usize;
            data.extend_from_slice(&xd[src * d..(src + 1) * d]);
        }
        let out = Tensor::new(vec![t, d], data)?;
        self.finish("shift_clamp", Op::ShiftClamp { x, offset }, out, &[x])
    }

    /// Per-bin temporal gather with clamping on a `[T, B]` map:
    /// `out[t, b] = x[clamp(t - b), b]` when `toward_past`, else `x[clamp(t + b), b]`.
    pub fn bin_shift(&mut self, x: Var, toward_past: bool) -> Result<Var> {
        let (t, bins) = self.require_2d("bin_shift", x)?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; t * bins];
        for ti in 0..t {
            for b in 0..bins {
                let src = if toward_past {
                    (ti as isize - b as isize).clamp(0, t as isize - 1) as usize
                } else {
                    (ti as isize + b as isize).clamp(0, t as isize - 1) as usize
                };
                data[ti * bins + b] = xd[src * bins + b];
            }
        }
        let out = Tensor::new(vec![t, bins], data)?;
        self.finish("bin_shift", Op::BinShift { x, toward_past }, out, &[x])
    }

    /// Per-row dot product of two `[T, D]` maps, yielding `[T, 1]`.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("rowwise_dot", a, b)?;
        let (t, d) = self.require_2d("rowwise_dot", a)?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; t];
        for ti in 0..t {
            let mut acc = 0.0;
            for di in 0..d {
                acc += ad[ti * d + di] * bd[ti * d + di];
            }
            data[ti] = acc;
        }
        let out = Tensor::new(vec![t, 1], data)?;
        self.finish("rowwise_dot", Op::RowwiseDot(a, b), out, &[a, b])
    }

    /// Scale each row of `x: [T, D]` by the per-row scalar `s: [T, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (t, d) = self.require_2d("scale_rows", x)?;
        let (st, sd) = self.require_2d("scale_rows", s)?;
        if st != t || sd != 1 {
            return Err(Error::shape(
                "scale_rows",
                format!("scale shape [{st}, {sd}] vs map [{t}, {d}]"),
            ));
        }
        let xd = self.value(x).data();
        let sdv = self.value(s).data();
        let mut data = Vec::with_capacity(t * d);
        for ti in 0..t {
            for di in 0..d {
                data.push(xd[ti * d + di] * sdv[ti]);
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        self.finish("scale_rows", Op::ScaleRows { x, s }, out, &[x, s])
    }

    /// Sum of all elements, yielding a `[1, 1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total);
        self.finish("sum_all", Op::SumAll(x), out, &[x])
    }

    /// Axis sum of a 2-D tensor: axis 0 -> `[1, D]`, axis 1 -> `[T, 1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (t, d) = self.require_2d("sum_axis", x)?;
        if axis > 1 {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range"),
            ));
        }
        let xd = self.value(x).data();
        let out = if axis == 0 {
            let mut data = vec![0.0; d];
            for ti in 0..t {
                for di in 0..d {
                    data[di] += xd[ti * d + di];
                }
            }
            Tensor::new(vec![1, d], data)?
        } else {
            let mut data = vec![0.0; t];
            for ti in 0..t {
                data[ti] = xd[ti * d..(ti + 1) * d].iter().sum();
            }
            Tensor::new(vec![t, 1], data)?
        };
        self.finish("sum_axis", Op::SumAxis(x, axis), out, &[x])
    }

    /// Layer normalization over the channel axis of `[T, D]`, with learnable
    /// `gamma`/`beta` rows of shape `[1, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.require_2d("layer_norm", x)?;
        for (nm, v) in [("gamma", gamma), ("beta", beta)] {
            let (r, c) = self.require_2d("layer_norm", v)?;
            if r != 1 || c != d {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{nm} shape [{r}, {c}] vs channels {d}"),
                ));
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut data = vec![0.0; t * d];
        for ti in 0..t {
            let row = &xd[ti * d..(ti + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for di in 0..d {
                data[ti * d + di] = (row[di] - mean) * rstd * gd[di] + bd[di];
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        self.finish(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            out,
            &[x, gamma, beta],
        )
    }

    // ── composites ───────────────────────────────────────────────────

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, 1.0)
    }

    /// Affine map `x @ w + b` with `x: [T, D_in]`, `w: [D_in, D_out]`, `b: [1, D_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Mean of all elements as a `[1, 1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Each call propagates a fresh
    /// unit seed; leaf gradients accumulate across repeated calls until
    /// `zero_grads`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut sweep = Sweep {
            nodes: &self.nodes,
            grads: vec![None; loss.0 + 1],
        };
        sweep.accum(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            if sweep.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let op = &self.nodes[idx].op;
            let gy = sweep.grads[idx].take().unwrap();
            let g = &gy[..];
            sweep.step(idx, op, g);
            sweep.grads[idx] = Some(gy);
        }
        // merge this sweep into the persistent accumulators
        for (idx, local) in sweep.grads.into_iter().enumerate() {
            if let Some(local) = local {
                let node = &mut self.nodes[idx];
                let grad = node
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                for (gv, lv) in grad.data_mut().iter_mut().zip(&local) {
                    *gv += lv;
                }
            }
        }
        Ok(())
    }
}

/// One backward pass over the tape: local gradient buffers, merged into the
/// graph's persistent accumulators when the sweep completes.
struct Sweep<'g> {
    nodes: &'g [Node],
    grads: Vec<Option<Vec<f64>>>,
}

impl Sweep<'_> {
    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn accum(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let grad = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn accum_at(&mut self, v: Var, index: usize, delta: f64) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let grad = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        grad[index] += delta;
    }

    fn step(&mut self, idx: usize, op: &Op, g: &[f64]) {
        let op = op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::AddRow(x, row) => {
                self.accum(x, g);
                let d = self.value(row).cols();
                let t = self.value(x).rows();
                let mut dr = vec![0.0; d];
                for ti in 0..t {
                    for di in 0..d {
                        dr[di] += g[ti * d + di];
                    }
                }
                self.accum(row, &dr);
            }
            Op::AddScalar(x) => self.accum(x, g),
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::MulScalar(x, c) => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.accum(x, &dx);
            }
            Op::Emax(a, b) | Op::Emin(a, b) => {
                let take_a: Vec<bool> = {
                    let ad = self.value(a).data();
                    let bd = self.value(b).data();
                    if matches!(op, Op::Emax(_, _)) {
                        ad.iter().zip(bd).map(|(x, y)| x >= y).collect()
                    } else {
                        ad.iter().zip(bd).map(|(x, y)| x <= y).collect()
                    }
                };
                let da: Vec<f64> = g
                    .iter()
                    .zip(&take_a)
                    .map(|(gv, &ta)| if ta { *gv } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&take_a)
                    .map(|(gv, &ta)| if ta { 0.0 } else { *gv })
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Div(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(gv, bv)| gv / bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data().iter().zip(self.value(b).data()))
                    .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Neg(x) => {
                let dx: Vec<f64> = g.iter().map(|gv| -gv).collect();
                self.accum(x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accum(x, &dx);
            }
            Op::Softplus(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, xv)| gv * sigmoid(*xv))
                    .collect();
                self.accum(x, &dx);
            }
            Op::PowScalar(x, p) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, xv)| {
                        // constant exponent, and subgradient 0 at the
                        // x=0 kink of fractional powers
                        if p == 0.0 || (*xv == 0.0 && p < 1.0) {
                            0.0
                        } else {
                            gv * p * xv.powf(p - 1.0)
                        }
                    })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                // dA = dY @ B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = A^T @ dY
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Softmax(x, axis) => {
                let y = self.nodes[idx].value.clone();
                let (t, d) = (y.rows(), y.cols());
                let (lanes, lane_len, stride, base) = if axis == 1 {
                    (t, d, 1, d)
                } else {
                    (d, t, d, 1)
                };
                let mut dx = vec![0.0; t * d];
                let yd = y.data();
                for lane in 0..lanes {
                    let idxf = |i: usize| lane * base + i * stride;
                    let mut dot = 0.0;
                    for i in 0..lane_len {
                        dot += g[idxf(i)] * yd[idxf(i)];
                    }
                    for i in 0..lane_len {
                        dx[idxf(i)] = yd[idxf(i)] * (g[idxf(i)] - dot);
                    }
                }
                self.accum(x, &dx);
            }
            Op::Conv1d { x, w, b, stride } => {
                let (t, d_in) = (self.value(x).rows(), self.value(x).cols());
                let ws = self.value(w).shape().to_vec();
                let (d_out, k) = (ws[0], ws[2]);
                let pad = (k - 1) / 2;
                let out_t = (t - 1) / stride + 1;
                let xd = self.value(x).data().to_vec();
                let wd = self.value(w).data().to_vec();
                let mut dx = vec![0.0; t * d_in];
                let mut dw = vec![0.0; d_out * d_in * k];
                for ti in 0..out_t {
                    for j in 0..k {
                        let src = ti as isize * stride as isize + j as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let s = src as usize;
                        for o in 0..d_out {
                            let gv = g[ti * d_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..d_in {
                                dx[s * d_in + i] += gv * wd[(o * d_in + i) * k + j];
                                dw[(o * d_in + i) * k + j] += gv * xd[s * d_in + i];
                            }
                        }
                    }
                }
                self.accum(x, &dx);
                self.accum(w, &dw);
                if let Some(bv) = b {
                    let mut dbv = vec![0.0; d_out];
                    for ti in 0..out_t {
                        for o in 0..d_out {
                            dbv[o] += g[ti * d_out + o];
                        }
                    }
                    self.accum(bv, &dbv);
                }
            }
            Op::AvgPoolTime(x) => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                let inv = 1.0 / t as f64;
                let mut dx = vec![0.0; t * d];
                for ti in 0..t {
                    for di in 0..d {
                        dx[ti * d + di] = g[di] * inv;
                    }
                }
                self.accum(x, &dx);
            }
            Op::MaxPoolTime2(x) => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                let out_t = t.div_ceil(2);
                let xd = self.value(x).data().to_vec();
                let mut dx = vec![0.0; t * d];
                for ti in 0..out_t {
                    let a = 2 * ti;
                    let bend = (2 * ti + 2).min(t);
                    for di in 0..d {
                        // first max wins on ties
                        let mut arg = a;
                        let mut m = xd[a * d + di];
                        for u in (a + 1)..bend {
                            if xd[u * d + di] > m {
                                m = xd[u * d + di];
                                arg = u;
                            }
                        }
                        dx[arg * d + di] += g[ti * d + di];
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols(parts) => {
                let t = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in &parts {
                    let pd = self.value(p).cols();
                    let mut dp = vec![0.0; t * pd];
                    for ti in 0..t {
                        for di in 0..pd {
                            dp[ti * pd + di] = g[ti * total + offset + di];
                        }
                    }
                    self.accum(p, &dp);
                    offset += pd;
                }
            }
            Op::SliceCols { x, from, to } => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                let width = to - from;
                for ti in 0..t {
                    for di in 0..width {
                        self.accum_at(x, ti * d + from + di, g[ti * width + di]);
                    }
                }
            }
            Op::ShiftClamp { x, offset } => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                for ti in 0..t {
                    let src = (ti as isize + offset).clamp(0, t as isize - 1) as usize;
                    for di in 0..d {
                        self.accum_at(x, src * d + di, g[ti * d + di]);
                    }
                }
            }
            Op::BinShift { x, toward_past } => {
                let (t, bins) = (self.value(x).rows(), self.value(x).cols());
                for ti in 0..t {
                    for bi in 0..bins {
                        let src = if toward_past {
                            (ti as isize - bi as isize).clamp(0, t as isize - 1) as usize
                        } else {
                            (ti as isize + bi as isize).clamp(0, t as isize - 1) as usize
                        };
                        self.accum_at(x, src * bins + bi, g[ti * bins + bi]);
                    }
                }
            }
            Op::RowwiseDot(a, b) => {
                let (t, d) = (self.value(a).rows(), self.value(a).cols());
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                let mut da = vec![0.0; t * d];
                let mut db = vec![0.0; t * d];
                for ti in 0..t {
                    for di in 0..d {
                        da[ti * d + di] = g[ti] * bd[ti * d + di];
                        db[ti * d + di] = g[ti] * ad[ti * d + di];
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::ScaleRows { x, s } => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                let xd = self.value(x).data().to_vec();
                let sd = self.value(s).data().to_vec();
                let mut dx = vec![0.0; t * d];
                let mut ds = vec![0.0; t];
                for ti in 0..t {
                    for di in 0..d {
                        dx[ti * d + di] = g[ti * d + di] * sd[ti];
                        ds[ti] += g[ti * d + di] * xd[ti * d + di];
                    }
                }
                self.accum(x, &dx);
                self.accum(s, &ds);
            }
            Op::SumAll(x) => {
                let n = self.value(x).numel();
                let dx = vec![g[0]; n];
                self.accum(x, &dx);
            }
            Op::SumAxis(x, axis) => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![0.0; t * d];
                for ti in 0..t {
                    for di in 0..d {
                        dx[ti * d + di] = if axis == 0 { g[di] } else { g[ti] };
                    }
                }
                self.accum(x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (t, d) = (self.value(x).rows(), self.value(x).cols());
                let xd = self.value(x).data().to_vec();
                let gd = self.value(gamma).data().to_vec();
                let mut dx = vec![0.0; t * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for ti in 0..t {
                    let row = &xd[ti * d..(ti + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let gyr = &g[ti * d..(ti + 1) * d];
                    let mut sum_dyh = 0.0;
                    let mut sum_dyh_xhat = 0.0;
                    for di in 0..d {
                        let dyh = gyr[di] * gd[di];
                        sum_dyh += dyh;
                        sum_dyh_xhat += dyh * xhat[di];
                        dgamma[di] += gyr[di] * xhat[di];
                        dbeta[di] += gyr[di];
                    }
                    let inv_d = 1.0 / d as f64;
                    for di in 0..d {
                        let dyh = gyr[di] * gd[di];
                        dx[ti * d + di] =
                            rstd * (dyh - inv_d * sum_dyh - xhat[di] * inv_d * sum_dyh_xhat);
                    }
                }
                self.accum(x, &dx);
                self.accum(gamma, &dgamma);
                self.accum(beta, &dbeta);
            }
        }
    }
}
