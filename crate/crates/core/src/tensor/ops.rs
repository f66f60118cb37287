//! Forward operations and their reverse-mode rules.

use super::{Tensor, TensorError, LOG_FLOOR};

/// Producing operation recorded on a non-leaf tensor.
#[derive(Clone)]
pub enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor, f64),
    /// c - x
    RsubScalar(Tensor, f64),
    Matmul(Tensor, Tensor),
    /// [K,n] + [n], broadcast over rows.
    AddRowBias(Tensor, Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    LnClamped(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    SoftmaxXent {
        logits: Tensor,
        labels: Vec<usize>,
        /// Row-softmax cached at forward time.
        probs: Vec<f64>,
    },
    /// out[r][c] = in[perms[c][r]][c]; one permutation per column.
    ColumnShuffle {
        input: Tensor,
        perms: Vec<Vec<usize>>,
    },
    /// Row subset, gradient scatters back into the gathered rows.
    GatherRows {
        input: Tensor,
        rows: Vec<usize>,
    },
    /// [K,F,H,W] -> [K*H*W, F]; each spatial position becomes a row.
    FiltersToBatch(Tensor),
    Reshape(Tensor),
    /// Stride-1 valid 2-D convolution, input [K,C,H,W], weight [F,C,kh,kw].
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    /// 2x2 max-pool, stride 2; argmax holds the flat input index per output.
    MaxPool2 {
        input: Tensor,
        argmax: Vec<usize>,
    },
    /// Off-diagonal batch-covariance penalty on a [K,m] matrix.
    Decov(Tensor),
}

fn add_grad(t: &Tensor, delta: &[f64]) {
    if !t.requires_grad() {
        return;
    }
    let mut b = t.inner.borrow_mut();
    debug_assert_eq!(b.grad.len(), delta.len());
    for (g, d) in b.grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn add_grad_scaled_by(t: &Tensor, out_grad: &[f64], scale: impl Fn(usize) -> f64) {
    if !t.requires_grad() {
        return;
    }
    let mut b = t.inner.borrow_mut();
    for (i, g) in b.grad.iter_mut().enumerate() {
        *g += out_grad[i] * scale(i);
    }
}

/// C[m,n] = A[m,k] @ B[k,n], row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::AddRowBias(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _) | Op::AddScalar(a, _) | Op::RsubScalar(a, _) => vec![a.clone()],
            Op::Relu(a) | Op::Sigmoid(a) | Op::LnClamped(a) | Op::Sum(a) | Op::Mean(a) => vec![a.clone()],
            Op::SoftmaxXent { logits, .. } => vec![logits.clone()],
            Op::ColumnShuffle { input, .. } => vec![input.clone()],
            Op::GatherRows { input, .. } => vec![input.clone()],
            Op::FiltersToBatch(a) | Op::Reshape(a) | Op::Decov(a) => vec![a.clone()],
            Op::Conv2d { input, weight, bias } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::MaxPool2 { input, .. } => vec![input.clone()],
        }
    }

    pub(crate) fn backward(&self, out_grad: &[f64], out_data: &[f64]) {
        match self {
            Op::Add(a, b) => {
                add_grad(a, out_grad);
                add_grad(b, out_grad);
            }
            Op::Sub(a, b) => {
                add_grad(a, out_grad);
                let neg: Vec<f64> = out_grad.iter().map(|g| -g).collect();
                add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let bd = b.data();
                add_grad_scaled_by(a, out_grad, |i| bd[i]);
                let ad = a.data();
                add_grad_scaled_by(b, out_grad, |i| ad[i]);
            }
            Op::Scale(a, c) => add_grad_scaled_by(a, out_grad, |_| *c),
            Op::AddScalar(a, _) => add_grad(a, out_grad),
            Op::RsubScalar(a, _) => add_grad_scaled_by(a, out_grad, |_| -1.0),
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = a.shape();
                    (s[0], s[1])
                };
                let n = b.shape()[1];
                if a.requires_grad() {
                    // dA = dC @ B^T
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &out_grad[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                s += gv * bv;
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    add_grad(a, &ga);
                }
                if b.requires_grad() {
                    // dB = A^T @ dC
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &out_grad[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for (gbv, gv) in gbrow.iter_mut().zip(grow) {
                                    *gbv += av * gv;
                                }
                            }
                        }
                    }
                    add_grad(b, &gb);
                }
            }
            Op::AddRowBias(x, bias) => {
                add_grad(x, out_grad);
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut gb = vec![0.0; n];
                    for (i, g) in out_grad.iter().enumerate() {
                        gb[i % n] += g;
                    }
                    add_grad(bias, &gb);
                }
            }
            Op::Relu(a) => {
                // out > 0 iff in > 0; subgradient 0 at the kink.
                add_grad_scaled_by(a, out_grad, |i| if out_data[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                add_grad_scaled_by(a, out_grad, |i| out_data[i] * (1.0 - out_data[i]));
            }
            Op::LnClamped(a) => {
                let ad = a.data();
                add_grad_scaled_by(a, out_grad, |i| if ad[i] > LOG_FLOOR { 1.0 / ad[i] } else { 0.0 });
            }
            Op::Sum(a) => {
                let g = out_grad[0];
                let delta = vec![g; a.numel()];
                add_grad(a, &delta);
            }
            Op::Mean(a) => {
                let g = out_grad[0] / a.numel() as f64;
                let delta = vec![g; a.numel()];
                add_grad(a, &delta);
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                if !logits.requires_grad() {
                    return;
                }
                let k = labels.len();
                let c = logits.numel() / k;
                let g = out_grad[0] / k as f64;
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * c + label] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= g;
                }
                add_grad(logits, &gl);
            }
            Op::ColumnShuffle { input, perms } => {
                if !input.requires_grad() {
                    return;
                }
                let m = perms.len();
                let k = perms[0].len();
                let mut gi = vec![0.0; k * m];
                for (c, perm) in perms.iter().enumerate() {
                    for (r, &src) in perm.iter().enumerate() {
                        gi[src * m + c] += out_grad[r * m + c];
                    }
                }
                add_grad(input, &gi);
            }
            Op::GatherRows { input, rows } => {
                if !input.requires_grad() {
                    return;
                }
                let m = input.shape()[1];
                let mut gi = vec![0.0; input.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..m {
                        gi[src * m + c] += out_grad[r * m + c];
                    }
                }
                add_grad(input, &gi);
            }
            Op::FiltersToBatch(a) => {
                if !a.requires_grad() {
                    return;
                }
                let s = a.shape();
                let (k, f, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gi = vec![0.0; a.numel()];
                for ki in 0..k {
                    for fi in 0..f {
                        for si in 0..hw {
                            gi[(ki * f + fi) * hw + si] += out_grad[(ki * hw + si) * f + fi];
                        }
                    }
                }
                add_grad(a, &gi);
            }
            Op::Reshape(a) => add_grad(a, out_grad),
            Op::Conv2d { input, weight, bias } => {
                let is = input.shape();
                let ws = weight.shape();
                let (k, c, h, w) = (is[0], is[1], is[2], is[3]);
                let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let id = input.data();
                let wd = weight.data();
                let mut gi = vec![0.0; id.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; f];
                for ki in 0..k {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = out_grad[((ki * f + fi) * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                gb[fi] += g;
                                for ci in 0..c {
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            let ii = ((ki * c + ci) * h + oy + dy) * w + ox + dx;
                                            let wi = ((fi * c + ci) * kh + dy) * kw + dx;
                                            gi[ii] += g * wd[wi];
                                            gw[wi] += g * id[ii];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                add_grad(input, &gi);
                add_grad(weight, &gw);
                add_grad(bias, &gb);
            }
            Op::MaxPool2 { input, argmax } => {
                if !input.requires_grad() {
                    return;
                }
                let mut gi = vec![0.0; input.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] += out_grad[o];
                }
                add_grad(input, &gi);
            }
            Op::Decov(x) => {
                // P = 1/2 sum_{i != j} C_ij^2, C = (1/K) Xc^T Xc.
                // dP/dX = (2/K) Xc @ C_off  (diagonal of C zeroed).
                let _ = out_data;
                if !x.requires_grad() {
                    return;
                }
                let s = x.shape();
                let (k, m) = (s[0], s[1]);
                let xd = x.data();
                let (xc, cov) = centered_covariance(&xd, k, m);
                let mut c_off = cov;
                for i in 0..m {
                    c_off[i * m + i] = 0.0;
                }
                let mut gx = matmul_raw(&xc, &c_off, k, m, m);
                let g = out_grad[0] * 2.0 / k as f64;
                for v in gx.iter_mut() {
                    *v *= g;
                }
                add_grad(x, &gx);
            }
        }
    }
}

/// Column-centered matrix and its (1/K) X^T X covariance.
pub(crate) fn centered_covariance(x: &[f64], k: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0; m];
    for row in 0..k {
        for col in 0..m {
            means[col] += x[row * m + col];
        }
    }
    for mu in means.iter_mut() {
        *mu /= k as f64;
    }
    let mut xc = vec![0.0; k * m];
    for row in 0..k {
        for col in 0..m {
            xc[row * m + col] = x[row * m + col] - means[col];
        }
    }
    let mut cov = vec![0.0; m * m];
    for row in 0..k {
        let xr = &xc[row * m..(row + 1) * m];
        for i in 0..m {
            let xi = xr[i];
            if xi != 0.0 {
                for j in 0..m {
                    cov[i * m + j] += xi * xr[j];
                }
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= k as f64;
    }
    (xc, cov)
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = self
            .with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Ok(Tensor::from_op(data, &self.shape(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Ok(Tensor::from_op(data, &self.shape(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "mul")?;
        let data: Vec<f64> = self
            .with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        Ok(Tensor::from_op(data, &self.shape(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x * c).collect());
        Tensor::from_op(data, &self.shape(), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x + c).collect());
        Tensor::from_op(data, &self.shape(), Op::AddScalar(self.clone(), c))
    }

    /// c - x, elementwise.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| c - x).collect());
        Tensor::from_op(data, &self.shape(), Op::RsubScalar(self.clone(), c))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::BadRank {
                op: "matmul",
                expected: "two 2-D tensors",
                got: if sa.len() != 2 { sa } else { sb },
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.with_data(|a| other.with_data(|b| matmul_raw(a, b, m, k, n)));
        Ok(Tensor::from_op(data, &[m, n], Op::Matmul(self.clone(), other.clone())))
    }

    /// Add a length-n bias vector to every row of a [K,n] matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (s, bs) = (self.shape(), bias.shape());
        if s.len() != 2 || bs.len() != 1 || bs[0] != s[1] {
            return Err(TensorError::ShapeMismatch { op: "add_row_bias", lhs: s, rhs: bs });
        }
        let n = s[1];
        let data: Vec<f64> = self.with_data(|x| {
            bias.with_data(|b| x.iter().enumerate().map(|(i, v)| v + b[i % n]).collect())
        });
        Ok(Tensor::from_op(data, &s, Op::AddRowBias(self.clone(), bias.clone())))
    }

    /// Elementwise max(0, x). Backward passes gradient only where x > 0.
    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x.max(0.0)).collect());
        Tensor::from_op(data, &self.shape(), Op::Relu(self.clone()))
    }

    /// Logistic function, output clamped to [LOG_FLOOR, 1-LOG_FLOOR] so a
    /// following log is always finite.
    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| {
            a.iter()
                .map(|x| (1.0 / (1.0 + (-x).exp())).clamp(LOG_FLOOR, 1.0 - LOG_FLOOR))
                .collect()
        });
        Tensor::from_op(data, &self.shape(), Op::Sigmoid(self.clone()))
    }

    /// Natural log with the argument floored at LOG_FLOOR; the floor region
    /// has zero gradient.
    pub fn ln_clamped(&self) -> Tensor {
        let data: Vec<f64> = self.with_data(|a| a.iter().map(|x| x.max(LOG_FLOOR).ln()).collect());
        Tensor::from_op(data, &self.shape(), Op::LnClamped(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.with_data(|a| a.iter().sum());
        Tensor::from_op(vec![s], &[1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.with_data(|a| a.iter().sum());
        let n = self.numel() as f64;
        Tensor::from_op(vec![s / n], &[1], Op::Mean(self.clone()))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// max-subtraction. `logits` is [K,C]; one class index per row.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || s[1] < 2 {
            return Err(TensorError::BadRank {
                op: "softmax_cross_entropy",
                expected: "[K,C] logits with C >= 2",
                got: s,
            });
        }
        let (k, c) = (s[0], s[1]);
        if labels.len() != k {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange { row, label, classes: c });
            }
        }
        let mut probs = vec![0.0; k * c];
        let mut loss = 0.0;
        self.with_data(|x| {
            for r in 0..k {
                let row = &x[r * c..(r + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    probs[r * c + j] = e;
                    z += e;
                }
                for p in &mut probs[r * c..(r + 1) * c] {
                    *p /= z;
                }
                loss += z.ln() - (row[labels[r]] - max);
            }
        });
        loss /= k as f64;
        Ok(Tensor::from_op(
            vec![loss],
            &[1],
            Op::SoftmaxXent { logits: self.clone(), labels: labels.to_vec(), probs },
        ))
    }

    /// Permute each column of a [K,m] matrix independently; `perms[c]` maps
    /// output row -> input row for column c.
    pub fn shuffle_columns(&self, perms: &[Vec<usize>]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadRank { op: "shuffle_columns", expected: "[K,m] matrix", got: s });
        }
        let (k, m) = (s[0], s[1]);
        if perms.len() != m || perms.iter().any(|p| p.len() != k) {
            return Err(TensorError::ShapeMismatch {
                op: "shuffle_columns",
                lhs: s,
                rhs: vec![perms.len()],
            });
        }
        let data: Vec<f64> = self.with_data(|x| {
            let mut out = vec![0.0; k * m];
            for (c, perm) in perms.iter().enumerate() {
                for (r, &src) in perm.iter().enumerate() {
                    out[r * m + c] = x[src * m + c];
                }
            }
            out
        });
        Ok(Tensor::from_op(
            data,
            &s,
            Op::ColumnShuffle { input: self.clone(), perms: perms.to_vec() },
        ))
    }

    /// Select rows of a [K,m] matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadRank { op: "gather_rows", expected: "[K,m] matrix", got: s });
        }
        let (k, m) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(TensorError::RowOutOfRange { row: bad, rows: k });
        }
        let data: Vec<f64> = self.with_data(|x| {
            let mut out = Vec::with_capacity(rows.len() * m);
            for &r in rows {
                out.extend_from_slice(&x[r * m..(r + 1) * m]);
            }
            out
        });
        Ok(Tensor::from_op(
            data,
            &[rows.len(), m],
            Op::GatherRows { input: self.clone(), rows: rows.to_vec() },
        ))
    }

    /// View a stack of feature maps [K,F,H,W] as a [K*H*W, F] activation
    /// matrix: the F filter responses at one spatial position form one row.
    pub fn filters_to_batch(&self) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::BadRank { op: "filters_to_batch", expected: "[K,F,H,W]", got: s });
        }
        let (k, f, hw) = (s[0], s[1], s[2] * s[3]);
        let data: Vec<f64> = self.with_data(|x| {
            let mut out = vec![0.0; k * hw * f];
            for ki in 0..k {
                for fi in 0..f {
                    for si in 0..hw {
                        out[(ki * hw + si) * f + fi] = x[(ki * f + fi) * hw + si];
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(data, &[k * hw, f], Op::FiltersToBatch(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                expected,
                got: self.numel(),
            });
        }
        Ok(Tensor::from_op(self.data(), shape, Op::Reshape(self.clone())))
    }

    /// Stride-1 valid convolution. input [K,C,H,W], weight [F,C,kh,kw], bias [F].
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let is = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        if is.len() != 4 || ws.len() != 4 {
            return Err(TensorError::BadRank { op: "conv2d", expected: "[K,C,H,W] and [F,C,kh,kw]", got: is });
        }
        if is[1] != ws[1] || bs != vec![ws[0]] || ws[2] > is[2] || ws[3] > is[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: is, rhs: ws });
        }
        let (k, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let data = self.with_data(|x| {
            weight.with_data(|wt| {
                bias.with_data(|b| {
                    let mut out = vec![0.0; k * f * oh * ow];
                    for ki in 0..k {
                        for fi in 0..f {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut s = b[fi];
                                    for ci in 0..c {
                                        for dy in 0..kh {
                                            for dx in 0..kw {
                                                s += x[((ki * c + ci) * h + oy + dy) * w + ox + dx]
                                                    * wt[((fi * c + ci) * kh + dy) * kw + dx];
                                            }
                                        }
                                    }
                                    out[((ki * f + fi) * oh + oy) * ow + ox] = s;
                                }
                            }
                        }
                    }
                    out
                })
            })
        });
        Ok(Tensor::from_op(
            data,
            &[k, f, oh, ow],
            Op::Conv2d { input: self.clone(), weight: weight.clone(), bias: bias.clone() },
        ))
    }

    /// 2x2 max-pool with stride 2; trailing odd rows/columns are dropped.
    /// Ties route the gradient to the first element in scan order.
    pub fn max_pool2(&self) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TensorError::BadRank { op: "max_pool2", expected: "[K,C,H,W] with H,W >= 2", got: s });
        }
        let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut argmax = vec![0usize; k * c * oh * ow];
        let data = self.with_data(|x| {
            let mut out = vec![0.0; k * c * oh * ow];
            for kc in 0..k * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (kc * h + 2 * oy + dy) * w + 2 * ox + dx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = (kc * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            data,
            &[k, c, oh, ow],
            Op::MaxPool2 { input: self.clone(), argmax },
        ))
    }

    /// 1/2 (|C|_F^2 - |diag C|^2) on the batch covariance C of a [K,m]
    /// matrix: zero iff all off-diagonal covariances vanish.
    pub fn decov(&self) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(TensorError::BadRank { op: "decov", expected: "[K,m] with K >= 2", got: s });
        }
        let (k, m) = (s[0], s[1]);
        let penalty = self.with_data(|x| {
            let (_, cov) = centered_covariance(x, k, m);
            let mut p = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        p += cov[i * m + j] * cov[i * m + j];
                    }
                }
            }
            0.5 * p
        });
        Ok(Tensor::from_op(vec![penalty], &[1], Op::Decov(self.clone())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_gives_zero_output_and_grad() {
        let x = Tensor::param(vec![-3.0, -0.5, -1e-9], &[3]).unwrap();
        let y = x.relu();
        assert_eq!(y.data(), vec![0.0, 0.0, 0.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert_relative_eq!(x.sigmoid().item(), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn sigmoid_symmetry() {
        let vals = vec![-3.0, -0.7, 0.0, 0.2, 1.9, 4.0];
        let x = Tensor::from_vec(vals.clone(), &[6]).unwrap();
        let neg = Tensor::from_vec(vals.iter().map(|v| -v).collect(), &[6]).unwrap();
        let s = x.sigmoid().data();
        let sn = neg.sigmoid().data();
        for (a, b) in s.iter().zip(sn) {
            assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_clamps_so_log_is_finite() {
        let x = Tensor::from_vec(vec![50.0, -50.0], &[2]).unwrap();
        let s = x.sigmoid();
        assert_eq!(s.data(), vec![1.0 - LOG_FLOOR, LOG_FLOOR]);
        let log_one_minus = s.rsub_scalar(1.0).ln_clamped();
        assert!(log_one_minus.all_finite());
    }

    #[test]
    fn softmax_xent_uniform_logits_is_ln_c() {
        let logits = Tensor::from_vec(vec![0.0; 40], &[4, 10]).unwrap();
        let loss = logits.softmax_cross_entropy(&[0, 3, 7, 9]).unwrap();
        assert_relative_eq!(loss.item(), (10.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_xent_dominant_correct_logit_is_zero() {
        let mut v = vec![0.0; 10];
        v[4] = 1e6;
        let logits = Tensor::from_vec(v, &[1, 10]).unwrap();
        let loss = logits.softmax_cross_entropy(&[4]).unwrap();
        assert!(loss.item().abs() < 1e-12);
        assert!(loss.all_finite());
    }

    #[test]
    fn softmax_xent_rejects_bad_label() {
        let logits = Tensor::from_vec(vec![0.0; 6], &[2, 3]).unwrap();
        let err = logits.softmax_cross_entropy(&[0, 3]).unwrap_err();
        assert!(matches!(err, TensorError::LabelOutOfRange { row: 1, label: 3, classes: 3 }));
    }

    #[test]
    fn matmul_small_known() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn filters_to_batch_reshape_semantics() {
        // K=1, F=3, 2x2 maps: 4 rows x 3 columns, values rearranged losslessly.
        let maps = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[1, 3, 2, 2]).unwrap();
        let batch = maps.filters_to_batch().unwrap();
        assert_eq!(batch.shape(), vec![4, 3]);
        // filter f at spatial s sits at maps[f*4 + s]; row s = (s, 4+s, 8+s).
        assert_eq!(
            batch.data(),
            vec![0.0, 4.0, 8.0, 1.0, 5.0, 9.0, 2.0, 6.0, 10.0, 3.0, 7.0, 11.0]
        );
    }

    #[test]
    fn filters_to_batch_row_count() {
        let maps = Tensor::zeros(&[3, 2, 4, 5]);
        let batch = maps.filters_to_batch().unwrap();
        assert_eq!(batch.shape(), vec![3 * 4 * 5, 2]);
    }

    #[test]
    fn gather_rows_checks_bounds() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert!(x.gather_rows(&[0, 2]).is_err());
        assert_eq!(x.gather_rows(&[1, 0]).unwrap().data(), vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn decov_zero_for_decorrelated_columns() {
        // Orthogonal centered columns.
        let x = Tensor::from_vec(vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0], &[4, 2]).unwrap();
        assert!(x.decov().unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn decov_two_identical_unit_variance_columns() {
        // Columns [1,-1] have population variance 1; identical pair gives
        // C = [[1,1],[1,1]] and penalty 1/2 * 2 * 1^2 = 1.
        let x = Tensor::from_vec(vec![1.0, 1.0, -1.0, -1.0], &[2, 2]).unwrap();
        assert_relative_eq!(x.decov().unwrap().item(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = x.max_pool2().unwrap();
        assert_eq!(y.data(), vec![4.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn column_shuffle_applies_perms() {
        let x = Tensor::from_vec(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0], &[3, 2]).unwrap();
        let y = x.shuffle_columns(&[vec![2, 0, 1], vec![0, 1, 2]]).unwrap();
        assert_eq!(y.data(), vec![3.0, 10.0, 1.0, 20.0, 2.0, 30.0]);
    }

    #[test]
    fn shuffle_gradient_is_inverse_permutation() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let y = x.shuffle_columns(&[vec![1, 2, 0]]).unwrap();
        let w = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3, 1]).unwrap();
        y.mul(&w).unwrap().sum().backward().unwrap();
        // out row r took input row perm[r]; d/dx[1]=10, d/dx[2]=20, d/dx[0]=30.
        assert_eq!(x.grad(), vec![30.0, 10.0, 20.0]);
    }
}
