//! Differentiable primitives used by the brain and speech networks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub initialized: bool,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(0.1),
            initialized: false,
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn erf<T: Real>(x: T) -> T {
    x.erf()
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + erf(x / T::of(std::f64::consts::SQRT_2)))
}

/// Row-wise softmax of a `rows × cols` slice, max-subtracted.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

impl<T: Real> Graph<T> {
    /// Same-padded dilated 1-D convolution.
    ///
    /// `x: B×Cin×T`, `w: Cout×Cin×K` with `K` odd, optional `bias: Cout`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (b, cin, t) = self.value(x).dims3()?;
        let (cout, wcin, k) = self.value(w).dims3()?;
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if k % 2 == 0 || dilation == 0 {
            return Err(Error::invalid(
                "kernel",
                format!("kernel must be odd and dilation ≥ 1 (k={k}, d={dilation})"),
            ));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(Error::shape("conv1d", "bias must have Cout entries"));
            }
        }
        let pad = dilation * (k - 1) / 2;
        let tp = t + 2 * pad;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = Tensor::zeros(&[b, cout, t]);
        let mut xp = vec![T::zero(); cin * tp];
        for bi in 0..b {
            pad_into(xv.batch(bi), cin, t, pad, &mut xp);
            let ob = out.batch_mut(bi);
            for ki in 0..k {
                gemm(
                    T::one(),
                    kernel_tap(wv.data(), cout, cin, k, ki),
                    shifted(&xp, cin, t, tp, ki * dilation),
                    T::one(),
                    MatMut::rm(ob, 0, cout, t),
                );
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for o in 0..cout {
                    for v in &mut ob[o * t..(o + 1) * t] {
                        *v += bd[o];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record(
            out,
            &parents,
            Box::new(move |gy, needs| {
                let mut dx = needs[0].then(|| Tensor::zeros(&[b, cin, t]));
                let mut dw = needs[1].then(|| Tensor::zeros(&[cout, cin, k]));
                let mut db = (has_bias && needs[2]).then(|| Tensor::zeros(&[cout]));
                let mut xp = vec![T::zero(); cin * tp];
                let mut dxp = vec![T::zero(); cin * tp];
                for bi in 0..b {
                    let gb = gy.batch(bi);
                    if let Some(dw) = dw.as_mut() {
                        pad_into(xv.batch(bi), cin, t, pad, &mut xp);
                        for ki in 0..k {
                            gemm(
                                T::one(),
                                MatRef::rm(gb, 0, cout, t),
                                shifted(&xp, cin, t, tp, ki * dilation).t(),
                                T::one(),
                                kernel_tap_mut(dw.data_mut(), cout, cin, k, ki),
                            );
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dxp.iter_mut().for_each(|v| *v = T::zero());
                        for ki in 0..k {
                            gemm(
                                T::one(),
                                kernel_tap(wv.data(), cout, cin, k, ki).t(),
                                MatRef::rm(gb, 0, cout, t),
                                T::one(),
                                MatMut {
                                    data: &mut dxp,
                                    offset: ki * dilation,
                                    rows: cin,
                                    cols: t,
                                    row_stride: tp,
                                    col_stride: 1,
                                },
                            );
                        }
                        let dxb = dx.batch_mut(bi);
                        for c in 0..cin {
                            dxb[c * t..(c + 1) * t]
                                .copy_from_slice(&dxp[c * tp + pad..c * tp + pad + t]);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let dd = db.data_mut();
                        for o in 0..cout {
                            dd[o] += gb[o * t..(o + 1) * t].iter().copied().sum();
                        }
                    }
                }
                let mut res = vec![dx, dw];
                if has_bias {
                    res.push(db);
                }
                res
            }),
        ))
    }

    /// Batch normalization over (batch, time) per channel.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batchnorm1d", "γ and β must have C entries"));
        }
        if stats.mean.len() != c {
            return Err(Error::shape("batchnorm1d", "running stats channel count"));
        }
        let xv = self.value(x).clone();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let n = b * t;
        let eps = T::of(BN_EPS);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::invalid(
                        "batch",
                        "train-mode batch norm needs batch size ≥ 2",
                    ));
                }
                let nf = T::of(n as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += xv.batch(bi)[ch * t..(ch + 1) * t].iter().copied().sum();
                    }
                    let m = s / nf;
                    let mut v = T::zero();
                    for bi in 0..b {
                        for &a in &xv.batch(bi)[ch * t..(ch + 1) * t] {
                            v += (a - m) * (a - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / nf;
                }
                let mom = stats.momentum;
                let unbias = T::of(n as f64 / (n as f64 - 1.0).max(1.0));
                // running stats start at (0, 1)
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
                }
                stats.initialized = true;
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::State(
                        "batch norm evaluated before any training step".into(),
                    ));
                }
                let inv = stats
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (stats.mean.clone(), inv)
            }
        };
        let mut xhat = Tensor::zeros(&[b, c, t]);
        let mut out = Tensor::zeros(&[b, c, t]);
        for bi in 0..b {
            let xb = xv.batch(bi);
            let hb = xhat.batch_mut(bi);
            for ch in 0..c {
                for ti in 0..t {
                    let i = ch * t + ti;
                    hb[i] = (xb[i] - mean[ch]) * inv_std[ch];
                }
            }
            let ob = out.batch_mut(bi);
            let hb = xhat.batch(bi);
            for ch in 0..c {
                for ti in 0..t {
                    let i = ch * t + ti;
                    ob[i] = gv[ch] * hb[i] + bv[ch];
                }
            }
        }
        Ok(self.record(
            out,
            &[x, gamma, beta],
            Box::new(move |gy, needs| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    let gb = gy.batch(bi);
                    let hb = xhat.batch(bi);
                    for ch in 0..c {
                        for ti in 0..t {
                            let i = ch * t + ti;
                            dgamma[ch] += gb[i] * hb[i];
                            dbeta[ch] += gb[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(&[b, c, t]);
                    let nf = T::of(n as f64);
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        match mode {
                            Mode::Train => {
                                // dx = γ·inv/N · (N·g − Σg − x̂·Σ(g·x̂))
                                let sum_g = dbeta[ch];
                                let sum_gh = dgamma[ch];
                                for bi in 0..b {
                                    let gb = gy.batch(bi);
                                    let hb = xhat.batch(bi);
                                    let db = dx.batch_mut(bi);
                                    for ti in 0..t {
                                        let i = ch * t + ti;
                                        db[i] = scale / nf * (nf * gb[i] - sum_g - hb[i] * sum_gh);
                                    }
                                }
                            }
                            Mode::Eval => {
                                for bi in 0..b {
                                    let gb = gy.batch(bi);
                                    let db = dx.batch_mut(bi);
                                    for ti in 0..t {
                                        let i = ch * t + ti;
                                        db[i] = scale * gb[i];
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    Some(Tensor::from_vec(&[c], dgamma).expect("shape")),
                    Some(Tensor::from_vec(&[c], dbeta).expect("shape")),
                ]
            }),
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let cdf = xv.map(|a| T::of(0.5) * (T::one() + erf(a / T::of(std::f64::consts::SQRT_2))));
        let mut out = xv.clone();
        for (o, &p) in out.data_mut().iter_mut().zip(cdf.data()) {
            *o *= p;
        }
        self.record(
            out,
            &[x],
            Box::new(move |gy, _| {
                let norm = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let mut dx = gy.clone();
                for ((d, &a), &p) in dx.data_mut().iter_mut().zip(xv.data()).zip(cdf.data()) {
                    let pdf = (-(a * a) * T::of(0.5)).exp() * norm;
                    *d *= p + a * pdf;
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let out = xv.map(|a| a.max(T::zero()));
        self.record(
            out,
            &[x],
            Box::new(move |gy, _| {
                let mut dx = gy.clone();
                for (d, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Gated linear unit over the channel axis of a `B×C×T` tensor:
    /// `first_half ⊙ sigmoid(second_half)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if c % 2 != 0 {
            return Err(Error::invalid("channels", format!("glu needs an even channel count, got {c}")));
        }
        let h = c / 2;
        let xv = self.value(x).clone();
        let mut out = Tensor::zeros(&[b, h, t]);
        for bi in 0..b {
            let xb = xv.batch(bi);
            let ob = out.batch_mut(bi);
            for i in 0..h * t {
                ob[i] = xb[i] * sigmoid(xb[h * t + i]);
            }
        }
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _| {
                let mut dx = Tensor::zeros(&[b, c, t]);
                for bi in 0..b {
                    let xb = xv.batch(bi);
                    let gb = gy.batch(bi);
                    let db = dx.batch_mut(bi);
                    for i in 0..h * t {
                        let s = sigmoid(xb[h * t + i]);
                        db[i] = gb[i] * s;
                        db[h * t + i] = gb[i] * xb[i] * s * (T::one() - s);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|gy, needs| {
                vec![needs[0].then(|| gy.clone()), needs[1].then(|| gy.clone())]
            }),
        ))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("softmax_rows", "expected rank-2 input"));
        };
        let mut out = self.value(x).clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        let p = out.clone();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |gy, _| {
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let pr = &p.data()[r * cols..(r + 1) * cols];
                    let gr = &gy.data()[r * cols..(r + 1) * cols];
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let dr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for i in 0..cols {
                        dr[i] = pr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// All-pairs full inner products: `z: B×…`, `y: N×…` (same trailing
    /// shape) give a `B×N` matrix with entry `⟨z_i, y_j⟩` summed over every
    /// trailing element.
    pub fn pairwise_inner(&mut self, z: Var, y: Var) -> Result<Var> {
        let zs = self.value(z).shape().to_vec();
        let ys = self.value(y).shape().to_vec();
        if zs.is_empty() || ys.is_empty() || zs[1..] != ys[1..] {
            return Err(Error::shape("pairwise_inner", format!("{zs:?} vs {ys:?}")));
        }
        let (b, n) = (zs[0], ys[0]);
        let d: usize = zs[1..].iter().product();
        let zv = self.value(z).clone();
        let yv = self.value(y).clone();
        let mut out = Tensor::zeros(&[b, n]);
        gemm(
            T::one(),
            MatRef::rm(zv.data(), 0, b, d),
            MatRef::rm(yv.data(), 0, n, d).t(),
            T::zero(),
            MatMut::rm(out.data_mut(), 0, b, n),
        );
        Ok(self.record(
            out,
            &[z, y],
            Box::new(move |gl, needs| {
                let dz = needs[0].then(|| {
                    let mut dz = Tensor::zeros(&zs);
                    gemm(
                        T::one(),
                        MatRef::rm(gl.data(), 0, b, n),
                        MatRef::rm(yv.data(), 0, n, d),
                        T::zero(),
                        MatMut::rm(dz.data_mut(), 0, b, d),
                    );
                    dz
                });
                let dy = needs[1].then(|| {
                    let mut dy = Tensor::zeros(&ys);
                    gemm(
                        T::one(),
                        MatRef::rm(gl.data(), 0, b, n).t(),
                        MatRef::rm(zv.data(), 0, b, d),
                        T::zero(),
                        MatMut::rm(dy.data_mut(), 0, n, d),
                    );
                    dy
                });
                vec![dz, dy]
            }),
        ))
    }

    /// Full inner product of two equally shaped tensors, as a scalar.
    pub fn inner_product_full(&mut self, z: Var, y: Var) -> Result<Var> {
        let zs = self.value(z).shape().to_vec();
        if zs != self.value(y).shape() {
            return Err(Error::shape(
                "inner_product_full",
                format!("{:?} vs {:?}", zs, self.value(y).shape()),
            ));
        }
        let zv = self.value(z).clone();
        let yv = self.value(y).clone();
        let s: T = zv.data().iter().zip(yv.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.record(
            Tensor::scalar(s),
            &[z, y],
            Box::new(move |g, needs| {
                let g = g.item();
                vec![
                    needs[0].then(|| yv.map(|a| a * g)),
                    needs[1].then(|| zv.map(|a| a * g)),
                ]
            }),
        ))
    }

    /// Mean over rows of `−logit[target] + logsumexp(row)`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("cross_entropy_rows", "expected rank-2 logits"));
        };
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(Error::invalid("targets", "one valid target per row required"));
        }
        let lv = self.value(logits).clone();
        if !lv.all_finite() {
            return Err(Error::NonFinite {
                location: "contrastive logits".into(),
            });
        }
        let mut loss = T::zero();
        let mut probs = lv.clone();
        for r in 0..rows {
            let row = &lv.data()[r * cols..(r + 1) * cols];
            loss += log_sum_exp(row) - row[targets[r]];
            softmax_in_place(&mut probs.data_mut()[r * cols..(r + 1) * cols]);
        }
        let rf = T::of(rows as f64);
        let targets = targets.to_vec();
        Ok(self.record(
            Tensor::scalar(loss / rf),
            &[logits],
            Box::new(move |g, _| {
                let s = g.item() / rf;
                let mut d = probs.clone();
                for r in 0..rows {
                    d.data_mut()[r * cols + targets[r]] -= T::one();
                }
                d.scale(s);
                vec![Some(d)]
            }),
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let ps = self.value(pred).shape().to_vec();
        if ps != self.value(target).shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", ps, self.value(target).shape()),
            ));
        }
        let diff: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| a - b)
            .collect();
        let n = T::of(diff.len() as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        let diff = Tensor::from_vec(&ps, diff)?;
        Ok(self.record(
            Tensor::scalar(loss),
            &[pred, target],
            Box::new(move |g, needs| {
                let s = T::of(2.0) * g.item() / n;
                vec![
                    needs[0].then(|| diff.map(|d| d * s)),
                    needs[1].then(|| diff.map(|d| -d * s)),
                ]
            }),
        ))
    }

    /// Per-sample channel mixing: `out[b] = mats[which[b]] · x[b]` with
    /// `x: B×D×T` and each matrix `D×D`.
    pub fn subject_matmul(&mut self, x: Var, mats: &[Var], which: &[usize]) -> Result<Var> {
        let (b, d, t) = self.value(x).dims3()?;
        if which.len() != b {
            return Err(Error::shape("subject_matmul", "one subject per batch item"));
        }
        for &s in which {
            let m = mats.get(s).ok_or(Error::UnknownSubject(s))?;
            if self.value(*m).shape() != [d, d] {
                return Err(Error::shape(
                    "subject_matmul",
                    format!("matrix {:?}, expected [{d}, {d}]", self.value(*m).shape()),
                ));
            }
        }
        let xv = self.value(x).clone();
        let mv: Vec<Tensor<T>> = mats.iter().map(|&m| self.value(m).clone()).collect();
        let mut out = Tensor::zeros(&[b, d, t]);
        for bi in 0..b {
            gemm(
                T::one(),
                MatRef::rm(mv[which[bi]].data(), 0, d, d),
                MatRef::rm(xv.batch(bi), 0, d, t),
                T::zero(),
                MatMut::rm(out.batch_mut(bi), 0, d, t),
            );
        }
        let mut parents = vec![x];
        parents.extend_from_slice(mats);
        let which = which.to_vec();
        let n_mats = mats.len();
        Ok(self.record(
            out,
            &parents,
            Box::new(move |gy, needs| {
                let mut dx = needs[0].then(|| Tensor::zeros(&[b, d, t]));
                let mut dm: Vec<Option<Tensor<T>>> = (0..n_mats).map(|_| None).collect();
                for bi in 0..b {
                    let s = which[bi];
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            T::one(),
                            MatRef::rm(mv[s].data(), 0, d, d).t(),
                            MatRef::rm(gy.batch(bi), 0, d, t),
                            T::zero(),
                            MatMut::rm(dx.batch_mut(bi), 0, d, t),
                        );
                    }
                    if needs[1 + s] {
                        let acc = dm[s].get_or_insert_with(|| Tensor::zeros(&[d, d]));
                        gemm(
                            T::one(),
                            MatRef::rm(gy.batch(bi), 0, d, t),
                            MatRef::rm(xv.batch(bi), 0, d, t).t(),
                            T::one(),
                            MatMut::rm(acc.data_mut(), 0, d, d),
                        );
                    }
                }
                let mut res = vec![dx];
                res.extend(dm);
                res
            }),
        ))
    }

    /// Per-sample sensor attention: `out[b] = w[b] · x[b]` with
    /// `w: B×D×C` and `x: B×C×T`.
    pub fn batched_matmul(&mut self, w: Var, x: Var) -> Result<Var> {
        let (b, d, c) = self.value(w).dims3()?;
        let (bx, cx, t) = self.value(x).dims3()?;
        if b != bx || c != cx {
            return Err(Error::shape(
                "batched_matmul",
                format!("weights {:?} vs input {:?}", self.value(w).shape(), self.value(x).shape()),
            ));
        }
        let wv = self.value(w).clone();
        let xv = self.value(x).clone();
        let mut out = Tensor::zeros(&[b, d, t]);
        for bi in 0..b {
            gemm(
                T::one(),
                MatRef::rm(wv.batch(bi), 0, d, c),
                MatRef::rm(xv.batch(bi), 0, c, t),
                T::zero(),
                MatMut::rm(out.batch_mut(bi), 0, d, t),
            );
        }
        Ok(self.record(
            out,
            &[w, x],
            Box::new(move |gy, needs| {
                let dw = needs[0].then(|| {
                    let mut dw = Tensor::zeros(&[b, d, c]);
                    for bi in 0..b {
                        gemm(
                            T::one(),
                            MatRef::rm(gy.batch(bi), 0, d, t),
                            MatRef::rm(xv.batch(bi), 0, c, t).t(),
                            T::zero(),
                            MatMut::rm(dw.batch_mut(bi), 0, d, c),
                        );
                    }
                    dw
                });
                let dx = needs[1].then(|| {
                    let mut dx = Tensor::zeros(&[b, c, t]);
                    for bi in 0..b {
                        gemm(
                            T::one(),
                            MatRef::rm(wv.batch(bi), 0, d, c).t(),
                            MatRef::rm(gy.batch(bi), 0, d, t),
                            T::zero(),
                            MatMut::rm(dx.batch_mut(bi), 0, c, t),
                        );
                    }
                    dx
                });
                vec![dw, dx]
            }),
        ))
    }

    /// Softmax over the last axis of `logits: L×D×C`, gathered per sample
    /// by `layout[b]` and restricted to the sensors where `keep[b][i]`.
    /// Output `B×D×C`; excluded sensors get weight zero.
    pub fn masked_softmax(&mut self, logits: Var, layout: &[usize], keep: &[Vec<bool>]) -> Result<Var> {
        let (l, d, c) = self.value(logits).dims3()?;
        let b = layout.len();
        if keep.len() != b || keep.iter().any(|k| k.len() != c) || layout.iter().any(|&i| i >= l) {
            return Err(Error::shape("masked_softmax", "layout/mask do not match logits"));
        }
        if let Some(bi) = keep.iter().position(|k| !k.iter().any(|&x| x)) {
            return Err(Error::invalid("keep", format!("all sensors masked for batch item {bi}")));
        }
        let lv = self.value(logits);
        let mut out = Tensor::zeros(&[b, d, c]);
        for bi in 0..b {
            let src = lv.batch(layout[bi]);
            let dst = out.batch_mut(bi);
            for j in 0..d {
                let row = &src[j * c..(j + 1) * c];
                let max = row
                    .iter()
                    .zip(&keep[bi])
                    .filter(|(_, &k)| k)
                    .fold(T::neg_infinity(), |m, (&x, _)| m.max(x));
                let mut sum = T::zero();
                for i in 0..c {
                    let e = if keep[bi][i] { (row[i] - max).exp() } else { T::zero() };
                    dst[j * c + i] = e;
                    sum += e;
                }
                for i in 0..c {
                    dst[j * c + i] = dst[j * c + i] / sum;
                }
            }
        }
        let p = out.clone();
        let layout = layout.to_vec();
        Ok(self.record(
            out,
            &[logits],
            Box::new(move |gy, _| {
                let mut dl = Tensor::zeros(&[l, d, c]);
                for bi in 0..b {
                    let pb = p.batch(bi);
                    let gb = gy.batch(bi);
                    let dst = dl.batch_mut(layout[bi]);
                    for j in 0..d {
                        let pr = &pb[j * c..(j + 1) * c];
                        let gr = &gb[j * c..(j + 1) * c];
                        let dot: T = pr.iter().zip(gr).map(|(&a, &g)| a * g).sum();
                        for i in 0..c {
                            dst[j * c + i] += pr[i] * (gr[i] - dot);
                        }
                    }
                }
                vec![Some(dl)]
            }),
        ))
    }

    /// `out[l] = a · basis[l]` for a shared `a: D×…` (trailing axes
    /// flattened to `K`) and constant
    /// `basis: L×K×C`. Used to evaluate Fourier fields at sensor positions.
    pub fn project_basis(&mut self, a: Var, basis: &Tensor<T>) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("project_basis", "coefficients must be at least rank 2"));
        }
        let (d, k) = (shape[0], shape[1..].iter().product::<usize>());
        let (l, bk, c) = basis.dims3()?;
        if bk != k {
            return Err(Error::shape("project_basis", format!("basis has {bk} terms, coefficients {k}")));
        }
        let av = self.value(a).clone();
        let basis = basis.clone();
        let mut out = Tensor::zeros(&[l, d, c]);
        for li in 0..l {
            gemm(
                T::one(),
                MatRef::rm(av.data(), 0, d, k),
                MatRef::rm(basis.batch(li), 0, k, c),
                T::zero(),
                MatMut::rm(out.batch_mut(li), 0, d, c),
            );
        }
        Ok(self.record(
            out,
            &[a],
            Box::new(move |gy, _| {
                let mut da = Tensor::zeros(&shape);
                for li in 0..l {
                    gemm(
                        T::one(),
                        MatRef::rm(gy.batch(li), 0, d, c),
                        MatRef::rm(basis.batch(li), 0, k, c).t(),
                        T::one(),
                        MatMut::rm(da.data_mut(), 0, d, k),
                    );
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Elementwise sum of several equally shaped vars.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let mut acc = *vars
            .first()
            .ok_or_else(|| Error::invalid("vars", "nothing to sum"))?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }
}

fn pad_into<T: Real>(x: &[T], c: usize, t: usize, pad: usize, out: &mut [T]) {
    let tp = t + 2 * pad;
    for ch in 0..c {
        let row = &mut out[ch * tp..(ch + 1) * tp];
        row[..pad].iter_mut().for_each(|v| *v = T::zero());
        row[pad..pad + t].copy_from_slice(&x[ch * t..(ch + 1) * t]);
        row[pad + t..].iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Tap `ki` of a `Cout×Cin×K` weight as a `Cout×Cin` view.
fn kernel_tap<T>(w: &[T], cout: usize, cin: usize, k: usize, ki: usize) -> MatRef<'_, T> {
    MatRef {
        data: w,
        offset: ki,
        rows: cout,
        cols: cin,
        row_stride: cin * k,
        col_stride: k,
    }
}

fn kernel_tap_mut<T>(w: &mut [T], cout: usize, cin: usize, k: usize, ki: usize) -> MatMut<'_, T> {
    MatMut {
        data: w,
        offset: ki,
        rows: cout,
        cols: cin,
        row_stride: cin * k,
        col_stride: k,
    }
}

/// `C×T` window of a padded `C×Tp` buffer starting at column `start`.
fn shifted<T>(xp: &[T], c: usize, t: usize, tp: usize, start: usize) -> MatRef<'_, T> {
    MatRef {
        data: xp,
        offset: start,
        rows: c,
        cols: t,
        row_stride: tp,
        col_stride: 1,
    }
}
