use super::Tensor;
use crate::{Error, Result};

/// Treats any tensor of rank >= 1 as a matrix: all leading extents fold into rows.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, lead)) => (lead.iter().product(), c),
    }
}

fn only(need: bool, f: impl FnOnce() -> Vec<f64>) -> Option<Vec<f64>> {
    need.then(f)
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, need| vec![only(need[0], || g.to_vec()), only(need[1], || g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, need| {
                vec![
                    only(need[0], || g.to_vec()),
                    only(need[1], || g.iter().map(|x| -x).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, need| {
                vec![
                    only(need[0], || g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect()),
                    only(need[1], || g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect()),
                ]
            },
        ))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a / b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, need| {
                let (a, b) = (a.data(), b.data());
                vec![
                    only(need[0], || g.iter().zip(b.iter()).map(|(g, b)| g / b).collect()),
                    only(need[1], || {
                        g.iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect()
                    }),
                ]
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|x| x * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Multiplies by a constant, non-differentiable mask (dropout).
    pub fn mask_mul(&self, mask: &[f64]) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::shape("mask_mul", self.shape(), &[mask.len()]));
        }
        let data = self.data().iter().zip(mask).map(|(x, m)| x * m).collect();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())],
        ))
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|x| x * x).collect();
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(x.data().iter()).map(|(g, x)| 2.0 * g * x).collect())]
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x.sqrt()).collect();
        let y = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&y).map(|(g, y)| g * 0.5 / y).collect())]
        })
    }

    /// x * sigmoid(x)
    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let grad = g
                .iter()
                .zip(x.data().iter())
                .map(|(g, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(grad)]
        })
    }

    /// Clamps values; the gradient passes only where the input was inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let grad = g
                .iter()
                .zip(x.data().iter())
                .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                .collect();
            vec![Some(grad)]
        })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (a, b) = (self.data(), other.data());
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for t in 0..k {
                    let av = a[i * k + t];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[t * n..(t + 1) * n];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |g, need| {
                let (ad, bd) = (a.data(), b.data());
                let da = only(need[0], || {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let brow = &bd[t * n..(t + 1) * n];
                            da[i * k + t] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    da
                });
                let db = only(need[1], || {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let av = ad[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[t * n..(t + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        {
            let d = self.data();
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, r], vec![self.clone()], move |g, _| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Row-wise softmax with max subtraction. NaN input is rejected.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = as_matrix(self.shape());
        let mut out = self.to_vec();
        if out.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax input contains NaN".into()));
        }
        for row in out.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![0.0; y.len()];
                for ((dx, y), g) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((d, y), g) in dx.iter_mut().zip(y).zip(g) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Root-mean-square normalization over the last axis, then elementwise gain.
    pub fn rms_norm(&self, gamma: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = as_matrix(self.shape());
        if c == 0 || self.shape().is_empty() {
            return Err(Error::Invalid("rms_norm over a zero-length row".into()));
        }
        if gamma.shape() != [c] {
            return Err(Error::shape("rms_norm", self.shape(), gamma.shape()));
        }
        let mut out = vec![0.0; r * c];
        let mut inv = vec![0.0; r];
        {
            let (x, g) = (self.data(), gamma.data());
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                inv[i] = 1.0 / (ms + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = row[j] * inv[i] * g[j];
                }
            }
        }
        let (x, gm) = (self.clone(), gamma.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone()],
            move |dy, need| {
                let (xd, gd) = (x.data(), gm.data());
                let dx = only(need[0], || {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let xr = &xd[i * c..(i + 1) * c];
                        let dyr = &dy[i * c..(i + 1) * c];
                        let dot: f64 = (0..c).map(|j| dyr[j] * gd[j] * xr[j]).sum();
                        let s = inv[i];
                        for j in 0..c {
                            dx[i * c + j] = s * (dyr[j] * gd[j] - xr[j] * s * s * dot / c as f64);
                        }
                    }
                    dx
                });
                let dg = only(need[1], || {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * xd[i * c + j] * inv[i];
                        }
                    }
                    dg
                });
                vec![dx, dg]
            },
        ))
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("center_columns", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let center = move |x: &[f64]| {
            let mut means = vec![0.0; c];
            for row in x.chunks(c) {
                means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            means.iter_mut().for_each(|m| *m /= r as f64);
            let mut out = x.to_vec();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(&means).for_each(|(v, m)| *v -= m);
            }
            out
        };
        let out = center(&self.data());
        Ok(Tensor::from_op(out, vec![r, c], vec![self.clone()], move |g, _| {
            vec![Some(center(g))]
        }))
    }

    /// Selects rows (over the flattened leading axes) into a 2-D result.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = as_matrix(self.shape());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!("row index {bad} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        {
            let d = self.data();
            for &i in indices {
                out.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
        }
        let indices = indices.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![indices.len(), c],
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![0.0; r * c];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *d += gv;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask and a key
    /// padding mask. Inputs are `[batch*seq, d]`; a query with no admissible
    /// key yields a zero output row.
    pub fn causal_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Tensor> {
        let d = *q.shape().last().unwrap_or(&0);
        if q.shape() != [batch * seq, d] || k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape("attention", q.shape(), k.shape()));
        }
        if heads == 0 || !d.is_multiple_of(heads) || key_mask.len() != batch * seq {
            return Err(Error::Invalid("attention head/mask layout".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        {
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let mut scores = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for t in 0..seq {
                        let qrow = &qd[(b * seq + t) * d + off..][..dh];
                        let mut max = f64::NEG_INFINITY;
                        for s in 0..=t {
                            if !key_mask[b * seq + s] {
                                continue;
                            }
                            let krow = &kd[(b * seq + s) * d + off..][..dh];
                            let sc = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[s] = sc;
                            max = max.max(sc);
                        }
                        if max == f64::NEG_INFINITY {
                            continue;
                        }
                        let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                        let mut z = 0.0;
                        for s in 0..=t {
                            if key_mask[b * seq + s] {
                                p[s] = (scores[s] - max).exp();
                                z += p[s];
                            }
                        }
                        let orow = &mut out[(b * seq + t) * d + off..][..dh];
                        for s in 0..=t {
                            if p[s] == 0.0 {
                                continue;
                            }
                            p[s] /= z;
                            let vrow = &vd[(b * seq + s) * d + off..][..dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += p[s] * vv;
                            }
                        }
                    }
                }
            }
        }
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        Ok(Tensor::from_op(
            out,
            vec![batch * seq, d],
            vec![q.clone(), k.clone(), v.clone()],
            move |g, need| {
                let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
                let n = batch * seq * d;
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..seq {
                            let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                            let grow = &g[(b * seq + t) * d + off..][..dh];
                            let mut dot = 0.0;
                            for s in 0..=t {
                                if p[s] == 0.0 {
                                    dp[s] = 0.0;
                                    continue;
                                }
                                let vrow = &vd[(b * seq + s) * d + off..][..dh];
                                dp[s] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                dot += p[s] * dp[s];
                                if need[2] {
                                    for (dvv, gv) in dv[(b * seq + s) * d + off..][..dh].iter_mut().zip(grow) {
                                        *dvv += p[s] * gv;
                                    }
                                }
                            }
                            for s in 0..=t {
                                if p[s] == 0.0 {
                                    continue;
                                }
                                let ds = p[s] * (dp[s] - dot) * scale;
                                if need[0] {
                                    let krow = &kd[(b * seq + s) * d + off..][..dh];
                                    for (dqv, kv) in dq[(b * seq + t) * d + off..][..dh].iter_mut().zip(krow) {
                                        *dqv += ds * kv;
                                    }
                                }
                                if need[1] {
                                    let qrow = &qd[(b * seq + t) * d + off..][..dh];
                                    for (dkv, qv) in dk[(b * seq + s) * d + off..][..dh].iter_mut().zip(qrow) {
                                        *dkv += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![need[0].then_some(dq), need[1].then_some(dk), need[2].then_some(dv)]
            },
        ))
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is present.
    ///
    /// Each counted row contributes `(1-eps)*nll(gold) + eps*mean_v nll(v)`.
    pub fn smoothed_cross_entropy(&self, targets: &[Option<usize>], eps: f64) -> Result<Tensor> {
        let (r, v) = as_matrix(self.shape());
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        let n_valid = targets.iter().flatten().count();
        if n_valid == 0 {
            return Err(Error::Invalid("no target positions to score".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Invalid(format!("target id {bad} out of range for vocab {v}")));
        }
        let mut total = 0.0;
        {
            let z = self.data();
            for (i, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = &z[i * v..(i + 1) * v];
                let lse = log_sum_exp(row);
                let mean_z = row.iter().sum::<f64>() / v as f64;
                total += (1.0 - eps) * (lse - row[t]) + eps * (lse - mean_z);
            }
        }
        let loss = total / n_valid as f64;
        let logits = self.clone();
        let targets = targets.to_vec();
        Ok(Tensor::from_op(vec![loss], vec![], vec![self.clone()], move |g, _| {
            let z = logits.data();
            let w = g[0] / n_valid as f64;
            let mut dz = vec![0.0; r * v];
            for (i, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = &z[i * v..(i + 1) * v];
                let lse = log_sum_exp(row);
                let out = &mut dz[i * v..(i + 1) * v];
                for j in 0..v {
                    out[j] = w * ((row[j] - lse).exp() - eps / v as f64);
                }
                out[t] -= w * (1.0 - eps);
            }
            vec![Some(dz)]
        }))
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
