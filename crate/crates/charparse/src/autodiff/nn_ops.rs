//! Linear algebra and neural-network primitives recorded on the tape.

use super::tape::{debug_check_finite, BackFn, Tape, Var};
use super::tensor::{Element, Tensor};
use super::{arg_error, shape_error, Result};

impl<E: Element> Tape<E> {
    /// `a [m×k] @ b [k×n] -> [m×n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = dims2("matmul", &av)?;
        let (kb, n) = dims2("matmul", &bv)?;
        if k != kb {
            return Err(shape_error(
                "matmul",
                format!("inner dims differ: {:?} @ {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::from_vec(vec![m, n], mm(av.data(), bv.data(), m, k, n))?;
        debug_check_finite("matmul", &[&av, &bv], &out);
        let (ai, bi) = (Self::node_index(a), Self::node_index(b));
        let backward: BackFn<E> = Box::new(move |g| {
            // dA = G @ B^T, dB = A^T @ G
            let da = mm_tb(g.data(), bv.data(), m, n, k);
            let db = mm_ta(av.data(), g.data(), m, k, n);
            vec![
                (ai, Tensor::from_vec(vec![m, k], da).unwrap()),
                (bi, Tensor::from_vec(vec![k, n], db).unwrap()),
            ]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// `a [m×k] @ b^T` where `b` is `[n×k]` -> `[m×n]`
    pub fn matmul_tb(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = dims2("matmul_tb", &av)?;
        let (n, kb) = dims2("matmul_tb", &bv)?;
        if k != kb {
            return Err(shape_error(
                "matmul_tb",
                format!("inner dims differ: {:?} @ {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::from_vec(vec![m, n], mm_tb(av.data(), bv.data(), m, k, n))?;
        debug_check_finite("matmul_tb", &[&av, &bv], &out);
        let (ai, bi) = (Self::node_index(a), Self::node_index(b));
        let backward: BackFn<E> = Box::new(move |g| {
            // dA = G @ B, dB = G^T @ A
            let da = mm(g.data(), bv.data(), m, n, k);
            let db = mm_ta(g.data(), av.data(), m, n, k);
            vec![
                (ai, Tensor::from_vec(vec![m, k], da).unwrap()),
                (bi, Tensor::from_vec(vec![n, k], db).unwrap()),
            ]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Batched `a [ba×m×k] @ b [bb×k×n] -> [max(ba,bb)×m×n]`; a batch of 1
    /// broadcasts against the other side.
    pub fn batched_matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl("batched_matmul", a, b, false)
    }

    /// Batched `a [ba×m×k] @ b^T` with `b [bb×n×k]`.
    pub fn batched_matmul_tb(&self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl("batched_matmul_tb", a, b, true)
    }

    fn bmm_impl(&self, op: &'static str, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = dims3(op, &av)?;
        let (bb, d1, d2) = dims3(op, &bv)?;
        let (kb, n) = if trans_b { (d2, d1) } else { (d1, d2) };
        if k != kb {
            return Err(shape_error(
                op,
                format!("inner dims differ: {:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        if ba != bb && ba != 1 && bb != 1 {
            return Err(shape_error(op, format!("batch dims differ: {ba} vs {bb}")));
        }
        let batch = ba.max(bb);
        let mut out = vec![E::ZERO; batch * m * n];
        for t in 0..batch {
            let ta = if ba == 1 { 0 } else { t };
            let tb = if bb == 1 { 0 } else { t };
            let sa = &av.data()[ta * m * k..][..m * k];
            let sb = &bv.data()[tb * k * n..][..k * n];
            let dst = if trans_b {
                mm_tb(sa, sb, m, k, n)
            } else {
                mm(sa, sb, m, k, n)
            };
            out[t * m * n..(t + 1) * m * n].copy_from_slice(&dst);
        }
        let out = Tensor::from_vec(vec![batch, m, n], out)?;
        debug_check_finite(op, &[&av, &bv], &out);

        let (ai, bi) = (Self::node_index(a), Self::node_index(b));
        let backward: BackFn<E> = Box::new(move |g| {
            let mut da = vec![E::ZERO; ba * m * k];
            let mut db = vec![E::ZERO; bb * k * n];
            for t in 0..batch {
                let gt = &g.data()[t * m * n..(t + 1) * m * n];
                let sa = &av.data()[if ba == 1 { 0 } else { t * m * k }..][..m * k];
                let sb = &bv.data()[if bb == 1 { 0 } else { t * k * n }..][..k * n];
                let (da_t, db_t) = if trans_b {
                    // out = A @ B^T with B stored [n×k]
                    (mm(gt, sb, m, n, k), mm_ta(gt, sa, m, n, k))
                } else {
                    (mm_tb(gt, sb, m, n, k), mm_ta(sa, gt, m, k, n))
                };
                let oa = if ba == 1 { 0 } else { t * m * k };
                for (i, v) in da_t.into_iter().enumerate() {
                    da[oa + i] += v;
                }
                let ob = if bb == 1 { 0 } else { t * k * n };
                for (i, v) in db_t.into_iter().enumerate() {
                    db[ob + i] += v;
                }
            }
            let db_shape = if trans_b {
                vec![bb, n, k]
            } else {
                vec![bb, k, n]
            };
            vec![
                (ai, Tensor::from_vec(vec![ba, m, k], da).unwrap()),
                (bi, Tensor::from_vec(db_shape, db).unwrap()),
            ]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Row lookup into an embedding table: `table [v×d]`, ids of length `l`
    /// -> `[l×d]`. Repeated ids accumulate gradient.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = dims2("gather_rows", &tv)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(arg_error(
                "gather_rows",
                format!("id {bad} out of range for table of {v} rows"),
            ));
        }
        let mut out = vec![E::ZERO; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(vec![ids.len(), d], out)?;
        let ti = Self::node_index(table);
        let ids = ids.to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gt = vec![E::ZERO; v * d];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g.data()[r * d + j];
                }
            }
            vec![(ti, Tensor::from_vec(vec![v, d], gt).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// 1-D convolution over positions, valid padding.
    ///
    /// `x [n×len×cin]`, `w [width×cin×cout]`, `bias [cout]`
    /// -> `[n×(len-width+1)×cout]`.
    pub fn conv1d_valid(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let (n, len, cin) = dims3("conv1d_valid", &xv)?;
        let (width, wcin, cout) = dims3("conv1d_valid", &wv)?;
        if wcin != cin {
            return Err(shape_error(
                "conv1d_valid",
                format!("input channels {cin} != kernel channels {wcin}"),
            ));
        }
        if bv.shape() != [cout] {
            return Err(shape_error(
                "conv1d_valid",
                format!("bias shape {:?}, expected [{cout}]", bv.shape()),
            ));
        }
        if width > len {
            return Err(shape_error(
                "conv1d_valid",
                format!("kernel width {width} exceeds sequence length {len}"),
            ));
        }
        let out_len = len - width + 1;
        let mut out = vec![E::ZERO; n * out_len * cout];
        for s in 0..n {
            for p in 0..out_len {
                let o_base = (s * out_len + p) * cout;
                out[o_base..o_base + cout].copy_from_slice(bv.data());
                for dw in 0..width {
                    let x_base = (s * len + p + dw) * cin;
                    for ci in 0..cin {
                        let xval = xv.data()[x_base + ci];
                        let w_base = (dw * cin + ci) * cout;
                        for co in 0..cout {
                            out[o_base + co] += xval * wv.data()[w_base + co];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![n, out_len, cout], out)?;
        debug_check_finite("conv1d_valid", &[&xv, &wv, &bv], &out);

        let (xi, wi, bi) = (
            Self::node_index(x),
            Self::node_index(w),
            Self::node_index(bias),
        );
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; n * len * cin];
            let mut gw = vec![E::ZERO; width * cin * cout];
            let mut gb = vec![E::ZERO; cout];
            for s in 0..n {
                for p in 0..out_len {
                    let o_base = (s * out_len + p) * cout;
                    for co in 0..cout {
                        gb[co] += g.data()[o_base + co];
                    }
                    for dw in 0..width {
                        let x_base = (s * len + p + dw) * cin;
                        for ci in 0..cin {
                            let w_base = (dw * cin + ci) * cout;
                            let mut acc = E::ZERO;
                            for co in 0..cout {
                                let go = g.data()[o_base + co];
                                acc += go * wv.data()[w_base + co];
                                gw[w_base + co] += go * xv.data()[x_base + ci];
                            }
                            gx[x_base + ci] += acc;
                        }
                    }
                }
            }
            vec![
                (xi, Tensor::from_vec(vec![n, len, cin], gx).unwrap()),
                (wi, Tensor::from_vec(vec![width, cin, cout], gw).unwrap()),
                (bi, Tensor::from_vec(vec![cout], gb).unwrap()),
            ]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Max over the time axis: `x [n×len×c] -> [n×c]`. Ties route the
    /// gradient to the earliest position.
    pub fn max_over_time(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, len, c) = dims3("max_over_time", &xv)?;
        if len == 0 {
            return Err(arg_error("max_over_time", "empty time axis"));
        }
        let mut out = vec![E::ZERO; n * c];
        let mut argmax = vec![0usize; n * c];
        for s in 0..n {
            for j in 0..c {
                let mut best = xv.data()[(s * len) * c + j];
                let mut best_p = 0;
                for p in 1..len {
                    let v = xv.data()[(s * len + p) * c + j];
                    if v > best {
                        best = v;
                        best_p = p;
                    }
                }
                out[s * c + j] = best;
                argmax[s * c + j] = best_p;
            }
        }
        let out = Tensor::from_vec(vec![n, c], out)?;
        let xi = Self::node_index(x);
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; n * len * c];
            for s in 0..n {
                for j in 0..c {
                    let p = argmax[s * c + j];
                    gx[(s * len + p) * c + j] += g.data()[s * c + j];
                }
            }
            vec![(xi, Tensor::from_vec(vec![n, len, c], gx).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = last_dim("softmax", &xv)?;
        let rows = xv.numel() / k;
        let mut out = vec![E::ZERO; xv.numel()];
        for r in 0..rows {
            softmax_row(&xv.data()[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let xi = Self::node_index(x);
        let ov = out.clone();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; ov.numel()];
            for r in 0..rows {
                let p = &ov.data()[r * k..(r + 1) * k];
                let gr = &g.data()[r * k..(r + 1) * k];
                let mut dot = E::ZERO;
                for j in 0..k {
                    dot += gr[j] * p[j];
                }
                for j in 0..k {
                    gx[r * k + j] = p[j] * (gr[j] - dot);
                }
            }
            vec![(xi, Tensor::from_vec(ov.shape().to_vec(), gx).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = last_dim("log_softmax", &xv)?;
        let rows = xv.numel() / k;
        let mut out = vec![E::ZERO; xv.numel()];
        for r in 0..rows {
            log_softmax_row(&xv.data()[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let xi = Self::node_index(x);
        let ov = out.clone();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; ov.numel()];
            for r in 0..rows {
                let lp = &ov.data()[r * k..(r + 1) * k];
                let gr = &g.data()[r * k..(r + 1) * k];
                let mut gsum = E::ZERO;
                for j in 0..k {
                    gsum += gr[j];
                }
                for j in 0..k {
                    gx[r * k + j] = gr[j] - lp[j].exp() * gsum;
                }
            }
            vec![(xi, Tensor::from_vec(ov.shape().to_vec(), gx).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Layer normalization over the last axis with learned affine.
    ///
    /// Rows with variance below 1e-12 normalize to zero (the affine shift
    /// still applies), so degenerate constant rows stay finite.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let d = last_dim("layer_norm", &xv)?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_error(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} for feature dim {d}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.numel() / d;
        let var_floor = E::from_f64(1e-12);

        let mut xhat = vec![E::ZERO; xv.numel()];
        let mut inv_sigma = vec![E::ZERO; rows];
        let inv_d = E::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mut mu = E::ZERO;
            for &v in row {
                mu += v;
            }
            mu = mu * inv_d;
            let mut var = E::ZERO;
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var = var * inv_d;
            if var < var_floor {
                inv_sigma[r] = E::ZERO; // zero-variance convention: xhat stays 0
            } else {
                let inv = E::ONE / var.sqrt();
                inv_sigma[r] = inv;
                for j in 0..d {
                    xhat[r * d + j] = (row[j] - mu) * inv;
                }
            }
        }
        let mut out = vec![E::ZERO; xv.numel()];
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = gv.data()[j] * xhat[r * d + j] + bv.data()[j];
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
        debug_check_finite("layer_norm", &[&xv, &gv, &bv], &out);

        let (xi, gi, bi) = (
            Self::node_index(x),
            Self::node_index(gamma),
            Self::node_index(beta),
        );
        let shape = xv.shape().to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; shape.iter().product()];
            let mut gg = vec![E::ZERO; d];
            let mut gb = vec![E::ZERO; d];
            for r in 0..rows {
                let inv = inv_sigma[r];
                let mut mean_gy = E::ZERO;
                let mut mean_gy_xhat = E::ZERO;
                for j in 0..d {
                    let go = g.data()[r * d + j];
                    let xh = xhat[r * d + j];
                    gg[j] += go * xh;
                    gb[j] += go;
                    let gy = go * gv.data()[j];
                    mean_gy += gy;
                    mean_gy_xhat += gy * xh;
                }
                if inv == E::ZERO {
                    continue; // zero-variance rows contribute no input gradient
                }
                mean_gy = mean_gy * inv_d;
                mean_gy_xhat = mean_gy_xhat * inv_d;
                for j in 0..d {
                    let gy = g.data()[r * d + j] * gv.data()[j];
                    let xh = xhat[r * d + j];
                    gx[r * d + j] = inv * (gy - mean_gy - xh * mean_gy_xhat);
                }
            }
            vec![
                (xi, Tensor::from_vec(shape.clone(), gx).unwrap()),
                (gi, Tensor::from_vec(vec![d], gg).unwrap()),
                (bi, Tensor::from_vec(vec![d], gb).unwrap()),
            ]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Mean cross-entropy of `logits [n×k]` against `targets`, restricted to
    /// positions where `mask` is true. Returns a `[1]`-shaped scalar; if no
    /// position is masked the result is a constant 0.
    pub fn masked_cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = dims2("masked_cross_entropy", &lv)?;
        if targets.len() != n || mask.len() != n {
            return Err(shape_error(
                "masked_cross_entropy",
                format!(
                    "{n} rows vs {} targets / {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(self.constant(Tensor::scalar(E::ZERO)));
        }
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= k {
                return Err(arg_error(
                    "masked_cross_entropy",
                    format!("target id {t} out of range at row {i} (classes: {k})"),
                ));
            }
        }

        let mut logp = vec![E::ZERO; n * k];
        for r in 0..n {
            log_softmax_row(
                &lv.data()[r * k..(r + 1) * k],
                &mut logp[r * k..(r + 1) * k],
            );
        }
        let inv_count = E::from_f64(1.0 / count as f64);
        let mut loss = E::ZERO;
        for r in 0..n {
            if mask[r] {
                loss += -logp[r * k + targets[r]];
            }
        }
        loss = loss * inv_count;
        let out = Tensor::scalar(loss);

        let li = Self::node_index(logits);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            let scale = g.data()[0] * inv_count;
            let mut gl = vec![E::ZERO; n * k];
            for r in 0..n {
                if !mask[r] {
                    continue;
                }
                for j in 0..k {
                    let p = logp[r * k + j].exp();
                    let y = if j == targets[r] { E::ONE } else { E::ZERO };
                    gl[r * k + j] = (p - y) * scale;
                }
            }
            vec![(li, Tensor::from_vec(vec![n, k], gl).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Per-row log-likelihood of the target class (no gradient; used for
    /// held-out evaluation).
    pub fn log_likelihoods(&self, logits: Var, targets: &[usize]) -> Result<Vec<f64>> {
        let lv = self.value(logits);
        let (n, k) = dims2("log_likelihoods", &lv)?;
        if targets.len() != n {
            return Err(shape_error("log_likelihoods", "target count mismatch"));
        }
        let mut out = Vec::with_capacity(n);
        let mut row = vec![E::ZERO; k];
        for r in 0..n {
            log_softmax_row(&lv.data()[r * k..(r + 1) * k], &mut row);
            out.push(row[targets[r]].to_f64());
        }
        Ok(out)
    }
}

// ---- raw matrix kernels -----------------------------------------------------

/// `a [m×k] @ b [k×n]`, ikj order.
fn mm<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            let bs = &b[l * n..(l + 1) * n];
            let os = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                os[j] += av * bs[j];
            }
        }
    }
    out
}

/// `a [m×k] @ b^T` with `b [n×k]` (row-dot-row).
fn mm_tb<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for l in 0..k {
                acc += ar[l] * br[l];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a^T @ b` with `a [m×k]`, `b [m×n]` -> `[k×n]`.
fn mm_ta<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; k * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            let bs = &b[i * n..(i + 1) * n];
            let os = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                os[j] += av * bs[j];
            }
        }
    }
    out
}

fn softmax_row<E: Element>(x: &[E], out: &mut [E]) {
    let mut max = x[0];
    for &v in x {
        max = max.max(v);
    }
    let mut sum = E::ZERO;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_softmax_row<E: Element>(x: &[E], out: &mut [E]) {
    let mut max = x[0];
    for &v in x {
        max = max.max(v);
    }
    let mut sum = E::ZERO;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - max - lse;
    }
}

fn last_dim<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(shape_error(
            op,
            format!("bad last axis in shape {:?}", t.shape()),
        )),
    }
}

fn dims2<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(shape_error(op, format!("expected rank 2, got {:?}", s))),
    }
}

fn dims3<E: Element>(op: &'static str, t: &Tensor<E>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_error(op, format!("expected rank 3, got {:?}", s))),
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape::Tape;
    use super::super::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let out = tape.matmul(i2, a).unwrap();
        assert!(tape.value(out).bits_equal(&tape.value(a)));
    }

    #[test]
    fn matmul_tb_matches_explicit_transpose() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(
            &[4, 3],
            &[0.5, -1.0, 2.0, 1.0, 1.0, 1.0, 0.0, 2.0, -2.0, 3.0, 0.0, 1.0],
        ));
        let bt = tape.swap_axes(b, 0, 1).unwrap();
        let direct = tape.matmul_tb(a, b).unwrap();
        let via_t = tape.matmul(a, bt).unwrap();
        assert!(tape.value(direct).bits_equal(&tape.value(via_t)));
    }

    #[test]
    fn softmax_uniform_on_constant_row() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(
            &[2, 4],
            &[1.0, -2.0, 0.5, 3.0, 100.0, 100.0, -100.0, 0.0],
        ));
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        for r in 0..2 {
            let sum: f64 = v.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_handles_neg_infinity_bans() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.0, f64::NEG_INFINITY, 0.0]));
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        assert_eq!(v.data()[1], 0.0);
        assert!((v.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_shift_only() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]));
        let gamma = tape.constant(t(&[4], &[2.0, 2.0, 2.0, 2.0]));
        let beta = tape.constant(t(&[4], &[0.25, 0.25, 0.25, 0.25]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn masked_cross_entropy_uniform_logits() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 100]));
        let loss = tape
            .masked_cross_entropy(logits, &[3, 42], &[true, true])
            .unwrap();
        let v = tape.value(loss).item();
        assert!((v - (100.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn masked_cross_entropy_empty_mask_is_zero() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 5]));
        let loss = tape
            .masked_cross_entropy(logits, &[0, 0], &[false, false])
            .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn masked_cross_entropy_rejects_bad_target() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(tape.masked_cross_entropy(logits, &[5], &[true]).is_err());
    }

    #[test]
    fn max_over_time_routes_gradient_to_first_argmax() {
        use super::super::params::ParamStore;
        let mut store = ParamStore::<f64>::new();
        let p = store
            .register("x", t(&[1, 3, 1], &[2.0, 2.0, 1.0]))
            .unwrap();
        let tape = Tape::new();
        let x = tape.param(p, &store);
        let m = tape.max_over_time(x).unwrap();
        let loss = tape.sum_all(m);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeated_ids() {
        use super::super::params::ParamStore;
        let mut store = ParamStore::<f64>::new();
        let p = store
            .register("emb", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let tape = Tape::new();
        let table = tape.param(p, &store);
        let rows = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(rows).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum_all(rows);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1d_shapes_and_known_value() {
        let tape = Tape::<f64>::new();
        // One word, 4 positions, 1 channel; width-2 sum kernel, 1 filter.
        let x = tape.constant(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv1d_valid(x, w, b).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 3, 1]);
        assert_eq!(v.data(), &[3.0, 5.0, 7.0]);
    }
}
