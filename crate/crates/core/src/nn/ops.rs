//! Forward and backward implementations of every differentiable op.
//!
//! All ops are methods on [`Graph`]; each validates shapes, computes the
//! output value, and (when the graph records and any input is tracked)
//! pushes a node whose closure scatters the output gradient into the
//! inputs. Layouts are fixed per op and documented on each method:
//! signal tensors are `[batch, channels, length]` in the CNN front end and
//! `[batch, length, features]` in the sequence model.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv_output_len, Activation, BnState, Mode};
use crate::tensor::NdArray;

fn rank_err(op: &str, want: &str, got: &[usize]) -> Error {
    Error::Shape(format!("{op}: expected {want}, found shape {got:?}"))
}

impl Graph {
    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip(b.value(), |x, y| x + y)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (aid, bid) = (a.id(), b.id());
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = aid {
                    store.accumulate(id, g.clone());
                }
                if let Some(id) = bid {
                    store.accumulate(id, g.clone());
                }
            },
            value,
        ))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip(b.value(), |x, y| x - y)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (aid, bid) = (a.id(), b.id());
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = aid {
                    store.accumulate(id, g.clone());
                }
                if let Some(id) = bid {
                    store.accumulate(id, g.map(|v| -v));
                }
            },
            value,
        ))
    }

    /// Elementwise (Hadamard) product of two same-shaped tensors.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.value().zip(b.value(), |x, y| x * y)?;
        if !self.tracks(&[a, b]) {
            return Ok(self.constant(value));
        }
        let (aid, bid) = (a.id(), b.id());
        let (av, bv) = (a.value_rc(), b.value_rc());
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = aid {
                    store.accumulate(id, g.zip(&bv, |gv, y| gv * y).expect("mul backward"));
                }
                if let Some(id) = bid {
                    store.accumulate(id, g.zip(&av, |gv, x| gv * x).expect("mul backward"));
                }
            },
            value,
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: &Var, c: f64) -> Result<Var> {
        let value = a.value().map(|v| c * v);
        if !self.tracks(&[a]) {
            return Ok(self.constant(value));
        }
        let aid = a.id();
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = aid {
                    store.accumulate(id, g.map(|v| c * v));
                }
            },
            value,
        ))
    }

    /// Elementwise exponential.
    pub fn exp(&self, a: &Var) -> Result<Var> {
        let value = a.value().map(f64::exp);
        if !self.tracks(&[a]) {
            return Ok(self.constant(value));
        }
        let aid = a.id();
        let out = Rc::new(value.clone());
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = aid {
                    store.accumulate(id, g.zip(&out, |gv, y| gv * y).expect("exp backward"));
                }
            },
            value,
        ))
    }

    /// Apply a pointwise nonlinearity.
    pub fn activation(&self, a: &Var, act: Activation) -> Result<Var> {
        let value = a.value().map(|v| act.eval(v));
        if !self.tracks(&[a]) {
            return Ok(self.constant(value));
        }
        let aid = a.id();
        let input = a.value_rc();
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = aid {
                    store.accumulate(
                        id,
                        g.zip(&input, |gv, x| gv * act.derivative(x)).expect("activation backward"),
                    );
                }
            },
            value,
        ))
    }

    /// Row-wise softmax over the last axis; each row sums to 1.
    pub fn softmax(&self, a: &Var) -> Result<Var> {
        let shape = a.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| rank_err("softmax", "rank >= 1", &shape))?;
        if cols == 0 {
            return Err(rank_err("softmax", "non-empty last axis", &shape));
        }
        let mut value = NdArray::zeros(&shape);
        for (row_out, row_in) in
            value.data_mut().chunks_mut(cols).zip(a.value().data().chunks(cols))
        {
            let m = row_in.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        if !self.tracks(&[a]) {
            return Ok(self.constant(value));
        }
        let aid = a.id();
        let out = Rc::new(value.clone());
        Ok(self.push_op(
            move |g, store| {
                let Some(id) = aid else { return };
                let mut dx = NdArray::zeros(out.shape());
                for ((dx_row, g_row), y_row) in dx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(g.data().chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(&gv, &y)| gv * y).sum();
                    for ((d, &gv), &y) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                        *d = y * (gv - dot);
                    }
                }
                store.accumulate(id, dx);
            },
            value,
        ))
    }

    /// Affine map over the last axis: `y = x W^T + b`.
    ///
    /// `x` is `[..., d_in]`, `w` is `[d_out, d_in]`, `b` is `[d_out]`; the
    /// output replaces the last axis with `d_out`.
    pub fn linear(&self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || b.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear: incompatible shapes x{:?} w{:?} b{:?}",
                xs,
                ws,
                b.shape()
            )));
        }
        let d_in = *xs.last().unwrap();
        let (d_out, wk) = (ws[0], ws[1]);
        if wk != d_in {
            return Err(Error::Shape(format!(
                "linear: x has {d_in} features but w expects {wk}"
            )));
        }
        let rows = x.value().len() / d_in;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let mut value = NdArray::zeros(&out_shape);
        {
            let xd = x.value().data();
            let wd = w.value().data();
            let bd = b.value().data();
            let yd = value.data_mut();
            for m in 0..rows {
                let xrow = &xd[m * d_in..(m + 1) * d_in];
                let yrow = &mut yd[m * d_out..(m + 1) * d_out];
                for (n, y) in yrow.iter_mut().enumerate() {
                    let wrow = &wd[n * d_in..(n + 1) * d_in];
                    let mut acc = bd[n];
                    for (xv, wv) in xrow.iter().zip(wrow) {
                        acc += xv * wv;
                    }
                    *y = acc;
                }
            }
        }
        if !self.tracks(&[x, w, b]) {
            return Ok(self.constant(value));
        }
        let (xid, wid, bid) = (x.id(), w.id(), b.id());
        let (xv, wv) = (x.value_rc(), w.value_rc());
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(xv.shape());
                    let dxd = dx.data_mut();
                    let wd = wv.data();
                    for m in 0..rows {
                        let grow = &gd[m * d_out..(m + 1) * d_out];
                        let dxrow = &mut dxd[m * d_in..(m + 1) * d_in];
                        for (n, &gv) in grow.iter().enumerate() {
                            let wrow = &wd[n * d_in..(n + 1) * d_in];
                            for (d, wv) in dxrow.iter_mut().zip(wrow) {
                                *d += gv * wv;
                            }
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = wid {
                    let mut dw = NdArray::zeros(wv.shape());
                    let dwd = dw.data_mut();
                    let xd = xv.data();
                    for m in 0..rows {
                        let grow = &gd[m * d_out..(m + 1) * d_out];
                        let xrow = &xd[m * d_in..(m + 1) * d_in];
                        for (n, &gv) in grow.iter().enumerate() {
                            let dwrow = &mut dwd[n * d_in..(n + 1) * d_in];
                            for (d, xv) in dwrow.iter_mut().zip(xrow) {
                                *d += gv * xv;
                            }
                        }
                    }
                    store.accumulate(id, dw);
                }
                if let Some(id) = bid {
                    let mut db = NdArray::zeros(&[d_out]);
                    let dbd = db.data_mut();
                    for m in 0..rows {
                        let grow = &gd[m * d_out..(m + 1) * d_out];
                        for (d, &gv) in dbd.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    store.accumulate(id, db);
                }
            },
            value,
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let xs = x.shape().to_vec();
        let d = *xs.last().ok_or_else(|| rank_err("layer_norm", "rank >= 1", &xs))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma{:?}/beta{:?} do not match feature width {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.value().len() / d;
        let mut xhat = NdArray::zeros(&xs);
        let mut inv_std = vec![0.0; rows];
        let mut value = NdArray::zeros(&xs);
        {
            let xd = x.value().data();
            let gd = gamma.value().data();
            let bd = beta.value().data();
            let hd = xhat.data_mut();
            let yd = value.data_mut();
            for m in 0..rows {
                let xrow = &xd[m * d..(m + 1) * d];
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[m] = istd;
                let hrow = &mut hd[m * d..(m + 1) * d];
                let yrow = &mut yd[m * d..(m + 1) * d];
                for i in 0..d {
                    hrow[i] = (xrow[i] - mean) * istd;
                    yrow[i] = gd[i] * hrow[i] + bd[i];
                }
            }
        }
        if !self.tracks(&[x, gamma, beta]) {
            return Ok(self.constant(value));
        }
        let (xid, gid, bid) = (x.id(), gamma.id(), beta.id());
        let gamma_v = gamma.value_rc();
        let xhat = Rc::new(xhat);
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                let hv = xhat.data();
                let gam = gamma_v.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(xhat.shape());
                    let dxd = dx.data_mut();
                    for m in 0..rows {
                        let grow = &gd[m * d..(m + 1) * d];
                        let hrow = &hv[m * d..(m + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..d {
                            let dyg = grow[i] * gam[i];
                            m1 += dyg;
                            m2 += dyg * hrow[i];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let dxrow = &mut dxd[m * d..(m + 1) * d];
                        for i in 0..d {
                            let dyg = grow[i] * gam[i];
                            dxrow[i] = (dyg - m1 - hrow[i] * m2) * inv_std[m];
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = gid {
                    let mut dgamma = NdArray::zeros(&[d]);
                    let dg = dgamma.data_mut();
                    for m in 0..rows {
                        let grow = &gd[m * d..(m + 1) * d];
                        let hrow = &hv[m * d..(m + 1) * d];
                        for i in 0..d {
                            dg[i] += grow[i] * hrow[i];
                        }
                    }
                    store.accumulate(id, dgamma);
                }
                if let Some(id) = bid {
                    let mut dbeta = NdArray::zeros(&[d]);
                    let db = dbeta.data_mut();
                    for m in 0..rows {
                        let grow = &gd[m * d..(m + 1) * d];
                        for i in 0..d {
                            db[i] += grow[i];
                        }
                    }
                    store.accumulate(id, dbeta);
                }
            },
            value,
        ))
    }

    /// Batch normalization over `[batch, channels, length]`.
    ///
    /// Training mode normalizes each channel by its batch statistics
    /// (biased variance) and folds an exponential update into the running
    /// statistics (`momentum` weight on the new batch; the running variance
    /// stores the unbiased estimate). Evaluation mode normalizes by the
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm1d(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        state: &mut BnState,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(rank_err("batch_norm1d", "[batch, channels, length]", &xs));
        }
        let (bsz, c, l) = (xs[0], xs[1], xs[2]);
        if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
            return Err(Error::Shape(format!(
                "batch_norm1d: channel mismatch (x has {c}, gamma {:?}, state {})",
                gamma.shape(),
                state.channels()
            )));
        }
        let n = bsz * l;
        if n == 0 {
            return Err(rank_err("batch_norm1d", "non-empty batch", &xs));
        }

        let (mean, var) = match mode {
            Mode::Train | Mode::Calibrate => {
                let xd = x.value().data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for b in 0..bsz {
                        let row = &xd[(b * c + ci) * l..(b * c + ci + 1) * l];
                        s += row.iter().sum::<f64>();
                    }
                    let mu = s / n as f64;
                    let mut sq = 0.0;
                    for b in 0..bsz {
                        let row = &xd[(b * c + ci) * l..(b * c + ci + 1) * l];
                        sq += row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = sq / n as f64;
                }
                // Fold this batch into the running statistics. Training
                // keeps an exponential average; calibration replaces it
                // with a cumulative mean over the batches seen since the
                // last reset (`batches_seen` counts them).
                let w = match mode {
                    Mode::Calibrate => 1.0 / (state.batches_seen + 1) as f64,
                    _ => momentum,
                };
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                for ci in 0..c {
                    let rm = &mut state.running_mean.data_mut()[ci];
                    *rm = (1.0 - w) * *rm + w * mean[ci];
                    let rv = &mut state.running_var.data_mut()[ci];
                    *rv = (1.0 - w) * *rv + w * var[ci] * unbias;
                }
                state.batches_seen += 1;
                (mean, var)
            }
            Mode::Eval => {
                (state.running_mean.data().to_vec(), state.running_var.data().to_vec())
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = NdArray::zeros(&xs);
        let mut value = NdArray::zeros(&xs);
        {
            let xd = x.value().data();
            let gd = gamma.value().data();
            let bd = beta.value().data();
            let hd = xhat.data_mut();
            let yd = value.data_mut();
            for b in 0..bsz {
                for ci in 0..c {
                    let o = (b * c + ci) * l;
                    for t in 0..l {
                        let h = (xd[o + t] - mean[ci]) * inv_std[ci];
                        hd[o + t] = h;
                        yd[o + t] = gd[ci] * h + bd[ci];
                    }
                }
            }
        }
        if !self.tracks(&[x, gamma, beta]) {
            return Ok(self.constant(value));
        }
        let (xid, gid, bid) = (x.id(), gamma.id(), beta.id());
        let gamma_v = gamma.value_rc();
        let xhat = Rc::new(xhat);
        let batch_stats = mode == Mode::Train;
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                let hv = xhat.data();
                let gam = gamma_v.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(xhat.shape());
                    let dxd = dx.data_mut();
                    for ci in 0..c {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        if batch_stats {
                            for b in 0..bsz {
                                let o = (b * c + ci) * l;
                                for t in 0..l {
                                    let dyg = gd[o + t] * gam[ci];
                                    m1 += dyg;
                                    m2 += dyg * hv[o + t];
                                }
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                        }
                        for b in 0..bsz {
                            let o = (b * c + ci) * l;
                            for t in 0..l {
                                let dyg = gd[o + t] * gam[ci];
                                dxd[o + t] = (dyg - m1 - hv[o + t] * m2) * inv_std[ci];
                            }
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = gid {
                    let mut dgamma = NdArray::zeros(&[c]);
                    let dg = dgamma.data_mut();
                    for b in 0..bsz {
                        for ci in 0..c {
                            let o = (b * c + ci) * l;
                            for t in 0..l {
                                dg[ci] += gd[o + t] * hv[o + t];
                            }
                        }
                    }
                    store.accumulate(id, dgamma);
                }
                if let Some(id) = bid {
                    let mut dbeta = NdArray::zeros(&[c]);
                    let db = dbeta.data_mut();
                    for b in 0..bsz {
                        for ci in 0..c {
                            let o = (b * c + ci) * l;
                            for t in 0..l {
                                db[ci] += gd[o + t];
                            }
                        }
                    }
                    store.accumulate(id, dbeta);
                }
            },
            value,
        ))
    }

    /// 1-d cross-correlation over `[batch, channels_in, length]` with
    /// weights `[channels_out, channels_in, kernel]`, bias `[channels_out]`,
    /// and symmetric zero padding.
    pub fn conv1d(
        &self,
        x: &Var,
        w: &Var,
        b: &Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d: expected x[b,c,l] and w[co,ci,k], found {xs:?} and {ws:?}"
            )));
        }
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, wci, k) = (ws[0], ws[1], ws[2]);
        if wci != cin || b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv1d: channel mismatch x{xs:?} w{ws:?} b{:?}",
                b.shape()
            )));
        }
        let lout = conv_output_len(len, k, stride, padding).ok_or_else(|| {
            Error::Shape(format!(
                "conv1d: kernel {k} (stride {stride}, padding {padding}) does not fit input length {len}"
            ))
        })?;

        // Materialize the padded input once; both passes then run without
        // bounds checks in the hot loops.
        let lp = len + 2 * padding;
        let mut xp = NdArray::zeros(&[bsz, cin, lp]);
        {
            let src = x.value().data();
            let dst = xp.data_mut();
            for bc in 0..bsz * cin {
                dst[bc * lp + padding..bc * lp + padding + len]
                    .copy_from_slice(&src[bc * len..(bc + 1) * len]);
            }
        }
        let mut value = NdArray::zeros(&[bsz, cout, lout]);
        {
            let xpd = xp.data();
            let wd = w.value().data();
            let bd = b.value().data();
            let yd = value.data_mut();
            for bi in 0..bsz {
                for co in 0..cout {
                    let yrow = &mut yd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                    yrow.fill(bd[co]);
                    for ci in 0..cin {
                        let xrow = &xpd[(bi * cin + ci) * lp..(bi * cin + ci + 1) * lp];
                        let wrow = &wd[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                        for (kk, &wv) in wrow.iter().enumerate() {
                            if stride == 1 {
                                for (y, &xv) in yrow.iter_mut().zip(&xrow[kk..kk + lout]) {
                                    *y += wv * xv;
                                }
                            } else {
                                let mut idx = kk;
                                for y in yrow.iter_mut() {
                                    *y += wv * xrow[idx];
                                    idx += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
        if !self.tracks(&[x, w, b]) {
            return Ok(self.constant(value));
        }
        let (xid, wid, bid) = (x.id(), w.id(), b.id());
        let wv_rc = w.value_rc();
        let xp = Rc::new(xp);
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                let xpd = xp.data();
                let wd = wv_rc.data();
                let mut dxp =
                    if xid.is_some() { Some(NdArray::zeros(&[bsz, cin, lp])) } else { None };
                let mut dw = if wid.is_some() { Some(NdArray::zeros(&[cout, cin, k])) } else { None };
                let mut db = if bid.is_some() { Some(NdArray::zeros(&[cout])) } else { None };
                for bi in 0..bsz {
                    for co in 0..cout {
                        let grow = &gd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                        if let Some(db) = db.as_mut() {
                            db.data_mut()[co] += grow.iter().sum::<f64>();
                        }
                        for ci in 0..cin {
                            let xrow = &xpd[(bi * cin + ci) * lp..(bi * cin + ci + 1) * lp];
                            let wrow = &wd[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                            for kk in 0..k {
                                let wv = wrow[kk];
                                let mut wacc = 0.0;
                                if let Some(dxp) = dxp.as_mut() {
                                    let dxrow = &mut dxp.data_mut()
                                        [(bi * cin + ci) * lp..(bi * cin + ci + 1) * lp];
                                    let mut idx = kk;
                                    for &gv in grow.iter() {
                                        dxrow[idx] += wv * gv;
                                        wacc += xrow[idx] * gv;
                                        idx += stride;
                                    }
                                } else {
                                    let mut idx = kk;
                                    for &gv in grow.iter() {
                                        wacc += xrow[idx] * gv;
                                        idx += stride;
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw.data_mut()[(co * cin + ci) * k + kk] += wacc;
                                }
                            }
                        }
                    }
                }
                if let (Some(id), Some(dxp)) = (xid, dxp) {
                    // Strip the padding margin back off.
                    let mut dx = NdArray::zeros(&[bsz, cin, len]);
                    let src = dxp.data();
                    let dst = dx.data_mut();
                    for bc in 0..bsz * cin {
                        dst[bc * len..(bc + 1) * len]
                            .copy_from_slice(&src[bc * lp + padding..bc * lp + padding + len]);
                    }
                    store.accumulate(id, dx);
                }
                if let (Some(id), Some(dw)) = (wid, dw) {
                    store.accumulate(id, dw);
                }
                if let (Some(id), Some(db)) = (bid, db) {
                    store.accumulate(id, db);
                }
            },
            value,
        ))
    }

    /// Depthwise causal convolution over `[batch, length, features]`.
    ///
    /// Each feature channel `d` is filtered independently along the time
    /// axis with its own `width`-tap kernel from `w[features, width]`, using
    /// left zero padding so position `t` only sees positions `<= t`.
    pub fn depthwise_causal_conv1d(&self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.len() != 3 || ws.len() != 2 {
            return Err(Error::Shape(format!(
                "depthwise_causal_conv1d: expected x[b,l,d] and w[d,width], found {xs:?} and {ws:?}"
            )));
        }
        let (bsz, len, d) = (xs[0], xs[1], xs[2]);
        let (wd, width) = (ws[0], ws[1]);
        if wd != d || b.shape() != [d] || width == 0 {
            return Err(Error::Shape(format!(
                "depthwise_causal_conv1d: feature mismatch x{xs:?} w{ws:?} b{:?}",
                b.shape()
            )));
        }
        // Transposed [width, d] copy keeps the per-tap inner loop contiguous.
        let mut wt = vec![0.0; width * d];
        for di in 0..d {
            for wi in 0..width {
                wt[wi * d + di] = w.value().data()[di * width + wi];
            }
        }
        let mut value = NdArray::zeros(&[bsz, len, d]);
        {
            let xd = x.value().data();
            let bd = b.value().data();
            let yd = value.data_mut();
            for bi in 0..bsz {
                for t in 0..len {
                    let yrow = &mut yd[(bi * len + t) * d..(bi * len + t + 1) * d];
                    yrow.copy_from_slice(bd);
                    for wi in 0..width {
                        let Some(src) = (t + wi + 1).checked_sub(width) else { continue };
                        let xrow = &xd[(bi * len + src) * d..(bi * len + src + 1) * d];
                        let wrow = &wt[wi * d..(wi + 1) * d];
                        for ((y, &xv), &wv) in yrow.iter_mut().zip(xrow).zip(wrow) {
                            *y += wv * xv;
                        }
                    }
                }
            }
        }
        if !self.tracks(&[x, w, b]) {
            return Ok(self.constant(value));
        }
        let (xid, wid, bid) = (x.id(), w.id(), b.id());
        let xv = x.value_rc();
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                let xd = xv.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(&[bsz, len, d]);
                    let dxd = dx.data_mut();
                    for bi in 0..bsz {
                        for t in 0..len {
                            let grow = &gd[(bi * len + t) * d..(bi * len + t + 1) * d];
                            for wi in 0..width {
                                let Some(src) = (t + wi + 1).checked_sub(width) else { continue };
                                let dxrow =
                                    &mut dxd[(bi * len + src) * d..(bi * len + src + 1) * d];
                                let wrow = &wt[wi * d..(wi + 1) * d];
                                for ((dv, &gv), &wv) in dxrow.iter_mut().zip(grow).zip(wrow) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = wid {
                    let mut dw = NdArray::zeros(&[d, width]);
                    let dwd = dw.data_mut();
                    for bi in 0..bsz {
                        for t in 0..len {
                            let grow = &gd[(bi * len + t) * d..(bi * len + t + 1) * d];
                            for wi in 0..width {
                                let Some(src) = (t + wi + 1).checked_sub(width) else { continue };
                                let xrow = &xd[(bi * len + src) * d..(bi * len + src + 1) * d];
                                for di in 0..d {
                                    dwd[di * width + wi] += grow[di] * xrow[di];
                                }
                            }
                        }
                    }
                    store.accumulate(id, dw);
                }
                if let Some(id) = bid {
                    let mut db = NdArray::zeros(&[d]);
                    let dbd = db.data_mut();
                    for bi in 0..bsz {
                        for t in 0..len {
                            let grow = &gd[(bi * len + t) * d..(bi * len + t + 1) * d];
                            for (dv, &gv) in dbd.iter_mut().zip(grow) {
                                *dv += gv;
                            }
                        }
                    }
                    store.accumulate(id, db);
                }
            },
            value,
        ))
    }

    /// Max pooling over `[batch, channels, length]` without padding.
    ///
    /// Ties route the gradient to the earliest maximal position.
    pub fn max_pool1d(&self, x: &Var, window: usize, stride: usize) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(rank_err("max_pool1d", "[batch, channels, length]", &xs));
        }
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        let lout = conv_output_len(len, window, stride, 0).ok_or_else(|| {
            Error::Shape(format!(
                "max_pool1d: window {window} (stride {stride}) does not fit input length {len}"
            ))
        })?;
        let mut value = NdArray::zeros(&[bsz, c, lout]);
        let mut argmax = vec![0usize; bsz * c * lout];
        {
            let xd = x.value().data();
            let yd = value.data_mut();
            for bc in 0..bsz * c {
                let xrow = &xd[bc * len..(bc + 1) * len];
                for t in 0..lout {
                    let start = t * stride;
                    let mut best = xrow[start];
                    let mut best_i = start;
                    for k in 1..window {
                        let v = xrow[start + k];
                        if v > best {
                            best = v;
                            best_i = start + k;
                        }
                    }
                    yd[bc * lout + t] = best;
                    argmax[bc * lout + t] = best_i;
                }
            }
        }
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xid = x.id();
        Ok(self.push_op(
            move |g, store| {
                let Some(id) = xid else { return };
                let gd = g.data();
                let mut dx = NdArray::zeros(&[bsz, c, len]);
                let dxd = dx.data_mut();
                for bc in 0..bsz * c {
                    for t in 0..lout {
                        dxd[bc * len + argmax[bc * lout + t]] += gd[bc * lout + t];
                    }
                }
                store.accumulate(id, dx);
            },
            value,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; evaluation
    /// mode (or `p == 0`) is the identity.
    pub fn dropout<R: Rng>(&self, x: &Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode != Mode::Train || p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask = NdArray::from_vec(
            x.shape(),
            (0..x.value().len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                .collect(),
        )?;
        let value = x.value().zip(&mask, |v, m| v * m)?;
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xid = x.id();
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = xid {
                    store.accumulate(id, g.zip(&mask, |gv, m| gv * m).expect("dropout backward"));
                }
            },
            value,
        ))
    }

    /// Mean over the trailing (time) axis: `[batch, channels, length]` to
    /// `[batch, channels]`.
    pub fn mean_last(&self, x: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(rank_err("mean_last", "[batch, channels, length > 0]", &xs));
        }
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        let mut value = NdArray::zeros(&[bsz, c]);
        {
            let xd = x.value().data();
            let yd = value.data_mut();
            for bc in 0..bsz * c {
                yd[bc] = xd[bc * len..(bc + 1) * len].iter().sum::<f64>() / len as f64;
            }
        }
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xid = x.id();
        Ok(self.push_op(
            move |g, store| {
                let Some(id) = xid else { return };
                let gd = g.data();
                let mut dx = NdArray::zeros(&[bsz, c, len]);
                let dxd = dx.data_mut();
                for bc in 0..bsz * c {
                    let gv = gd[bc] / len as f64;
                    dxd[bc * len..(bc + 1) * len].fill(gv);
                }
                store.accumulate(id, dx);
            },
            value,
        ))
    }

    /// Mean over the middle (time) axis: `[batch, length, features]` to
    /// `[batch, features]`.
    pub fn mean_over_len(&self, x: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(rank_err("mean_over_len", "[batch, length > 0, features]", &xs));
        }
        let (bsz, len, d) = (xs[0], xs[1], xs[2]);
        let mut value = NdArray::zeros(&[bsz, d]);
        {
            let xd = x.value().data();
            let yd = value.data_mut();
            for bi in 0..bsz {
                let yrow = &mut yd[bi * d..(bi + 1) * d];
                for t in 0..len {
                    let xrow = &xd[(bi * len + t) * d..(bi * len + t + 1) * d];
                    for (y, &xv) in yrow.iter_mut().zip(xrow) {
                        *y += xv;
                    }
                }
                for y in yrow.iter_mut() {
                    *y /= len as f64;
                }
            }
        }
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xid = x.id();
        Ok(self.push_op(
            move |g, store| {
                let Some(id) = xid else { return };
                let gd = g.data();
                let mut dx = NdArray::zeros(&[bsz, len, d]);
                let dxd = dx.data_mut();
                for bi in 0..bsz {
                    let grow = &gd[bi * d..(bi + 1) * d];
                    for t in 0..len {
                        let dxrow = &mut dxd[(bi * len + t) * d..(bi * len + t + 1) * d];
                        for (dv, &gv) in dxrow.iter_mut().zip(grow) {
                            *dv = gv / len as f64;
                        }
                    }
                }
                store.accumulate(id, dx);
            },
            value,
        ))
    }

    /// Concatenate `[batch, c_i, length]` tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[&Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_channels: no inputs".into()));
        }
        let first = xs[0].shape().to_vec();
        if first.len() != 3 {
            return Err(rank_err("concat_channels", "[batch, channels, length]", &first));
        }
        let (bsz, len) = (first[0], first[2]);
        let mut channels = Vec::with_capacity(xs.len());
        for v in xs {
            let s = v.shape();
            if s.len() != 3 || s[0] != bsz || s[2] != len {
                return Err(Error::Shape(format!(
                    "concat_channels: incompatible input {s:?} (expected [{bsz}, _, {len}])"
                )));
            }
            channels.push(s[1]);
        }
        let ctot: usize = channels.iter().sum();
        let mut value = NdArray::zeros(&[bsz, ctot, len]);
        {
            let yd = value.data_mut();
            for bi in 0..bsz {
                let mut co = 0;
                for (v, &ci) in xs.iter().zip(&channels) {
                    let src = v.value().data();
                    yd[(bi * ctot + co) * len..(bi * ctot + co + ci) * len]
                        .copy_from_slice(&src[bi * ci * len..(bi + 1) * ci * len]);
                    co += ci;
                }
            }
        }
        if !self.tracks(xs) {
            return Ok(self.constant(value));
        }
        let ids: Vec<Option<usize>> = xs.iter().map(|v| v.id()).collect();
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                let mut co = 0;
                for (&id, &ci) in ids.iter().zip(&channels) {
                    if let Some(id) = id {
                        let mut dx = NdArray::zeros(&[bsz, ci, len]);
                        let dxd = dx.data_mut();
                        for bi in 0..bsz {
                            dxd[bi * ci * len..(bi + 1) * ci * len].copy_from_slice(
                                &gd[(bi * ctot + co) * len..(bi * ctot + co + ci) * len],
                            );
                        }
                        store.accumulate(id, dx);
                    }
                    co += ci;
                }
            },
            value,
        ))
    }

    /// Transpose `[batch, channels, length]` into `[batch, length, channels]`.
    pub fn to_time_major(&self, x: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(rank_err("to_time_major", "[batch, channels, length]", &xs));
        }
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        let mut value = NdArray::zeros(&[bsz, len, c]);
        {
            let xd = x.value().data();
            let yd = value.data_mut();
            for bi in 0..bsz {
                for ci in 0..c {
                    for t in 0..len {
                        yd[(bi * len + t) * c + ci] = xd[(bi * c + ci) * len + t];
                    }
                }
            }
        }
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xid = x.id();
        Ok(self.push_op(
            move |g, store| {
                let Some(id) = xid else { return };
                let gd = g.data();
                let mut dx = NdArray::zeros(&[bsz, c, len]);
                let dxd = dx.data_mut();
                for bi in 0..bsz {
                    for ci in 0..c {
                        for t in 0..len {
                            dxd[(bi * c + ci) * len + t] = gd[(bi * len + t) * c + ci];
                        }
                    }
                }
                store.accumulate(id, dx);
            },
            value,
        ))
    }

    /// Reverse `[batch, length, features]` along the time axis.
    pub fn reverse_time(&self, x: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(rank_err("reverse_time", "[batch, length, features]", &xs));
        }
        let (bsz, len, d) = (xs[0], xs[1], xs[2]);
        let flip = move |src: &[f64]| {
            let mut out = NdArray::zeros(&[bsz, len, d]);
            let od = out.data_mut();
            for bi in 0..bsz {
                for t in 0..len {
                    od[(bi * len + t) * d..(bi * len + t + 1) * d].copy_from_slice(
                        &src[(bi * len + (len - 1 - t)) * d..(bi * len + (len - t)) * d],
                    );
                }
            }
            out
        };
        let value = flip(x.value().data());
        if !self.tracks(&[x]) {
            return Ok(self.constant(value));
        }
        let xid = x.id();
        Ok(self.push_op(
            move |g, store| {
                if let Some(id) = xid {
                    store.accumulate(id, flip(g.data()));
                }
            },
            value,
        ))
    }

    /// Broadcast-multiply `[batch, channels, length]` by per-channel gains
    /// `[batch, channels]`.
    pub fn mul_channel(&self, x: &Var, s: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(rank_err("mul_channel", "[batch, channels, length]", &xs));
        }
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        if s.shape() != [bsz, c] {
            return Err(Error::Shape(format!(
                "mul_channel: gains {:?} do not match [{bsz}, {c}]",
                s.shape()
            )));
        }
        let mut value = NdArray::zeros(&xs);
        {
            let xd = x.value().data();
            let sd = s.value().data();
            let yd = value.data_mut();
            for bc in 0..bsz * c {
                let sv = sd[bc];
                for (y, &xv) in
                    yd[bc * len..(bc + 1) * len].iter_mut().zip(&xd[bc * len..(bc + 1) * len])
                {
                    *y = sv * xv;
                }
            }
        }
        if !self.tracks(&[x, s]) {
            return Ok(self.constant(value));
        }
        let (xid, sid) = (x.id(), s.id());
        let (xv, sv) = (x.value_rc(), s.value_rc());
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(&[bsz, c, len]);
                    let dxd = dx.data_mut();
                    let sd = sv.data();
                    for bc in 0..bsz * c {
                        let gain = sd[bc];
                        for (dv, &gv) in dxd[bc * len..(bc + 1) * len]
                            .iter_mut()
                            .zip(&gd[bc * len..(bc + 1) * len])
                        {
                            *dv = gain * gv;
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = sid {
                    let mut ds = NdArray::zeros(&[bsz, c]);
                    let dsd = ds.data_mut();
                    let xd = xv.data();
                    for bc in 0..bsz * c {
                        dsd[bc] = gd[bc * len..(bc + 1) * len]
                            .iter()
                            .zip(&xd[bc * len..(bc + 1) * len])
                            .map(|(&gv, &xv)| gv * xv)
                            .sum();
                    }
                    store.accumulate(id, ds);
                }
            },
            value,
        ))
    }

    /// Outer product against per-feature state rows:
    /// `[b,l,d] x [d,n] -> [b,l,d,n]` with `out[b,l,d,n] = x[b,l,d] * a[d,n]`.
    pub fn outer_state(&self, x: &Var, a: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        let as_ = a.shape().to_vec();
        if xs.len() != 3 || as_.len() != 2 || as_[0] != xs[2] {
            return Err(Error::Shape(format!(
                "outer_state: expected x[b,l,d] and a[d,n], found {xs:?} and {as_:?}"
            )));
        }
        let (bsz, len, d) = (xs[0], xs[1], xs[2]);
        let n = as_[1];
        let mut value = NdArray::zeros(&[bsz, len, d, n]);
        {
            let xd = x.value().data();
            let ad = a.value().data();
            let yd = value.data_mut();
            for bl in 0..bsz * len {
                for di in 0..d {
                    let xv = xd[bl * d + di];
                    let arow = &ad[di * n..(di + 1) * n];
                    let yrow = &mut yd[(bl * d + di) * n..(bl * d + di + 1) * n];
                    for (y, &av) in yrow.iter_mut().zip(arow) {
                        *y = xv * av;
                    }
                }
            }
        }
        if !self.tracks(&[x, a]) {
            return Ok(self.constant(value));
        }
        let (xid, aid) = (x.id(), a.id());
        let (xv, av) = (x.value_rc(), a.value_rc());
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(&[bsz, len, d]);
                    let dxd = dx.data_mut();
                    let ad = av.data();
                    for bl in 0..bsz * len {
                        for di in 0..d {
                            let grow = &gd[(bl * d + di) * n..(bl * d + di + 1) * n];
                            let arow = &ad[di * n..(di + 1) * n];
                            dxd[bl * d + di] =
                                grow.iter().zip(arow).map(|(&gv, &av)| gv * av).sum();
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = aid {
                    let mut da = NdArray::zeros(&[d, n]);
                    let dad = da.data_mut();
                    let xd = xv.data();
                    for bl in 0..bsz * len {
                        for di in 0..d {
                            let xvv = xd[bl * d + di];
                            let grow = &gd[(bl * d + di) * n..(bl * d + di + 1) * n];
                            let darow = &mut dad[di * n..(di + 1) * n];
                            for (dv, &gv) in darow.iter_mut().zip(grow) {
                                *dv += xvv * gv;
                            }
                        }
                    }
                    store.accumulate(id, da);
                }
            },
            value,
        ))
    }

    /// Outer product against per-timestep state rows:
    /// `[b,l,d] x [b,l,n] -> [b,l,d,n]` with `out[b,l,d,n] = x[b,l,d] * s[b,l,n]`.
    pub fn outer_seq(&self, x: &Var, s: &Var) -> Result<Var> {
        let xs = x.shape().to_vec();
        let ss = s.shape().to_vec();
        if xs.len() != 3 || ss.len() != 3 || ss[0] != xs[0] || ss[1] != xs[1] {
            return Err(Error::Shape(format!(
                "outer_seq: expected x[b,l,d] and s[b,l,n], found {xs:?} and {ss:?}"
            )));
        }
        let (bsz, len, d) = (xs[0], xs[1], xs[2]);
        let n = ss[2];
        let mut value = NdArray::zeros(&[bsz, len, d, n]);
        {
            let xd = x.value().data();
            let sd = s.value().data();
            let yd = value.data_mut();
            for bl in 0..bsz * len {
                let srow = &sd[bl * n..(bl + 1) * n];
                for di in 0..d {
                    let xv = xd[bl * d + di];
                    let yrow = &mut yd[(bl * d + di) * n..(bl * d + di + 1) * n];
                    for (y, &sv) in yrow.iter_mut().zip(srow) {
                        *y = xv * sv;
                    }
                }
            }
        }
        if !self.tracks(&[x, s]) {
            return Ok(self.constant(value));
        }
        let (xid, sid) = (x.id(), s.id());
        let (xv, sv) = (x.value_rc(), s.value_rc());
        Ok(self.push_op(
            move |g, store| {
                let gd = g.data();
                if let Some(id) = xid {
                    let mut dx = NdArray::zeros(&[bsz, len, d]);
                    let dxd = dx.data_mut();
                    let sd = sv.data();
                    for bl in 0..bsz * len {
                        let srow = &sd[bl * n..(bl + 1) * n];
                        for di in 0..d {
                            let grow = &gd[(bl * d + di) * n..(bl * d + di + 1) * n];
                            dxd[bl * d + di] =
                                grow.iter().zip(srow).map(|(&gv, &sv)| gv * sv).sum();
                        }
                    }
                    store.accumulate(id, dx);
                }
                if let Some(id) = sid {
                    let mut ds = NdArray::zeros(&[bsz, len, n]);
                    let dsd = ds.data_mut();
                    let xd = xv.data();
                    for bl in 0..bsz * len {
                        let dsrow = &mut dsd[bl * n..(bl + 1) * n];
                        for di in 0..d {
                            let xvv = xd[bl * d + di];
                            let grow = &gd[(bl * d + di) * n..(bl * d + di + 1) * n];
                            for (dv, &gv) in dsrow.iter_mut().zip(grow) {
                                *dv += xvv * gv;
                            }
                        }
                    }
                    store.accumulate(id, ds);
                }
            },
            value,
        ))
    }
}
