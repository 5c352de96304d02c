//! Forward operations and their reverse-mode rules.
//!
//! Every op validates shapes up front, computes the forward value eagerly
//! and records a backward closure via `Tensor::from_op`. Backward closures
//! read parent values through the handles passed to them, which is valid for
//! the lifetime of one tape.

use std::rc::Rc;

use crate::error::{Result, TdrgError};
use crate::numeric::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoolKind {
    GlobalMax,
    GlobalAvg,
    /// Mean of the k largest values per channel, k = max(1, floor(ratio·H·W)).
    TopKMax(f64),
}

fn as_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TdrgError::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

fn as_3d(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(TdrgError::dim(format!(
            "{what}: expected a C×H×W tensor, got shape {s:?}"
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TdrgError::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(self, "matmul lhs")?;
        let (k2, n) = as_2d(rhs, "matmul rhs")?;
        if k != k2 {
            return Err(TdrgError::dim(format!(
                "matmul: inner dimensions disagree: lhs [{m}, {k}] vs rhs [{k2}, {n}]"
            )));
        }
        let out = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |g, parents, _out, needs| {
                let a = parents[0].data();
                let b = parents[1].data();
                let da = needs[0].then(|| {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &b[kk * n..(kk + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + kk] = s;
                        }
                    }
                    da
                });
                let db = needs[1].then(|| {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = &a[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (kk, &av) in arow.iter().enumerate() {
                            if av != 0.0 {
                                let dbrow = &mut db[kk * n..(kk + 1) * n];
                                for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
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
        let (r, c) = as_2d(self, "transpose")?;
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TdrgError::dim(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.value(),
            vec![self.clone()],
            move |g, _parents, _out, _needs| vec![Some(g.to_vec())],
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "add")?;
        let out: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g, _parents, _out, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.to_vec()),
                ]
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "sub")?;
        let out: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g, _parents, _out, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "mul")?;
        let out: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g, parents, _out, needs| {
                let a = parents[0].data();
                let b = parents[1].data();
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
                ]
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| vec![Some(g.iter().map(|v| v * c).collect())],
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| vec![Some(g.to_vec())],
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, _parents, out, _needs| {
                vec![Some(
                    g.iter().zip(out.iter()).map(|(g, s)| g * s * (1.0 - s)).collect(),
                )]
            },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        Tensor::from_op(
            "leaky_relu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents, _out, _needs| {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x >= 0.0 { *g } else { g * slope })
                        .collect(),
                )]
            },
        )
    }

    /// Shift-invariant softmax along `axis`; each slice sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TdrgError::dim(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let lane = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(src[at(l)]);
                }
                let mut denom = 0.0;
                for l in 0..lane {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    denom += e;
                }
                for l in 0..lane {
                    out[at(l)] /= denom;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "softmax",
            shape,
            out,
            vec![self.clone()],
            move |g, _parents, out, _needs| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            dot += g[at(l)] * out[at(l)];
                        }
                        for l in 0..lane {
                            dx[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Spatial pooling of a C×H×W map down to a length-C vector.
    pub fn pool(&self, kind: PoolKind) -> Result<Tensor> {
        let (c, h, w) = as_3d(self, "pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(TdrgError::dim("pool: empty spatial extent"));
        }
        let k = match kind {
            PoolKind::GlobalMax => 1,
            PoolKind::GlobalAvg => hw,
            PoolKind::TopKMax(ratio) => {
                if !(ratio > 0.0 && ratio <= 1.0) {
                    return Err(TdrgError::contract(format!(
                        "pool: top-k ratio must lie in (0, 1], got {ratio}"
                    )));
                }
                ((ratio * hw as f64).floor() as usize).max(1)
            }
        };
        let src = self.data();
        let mut out = vec![0.0; c];
        match kind {
            PoolKind::GlobalAvg => {
                for ch in 0..c {
                    out[ch] = src[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
                }
            }
            PoolKind::GlobalMax | PoolKind::TopKMax(_) => {
                for ch in 0..c {
                    let idx = topk_indices(&src[ch * hw..(ch + 1) * hw], k);
                    out[ch] =
                        idx.iter().map(|&i| src[ch * hw + i]).sum::<f64>() / k as f64;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "pool",
            vec![c],
            out,
            vec![self.clone()],
            move |g, parents, _out, _needs| {
                let src = parents[0].data();
                let mut dx = vec![0.0; c * hw];
                match kind {
                    PoolKind::GlobalAvg => {
                        for ch in 0..c {
                            let gv = g[ch] / hw as f64;
                            for v in &mut dx[ch * hw..(ch + 1) * hw] {
                                *v = gv;
                            }
                        }
                    }
                    PoolKind::GlobalMax | PoolKind::TopKMax(_) => {
                        for ch in 0..c {
                            let idx = topk_indices(&src[ch * hw..(ch + 1) * hw], k);
                            let gv = g[ch] / k as f64;
                            for &i in &idx {
                                dx[ch * hw + i] += gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Column-wise maximum over the rows of a matrix: [N, C] → [C].
    pub fn max_over_rows(&self) -> Result<Tensor> {
        let (n, c) = as_2d(self, "max_over_rows")?;
        let src = self.data();
        let mut out = vec![f64::NEG_INFINITY; c];
        for i in 0..n {
            for j in 0..c {
                let v = src[i * c + j];
                if v > out[j] {
                    out[j] = v;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "max_over_rows",
            vec![c],
            out,
            vec![self.clone()],
            move |g, parents, _out, _needs| {
                let src = parents[0].data();
                let mut dx = vec![0.0; n * c];
                for j in 0..c {
                    let mut best = 0usize;
                    for i in 1..n {
                        if src[i * c + j] > src[best * c + j] {
                            best = i;
                        }
                    }
                    dx[best * c + j] = g[j];
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Column-wise mean over the rows of a matrix: [N, C] → [C].
    pub fn mean_over_rows(&self) -> Result<Tensor> {
        let (n, c) = as_2d(self, "mean_over_rows")?;
        let src = self.data();
        let mut out = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        drop(src);
        Ok(Tensor::from_op(
            "mean_over_rows",
            vec![c],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] = g[j] / n as f64;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Per-row sum of a matrix: [N, C] → [N].
    pub fn row_sums(&self) -> Result<Tensor> {
        let (n, c) = as_2d(self, "row_sums")?;
        let src = self.data();
        let out: Vec<f64> = (0..n)
            .map(|i| src[i * c..(i + 1) * c].iter().sum())
            .collect();
        drop(src);
        Ok(Tensor::from_op(
            "row_sums",
            vec![n],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] = g[i];
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            move |g, _parents, _out, _needs| vec![Some(vec![g[0]; n])],
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            "mean",
            vec![1],
            vec![s],
            vec![self.clone()],
            move |g, _parents, _out, _needs| vec![Some(vec![g[0] / n as f64; n])],
        )
    }

    /// Adds a length-C vector to every row of an [N, C] matrix.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (n, c) = as_2d(self, "add_row_vector")?;
        if v.shape() != [c] {
            return Err(TdrgError::dim(format!(
                "add_row_vector: matrix {:?} with vector {:?}",
                self.shape(),
                v.shape()
            )));
        }
        let src = self.data();
        let vv = v.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] + vv[j];
            }
        }
        drop(src);
        drop(vv);
        Ok(Tensor::from_op(
            "add_row_vector",
            vec![n, c],
            out,
            vec![self.clone(), v.clone()],
            move |g, _parents, _out, needs| {
                let dm = needs[0].then(|| g.to_vec());
                let dv = needs[1].then(|| {
                    let mut dv = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            dv[j] += g[i * c + j];
                        }
                    }
                    dv
                });
                vec![dm, dv]
            },
        ))
    }

    /// Adds v\[i\] to every element of row i of an [N, C] matrix.
    pub fn add_col_vector(&self, v: &Tensor) -> Result<Tensor> {
        let (n, c) = as_2d(self, "add_col_vector")?;
        if v.shape() != [n] {
            return Err(TdrgError::dim(format!(
                "add_col_vector: matrix {:?} with vector {:?}",
                self.shape(),
                v.shape()
            )));
        }
        let src = self.data();
        let vv = v.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = src[i * c + j] + vv[i];
            }
        }
        drop(src);
        drop(vv);
        Ok(Tensor::from_op(
            "add_col_vector",
            vec![n, c],
            out,
            vec![self.clone(), v.clone()],
            move |g, _parents, _out, needs| {
                let dm = needs[0].then(|| g.to_vec());
                let dv = needs[1].then(|| {
                    (0..n).map(|i| g[i * c..(i + 1) * c].iter().sum()).collect()
                });
                vec![dm, dv]
            },
        ))
    }

    /// Replicates a length-C vector into an [n, C] matrix.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let c = match self.shape() {
            [c] => *c,
            s => {
                return Err(TdrgError::dim(format!(
                    "broadcast_rows: expected a vector, got {s:?}"
                )))
            }
        };
        if n == 0 {
            return Err(TdrgError::dim("broadcast_rows: zero rows"));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&src);
        }
        drop(src);
        Ok(Tensor::from_op(
            "broadcast_rows",
            vec![n, c],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let mut dv = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dv[j] += g[i * c + j];
                    }
                }
                vec![Some(dv)]
            },
        ))
    }

    /// Contiguous row slice of a matrix: rows [start, start+len).
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c) = as_2d(self, "slice_rows")?;
        if start + len > n || len == 0 {
            return Err(TdrgError::dim(format!(
                "slice_rows: rows [{start}, {}) out of range for {n} rows",
                start + len
            )));
        }
        let out = self.data()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(
            "slice_rows",
            vec![len, c],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let mut dx = vec![0.0; n * c];
                dx[start * c..(start + len) * c].copy_from_slice(g);
                vec![Some(dx)]
            },
        ))
    }

    /// Concatenation along `axis`; all inputs share rank and non-axis dims.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TdrgError::dim("concat: no tensors given"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TdrgError::dim(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(TdrgError::dim(format!(
                    "concat: rank mismatch {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(TdrgError::dim(format!(
                        "concat: shapes {:?} and {:?} differ off-axis",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total;

        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let src = p.data();
                out.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            parts.to_vec(),
            move |g, _parents, _out, needs| {
                let mut grads: Vec<Option<Vec<f64>>> = extents
                    .iter()
                    .zip(needs)
                    .map(|(&e, &need)| need.then(|| vec![0.0; outer * e * inner]))
                    .collect();
                for o in 0..outer {
                    let mut offset = o * total * inner;
                    for (t, &e) in extents.iter().enumerate() {
                        let block = e * inner;
                        if let Some(dst) = grads[t].as_mut() {
                            dst[o * block..(o + 1) * block]
                                .copy_from_slice(&g[offset..offset + block]);
                        }
                        offset += block;
                    }
                }
                grads
            },
        ))
    }

    /// Bilinear upsampling of a C×H×W map with half-pixel centers and linear
    /// extrapolation at the borders, so block-averaging back down restores
    /// linear ramps exactly.
    pub fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Tensor> {
        let (c, h, w) = as_3d(self, "upsample_bilinear")?;
        if th == 0 || tw == 0 {
            return Err(TdrgError::dim(format!(
                "upsample_bilinear: non-positive target {th}×{tw}"
            )));
        }
        if th < h || tw < w {
            return Err(TdrgError::dim(format!(
                "upsample_bilinear: target {th}×{tw} smaller than source {h}×{w}"
            )));
        }
        let ty = bilinear_taps(h, th);
        let tx = bilinear_taps(w, tw);
        let src = self.data();
        let mut out = vec![0.0; c * th * tw];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * tw + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "upsample_bilinear",
            vec![c, th, tw],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let ty = bilinear_taps(h, th);
                let tx = bilinear_taps(w, tw);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &g[ch * th * tw..(ch + 1) * th * tw];
                    let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = gp[oy * tw + ox];
                            dp[y0 * w + x0] += gv * wy0 * wx0;
                            dp[y0 * w + x1] += gv * wy0 * wx1;
                            dp[y1 * w + x0] += gv * wy1 * wx0;
                            dp[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Block-average downsampling; the target must divide the source extent.
    pub fn downsample_avg(&self, th: usize, tw: usize) -> Result<Tensor> {
        let (c, h, w) = as_3d(self, "downsample_avg")?;
        if th == 0 || tw == 0 {
            return Err(TdrgError::dim(format!(
                "downsample_avg: non-positive target {th}×{tw}"
            )));
        }
        if h % th != 0 || w % tw != 0 {
            return Err(TdrgError::dim(format!(
                "downsample_avg: target {th}×{tw} does not divide source {h}×{w}"
            )));
        }
        let (bh, bw) = (h / th, w / tw);
        let norm = 1.0 / (bh * bw) as f64;
        let src = self.data();
        let mut out = vec![0.0; c * th * tw];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
            for oy in 0..th {
                for ox in 0..tw {
                    let mut s = 0.0;
                    for dy in 0..bh {
                        for dxx in 0..bw {
                            s += plane[(oy * bh + dy) * w + ox * bw + dxx];
                        }
                    }
                    dst[oy * tw + ox] = s * norm;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "downsample_avg",
            vec![c, th, tw],
            out,
            vec![self.clone()],
            move |g, _parents, _out, _needs| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &g[ch * th * tw..(ch + 1) * th * tw];
                    let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..th {
                        for ox in 0..tw {
                            let gv = gp[oy * tw + ox] * norm;
                            for dy in 0..bh {
                                for dxx in 0..bw {
                                    dp[(oy * bh + dy) * w + ox * bw + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Unfolds convolution patches: C×H×W → [C·kh·kw, Ho·Wo]. Out-of-bounds
    /// taps read as zero (implicit zero padding).
    pub fn im2col(&self, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let (c, h, w) = as_3d(self, "im2col")?;
        if stride == 0 {
            return Err(TdrgError::dim("im2col: zero stride"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TdrgError::dim(format!(
                "im2col: kernel {kh}×{kw} larger than padded input {h}×{w} (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let rows = c * kh * kw;
        let cols = ho * wo;
        // Source index per output cell, or usize::MAX for padding.
        let mut map = vec![usize::MAX; rows * cols];
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = (ci * kh + ky) * kw + kx;
                    for oy in 0..ho {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        for ox in 0..wo {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                                map[r * cols + oy * wo + ox] =
                                    ci * h * w + y as usize * w + x as usize;
                            }
                        }
                    }
                }
            }
        }
        let map = Rc::new(map);
        let src = self.data();
        let out: Vec<f64> = map
            .iter()
            .map(|&i| if i == usize::MAX { 0.0 } else { src[i] })
            .collect();
        drop(src);
        let bmap = Rc::clone(&map);
        let src_len = c * h * w;
        Ok(Tensor::from_op(
            "im2col",
            vec![rows, cols],
            out,
            vec![self.clone()],
            move |g, _parents, _out, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = vec![0.0; src_len];
                for (&i, &gv) in bmap.iter().zip(g) {
                    if i != usize::MAX {
                        dx[i] += gv;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Per-row layer normalization of an [N, C] matrix with learnable
    /// gain/bias vectors of length C.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, c) = as_2d(self, "layer_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TdrgError::dim(format!(
                "layer_norm: input {:?} with gamma {:?}, beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let src = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let (mu, inv_std) = row_stats(row, eps);
            for j in 0..c {
                out[i * c + j] = gm[j] * (row[j] - mu) * inv_std + bt[j];
            }
        }
        drop(src);
        drop(gm);
        drop(bt);
        Ok(Tensor::from_op(
            "layer_norm",
            vec![n, c],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, parents, _out, needs| {
                let src = parents[0].data();
                let gm = parents[1].data();
                let mut dx = needs[0].then(|| vec![0.0; n * c]);
                let mut dgamma = needs[1].then(|| vec![0.0; c]);
                let mut dbeta = needs[2].then(|| vec![0.0; c]);
                for i in 0..n {
                    let row = &src[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let (mu, inv_std) = row_stats(row, eps);
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mu) * inv_std).collect();
                    if let Some(dg) = dgamma.as_mut() {
                        for j in 0..c {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let gh: Vec<f64> = (0..c).map(|j| grow[j] * gm[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_gh_xhat =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] =
                                inv_std * (gh[j] - mean_gh - xhat[j] * mean_gh_xhat);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            },
        ))
    }

    /// Mean binary cross-entropy with logits over all elements, computed in
    /// the overflow-safe form max(z,0) − z·y + ln(1 + exp(−|z|)).
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        same_shape(self, targets, "bce_with_logits")?;
        {
            let y = targets.data();
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(TdrgError::contract(
                    "bce_with_logits: targets must be exactly 0 or 1",
                ));
            }
        }
        let n = self.len();
        let z = self.data();
        let y = targets.data();
        let total: f64 = z
            .iter()
            .zip(y.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        drop(z);
        drop(y);
        Ok(Tensor::from_op(
            "bce_with_logits",
            vec![1],
            vec![total / n as f64],
            vec![self.clone(), targets.clone()],
            move |g, parents, _out, needs| {
                if !needs[0] {
                    return vec![None, None];
                }
                let z = parents[0].data();
                let y = parents[1].data();
                let scale = g[0] / n as f64;
                let dz: Vec<f64> = z
                    .iter()
                    .zip(y.iter())
                    .map(|(&z, &y)| scale * (stable_sigmoid(z) - y))
                    .collect();
                vec![Some(dz), None]
            },
        ))
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / c;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Indices of the k largest values, ties broken by lower index. Deterministic
/// so forward and backward agree on the selected set.
fn topk_indices(vals: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Interpolation taps for one axis: (lower index, upper index, weights).
/// Half-pixel center mapping; the edge pair extrapolates past the borders.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 {
                (0, 0, 1.0, 0.0)
            } else {
                let s = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
                let i0 = (s.floor() as isize).clamp(0, src as isize - 2) as usize;
                let t = s - i0 as f64;
                (i0, i0 + 1, 1.0 - t, t)
            }
        })
        .collect()
}

/// 2-D convolution expressed as im2col + matmul. `weight` is the unfolded
/// kernel matrix [C_out, C_in·kh·kw]; gradients flow through both routes.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = as_3d(x, "conv2d input")?;
    let (c_out, patch) = as_2d(weight, "conv2d weight")?;
    if patch != c_in * kh * kw {
        return Err(TdrgError::dim(format!(
            "conv2d: weight [{c_out}, {patch}] does not match input channels {c_in} and kernel {kh}×{kw}"
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cols = x.im2col(kh, kw, stride, pad)?;
    let mut out = weight.matmul(&cols)?;
    if let Some(b) = bias {
        out = out.add_col_vector(b)?;
    }
    out.reshape(&[c_out, ho, wo])
}

/// Affine map y = x·W + b for row-major batches: [N, C_in] → [N, C_out].
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(weight)?;
    match bias {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}
