//! Differentiable primitives recorded on a [`Tape`].

use crate::error::{shape_err, Result};
use crate::kernels;
use crate::{Scalar, Tensor};

use super::{Tape, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err!("{what} expects a matrix, got {:?}", shape)),
    }
}

impl<T: Scalar> Tape<T> {
    /// `a[m×k] · b[k×n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k) = matrix_dims(av.shape(), "matmul")?;
            let (k2, n) = matrix_dims(bv.shape(), "matmul")?;
            if k != k2 {
                return Err(shape_err!("matmul {:?} x {:?}", av.shape(), bv.shape()));
            }
            (m, k, n, kernels::gemm(av.data(), bv.data(), m, k, n))
        };
        let value = Tensor::from_parts(vec![m, n], out);
        let need = (self.tracks_grad(a), self.tracks_grad(b));
        Ok(self.record("matmul", &[a, b], value, move |g, ins, _| {
            let da = need.0.then(|| kernels::gemm_nt(g, ins[1].data(), m, n, k));
            let db = need.1.then(|| kernels::gemm_tn(ins[0].data(), g, m, k, n));
            vec![da, db]
        }))
    }

    /// `a[m×k] · b[n×k]^T`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k) = matrix_dims(av.shape(), "matmul_nt")?;
            let (n, k2) = matrix_dims(bv.shape(), "matmul_nt")?;
            if k != k2 {
                return Err(shape_err!("matmul_nt {:?} x {:?}^T", av.shape(), bv.shape()));
            }
            (m, k, n, kernels::gemm_nt(av.data(), bv.data(), m, k, n))
        };
        let value = Tensor::from_parts(vec![m, n], out);
        let need = (self.tracks_grad(a), self.tracks_grad(b));
        Ok(self.record("matmul_nt", &[a, b], value, move |g, ins, _| {
            let da = need.0.then(|| kernels::gemm(g, ins[1].data(), m, n, k));
            let db = need.1.then(|| kernels::gemm_tn(g, ins[0].data(), m, n, k));
            vec![da, db]
        }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (r, c, out) = {
            let av = self.value(a);
            let (r, c) = matrix_dims(av.shape(), "transpose")?;
            (r, c, kernels::transpose(av.data(), r, c))
        };
        Ok(self.record("transpose", &[a], Tensor::from_parts(vec![c, r], out), move |g, _, _| {
            vec![Some(kernels::transpose(g, c, r))]
        }))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err!("{op} between {:?} and {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.record("add", &[a, b], value, |g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.record("sub", &[a, b], value, |g, _, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.record("mul", &[a, b], value, |g, ins, _| {
            let da = g.iter().zip(ins[1].data()).map(|(&g, &y)| g * y).collect();
            let db = g.iter().zip(ins[0].data()).map(|(&g, &x)| g * x).collect();
            vec![Some(da), Some(db)]
        }))
    }

    /// Adds `bias[n]` to every last-dimension slice of `x[..×n]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let value = {
            let (xv, bv) = (self.value(x), self.value(bias));
            let n = xv.cols();
            if bv.numel() != n {
                return Err(shape_err!("bias of {} for last dim {}", bv.numel(), n));
            }
            let mut d = xv.data().to_vec();
            for row in d.chunks_mut(n) {
                for (v, &b) in row.iter_mut().zip(bv.data()) {
                    *v += b;
                }
            }
            Tensor::from_parts(xv.shape().to_vec(), d)
        };
        Ok(self.record("add_bias", &[x, bias], value, |g, ins, _| {
            let n = ins[1].numel();
            let mut db = vec![T::zero(); n];
            for row in g.chunks(n) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![Some(g.to_vec()), Some(db)]
        }))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.record("scale", &[x], value, move |g, _, _| vec![Some(g.iter().map(|&v| v * c).collect())])
    }

    pub fn sum(&self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.record("sum", &[x], Tensor::scalar(s), |g, ins, _| vec![Some(vec![g[0]; ins[0].numel()])])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        self.record("sum_squares", &[x], Tensor::scalar(s), |g, ins, _| {
            let two = T::lit(2.0) * g[0];
            vec![Some(ins[0].data().iter().map(|&v| two * v).collect())]
        })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if xv.cols() == 0 {
                return Err(shape_err!("softmax over empty last dimension"));
            }
            Tensor::from_parts(xv.shape().to_vec(), kernels::softmax_rows(xv.data(), xv.cols()))
        };
        Ok(self.record("softmax", &[x], value, |g, _, y| {
            let n = y.cols();
            let mut dx = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(n).zip(y.data().chunks(n)).zip(dx.chunks_mut(n)) {
                let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - s);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Layer normalization over the last dimension. A zero-variance slice
    /// maps to `beta` (variance is floored by `eps`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let value = {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let n = xv.cols();
            if gv.numel() != n || bv.numel() != n {
                return Err(shape_err!(
                    "layer_norm affine of {}/{} for last dim {}",
                    gv.numel(),
                    bv.numel(),
                    n
                ));
            }
            let mut out = vec![T::zero(); xv.numel()];
            for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
                let (mu, inv) = ln_stats(src, eps);
                for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                    *d = (s - mu) * inv * gv.data()[j] + bv.data()[j];
                }
            }
            Tensor::from_parts(xv.shape().to_vec(), out)
        };
        Ok(self.record("layer_norm", &[x, gamma, beta], value, move |g, ins, _| {
            let (xv, gv) = (ins[0], ins[1]);
            let n = xv.cols();
            let nf = T::from_usize(n).unwrap();
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dg = vec![T::zero(); n];
            let mut db = vec![T::zero(); n];
            let mut xhat = vec![T::zero(); n];
            let mut dxhat = vec![T::zero(); n];
            for ((src, gr), dr) in xv.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                let (mu, inv) = ln_stats(src, eps);
                for j in 0..n {
                    xhat[j] = (src[j] - mu) * inv;
                    dxhat[j] = gr[j] * gv.data()[j];
                    dg[j] += gr[j] * xhat[j];
                    db[j] += gr[j];
                }
                let m1: T = dxhat.iter().copied().sum::<T>() / nf;
                let m2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for j in 0..n {
                    dr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.record("gelu", &[x], value, |g, ins, _| {
            let dx = g.iter().zip(ins[0].data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
            vec![Some(dx)]
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.record("relu", &[x], value, |g, ins, _| {
            let dx = g
                .iter()
                .zip(ins[0].data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(dx)]
        })
    }

    /// Gathers rows (first-axis slices of a matrix) by index.
    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols, out) = {
            let xv = self.value(x);
            let (r, c) = matrix_dims(xv.shape(), "select_rows")?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(shape_err!("row index {bad} out of {r}"));
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(xv.row(i));
            }
            (r, c, out)
        };
        let idx = idx.to_vec();
        let value = Tensor::from_parts(vec![idx.len(), cols], out);
        Ok(self.record("select_rows", &[x], value, move |g, _, _| {
            let mut dx = vec![T::zero(); rows * cols];
            for (k, &i) in idx.iter().enumerate() {
                for (d, &v) in dx[i * cols..(i + 1) * cols].iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                    *d += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (cols, sizes, out) = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = vals.first().map(|v| v.cols()).ok_or_else(|| shape_err!("concat of nothing"))?;
            let mut sizes = Vec::with_capacity(vals.len());
            let mut out = Vec::new();
            for v in &vals {
                let (_, c) = matrix_dims(v.shape(), "concat_rows")?;
                if c != cols {
                    return Err(shape_err!("concat_rows with {c} vs {cols} columns"));
                }
                sizes.push(v.numel());
                out.extend_from_slice(v.data());
            }
            (cols, sizes, out)
        };
        let rows = out.len() / cols.max(1);
        let value = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.record("concat_rows", parts, value, move |g, _, _| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let piece = g[off..off + s].to_vec();
                    off += s;
                    Some(piece)
                })
                .collect()
        }))
    }

    /// Joins matrices with equal row counts horizontally.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (rows, widths, out) = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals.first().map(|v| v.rows()).ok_or_else(|| shape_err!("concat of nothing"))?;
            let mut widths = Vec::with_capacity(vals.len());
            for v in &vals {
                let (r, c) = matrix_dims(v.shape(), "concat_cols")?;
                if r != rows {
                    return Err(shape_err!("concat_cols with {r} vs {rows} rows"));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for v in &vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            (rows, widths, out)
        };
        let total: usize = widths.iter().sum();
        let value = Tensor::from_parts(vec![rows, total], out);
        Ok(self.record("concat_cols", parts, value, move |g, _, _| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
            for i in 0..rows {
                let mut off = i * total;
                for (gr, &w) in grads.iter_mut().zip(&widths) {
                    gr.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols, out) = {
            let xv = self.value(x);
            let (r, c) = matrix_dims(xv.shape(), "slice_cols")?;
            if start + len > c {
                return Err(shape_err!("columns {start}..{} of {c}", start + len));
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&xv.row(i)[start..start + len]);
            }
            (r, c, out)
        };
        let value = Tensor::from_parts(vec![rows, len], out);
        Ok(self.record("slice_cols", &[x], value, move |g, _, _| {
            let mut dx = vec![T::zero(); rows * cols];
            for i in 0..rows {
                dx[i * cols + start..i * cols + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(dx)]
        }))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.get(x).reshape(shape)?;
        Ok(self.record("reshape", &[x], value, |g, _, _| vec![Some(g.to_vec())]))
    }
}

fn ln_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
