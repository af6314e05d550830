//! Forward and backward passes for the layers of the concept model.
//!
//! Every forward function returns whatever its backward needs; backward
//! functions take the upstream gradient and return gradients for every
//! input and parameter. Nothing here allocates parameters or owns state.

use crate::error::{Error, Result};
use crate::graph::Neighbourhoods;

use super::matrix::{dot, DenseMatrix};

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: DenseMatrix,
    pub dw: DenseMatrix,
    pub db: Vec<f64>,
}

/// `x · w + b`, with `x: n×p`, `w: p×q`, `b: q`.
pub fn linear(x: &DenseMatrix, w: &DenseMatrix, b: &[f64]) -> Result<DenseMatrix> {
    if b.len() != w.cols() {
        return Err(Error::Shape {
            op: "linear",
            detail: format!("bias of length {} for {} outputs", b.len(), w.cols()),
        });
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, bias) in out.row_mut(r).iter_mut().zip(b) {
            *o += bias;
        }
    }
    Ok(out)
}

pub fn linear_backward(x: &DenseMatrix, w: &DenseMatrix, dout: &DenseMatrix) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: dout.matmul_t(w)?,
        dw: x.t_matmul(dout)?,
        db: dout.column_sums(),
    })
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Subgradient 0 at 0.
pub fn relu_backward(x: &DenseMatrix, dout: &DenseMatrix) -> DenseMatrix {
    let mut dx = dout.clone();
    for (d, &v) in dx.values_mut().iter_mut().zip(x.values()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Intermediate values of a graph-attention layer.
#[derive(Debug, Clone)]
pub struct GatCache {
    /// `h · w`
    pub projected: DenseMatrix,
    /// Attention coefficient per neighbourhood entry, laid out like
    /// [`Neighbourhoods::entries`].
    pub alpha: Vec<f64>,
    /// Pre-activation score `aᵀ[z_i ‖ z_j]` per entry.
    pub pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GatGrads {
    pub dh: DenseMatrix,
    pub dw: DenseMatrix,
    pub da: Vec<f64>,
}

/// Single-head graph attention.
///
/// `out_i = Σ_{j ∈ N(i) ∪ {i}} α_ij z_j` with `z = h·w`,
/// `α_i· = softmax_j LeakyReLU(a_srcᵀ z_i + a_dstᵀ z_j)` and `a = [a_src ‖ a_dst]`.
pub fn gat_layer(
    nbrs: &Neighbourhoods,
    h: &DenseMatrix,
    w: &DenseMatrix,
    a: &[f64],
) -> Result<(DenseMatrix, GatCache)> {
    let n = h.rows();
    let q = w.cols();
    if nbrs.len() != n {
        return Err(Error::Shape {
            op: "gat_layer",
            detail: format!("{} feature rows for a graph of {} nodes", n, nbrs.len()),
        });
    }
    if a.len() != 2 * q {
        return Err(Error::Shape {
            op: "gat_layer",
            detail: format!("attention vector of length {} for width {q}", a.len()),
        });
    }
    let z = h.matmul(w)?;
    let (a_src, a_dst) = a.split_at(q);
    let src: Vec<f64> = (0..n).map(|i| dot(z.row(i), a_src)).collect();
    let dst: Vec<f64> = (0..n).map(|j| dot(z.row(j), a_dst)).collect();

    let mut pre = vec![0.0; nbrs.entries()];
    let mut alpha = vec![0.0; nbrs.entries()];
    let mut out = DenseMatrix::zeros(n, q);
    for i in 0..n {
        let range = nbrs.range(i);
        for (e, &j) in range.clone().zip(nbrs.neighbours(i)) {
            let s = src[i] + dst[j];
            pre[e] = s;
            alpha[e] = if s > 0.0 { s } else { LEAKY_RELU_SLOPE * s };
        }
        softmax_in_place(&mut alpha[range.clone()]);
        let out_row = out.row_mut(i);
        for (e, &j) in range.zip(nbrs.neighbours(i)) {
            let wgt = alpha[e];
            for (o, zj) in out_row.iter_mut().zip(z.row(j)) {
                *o += wgt * zj;
            }
        }
    }
    Ok((
        out,
        GatCache {
            projected: z,
            alpha,
            pre,
        },
    ))
}

pub fn gat_backward(
    nbrs: &Neighbourhoods,
    h: &DenseMatrix,
    w: &DenseMatrix,
    a: &[f64],
    cache: &GatCache,
    dout: &DenseMatrix,
) -> Result<GatGrads> {
    let n = h.rows();
    let q = w.cols();
    let z = &cache.projected;
    let (a_src, a_dst) = a.split_at(q);
    let mut dz = DenseMatrix::zeros(n, q);
    let mut d_src = vec![0.0; n];
    let mut d_dst = vec![0.0; n];
    let mut dalpha = Vec::new();

    for i in 0..n {
        let range = nbrs.range(i);
        let go = dout.row(i);
        dalpha.clear();
        for (e, &j) in range.clone().zip(nbrs.neighbours(i)) {
            let wgt = cache.alpha[e];
            for (d, g) in dz.row_mut(j).iter_mut().zip(go) {
                *d += wgt * g;
            }
            dalpha.push(dot(go, z.row(j)));
        }
        let mean: f64 = range
            .clone()
            .zip(&dalpha)
            .map(|(e, da)| cache.alpha[e] * da)
            .sum();
        for ((e, &j), da) in range.zip(nbrs.neighbours(i)).zip(&dalpha) {
            let de = cache.alpha[e] * (da - mean);
            let dpre = if cache.pre[e] > 0.0 { de } else { LEAKY_RELU_SLOPE * de };
            d_src[i] += dpre;
            d_dst[j] += dpre;
        }
    }

    let mut da = vec![0.0; 2 * q];
    for i in 0..n {
        let zi = z.row(i);
        let (da_src, da_dst) = da.split_at_mut(q);
        for c in 0..q {
            da_src[c] += d_src[i] * zi[c];
            da_dst[c] += d_dst[i] * zi[c];
        }
        let row = dz.row_mut(i);
        for c in 0..q {
            row[c] += d_src[i] * a_src[c] + d_dst[i] * a_dst[c];
        }
    }

    Ok(GatGrads {
        dh: dz.matmul_t(w)?,
        dw: h.t_matmul(&dz)?,
        da,
    })
}

/// Output of [`gated_attention_pool`].
#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub pooled: Vec<f64>,
    /// Attention weight per row of the input; non-negative, sums to 1.
    pub weights: Vec<f64>,
    tanh_v: DenseMatrix,
    sig_u: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct PoolGrads {
    pub dh: DenseMatrix,
    pub dv: DenseMatrix,
    pub du: DenseMatrix,
    pub dw: Vec<f64>,
}

/// Gated attention pooling over the rows of `h`.
///
/// `score_i = wᵀ(tanh(vᵀh_i) ⊙ σ(uᵀh_i))`, `weights = softmax(score)`,
/// `pooled = Σ_i weights_i h_i`.
pub fn gated_attention_pool(
    h: &DenseMatrix,
    v: &DenseMatrix,
    u: &DenseMatrix,
    w: &[f64],
) -> Result<PoolOutput> {
    if h.rows() == 0 {
        return Err(Error::InvalidInput("attention pooling over zero instances".into()));
    }
    if v.shape() != u.shape() || v.rows() != h.cols() || w.len() != v.cols() {
        return Err(Error::Shape {
            op: "gated_attention_pool",
            detail: format!(
                "h {}x{}, V {}x{}, U {}x{}, w {}",
                h.rows(),
                h.cols(),
                v.rows(),
                v.cols(),
                u.rows(),
                u.cols(),
                w.len()
            ),
        });
    }
    let mut tanh_v = h.matmul(v)?;
    tanh_v.values_mut().iter_mut().for_each(|x| *x = x.tanh());
    let mut sig_u = h.matmul(u)?;
    sig_u.values_mut().iter_mut().for_each(|x| *x = sigmoid(*x));

    let mut weights: Vec<f64> = (0..h.rows())
        .map(|i| {
            tanh_v
                .row(i)
                .iter()
                .zip(sig_u.row(i))
                .zip(w)
                .map(|((t, s), wk)| t * s * wk)
                .sum()
        })
        .collect();
    softmax_in_place(&mut weights);

    let mut pooled = vec![0.0; h.cols()];
    for (i, &a) in weights.iter().enumerate() {
        for (p, x) in pooled.iter_mut().zip(h.row(i)) {
            *p += a * x;
        }
    }
    Ok(PoolOutput {
        pooled,
        weights,
        tanh_v,
        sig_u,
    })
}

/// Backward of [`gated_attention_pool`]; `dweights` is an optional upstream
/// gradient on the attention weights themselves.
pub fn gated_attention_pool_backward(
    h: &DenseMatrix,
    v: &DenseMatrix,
    u: &DenseMatrix,
    w: &[f64],
    out: &PoolOutput,
    dpooled: &[f64],
    dweights: Option<&[f64]>,
) -> Result<PoolGrads> {
    let n = h.rows();
    let r = w.len();
    let mut dh = DenseMatrix::zeros(n, h.cols());
    let mut dpi: Vec<f64> = (0..n).map(|i| dot(h.row(i), dpooled)).collect();
    if let Some(extra) = dweights {
        for (d, e) in dpi.iter_mut().zip(extra) {
            *d += e;
        }
    }
    let mean: f64 = out.weights.iter().zip(&dpi).map(|(a, d)| a * d).sum();

    let mut d_pre_v = DenseMatrix::zeros(n, r);
    let mut d_pre_u = DenseMatrix::zeros(n, r);
    let mut dw = vec![0.0; r];
    for i in 0..n {
        let pi = out.weights[i];
        for (d, p) in dh.row_mut(i).iter_mut().zip(dpooled) {
            *d += pi * p;
        }
        let ds = pi * (dpi[i] - mean);
        let t = out.tanh_v.row(i);
        let s = out.sig_u.row(i);
        for k in 0..r {
            dw[k] += ds * t[k] * s[k];
            let dg = ds * w[k];
            d_pre_v.set(i, k, dg * s[k] * (1.0 - t[k] * t[k]));
            d_pre_u.set(i, k, dg * t[k] * s[k] * (1.0 - s[k]));
        }
    }
    dh.add_assign(&d_pre_v.matmul_t(v)?)?;
    dh.add_assign(&d_pre_u.matmul_t(u)?)?;
    Ok(PoolGrads {
        dh,
        dv: h.t_matmul(&d_pre_v)?,
        du: h.t_matmul(&d_pre_u)?,
        dw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Neighbourhoods;

    #[test]
    fn linear_identity_and_sum() {
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let out = linear(&x, &DenseMatrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(out, x);

        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(linear(&x, &w, &[0.0]).unwrap().values(), &[3.0]);
        assert!(linear(&x, &w, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = DenseMatrix::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).values(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &DenseMatrix::row_vector(&[1.0, 1.0, 1.0]));
        assert_eq!(g.values(), &[0.0, 0.0, 1.0]);

        let neg = DenseMatrix::row_vector(&[-3.0, -0.1]);
        assert!(relu(&neg).values().iter().all(|&v| v == 0.0));
        let g = relu_backward(&neg, &DenseMatrix::row_vector(&[5.0, -2.0]));
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gat_isolated_node_is_projection() {
        let nbrs = Neighbourhoods::from_edges(1, &[]);
        let h = DenseMatrix::row_vector(&[1.0, 2.0]);
        let w = DenseMatrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.25]]).unwrap();
        let a = [0.3, -0.2, 0.1, 0.7, 0.4, -0.9];
        let (out, cache) = gat_layer(&nbrs, &h, &w, &a).unwrap();
        assert_eq!(cache.alpha, vec![1.0]);
        assert_eq!(out, h.matmul(&w).unwrap());
    }

    #[test]
    fn gat_identical_pair_is_uniform() {
        let nbrs = Neighbourhoods::from_edges(2, &[(0, 1)]);
        let h = DenseMatrix::from_rows(&[vec![0.3, -0.4], vec![0.3, -0.4]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let (_, cache) = gat_layer(&nbrs, &h, &w, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for a in cache.alpha {
            assert!((a - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_single_and_identical_rows() {
        let v = DenseMatrix::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.3]]).unwrap();
        let u = DenseMatrix::from_rows(&[vec![-0.5, 0.1], vec![0.2, 0.9]]).unwrap();
        let w = [1.0, -2.0];
        let h = DenseMatrix::row_vector(&[3.0, -1.0]);
        let out = gated_attention_pool(&h, &v, &u, &w).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.pooled, vec![3.0, -1.0]);

        let h = DenseMatrix::from_rows(&vec![vec![0.7, 0.1]; 4]).unwrap();
        let out = gated_attention_pool(&h, &v, &u, &w).unwrap();
        for a in &out.weights {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable() {
        let mut v = [1000.0, 1000.0, -1000.0];
        softmax_in_place(&mut v);
        assert!((v[0] - 0.5).abs() < 1e-15 && v[2] == 0.0);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
