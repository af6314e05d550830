//! Central finite-difference verification of analytic gradients.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::Neighbourhoods;
use crate::rng::Rng;

use super::layers::{
    gat_backward, gat_layer, gated_attention_pool, gated_attention_pool_backward, linear, linear_backward, relu,
    relu_backward,
};
use super::loss::{bce_with_logits, cox_partial_likelihood_loss};
use super::matrix::{dot, DenseMatrix};

/// Relative step: `h = STEP · max(1, |x|)`.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale of this size.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

/// A scalar function of a flat coordinate vector with an analytic gradient.
pub trait Differentiable {
    fn coordinates(&self) -> Vec<f64>;
    fn set_coordinates(&mut self, coords: &[f64]);
    fn loss(&self) -> Result<f64>;
    fn gradient(&self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Coordinate achieving `max_rel_error`.
    pub worst: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the analytic gradient with central differences, coordinate by
/// coordinate. `module` is restored before returning.
pub fn grad_check<M: Differentiable + ?Sized>(module: &mut M, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = module.gradient()?;
    let base = module.coordinates();
    let mut coords = base.clone();
    let mut max_rel_error = 0.0;
    let mut worst = 0;
    for i in 0..base.len() {
        let h = STEP * base[i].abs().max(1.0);
        coords[i] = base[i] + h;
        module.set_coordinates(&coords);
        let plus = module.loss()?;
        coords[i] = base[i] - h;
        module.set_coordinates(&coords);
        let minus = module.loss()?;
        coords[i] = base[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst = i;
        }
    }
    module.set_coordinates(&base);
    Ok(GradCheckReport {
        coordinates: base.len(),
        max_rel_error,
        worst,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let v = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::from_vec(rows, cols, v).expect("sized by construction")
}

fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn take(src: &[f64], offset: &mut usize, dst: &mut [f64]) {
    dst.copy_from_slice(&src[*offset..*offset + dst.len()]);
    *offset += dst.len();
}

/// `Σ proj ⊙ (x·w + b)`; coordinates are `x`, `w`, `b`.
pub struct LinearProbe {
    pub x: DenseMatrix,
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub proj: DenseMatrix,
}

impl LinearProbe {
    pub fn random(rng: &mut Rng, n: usize, p: usize, q: usize) -> Self {
        Self {
            x: gaussian(rng, n, p, 1.0),
            w: gaussian(rng, p, q, 0.5),
            b: gaussian_vec(rng, q, 0.5),
            proj: gaussian(rng, n, q, 1.0),
        }
    }
}

impl Differentiable for LinearProbe {
    fn coordinates(&self) -> Vec<f64> {
        [self.x.values(), self.w.values(), &self.b[..]].concat()
    }
    fn set_coordinates(&mut self, c: &[f64]) {
        let mut o = 0;
        take(c, &mut o, self.x.values_mut());
        take(c, &mut o, self.w.values_mut());
        take(c, &mut o, &mut self.b);
    }
    fn loss(&self) -> Result<f64> {
        Ok(dot(linear(&self.x, &self.w, &self.b)?.values(), self.proj.values()))
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        let g = linear_backward(&self.x, &self.w, &self.proj)?;
        Ok([g.dx.values(), g.dw.values(), &g.db[..]].concat())
    }
}

/// `Σ proj ⊙ relu(x)` with inputs kept at least 0.05 away from the kink.
pub struct ReluProbe {
    pub x: DenseMatrix,
    pub proj: DenseMatrix,
}

impl ReluProbe {
    pub fn random(rng: &mut Rng, n: usize, p: usize) -> Self {
        let mut x = gaussian(rng, n, p, 1.0);
        for v in x.values_mut() {
            if v.abs() < 0.05 {
                *v = if *v < 0.0 { -0.05 - v.abs() } else { 0.05 + *v };
            }
        }
        Self {
            x,
            proj: gaussian(rng, n, p, 1.0),
        }
    }
}

impl Differentiable for ReluProbe {
    fn coordinates(&self) -> Vec<f64> {
        self.x.values().to_vec()
    }
    fn set_coordinates(&mut self, c: &[f64]) {
        self.x.values_mut().copy_from_slice(c);
    }
    fn loss(&self) -> Result<f64> {
        Ok(dot(relu(&self.x).values(), self.proj.values()))
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        Ok(relu_backward(&self.x, &self.proj).values().to_vec())
    }
}

/// `Σ proj ⊙ gat(h, w, a)`; coordinates are `h`, `w`, `a`.
pub struct GatProbe {
    pub nbrs: Neighbourhoods,
    pub h: DenseMatrix,
    pub w: DenseMatrix,
    pub a: Vec<f64>,
    pub proj: DenseMatrix,
}

impl GatProbe {
    /// Path graph `0 - 1 - … - (n-1)`.
    pub fn random_path(rng: &mut Rng, n: usize, p: usize, q: usize) -> Self {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        Self {
            nbrs: Neighbourhoods::from_edges(n, &edges),
            h: gaussian(rng, n, p, 1.0),
            w: gaussian(rng, p, q, 0.6),
            a: gaussian_vec(rng, 2 * q, 0.6),
            proj: gaussian(rng, n, q, 1.0),
        }
    }
}

impl Differentiable for GatProbe {
    fn coordinates(&self) -> Vec<f64> {
        [self.h.values(), self.w.values(), &self.a[..]].concat()
    }
    fn set_coordinates(&mut self, c: &[f64]) {
        let mut o = 0;
        take(c, &mut o, self.h.values_mut());
        take(c, &mut o, self.w.values_mut());
        take(c, &mut o, &mut self.a);
    }
    fn loss(&self) -> Result<f64> {
        let (out, _) = gat_layer(&self.nbrs, &self.h, &self.w, &self.a)?;
        Ok(dot(out.values(), self.proj.values()))
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        let (_, cache) = gat_layer(&self.nbrs, &self.h, &self.w, &self.a)?;
        let g = gat_backward(&self.nbrs, &self.h, &self.w, &self.a, &cache, &self.proj)?;
        Ok([g.dh.values(), g.dw.values(), &g.da[..]].concat())
    }
}

/// `proj · pooled + proj_weights · weights`; coordinates are `h`, `V`, `U`, `w`.
pub struct PoolProbe {
    pub h: DenseMatrix,
    pub v: DenseMatrix,
    pub u: DenseMatrix,
    pub w: Vec<f64>,
    pub proj: Vec<f64>,
    pub proj_weights: Vec<f64>,
}

impl PoolProbe {
    pub fn random(rng: &mut Rng, n: usize, q: usize, r: usize) -> Self {
        Self {
            h: gaussian(rng, n, q, 1.0),
            v: gaussian(rng, q, r, 0.5),
            u: gaussian(rng, q, r, 0.5),
            w: gaussian_vec(rng, r, 1.0),
            proj: gaussian_vec(rng, q, 1.0),
            proj_weights: gaussian_vec(rng, n, 1.0),
        }
    }
}

impl Differentiable for PoolProbe {
    fn coordinates(&self) -> Vec<f64> {
        [self.h.values(), self.v.values(), self.u.values(), &self.w[..]].concat()
    }
    fn set_coordinates(&mut self, c: &[f64]) {
        let mut o = 0;
        take(c, &mut o, self.h.values_mut());
        take(c, &mut o, self.v.values_mut());
        take(c, &mut o, self.u.values_mut());
        take(c, &mut o, &mut self.w);
    }
    fn loss(&self) -> Result<f64> {
        let out = gated_attention_pool(&self.h, &self.v, &self.u, &self.w)?;
        Ok(dot(&out.pooled, &self.proj) + dot(&out.weights, &self.proj_weights))
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        let out = gated_attention_pool(&self.h, &self.v, &self.u, &self.w)?;
        let g = gated_attention_pool_backward(
            &self.h,
            &self.v,
            &self.u,
            &self.w,
            &out,
            &self.proj,
            Some(&self.proj_weights),
        )?;
        Ok([g.dh.values(), g.dv.values(), g.du.values(), &g.dw[..]].concat())
    }
}

/// BCE as a function of the logits; roughly one label in five is missing.
pub struct BceProbe {
    pub logits: Vec<f64>,
    pub labels: Vec<Option<bool>>,
}

impl BceProbe {
    pub fn random(rng: &mut Rng, k: usize) -> Self {
        let mut labels: Vec<Option<bool>> = (0..k)
            .map(|_| {
                if rng.random_bool(0.2) {
                    None
                } else {
                    Some(rng.random_bool(0.5))
                }
            })
            .collect();
        if labels.iter().all(Option::is_none) {
            labels[0] = Some(true);
        }
        Self {
            logits: gaussian_vec(rng, k, 2.0),
            labels,
        }
    }
}

impl Differentiable for BceProbe {
    fn coordinates(&self) -> Vec<f64> {
        self.logits.clone()
    }
    fn set_coordinates(&mut self, c: &[f64]) {
        self.logits.copy_from_slice(c);
    }
    fn loss(&self) -> Result<f64> {
        Ok(bce_with_logits(&self.logits, &self.labels)?.value)
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        Ok(bce_with_logits(&self.logits, &self.labels)?.grad)
    }
}

/// Cox partial-likelihood loss over risks, with tied times and censoring.
pub struct CoxLossProbe {
    pub risks: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl CoxLossProbe {
    pub fn random(rng: &mut Rng, n: usize) -> Self {
        let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        events[0] = true;
        Self {
            risks: gaussian_vec(rng, n, 1.0),
            // Integer times force ties.
            times: (0..n).map(|_| f64::from(rng.random_range(1..=(n as u32 / 2).max(2)))).collect(),
            events,
        }
    }
}

impl Differentiable for CoxLossProbe {
    fn coordinates(&self) -> Vec<f64> {
        self.risks.clone()
    }
    fn set_coordinates(&mut self, c: &[f64]) {
        self.risks.copy_from_slice(c);
    }
    fn loss(&self) -> Result<f64> {
        Ok(cox_partial_likelihood_loss(&self.risks, &self.times, &self.events)?.value)
    }
    fn gradient(&self) -> Result<Vec<f64>> {
        Ok(cox_partial_likelihood_loss(&self.risks, &self.times, &self.events)?.grad)
    }
}
