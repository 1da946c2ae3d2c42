//! Training objectives with closed-form gradients.
//!
//! Every loss is a pure function returning its value together with the
//! gradient with respect to the prediction-side input(s). The `*_on`
//! variants evaluate the same functions on graph values and attach the
//! result to the tape as a [`Graph::scalar_loss`] node.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// SSIM stabilizers for unit dynamic range: `(0.01)^2`, `(0.03)^2`.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_recon_l1: f64,
    pub w_recon_ssim: f64,
    pub w_ntxent: f64,
    pub w_dice: f64,
    pub w_fc: f64,
    pub w_pc: f64,
    /// NT-Xent temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_recon_l1: 1.0, w_recon_ssim: 1.0, w_ntxent: 1.0, w_dice: 1.0, w_fc: 1.0, w_pc: 1.0, tau: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        let ws = [self.w_recon_l1, self.w_recon_ssim, self.w_ntxent, self.w_dice, self.w_fc, self.w_pc];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(b.shape(), a.shape()));
    }
    Ok(())
}

/// `mean |pred - target|`.
pub fn l1_mean(pred: &Tensor, target: &Tensor) -> Result<LossGrad> {
    same_shape(pred, target)?;
    let n = pred.numel() as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            value += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Normalized 1-D Gaussian taps for an image axis of length `len`: the
/// nominal 11-tap window, shrunk to the largest odd size that fits.
pub fn gaussian_window(len: usize) -> Vec<f64> {
    let mut size = SSIM_WINDOW.min(len);
    if size % 2 == 0 {
        size -= 1;
    }
    let half = (size / 2) as f64;
    let mut g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let s: f64 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    g
}

/// Valid separable correlation of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, gh: &[f64], gw: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - gh.len(), w + 1 - gw.len());
    let mut tmp = vec![0.0; oh * w];
    for i in 0..oh {
        for (a, &ga) in gh.iter().enumerate() {
            let src = &img[(i + a) * w..(i + a + 1) * w];
            for (d, s) in tmp[i * w..(i + 1) * w].iter_mut().zip(src) {
                *d += ga * s;
            }
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = gw.iter().enumerate().map(|(b, gb)| gb * tmp[i * w + j + b]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `oh x ow` map back to `h x w`.
fn filter_adjoint(map: &[f64], h: usize, w: usize, gh: &[f64], gw: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - gh.len(), w + 1 - gw.len());
    let mut tmp = vec![0.0; oh * w];
    for i in 0..oh {
        for j in 0..ow {
            let v = map[i * ow + j];
            for (b, gb) in gw.iter().enumerate() {
                tmp[i * w + j + b] += gb * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..oh {
        for (a, &ga) in gh.iter().enumerate() {
            let src = &tmp[i * w..(i + 1) * w];
            for (d, s) in out[(i + a) * w..(i + a + 1) * w].iter_mut().zip(src) {
                *d += ga * s;
            }
        }
    }
    out
}

/// Mean single-scale SSIM over every `(leading index, T)` slice of tensors
/// shaped `[..., H, W, T]`, with the gradient with respect to `pred`.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<LossGrad> {
    same_shape(pred, target)?;
    let shape = pred.shape();
    if shape.len() < 3 {
        return Err(Error::invalid(format!("ssim needs [..., H, W, T], got {shape:?}")));
    }
    let nd = shape.len();
    let (h, w, t) = (shape[nd - 3], shape[nd - 2], shape[nd - 1]);
    let lead: usize = shape[..nd - 3].iter().product();
    let gh = gaussian_window(h);
    let gw = gaussian_window(w);
    let npos = ((h + 1 - gh.len()) * (w + 1 - gw.len())) as f64;
    let n_slices = (lead * t) as f64;
    let (pv, tv) = (pred.data(), target.data());
    let mut grad = vec![0.0; pv.len()];
    let mut total = 0.0;
    let mut x = vec![0.0; h * w];
    let mut y = vec![0.0; h * w];
    for l in 0..lead {
        for k in 0..t {
            let at = |i: usize| l * h * w * t + i * t + k;
            for i in 0..h * w {
                x[i] = pv[at(i)];
                y[i] = tv[at(i)];
            }
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let mx = filter_valid(&x, h, w, &gh, &gw);
            let my = filter_valid(&y, h, w, &gh, &gw);
            let exx = filter_valid(&xx, h, w, &gh, &gw);
            let eyy = filter_valid(&yy, h, w, &gh, &gw);
            let exy = filter_valid(&xy, h, w, &gh, &gw);
            let np = mx.len();
            let mut d_mx = vec![0.0; np];
            let mut d_exx = vec![0.0; np];
            let mut d_exy = vec![0.0; np];
            let mut s_sum = 0.0;
            for p in 0..np {
                let (ux, uy) = (mx[p], my[p]);
                let sxx = exx[p] - ux * ux;
                let syy = eyy[p] - uy * uy;
                let sxy = exy[p] - ux * uy;
                let a1 = 2.0 * ux * uy + SSIM_C1;
                let a2 = 2.0 * sxy + SSIM_C2;
                let b1 = ux * ux + uy * uy + SSIM_C1;
                let b2 = sxx + syy + SSIM_C2;
                let s = a1 * a2 / (b1 * b2);
                s_sum += s;
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 / (b1 * b2);
                let ds_dux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                d_mx[p] = ds_dux + ds_dsxx * (-2.0 * ux) + ds_dsxy * (-uy);
                d_exx[p] = ds_dsxx;
                d_exy[p] = ds_dsxy;
            }
            total += s_sum / npos;
            let scale = 1.0 / (npos * n_slices);
            let gm = filter_adjoint(&d_mx, h, w, &gh, &gw);
            let gxx = filter_adjoint(&d_exx, h, w, &gh, &gw);
            let gxy = filter_adjoint(&d_exy, h, w, &gh, &gw);
            for i in 0..h * w {
                grad[at(i)] = scale * (gm[i] + 2.0 * x[i] * gxx[i] + y[i] * gxy[i]);
            }
        }
    }
    Ok(LossGrad { value: total / n_slices, grad })
}

/// `w_l1 * mean|pred - target| + w_ssim * (1 - SSIM(pred, target))`.
pub fn recon_loss(pred: &Tensor, target: &Tensor, weights: &LossWeights) -> Result<LossGrad> {
    let l1 = l1_mean(pred, target)?;
    let s = ssim(pred, target)?;
    let value = weights.w_recon_l1 * l1.value + weights.w_recon_ssim * (1.0 - s.value);
    let grad = l1.grad.iter().zip(&s.grad).map(|(a, b)| weights.w_recon_l1 * a - weights.w_recon_ssim * b).collect();
    Ok(LossGrad { value, grad })
}

/// Leading batch count and per-item region count of a `[B, N, ...]` or
/// `[N, ...]` map.
fn batch_regions(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        4 => Ok((1, shape[0])),
        5 => Ok((shape[0], shape[1])),
        _ => Err(Error::invalid(format!("expected [N,H,W,T] or [B,N,H,W,T], got {shape:?}"))),
    }
}

/// Soft Dice loss `1 - (2 sum(P G) + eps) / (sum P + sum G + eps)` averaged
/// over regions and batch items; the gradient is with respect to `pred`.
/// `target` may itself be soft.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<LossGrad> {
    same_shape(pred, target)?;
    let (b, n) = batch_regions(pred.shape())?;
    let vox = pred.numel() / (b * n);
    let (pv, tv) = (pred.data(), target.data());
    let norm = (b * n) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pv.len()];
    for r in 0..b * n {
        let p = &pv[r * vox..(r + 1) * vox];
        let g = &tv[r * vox..(r + 1) * vox];
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + g.iter().sum::<f64>() + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        value += 1.0 - num / denom;
        for (d, gv) in grad[r * vox..(r + 1) * vox].iter_mut().zip(g) {
            *d = -(2.0 * gv * denom - num) / (denom * denom) / norm;
        }
    }
    Ok(LossGrad { value: value / norm, grad })
}

/// Contrastive loss over per-level descriptor sets. Each level holds `2B`
/// rows ordered `(f_1, f^_1, f_2, f^_2, ...)`; rows `2k` and `2k + 1` are
/// positives. Cosine similarity, temperature `tau`, anchor excluded from its
/// own denominator, averaged over the `2B` anchors and all levels.
///
/// Returns the value and one gradient per level.
pub fn nt_xent(levels: &[Tensor], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    if levels.is_empty() {
        return Err(Error::invalid("nt_xent needs at least one level"));
    }
    let n_levels = levels.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(levels.len());
    for (li, f) in levels.iter().enumerate() {
        if f.ndim() != 2 || f.shape()[0] < 2 || f.shape()[0] % 2 != 0 {
            return Err(Error::invalid(format!("level {li}: expected [2B, C] descriptors, got {:?}", f.shape())));
        }
        let (n, c) = (f.shape()[0], f.shape()[1]);
        let fv = f.data();
        let mut z = vec![0.0; n * c];
        let mut norms = vec![0.0; n];
        for u in 0..n {
            let row = &fv[u * c..(u + 1) * c];
            let nrm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if !(nrm > 0.0) || !nrm.is_finite() {
                return Err(Error::invalid(format!("level {li}: descriptor {u} has zero or non-finite norm")));
            }
            norms[u] = nrm;
            for k in 0..c {
                z[u * c + k] = row[k] / nrm;
            }
        }
        let dot = |a: usize, b: usize| -> f64 { (0..c).map(|k| z[a * c + k] * z[b * c + k]).sum() };
        let scale = 1.0 / (n as f64 * n_levels);
        let mut gz = vec![0.0; n * c];
        for u in 0..n {
            let v = u ^ 1;
            let s: Vec<f64> = (0..n).map(|k| dot(u, k) / tau).collect();
            let mx = (0..n).filter(|&k| k != u).map(|k| s[k]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&k| k != u).map(|k| libm::exp(s[k] - mx)).sum();
            let lse = mx + libm::log(denom);
            total += scale * (lse - s[v]);
            for k in (0..n).filter(|&k| k != u) {
                let coef = scale * (libm::exp(s[k] - mx) / denom - if k == v { 1.0 } else { 0.0 }) / tau;
                for q in 0..c {
                    gz[u * c + q] += coef * z[k * c + q];
                    gz[k * c + q] += coef * z[u * c + q];
                }
            }
        }
        let mut gf = vec![0.0; n * c];
        for u in 0..n {
            let zg: f64 = (0..c).map(|q| z[u * c + q] * gz[u * c + q]).sum();
            for q in 0..c {
                gf[u * c + q] = (gz[u * c + q] - z[u * c + q] * zg) / norms[u];
            }
        }
        grads.push(gf);
    }
    Ok((total, grads))
}

/// Feature consistency between a reference pyramid and one compensated
/// pyramid: `(1/L) sum_i mean|F^i - F^_i|` (batch-averaged). Summing this
/// over combinations gives the full objective. The gradient is with
/// respect to the compensated features, one buffer per level.
pub fn feature_consistency_single(reference: &[Tensor], comp: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
    if reference.len() != comp.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "feature consistency needs matching level counts, got {} and {}",
            reference.len(),
            comp.len()
        )));
    }
    let levels = reference.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(comp.len());
    for (r, c) in reference.iter().zip(comp) {
        let lg = l1_mean(c, r)?;
        value += lg.value / levels;
        grads.push(lg.grad.into_iter().map(|g| g / levels).collect());
    }
    Ok((value, grads))
}

/// Sum over combinations of [`feature_consistency_single`].
pub fn feature_consistency(reference: &[Tensor], comps: &[Vec<Tensor>]) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(comps.len());
    for c in comps {
        let (v, g) = feature_consistency_single(reference, c)?;
        value += v;
        grads.push(g);
    }
    Ok((value, grads))
}

/// Sum over combinations of soft Dice between each prediction and the
/// (fixed) complete-modality prediction.
pub fn prediction_consistency(reference: &Tensor, comps: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(comps.len());
    for c in comps {
        let lg = dice_loss(c, reference)?;
        value += lg.value;
        grads.push(lg.grad);
    }
    Ok((value, grads))
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

/// Reconstruction loss of graph node `pred` against a fixed target.
pub fn recon_on(g: &mut Graph, pred: Var, target: &Tensor, weights: &LossWeights) -> Result<Var> {
    let lg = recon_loss(g.value(pred), target, weights)?;
    Ok(g.scalar_loss(lg.value, vec![(pred, lg.grad)]))
}

/// `scale * dice_loss(pred, target)` on the tape.
pub fn dice_on(g: &mut Graph, pred: Var, target: &Tensor, scale: f64) -> Result<Var> {
    let lg = dice_loss(g.value(pred), target)?;
    Ok(g.scalar_loss(scale * lg.value, vec![(pred, scaled(lg.grad, scale))]))
}

/// NT-Xent over pooled `[2B, C_i]` graph nodes, one per level.
pub fn nt_xent_on(g: &mut Graph, pooled: &[Var], tau: f64, scale: f64) -> Result<Var> {
    let levels: Vec<Tensor> = pooled.iter().map(|v| g.value(*v).clone()).collect();
    let (value, grads) = nt_xent(&levels, tau)?;
    let terms = pooled.iter().zip(grads).map(|(v, gr)| (*v, scaled(gr, scale))).collect();
    Ok(g.scalar_loss(scale * value, terms))
}

/// One combination's feature consistency term on the tape.
pub fn feature_consistency_on(g: &mut Graph, reference: &[Tensor], comp: &[Var], scale: f64) -> Result<Var> {
    let vals: Vec<Tensor> = comp.iter().map(|v| g.value(*v).clone()).collect();
    let (value, grads) = feature_consistency_single(reference, &vals)?;
    let terms = comp.iter().zip(grads).map(|(v, gr)| (*v, scaled(gr, scale))).collect();
    Ok(g.scalar_loss(scale * value, terms))
}

/// One combination's prediction consistency term on the tape; `reference`
/// is a constant (no gradient reaches the complete-modality path).
pub fn prediction_consistency_on(g: &mut Graph, reference: &Tensor, comp: Var, scale: f64) -> Result<Var> {
    dice_on(g, comp, reference, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_pairs_at_unit_temperature() {
        let f = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let (v, _) = nt_xent(&[f], 1.0).unwrap();
        let e = core::f64::consts::E;
        let want = -libm::log(e / (e + 2.0));
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn identical_descriptors_give_log3() {
        let f = Tensor::from_vec(&[4, 3], [0.3, -1.0, 2.0].repeat(4)).unwrap();
        for tau in [0.1, 0.5, 1.0, 3.0] {
            let (v, _) = nt_xent(&[f.clone(), f.clone()], tau).unwrap();
            assert!((v - libm::log(3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_descriptor_rejected() {
        let f = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(nt_xent(&[f], 0.5).is_err());
    }

    #[test]
    fn dice_fixed_points() {
        let g = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(dice_loss(&g, &g).unwrap().value < 1e-5);
        let inv = g.map(|v| 1.0 - v);
        assert!((dice_loss(&inv, &g).unwrap().value - 1.0).abs() < 1e-5);
    }

    #[test]
    fn recon_identity_and_constant_shift() {
        let t = Tensor::from_vec(&[1, 4, 4, 2], (0..32).map(|i| (i as f64 * 0.3).sin().abs()).collect()).unwrap();
        let w = LossWeights::default();
        assert!(recon_loss(&t, &t, &w).unwrap().value.abs() < 1e-12);
        let shifted = t.map(|v| v + 0.1);
        assert!((l1_mean(&shifted, &t).unwrap().value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Tensor::zeros(&[1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 2, 2, 3]);
        assert!(dice_loss(&a, &b).is_err());
        assert!(recon_loss(&a, &b, &LossWeights::default()).is_err());
        assert!(feature_consistency_single(core::slice::from_ref(&a), &[a.clone(), a.clone()]).is_err());
    }
}
