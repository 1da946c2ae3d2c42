//! Input perturbations for reconstruction pretraining (modality dropout,
//! channel shuffle, patch masking) and the contrastive-stage dropout.
//!
//! Every operation returns a [`PerturbRecord`] describing exactly what it
//! did; [`PerturbRecord::replay`] reapplies it to the same input and yields a
//! bit-identical output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{incomplete_combinations, ModalityCombination};
use crate::error::{Error, Result};
use crate::rng::{RngState, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRecord {
    /// Source modalities that were zeroed.
    pub dropped: Vec<bool>,
    /// `permutation[out_channel] = source modality`.
    pub permutation: Vec<usize>,
    /// `[H, W, T]`, `true` where voxels were zeroed in every channel.
    pub spatial_mask: Vec<bool>,
    /// Generator position before the first draw.
    pub rng_state: RngState,
}

impl PerturbRecord {
    fn identity(m: usize, voxels: usize, rng_state: RngState) -> Self {
        PerturbRecord {
            dropped: vec![false; m],
            permutation: (0..m).collect(),
            spatial_mask: vec![false; voxels],
            rng_state,
        }
    }

    pub fn retained(&self) -> usize {
        self.dropped.iter().filter(|d| !**d).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.spatial_mask.iter().filter(|m| **m).count() as f64 / self.spatial_mask.len().max(1) as f64
    }

    /// Applies dropout, then the channel permutation, then the spatial mask.
    pub fn replay(&self, input: &Tensor) -> Result<Tensor> {
        let (m, vox) = split(input)?;
        if self.dropped.len() != m || self.permutation.len() != m || self.spatial_mask.len() != vox {
            return Err(Error::invalid("perturbation record does not match input shape"));
        }
        let src = input.data();
        let mut out = vec![0.0; src.len()];
        for (o, &s) in self.permutation.iter().enumerate() {
            if !self.dropped[s] {
                out[o * vox..(o + 1) * vox].copy_from_slice(&src[s * vox..(s + 1) * vox]);
            }
        }
        for ch in 0..m {
            for (v, &masked) in self.spatial_mask.iter().enumerate() {
                if masked {
                    out[ch * vox + v] = 0.0;
                }
            }
        }
        Tensor::from_vec(input.shape(), out)
    }
}

fn split(input: &Tensor) -> Result<(usize, usize)> {
    if input.ndim() != 4 {
        return Err(Error::invalid(format!("perturbations expect [M,H,W,T], got {:?}", input.shape())));
    }
    let m = input.shape()[0];
    if m == 0 {
        return Err(Error::invalid("input has no modalities"));
    }
    Ok((m, input.numel() / m))
}

/// Zeroes each modality independently with probability `p`; if every draw
/// drops, one uniformly chosen modality is kept.
pub fn modality_dropout(input: &Tensor, rng: &mut SeededRng, p: f64) -> Result<(Tensor, PerturbRecord)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
    }
    let (m, vox) = split(input)?;
    let mut rec = PerturbRecord::identity(m, vox, rng.state());
    for d in rec.dropped.iter_mut() {
        *d = rng.bernoulli(p);
    }
    if rec.dropped.iter().all(|d| *d) {
        rec.dropped[rng.below(m)] = false;
    }
    Ok((rec.replay(input)?, rec))
}

/// Permutes all `M` channel slots uniformly at random; dropped (zero)
/// channels travel with the permutation.
pub fn modality_shuffle(input: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, PerturbRecord)> {
    let (m, vox) = split(input)?;
    let mut rec = PerturbRecord::identity(m, vox, rng.state());
    rng.shuffle(&mut rec.permutation);
    Ok((rec.replay(input)?, rec))
}

/// Tiles the volume into `patch`-sized blocks and zeroes
/// `round(ratio * n_patches)` of them, chosen without replacement, across
/// all channels at once.
pub fn spatial_mask(
    input: &Tensor,
    rng: &mut SeededRng,
    ratio: f64,
    patch: [usize; 3],
) -> Result<(Tensor, PerturbRecord)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio must be in [0, 1], got {ratio}")));
    }
    let (m, vox) = split(input)?;
    let dims = [input.shape()[1], input.shape()[2], input.shape()[3]];
    if patch.iter().zip(&dims).any(|(p, d)| *p == 0 || d % p != 0) {
        return Err(Error::invalid(format!("patch {patch:?} does not tile volume {dims:?}")));
    }
    let grid = [dims[0] / patch[0], dims[1] / patch[1], dims[2] / patch[2]];
    let n_patches = grid.iter().product::<usize>();
    let k = libm::round(ratio * n_patches as f64) as usize;
    let mut rec = PerturbRecord::identity(m, vox, rng.state());
    let mut order: Vec<usize> = (0..n_patches).collect();
    // partial Fisher-Yates: the first k slots are a uniform k-subset
    for i in 0..k.min(n_patches) {
        let j = i + rng.below(n_patches - i);
        order.swap(i, j);
    }
    for &pi in &order[..k] {
        let gp = [pi / (grid[1] * grid[2]), (pi / grid[2]) % grid[1], pi % grid[2]];
        for a in 0..patch[0] {
            for b in 0..patch[1] {
                for c in 0..patch[2] {
                    let (h, w, t) = (gp[0] * patch[0] + a, gp[1] * patch[1] + b, gp[2] * patch[2] + c);
                    rec.spatial_mask[(h * dims[1] + w) * dims[2] + t] = true;
                }
            }
        }
    }
    Ok((rec.replay(input)?, rec))
}

/// Keeps a uniformly drawn combination of between one and `M - 1`
/// modalities, so the result always differs from the complete input.
pub fn contrastive_dropout(input: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, PerturbRecord)> {
    let (m, vox) = split(input)?;
    if m < 2 {
        return Err(Error::invalid("contrastive dropout needs at least two modalities"));
    }
    let combos = incomplete_combinations(m)?;
    let mut rec = PerturbRecord::identity(m, vox, rng.state());
    let combo = combos[rng.below(combos.len())];
    for (i, d) in rec.dropped.iter_mut().enumerate() {
        *d = !combo.contains(i);
    }
    Ok((rec.replay(input)?, rec))
}

/// The combination a record leaves available (before any shuffle).
pub fn retained_combination(rec: &PerturbRecord) -> Result<ModalityCombination> {
    let present: Vec<bool> = rec.dropped.iter().map(|d| !d).collect();
    ModalityCombination::from_present(&present)
}

/// Reconstruction-stage perturbation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    pub dropout_p: f64,
    pub shuffle: bool,
    pub mask_ratio: f64,
    pub patch: [usize; 3],
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { dropout_p: 0.5, shuffle: true, mask_ratio: 0.5, patch: [4, 4, 4] }
    }
}

impl PerturbConfig {
    /// No perturbation at all.
    pub fn none() -> Self {
        PerturbConfig { dropout_p: 0.0, shuffle: false, mask_ratio: 0.0, patch: [4, 4, 4] }
    }
}

/// Dropout, then shuffle, then spatial masking, as one composite record.
pub fn reconstruction_perturb(
    input: &Tensor,
    rng: &mut SeededRng,
    cfg: &PerturbConfig,
) -> Result<(Tensor, PerturbRecord)> {
    let start = rng.state();
    let (x, drop) = modality_dropout(input, rng, cfg.dropout_p)?;
    let (x, perm) = if cfg.shuffle {
        modality_shuffle(&x, rng)?
    } else {
        (x, PerturbRecord::identity(drop.dropped.len(), drop.spatial_mask.len(), start))
    };
    let (x, mask) = spatial_mask(&x, rng, cfg.mask_ratio, cfg.patch)?;
    let rec = PerturbRecord {
        dropped: drop.dropped,
        permutation: perm.permutation,
        spatial_mask: mask.spatial_mask,
        rng_state: start,
    };
    debug_assert_eq!(rec.replay(input).as_ref().ok(), Some(&x));
    Ok((x, rec))
}
