//! Domain types shared by every stage: modality volumes, samples with nested
//! region labels, modality combinations and missing-modality fill policies.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on modalities per sample; combinations are stored as `u32` masks.
pub const MAX_MODALITIES: usize = 16;

/// Number of encoder levels; the feature indexing of the consistency and
/// contrastive objectives assumes exactly five.
pub const LEVELS: usize = 5;

/// One single-channel volume `[1, H, W, T]`, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityVolume {
    pub modality_id: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl ModalityVolume {
    pub fn new(modality_id: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let v = ModalityVolume { modality_id, dims, data };
        v.validate()?;
        Ok(v)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.voxels() {
            return Err(Error::invalid(alloc::format!(
                "modality {} has {} voxels, dims {:?} need {}",
                self.modality_id,
                self.data.len(),
                self.dims,
                self.voxels()
            )));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(alloc::format!("modality {} has value {bad} outside [0, 1]", self.modality_id)));
        }
        Ok(())
    }
}

/// Rescales `data` to `[0, 1]` by its own min and max. A constant volume maps to zeros.
pub fn normalize_min_max(data: &mut [f32]) {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in data.iter_mut() {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
}

/// Aligned modalities plus an `[N, H, W, T]` binary label whose channels are
/// nested: channel `n + 1` is a voxel subset of channel `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub modalities: Vec<ModalityVolume>,
    pub n_regions: usize,
    pub label: Vec<f32>,
}

impl MultiModalSample {
    pub fn new(sample_id: String, modalities: Vec<ModalityVolume>, n_regions: usize, label: Vec<f32>) -> Result<Self> {
        let s = MultiModalSample { sample_id, modalities, n_regions, label };
        s.validate()?;
        Ok(s)
    }

    pub fn m_total(&self) -> usize {
        self.modalities.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims
    }

    pub fn voxels(&self) -> usize {
        self.modalities[0].voxels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.modalities.len() > MAX_MODALITIES {
            return Err(Error::invalid(alloc::format!(
                "sample {} has {} modalities (1..={MAX_MODALITIES})",
                self.sample_id,
                self.modalities.len()
            )));
        }
        let dims = self.dims();
        for (i, m) in self.modalities.iter().enumerate() {
            m.validate()?;
            if m.dims != dims {
                return Err(Error::invalid(alloc::format!("modality {i} dims {:?} differ from {dims:?}", m.dims)));
            }
            if m.modality_id != i {
                return Err(Error::invalid(alloc::format!("modality slot {i} holds id {}", m.modality_id)));
            }
        }
        if self.n_regions == 0 {
            return Err(Error::invalid("label needs at least one region"));
        }
        let vox = self.voxels();
        if self.label.len() != self.n_regions * vox {
            return Err(Error::invalid(alloc::format!(
                "label has {} values, expected {}",
                self.label.len(),
                self.n_regions * vox
            )));
        }
        if self.label.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("label values must be 0 or 1"));
        }
        if !labels_nested(&self.label, self.n_regions, vox) {
            return Err(Error::invalid(alloc::format!("sample {} violates label nesting", self.sample_id)));
        }
        Ok(())
    }

    /// The label as an `[N, H, W, T]` tensor.
    pub fn label_tensor(&self) -> Tensor {
        let [h, w, t] = self.dims();
        Tensor::from_vec(&[self.n_regions, h, w, t], self.label.iter().map(|&v| v as f64).collect()).unwrap()
    }

    /// All modalities stacked as `[M, H, W, T]`.
    pub fn stacked(&self) -> Tensor {
        let [h, w, t] = self.dims();
        let data = self.modalities.iter().flat_map(|m| m.data.iter().map(|&v| v as f64)).collect();
        Tensor::from_vec(&[self.m_total(), h, w, t], data).unwrap()
    }
}

/// `true` when every channel `n + 1` is voxelwise `<=` channel `n`.
pub fn labels_nested(label: &[f32], n_regions: usize, voxels: usize) -> bool {
    (1..n_regions).all(|n| {
        let outer = &label[(n - 1) * voxels..n * voxels];
        let inner = &label[n * voxels..(n + 1) * voxels];
        inner.iter().zip(outer).all(|(i, o)| i <= o)
    })
}

/// Availability mask over `m_total` modalities; bit `m` set means modality
/// `m` is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityCombination {
    mask: u32,
    m_total: u8,
}

impl ModalityCombination {
    pub fn new(mask: u32, m_total: usize) -> Result<Self> {
        if m_total == 0 || m_total > MAX_MODALITIES {
            return Err(Error::invalid(alloc::format!("m_total {m_total} outside 1..={MAX_MODALITIES}")));
        }
        if mask == 0 {
            return Err(Error::invalid("modality combination must contain at least one modality"));
        }
        if mask >> m_total != 0 {
            return Err(Error::invalid(alloc::format!("mask {mask:#b} has bits beyond {m_total} modalities")));
        }
        Ok(ModalityCombination { mask, m_total: m_total as u8 })
    }

    pub fn complete(m_total: usize) -> Result<Self> {
        Self::new(((1u64 << m_total) - 1) as u32, m_total)
    }

    pub fn from_present(present: &[bool]) -> Result<Self> {
        let mask = present.iter().enumerate().filter(|(_, p)| **p).fold(0u32, |m, (i, _)| m | (1 << i));
        Self::new(mask, present.len())
    }

    pub fn mask(self) -> u32 {
        self.mask
    }

    pub fn m_total(self) -> usize {
        self.m_total as usize
    }

    pub fn contains(self, m: usize) -> bool {
        self.mask >> m & 1 == 1
    }

    pub fn count(self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_complete(self) -> bool {
        self.count() == self.m_total()
    }

    pub fn present(self) -> impl Iterator<Item = usize> {
        (0..self.m_total()).filter(move |&m| self.contains(m))
    }

    /// Parses the bit-string form produced by `Display` (most significant
    /// modality first).
    pub fn parse(s: &str) -> Result<Self> {
        let m_total = s.len();
        let mut mask = 0u32;
        for (i, ch) in s.chars().rev().enumerate() {
            match ch {
                '1' => mask |= 1 << i,
                '0' => {}
                _ => return Err(Error::invalid(alloc::format!("bad combination string {s:?}"))),
            }
        }
        Self::new(mask, m_total)
    }
}

impl fmt::Display for ModalityCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in (0..self.m_total()).rev() {
            f.write_str(if self.contains(m) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Every nonempty combination in ascending mask order; the complete
/// combination is last.
pub fn enumerate_combinations(m_total: usize) -> Result<Vec<ModalityCombination>> {
    if !(1..=MAX_MODALITIES).contains(&m_total) {
        return Err(Error::invalid(alloc::format!("m_total must be in 1..={MAX_MODALITIES}, got {m_total}")));
    }
    let top = (1u64 << m_total) as u32;
    (1..top).map(|mask| ModalityCombination::new(mask, m_total)).collect()
}

/// The incomplete combinations only (`2^m - 2` of them).
pub fn incomplete_combinations(m_total: usize) -> Result<Vec<ModalityCombination>> {
    let mut all = enumerate_combinations(m_total)?;
    all.pop();
    Ok(all)
}

/// How absent modalities are materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum FillPolicy {
    /// Absent channels are all zero.
    #[default]
    ZeroFill,
    /// Absent channels repeat the lowest-indexed present modality.
    CopyPresent,
}

/// Materializes `sample` under `combo` as an `[M, H, W, T]` tensor in
/// canonical modality order.
pub fn apply_fill(sample: &MultiModalSample, combo: ModalityCombination, policy: FillPolicy) -> Result<Tensor> {
    if combo.m_total() != sample.m_total() {
        return Err(Error::invalid(alloc::format!(
            "combination over {} modalities applied to a sample with {}",
            combo.m_total(),
            sample.m_total()
        )));
    }
    fill_tensor(&sample.stacked(), combo, policy)
}

/// [`apply_fill`] on an already stacked `[M, ...]` or `[B, M, ...]` tensor.
pub fn fill_tensor(stacked: &Tensor, combo: ModalityCombination, policy: FillPolicy) -> Result<Tensor> {
    let shape = stacked.shape();
    let (batch, m_axis) = match shape.len() {
        4 => (1, 0),
        5 => (shape[0], 1),
        _ => return Err(Error::invalid(alloc::format!("fill expects [M,H,W,T] or [B,M,H,W,T], got {shape:?}"))),
    };
    let m = shape[m_axis];
    if combo.m_total() != m {
        return Err(Error::invalid(alloc::format!("combination over {} modalities, tensor has {m}", combo.m_total())));
    }
    let vox: usize = shape[m_axis + 1..].iter().product();
    let src = combo.present().next().expect("combination is nonempty");
    let mut out = stacked.clone();
    let data = out.data_mut();
    for b in 0..batch {
        let base = b * m * vox;
        for ch in (0..m).filter(|&c| !combo.contains(c)) {
            let dst = base + ch * vox;
            match policy {
                FillPolicy::ZeroFill => data[dst..dst + vox].fill(0.0),
                FillPolicy::CopyPresent => data.copy_within(base + src * vox..base + (src + 1) * vox, dst),
            }
        }
    }
    Ok(out)
}

/// Per-region probability volume `[N, H, W, T]` with independent
/// (sigmoid) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    probs: Tensor,
}

impl SegmentationMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 4 {
            return Err(Error::invalid(alloc::format!("segmentation map must be [N,H,W,T], got {:?}", probs.shape())));
        }
        if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("segmentation probabilities must lie in [0, 1]"));
        }
        Ok(SegmentationMap { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn n_regions(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }
}

/// The five encoder features of one forward pass, `[B, C_i, ...]` each,
/// plus optional pooled descriptors `[B][C_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub features: Vec<Tensor>,
    pub pooled: Option<Vec<Tensor>>,
}

impl FeaturePyramid {
    pub fn new(features: Vec<Tensor>) -> Result<Self> {
        if features.len() != LEVELS {
            return Err(Error::invalid(alloc::format!("pyramid needs {LEVELS} levels, got {}", features.len())));
        }
        Ok(FeaturePyramid { features, pooled: None })
    }

    /// Attaches the spatial-and-sequence mean of every level as `[B, C_i]`.
    pub fn with_pooled(mut self) -> Self {
        self.pooled = Some(self.features.iter().map(pool_level).collect());
        self
    }
}

fn pool_level(f: &Tensor) -> Tensor {
    let (b, c) = (f.shape()[0], f.shape()[1]);
    let vox: usize = f.shape()[2..].iter().product();
    let data = f.data().chunks(vox).map(|s| s.iter().sum::<f64>() / vox as f64).collect();
    Tensor::from_vec(&[b, c], data).unwrap()
}
