//! Overlap metrics, the modality-combination sweep, encoder activation
//! profiles and channel-permutation robustness.
//!
//! Scores are percentages. Intersection and union counts are pooled over
//! the evaluated samples before the ratio is taken, so every reported pair
//! satisfies `IoU = Dice / (2 - Dice)` exactly (on the [0, 1] scale).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{enumerate_combinations, fill_tensor, FillPolicy, ModalityCombination, LEVELS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::Network;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::train::{predict, route_features};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binarized overlap counts of one region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl Overlap {
    pub fn merge(&mut self, o: Overlap) {
        self.intersection += o.intersection;
        self.predicted += o.predicted;
        self.truth += o.truth;
    }

    /// `200 |P n G| / (|P| + |G|)`; 100 when both are empty.
    pub fn dice(&self) -> f64 {
        let d = self.predicted + self.truth;
        if d == 0 {
            100.0
        } else {
            200.0 * self.intersection as f64 / d as f64
        }
    }

    /// `100 |P n G| / |P u G|`; 100 when both are empty.
    pub fn iou(&self) -> f64 {
        let u = self.predicted + self.truth - self.intersection;
        if u == 0 {
            100.0
        } else {
            100.0 * self.intersection as f64 / u as f64
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("threshold must be in (0, 1), got {t}")));
    }
    Ok(())
}

/// Per-region overlap of `pred` (probabilities, binarized at `threshold`:
/// `p >= threshold` is foreground) with binary `truth`, both `[N, ...]`.
pub fn overlaps(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<Vec<Overlap>> {
    check_threshold(threshold)?;
    if pred.shape() != truth.shape() || pred.ndim() < 2 {
        return Err(Error::invalid(format!(
            "prediction {:?} and ground truth {:?} must share an [N, ...] shape",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.shape()[0];
    let vox = pred.numel() / n;
    let mut out = vec![Overlap::default(); n];
    for (r, o) in out.iter_mut().enumerate() {
        for (p, g) in pred.data()[r * vox..(r + 1) * vox].iter().zip(&truth.data()[r * vox..(r + 1) * vox]) {
            let (p, g) = (*p >= threshold, *g >= 0.5);
            o.intersection += (p && g) as u64;
            o.predicted += p as u64;
            o.truth += g as u64;
        }
    }
    Ok(out)
}

pub fn dice_score(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<Vec<f64>> {
    Ok(overlaps(pred, truth, threshold)?.iter().map(Overlap::dice).collect())
}

pub fn iou_score(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<Vec<f64>> {
    Ok(overlaps(pred, truth, threshold)?.iter().map(Overlap::iou).collect())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub combo: ModalityCombination,
    /// Per-region Dice (%).
    pub dice: Vec<f64>,
    /// Per-region IoU (%).
    pub iou: Vec<f64>,
}

/// One row per modality combination plus per-region aggregates over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub mean_dice: Vec<f64>,
    pub std_dice: Vec<f64>,
    pub mean_iou: Vec<f64>,
    pub std_iou: Vec<f64>,
}

impl SweepResult {
    /// Builds the aggregates from `rows`, which must cover every nonempty
    /// combination exactly once, in canonical order.
    pub fn from_rows(rows: Vec<SweepRow>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("sweep has no rows"))?;
        let (m, n) = (first.combo.m_total(), first.dice.len());
        let expected = enumerate_combinations(m)?;
        if rows.len() != expected.len() || rows.iter().zip(&expected).any(|(r, c)| r.combo != *c) {
            return Err(Error::invalid(format!("sweep rows must list all {} combinations in order", expected.len())));
        }
        if rows.iter().any(|r| r.dice.len() != n || r.iou.len() != n) {
            return Err(Error::invalid("every sweep row needs one score per region"));
        }
        let agg = |f: &dyn Fn(&SweepRow) -> &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
            (0..n).map(|r| mean_std(&rows.iter().map(|row| f(row)[r]).collect::<Vec<_>>())).unzip()
        };
        let (mean_dice, std_dice) = agg(&|r| &r.dice);
        let (mean_iou, std_iou) = agg(&|r| &r.iou);
        Ok(SweepResult { rows, mean_dice, std_dice, mean_iou, std_iou })
    }

    pub fn n_regions(&self) -> usize {
        self.mean_dice.len()
    }

    /// Mean Dice over all rows and regions.
    pub fn overall_mean_dice(&self) -> f64 {
        self.mean_dice.iter().sum::<f64>() / self.n_regions() as f64
    }

    /// Per-region standard deviation averaged over regions.
    pub fn overall_std_dice(&self) -> f64 {
        self.std_dice.iter().sum::<f64>() / self.n_regions() as f64
    }

    pub fn row(&self, combo: ModalityCombination) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.combo == combo)
    }
}

/// A labelled evaluation item: complete image `[M, H, W, T]` and binary
/// label `[N, H, W, T]`.
pub type LabelledImage = (Tensor, Tensor);

fn check_dataset(samples: &[LabelledImage]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    Ok(())
}

/// Scores every nonempty combination over `samples`.
pub fn sweep_combinations(
    net: &Network,
    samples: &[LabelledImage],
    policy: FillPolicy,
    threshold: f64,
) -> Result<SweepResult> {
    check_dataset(samples)?;
    check_threshold(threshold)?;
    let m = net.config().in_channels;
    let mut rows = Vec::new();
    for combo in enumerate_combinations(m)? {
        let mut pooled = vec![Overlap::default(); net.config().n_classes];
        for (img, lab) in samples {
            let p = predict(net, img, combo, policy)?;
            for (acc, o) in pooled.iter_mut().zip(overlaps(&p, lab, threshold)?) {
                acc.merge(o);
            }
        }
        rows.push(SweepRow {
            combo,
            dice: pooled.iter().map(Overlap::dice).collect(),
            iou: pooled.iter().map(Overlap::iou).collect(),
        });
    }
    SweepResult::from_rows(rows)
}

/// Mean absolute encoder activation per (combination, level).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub combos: Vec<ModalityCombination>,
    pub values: Vec<[f64; LEVELS]>,
}

impl ActivationProfile {
    /// `sum_i |resp(combo, i) - resp(complete, i)|` for every combination.
    pub fn gaps(&self) -> Result<Vec<f64>> {
        let ci = self
            .combos
            .iter()
            .position(|c| c.is_complete())
            .ok_or_else(|| Error::invalid("profile lacks the complete combination"))?;
        let reference = self.values[ci];
        Ok(self.values.iter().map(|v| v.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum()).collect())
    }

    /// Sum of [`Self::gaps`] over all combinations.
    pub fn total_gap(&self) -> Result<f64> {
        Ok(self.gaps()?.iter().sum())
    }
}

/// Mean of `|F^i|` over samples, channels and voxels, using the same
/// routing as inference (plain encoder for complete inputs, adapters for
/// incomplete ones).
pub fn activation_profile(
    net: &Network,
    samples: &[LabelledImage],
    combos: &[ModalityCombination],
    policy: FillPolicy,
) -> Result<ActivationProfile> {
    check_dataset(samples)?;
    let mut values = Vec::with_capacity(combos.len());
    for &combo in combos {
        let mut acc = [0.0; LEVELS];
        for (img, _) in samples {
            let filled = fill_tensor(img, combo, policy)?;
            let mut shape = vec![1];
            shape.extend_from_slice(filled.shape());
            let mut g = Graph::new();
            let x = g.input(filled.reshape(&shape)?);
            let feats = route_features(net, &mut g, x, combo)?;
            for (a, f) in acc.iter_mut().zip(&feats) {
                *a += g.value(*f).abs_mean();
            }
        }
        for a in &mut acc {
            *a /= samples.len() as f64;
        }
        values.push(acc);
    }
    Ok(ActivationProfile { combos: combos.to_vec(), values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleResult {
    /// Per-region Dice with channels in canonical order.
    pub canonical: Vec<f64>,
    /// `permutations[k][out_channel] = source modality`.
    pub permutations: Vec<Vec<usize>>,
    pub per_permutation: Vec<Vec<f64>>,
    /// Per-region mean over [`Self::per_permutation`].
    pub permuted_mean: Vec<f64>,
}

impl ShuffleResult {
    /// Largest per-region `|canonical - permuted mean|`.
    pub fn max_gap(&self) -> f64 {
        self.canonical.iter().zip(&self.permuted_mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn permute_channels(img: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let m = img.shape()[0];
    if perm.len() != m {
        return Err(Error::invalid(format!("permutation of length {} for {m} channels", perm.len())));
    }
    let vox = img.numel() / m;
    let mut out = vec![0.0; img.numel()];
    for (o, &s) in perm.iter().enumerate() {
        out[o * vox..(o + 1) * vox].copy_from_slice(&img.data()[s * vox..(s + 1) * vox]);
    }
    Tensor::from_vec(img.shape(), out)
}

fn pooled_dice(net: &Network, samples: &[LabelledImage], perm: &[usize], threshold: f64) -> Result<Vec<f64>> {
    let complete = ModalityCombination::complete(net.config().in_channels)?;
    let mut pooled = vec![Overlap::default(); net.config().n_classes];
    for (img, lab) in samples {
        let p = predict(net, &permute_channels(img, perm)?, complete, FillPolicy::ZeroFill)?;
        for (acc, o) in pooled.iter_mut().zip(overlaps(&p, lab, threshold)?) {
            acc.merge(o);
        }
    }
    Ok(pooled.iter().map(Overlap::dice).collect())
}

/// Complete-input Dice under the given channel permutations, against the
/// canonical order.
pub fn shuffle_robustness_with(
    net: &Network,
    samples: &[LabelledImage],
    permutations: &[Vec<usize>],
    threshold: f64,
) -> Result<ShuffleResult> {
    check_dataset(samples)?;
    if permutations.is_empty() {
        return Err(Error::invalid("need at least one permutation"));
    }
    let m = net.config().in_channels;
    let identity: Vec<usize> = (0..m).collect();
    let canonical = pooled_dice(net, samples, &identity, threshold)?;
    let per_permutation: Vec<Vec<f64>> =
        permutations.iter().map(|p| pooled_dice(net, samples, p, threshold)).collect::<Result<_>>()?;
    let n = canonical.len();
    let permuted_mean =
        (0..n).map(|r| per_permutation.iter().map(|d| d[r]).sum::<f64>() / per_permutation.len() as f64).collect();
    Ok(ShuffleResult { canonical, permutations: permutations.to_vec(), per_permutation, permuted_mean })
}

/// [`shuffle_robustness_with`] over `n_perm` uniformly drawn permutations.
pub fn shuffle_robustness(
    net: &Network,
    samples: &[LabelledImage],
    n_perm: usize,
    seed: u64,
    threshold: f64,
) -> Result<ShuffleResult> {
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be >= 1"));
    }
    let mut rng = SeededRng::with_stream(seed, 0x5eed);
    let m = net.config().in_channels;
    let perms: Vec<Vec<usize>> = (0..n_perm)
        .map(|_| {
            let mut p: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut p);
            p
        })
        .collect();
    shuffle_robustness_with(net, samples, &perms, threshold)
}
