//! Deterministic synthetic multi-modal volumes with nested region labels.
//!
//! Each sample places `n_regions` nested ellipsoids. A shared intensity field
//! (one level per nesting depth plus a smooth texture) is rendered by every
//! modality through its own gamma curve, then corrupted with modality-specific
//! Gaussian noise and min-max normalized. Low-gamma modalities separate the
//! outer regions well and high-gamma ones the inner regions, so the
//! modalities are correlated but not interchangeable.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{normalize_min_max, ModalityVolume, MultiModalSample};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub volume_dims: [usize; 3],
    pub m_total: usize,
    pub n_regions: usize,
    /// Noise standard deviation per modality (length `m_total`).
    pub noise_sigma: Vec<f64>,
    pub seed: u64,
    pub n_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_dims: [32, 32, 16],
            m_total: 4,
            n_regions: 3,
            noise_sigma: vec![0.08, 0.1, 0.12, 0.14],
            seed: 2024,
            n_samples: 80,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 1 {
            return Err(Error::Config("n_regions must be >= 1".into()));
        }
        if self.volume_dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("every volume dim must be >= 8, got {:?}", self.volume_dims)));
        }
        if self.m_total < 1 || self.m_total > crate::data::MAX_MODALITIES {
            return Err(Error::Config(format!("m_total {} out of range", self.m_total)));
        }
        if self.noise_sigma.len() != self.m_total {
            return Err(Error::Config(format!(
                "noise_sigma has {} entries for {} modalities",
                self.noise_sigma.len(),
                self.m_total
            )));
        }
        if self.noise_sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise_sigma entries must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Gamma exponent of modality `m`, log-spaced over `[1/2, 3]`.
    pub fn gamma(&self, m: usize) -> f64 {
        if self.m_total == 1 {
            return 1.0;
        }
        let t = m as f64 / (self.m_total - 1) as f64;
        libm::pow(2.0, -1.0 + t * (1.0 + libm::log2(3.0)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]) / self.axes[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

/// Generates sample `index`; a pure function of `(config, index)`.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<MultiModalSample> {
    config.validate()?;
    if index >= config.n_samples {
        return Err(Error::invalid(format!("sample index {index} outside [0, {})", config.n_samples)));
    }
    let mut rng = SeededRng::with_stream(config.seed, index as u64);
    let dims = config.volume_dims;
    let fd = dims.map(|d| d as f64);

    let mut shapes = Vec::with_capacity(config.n_regions);
    let outer = Ellipsoid {
        center: core::array::from_fn(|a| fd[a] * rng.range(0.38, 0.62)),
        axes: core::array::from_fn(|a| (fd[a] * rng.range(0.2, 0.34)).max(1.5)),
    };
    shapes.push(outer);
    for _ in 1..config.n_regions {
        let prev = *shapes.last().unwrap();
        let axes: [f64; 3] = core::array::from_fn(|a| (prev.axes[a] * rng.range(0.5, 0.72)).max(1.0));
        let center = core::array::from_fn(|a| prev.center[a] + (prev.axes[a] - axes[a]) * rng.range(-0.6, 0.6));
        shapes.push(Ellipsoid { center, axes });
    }

    // smooth texture: a few random low-frequency plane waves
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = core::array::from_fn(|a| rng.range(-2.0, 2.0) * core::f64::consts::TAU / fd[a]);
            (k, rng.range(0.0, core::f64::consts::TAU))
        })
        .collect();

    let [h, w, t] = dims;
    let vox = h * w * t;
    let mut label = vec![0.0f32; config.n_regions * vox];
    let mut field = vec![0.0f64; vox];
    let step = 0.75 / config.n_regions as f64;
    for i in 0..h {
        for j in 0..w {
            for k in 0..t {
                let v = (i * w + j) * t + k;
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let mut depth = 0;
                for (r, e) in shapes.iter().enumerate() {
                    // nested by construction: a region only counts inside its parent
                    if depth == r && e.contains(p) {
                        depth = r + 1;
                        label[r * vox + v] = 1.0;
                    }
                }
                let tex: f64 = waves
                    .iter()
                    .map(|(kv, ph)| libm::sin(kv[0] * p[0] + kv[1] * p[1] + kv[2] * p[2] + ph))
                    .sum::<f64>()
                    / waves.len() as f64;
                field[v] = (0.15 + step * depth as f64 + 0.05 * tex).clamp(0.0, 1.0);
            }
        }
    }

    let mut modalities = Vec::with_capacity(config.m_total);
    for m in 0..config.m_total {
        let gamma = config.gamma(m);
        let sigma = config.noise_sigma[m];
        let mut data: Vec<f32> = field.iter().map(|&f| (libm::pow(f, gamma) + sigma * rng.normal()) as f32).collect();
        normalize_min_max(&mut data);
        modalities.push(ModalityVolume::new(m, dims, data)?);
    }
    MultiModalSample::new(format!("synth-{:05}", index), modalities, config.n_regions, label)
}

/// Samples `range` of the configured dataset.
pub fn generate_range(config: &SynthConfig, range: core::ops::Range<usize>) -> Result<Vec<MultiModalSample>> {
    range.map(|i| generate_sample(config, i)).collect()
}
