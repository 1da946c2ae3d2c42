#![allow(dead_code)]

use relaxseg::config::{CombosPerStep, RunConfig};
use relaxseg::dataset::{generate_dataset, Split};

/// Smallest configuration the pipeline accepts: 16^3 volumes, base width 4.
pub fn tiny_config(n_samples: usize, n_test: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.volume_dims = [16, 16, 16];
    cfg.dataset.n_samples = n_samples;
    cfg.dataset.n_test = n_test;
    cfg.network.base_channels = 4;
    for s in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3, &mut cfg.single, &mut cfg.supervised] {
        s.epochs = 1;
        s.warmup_epochs = 0;
        s.lr = 1e-3;
    }
    cfg.stage3.combos_per_step = CombosPerStep::Count(2);
    cfg.single.combos_per_step = CombosPerStep::Count(2);
    cfg
}

pub fn split_for(cfg: &RunConfig) -> Split {
    let samples = generate_dataset(&cfg.synth_config()).unwrap();
    Split::new(&samples, cfg.dataset.n_test).unwrap()
}
