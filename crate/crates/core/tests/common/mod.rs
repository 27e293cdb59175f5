//! Shared benchmark protocol for the integration and acceptance suites.

use partalign::partnet::{AttentionKind, BackboneConfig, HeadKind, PartNetConfig};
use partalign::synthdata::{generate, Dataset, GenerateConfig};
use partalign::trainer::TrainConfig;

pub const EMBED_WIDTH: usize = 64;

/// Benchmark geometry: 40x20 inputs and a 10x5 feature map, which hosts the
/// 5-stripe and 5x5-grid baselines exactly.
pub fn benchmark_backbone() -> BackboneConfig {
    BackboneConfig::default().with_input(40, 20).doubled_map()
}

/// 75 identities x 12 samples: a 2/3 split yields 50 train and 25 test
/// identities.
pub fn benchmark_dataset(seed: u64) -> Dataset {
    let bcfg = benchmark_backbone();
    let (mh, mw, _) = bcfg.feature_shape();
    generate(&GenerateConfig {
        identities: 75,
        samples_per_identity: 12,
        image_h: bcfg.input_h,
        image_w: bcfg.input_w,
        mask_h: mh,
        mask_w: mw,
        seed,
        ..GenerateConfig::default()
    })
    .expect("benchmark generation")
}

pub fn benchmark_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 1500,
        lr_period: 600,
        seed,
        deterministic: true,
        ..TrainConfig::default()
    }
}

pub fn head_config(head: HeadKind) -> PartNetConfig {
    match head {
        HeadKind::Partnet => PartNetConfig::partnet(8, EMBED_WIDTH, AttentionKind::Sigmoid),
        other => PartNetConfig::baseline(other, EMBED_WIDTH),
    }
}
