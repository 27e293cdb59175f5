//! Library-level integration: training dynamics, checkpoint round trips,
//! retrieval sanity and the translation-covariance mechanism.

mod common;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use partalign::evalrank::evaluate;
use partalign::partnet::{
    embed, embed_with_masks, init_params, load_checkpoint, make_baseline_masks, save_checkpoint,
    AttentionKind, BackboneConfig, PartNetConfig, SpatialPartition,
};
use partalign::synthdata::{generate, probe_gallery, split, GenerateConfig, NuisanceConfig};
use partalign::trainer::{train, TrainConfig};
use partalign::tripletloss::squared_euclidean;

use common::benchmark_backbone;

fn desk_dataset(seed: u64, identities: usize, per_id: usize) -> partalign::synthdata::Dataset {
    generate(&GenerateConfig {
        identities,
        samples_per_identity: per_id,
        seed,
        ..GenerateConfig::default()
    })
    .unwrap()
}

/// The desk training run: mean active loss over the last 100 iterations
/// drops to no more than half of the first-100 average.
#[test]
fn desk_run_halves_the_loss() {
    let ds = desk_dataset(11, 20, 8);
    let bcfg = BackboneConfig::default();
    let pcfg = PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid);
    let cfg = TrainConfig {
        iterations: 2000,
        batch_p: 4,
        batch_k: 3,
        seed: 1,
        deterministic: true,
        ..TrainConfig::default()
    };
    let out = train(&ds, None, None, &cfg, &bcfg, &pcfg, None).unwrap();
    let avg = |rows: &[partalign::trainer::MetricRow]| {
        rows.iter().map(|r| r.mean_loss).sum::<f64>() / rows.len() as f64
    };
    let early = avg(&out.metrics[..100]);
    let late = avg(&out.metrics[out.metrics.len() - 100..]);
    assert!(
        late <= 0.5 * early,
        "loss went from {early:.4} to {late:.4}; expected at least a halving"
    );
}

#[test]
fn checkpoint_roundtrip_preserves_evaluation() {
    let ds = desk_dataset(12, 12, 6);
    let bcfg = BackboneConfig::default();
    let pcfg = PartNetConfig::partnet(4, 64, AttentionKind::Sigmoid);
    let cfg = TrainConfig {
        iterations: 60,
        batch_p: 4,
        batch_k: 3,
        seed: 2,
        deterministic: true,
        ..TrainConfig::default()
    };
    let split_spec = split(&ds, 0.5, 3).unwrap();
    let train_data = ds.filter_identities(&split_spec.train_ids);
    let out = train(&train_data, None, None, &cfg, &bcfg, &pcfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &out.params, &bcfg, &pcfg).unwrap();
    let (params, b2, p2) = load_checkpoint(&path).unwrap();

    let direct = evaluate(&out.params, &bcfg, &pcfg, &ds, &split_spec, 10).unwrap();
    let roundtrip = evaluate(&params, &b2, &p2, &ds, &split_spec, 10).unwrap();
    assert_eq!(direct.cmc, roundtrip.cmc);
    assert_eq!(direct.map, roundtrip.map);
}

/// An untrained model ranks near chance; after training, train identities
/// score at least as well as held-out ones (generalization-gap sanity).
#[test]
fn untrained_near_chance_and_train_ids_rank_higher() {
    let ds = desk_dataset(13, 30, 8);
    let bcfg = BackboneConfig::default();
    let pcfg = PartNetConfig::partnet(4, 64, AttentionKind::Sigmoid);
    let split_spec = split(&ds, 0.5, 13).unwrap();

    // Random-init embeddings: rank-1 should sit near chance. With 15
    // gallery identities, chance is about 1/15; allow 3x.
    let params = init_params(&bcfg, &pcfg, 999).unwrap();
    let report = evaluate(&params, &bcfg, &pcfg, &ds, &split_spec, 10).unwrap();
    let chance = 1.0 / split_spec.test_ids.len() as f64;
    assert!(
        report.rank1() <= 3.0 * chance + 1e-9,
        "untrained rank-1 {} vs chance {chance}",
        report.rank1()
    );

    let cfg = TrainConfig {
        iterations: 400,
        batch_p: 6,
        batch_k: 4,
        lr_period: 160,
        seed: 4,
        deterministic: true,
        ..TrainConfig::default()
    };
    let train_data = ds.filter_identities(&split_spec.train_ids);
    let out = train(&train_data, None, None, &cfg, &bcfg, &pcfg, None).unwrap();
    let test_report = evaluate(&out.params, &bcfg, &pcfg, &ds, &split_spec, 10).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (probes, gallery) = probe_gallery(&ds, &split_spec.train_ids, &mut rng);
    let train_split = partalign::synthdata::SplitSpec {
        probes,
        gallery,
        ..split_spec.clone()
    };
    let train_report = evaluate(&out.params, &bcfg, &pcfg, &ds, &train_split, 10).unwrap();
    assert!(
        train_report.rank1() >= test_report.rank1(),
        "train ids {} vs test ids {}",
        train_report.rank1(),
        test_report.rank1()
    );
    assert!(test_report.rank1() > 3.0 * chance, "training helped nothing");
}

/// The mechanism behind the spatial-partition comparison: shifting a figure
/// by one feature-map cell moves stripe-head embeddings further than
/// part-head embeddings, averaged over the generator distribution.
#[test]
fn translation_changes_stripes_more_than_parts() {
    let bcfg = benchmark_backbone();
    let (fh, fw, _) = bcfg.feature_shape();
    let cell = bcfg.input_h / fh; // pixels per feature-map row

    let make = |shift_rows: usize, seed: u64| {
        // Zero-nuisance pairs so translation is the only difference.
        let a = generate(&GenerateConfig {
            identities: 12,
            samples_per_identity: 1,
            image_h: bcfg.input_h,
            image_w: bcfg.input_w,
            mask_h: fh,
            mask_w: fw,
            nuisance: NuisanceConfig::none(),
            seed,
        })
        .unwrap();
        let mut shifted = a.clone();
        for s in &mut shifted.samples {
            let (h, w) = (bcfg.input_h, bcfg.input_w);
            let src = s.image.clone();
            let mut data = vec![0.45; h * w * 3];
            for y in 0..h - shift_rows {
                for x in 0..w {
                    for c in 0..3 {
                        data[((y + shift_rows) * w + x) * 3 + c] = src.data()[(y * w + x) * 3 + c];
                    }
                }
            }
            s.image = partalign::ndgrad::Tensor::new(vec![h, w, 3], data).unwrap();
        }
        (a, shifted)
    };

    let part_cfg = PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid);
    let stripe_cfg = PartNetConfig::baseline(
        partalign::partnet::HeadKind::Stripe { bands: 5 },
        64,
    );
    let part_params = init_params(&bcfg, &part_cfg, 55).unwrap();
    let stripe_params = init_params(&bcfg, &stripe_cfg, 55).unwrap();

    let (base, shifted) = make(cell, 77);
    let mut part_dist = 0.0;
    let mut stripe_dist = 0.0;
    for (a, b) in base.samples.iter().zip(&shifted.samples) {
        let pa = embed(&a.image, &part_params, &bcfg, &part_cfg).unwrap();
        let pb = embed(&b.image, &part_params, &bcfg, &part_cfg).unwrap();
        part_dist += squared_euclidean(&pa, &pb).unwrap();
        let sa = embed(&a.image, &stripe_params, &bcfg, &stripe_cfg).unwrap();
        let sb = embed(&b.image, &stripe_params, &bcfg, &stripe_cfg).unwrap();
        stripe_dist += squared_euclidean(&sa, &sb).unwrap();
    }
    assert!(
        stripe_dist > part_dist,
        "stripe heads should move more under a one-cell shift: stripe {stripe_dist:.4} vs part {part_dist:.4}"
    );
}

/// Ground-truth masks drive the fixed-mask head deterministically.
#[test]
fn fixed_mask_embedding_is_deterministic() {
    let ds = desk_dataset(15, 4, 2);
    let bcfg = BackboneConfig::default();
    let pcfg = PartNetConfig::fixed_mask(3, 64);
    let params = init_params(&bcfg, &pcfg, 15).unwrap();
    let s = &ds.samples[0];
    let a = embed_with_masks(&s.image, &s.masks, &params, &bcfg, &pcfg).unwrap();
    let b = embed_with_masks(&s.image, &s.masks, &params, &bcfg, &pcfg).unwrap();
    assert_eq!(a, b);
    assert!((a.norm() - 1.0).abs() < 1e-10);
}

/// Stripe masks double as the fixed-mask head's input: feeding the stripe
/// partition through the fixed-mask path reproduces the stripe head.
#[test]
fn stripe_head_equals_fixed_mask_on_stripe_partition() {
    let bcfg = BackboneConfig::default();
    let (fh, fw, _) = bcfg.feature_shape();
    let stripe_cfg = PartNetConfig::baseline(
        partalign::partnet::HeadKind::Stripe { bands: 2 },
        64,
    );
    let fixed_cfg = PartNetConfig::fixed_mask(2, 64);
    let stripe_params = init_params(&bcfg, &stripe_cfg, 16).unwrap();
    let fixed_params = init_params(&bcfg, &fixed_cfg, 16).unwrap();
    assert_eq!(
        stripe_params.get("reduce.0.weight"),
        fixed_params.get("reduce.0.weight")
    );

    let ds = desk_dataset(17, 2, 1);
    let masks = make_baseline_masks(SpatialPartition::Stripes(2), fh, fw).unwrap();
    let via_stripe = embed(&ds.samples[0].image, &stripe_params, &bcfg, &stripe_cfg).unwrap();
    let via_fixed = embed_with_masks(
        &ds.samples[0].image,
        &masks,
        &fixed_params,
        &bcfg,
        &fixed_cfg,
    )
    .unwrap();
    for (a, b) in via_stripe.as_slice().iter().zip(via_fixed.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}
