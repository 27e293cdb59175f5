//! Command-line wiring: dataset generation, training, evaluation, the
//! part-count sweep and the gradient-aggregation benchmark.
//!
//! Every command echoes its fully resolved configuration into
//! `<out>/config.echo`; feeding that file back through `--config`
//! reproduces the run. Exit codes: 0 success, 2 usage, 3 data, 4 numeric.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::{evaluate, export_part_maps};
use crate::partnet::{
    load_checkpoint, AttentionKind, BackboneConfig, HeadKind, PartNetConfig,
};
use crate::synthdata::{
    generate, load_dir, probe_gallery, save_dataset, split, GenerateConfig, NuisanceConfig,
    SplitSpec,
};
use crate::trainer::{train, TrainConfig};
use crate::tripletloss::bench_aggregation;

#[derive(Debug, Parser)]
#[command(
    name = "partalign",
    version,
    about = "Part-aligned person embeddings: generate data, train heads, evaluate retrieval"
)]
pub struct Cli {
    /// Cap worker parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset with ground-truth part masks.
    Generate(GenerateArgs),
    /// Train an embedding head on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: CMC curve, mAP, optional part-map export.
    Eval(EvalArgs),
    /// Train across part counts on a train/validation split and tabulate.
    SweepParts(SweepArgs),
    /// Time the aggregated gradient path against naive triplet enumeration.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 50)]
    pub ids: usize,
    #[arg(long = "per-id", default_value_t = 12)]
    pub per_id: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long = "mask-height", default_value_t = 4)]
    pub mask_height: usize,
    #[arg(long = "mask-width", default_value_t = 2)]
    pub mask_width: usize,
    #[arg(long, default_value_t = 2)]
    pub cameras: u32,
    #[arg(long, default_value_t = 0.25)]
    pub translate: f64,
    #[arg(long = "scale-min", default_value_t = 0.7)]
    pub scale_min: f64,
    #[arg(long = "scale-max", default_value_t = 1.0)]
    pub scale_max: f64,
    #[arg(long, default_value_t = 0.15)]
    pub brightness: f64,
    #[arg(long, default_value_t = 0.08)]
    pub clutter: f64,
    #[arg(long = "boundary-jitter", default_value_t = 0.06)]
    pub boundary_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Partnet,
    Stripe,
    Grid,
    Fc,
    Pool,
    FixedMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Embedding head.
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    /// Part count K for the part-net head.
    #[arg(long)]
    pub parts: Option<usize>,
    /// Stripe count for the stripe baseline.
    #[arg(long)]
    pub stripes: Option<usize>,
    /// Grid side G for the GxG baseline.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
    /// Total embedding width shared by all heads.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long = "input-h")]
    pub input_h: Option<usize>,
    #[arg(long = "input-w")]
    pub input_w: Option<usize>,
    /// Keep the last backbone stage at stride 1 (doubles the feature map).
    #[arg(long = "double-map")]
    pub double_map: bool,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "lr-div")]
    pub lr_div: Option<f64>,
    #[arg(long = "lr-period")]
    pub lr_period: Option<u64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long = "batch-p")]
    pub batch_p: Option<usize>,
    #[arg(long = "batch-k")]
    pub batch_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "eval-period")]
    pub eval_period: Option<u64>,
    #[arg(long = "checkpoint-period")]
    pub checkpoint_period: Option<u64>,
    #[arg(long = "flip-prob")]
    pub flip_prob: Option<f64>,
    #[arg(long = "detector-lr-mult")]
    pub detector_lr_mult: Option<f64>,
    /// Ordered reductions; two runs with the same seed match bitwise.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration (flags still override it).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "train-frac")]
    pub train_frac: Option<f64>,
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "train-frac", default_value_t = DEFAULT_TRAIN_FRAC)]
    pub train_frac: f64,
    #[arg(long = "split-seed", default_value_t = DEFAULT_SPLIT_SEED)]
    pub split_seed: u64,
    /// Also export per-part attention maps for a few probe images.
    #[arg(long = "export-maps")]
    pub export_maps: bool,
    #[arg(long = "max-rank", default_value_t = 20)]
    pub max_rank: usize,
    /// Evaluate the train identities instead of the held-out test ones
    /// (sanity mode; expect inflated scores).
    #[arg(long = "on", value_enum, default_value_t = EvalTarget::Test)]
    pub on: EvalTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTarget {
    Test,
    Train,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Part counts to sweep.
    #[arg(long = "k-list", value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 12])]
    pub k_list: Vec<usize>,
    /// Seeds averaged per part count.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long = "train-frac")]
    pub train_frac: Option<f64>,
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "batch-sizes", value_delimiter = ',', default_values_t = vec![8, 16, 32])]
    pub batch_sizes: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
}

pub const DEFAULT_TRAIN_FRAC: f64 = 2.0 / 3.0;
pub const DEFAULT_SPLIT_SEED: u64 = 7;

/// Fully resolved run description; serialized into `config.echo`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub partnet: PartNetConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train_frac: f64,
    pub split_seed: u64,
    pub max_rank: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            partnet: PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid),
            train: TrainConfig::default(),
            data: None,
            out: None,
            train_frac: DEFAULT_TRAIN_FRAC,
            split_seed: DEFAULT_SPLIT_SEED,
            max_rank: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn apply_model_flags(&mut self, flags: &ModelFlags) -> Result<()> {
        let width = flags.width.unwrap_or_else(|| self.partnet.embedding_width());
        if let Some(head) = flags.head {
            self.partnet = match head {
                HeadArg::Partnet => PartNetConfig::partnet(
                    flags.parts.unwrap_or(8),
                    width,
                    AttentionKind::Sigmoid,
                ),
                HeadArg::Stripe => PartNetConfig::baseline(
                    HeadKind::Stripe {
                        bands: flags.stripes.unwrap_or(5),
                    },
                    width,
                ),
                HeadArg::Grid => PartNetConfig::baseline(
                    HeadKind::Grid {
                        side: flags.grid.unwrap_or(5),
                    },
                    width,
                ),
                HeadArg::Fc => PartNetConfig::baseline(HeadKind::Fc, width),
                HeadArg::Pool => PartNetConfig::baseline(HeadKind::GlobalPool, width),
                HeadArg::FixedMask => PartNetConfig::fixed_mask(3, width),
            };
        } else if let Some(parts) = flags.parts {
            if self.partnet.head == HeadKind::Partnet {
                self.partnet = PartNetConfig::partnet(parts, width, self.partnet.attention);
            }
        }
        if let Some(att) = flags.attention {
            self.partnet.attention = match att {
                AttentionArg::Sigmoid => AttentionKind::Sigmoid,
                AttentionArg::Softmax => AttentionKind::Softmax,
            };
        }
        if let Some(h) = flags.input_h {
            self.backbone.input_h = h;
        }
        if let Some(w) = flags.input_w {
            self.backbone.input_w = w;
        }
        if flags.double_map {
            self.backbone = self.backbone.clone().doubled_map();
        }
        self.backbone.validate()?;
        self.partnet.validate()
    }

    fn apply_train_flags(&mut self, flags: &TrainFlags) {
        let t = &mut self.train;
        if let Some(v) = flags.iters {
            t.iterations = v;
        }
        if let Some(v) = flags.lr {
            t.base_lr = v;
        }
        if let Some(v) = flags.lr_div {
            t.lr_divisor = v;
        }
        if let Some(v) = flags.lr_period {
            t.lr_period = v;
        }
        if let Some(v) = flags.momentum {
            t.momentum = v;
        }
        if let Some(v) = flags.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = flags.margin {
            t.margin = v;
        }
        if let Some(v) = flags.batch_p {
            t.batch_p = v;
        }
        if let Some(v) = flags.batch_k {
            t.batch_k = v;
        }
        if let Some(v) = flags.seed {
            t.seed = v;
        }
        if let Some(v) = flags.eval_period {
            t.eval_period = v;
        }
        if let Some(v) = flags.checkpoint_period {
            t.checkpoint_period = v;
        }
        if let Some(v) = flags.flip_prob {
            t.flip_prob = v;
        }
        if let Some(v) = flags.detector_lr_mult {
            t.detector_lr_mult = v;
        }
        if flags.deterministic {
            t.deterministic = true;
        }
    }
}

fn write_echo<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("config.echo"),
        serde_json::to_string_pretty(value)?,
    )?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args),
        Command::SweepParts(args) => cmd_sweep_parts(&args),
        Command::Bench(args) => cmd_bench(&args),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.ids == 0 || args.per_id == 0 {
        return Err(Error::InvalidConfig(
            "--ids and --per-id must be >= 1".into(),
        ));
    }
    if args.out.exists() {
        let non_empty = std::fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::Data(format!(
                "output directory {} is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
    }
    let cfg = GenerateConfig {
        identities: args.ids,
        samples_per_identity: args.per_id,
        image_h: args.height,
        image_w: args.width,
        mask_h: args.mask_height,
        mask_w: args.mask_width,
        nuisance: NuisanceConfig {
            translate_frac: args.translate,
            scale_min: args.scale_min,
            scale_max: args.scale_max,
            brightness: args.brightness,
            clutter: args.clutter,
            boundary_jitter: args.boundary_jitter,
            cameras: args.cameras,
        },
        seed: args.seed,
    };
    let dataset = generate(&cfg)?;
    save_dataset(&dataset, &args.out)?;
    write_echo(&args.out, &cfg)?;
    println!(
        "generated {} samples ({} identities) into {}",
        dataset.len(),
        args.ids,
        args.out.display()
    );
    Ok(())
}

fn resolve_run_config(
    config: Option<&PathBuf>,
    data: Option<&PathBuf>,
    out: Option<&PathBuf>,
    train_frac: Option<f64>,
    split_seed: Option<u64>,
    model: &ModelFlags,
    train_flags: &TrainFlags,
) -> Result<RunConfig> {
    let mut rc = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = data {
        rc.data = Some(d.clone());
    }
    if let Some(o) = out {
        rc.out = Some(o.clone());
    }
    if let Some(f) = train_frac {
        rc.train_frac = f;
    }
    if let Some(s) = split_seed {
        rc.split_seed = s;
    }
    rc.apply_model_flags(model)?;
    rc.apply_train_flags(train_flags);
    rc.train.validate()?;
    Ok(rc)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunConfig> {
    let rc = resolve_run_config(
        args.config.as_ref(),
        args.data.as_ref(),
        args.out.as_ref(),
        args.train_frac,
        args.split_seed,
        &args.model,
        &args.train,
    )?;
    let data_dir = rc
        .data
        .clone()
        .ok_or_else(|| Error::InvalidConfig("train needs --data".into()))?;
    let out_dir = rc
        .out
        .clone()
        .ok_or_else(|| Error::InvalidConfig("train needs --out".into()))?;

    let dataset = load_dir(&data_dir, rc.backbone.input_h, rc.backbone.input_w)?;
    let split_spec = split(&dataset, rc.train_frac, rc.split_seed)?;
    let train_data = dataset.filter_identities(&split_spec.train_ids);

    write_echo(&out_dir, &rc)?;
    let output = train(
        &train_data,
        Some(&dataset),
        Some(&split_spec),
        &rc.train,
        &rc.backbone,
        &rc.partnet,
        Some(&out_dir),
    )?;

    if !output.evals.is_empty() {
        let mut csv = String::from("iteration,rank1,map\n");
        for (iter, report) in &output.evals {
            csv.push_str(&format!("{},{},{}\n", iter, report.rank1(), report.map));
        }
        std::fs::write(out_dir.join("eval_history.csv"), csv)?;
    }
    let last = output.metrics.last();
    println!(
        "trained {} head for {} iterations; final mean active loss {}",
        rc.partnet.head.name(),
        rc.train.iterations,
        last.map_or(f64::NAN, |m| m.mean_loss)
    );
    Ok(rc)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (params, bcfg, pcfg) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dir(&args.data, bcfg.input_h, bcfg.input_w)?;
    let split_spec = split(&dataset, args.train_frac, args.split_seed)?;

    let target = match args.on {
        EvalTarget::Test => split_spec.clone(),
        EvalTarget::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.split_seed ^ 0x7A17);
            let (probes, gallery) = probe_gallery(&dataset, &split_spec.train_ids, &mut rng);
            SplitSpec {
                probes,
                gallery,
                ..split_spec.clone()
            }
        }
    };

    let report = evaluate(&params, &bcfg, &pcfg, &dataset, &target, args.max_rank)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(args.out.join("cmc.csv"), report.cmc_csv())?;
    write_echo(&args.out, &serde_json::json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "train_frac": args.train_frac,
        "split_seed": args.split_seed,
        "max_rank": args.max_rank,
    }))?;

    if args.export_maps {
        let count = target.probes.len().min(4);
        export_part_maps(
            &params,
            &bcfg,
            &pcfg,
            &dataset,
            &target.probes[..count],
            &args.out.join("maps"),
        )?;
    }
    println!(
        "rank1={} map={} probes={} excluded={}",
        report.rank1(),
        report.map,
        report.probes,
        report.excluded_probes
    );
    Ok(())
}

/// Mean rank-1/5/10/20 per part count on a train/validation split of the
/// training identities.
pub fn cmd_sweep_parts(args: &SweepArgs) -> Result<()> {
    let rc = resolve_run_config(
        args.config.as_ref(),
        args.data.as_ref(),
        args.out.as_ref(),
        args.train_frac,
        args.split_seed,
        &args.model,
        &args.train,
    )?;
    let data_dir = rc
        .data
        .clone()
        .ok_or_else(|| Error::InvalidConfig("sweep-parts needs --data".into()))?;
    let out_dir = rc
        .out
        .clone()
        .ok_or_else(|| Error::InvalidConfig("sweep-parts needs --out".into()))?;
    if args.k_list.is_empty() || args.seeds == 0 {
        return Err(Error::InvalidConfig("empty sweep".into()));
    }

    let dataset = load_dir(&data_dir, rc.backbone.input_h, rc.backbone.input_w)?;
    let base_split = split(&dataset, rc.train_frac, rc.split_seed)?;
    let width = rc.partnet.embedding_width();

    write_echo(&out_dir, &serde_json::json!({ "run": rc, "k_list": args.k_list, "seeds": args.seeds }))?;
    let mut csv = String::from("k,rank1,rank5,rank10,rank20\n");
    let mut table = Vec::new();
    for &k in &args.k_list {
        let mut ranks = [0.0f64; 4];
        for seed in 0..args.seeds {
            // Halve the training identities: learn on one half, validate on
            // the other.
            let mut ids = base_split.train_ids.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(rc.split_seed ^ (seed << 8) ^ 0x5EED);
            ids.shuffle(&mut rng);
            let half = ids.len() / 2;
            let learn_ids: Vec<u32> = ids[..half].to_vec();
            let val_ids: Vec<u32> = ids[half..].to_vec();
            let learn_data = dataset.filter_identities(&learn_ids);
            let (probes, gallery) = probe_gallery(&dataset, &val_ids, &mut rng);
            let val_split = SplitSpec {
                train_ids: learn_ids,
                test_ids: val_ids,
                probes,
                gallery,
            };

            let pcfg = PartNetConfig::partnet(k, width, rc.partnet.attention);
            let tcfg = TrainConfig {
                seed,
                ..rc.train.clone()
            };
            let output = train(&learn_data, None, None, &tcfg, &rc.backbone, &pcfg, None)?;
            let report = evaluate(
                &output.params,
                &rc.backbone,
                &pcfg,
                &dataset,
                &val_split,
                rc.max_rank.max(20),
            )?;
            ranks[0] += report.rank_at(1);
            ranks[1] += report.rank_at(5);
            ranks[2] += report.rank_at(10);
            ranks[3] += report.rank_at(20);
        }
        for r in &mut ranks {
            *r /= args.seeds as f64;
        }
        println!(
            "K={k}: rank1={:.3} rank5={:.3} rank10={:.3} rank20={:.3}",
            ranks[0], ranks[1], ranks[2], ranks[3]
        );
        csv.push_str(&format!(
            "{k},{},{},{},{}\n",
            ranks[0], ranks[1], ranks[2], ranks[3]
        ));
        table.push((k, ranks));
    }
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let max_m = args.batch_sizes.iter().copied().max().unwrap_or(8);
    let cfg = GenerateConfig {
        identities: (max_m / 2).max(4),
        samples_per_identity: 8,
        seed: args.seed,
        ..GenerateConfig::default()
    };
    let dataset = generate(&cfg)?;
    let bcfg = BackboneConfig::default();
    let pcfg = PartNetConfig::partnet(8, 64, AttentionKind::Sigmoid);
    let params = crate::partnet::init_params(&bcfg, &pcfg, args.seed)?;
    let rows = bench_aggregation(
        &dataset,
        &args.batch_sizes,
        &params,
        &bcfg,
        &pcfg,
        0.2,
        args.seed,
    )?;

    let mut csv = String::from("M,triplets,active,ms_naive,ms_aggregated,max_grad_diff\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.batch, r.triplets, r.active, r.ms_naive, r.ms_aggregated, r.max_grad_diff
        ));
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("bench.csv"), &csv)?;
    write_echo(&args.out, &serde_json::json!({
        "batch_sizes": args.batch_sizes,
        "seed": args.seed,
    }))?;
    print!("{csv}");
    Ok(())
}
