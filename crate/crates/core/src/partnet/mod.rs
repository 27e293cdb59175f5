//! The embedding function h(I) and its baseline heads.
//!
//! A small fully convolutional backbone turns the input image into a feature
//! map T. The part head runs K learned detectors (1x1 conv + sigmoid, or a
//! spatial softmax variant) over T, weights T by each map, average-pools,
//! reduces each pooled vector with a per-part linear layer, concatenates and
//! L2-normalizes. Baseline heads swap the learned maps for fixed stripe/grid
//! partitions, externally supplied masks, a global pooling layer, or one
//! fully-connected layer over the flattened map.

mod checkpoint;
mod config;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AttentionKind, BackboneConfig, HeadKind, PartNetConfig};
pub use forward::{
    backbone_forward, backbone_on_tape, bind_params, detect_part_map, embed, embed_on_tape,
    embed_with_masks, fc_head, part_feature, pool_head, BoundParams,
};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{ModelParams, Tensor};

/// L2-normalization guard; the embedding denominator never drops below this.
pub const NORM_EPS: f64 = 1e-12;

/// A 2-D spatial weighting over the feature map.
///
/// Sigmoid-detector maps have entries in (0,1); softmax maps sum to 1;
/// baseline partition masks are binary.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl PartMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "part map {}x{} needs {} values, got {}",
                h,
                w,
                h * w,
                values.len()
            )));
        }
        Ok(PartMap { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.values.clone()).expect("consistent by construction")
    }

    pub fn ones(h: usize, w: usize) -> Self {
        PartMap {
            h,
            w,
            values: vec![1.0; h * w],
        }
    }
}

/// The L2-normalized person representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fixed spatial partitions used by the stripe and grid baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPartition {
    /// S horizontal stripes.
    Stripes(usize),
    /// G x G grid cells, row-major.
    Grid(usize),
}

/// Splits `extent` cells into `bands` contiguous bands; remainder rows go to
/// the earliest bands, so sizes differ by at most one.
fn bands(extent: usize, count: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if count == 0 || count > extent {
        return Err(Error::InvalidConfig(format!(
            "cannot split extent {extent} into {count} bands"
        )));
    }
    let base = extent / count;
    let rem = extent % count;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let size = base + usize::from(i < rem);
        out.push(start..start + size);
        start += size;
    }
    Ok(out)
}

/// Binary masks partitioning an HxW map: disjoint, and their union covers
/// every cell.
pub fn make_baseline_masks(kind: SpatialPartition, h: usize, w: usize) -> Result<Vec<PartMap>> {
    let mut masks = Vec::new();
    match kind {
        SpatialPartition::Stripes(s) => {
            for rows in bands(h, s)? {
                let mut values = vec![0.0; h * w];
                for y in rows {
                    for x in 0..w {
                        values[y * w + x] = 1.0;
                    }
                }
                masks.push(PartMap { h, w, values });
            }
        }
        SpatialPartition::Grid(g) => {
            let row_bands = bands(h, g)?;
            let col_bands = bands(w, g)?;
            for rows in &row_bands {
                for cols in &col_bands {
                    let mut values = vec![0.0; h * w];
                    for y in rows.clone() {
                        for x in cols.clone() {
                            values[y * w + x] = 1.0;
                        }
                    }
                    masks.push(PartMap { h, w, values });
                }
            }
        }
    }
    Ok(masks)
}

/// Standard-normal sample via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| sigma * normal(rng)).collect();
    Tensor::new(shape, data).expect("length matches by construction")
}

/// Expected parameter names and shapes for a model configuration.
///
/// Initialization and checkpoint validation both derive from this single
/// template so they cannot drift apart.
pub fn param_template(bcfg: &BackboneConfig, pcfg: &PartNetConfig) -> Result<Vec<(String, Vec<usize>)>> {
    bcfg.validate()?;
    pcfg.validate()?;
    let mut out = Vec::new();
    let k = bcfg.kernel;
    let mut cin = 3;
    for (i, (&cout, _)) in bcfg.channels.iter().zip(&bcfg.strides).enumerate() {
        out.push((format!("backbone.{i}.weight"), vec![k, k, cin, cout]));
        out.push((format!("backbone.{i}.bias"), vec![cout]));
        cin = cout;
    }
    let (fh, fw, c) = bcfg.feature_shape();
    match pcfg.head {
        HeadKind::Partnet => {
            for p in 0..pcfg.parts {
                out.push((format!("detector.{p}.weight"), vec![1, 1, c, 1]));
                out.push((format!("detector.{p}.bias"), vec![1]));
                out.push((format!("reduce.{p}.weight"), vec![pcfg.part_dim, c]));
            }
        }
        HeadKind::Stripe { .. } | HeadKind::Grid { .. } | HeadKind::FixedMask => {
            for p in 0..pcfg.parts {
                out.push((format!("reduce.{p}.weight"), vec![pcfg.part_dim, c]));
            }
        }
        HeadKind::GlobalPool => {
            out.push(("reduce.0.weight".to_string(), vec![pcfg.part_dim, c]));
        }
        HeadKind::Fc => {
            out.push(("fc.weight".to_string(), vec![pcfg.part_dim, fh * fw * c]));
        }
    }
    Ok(out)
}

/// Fresh parameters: He-style Gaussians for the backbone, sigma 0.01 for the
/// part detectors (so initial maps sit near 0.5 everywhere), zero biases.
pub fn init_params(bcfg: &BackboneConfig, pcfg: &PartNetConfig, seed: u64) -> Result<ModelParams> {
    let template = param_template(bcfg, pcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape) in template {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else if name.starts_with("backbone.") {
            let fan_in: usize = shape[..3].iter().product();
            gaussian_tensor(&mut rng, shape, (2.0 / fan_in as f64).sqrt())
        } else if name.starts_with("detector.") {
            gaussian_tensor(&mut rng, shape, 0.01)
        } else {
            // reduce.* / fc.*: linear output layers, fan-in scaled.
            let fan_in = shape[1];
            gaussian_tensor(&mut rng, shape, (1.0 / fan_in as f64).sqrt())
        };
        params.insert(name, tensor)?;
    }
    Ok(params)
}
