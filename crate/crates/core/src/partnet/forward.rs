//! Forward passes: tape builders for training plus direct evaluators.
//!
//! The tape builders (`*_on_tape`) are the single source of truth for what
//! the model computes during training. The direct evaluators
//! (`detect_part_map`, `part_feature`, ...) re-state the per-branch math
//! independently; tests pin the two against each other.

use crate::error::{Error, Result};
use crate::ndgrad::{ModelParams, Tape, Tensor, ValueId};
use crate::partnet::{
    make_baseline_masks, AttentionKind, BackboneConfig, Embedding, HeadKind, PartMap,
    PartNetConfig, SpatialPartition, NORM_EPS,
};

/// Tape handles for every named parameter, in collection order.
pub struct BoundParams {
    ids: Vec<(String, ValueId)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::InvalidConfig(format!("model has no parameter {name:?}")))
    }

    /// Adds this tape's parameter gradients into `grads`, scaled by `scale`.
    pub fn accumulate_grads(&self, tape: &Tape, grads: &mut ModelParams, scale: f64) -> Result<()> {
        for (name, id) in &self.ids {
            if let Some(g) = tape.grad(*id) {
                let target = grads
                    .get_mut(name)
                    .ok_or_else(|| Error::InvalidConfig(format!("gradient buffer lacks {name:?}")))?;
                target.axpy(scale, g)?;
            }
        }
        Ok(())
    }
}

/// Copies every parameter onto the tape as a leaf.
pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> BoundParams {
    let ids = params
        .iter()
        .map(|(name, tensor)| (name.to_string(), tape.leaf(tensor.clone())))
        .collect();
    BoundParams { ids }
}

/// Input standardization: [0,1] pixels map to the symmetric range [-2,2].
/// Feature magnitudes, and with them the detector gradients, scale with the
/// input range; at [0,1] the 1x1 detectors receive gradients too weak to
/// ever move off their uniform initialization.
const INPUT_SCALE: f64 = 4.0;

/// Backbone stack on the tape: standardize, then conv -> ReLU per stage.
pub fn backbone_on_tape(
    tape: &mut Tape,
    image: ValueId,
    bound: &BoundParams,
    bcfg: &BackboneConfig,
) -> Result<ValueId> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [bcfg.input_h, bcfg.input_w, 3] {
        return Err(Error::ShapeMismatch(format!(
            "backbone expects [{}, {}, 3] input, got {:?}",
            bcfg.input_h, bcfg.input_w, shape
        )));
    }
    let mut x = tape.affine(image, INPUT_SCALE, -0.5 * INPUT_SCALE);
    for (i, &stride) in bcfg.strides.iter().enumerate() {
        let w = bound.get(&format!("backbone.{i}.weight"))?;
        let b = bound.get(&format!("backbone.{i}.bias"))?;
        let conv = tape.conv2d(x, w, b, stride, bcfg.padding)?;
        x = tape.relu(conv);
    }
    Ok(x)
}

/// Full embedding pipeline on the tape. `fixed_masks` is required by the
/// fixed-mask head and ignored by every other head.
pub fn embed_on_tape(
    tape: &mut Tape,
    image: ValueId,
    bound: &BoundParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    fixed_masks: Option<&[PartMap]>,
) -> Result<ValueId> {
    pcfg.validate()?;
    let feat = backbone_on_tape(tape, image, bound, bcfg)?;
    let (fh, fw, c) = bcfg.feature_shape();

    let masked_head = |tape: &mut Tape, maps: Vec<ValueId>| -> Result<ValueId> {
        let mut parts = Vec::with_capacity(maps.len());
        for (p, map) in maps.into_iter().enumerate() {
            let weighted = tape.mul_map(feat, map)?;
            let pooled = tape.avgpool_full(weighted)?;
            let w = bound.get(&format!("reduce.{p}.weight"))?;
            parts.push(tape.linear(pooled, w, None)?);
        }
        let cat = tape.concat(&parts)?;
        Ok(tape.l2_normalize(cat, NORM_EPS))
    };

    match pcfg.head {
        HeadKind::Partnet => {
            let mut maps = Vec::with_capacity(pcfg.parts);
            for p in 0..pcfg.parts {
                let dw = bound.get(&format!("detector.{p}.weight"))?;
                let db = bound.get(&format!("detector.{p}.bias"))?;
                let raw = tape.conv2d(feat, dw, db, 1, 0)?;
                let flat = tape.reshape(raw, vec![fh, fw])?;
                let map = match pcfg.attention {
                    AttentionKind::Sigmoid => tape.sigmoid(flat),
                    AttentionKind::Softmax => tape.softmax_spatial(flat)?,
                };
                maps.push(map);
            }
            masked_head(tape, maps)
        }
        HeadKind::Stripe { bands } => {
            let masks = make_baseline_masks(SpatialPartition::Stripes(bands), fh, fw)?;
            let maps = masks.iter().map(|m| tape.leaf(m.to_tensor())).collect();
            masked_head(tape, maps)
        }
        HeadKind::Grid { side } => {
            let masks = make_baseline_masks(SpatialPartition::Grid(side), fh, fw)?;
            let maps = masks.iter().map(|m| tape.leaf(m.to_tensor())).collect();
            masked_head(tape, maps)
        }
        HeadKind::FixedMask => {
            let masks = fixed_masks.ok_or_else(|| {
                Error::InvalidConfig("fixed-mask head needs externally supplied masks".into())
            })?;
            if masks.len() != pcfg.parts {
                return Err(Error::InvalidConfig(format!(
                    "fixed-mask head configured for {} parts but {} masks supplied",
                    pcfg.parts,
                    masks.len()
                )));
            }
            for m in masks {
                if m.height() != fh || m.width() != fw {
                    return Err(Error::ShapeMismatch(format!(
                        "mask {}x{} does not match feature map {}x{}",
                        m.height(),
                        m.width(),
                        fh,
                        fw
                    )));
                }
            }
            let maps = masks.iter().map(|m| tape.leaf(m.to_tensor())).collect();
            masked_head(tape, maps)
        }
        HeadKind::GlobalPool => {
            let pooled = tape.avgpool_full(feat)?;
            let w = bound.get("reduce.0.weight")?;
            let reduced = tape.linear(pooled, w, None)?;
            Ok(tape.l2_normalize(reduced, NORM_EPS))
        }
        HeadKind::Fc => {
            let flat = tape.reshape(feat, vec![fh * fw * c])?;
            let w = bound.get("fc.weight")?;
            let reduced = tape.linear(flat, w, None)?;
            Ok(tape.l2_normalize(reduced, NORM_EPS))
        }
    }
}

// ---- direct evaluators ----

/// Runs the backbone without recording gradients.
pub fn backbone_forward(
    image: &Tensor,
    params: &ModelParams,
    bcfg: &BackboneConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let bound = bind_params(&mut tape, params);
    let feat = backbone_on_tape(&mut tape, img, &bound, bcfg)?;
    Ok(tape.value(feat).clone())
}

/// Part map of branch `k`, stated directly: map(y,x) = act(sum_c w_c T(y,x,c) + b).
pub fn detect_part_map(
    feature: &Tensor,
    k: usize,
    params: &ModelParams,
    attention: AttentionKind,
) -> Result<PartMap> {
    let shape = feature.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "detect_part_map expects [H,W,C], got {:?}",
            shape
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let weight = params
        .get(&format!("detector.{k}.weight"))
        .ok_or_else(|| Error::InvalidConfig(format!("no detector {k} in parameters")))?;
    let bias = params
        .get(&format!("detector.{k}.bias"))
        .ok_or_else(|| Error::InvalidConfig(format!("no detector bias {k} in parameters")))?;
    if weight.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "detector {k} weight {:?} does not match feature {:?}",
            weight.shape(),
            shape
        )));
    }
    let wv = weight.data();
    let b = bias.data()[0];
    let mut raw = vec![0.0; h * w];
    for (pos, r) in raw.iter_mut().enumerate() {
        let row = &feature.data()[pos * c..(pos + 1) * c];
        *r = row.iter().zip(wv).map(|(t, w)| t * w).sum::<f64>() + b;
    }
    let values = match attention {
        AttentionKind::Sigmoid => raw
            .into_iter()
            .map(|z| {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            })
            .collect(),
        AttentionKind::Softmax => {
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = raw.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        }
    };
    PartMap::new(h, w, values)
}

/// One part feature, stated directly: Wk * Average_{x,y}(T .* M).
pub fn part_feature(feature: &Tensor, map: &PartMap, wk: &Tensor) -> Result<Tensor> {
    let shape = feature.shape();
    if shape.len() != 3 || shape[0] != map.height() || shape[1] != map.width() {
        return Err(Error::ShapeMismatch(format!(
            "part_feature: feature {:?} vs map {}x{}",
            shape,
            map.height(),
            map.width()
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if wk.shape().len() != 2 || wk.shape()[1] != c {
        return Err(Error::ShapeMismatch(format!(
            "part_feature: reduction {:?} vs {c} channels",
            wk.shape()
        )));
    }
    let mut pooled = vec![0.0; c];
    for pos in 0..h * w {
        let m = map.values()[pos];
        for ci in 0..c {
            pooled[ci] += feature.data()[pos * c + ci] * m;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    for v in &mut pooled {
        *v *= inv;
    }
    let d = wk.shape()[0];
    let mut out = vec![0.0; d];
    for (row, o) in out.iter_mut().enumerate() {
        *o = wk.data()[row * c..(row + 1) * c]
            .iter()
            .zip(&pooled)
            .map(|(a, b)| a * b)
            .sum();
    }
    Tensor::new(vec![d], out)
}

fn embed_inner(
    image: &Tensor,
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    masks: Option<&[PartMap]>,
) -> Result<Embedding> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let bound = bind_params(&mut tape, params);
    let out = embed_on_tape(&mut tape, img, &bound, bcfg, pcfg, masks)?;
    Ok(Embedding::new(tape.value(out).data().to_vec()))
}

/// The person representation h(I): unit-norm, deterministic given inputs.
pub fn embed(
    image: &Tensor,
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
) -> Result<Embedding> {
    embed_inner(image, params, bcfg, pcfg, None)
}

/// Embedding with the detectors bypassed by constant external masks.
pub fn embed_with_masks(
    image: &Tensor,
    masks: &[PartMap],
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
) -> Result<Embedding> {
    embed_inner(image, params, bcfg, pcfg, Some(masks))
}

/// Pooling baseline applied to a precomputed feature map.
pub fn pool_head(feature: &Tensor, params: &ModelParams) -> Result<Embedding> {
    let shape = feature.shape().to_vec();
    let w = params
        .get("reduce.0.weight")
        .ok_or_else(|| Error::InvalidConfig("pool head needs reduce.0.weight".into()))?
        .clone();
    let mut tape = Tape::new();
    let feat = tape.leaf(feature.clone());
    let wid = tape.leaf(w);
    let _ = shape;
    let pooled = tape.avgpool_full(feat)?;
    let reduced = tape.linear(pooled, wid, None)?;
    let out = tape.l2_normalize(reduced, NORM_EPS);
    Ok(Embedding::new(tape.value(out).data().to_vec()))
}

/// Fully-connected baseline applied to a precomputed feature map.
pub fn fc_head(feature: &Tensor, params: &ModelParams) -> Result<Embedding> {
    let w = params
        .get("fc.weight")
        .ok_or_else(|| Error::InvalidConfig("fc head needs fc.weight".into()))?
        .clone();
    let n = feature.len();
    let mut tape = Tape::new();
    let feat = tape.leaf(feature.clone());
    let wid = tape.leaf(w);
    let flat = tape.reshape(feat, vec![n])?;
    let reduced = tape.linear(flat, wid, None)?;
    let out = tape.l2_normalize(reduced, NORM_EPS);
    Ok(Embedding::new(tape.value(out).data().to_vec()))
}
