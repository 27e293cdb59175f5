//! Triplet hinge loss, valid-triplet enumeration, and the per-sample
//! weight aggregation that turns the triplet-loss gradient into exactly one
//! backward pass per batch sample.
//!
//! For a batch of M embeddings, every ordered triple (i, j, k) with
//! label(i) = label(j), i != j, label(k) != label(i) is a valid triplet. A
//! triplet is active when its hinge `d_pos - d_neg + m` is strictly positive.
//! The aggregated path computes, per sample n, the weight vector
//!
//! ```text
//! alpha_n = 2 [ sum over active (n,j,k) of (h_k - h_j)
//!             + sum over active (i,n,k) of (h_n - h_i)
//!             + sum over active (i,j,n) of (h_i - h_n) ]
//! ```
//!
//! and seeds sample n's backward pass with `alpha_n / active_count`. The
//! naive path (`naive_loss_and_grad`) instead backpropagates every active
//! triplet on its own tape with the hinge expressed in tape operators; the
//! two must agree to near machine precision, which the tests and the
//! aggregation benchmark both check.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ndgrad::{ModelParams, Tape, Tensor};
use crate::partnet::{
    bind_params, embed_on_tape, BackboneConfig, Embedding, HeadKind, PartMap, PartNetConfig,
};
use crate::synthdata::Dataset;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// M images with identity labels: the unit of one optimization step.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Vec<Tensor>,
    pub labels: Vec<u32>,
    /// Augmentation provenance: whether each image was horizontally flipped.
    pub flipped: Vec<bool>,
    /// Ground-truth part masks per sample, when the dataset carries them
    /// (required by the fixed-mask head).
    pub masks: Option<Vec<Vec<PartMap>>>,
}

impl LabeledBatch {
    pub fn new(images: Vec<Tensor>, labels: Vec<u32>) -> Self {
        let n = images.len();
        LabeledBatch {
            images,
            labels,
            flipped: vec![false; n],
            masks: None,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Identities appearing only once contribute no positive pairs; they are
    /// allowed but worth flagging.
    pub fn singleton_identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.clone();
        ids.sort_unstable();
        let mut out = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            let mut j = i;
            while j < ids.len() && ids[j] == ids[i] {
                j += 1;
            }
            if j - i == 1 {
                out.push(ids[i]);
            }
            i = j;
        }
        out
    }
}

/// Counts over one batch's triplet set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletStats {
    pub total: u64,
    pub active: u64,
    /// Mean hinge over the active set; 0 when nothing is active.
    pub mean_loss: f64,
}

/// Per-sample weight vectors alpha_n (factor 2 included).
#[derive(Debug, Clone)]
pub struct AlphaWeights {
    pub alphas: Vec<Vec<f64>>,
    pub active: u64,
}

impl AlphaWeights {
    /// Componentwise sum over samples; cancels to zero for every batch.
    pub fn component_sum(&self) -> Vec<f64> {
        let width = self.alphas.first().map_or(0, Vec::len);
        let mut sum = vec![0.0; width];
        for a in &self.alphas {
            for (s, v) in sum.iter_mut().zip(a) {
                *s += v;
            }
        }
        sum
    }
}

/// Squared Euclidean distance; in [0,4] for unit vectors.
pub fn squared_euclidean(x: &Embedding, y: &Embedding) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// The hinge `max(d_pos - d_neg + m, 0)`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// All ordered valid triplets (anchor, positive, negative).
pub fn enumerate_triplets(labels: &[u32]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let m = labels.len();
    (0..m).flat_map(move |i| {
        (0..m)
            .filter(move |&j| j != i && labels[j] == labels[i])
            .flat_map(move |j| {
                (0..m)
                    .filter(move |&k| labels[k] != labels[i])
                    .map(move |k| (i, j, k))
            })
    })
}

/// Closed-form triplet count: sum over identities of c*(c-1)*(M-c).
pub fn count_triplets(labels: &[u32]) -> u64 {
    let m = labels.len() as u64;
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut total = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let c = (j - i) as u64;
        total += c * (c - 1) * (m - c);
        i = j;
    }
    total
}

/// Per-sample weights and batch stats from the current embeddings.
///
/// Activity uses the strict inequality `hinge > 0`; the gradient at the
/// hinge's non-differentiable point is dropped.
pub fn compute_alpha(
    embeddings: &[Embedding],
    labels: &[u32],
    margin: f64,
) -> Result<(AlphaWeights, TripletStats)> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let m = embeddings.len();
    let width = embeddings.first().map_or(0, Embedding::len);
    for e in embeddings {
        if e.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "embedding widths {} vs {}",
                e.len(),
                width
            )));
        }
    }

    // Pairwise squared distances, computed once.
    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = squared_euclidean(&embeddings[i], &embeddings[j])?;
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }

    let mut alphas = vec![vec![0.0; width]; m];
    let mut total = 0u64;
    let mut active = 0u64;
    let mut loss_sum = 0.0;

    for anchor in 0..m {
        for pos in 0..m {
            if pos == anchor || labels[pos] != labels[anchor] {
                continue;
            }
            let d_pos = dist[anchor * m + pos];
            for neg in 0..m {
                if labels[neg] == labels[anchor] {
                    continue;
                }
                total += 1;
                let hinge = d_pos - dist[anchor * m + neg] + margin;
                if hinge > 0.0 {
                    active += 1;
                    loss_sum += hinge;
                    let ha = embeddings[anchor].as_slice();
                    let hp = embeddings[pos].as_slice();
                    let hn = embeddings[neg].as_slice();
                    let (aa, ap, an) = distinct3(&mut alphas, anchor, pos, neg);
                    for c in 0..width {
                        aa[c] += 2.0 * (hn[c] - hp[c]);
                        ap[c] += 2.0 * (hp[c] - ha[c]);
                        an[c] += 2.0 * (ha[c] - hn[c]);
                    }
                }
            }
        }
    }

    let stats = TripletStats {
        total,
        active,
        mean_loss: if active > 0 {
            loss_sum / active as f64
        } else {
            0.0
        },
    };
    Ok((AlphaWeights { alphas, active }, stats))
}

/// Disjoint mutable borrows of three distinct rows.
fn distinct3(
    rows: &mut [Vec<f64>],
    a: usize,
    b: usize,
    c: usize,
) -> (&mut [f64], &mut [f64], &mut [f64]) {
    debug_assert!(a != b && b != c && a != c);
    let ptr = rows.as_mut_ptr();
    // Safety: indices are pairwise distinct and in range.
    unsafe {
        (
            (*ptr.add(a)).as_mut_slice(),
            (*ptr.add(b)).as_mut_slice(),
            (*ptr.add(c)).as_mut_slice(),
        )
    }
}

/// How per-sample gradient contributions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeMode {
    /// Sum in batch-index order; bitwise reproducible.
    #[default]
    Deterministic,
    /// Unordered parallel reduction.
    Fast,
}

#[derive(Debug)]
pub struct LossAndGrad {
    /// Mean hinge over the active triplets.
    pub loss: f64,
    pub grads: ModelParams,
    pub stats: TripletStats,
    /// Number of tape backward passes performed; always M.
    pub backward_passes: usize,
}

struct SampleForward {
    tape: Tape,
    bound: crate::partnet::BoundParams,
    root: crate::ndgrad::ValueId,
    embedding: Embedding,
}

fn forward_all(
    batch: &LabeledBatch,
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
) -> Result<Vec<SampleForward>> {
    (0..batch.len())
        .into_par_iter()
        .map(|n| {
            let mut tape = Tape::new();
            let img = tape.leaf(batch.images[n].clone());
            let bound = bind_params(&mut tape, params);
            let masks = match pcfg.head {
                HeadKind::FixedMask => Some(
                    batch
                        .masks
                        .as_ref()
                        .ok_or_else(|| {
                            Error::InvalidConfig(
                                "fixed-mask head needs a batch with ground-truth masks".into(),
                            )
                        })?
                        .get(n)
                        .ok_or_else(|| Error::Data(format!("sample {n} has no masks")))?
                        .as_slice(),
                ),
                _ => None,
            };
            let root = embed_on_tape(&mut tape, img, &bound, bcfg, pcfg, masks)?;
            let embedding = Embedding::new(tape.value(root).data().to_vec());
            Ok(SampleForward {
                tape,
                bound,
                root,
                embedding,
            })
        })
        .collect()
}

/// Mean active-triplet loss and parameter gradients via the per-sample
/// aggregation: exactly M backward passes, each seeded with
/// `alpha_n / active_count`.
pub fn loss_and_grad(
    batch: &LabeledBatch,
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    margin: f64,
    merge: MergeMode,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let forwards = forward_all(batch, params, bcfg, pcfg)?;
    let embeddings: Vec<Embedding> = forwards.iter().map(|f| f.embedding.clone()).collect();
    let (alpha, stats) = compute_alpha(&embeddings, &batch.labels, margin)?;

    // The all-inactive batch is defined as zero loss and zero gradient; the
    // M backward passes still run (with zero seeds) so the pass count is a
    // structural constant.
    let scale = if alpha.active > 0 {
        1.0 / alpha.active as f64
    } else {
        0.0
    };

    let per_sample: Vec<ModelParams> = forwards
        .into_par_iter()
        .zip(alpha.alphas.par_iter())
        .map(|(mut f, a)| {
            let seed = Tensor::vector(&a.iter().map(|v| v * scale).collect::<Vec<f64>>());
            f.tape.backward(f.root, Some(seed))?;
            let mut g = params.zeros_like();
            f.bound.accumulate_grads(&f.tape, &mut g, 1.0)?;
            Ok(g)
        })
        .collect::<Result<Vec<ModelParams>>>()?;
    let backward_passes = per_sample.len();

    let grads = match merge {
        MergeMode::Deterministic => {
            let mut acc = params.zeros_like();
            for g in &per_sample {
                acc.axpy(1.0, g)?;
            }
            acc
        }
        MergeMode::Fast => per_sample
            .into_par_iter()
            .reduce(
                || params.zeros_like(),
                |mut a, b| {
                    a.axpy(1.0, &b).expect("uniform shapes");
                    a
                },
            ),
    };

    Ok(LossAndGrad {
        loss: stats.mean_loss,
        grads,
        stats,
        backward_passes,
    })
}

/// Reference path: every active triplet backpropagated on its own tape,
/// contributions summed and normalized by the active count.
///
/// The hinge is expressed in tape operators here, so this path shares no
/// aggregation code with [`loss_and_grad`].
pub fn naive_loss_and_grad(
    batch: &LabeledBatch,
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    margin: f64,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let triplets: Vec<(usize, usize, usize)> = enumerate_triplets(&batch.labels).collect();
    let total = triplets.len() as u64;

    let contributions: Vec<(f64, Option<ModelParams>)> = triplets
        .par_iter()
        .map(|&(i, j, k)| -> Result<(f64, Option<ModelParams>)> {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, params);
            let mask_of = |n: usize| -> Option<&[PartMap]> {
                batch.masks.as_ref().map(|m| m[n].as_slice())
            };
            let masks = matches!(pcfg.head, HeadKind::FixedMask);
            let img_i = tape.leaf(batch.images[i].clone());
            let img_j = tape.leaf(batch.images[j].clone());
            let img_k = tape.leaf(batch.images[k].clone());
            let hi = embed_on_tape(&mut tape, img_i, &bound, bcfg, pcfg, if masks { mask_of(i) } else { None })?;
            let hj = embed_on_tape(&mut tape, img_j, &bound, bcfg, pcfg, if masks { mask_of(j) } else { None })?;
            let hk = embed_on_tape(&mut tape, img_k, &bound, bcfg, pcfg, if masks { mask_of(k) } else { None })?;

            let dp_vec = tape.sub(hi, hj)?;
            let dp_sq = tape.mul(dp_vec, dp_vec)?;
            let d_pos = tape.sum(dp_sq);
            let dn_vec = tape.sub(hi, hk)?;
            let dn_sq = tape.mul(dn_vec, dn_vec)?;
            let d_neg = tape.sum(dn_sq);
            let gap = tape.sub(d_pos, d_neg)?;
            let hinge = tape.value(gap).data()[0] + margin;
            if hinge > 0.0 {
                tape.backward(gap, None)?;
                let mut g = params.zeros_like();
                bound.accumulate_grads(&tape, &mut g, 1.0)?;
                Ok((hinge, Some(g)))
            } else {
                Ok((0.0, None))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = params.zeros_like();
    let mut active = 0u64;
    let mut loss_sum = 0.0;
    let mut backward_passes = 0usize;
    for (hinge, g) in &contributions {
        if let Some(g) = g {
            active += 1;
            loss_sum += hinge;
            backward_passes += 1;
            grads.axpy(1.0, g)?;
        }
    }
    if active > 0 {
        let inv = 1.0 / active as f64;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= inv;
            }
        }
    }

    Ok(LossAndGrad {
        loss: if active > 0 {
            loss_sum / active as f64
        } else {
            0.0
        },
        grads,
        stats: TripletStats {
            total,
            active,
            mean_loss: if active > 0 {
                loss_sum / active as f64
            } else {
                0.0
            },
        },
        backward_passes,
    })
}

/// PK sampling: P identities drawn without replacement, K images each
/// (with replacement only when an identity has fewer than K images).
pub fn pk_sample(
    dataset: &Dataset,
    p: usize,
    k_img: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledBatch> {
    let by_id = dataset.indices_by_identity();
    if by_id.len() < p {
        return Err(Error::Data(format!(
            "pk_sample needs {} identities, dataset has {}",
            p,
            by_id.len()
        )));
    }
    let mut id_order: Vec<usize> = (0..by_id.len()).collect();
    id_order.shuffle(rng);

    let mut images = Vec::with_capacity(p * k_img);
    let mut labels = Vec::with_capacity(p * k_img);
    let mut masks = Vec::with_capacity(p * k_img);
    for &slot in id_order.iter().take(p) {
        let (identity, indices) = &by_id[slot];
        let chosen: Vec<usize> = if indices.len() >= k_img {
            let mut pool = indices.clone();
            pool.shuffle(rng);
            pool.truncate(k_img);
            pool
        } else {
            (0..k_img)
                .map(|_| indices[rng.random_range(0..indices.len())])
                .collect()
        };
        for idx in chosen {
            let sample = &dataset.samples[idx];
            images.push(sample.image.clone());
            labels.push(*identity);
            masks.push(sample.masks.clone());
        }
    }
    let n = images.len();
    Ok(LabeledBatch {
        images,
        labels,
        flipped: vec![false; n],
        masks: Some(masks),
    })
}

/// One row of the aggregation benchmark.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub batch: usize,
    pub triplets: u64,
    pub active: u64,
    pub ms_naive: f64,
    pub ms_aggregated: f64,
    pub max_grad_diff: f64,
}

/// Times the naive and aggregated gradient paths on identical batches.
pub fn bench_aggregation(
    dataset: &Dataset,
    sizes: &[usize],
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    margin: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &m in sizes {
        if m < 4 {
            return Err(Error::InvalidConfig(format!("bench batch {m} too small")));
        }
        let k_img = 4.min(m / 2);
        let p = m / k_img;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ m as u64);
        let batch = pk_sample(dataset, p, k_img, &mut rng)?;

        let t0 = std::time::Instant::now();
        let naive = naive_loss_and_grad(&batch, params, bcfg, pcfg, margin)?;
        let ms_naive = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = std::time::Instant::now();
        let fast = loss_and_grad(&batch, params, bcfg, pcfg, margin, MergeMode::Deterministic)?;
        let ms_aggregated = t1.elapsed().as_secs_f64() * 1e3;

        rows.push(BenchRow {
            batch: batch.len(),
            triplets: fast.stats.total,
            active: fast.stats.active,
            ms_naive,
            ms_aggregated,
            max_grad_diff: naive.grads.max_abs_diff(&fast.grads)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partnet::{init_params, AttentionKind};

    fn unit(values: &[f64]) -> Embedding {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Embedding::new(values.iter().map(|v| v / n).collect())
    }

    #[test]
    fn squared_euclidean_reference_values() {
        let e1 = unit(&[1.0, 0.0]);
        let e2 = unit(&[0.0, 1.0]);
        assert_eq!(squared_euclidean(&e1, &e1).unwrap(), 0.0);
        assert!((squared_euclidean(&e1, &e2).unwrap() - 2.0).abs() < 1e-15);
        let anti = Embedding::new(vec![-1.0, 0.0]);
        assert!((squared_euclidean(&e1, &anti).unwrap() - 4.0).abs() < 1e-15);
        let short = Embedding::new(vec![1.0]);
        assert!(squared_euclidean(&e1, &short).is_err());
    }

    #[test]
    fn hinge_reference_values() {
        assert_eq!(triplet_loss(0.1, 0.5, 0.2), 0.0);
        assert!((triplet_loss(0.5, 0.4, 0.2) - 0.3).abs() < 1e-15);
        assert!((triplet_loss(0.7, 0.7, 0.2) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn enumerate_two_by_two() {
        // 2 ids x 2 images: 4 anchors x 1 positive x 2 negatives = 8.
        let labels = [0, 0, 1, 1];
        let got: Vec<_> = enumerate_triplets(&labels).collect();
        let expect = vec![
            (0, 1, 2),
            (0, 1, 3),
            (1, 0, 2),
            (1, 0, 3),
            (2, 3, 0),
            (2, 3, 1),
            (3, 2, 0),
            (3, 2, 1),
        ];
        assert_eq!(got, expect);
        assert_eq!(count_triplets(&labels), 8);
    }

    #[test]
    fn single_identity_has_no_triplets() {
        let labels = [5, 5, 5];
        assert_eq!(enumerate_triplets(&labels).count(), 0);
        assert_eq!(count_triplets(&labels), 0);
    }

    #[test]
    fn paper_scale_batch_counts_1_404_000() {
        // 40 identities x 10 images = 400 samples.
        let labels: Vec<u32> = (0..400).map(|i| (i / 10) as u32).collect();
        assert_eq!(count_triplets(&labels), 1_404_000);
        assert_eq!(enumerate_triplets(&labels).count(), 1_404_000);
    }

    #[test]
    fn alpha_zero_on_inactive_batch() {
        // Distinct clusters so far apart the hinge never fires at margin 0.01.
        let embeddings = vec![
            unit(&[1.0, 0.0, 0.0]),
            unit(&[0.999, 0.001, 0.0]),
            unit(&[0.0, 1.0, 0.0]),
            unit(&[0.001, 0.999, 0.0]),
        ];
        let labels = [0, 0, 1, 1];
        let (alpha, stats) = compute_alpha(&embeddings, &labels, 0.01).unwrap();
        assert_eq!(stats.active, 0);
        assert_eq!(stats.mean_loss, 0.0);
        assert!(alpha.alphas.iter().all(|a| a.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn alpha_single_active_triplet_roles() {
        // Anchor/positive from id 0, one negative: exactly 2 valid triplets
        // (each positive ordering), so keep only one active via the margin.
        let h_a = unit(&[1.0, 0.0]);
        let h_p = unit(&[0.0, 1.0]);
        let h_n = unit(&[-1.0, 0.0]);
        // d(a,p) = 2, d(a,n) = 4 -> hinge(a,p,n) = 2 - 4 + m.
        // d(p,a) = 2, d(p,n) = 2 -> hinge(p,a,n) = 2 - 2 + m = m > 0.
        // Margin 1 keeps only the (p, a, n) ordering active.
        let embeddings = vec![h_a.clone(), h_p.clone(), h_n.clone()];
        let labels = [0, 0, 1];
        let (alpha, stats) = compute_alpha(&embeddings, &labels, 1.0).unwrap();
        assert_eq!(stats.total, 2);
        assert_eq!(stats.active, 1);
        // Active triplet: anchor = sample 1 (p), positive = sample 0 (a),
        // negative = sample 2 (n).
        let (ha, hp, hn) = (h_p.as_slice(), h_a.as_slice(), h_n.as_slice());
        for c in 0..2 {
            assert!((alpha.alphas[1][c] - 2.0 * (hn[c] - hp[c])).abs() < 1e-15);
            assert!((alpha.alphas[0][c] - 2.0 * (hp[c] - ha[c])).abs() < 1e-15);
            assert!((alpha.alphas[2][c] - 2.0 * (ha[c] - hn[c])).abs() < 1e-15);
        }
    }

    /// Brute-force oracle: loop over every valid triplet and accumulate the
    /// three role contributions of its hinge derivative.
    fn alpha_brute(embeddings: &[Embedding], labels: &[u32], margin: f64) -> Vec<Vec<f64>> {
        let width = embeddings[0].len();
        let mut alphas = vec![vec![0.0; width]; embeddings.len()];
        for (i, j, k) in enumerate_triplets(labels) {
            let d_pos = squared_euclidean(&embeddings[i], &embeddings[j]).unwrap();
            let d_neg = squared_euclidean(&embeddings[i], &embeddings[k]).unwrap();
            if triplet_loss(d_pos, d_neg, margin) > 0.0 {
                for c in 0..width {
                    let (hi, hj, hk) = (
                        embeddings[i].as_slice()[c],
                        embeddings[j].as_slice()[c],
                        embeddings[k].as_slice()[c],
                    );
                    alphas[i][c] += 2.0 * (hk - hj);
                    alphas[j][c] += 2.0 * (hj - hi);
                    alphas[k][c] += 2.0 * (hi - hk);
                }
            }
        }
        alphas
    }

    #[test]
    fn alpha_matches_brute_force_and_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let m = 12;
            let ids = rng.random_range(2..5u32);
            let labels: Vec<u32> = (0..m).map(|_| rng.random_range(0..ids)).collect();
            let embeddings: Vec<Embedding> = (0..m)
                .map(|_| {
                    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                    unit(&v)
                })
                .collect();
            let (alpha, _) = compute_alpha(&embeddings, &labels, 0.2).unwrap();
            let brute = alpha_brute(&embeddings, &labels, 0.2);
            for (a, b) in alpha.alphas.iter().zip(&brute) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            for s in alpha.component_sum() {
                assert!(s.abs() < 1e-12, "alpha components must cancel, got {s}");
            }
        }
    }

    #[test]
    fn raising_margin_never_deactivates() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let labels: Vec<u32> = (0..10).map(|_| rng.random_range(0..3u32)).collect();
            let embeddings: Vec<Embedding> = (0..10)
                .map(|_| {
                    let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                    unit(&v)
                })
                .collect();
            let (_, low) = compute_alpha(&embeddings, &labels, 0.1).unwrap();
            let (_, high) = compute_alpha(&embeddings, &labels, 0.4).unwrap();
            assert!(high.active >= low.active);
        }
    }

    fn tiny_model() -> (BackboneConfig, PartNetConfig) {
        let bcfg = BackboneConfig {
            input_h: 8,
            input_w: 4,
            channels: vec![6],
            strides: vec![2],
            kernel: 3,
            padding: 1,
        };
        let pcfg = PartNetConfig::partnet(2, 8, AttentionKind::Sigmoid);
        (bcfg, pcfg)
    }

    fn random_batch(
        rng: &mut ChaCha8Rng,
        bcfg: &BackboneConfig,
        ids: u32,
        m: usize,
    ) -> LabeledBatch {
        let images = (0..m)
            .map(|_| {
                let n = bcfg.input_h * bcfg.input_w * 3;
                Tensor::new(
                    vec![bcfg.input_h, bcfg.input_w, 3],
                    (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let labels = (0..m).map(|i| (i as u32) % ids).collect();
        LabeledBatch::new(images, labels)
    }

    #[test]
    fn aggregated_matches_naive_on_tiny_model() {
        let (bcfg, pcfg) = tiny_model();
        let params = init_params(&bcfg, &pcfg, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let batch = random_batch(&mut rng, &bcfg, 2, 8);
        let agg = loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2, MergeMode::Deterministic)
            .unwrap();
        let naive = naive_loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2).unwrap();
        assert_eq!(agg.stats.total, naive.stats.total);
        assert_eq!(agg.stats.active, naive.stats.active);
        assert!((agg.loss - naive.loss).abs() < 1e-12);
        let diff = agg.grads.max_abs_diff(&naive.grads).unwrap();
        assert!(diff < 1e-10, "gradient paths diverge by {diff}");
        assert_eq!(agg.backward_passes, 8);
        assert!(naive.backward_passes as u64 == naive.stats.active);
    }

    #[test]
    fn aggregated_matches_naive_on_desk_model() {
        let bcfg = BackboneConfig::default();
        let pcfg = PartNetConfig::partnet(4, 64, AttentionKind::Sigmoid);
        let params = init_params(&bcfg, &pcfg, 35).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let batch = random_batch(&mut rng, &bcfg, 2, 8);
        let agg = loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2, MergeMode::Deterministic)
            .unwrap();
        let naive = naive_loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2).unwrap();
        assert!(agg.grads.max_abs_diff(&naive.grads).unwrap() < 1e-10);
        assert_eq!(agg.backward_passes, 8);
    }

    #[test]
    fn all_inactive_batch_gives_zero_gradient() {
        let (bcfg, pcfg) = tiny_model();
        let params = init_params(&bcfg, &pcfg, 37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        // Identical images across both identities with margin 0: every hinge
        // is exactly 0, never strictly positive.
        let mut batch = random_batch(&mut rng, &bcfg, 2, 6);
        let proto = batch.images[0].clone();
        for img in &mut batch.images {
            *img = proto.clone();
        }
        let out = loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.0, MergeMode::Deterministic)
            .unwrap();
        assert_eq!(out.stats.active, 0);
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.backward_passes, 6);
        for (_, t) in out.grads.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn permuting_batch_permutes_alpha_and_keeps_gradients() {
        let (bcfg, pcfg) = tiny_model();
        let params = init_params(&bcfg, &pcfg, 39).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let batch = random_batch(&mut rng, &bcfg, 3, 9);

        let perm: Vec<usize> = vec![4, 0, 7, 2, 8, 1, 6, 3, 5];
        let permuted = LabeledBatch::new(
            perm.iter().map(|&i| batch.images[i].clone()).collect(),
            perm.iter().map(|&i| batch.labels[i]).collect(),
        );

        let a = loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2, MergeMode::Deterministic)
            .unwrap();
        let b = loss_and_grad(&permuted, &params, &bcfg, &pcfg, 0.2, MergeMode::Deterministic)
            .unwrap();
        assert_eq!(a.stats.total, b.stats.total);
        assert_eq!(a.stats.active, b.stats.active);
        assert!((a.stats.mean_loss - b.stats.mean_loss).abs() < 1e-12);
        assert!(a.grads.max_abs_diff(&b.grads).unwrap() < 1e-12);

        // Alpha vectors follow the permutation (up to accumulation order).
        let emb = |batch: &LabeledBatch| -> Vec<Embedding> {
            forward_all(batch, &params, &bcfg, &pcfg)
                .unwrap()
                .into_iter()
                .map(|f| f.embedding)
                .collect()
        };
        let (alpha_a, _) = compute_alpha(&emb(&batch), &batch.labels, 0.2).unwrap();
        let (alpha_b, _) = compute_alpha(&emb(&permuted), &permuted.labels, 0.2).unwrap();
        for (n, &src) in perm.iter().enumerate() {
            for (x, y) in alpha_b.alphas[n].iter().zip(&alpha_a.alphas[src]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_merge_agrees_with_deterministic_up_to_rounding() {
        let (bcfg, pcfg) = tiny_model();
        let params = init_params(&bcfg, &pcfg, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let batch = random_batch(&mut rng, &bcfg, 2, 8);
        let a = loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2, MergeMode::Deterministic)
            .unwrap();
        let b = loss_and_grad(&batch, &params, &bcfg, &pcfg, 0.2, MergeMode::Fast).unwrap();
        assert!(a.grads.max_abs_diff(&b.grads).unwrap() < 1e-12);
    }

    #[test]
    fn singleton_identities_are_flagged() {
        let (bcfg, _) = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut batch = random_batch(&mut rng, &bcfg, 3, 6);
        batch.labels = vec![0, 0, 1, 2, 2, 2];
        assert_eq!(batch.singleton_identities(), vec![1]);
    }
}
