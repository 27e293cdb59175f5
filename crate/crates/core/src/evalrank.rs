//! Retrieval evaluation: ranked lists, CMC curves, mAP, report emission
//! and part-map visualization export.
//!
//! Protocol notes: single query; gallery entries sharing both identity and
//! camera with the probe are junk and dropped from the ranked list before
//! scoring (the usual single-query convention). Ties in distance break by
//! gallery index so independent implementations agree bit for bit.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::ModelParams;
use crate::partnet::{
    backbone_forward, detect_part_map, embed, embed_with_masks, BackboneConfig, Embedding,
    HeadKind, PartNetConfig,
};
use crate::synthdata::{write_pgm, Dataset, SplitSpec};
use crate::tripletloss::squared_euclidean;

/// Gallery indices in ascending squared-Euclidean order; ties break toward
/// the lower index (stable).
pub fn rank_gallery(probe: &Embedding, gallery: &[Embedding]) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (squared_euclidean(probe, g).expect("uniform widths"), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, i)| i).collect()
}

/// CMC values at ranks 1..=max_rank plus the count of probes excluded for
/// having no relevant gallery item.
pub fn cmc(relevance: &[Vec<bool>], max_rank: usize) -> (Vec<f64>, usize) {
    let mut first_hits = Vec::new();
    let mut excluded = 0;
    for list in relevance {
        match list.iter().position(|&r| r) {
            Some(pos) => first_hits.push(pos + 1),
            None => excluded += 1,
        }
    }
    let included = first_hits.len();
    let mut values = vec![0.0; max_rank];
    if included > 0 {
        for (n, v) in values.iter_mut().enumerate() {
            let hits = first_hits.iter().filter(|&&r| r <= n + 1).count();
            *v = hits as f64 / included as f64;
        }
    }
    (values, excluded)
}

/// Mean average precision over probes with at least one relevant item,
/// plus the excluded-probe count. AP sums precision at each relevant
/// position and divides by the number of relevant items.
pub fn mean_ap(relevance: &[Vec<bool>]) -> (f64, usize) {
    let mut aps = Vec::new();
    let mut excluded = 0;
    for list in relevance {
        let total_relevant = list.iter().filter(|&&r| r).count();
        if total_relevant == 0 {
            excluded += 1;
            continue;
        }
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (pos, &rel) in list.iter().enumerate() {
            if rel {
                seen += 1;
                ap += seen as f64 / (pos + 1) as f64;
            }
        }
        aps.push(ap / total_relevant as f64);
    }
    if aps.is_empty() {
        return (0.0, excluded);
    }
    (aps.iter().sum::<f64>() / aps.len() as f64, excluded)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// CMC values at ranks 1..=len.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// 1-based first-hit rank per scored probe, in probe order.
    pub first_hit_ranks: Vec<usize>,
    pub excluded_probes: usize,
    pub probes: usize,
    pub gallery_size: usize,
    /// Configuration echo.
    pub backbone: BackboneConfig,
    pub partnet: PartNetConfig,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn rank_at(&self, n: usize) -> f64 {
        self.cmc.get(n - 1).copied().unwrap_or(1.0)
    }

    /// `rank,value` rows.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,value\n");
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

fn embed_batch(
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<Embedding>> {
    indices
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            match pcfg.head {
                HeadKind::FixedMask => embed_with_masks(&s.image, &s.masks, params, bcfg, pcfg),
                _ => embed(&s.image, params, bcfg, pcfg),
            }
        })
        .collect()
}

/// Embeds probes and gallery, ranks, filters junk, and scores.
pub fn evaluate(
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    max_rank: usize,
) -> Result<EvalReport> {
    if split.gallery.is_empty() || split.probes.is_empty() {
        return Err(Error::Data("evaluation needs probes and a gallery".into()));
    }
    let probe_embs = embed_batch(params, bcfg, pcfg, dataset, &split.probes)?;
    let gallery_embs = embed_batch(params, bcfg, pcfg, dataset, &split.gallery)?;

    let relevance: Vec<Vec<bool>> = split
        .probes
        .par_iter()
        .zip(&probe_embs)
        .map(|(&pi, pe)| {
            let probe = &dataset.samples[pi];
            let ranked = rank_gallery(pe, &gallery_embs);
            ranked
                .into_iter()
                .filter_map(|gi| {
                    let g = &dataset.samples[split.gallery[gi]];
                    // Same identity and same camera is junk: drop it.
                    if g.identity == probe.identity && g.camera == probe.camera {
                        None
                    } else {
                        Some(g.identity == probe.identity)
                    }
                })
                .collect()
        })
        .collect();

    let (cmc_values, excluded_cmc) = cmc(&relevance, max_rank);
    let (map, _) = mean_ap(&relevance);
    let first_hit_ranks = relevance
        .iter()
        .filter_map(|l| l.iter().position(|&r| r).map(|p| p + 1))
        .collect();

    Ok(EvalReport {
        cmc: cmc_values,
        map,
        first_hit_ranks,
        excluded_probes: excluded_cmc,
        probes: split.probes.len(),
        gallery_size: split.gallery.len(),
        backbone: bcfg.clone(),
        partnet: *pcfg,
    })
}

/// Nearest-neighbor upsample of a part map to image resolution, as bytes.
fn map_to_bytes(values: &[f64], mh: usize, mw: usize, th: usize, tw: usize) -> Vec<u8> {
    let mut out = vec![0u8; th * tw];
    for y in 0..th {
        let sy = y * mh / th;
        for x in 0..tw {
            let sx = x * mw / tw;
            out[y * tw + x] = (values[sy * mw + sx] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Writes K grayscale part maps per image (nearest-upsampled to input
/// resolution) plus a side-by-side montage PNG. Returns the files written.
pub fn export_part_maps(
    params: &ModelParams,
    bcfg: &BackboneConfig,
    pcfg: &PartNetConfig,
    dataset: &Dataset,
    indices: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if pcfg.head != HeadKind::Partnet {
        return Err(Error::InvalidConfig(
            "part-map export needs the part-net head".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let (h, w) = (bcfg.input_h, bcfg.input_w);
    let mut written = Vec::new();
    for &idx in indices {
        let sample = &dataset.samples[idx];
        let feature = backbone_forward(&sample.image, params, bcfg)?;
        let mut montage = image::RgbImage::new(((pcfg.parts + 1) * (w + 1)) as u32, h as u32);
        // Panel 0: the input image.
        for y in 0..h {
            for x in 0..w {
                let off = (y * w + x) * 3;
                let px = image::Rgb(std::array::from_fn(|c| {
                    (sample.image.data()[off + c] * 255.0).round() as u8
                }));
                montage.put_pixel(x as u32, y as u32, px);
            }
        }
        for k in 0..pcfg.parts {
            let map = detect_part_map(&feature, k, params, pcfg.attention)?;
            let bytes = map_to_bytes(map.values(), map.height(), map.width(), h, w);
            let path = out_dir.join(format!("img{idx:04}_part{k}.pgm"));
            write_pgm(&path, h, w, &bytes)?;
            written.push(path);
            let x0 = (k + 1) * (w + 1);
            for y in 0..h {
                for x in 0..w {
                    let v = bytes[y * w + x];
                    montage.put_pixel((x0 + x) as u32, y as u32, image::Rgb([v, v, v]));
                }
            }
        }
        let montage_path = out_dir.join(format!("img{idx:04}_montage.png"));
        montage
            .save(&montage_path)
            .map_err(|e| Error::Data(format!("cannot write montage: {e}")))?;
        written.push(montage_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partnet::{init_params, AttentionKind};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(values: &[f64]) -> Embedding {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Embedding::new(values.iter().map(|v| v / n).collect())
    }

    #[test]
    fn probe_in_gallery_ranks_itself_first() {
        let probe = unit(&[1.0, 0.2]);
        let gallery = vec![unit(&[0.0, 1.0]), probe.clone(), unit(&[-1.0, 0.0])];
        let order = rank_gallery(&probe, &gallery);
        assert_eq!(order[0], 1);
        assert_eq!(
            squared_euclidean(&probe, &gallery[order[0]]).unwrap(),
            0.0
        );
    }

    #[test]
    fn equidistant_entries_break_by_index() {
        let probe = unit(&[1.0, 0.0]);
        let e = unit(&[0.0, 1.0]);
        let gallery = vec![e.clone(), e.clone(), e];
        assert_eq!(rank_gallery(&probe, &gallery), vec![0, 1, 2]);
    }

    #[test]
    fn three_entry_hand_case() {
        // Distances 0.5 / 0.1 / 0.9 -> order (2nd, 1st, 3rd).
        let probe = unit(&[1.0, 0.0, 0.0]);
        let at_sq_dist = |d: f64| {
            // Unit vector at squared distance d from probe: cos = 1 - d/2.
            let cos: f64 = 1.0 - d / 2.0;
            let sin = (1.0 - cos * cos).sqrt();
            Embedding::new(vec![cos, sin, 0.0])
        };
        let gallery = vec![at_sq_dist(0.5), at_sq_dist(0.1), at_sq_dist(0.9)];
        assert_eq!(rank_gallery(&probe, &gallery), vec![1, 0, 2]);
    }

    #[test]
    fn cmc_hand_cases() {
        // Every probe hits at rank 1.
        let all_first: Vec<Vec<bool>> = vec![vec![true, false], vec![true, true]];
        let (values, excluded) = cmc(&all_first, 2);
        assert_eq!(values, vec![1.0, 1.0]);
        assert_eq!(excluded, 0);

        // First hits at ranks 2 and 4.
        let lists = vec![
            vec![false, true, false, false],
            vec![false, false, false, true],
        ];
        let (values, _) = cmc(&lists, 4);
        assert_eq!(values, vec![0.0, 0.5, 0.5, 1.0]);

        // Single probe, hit at rank 3, curve cut at R=2.
        let lists = vec![vec![false, false, true]];
        let (values, _) = cmc(&lists, 2);
        assert_eq!(values, vec![0.0, 0.0]);
    }

    #[test]
    fn cmc_excludes_probes_without_relevant() {
        let lists = vec![vec![false, false], vec![true, false]];
        let (values, excluded) = cmc(&lists, 2);
        assert_eq!(excluded, 1);
        assert_eq!(values, vec![1.0, 1.0]);
    }

    #[test]
    fn map_hand_cases() {
        // Single relevant at rank 1.
        assert_eq!(mean_ap(&[vec![true]]).0, 1.0);
        // Relevant at ranks 1 and 3: (1/1 + 2/3)/2.
        let (v, _) = mean_ap(&[vec![true, false, true]]);
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // Relevant at rank 2 only.
        assert_eq!(mean_ap(&[vec![false, true]]).0, 0.5);
    }

    /// Independent brute-force implementations used by the oracle tests:
    /// both rescan prefixes instead of tracking first hits / cumulative
    /// counts, but perform divisions in the same order.
    fn cmc_brute(relevance: &[Vec<bool>], max_rank: usize) -> (Vec<f64>, usize) {
        let scored: Vec<&Vec<bool>> =
            relevance.iter().filter(|l| l.contains(&true)).collect();
        let excluded = relevance.len() - scored.len();
        let mut out = vec![0.0; max_rank];
        if scored.is_empty() {
            return (out, excluded);
        }
        for n in 1..=max_rank {
            let mut hits = 0usize;
            for list in &scored {
                if list.iter().take(n).any(|&r| r) {
                    hits += 1;
                }
            }
            out[n - 1] = hits as f64 / scored.len() as f64;
        }
        (out, excluded)
    }

    fn map_brute(relevance: &[Vec<bool>]) -> f64 {
        let mut aps = Vec::new();
        for list in relevance {
            let relevant = list.iter().filter(|&&r| r).count();
            if relevant == 0 {
                continue;
            }
            let mut ap = 0.0;
            for pos in 0..list.len() {
                if list[pos] {
                    let in_prefix = list[..=pos].iter().filter(|&&r| r).count();
                    ap += in_prefix as f64 / (pos + 1) as f64;
                }
            }
            aps.push(ap / relevant as f64);
        }
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    #[test]
    fn metrics_match_brute_force_exactly_on_random_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let probes = rng.random_range(1..5usize);
            let gallery = rng.random_range(1..9usize);
            let relevance: Vec<Vec<bool>> = (0..probes)
                .map(|_| (0..gallery).map(|_| rng.random_bool(0.3)).collect())
                .collect();
            let max_rank = rng.random_range(1..=gallery);
            let (a, ea) = cmc(&relevance, max_rank);
            let (b, eb) = cmc_brute(&relevance, max_rank);
            assert_eq!(a, b, "CMC mismatch on {relevance:?}");
            assert_eq!(ea, eb);
            let (ma, _) = mean_ap(&relevance);
            let mb = map_brute(&relevance);
            assert_eq!(ma, mb, "mAP mismatch on {relevance:?}");
        }
    }

    #[test]
    fn cmc_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        for _ in 0..200 {
            let relevance: Vec<Vec<bool>> = (0..rng.random_range(1..6usize))
                .map(|_| (0..8).map(|_| rng.random_bool(0.4)).collect())
                .collect();
            let (values, _) = cmc(&relevance, 8);
            for w in values.windows(2) {
                assert!(w[1] >= w[0]);
            }
            assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (m, _) = mean_ap(&relevance);
            assert!((0.0..=1.0).contains(&m));
            // When every probe has a match, the curve reaches 1 at R_max.
            if relevance.iter().all(|l| l.contains(&true)) {
                assert_eq!(*values.last().unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn rank_gallery_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let probe = unit(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let gallery: Vec<Embedding> = (0..10)
            .map(|_| unit(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let mut order = rank_gallery(&probe, &gallery);
        order.sort_unstable();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_weight_detector_exports_mid_gray() {
        let bcfg = BackboneConfig::default();
        let pcfg = PartNetConfig::partnet(2, 64, AttentionKind::Sigmoid);
        let mut params = init_params(&bcfg, &pcfg, 3).unwrap();
        for k in 0..2 {
            for v in params
                .get_mut(&format!("detector.{k}.weight"))
                .unwrap()
                .data_mut()
            {
                *v = 0.0;
            }
        }
        let ds = crate::synthdata::generate(&crate::synthdata::GenerateConfig {
            identities: 1,
            samples_per_identity: 2,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_part_maps(&params, &bcfg, &pcfg, &ds, &[0], dir.path()).unwrap();
        // K map files plus one montage per image.
        assert_eq!(files.len(), 3);
        let pgm = std::fs::read(&files[0]).unwrap();
        let body = &pgm[pgm.len() - 32 * 16..];
        assert!(body.iter().all(|&b| b == 128), "sigmoid(0) -> 128");
    }

    #[test]
    fn exported_maps_roundtrip_within_quantization() {
        let bcfg = BackboneConfig::default();
        let pcfg = PartNetConfig::partnet(2, 64, AttentionKind::Sigmoid);
        let params = init_params(&bcfg, &pcfg, 4).unwrap();
        let ds = crate::synthdata::generate(&crate::synthdata::GenerateConfig {
            identities: 1,
            samples_per_identity: 1,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_part_maps(&params, &bcfg, &pcfg, &ds, &[0], dir.path()).unwrap();

        let feature = backbone_forward(&ds.samples[0].image, &params, &bcfg).unwrap();
        let map = detect_part_map(&feature, 0, &params, AttentionKind::Sigmoid).unwrap();
        let pgm = std::fs::read(dir.path().join("img0000_part0.pgm")).unwrap();
        let body = &pgm[pgm.len() - 32 * 16..];
        // Nearest upsample: image pixel (y,x) shows map cell (y*4/32, x*2/16).
        for y in 0..32 {
            for x in 0..16 {
                let v = body[y * 16 + x] as f64 / 255.0;
                let expect = map.value(y * 4 / 32, x * 2 / 16);
                assert!((v - expect).abs() <= 1.0 / 255.0 + 1e-9);
            }
        }
    }
}
