//! Procedural labeled "person" images with ground-truth part masks.
//!
//! Each identity is a color palette (head, torso, legs), body proportions and
//! a texture seed. Samples draw the figure into a tall box under nuisance
//! transforms: translation, scale, brightness jitter and background clutter.
//! The camera id names a nuisance bucket (a systematic bias inside the
//! jitter ranges), giving the probe/gallery protocol a cross-view flavor.
//! Ground-truth masks live at feature-map resolution so the fixed-mask head
//! can consume them directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::partnet::PartMap;

pub const PART_NAMES: [&str; 3] = ["head", "torso", "legs"];

/// Nuisance magnitudes. Camera biases scale with these, so zeroing a field
/// removes the corresponding variation entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    /// Max |translation| as a fraction of the box extent.
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Max |brightness jitter| as a fraction of 1.
    pub brightness: f64,
    /// Background noise amplitude.
    pub clutter: f64,
    /// Per-column jitter of the part boundaries, as a fraction of body
    /// height (clothing raggedness).
    pub boundary_jitter: f64,
    /// Number of nuisance buckets (camera ids).
    pub cameras: u32,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            translate_frac: 0.25,
            scale_min: 0.7,
            scale_max: 1.0,
            brightness: 0.15,
            clutter: 0.08,
            boundary_jitter: 0.06,
            cameras: 2,
        }
    }
}

impl NuisanceConfig {
    /// No variation at all: samples of an identity become identical.
    pub fn none() -> Self {
        NuisanceConfig {
            translate_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            brightness: 0.0,
            clutter: 0.0,
            boundary_jitter: 0.0,
            cameras: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Ground-truth mask resolution (the backbone's feature map extents).
    pub mask_h: usize,
    pub mask_w: usize,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            identities: 50,
            samples_per_identity: 12,
            image_h: 32,
            image_w: 16,
            mask_h: 4,
            mask_w: 2,
            nuisance: NuisanceConfig::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthIdentity {
    pub id: u32,
    /// RGB colors for head, torso, legs.
    pub palette: [[f64; 3]; 3],
    /// Fractions of body height for head and torso (legs take the rest).
    pub proportions: [f64; 2],
    pub texture_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub translate_y: f64,
    pub translate_x: f64,
    pub scale: f64,
    pub flip: bool,
    pub brightness: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// [H, W, 3] image with values in [0, 1].
    pub image: Tensor,
    pub identity: u32,
    pub camera: u32,
    /// Binary, disjoint ground-truth masks (head, torso, legs).
    pub masks: Vec<PartMap>,
    pub transform: TransformRecord,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<SynthSample>,
    pub image_h: usize,
    pub image_w: usize,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by identity, identities ascending.
    pub fn indices_by_identity(&self) -> Vec<(u32, Vec<usize>)> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        map.into_iter().collect()
    }

    pub fn identity_count(&self) -> usize {
        self.indices_by_identity().len()
    }

    /// New dataset containing only samples of the given identities.
    pub fn filter_identities(&self, ids: &[u32]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.identity))
                .cloned()
                .collect(),
            ..*self
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, identity: u32, index: usize) -> u64 {
    splitmix(splitmix(seed) ^ ((identity as u64) << 24 | index as u64))
}

/// Deterministic texture field in [-1, 1], in body coordinates so it moves
/// with the figure.
fn texture(seed: u64, y: i64, x: i64) -> f64 {
    let h = splitmix(seed ^ ((y as u64) << 32) ^ (x as u64 & 0xFFFF_FFFF));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

const MIN_CHANNEL_DIST: f64 = 32.0 / 255.0;

fn chebyshev(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Identities wear colors drawn from one shared pool, so many identities
/// coincide in their color multiset and differ only in which part wears
/// which color. On top of that, identities come in explicit twin pairs with
/// torso and legs swapped over equal areas. Both constructions leave the
/// figure's first-order color statistics uninformative and make the spatial
/// arrangement of parts the discriminative signal.
fn sample_identities(cfg: &GenerateConfig) -> Result<(Vec<SynthIdentity>, Vec<[f64; 3]>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));

    // Shared color pool, mutually separated in channel distance.
    let pool_size = 10usize.max((cfg.identities as f64).sqrt().ceil() as usize);
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(pool_size);
    let mut tries = 0;
    while colors.len() < pool_size {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Data("could not sample a separated color pool".into()));
        }
        let cand: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.95));
        if colors.iter().all(|c| chebyshev(c, &cand) >= MIN_CHANNEL_DIST) {
            colors.push(cand);
        }
    }

    let mut identities: Vec<SynthIdentity> = Vec::with_capacity(cfg.identities);
    let mut seen: Vec<[usize; 3]> = Vec::new();
    while identities.len() < cfg.identities {
        // Guard stays ahead of the loop so pathological configs terminate.
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Data(
                "could not sample distinct color assignments; too many identities".into(),
            ));
        }
        // Distinct (head, torso, legs) assignment plus its torso/legs twin.
        let head = rng.random_range(0..pool_size);
        let torso = rng.random_range(0..pool_size);
        let legs = rng.random_range(0..pool_size);
        if head == torso || torso == legs || head == legs {
            continue;
        }
        let assignment = [head, torso, legs];
        let twin = [head, legs, torso];
        if seen.contains(&assignment) || seen.contains(&twin) {
            continue;
        }
        seen.push(assignment);
        seen.push(twin);

        // Head fraction varies per pair; torso and legs split the rest
        // evenly so the swapped twin has identical color areas.
        let head_frac = rng.random_range(0.18..0.22);
        let proportions = [head_frac, (1.0 - head_frac) / 2.0];
        for idx in [assignment, twin] {
            if identities.len() == cfg.identities {
                break;
            }
            identities.push(SynthIdentity {
                id: identities.len() as u32,
                palette: [colors[idx[0]], colors[idx[1]], colors[idx[2]]],
                proportions,
                texture_seed: rng.random(),
            });
        }
    }
    Ok((identities, colors))
}

/// Per-sample ragged part boundaries: each image column shifts the
/// head/torso and torso/legs boundaries by a fraction of body height.
#[derive(Debug, Clone)]
struct BoundaryJitter {
    head: Vec<f64>,
    torso: Vec<f64>,
}

impl BoundaryJitter {
    fn none(width: usize) -> Self {
        BoundaryJitter {
            head: vec![0.0; width],
            torso: vec![0.0; width],
        }
    }

    fn draw(width: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        BoundaryJitter {
            head: (0..width).map(|_| rng.random_range(-amplitude..=amplitude)).collect(),
            torso: (0..width).map(|_| rng.random_range(-amplitude..=amplitude)).collect(),
        }
    }
}

/// Which part, if any, claims pixel (y, x) under the sample's transform.
/// Returns the part index and body-local coordinates for texturing.
fn part_at(
    y: usize,
    x: usize,
    cfg: &GenerateConfig,
    identity: &SynthIdentity,
    t: &TransformRecord,
    jitter: &BoundaryJitter,
) -> Option<(usize, i64, i64)> {
    let h = cfg.image_h as f64;
    let w = cfg.image_w as f64;
    let box_h = t.scale * 0.85 * h;
    let box_w = t.scale * 0.55 * w;
    let top = h / 2.0 + t.translate_y * h - box_h / 2.0;
    let left = w / 2.0 + t.translate_x * w - box_w / 2.0;

    let fy = (y as f64 + 0.5 - top) / box_h;
    let fx = (x as f64 + 0.5 - left) / box_w;
    if !(0.0..1.0).contains(&fy) || !(0.0..1.0).contains(&fx) {
        return None;
    }
    let head_end = identity.proportions[0] + jitter.head[x];
    let torso_end = identity.proportions[0] + identity.proportions[1] + jitter.torso[x];
    // Torso and legs share the same width so a color swap between them
    // preserves the figure's overall color statistics.
    let (part, half_width) = if fy < head_end {
        (0, 0.28)
    } else if fy < torso_end {
        (1, 0.46)
    } else {
        (2, 0.46)
    };
    if (fx - 0.5).abs() > half_width {
        return None;
    }
    let by = (fy * 64.0) as i64;
    let bx = ((fx - 0.5) * 32.0) as i64;
    Some((part, by, bx))
}

fn render_sample(
    cfg: &GenerateConfig,
    identity: &SynthIdentity,
    colors: &[[f64; 3]],
    index: usize,
) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, identity.id, index));
    let nz = &cfg.nuisance;
    let camera = (index as u32) % nz.cameras.max(1);
    // Bucket bias sits inside the jitter budget: bias up to 20% of the
    // range, jitter up to 80%, so totals stay within the stated bounds.
    let bias = if nz.cameras > 1 {
        2.0 * camera as f64 / (nz.cameras - 1) as f64 - 1.0
    } else {
        0.0
    };

    let translate_y = nz.translate_frac * (0.8 * rng.random_range(-1.0..1.0));
    let translate_x = nz.translate_frac * (0.8 * rng.random_range(-1.0..1.0) + 0.2 * bias);
    let scale = rng.random_range(nz.scale_min..=nz.scale_max);
    let brightness = 1.0 + nz.brightness * (0.8 * rng.random_range(-1.0..1.0) + 0.2 * bias);
    let transform = TransformRecord {
        translate_y,
        translate_x,
        scale,
        flip: false,
        brightness,
    };

    let (h, w) = (cfg.image_h, cfg.image_w);
    let jitter = if nz.boundary_jitter > 0.0 {
        BoundaryJitter::draw(w, nz.boundary_jitter, &mut rng)
    } else {
        BoundaryJitter::none(w)
    };

    // Background clutter: distractor rectangles wearing the same color pool
    // as the figures, plus a jittered base tone. Frame-pooling heads cannot
    // exclude the distractors, so their global statistics pick up random
    // amounts of figure-like color; masked heads can learn to ignore them.
    // Clutter 0 degenerates to a fixed mid-gray background.
    let strength = (nz.clutter * 10.0).min(0.85);
    let mut bg_base = [0.45; 3];
    for c in &mut bg_base {
        *c += strength * rng.random_range(-0.15..0.15);
    }
    let n_rects = if strength > 0.0 && !colors.is_empty() { 3 } else { 0 };
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..n_rects)
        .map(|_| {
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            let rh = rng.random_range(h / 5..h / 2 + 1);
            let rw = rng.random_range(w / 5..w / 2 + 1);
            let shade = rng.random_range(0.8..1.0);
            let color = colors[rng.random_range(0..colors.len())].map(|c| c * shade);
            (y0, x0, rh, rw, color)
        })
        .collect();

    let mut data = vec![0.0; h * w * 3];
    let mut part_of_pixel = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let base = match part_at(y, x, cfg, identity, &transform, &jitter) {
                Some((part, by, bx)) => {
                    part_of_pixel[y * w + x] = part;
                    let tex = 1.0 + 0.08 * texture(identity.texture_seed, by, bx);
                    [
                        identity.palette[part][0] * tex,
                        identity.palette[part][1] * tex,
                        identity.palette[part][2] * tex,
                    ]
                }
                None => {
                    let mut px = bg_base;
                    for &(y0, x0, rh, rw, color) in &rects {
                        if y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw {
                            for (p, c) in px.iter_mut().zip(&color) {
                                *p = (1.0 - strength) * *p + strength * c;
                            }
                        }
                    }
                    px
                }
            };
            for c in 0..3 {
                let noise = nz.clutter * rng.random_range(-1.0..1.0);
                data[(y * w + x) * 3 + c] = (base[c] * brightness + noise).clamp(0.0, 1.0);
            }
        }
    }

    // Ground-truth masks at feature-map resolution: a cell belongs to the
    // part covering at least half of its pixels.
    let row_bands = band_ranges(h, cfg.mask_h)?;
    let col_bands = band_ranges(w, cfg.mask_w)?;
    let mut masks = vec![vec![0.0; cfg.mask_h * cfg.mask_w]; 3];
    for (my, rows) in row_bands.iter().enumerate() {
        for (mx, cols) in col_bands.iter().enumerate() {
            let mut counts = [0usize; 3];
            let mut area = 0usize;
            for y in rows.clone() {
                for x in cols.clone() {
                    area += 1;
                    let p = part_of_pixel[y * w + x];
                    if p != usize::MAX {
                        counts[p] += 1;
                    }
                }
            }
            if let Some((best, &n)) = counts.iter().enumerate().max_by_key(|(_, &n)| n) {
                if 2 * n >= area && n > 0 {
                    masks[best][my * cfg.mask_w + mx] = 1.0;
                }
            }
        }
    }
    let masks = masks
        .into_iter()
        .map(|values| PartMap::new(cfg.mask_h, cfg.mask_w, values))
        .collect::<Result<Vec<PartMap>>>()?;

    Ok(SynthSample {
        image: Tensor::new(vec![h, w, 3], data)?,
        identity: identity.id,
        camera,
        masks,
        transform,
    })
}

fn band_ranges(extent: usize, count: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if count == 0 || count > extent {
        return Err(Error::InvalidConfig(format!(
            "cannot split {extent} pixels into {count} mask cells"
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

/// Deterministic dataset generation; parallel over samples with per-sample
/// derived seeds.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.identities == 0 || cfg.samples_per_identity == 0 {
        return Err(Error::InvalidConfig(
            "identities and samples per identity must be >= 1".into(),
        ));
    }
    let (identities, colors) = sample_identities(cfg)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.identities)
        .flat_map(|id| (0..cfg.samples_per_identity).map(move |idx| (id, idx)))
        .collect();
    let samples: Vec<SynthSample> = jobs
        .par_iter()
        .map(|&(id, idx)| render_sample(cfg, &identities[id], &colors, idx))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        image_h: cfg.image_h,
        image_w: cfg.image_w,
        mask_h: cfg.mask_h,
        mask_w: cfg.mask_w,
    })
}

// ---- disk formats ----

fn image_to_rgb8(image: &Tensor) -> image::RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let off = (y as usize * w + x as usize) * 3;
        image::Rgb(std::array::from_fn(|c| {
            (image.data()[off + c] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn rgb8_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let mut data = vec![0.0; (w * h * 3) as usize];
    for (x, y, px) in img.enumerate_pixels() {
        let off = (y as usize * w as usize + x as usize) * 3;
        for c in 0..3 {
            data[off + c] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("consistent dims")
}

/// Binary PGM (P5) writer; tiny, deterministic bytes.
pub fn write_pgm(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(bytes.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn sample_filename(identity: u32, camera: u32, index: usize) -> String {
    format!("{identity:04}_c{camera}_{index:02}.png")
}

/// Writes images, mask sidecars (`<stem>.mask<p>.pgm`) and `manifest.csv`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("filename,identity,camera\n");
    let mut per_id_index: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for sample in &dataset.samples {
        let idx_slot = per_id_index.entry((sample.identity, sample.camera)).or_insert(0);
        let index = *idx_slot;
        *idx_slot += 1;
        let name = sample_filename(sample.identity, sample.camera, index);
        image_to_rgb8(&sample.image).save(dir.join(&name))?;
        let stem = name.trim_end_matches(".png");
        for (p, mask) in sample.masks.iter().enumerate() {
            let bytes: Vec<u8> = mask
                .values()
                .iter()
                .map(|&v| if v > 0.5 { 255 } else { 0 })
                .collect();
            write_pgm(
                &dir.join(format!("{stem}.mask{p}.pgm")),
                mask.height(),
                mask.width(),
                &bytes,
            )?;
        }
        manifest.push_str(&format!("{name},{},{}\n", sample.identity, sample.camera));
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

fn parse_sample_name(stem: &str) -> Option<(u32, u32)> {
    let mut parts = stem.split('_');
    let identity: u32 = parts.next()?.parse().ok()?;
    let camera: u32 = parts.next()?.strip_prefix('c')?.parse().ok()?;
    let _index = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    Some((identity, camera))
}

fn resize_nearest(image: &Tensor, th: usize, tw: usize) -> Tensor {
    let (sh, sw) = (image.shape()[0], image.shape()[1]);
    if sh == th && sw == tw {
        return image.clone();
    }
    let mut data = vec![0.0; th * tw * 3];
    for y in 0..th {
        let sy = (y * sh) / th;
        for x in 0..tw {
            let sx = (x * sw) / tw;
            for c in 0..3 {
                data[(y * tw + x) * 3 + c] = image.data()[(sy * sw + sx) * 3 + c];
            }
        }
    }
    Tensor::new(vec![th, tw, 3], data).expect("consistent dims")
}

/// Loads a directory of `<identity>_c<camera>_<index>.png|.pgm` images.
/// Mixed extents are resized (nearest) to the target size; unparseable
/// filenames are skipped with a warning; an empty result is an error.
pub fn load_dir(dir: &Path, target_h: usize, target_w: usize) -> Result<Dataset> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| {
            (n.ends_with(".png") || n.ends_with(".pgm"))
                && !n.contains(".mask")
                && n != "manifest.csv"
        })
        .collect();
    names.sort();

    let mut samples = Vec::new();
    let mut mask_dims = (0usize, 0usize);
    for name in names {
        let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(&name);
        let Some((identity, camera)) = parse_sample_name(stem) else {
            eprintln!("warning: skipping unparseable filename {name:?}");
            continue;
        };
        let img = image::open(dir.join(&name))?.into_rgb8();
        let image = resize_nearest(&rgb8_to_tensor(&img), target_h, target_w);

        let mut masks = Vec::new();
        loop {
            let mask_path = dir.join(format!("{stem}.mask{}.pgm", masks.len()));
            if !mask_path.exists() {
                break;
            }
            let (mh, mw, bytes) = read_pgm(&mask_path)?;
            mask_dims = (mh, mw);
            let values = bytes.iter().map(|&b| f64::from(b > 127)).collect();
            masks.push(PartMap::new(mh, mw, values)?);
        }

        samples.push(SynthSample {
            image,
            identity,
            camera,
            masks,
            transform: TransformRecord {
                translate_y: 0.0,
                translate_x: 0.0,
                scale: 1.0,
                flip: false,
                brightness: 1.0,
            },
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no usable images in {}",
            dir.display()
        )));
    }
    Ok(Dataset {
        samples,
        image_h: target_h,
        image_w: target_w,
        mask_h: mask_dims.0,
        mask_w: mask_dims.1,
    })
}

// ---- splits ----

/// Identity-disjoint train/test split with probe/gallery assignment:
/// per test identity, one probe per camera bucket, the rest gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    /// Sample indices into the full dataset.
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
}

pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_frac} outside [0,1]"
        )));
    }
    let by_id = dataset.indices_by_identity();
    let mut ids: Vec<u32> = by_id.iter().map(|(id, _)| *id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5917_AC3D));
    ids.shuffle(&mut rng);
    let n_train = (train_frac * ids.len() as f64).round() as usize;
    let mut train_ids: Vec<u32> = ids[..n_train].to_vec();
    let mut test_ids: Vec<u32> = ids[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    for id in &test_ids {
        let count = by_id.iter().find(|(i, _)| i == id).map_or(0, |(_, v)| v.len());
        if count < 2 {
            return Err(Error::Data(format!(
                "test identity {id} has {count} samples; the protocol needs at least 2"
            )));
        }
    }

    let (probes, gallery) = probe_gallery(dataset, &test_ids, &mut rng);
    Ok(SplitSpec {
        train_ids,
        test_ids,
        probes,
        gallery,
    })
}

/// Probe/gallery assignment over the given identities: one probe per camera
/// bucket per identity, keeping at least one gallery sample per identity.
pub fn probe_gallery(
    dataset: &Dataset,
    ids: &[u32],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut probes = Vec::new();
    let mut gallery = Vec::new();
    for (id, indices) in dataset.indices_by_identity() {
        if !ids.contains(&id) {
            continue;
        }
        let mut cameras: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &indices {
            cameras.entry(dataset.samples[i].camera).or_default().push(i);
        }
        let mut chosen = Vec::new();
        for bucket in cameras.values() {
            chosen.push(bucket[rng.random_range(0..bucket.len())]);
        }
        // Never strip an identity of its entire gallery presence.
        while chosen.len() >= indices.len() && chosen.len() > 1 {
            chosen.pop();
        }
        for &i in &indices {
            if chosen.contains(&i) {
                probes.push(i);
            } else {
                gallery.push(i);
            }
        }
    }
    (probes, gallery)
}
