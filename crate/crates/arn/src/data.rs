//! Synthetic cross-domain identity data and directory-based dataset loading.
//!
//! The generator builds a desk-scale stand-in for a cross-dataset
//! re-identification benchmark: each identity is a fixed random spatial
//! pattern (its content signature), each domain applies a fixed style
//! transform (color affine map plus a stripe texture) of configurable
//! strength, and each image passes through one of two "cameras" (a small
//! translation plus a brightness shift) and per-image jitter and noise.
//! Identity content is domain-invariant while style is domain-specific,
//! which is exactly the structure the shared/private decomposition is meant
//! to separate. Source and target identity sets are disjoint.
//!
//! The directory format is `{identity}_c{camera}_{index}.png`, one file per
//! image, split into `train_source/`, `train_target/`, `query/`, `gallery/`.

use crate::error::{ArnError, Result};
use crate::rng::derive_stream;
use crate::samples::{DatasetSplit, Domain, Image, LabeledSample};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Synthetic dataset shape and difficulty knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_source_ids: usize,
    pub num_target_ids: usize,
    /// Images per identity in each domain's training set; the first image of
    /// each target identity doubles as its query.
    pub images_per_id: usize,
    pub image_shape: (usize, usize, usize),
    /// 0 disables the domain gap entirely; 1 is a strong gap.
    pub style_strength: f64,
    pub noise_std: f64,
    pub seed: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_source_ids: 20,
            num_target_ids: 20,
            images_per_id: 10,
            image_shape: (32, 32, 3),
            style_strength: 0.6,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Standard normal draw (Box-Muller).
fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Number of texture patterns in each domain's background family.
const TEXTURE_FAMILY: usize = 6;
/// Per-image texture coefficient scale relative to `style_strength`.
const TEXTURE_COEFF: f64 = 0.22;

/// Fixed per-domain style: a color affine map, an axis-aligned stripe, and a
/// family of background texture patterns. The affine map and stripe are
/// constant within the domain; each image additionally receives a random
/// mixture of the domain's texture family, so the domain-specific nuisance
/// spans a per-image subspace rather than a constant offset. Everything
/// scales with `style_strength`.
struct DomainStyle {
    /// `color[c][c']` mixes input channel `c'` into output channel `c`.
    color: Vec<Vec<f64>>,
    shift: Vec<f64>,
    stripe_axis_is_x: bool,
    stripe_freq: f64,
    stripe_phase: f64,
    stripe_amp: f64,
    /// Low-resolution background patterns, upsampled at render time.
    textures: Vec<Image>,
    texture_scale: f64,
}

impl DomainStyle {
    fn draw(config: &SynthConfig, domain: Domain) -> Self {
        let strength = config.style_strength;
        let (h, w, channels) = config.image_shape;
        let mut rng = derive_stream(config.seed, &format!("style/{domain}"));
        let mut color = vec![vec![0.0; channels]; channels];
        for (c, row) in color.iter_mut().enumerate() {
            for (c2, v) in row.iter_mut().enumerate() {
                let base = if c == c2 { 1.0 } else { 0.0 };
                *v = base + strength * rng.gen_range(-0.35..0.35);
            }
        }
        let shift = (0..channels)
            .map(|_| strength * rng.gen_range(-0.25..0.25))
            .collect();
        let stripe_axis_is_x = domain == Domain::Source;
        let stripe_freq = rng.gen_range(2.0..4.0);
        let stripe_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let stripe_amp = strength * rng.gen_range(0.10..0.18);
        let gh = (h / 4).max(2);
        let gw = (w / 4).max(2);
        let textures = (0..TEXTURE_FAMILY)
            .map(|_| {
                let grid = Array3::from_shape_fn((channels, gh, gw), |_| rng.gen_range(-1.0..1.0));
                Array3::from_shape_fn((channels, h, w), |(ch, y, x)| {
                    grid[[ch, y * gh / h, x * gw / w]]
                })
            })
            .collect();
        DomainStyle {
            color,
            shift,
            stripe_axis_is_x,
            stripe_freq,
            stripe_phase,
            stripe_amp,
            textures,
            texture_scale: TEXTURE_COEFF * strength,
        }
    }
}

/// Fixed per-camera nuisance: translation plus brightness shift.
#[derive(Clone, Copy)]
struct CameraJitter {
    dx: isize,
    dy: isize,
    brightness: f64,
}

fn draw_cameras(config: &SynthConfig, domain: Domain) -> [CameraJitter; 2] {
    let mut rng = derive_stream(config.seed, &format!("cameras/{domain}"));
    let cam0 = CameraJitter {
        dx: 0,
        dy: 0,
        brightness: rng.gen_range(-0.04..0.04),
    };
    let cam1 = CameraJitter {
        dx: rng.gen_range(2..4),
        dy: rng.gen_range(1..3),
        brightness: rng.gen_range(-0.14..-0.06),
    };
    [cam0, cam1]
}

/// Identity content signature: a low-resolution random pattern upsampled to
/// the image grid, constant across domains and cameras.
fn content_pattern(config: &SynthConfig, token: u32) -> Image {
    let (h, w, c) = config.image_shape;
    let mut rng = derive_stream(config.seed, &format!("content/{token}"));
    let gh = (h / 4).max(2);
    let gw = (w / 4).max(2);
    let grid = Array3::from_shape_fn((c, gh, gw), |_| rng.gen_range(0.15..0.85));
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| grid[[ch, y * gh / h, x * gw / w]])
}

fn clamp_pixel(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Render one image: translate the content, apply the domain color map and
/// stripe, add this image's mixture of the domain texture family, the camera
/// and per-image brightness, then noise, then clamp to `[0, 1]`.
fn render(
    config: &SynthConfig,
    content: &Image,
    style: &DomainStyle,
    camera: CameraJitter,
    instance_rng: &mut ChaCha12Rng,
) -> Image {
    let (h, w, channels) = config.image_shape;
    let jitter_dx = camera.dx + instance_rng.gen_range(-1..=1);
    let jitter_dy = camera.dy + instance_rng.gen_range(-1..=1);
    let brightness = camera.brightness + instance_rng.gen_range(-0.03..0.03);
    let coefficients: Vec<f64> = style
        .textures
        .iter()
        .map(|_| style.texture_scale * gaussian(instance_rng))
        .collect();

    let mut out = Array3::zeros((channels, h, w));
    for y in 0..h {
        let sy = (y as isize - jitter_dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let sx = (x as isize - jitter_dx).clamp(0, w as isize - 1) as usize;
            let stripe_coord = if style.stripe_axis_is_x { x } else { y } as f64;
            let stripe = style.stripe_amp
                * (std::f64::consts::TAU * style.stripe_freq * stripe_coord
                    / (if style.stripe_axis_is_x { w } else { h }) as f64
                    + style.stripe_phase)
                    .sin();
            for c in 0..channels {
                let mut v = style.shift[c];
                for (c2, weight) in style.color[c].iter().enumerate() {
                    v += weight * content[[c2, sy, sx]];
                }
                for (coeff, texture) in coefficients.iter().zip(&style.textures) {
                    v += coeff * texture[[c, y, x]];
                }
                v += stripe + brightness + config.noise_std * gaussian(instance_rng);
                out[[c, y, x]] = clamp_pixel(v);
            }
        }
    }
    out
}

fn validate_synth(config: &SynthConfig) -> Result<()> {
    if config.images_per_id < 2 {
        return Err(ArnError::Config(
            "images_per_id: must be at least 2 (no positive pairs or gallery matches otherwise)"
                .into(),
        ));
    }
    if config.num_source_ids == 0 || config.num_target_ids == 0 {
        return Err(ArnError::Config(
            "num_source_ids/num_target_ids: must be positive".into(),
        ));
    }
    let (h, w, c) = config.image_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(ArnError::Config("image_shape: dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.style_strength) {
        return Err(ArnError::Config("style_strength: must lie in [0, 1]".into()));
    }
    if config.noise_std < 0.0 {
        return Err(ArnError::Config("noise_std: must be nonnegative".into()));
    }
    Ok(())
}

/// Identity tokens: source ids first, target ids after, so the two sets are
/// disjoint by construction.
fn target_token(config: &SynthConfig, target_index: usize) -> u32 {
    (config.num_source_ids + target_index) as u32
}

fn generate_domain(
    config: &SynthConfig,
    domain: Domain,
    stream_label: &str,
) -> Vec<LabeledSample> {
    let style = DomainStyle::draw(config, domain);
    let cameras = draw_cameras(config, domain);
    let ids = match domain {
        Domain::Source => config.num_source_ids,
        Domain::Target => config.num_target_ids,
    };
    let mut rng = derive_stream(config.seed, stream_label);
    let mut samples = Vec::with_capacity(ids * config.images_per_id);
    for index in 0..ids {
        let token = match domain {
            Domain::Source => index as u32,
            Domain::Target => target_token(config, index),
        };
        let content = content_pattern(config, token);
        for image_index in 0..config.images_per_id {
            let camera = (image_index % 2) as u32;
            let image = render(config, &content, &style, cameras[camera as usize], &mut rng);
            samples.push(LabeledSample::new(image, token, camera, domain));
        }
    }
    samples
}

/// Generate a full cross-domain split.
///
/// The first image of every target identity (always camera 0) is the query;
/// the remaining images form the gallery, so each query has at least one
/// cross-camera match. Target train images and query/gallery images are the
/// same pool (the target set is unlabeled during training and evaluated in
/// place). Deterministic in `config.seed`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetSplit> {
    validate_synth(config)?;
    let train_source = generate_domain(config, Domain::Source, "instances/source");
    let train_target = generate_domain(config, Domain::Target, "instances/target");

    let mut query = Vec::with_capacity(config.num_target_ids);
    let mut gallery = Vec::with_capacity(train_target.len() - config.num_target_ids);
    for (i, sample) in train_target.iter().enumerate() {
        if i % config.images_per_id == 0 {
            query.push(sample.clone());
        } else {
            gallery.push(sample.clone());
        }
    }
    Ok(DatasetSplit {
        train_source,
        train_target,
        query,
        gallery,
    })
}

/// Extra target-domain images drawn from the same identities, styles, and
/// cameras but a fresh instance stream. Never part of the training split.
pub fn target_holdout(config: &SynthConfig, images_per_id: usize) -> Result<Vec<LabeledSample>> {
    validate_synth(config)?;
    let style = DomainStyle::draw(config, Domain::Target);
    let cameras = draw_cameras(config, Domain::Target);
    let mut rng = derive_stream(config.seed, "instances/target-holdout");
    let mut samples = Vec::with_capacity(config.num_target_ids * images_per_id);
    for index in 0..config.num_target_ids {
        let token = target_token(config, index);
        let content = content_pattern(config, token);
        for image_index in 0..images_per_id {
            let camera = (image_index % 2) as u32;
            let image = render(config, &content, &style, cameras[camera as usize], &mut rng);
            samples.push(LabeledSample::new(image, token, camera, Domain::Target));
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Identity/image/camera counts for one sample list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainStats {
    pub identities: usize,
    pub images: usize,
    /// camera id -> image count
    pub per_camera: BTreeMap<u32, usize>,
}

fn domain_stats(samples: &[LabeledSample]) -> DomainStats {
    let mut ids = std::collections::BTreeSet::new();
    let mut per_camera = BTreeMap::new();
    for s in samples {
        ids.insert(s.identity());
        *per_camera.entry(s.camera).or_insert(0) += 1;
    }
    DomainStats {
        identities: ids.len(),
        images: samples.len(),
        per_camera,
    }
}

/// Per-split dataset summary in the shape of a per-camera sample-count table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetStats {
    pub train_source: DomainStats,
    pub train_target: DomainStats,
    pub query: DomainStats,
    pub gallery: DomainStats,
}

pub fn dataset_stats(split: &DatasetSplit) -> DatasetStats {
    DatasetStats {
        train_source: domain_stats(&split.train_source),
        train_target: domain_stats(&split.train_target),
        query: domain_stats(&split.query),
        gallery: domain_stats(&split.gallery),
    }
}

// ---------------------------------------------------------------------------
// Directory format
// ---------------------------------------------------------------------------

/// Parse `{identity}_c{camera}_{index}.{ext}` into (identity token, camera).
fn parse_reid_filename(name: &str) -> Option<(String, u32)> {
    let stem = name.rsplit_once('.')?.0;
    let mut parts = stem.split('_');
    let identity = parts.next()?;
    let camera_part = parts.next()?;
    let index_part = parts.next()?;
    if parts.next().is_some() || identity.is_empty() {
        return None;
    }
    let camera: u32 = camera_part.strip_prefix('c')?.parse().ok()?;
    if index_part.is_empty() || !index_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some((identity.to_string(), camera))
}

fn image_to_pixels(image: &Image) -> Vec<u8> {
    let (c, h, w) = image.dim();
    let mut buf = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push((image[[ch, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    buf
}

fn pixels_to_image(data: &[u8], h: usize, w: usize, c: usize) -> Image {
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        data[(y * w + x) * c + ch] as f64 / 255.0
    })
}

fn write_png(path: &Path, image: &Image) -> Result<()> {
    let (c, h, w) = image.dim();
    let buf = image_to_pixels(image);
    let color = match c {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        other => {
            return Err(ArnError::Data(format!(
                "cannot export {other}-channel images as PNG (1 or 3 supported)"
            )))
        }
    };
    image::save_buffer(path, &buf, w as u32, h as u32, color)
        .map_err(|e| ArnError::Data(format!("writing {}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<(Image, usize)> {
    let img = image::open(path)
        .map_err(|e| ArnError::Data(format!("reading {}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            Ok((pixels_to_image(gray.as_raw(), h as usize, w as usize, 1), 1))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok((pixels_to_image(rgb.as_raw(), h as usize, w as usize, 3), 3))
        }
    }
}

/// Export a split to the directory format (8-bit PNG per image). Round-trips
/// through [`load_split`] exactly up to pixel quantization.
pub fn export_split(split: &DatasetSplit, root: &Path) -> Result<()> {
    let parts: [(&str, &Vec<LabeledSample>); 4] = [
        ("train_source", &split.train_source),
        ("train_target", &split.train_target),
        ("query", &split.query),
        ("gallery", &split.gallery),
    ];
    for (name, samples) in parts {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir)?;
        let mut counters: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for sample in samples.iter() {
            let key = (sample.identity(), sample.camera);
            let index = counters.entry(key).or_insert(0);
            let file = dir.join(format!(
                "{:04}_c{}_{:06}.png",
                sample.identity(),
                sample.camera,
                *index
            ));
            write_png(&file, &sample.image)?;
            *index += 1;
        }
    }
    Ok(())
}

/// Scan a flat directory for re-id named files, sorted lexicographically.
fn scan_directory(dir: &Path) -> Result<Vec<(PathBuf, String, u32)>> {
    let mut entries = Vec::new();
    let read = std::fs::read_dir(dir)
        .map_err(|e| ArnError::Data(format!("cannot read directory {}: {e}", dir.display())))?;
    for entry in read {
        let path = entry?.path();
        if path.is_dir() {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| ArnError::Data(format!("non-UTF-8 filename under {}", dir.display())))?
            .to_string();
        let Some((token, camera)) = parse_reid_filename(&name) else {
            return Err(ArnError::Data(format!(
                "{} does not match the {{identity}}_c{{camera}}_{{index}}.{{ext}} pattern",
                path.display()
            )));
        };
        entries.push((path, token, camera));
    }
    if entries.is_empty() {
        return Err(ArnError::Data(format!(
            "directory {} contains no images",
            dir.display()
        )));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(entries)
}

fn token_map(tokens: impl Iterator<Item = String>) -> BTreeMap<String, u32> {
    let set: std::collections::BTreeSet<String> = tokens.collect();
    set.into_iter()
        .enumerate()
        .map(|(i, t)| (t, i as u32))
        .collect()
}

fn load_entries(
    entries: &[(PathBuf, String, u32)],
    map: &BTreeMap<String, u32>,
    domain: Domain,
) -> Result<Vec<LabeledSample>> {
    entries
        .par_iter()
        .map(|(path, token, camera)| {
            let (image, _channels) = read_png(path)?;
            Ok(LabeledSample::new(image, map[token], *camera, domain))
        })
        .collect()
}

/// Load one flat directory of re-id named images. Identity tokens are
/// remapped to contiguous labels in token sort order; ordering of the
/// returned samples is lexicographic by path.
pub fn load_directory(dir: &Path, domain: Domain) -> Result<Vec<LabeledSample>> {
    let entries = scan_directory(dir)?;
    let map = token_map(entries.iter().map(|(_, t, _)| t.clone()));
    load_entries(&entries, &map, domain)
}

/// Load a full split from `root/{train_source,train_target,query,gallery}`.
///
/// The three target-domain directories share one identity mapping so query
/// and gallery labels agree.
pub fn load_split(root: &Path) -> Result<DatasetSplit> {
    let source_entries = scan_directory(&root.join("train_source"))?;
    let target_entries = scan_directory(&root.join("train_target"))?;
    let query_entries = scan_directory(&root.join("query"))?;
    let gallery_entries = scan_directory(&root.join("gallery"))?;

    let source_map = token_map(source_entries.iter().map(|(_, t, _)| t.clone()));
    let target_map = token_map(
        target_entries
            .iter()
            .chain(query_entries.iter())
            .chain(gallery_entries.iter())
            .map(|(_, t, _)| t.clone()),
    );

    Ok(DatasetSplit {
        train_source: load_entries(&source_entries, &source_map, Domain::Source)?,
        train_target: load_entries(&target_entries, &target_map, Domain::Target)?,
        query: load_entries(&query_entries, &target_map, Domain::Target)?,
        gallery: load_entries(&gallery_entries, &target_map, Domain::Target)?,
    })
}
