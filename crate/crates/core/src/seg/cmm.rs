//! Copy-move-merge batch composition for multi-robot training data.
//!
//! Item i of the output is `(1 - M'_j) * I'_i + M'_j * I'_j` for a donor j
//! drawn from a uniform permutation. Primes denote geometric transforms,
//! applied to image and mask alike with nearest-neighbour sampling so the
//! mask stays binary and donor pixels are copied exactly. The affine
//! transform is only used on donors whose robot is fully visible.
//! Photometric transforms run on the composite.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmmConfig {
    pub batch_size: usize,
    pub flip_prob: f64,
    /// Probability of the (conditional) affine transform.
    pub affine_prob: f64,
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    /// Maximum shift as a fraction of the image size.
    pub max_translation: f64,
    /// Probability of each photometric transform.
    pub photometric_prob: f64,
    /// Emit `M'_i ∪ M'_j` instead of the donor mask alone.
    pub union_host_mask: bool,
    /// Keep the composite before photometric transforms (for audits).
    pub keep_pre_photometric: bool,
    pub seed: u64,
}

impl Default for CmmConfig {
    fn default() -> Self {
        CmmConfig {
            batch_size: 8,
            flip_prob: 0.5,
            affine_prob: 0.5,
            scale_range: (1.0, 1.8),
            max_rotation_deg: 20.0,
            max_translation: 0.2,
            photometric_prob: 0.2,
            union_host_mask: false,
            keep_pre_photometric: false,
            seed: 0,
        }
    }
}

impl CmmConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.affine_prob, self.photometric_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        let (a, b) = self.scale_range;
        if !(a > 0.0 && a <= b && b.is_finite()) || self.max_rotation_deg < 0.0 || self.max_translation < 0.0 {
            return Err(Error::InvalidConfig(format!("invalid affine ranges in {self:?}")));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Geometric {
    HorizontalFlip,
    /// Scale and rotation about the image centre, then a shift in pixels.
    Affine { scale: f64, rotation_deg: f64, tx: f64, ty: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Photometric {
    ColourJitter { gains: [f64; 3], bias: f64 },
    Grayscale,
    BoxBlur { radius: u32 },
    Contrast { factor: f64 },
    SaltAndPepper { amount: f64, seed: u64 },
    GaussianNoise { sigma: f64, seed: u64 },
    ChannelDropout { channel: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmmRecord {
    pub host: usize,
    pub donor: usize,
    pub donor_visible: bool,
    pub host_transforms: Vec<Geometric>,
    pub donor_transforms: Vec<Geometric>,
    pub photometric: Vec<Photometric>,
}

#[derive(Debug, Clone)]
pub struct CmmItem {
    pub image: RgbImage,
    pub mask: MaskImage,
    pub pre_photometric: Option<RgbImage>,
    pub record: CmmRecord,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Apply geometric transforms in order to an image and its mask.
pub fn apply_geometric(img: &RgbImage, mask: &MaskImage, ops: &[Geometric]) -> (RgbImage, MaskImage) {
    let (w, h) = img.dimensions();
    let mut img = img.clone();
    let mut mask = mask.clone();
    for op in ops {
        match *op {
            Geometric::HorizontalFlip => {
                img = image::imageops::flip_horizontal(&img);
                mask = MaskImage::from_fn(w as usize, h as usize, |x, y| mask.get(w as usize - 1 - x, y));
            }
            Geometric::Affine { scale, rotation_deg, tx, ty } => {
                let (c, s) = (rotation_deg.to_radians().cos(), rotation_deg.to_radians().sin());
                let (cx, cy) = (0.5 * w as f64, 0.5 * h as f64);
                // inverse map from output pixel centre to source coordinates
                let source = |x: u32, y: u32| -> Option<(u32, u32)> {
                    let (dx, dy) = (x as f64 + 0.5 - cx - tx, y as f64 + 0.5 - cy - ty);
                    let sx = (c * dx + s * dy) / scale + cx;
                    let sy = (-s * dx + c * dy) / scale + cy;
                    let (ix, iy) = (sx.floor(), sy.floor());
                    (ix >= 0.0 && iy >= 0.0 && ix < w as f64 && iy < h as f64).then_some((ix as u32, iy as u32))
                };
                let src_img = img.clone();
                let src_mask = mask.clone();
                img = RgbImage::from_fn(w, h, |x, y| source(x, y).map_or(Rgb([0, 0, 0]), |(sx, sy)| *src_img.get_pixel(sx, sy)));
                mask = MaskImage::from_fn(w as usize, h as usize, |x, y| {
                    source(x as u32, y as u32).map_or(0.0, |(sx, sy)| src_mask.get(sx as usize, sy as usize))
                });
            }
        }
    }
    (img, mask)
}

pub fn apply_photometric(img: &RgbImage, op: &Photometric) -> RgbImage {
    let (w, h) = img.dimensions();
    match *op {
        Photometric::ColourJitter { gains, bias } => {
            let mut out = img.clone();
            for p in out.pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = clamp_u8(p.0[ch] as f64 * gains[ch] + bias);
                }
            }
            out
        }
        Photometric::Grayscale => {
            let mut out = img.clone();
            for p in out.pixels_mut() {
                let [r, g, b] = p.0;
                let l = clamp_u8(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64);
                p.0 = [l, l, l];
            }
            out
        }
        Photometric::BoxBlur { radius } => {
            let r = radius as i64;
            RgbImage::from_fn(w, h, |x, y| {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for yy in (y as i64 - r).max(0)..=(y as i64 + r).min(h as i64 - 1) {
                    for xx in (x as i64 - r).max(0)..=(x as i64 + r).min(w as i64 - 1) {
                        let p = img.get_pixel(xx as u32, yy as u32);
                        for ch in 0..3 {
                            acc[ch] += p.0[ch] as f64;
                        }
                        n += 1.0;
                    }
                }
                Rgb(acc.map(|a| clamp_u8(a / n)))
            })
        }
        Photometric::Contrast { factor } => {
            let n = (w * h * 3).max(1) as f64;
            let mean = img.as_raw().iter().map(|&v| v as f64).sum::<f64>() / n;
            let mut out = img.clone();
            for v in out.iter_mut() {
                *v = clamp_u8(mean + (*v as f64 - mean) * factor);
            }
            out
        }
        Photometric::SaltAndPepper { amount, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = img.clone();
            for p in out.pixels_mut() {
                if rng.random::<f64>() < amount {
                    let v = if rng.random::<bool>() { 255 } else { 0 };
                    p.0 = [v, v, v];
                }
            }
            out
        }
        Photometric::GaussianNoise { sigma, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let mut out = img.clone();
            for v in out.iter_mut() {
                *v = clamp_u8(*v as f64 + normal.sample(&mut rng));
            }
            out
        }
        Photometric::ChannelDropout { channel } => {
            let mut out = img.clone();
            for p in out.pixels_mut() {
                p.0[channel as usize % 3] = 0;
            }
            out
        }
    }
}

fn check_inputs(images: &[RgbImage], masks: &[MaskImage], visibility: &[bool]) -> Result<()> {
    if images.len() < 2 {
        return Err(Error::Precondition(format!("composition needs a batch of at least 2, got {}", images.len())));
    }
    if masks.len() != images.len() || visibility.len() != images.len() {
        return Err(Error::DimensionMismatch {
            expected: images.len(),
            got: masks.len().min(visibility.len()),
        });
    }
    let (w, h) = images[0].dimensions();
    for (img, m) in images.iter().zip(masks) {
        let (iw, ih) = img.dimensions();
        if (iw, ih) != (w, h) {
            return Err(Error::SizeMismatch(iw as usize, ih as usize, w as usize, h as usize));
        }
        if m.width() != w as usize || m.height() != h as usize {
            return Err(Error::SizeMismatch(m.width(), m.height(), w as usize, h as usize));
        }
        m.require_binary()?;
    }
    Ok(())
}

/// Compose a batch with donors from a seeded uniform permutation.
pub fn cmm_compose(images: &[RgbImage], masks: &[MaskImage], visibility: &[bool], cfg: &CmmConfig) -> Result<Vec<CmmItem>> {
    cfg.validate()?;
    check_inputs(images, masks, visibility)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..images.len()).collect();
    perm.shuffle(&mut rng);
    compose(images, masks, visibility, cfg, &perm, &mut rng)
}

/// Compose with an explicit donor assignment `perm[i]` for host i.
pub fn cmm_compose_permuted(images: &[RgbImage], masks: &[MaskImage], visibility: &[bool], cfg: &CmmConfig, perm: &[usize]) -> Result<Vec<CmmItem>> {
    cfg.validate()?;
    check_inputs(images, masks, visibility)?;
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..images.len()).collect::<Vec<_>>() {
        return Err(Error::Precondition("donor assignment is not a permutation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    compose(images, masks, visibility, cfg, perm, &mut rng)
}

fn draw_geometric(rng: &mut ChaCha8Rng, cfg: &CmmConfig, conditional: bool, w: u32, h: u32) -> Vec<Geometric> {
    let mut ops = Vec::new();
    if rng.random::<f64>() < cfg.flip_prob {
        ops.push(Geometric::HorizontalFlip);
    }
    // always consume the draws so gating does not shift the random stream
    let apply = rng.random::<f64>() < cfg.affine_prob;
    let (a, b) = cfg.scale_range;
    let scale = if b > a { rng.random_range(a..=b) } else { a };
    let rot = cfg.max_rotation_deg * rng.random_range(-1.0..=1.0);
    let tx = cfg.max_translation * w as f64 * rng.random_range(-1.0..=1.0);
    let ty = cfg.max_translation * h as f64 * rng.random_range(-1.0..=1.0);
    if conditional && apply {
        ops.push(Geometric::Affine {
            scale,
            rotation_deg: rot,
            tx,
            ty,
        });
    }
    ops
}

fn draw_photometric(rng: &mut ChaCha8Rng, p: f64) -> Vec<Photometric> {
    let mut ops = Vec::new();
    let mut maybe = |rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> Photometric| {
        if rng.random::<f64>() < p {
            ops.push(make(rng));
        }
    };
    maybe(rng, &|r| Photometric::ColourJitter {
        gains: [r.random_range(0.8..=1.2), r.random_range(0.8..=1.2), r.random_range(0.8..=1.2)],
        bias: r.random_range(-20.0..=20.0),
    });
    maybe(rng, &|_| Photometric::Grayscale);
    maybe(rng, &|_| Photometric::BoxBlur { radius: 1 });
    maybe(rng, &|r| Photometric::Contrast {
        factor: r.random_range(0.7..=1.3),
    });
    maybe(rng, &|r| Photometric::SaltAndPepper {
        amount: 0.01,
        seed: r.random(),
    });
    maybe(rng, &|r| Photometric::GaussianNoise { sigma: 8.0, seed: r.random() });
    maybe(rng, &|r| Photometric::ChannelDropout {
        channel: r.random_range(0..3),
    });
    ops
}

fn compose(
    images: &[RgbImage],
    masks: &[MaskImage],
    visibility: &[bool],
    cfg: &CmmConfig,
    perm: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CmmItem>> {
    let (w, h) = images[0].dimensions();
    let mut out = Vec::with_capacity(images.len());
    for (i, &j) in perm.iter().enumerate() {
        let host_ops = draw_geometric(rng, cfg, false, w, h);
        let donor_ops = draw_geometric(rng, cfg, visibility[j], w, h);
        let photometric = draw_photometric(rng, cfg.photometric_prob);
        let (host_img, host_mask) = apply_geometric(&images[i], &masks[i], &host_ops);
        let (donor_img, donor_mask) = apply_geometric(&images[j], &masks[j], &donor_ops);
        let composite = RgbImage::from_fn(w, h, |x, y| {
            if donor_mask.get(x as usize, y as usize) == 1.0 {
                *donor_img.get_pixel(x, y)
            } else {
                *host_img.get_pixel(x, y)
            }
        });
        let mask = if cfg.union_host_mask {
            MaskImage::from_fn(w as usize, h as usize, |x, y| donor_mask.get(x, y).max(host_mask.get(x, y)))
        } else {
            donor_mask
        };
        let image = photometric.iter().fold(composite.clone(), |img, op| apply_photometric(&img, op));
        out.push(CmmItem {
            image,
            mask,
            pre_photometric: cfg.keep_pre_photometric.then_some(composite),
            record: CmmRecord {
                host: i,
                donor: j,
                donor_visible: visibility[j],
                host_transforms: host_ops,
                donor_transforms: donor_ops,
                photometric,
            },
        });
    }
    Ok(out)
}

/// Write `{i}_image.png`, `{i}_mask.png` and a `provenance.jsonl` manifest.
pub fn write_cmm_batch(dir: &Path, items: &[CmmItem]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("provenance.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for (i, item) in items.iter().enumerate() {
        let img_path = dir.join(format!("{i}_image.png"));
        item.image.save(&img_path).map_err(|e| Error::parse(img_path.display().to_string(), e))?;
        item.mask.write_png(&dir.join(format!("{i}_mask.png")))?;
        let line = serde_json::to_string(&item.record).map_err(|e| Error::parse("provenance", e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    f.flush().map_err(|e| Error::io(&manifest, e))
}
