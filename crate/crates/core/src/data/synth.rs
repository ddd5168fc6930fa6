//! Synthetic fundus-like images with exact cup/disc masks.
//!
//! Each image is a dark red background with a bright elliptical disc and a
//! brighter concentric cup. The disc's vertical radius is a whole number of
//! pixels, so the rasterized disc spans exactly `2r+1` rows and the
//! rasterized vertical CDR is within `1/(2r+1)` of the drawn target. The
//! glaucoma label is `vCDR > 0.6` measured on the rasterized mask, then
//! flipped with probability `label_noise_rate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{compute_vcdr, Image, LabeledSample, Mask, MaskedSample, BACKGROUND, CUP, DISC};
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIZE: usize = 16;

/// vCDR above which a sample is labeled positive.
pub const CDR_THRESHOLD: f64 = 0.6;

const VCDR_RANGE: (f64, f64) = (0.2, 0.95);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of labeled images.
    pub n: usize,
    /// Number of mask-annotated auxiliary images.
    pub n_aux: usize,
    pub image_size: usize,
    pub label_noise_rate: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_aux: 600,
            image_size: 32,
            label_noise_rate: 0.1,
            pixel_noise: 0.06,
            seed: 0,
        }
    }
}

/// Ground truth behind one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: u64,
    pub target_vcdr: f64,
    pub measured_vcdr: f64,
    /// Rows spanned by the rasterized disc.
    pub disc_extent: usize,
    pub clean_label: u8,
    pub label: u8,
    pub pixel_sum: f64,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub labeled: Vec<LabeledSample>,
    pub masked: Vec<MaskedSample>,
    pub labeled_records: Vec<SynthRecord>,
    pub masked_records: Vec<SynthRecord>,
    /// Masks of the labeled images; never used for training.
    pub labeled_masks: Vec<Mask>,
}

struct Drawn {
    image: Image,
    mask: Mask,
    target_vcdr: f64,
    disc_extent: usize,
}

fn inside(r: usize, c: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let dy = (r as f64 - cy) / ry;
    let dx = (c as f64 - cx) / rx;
    dy * dy + dx * dx <= 1.0
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn draw_sample(size: usize, pixel_noise: f64, rng: &mut ChaCha8Rng) -> Drawn {
    let min_r = ((0.16 * size as f64).round() as usize).max(3);
    let max_r = ((0.25 * size as f64).round() as usize).max(min_r);
    let rd = rng.random_range(min_r..=max_r);
    let rx = rd as f64 * rng.random_range(0.85..1.15);
    let target_vcdr = rng.random_range(VCDR_RANGE.0..VCDR_RANGE.1);
    // Cup rows come out as 2·floor(t(r+½))+1 ≈ t(2r+1).
    let cup_ry = target_vcdr * (rd as f64 + 0.5);
    let cup_rx = (target_vcdr * rx * rng.random_range(0.9..1.1)).min(0.95 * rx);
    let span_x = rx.ceil() as usize;
    let cy = rng.random_range(rd + 1..=size - rd - 2) as f64;
    let cx = rng.random_range(span_x + 1..=size - span_x - 2) as f64;

    let brightness: f64 = rng.random_range(-0.08..0.08);
    let disc_gain: f64 = rng.random_range(0.25..0.4);
    let cup_gain: f64 = rng.random_range(0.08..0.2);
    let vessel_row = rng.random_range(0..size);
    let vessel_slope: f64 = rng.random_range(-0.6..0.6);
    let noise = Normal::new(0.0, pixel_noise).expect("finite noise level");

    let mut codes = vec![BACKGROUND; size * size];
    let mut data = vec![0f32; 3 * size * size];
    let base = [0.42, 0.16, 0.08];
    let disc_tint = [1.0, 0.9, 0.6];
    let cup_tint = [0.6, 0.8, 0.9];
    let plane = size * size;
    for r in 0..size {
        for c in 0..size {
            let code = if inside(r, c, cy, cx, cup_ry, cup_rx) {
                CUP
            } else if inside(r, c, cy, cx, rd as f64, rx) {
                DISC
            } else {
                BACKGROUND
            };
            codes[r * size + c] = code;
            let dist = ((r as f64 - size as f64 / 2.0).powi(2)
                + (c as f64 - size as f64 / 2.0).powi(2))
            .sqrt()
                / size as f64;
            let vessel_y = vessel_row as f64 + vessel_slope * (c as f64 - cx);
            let on_vessel = (r as f64 - vessel_y).abs() < 0.75;
            for ch in 0..3 {
                let mut v = base[ch] + brightness - 0.15 * dist;
                if code != BACKGROUND {
                    v += disc_gain * disc_tint[ch];
                }
                if code == CUP {
                    v += cup_gain * cup_tint[ch];
                }
                if on_vessel {
                    v -= 0.12;
                }
                v += noise.sample(rng);
                data[ch * plane + r * size + c] = quantize(v);
            }
        }
    }
    Drawn {
        image: Image::new(3, size, size, data).expect("generator image"),
        mask: Mask::new(size, size, codes).expect("generator mask"),
        target_vcdr,
        disc_extent: 2 * rd + 1,
    }
}

fn record(id: u64, drawn: &Drawn, label_noise_rate: f64, rng: &mut ChaCha8Rng) -> SynthRecord {
    let measured = compute_vcdr(&drawn.mask).expect("generator disc is never empty");
    let clean_label = (measured > CDR_THRESHOLD) as u8;
    let flip = rng.random::<f64>() < label_noise_rate;
    SynthRecord {
        id,
        target_vcdr: drawn.target_vcdr,
        measured_vcdr: measured,
        disc_extent: drawn.disc_extent,
        clean_label,
        label: if flip { 1 - clean_label } else { clean_label },
        pixel_sum: drawn.image.pixel_sum(),
    }
}

/// Generates `n` labeled and `n_aux` mask-annotated samples. Labeled and
/// auxiliary sets come from separate random streams of the same seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.n == 0 {
        return Err(Error::config("synthetic dataset needs n ≥ 1"));
    }
    if cfg.image_size < MIN_IMAGE_SIZE {
        return Err(Error::config(format!(
            "image size {} is below the minimum {MIN_IMAGE_SIZE} needed for the disc",
            cfg.image_size
        )));
    }
    if !(0.0..=1.0).contains(&cfg.label_noise_rate) {
        return Err(Error::config("label_noise_rate must lie in [0, 1]"));
    }
    if !(cfg.pixel_noise >= 0.0 && cfg.pixel_noise.is_finite()) {
        return Err(Error::config("pixel_noise must be finite and ≥ 0"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labeled = Vec::with_capacity(cfg.n);
    let mut labeled_records = Vec::with_capacity(cfg.n);
    let mut labeled_masks = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n as u64 {
        let drawn = draw_sample(cfg.image_size, cfg.pixel_noise, &mut rng);
        let rec = record(id, &drawn, cfg.label_noise_rate, &mut rng);
        labeled.push(LabeledSample {
            id,
            image: drawn.image,
            label: rec.label,
        });
        labeled_masks.push(drawn.mask);
        labeled_records.push(rec);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut masked = Vec::with_capacity(cfg.n_aux);
    let mut masked_records = Vec::with_capacity(cfg.n_aux);
    for id in 0..cfg.n_aux as u64 {
        let drawn = draw_sample(cfg.image_size, cfg.pixel_noise, &mut rng);
        masked_records.push(record(id, &drawn, 0.0, &mut rng));
        masked.push(MaskedSample {
            id,
            image: drawn.image,
            mask: drawn.mask,
        });
    }
    Ok(SynthOutput {
        labeled,
        masked,
        labeled_records,
        masked_records,
        labeled_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n,
            n_aux: 5,
            label_noise_rate: noise,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_labels_follow_cdr_rule() {
        let out = synth_generate(&small(300, 0.0, 3)).unwrap();
        for ((s, rec), mask) in out
            .labeled
            .iter()
            .zip(&out.labeled_records)
            .zip(&out.labeled_masks)
        {
            assert_eq!(s.label, (compute_vcdr(mask).unwrap() > 0.6) as u8);
            assert!(
                (rec.measured_vcdr - rec.target_vcdr).abs() <= 1.0 / rec.disc_extent as f64 + 1e-12
            );
            assert!(mask.cup_within_disc());
        }
    }

    #[test]
    fn pixels_are_quantized_to_bytes() {
        let out = synth_generate(&small(3, 0.0, 1)).unwrap();
        for v in &out.labeled[0].image.data {
            let b = (*v * 255.0).round();
            assert_eq!(b / 255.0, *v);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(20, 0.1, 9)).unwrap();
        let b = synth_generate(&small(20, 0.1, 9)).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.masked, b.masked);
        let c = synth_generate(&small(20, 0.1, 10)).unwrap();
        assert_ne!(a.labeled, c.labeled);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_generate(&small(0, 0.0, 0)).is_err());
        let tiny = SynthConfig {
            image_size: 8,
            ..small(3, 0.0, 0)
        };
        assert!(synth_generate(&tiny).is_err());
    }

    #[test]
    fn label_noise_rate_is_binomial() {
        let out = synth_generate(&SynthConfig {
            n_aux: 0,
            ..small(1000, 0.1, 21)
        })
        .unwrap();
        let flipped = out
            .labeled_records
            .iter()
            .filter(|r| r.label != r.clean_label)
            .count() as f64;
        let sd = (1000.0f64 * 0.1 * 0.9).sqrt();
        assert!((flipped - 100.0).abs() <= 3.0 * sd, "flipped {flipped}");
    }
}
