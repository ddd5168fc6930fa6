//! Labeled and mask-annotated image sets: types, the synthetic fundus-like
//! generator, splitting, and PNG/CSV manifest I/O.

mod manifest;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use manifest::{
    load_labeled_dataset, load_masked_dataset, write_labeled_dataset, write_masked_dataset,
    DatasetManifest, ManifestEntry, MASK_FILE_LEVELS,
};
pub use synth::{synth_generate, SynthConfig, SynthOutput, SynthRecord, MIN_IMAGE_SIZE};

pub const BACKGROUND: u8 = 0;
pub const DISC: u8 = 1;
pub const CUP: u8 = 2;

/// Channel-major (`C×H×W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                context: "image buffer".into(),
                expected: format!("{} values", channels * height * width),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                entry: "image pixels".into(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn pixel_sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Cup/disc annotation, one code per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != height * width {
            return Err(Error::Shape {
                context: "mask buffer".into(),
                expected: format!("{} codes", height * width),
                actual: format!("{} codes", codes.len()),
            });
        }
        if let Some(&c) = codes.iter().find(|&&c| c > CUP) {
            return Err(Error::invalid(format!(
                "mask code {c} is not one of 0, 1, 2"
            )));
        }
        Ok(Self {
            height,
            width,
            codes,
        })
    }

    pub fn code(&self, row: usize, col: usize) -> u8 {
        self.codes[row * self.width + col]
    }

    pub fn disc_area(&self) -> usize {
        self.codes.iter().filter(|&&c| c != BACKGROUND).count()
    }

    /// Whether the cup's bounding box lies inside the disc's. Cup pixels
    /// count as disc, so this is the containment check that remains.
    pub fn cup_within_disc(&self) -> bool {
        let cup = (self.row_extent(|c| c == CUP), self.col_extent(|c| c == CUP));
        let disc = (
            self.row_extent(|c| c != BACKGROUND),
            self.col_extent(|c| c != BACKGROUND),
        );
        let within =
            |inner: Option<(usize, usize)>, outer: Option<(usize, usize)>| match (inner, outer) {
                (None, _) => true,
                (Some(_), None) => false,
                (Some((a0, a1)), Some((b0, b1))) => a0 >= b0 && a1 <= b1,
            };
        within(cup.0, disc.0) && within(cup.1, disc.1)
    }

    /// Two binary channels: disc (disc or cup) and cup.
    pub fn to_channels(&self) -> Vec<f32> {
        let disc = self.codes.iter().map(|&c| (c != BACKGROUND) as u8 as f32);
        let cup = self.codes.iter().map(|&c| (c == CUP) as u8 as f32);
        disc.chain(cup).collect()
    }

    fn row_extent(&self, pred: impl Fn(u8) -> bool) -> Option<(usize, usize)> {
        let first = (0..self.height).find(|&r| (0..self.width).any(|c| pred(self.code(r, c))))?;
        let last = (0..self.height).rfind(|&r| (0..self.width).any(|c| pred(self.code(r, c))))?;
        Some((first, last))
    }

    fn col_extent(&self, pred: impl Fn(u8) -> bool) -> Option<(usize, usize)> {
        let first = (0..self.width).find(|&c| (0..self.height).any(|r| pred(self.code(r, c))))?;
        let last = (0..self.width).rfind(|&c| (0..self.height).any(|r| pred(self.code(r, c))))?;
        Some((first, last))
    }
}

/// Number of teacher input channels contributed by a mask.
pub const MASK_CHANNELS: usize = 2;

/// Vertical cup-to-disc ratio: cup row extent over disc row extent.
pub fn compute_vcdr(mask: &Mask) -> Result<f64> {
    let disc = mask
        .row_extent(|c| c != BACKGROUND)
        .ok_or(Error::UndefinedCdr)?;
    let Some(cup) = mask.row_extent(|c| c == CUP) else {
        return Ok(0.0);
    };
    Ok((cup.1 - cup.0 + 1) as f64 / (disc.1 - disc.0 + 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: u64,
    pub image: Image,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub id: u64,
    pub image: Image,
    pub mask: Mask,
}

/// Stacks images into an `n×C×H×W` tensor.
pub fn stack_images<'a, F: Scalar>(
    images: impl IntoIterator<Item = &'a Image>,
) -> Result<Tensor<F>> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for img in images {
        let d = (img.channels, img.height, img.width);
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Shape {
                    context: "image batch".into(),
                    expected: format!("{prev:?}"),
                    actual: format!("{d:?}"),
                })
            }
            _ => {}
        }
        data.extend(img.data.iter().map(|&v| F::from_f32(v)));
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::invalid("empty image batch"))?;
    Tensor::new(vec![n, c, h, w], data)
}

/// Stacks masks into an `n×2×H×W` tensor of binary disc/cup channels.
pub fn stack_masks<'a, F: Scalar>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Tensor<F>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for m in masks {
        let d = (m.height, m.width);
        if *dims.get_or_insert(d) != d {
            return Err(Error::invalid("masks of differing sizes in one batch"));
        }
        data.extend(m.to_channels().into_iter().map(F::from_f32));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::invalid("empty mask batch"))?;
    Tensor::new(vec![n, MASK_CHANNELS, h, w], data)
}

/// Train/validation/test fractions; the test and validation sizes are
/// rounded and the remainder goes to training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.60,
            val: 0.15,
            test: 0.25,
        }
    }
}

pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded disjoint split; each part keeps ascending id order.
pub fn split<T: Clone>(
    items: &[T],
    id_of: impl Fn(&T) -> u64,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Splits<T>> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split fractions must be in [0, 1] and sum to 1, got {train}/{val}/{test}"
        )));
    }
    let n = items.len();
    let n_val = (val * n as f64).round() as usize;
    let n_test = (test * n as f64).round() as usize;
    if n_val + n_test >= n || (val > 0.0 && n_val == 0) || (test > 0.0 && n_test == 0) {
        return Err(Error::DatasetTooSmall(format!(
            "{n} samples cannot be split {train}/{val}/{test} into nonempty parts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| {
        let mut part: Vec<T> = idx.iter().map(|&i| items[i].clone()).collect();
        part.sort_by_key(|t| id_of(t));
        part
    };
    Ok(Splits {
        val: take(&order[..n_val]),
        test: take(&order[n_val..n_val + n_test]),
        train: take(&order[n_val + n_test..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_rows(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let codes = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b - b'0'))
            .collect();
        Mask::new(h, w, codes).unwrap()
    }

    #[test]
    fn vcdr_examples() {
        // disc spans 50 rows, cup 30
        let mut codes = vec![0u8; 60 * 3];
        for r in 5..55 {
            codes[r * 3 + 1] = DISC;
        }
        for r in 15..45 {
            codes[r * 3 + 1] = CUP;
        }
        let m = Mask::new(60, 3, codes).unwrap();
        assert!((compute_vcdr(&m).unwrap() - 0.6).abs() < 1e-15);

        let no_cup = mask_from_rows(&["000", "010", "010"]);
        assert_eq!(compute_vcdr(&no_cup).unwrap(), 0.0);
        let empty = mask_from_rows(&["000", "000"]);
        assert!(matches!(compute_vcdr(&empty), Err(Error::UndefinedCdr)));
        assert_eq!(empty.disc_area(), 0);
    }

    #[test]
    fn mask_channels_encode_disc_and_cup() {
        let m = mask_from_rows(&["012"]);
        assert_eq!(m.to_channels(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(Mask::new(1, 1, vec![3]).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ids: Vec<u64> = (0..100).collect();
        let s = split(&ids, |&i| i, SplitFractions::default(), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 15, 25));
        let mut all: Vec<u64> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        let again = split(&ids, |&i| i, SplitFractions::default(), 4).unwrap();
        assert_eq!(
            (again.train, again.val, again.test),
            (s.train, s.val, s.test)
        );
    }

    #[test]
    fn split_rejects_degenerate() {
        let ids: Vec<u64> = (0..2).collect();
        assert!(split(&ids, |&i| i, SplitFractions::default(), 0).is_err());
        let bad = SplitFractions {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(split(&(0..100).collect::<Vec<u64>>(), |&i| i, bad, 0).is_err());
    }

    #[test]
    fn remainder_goes_to_train() {
        let ids: Vec<u64> = (0..7).collect();
        let s = split(&ids, |&i| i, SplitFractions::default(), 1).unwrap();
        // val round(1.05)=1, test round(1.75)=2
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 1, 2));
    }
}
