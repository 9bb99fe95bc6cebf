//! Single-level 2D Haar analysis and synthesis on `(B, C, H, W)` feature maps.
//!
//! The four analysis kernels are outer products of the low-pass filter
//! `L = [1, 1] / sqrt(2)` and the high-pass filter `H = [-1, 1] / sqrt(2)`.
//! Orientation convention: `LH` is high-pass along the height axis and
//! low-pass along the width axis (horizontal edges); `HL` is the converse.
//!
//! Both transforms are built from tensor ops, so autograd flows through them.
//! The kernels are constants and never appear in a parameter store.

use std::fmt;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
    pub const DETAIL: [Band; 3] = [Band::LH, Band::HL, Band::HH];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::LL => "LL",
            Band::LH => "LH",
            Band::HL => "HL",
            Band::HH => "HH",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A subset of the four sub-bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BandMask(u8);

impl BandMask {
    pub const EMPTY: BandMask = BandMask(0);
    pub const ALL: BandMask = BandMask(0b1111);
    pub const DETAIL: BandMask = BandMask(0b1110);

    pub fn from_bands(bands: &[Band]) -> Self {
        BandMask(bands.iter().fold(0, |acc, b| acc | b.bit()))
    }

    pub fn contains(self, band: Band) -> bool {
        self.0 & band.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn with(self, band: Band) -> Self {
        BandMask(self.0 | band.bit())
    }

    pub fn without(self, band: Band) -> Self {
        BandMask(self.0 & !band.bit())
    }

    pub fn bands(self) -> Vec<Band> {
        Band::ALL.into_iter().filter(|b| self.contains(*b)).collect()
    }
}

impl Serialize for BandMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bands().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BandMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bands = Vec::<Band>::deserialize(d)?;
        Ok(BandMask::from_bands(&bands))
    }
}

/// The fixed 2x2 Haar kernels, indexed `[row][col]` over (height, width).
#[derive(Debug, Clone, Copy)]
pub struct HaarKernels {
    pub ll: [[f64; 2]; 2],
    pub lh: [[f64; 2]; 2],
    pub hl: [[f64; 2]; 2],
    pub hh: [[f64; 2]; 2],
}

impl HaarKernels {
    pub fn new() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let low = [s, s];
        let high = [-s, s];
        let outer = |a: [f64; 2], b: [f64; 2]| [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]];
        Self {
            ll: outer(low, low),
            lh: outer(high, low),
            hl: outer(low, high),
            hh: outer(high, high),
        }
    }

    pub fn get(&self, band: Band) -> &[[f64; 2]; 2] {
        match band {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }
}

impl Default for HaarKernels {
    fn default() -> Self {
        Self::new()
    }
}

/// The four half-resolution sub-bands of one feature map.
#[derive(Debug, Clone)]
pub struct FrequencyBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl FrequencyBands {
    pub fn new(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor) -> Result<Self> {
        let dims = ll.dims();
        for (band, t) in [(Band::LH, &lh), (Band::HL, &hl), (Band::HH, &hh)] {
            if t.dims() != dims {
                return Err(shape_err!(
                    "band {band} has shape {:?}, LL has {:?}",
                    t.dims(),
                    dims
                ));
            }
        }
        if dims.len() != 4 {
            return Err(shape_err!("bands must be 4-D, got {:?}", dims));
        }
        Ok(Self { ll, lh, hl, hh })
    }

    pub fn get(&self, band: Band) -> &Tensor {
        match band {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.ll.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Sum of squares over all four bands.
    pub fn energy(&self) -> Result<f64> {
        let mut total = 0.0;
        for band in Band::ALL {
            total += energy(self.get(band))?;
        }
        Ok(total)
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Self::new(f(&self.ll)?, f(&self.lh)?, f(&self.hl)?, f(&self.hh)?)
    }

    /// Replace every band outside `mask` with zeros.
    pub fn masked(&self, mask: BandMask) -> Result<Self> {
        let pick = |band: Band| -> Result<Tensor> {
            let t = self.get(band);
            if mask.contains(band) {
                Ok(t.clone())
            } else {
                Ok(t.zeros_like()?)
            }
        };
        Self::new(pick(Band::LL)?, pick(Band::LH)?, pick(Band::HL)?, pick(Band::HH)?)
    }
}

pub fn energy(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?
        .sqr()?
        .sum_all()?
        .to_scalar::<f64>()?)
}

fn check_decomposable(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x
        .dims4()
        .map_err(|_| shape_err!("expected a (B, C, H, W) map, got {:?}", x.dims()))?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!(
            "Haar decomposition needs even spatial dims >= 2, got {h}x{w}"
        ));
    }
    Ok((b, c, h, w))
}

/// Stride-2 correlation of every channel with the four Haar kernels.
pub fn haar_decompose(x: &Tensor) -> Result<FrequencyBands> {
    let (b, c, h, w) = check_decomposable(x)?;
    // (B, C, h, 2, w, 2): axis 3 is the row inside a block, axis 5 the column.
    let blocks = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    let rows = |r: usize| -> Result<Tensor> { Ok(blocks.narrow(3, r, 1)?.squeeze(3)?) };
    let (top, bottom) = (rows(0)?, rows(1)?);
    let col = |t: &Tensor, k: usize| -> Result<Tensor> { Ok(t.narrow(D::Minus1, k, 1)?.squeeze(D::Minus1)?) };
    let (p00, p01) = (col(&top, 0)?, col(&top, 1)?);
    let (p10, p11) = (col(&bottom, 0)?, col(&bottom, 1)?);

    let row_sum_top = (&p00 + &p01)?;
    let row_diff_top = (&p01 - &p00)?;
    let row_sum_bot = (&p10 + &p11)?;
    let row_diff_bot = (&p11 - &p10)?;

    let ll = ((&row_sum_top + &row_sum_bot)? * 0.5)?;
    let lh = ((&row_sum_bot - &row_sum_top)? * 0.5)?;
    let hl = ((&row_diff_top + &row_diff_bot)? * 0.5)?;
    let hh = ((&row_diff_bot - &row_diff_top)? * 0.5)?;
    FrequencyBands::new(ll, lh, hl, hh)
}

/// Transposed stride-2 correlation with the synthesis kernels, summed over bands.
pub fn haar_reconstruct(bands: &FrequencyBands) -> Result<Tensor> {
    let (b, c, h, w) = bands.dims();
    for band in Band::ALL {
        if bands.get(band).dims() != [b, c, h, w] {
            return Err(shape_err!("mismatched band shapes in reconstruction"));
        }
    }
    let (ll, lh, hl, hh) = (&bands.ll, &bands.lh, &bands.hl, &bands.hh);
    let low_h = (ll - lh)?;
    let high_h = (ll + lh)?;
    let p00 = ((&low_h - hl)? + hh)?;
    let p01 = ((&low_h + hl)? - hh)?;
    let p10 = ((&high_h - hl)? - hh)?;
    let p11 = ((&high_h + hl)? + hh)?;
    let top = Tensor::stack(&[(p00 * 0.5)?, (p01 * 0.5)?], 4)?;
    let bottom = Tensor::stack(&[(p10 * 0.5)?, (p11 * 0.5)?], 4)?;
    let full = Tensor::stack(&[top, bottom], 3)?;
    Ok(full.reshape((b, c, 2 * h, 2 * w))?)
}

/// Reconstruct from the bands in `mask` only; the rest are treated as zero.
pub fn partial_reconstruct(bands: &FrequencyBands, mask: BandMask) -> Result<Tensor> {
    if mask.is_empty() {
        return Err(Error::Config("band mask must select at least one band".into()));
    }
    haar_reconstruct(&bands.masked(mask)?)
}
