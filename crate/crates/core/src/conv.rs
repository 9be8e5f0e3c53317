//! Convolution problems and their lowering to GEMM.
//!
//! A convolution over an NHWC feature map with ORSI weights is viewed as the
//! product of an im2col matrix of shape `M x K` and a weight matrix of shape
//! `K x N`, where
//!
//! * `M = N * H_out * W_out`, rows ordered `(h_out, w_out, n)` with the batch
//!   index fastest, so that eight consecutive rows of a WMMA tile are eight
//!   images at the same output pixel;
//! * `K = R * S * I`, columns ordered `(kr, ks, i)` with the input channel
//!   fastest, matching the ORSI weight layout;
//! * `N = O`.
//!
//! Many im2col cells read the same input pixel. [`DuplicateMap`] records, for
//! every cell, which source slot it reads and which single cell is the
//! designated genuine copy of that slot.

use serde::{Deserialize, Serialize};

use crate::error::{bounds, Error, Result};
use crate::tensor::{check_signed_range, Tensor4};

fn default_bits() -> u32 {
    4
}

/// Algorithm-level description of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    #[serde(default = "default_bits")]
    pub act_bits: u32,
    #[serde(default = "default_bits")]
    pub wgt_bits: u32,
}

impl ConvConfig {
    /// Square feature map and kernel, 4-bit activations and weights.
    #[allow(clippy::too_many_arguments)]
    pub fn square(
        batch: usize,
        size: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            batch,
            height: size,
            width: size,
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
            act_bits: 4,
            wgt_bits: 4,
        }
    }

    pub fn with_bits(mut self, act_bits: u32, wgt_bits: u32) -> Self {
        self.act_bits = act_bits;
        self.wgt_bits = wgt_bits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("batch", self.batch),
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, bits) in [("act_bits", self.act_bits), ("wgt_bits", self.wgt_bits)] {
            if bits != 4 && bits != 8 {
                return Err(Error::Config(format!("{name} must be 4 or 8, got {bits}")));
            }
        }
        for (axis, extent, kernel) in [
            ("height", self.height, self.kernel_h),
            ("width", self.width, self.kernel_w),
        ] {
            let padded = extent + 2 * self.pad;
            if padded < kernel {
                return Err(Error::Config(format!(
                    "kernel larger than padded {axis} ({kernel} > {padded})"
                )));
            }
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn gemm_shape(&self) -> Result<GemmShape> {
        self.validate()?;
        Ok(GemmShape {
            m: self.batch * self.out_height() * self.out_width(),
            k: self.in_channels * self.taps(),
            n: self.out_channels,
        })
    }

    /// Multiply-accumulate work counted as two operations per MAC.
    pub fn ops_count(&self) -> Result<u64> {
        let g = self.gemm_shape()?;
        Ok(2 * g.m as u64 * g.k as u64 * g.n as u64)
    }

    /// Decomposes a GEMM row into `(n, h_out, w_out)`.
    #[inline]
    pub(crate) fn row_coords(&self, row: usize) -> (usize, usize, usize) {
        let n = row % self.batch;
        let pix = row / self.batch;
        let wo = self.out_width();
        (n, pix / wo, pix % wo)
    }

    /// Input pixel read by output pixel `(oh, ow)` at kernel tap `tap`, or
    /// `None` when the tap lands in the zero padding.
    #[inline]
    pub(crate) fn tap_source(&self, oh: usize, ow: usize, tap: usize) -> Option<(usize, usize)> {
        let kr = tap / self.kernel_w;
        let ks = tap % self.kernel_w;
        let h = (oh * self.stride + kr).checked_sub(self.pad)?;
        let w = (ow * self.stride + ks).checked_sub(self.pad)?;
        (h < self.height && w < self.width).then_some((h, w))
    }

    /// Flat `(n, h, w)` pixel index read by im2col row `row` at `tap`.
    #[inline]
    pub(crate) fn pixel_of(&self, row: usize, tap: usize) -> Option<usize> {
        let (n, oh, ow) = self.row_coords(row);
        self.tap_source(oh, ow, tap)
            .map(|(h, w)| (n * self.height + h) * self.width + w)
    }

    pub fn feature_dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.in_channels]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.in_channels,
        ]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_height(),
            self.out_width(),
            self.out_channels,
        ]
    }
}

/// ResNet-50 3x3 convolutions of stages 2 through 5 at batch 8.
pub fn resnet50_stages() -> Vec<(String, ConvConfig)> {
    [(2, 56, 64), (3, 28, 128), (4, 14, 256), (5, 7, 512)]
        .into_iter()
        .map(|(stage, size, ch)| {
            (
                format!("resnet50_stage{stage}"),
                ConvConfig::square(8, size, ch, ch, 3, 1, 1),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

/// What an im2col cell reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceSlot {
    Valid {
        n: usize,
        h: usize,
        w: usize,
        i: usize,
    },
    PadZero,
}

pub fn source_coord(conv: &ConvConfig, row: usize, col: usize) -> Result<SourceSlot> {
    let g = conv.gemm_shape()?;
    if row >= g.m {
        return Err(bounds("row", row, g.m));
    }
    if col >= g.k {
        return Err(bounds("col", col, g.k));
    }
    let tap = col / conv.in_channels;
    let i = col % conv.in_channels;
    let (n, oh, ow) = conv.row_coords(row);
    Ok(match conv.tap_source(oh, ow, tap) {
        Some((h, w)) => SourceSlot::Valid { n, h, w, i },
        None => SourceSlot::PadZero,
    })
}

/// Cell-to-slot map of the whole im2col matrix plus the genuine-cell
/// designation of every referenced slot.
#[derive(Debug, Clone)]
pub struct DuplicateMap {
    conv: ConvConfig,
    shape: GemmShape,
    /// Per cell (row-major over `M x K`): flat NHWC slot index or `PAD`.
    slot: Vec<u32>,
    /// Per slot, plus one trailing entry for the zero slot: genuine cell.
    genuine_of_slot: Vec<u32>,
}

const PAD: u32 = u32::MAX;
const UNSET: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateStats {
    pub cells: usize,
    pub valid_cells: usize,
    pub genuine: usize,
    pub duplicates: usize,
    pub pad: usize,
}

pub fn build_duplicate_map(conv: &ConvConfig) -> Result<DuplicateMap> {
    let shape = conv.gemm_shape()?;
    let cells = shape.m * shape.k;
    if cells >= u32::MAX as usize {
        return Err(Error::Config(format!(
            "im2col matrix of {cells} cells is too large to map"
        )));
    }
    let slots = conv.batch * conv.height * conv.width * conv.in_channels;
    let mut slot = Vec::with_capacity(cells);
    let mut genuine_of_slot = vec![UNSET; slots + 1];
    for row in 0..shape.m {
        for tap in 0..conv.taps() {
            let pixel = conv.pixel_of(row, tap);
            for i in 0..conv.in_channels {
                let cell = slot.len() as u32;
                let (s, key) = match pixel {
                    Some(p) => {
                        let s = (p * conv.in_channels + i) as u32;
                        (s, s as usize)
                    }
                    None => (PAD, slots),
                };
                // Cells are visited in lexicographic (row, col) order, so the
                // first visitor of a slot is its smallest referencing cell.
                if genuine_of_slot[key] == UNSET {
                    genuine_of_slot[key] = cell;
                }
                slot.push(s);
            }
        }
    }
    Ok(DuplicateMap {
        conv: *conv,
        shape,
        slot,
        genuine_of_slot,
    })
}

impl DuplicateMap {
    pub fn shape(&self) -> GemmShape {
        self.shape
    }

    fn cell_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.shape.m {
            return Err(bounds("row", row, self.shape.m));
        }
        if col >= self.shape.k {
            return Err(bounds("col", col, self.shape.k));
        }
        Ok(row * self.shape.k + col)
    }

    pub fn slot(&self, row: usize, col: usize) -> Result<SourceSlot> {
        let s = self.slot[self.cell_index(row, col)?];
        if s == PAD {
            return Ok(SourceSlot::PadZero);
        }
        let c = &self.conv;
        let s = s as usize;
        let i = s % c.in_channels;
        let p = s / c.in_channels;
        Ok(SourceSlot::Valid {
            n: p / (c.height * c.width),
            h: (p / c.width) % c.height,
            w: p % c.width,
            i,
        })
    }

    /// The genuine cell standing in for `(row, col)`.
    pub fn genuine(&self, row: usize, col: usize) -> Result<(usize, usize)> {
        let s = self.slot[self.cell_index(row, col)?];
        let key = if s == PAD {
            self.genuine_of_slot.len() - 1
        } else {
            s as usize
        };
        let g = self.genuine_of_slot[key] as usize;
        Ok((g / self.shape.k, g % self.shape.k))
    }

    pub fn is_genuine(&self, row: usize, col: usize) -> Result<bool> {
        Ok(self.genuine(row, col)? == (row, col))
    }

    pub fn stats(&self) -> DuplicateStats {
        let cells = self.slot.len();
        let pad = self.slot.iter().filter(|s| **s == PAD).count();
        let (_, valid_slots) = self.genuine_of_slot.split_last().expect("zero slot entry");
        let genuine = valid_slots.iter().filter(|g| **g != UNSET).count();
        let valid_cells = cells - pad;
        DuplicateStats {
            cells,
            valid_cells,
            genuine,
            duplicates: valid_cells - genuine,
            pad,
        }
    }
}

/// Reference convolution with 64-bit accumulation.
pub fn direct_conv(
    conv: &ConvConfig,
    feature: &Tensor4<i32>,
    weights: &Tensor4<i32>,
) -> Result<Tensor4<i32>> {
    check_operands(conv, feature, weights)?;
    let [_, ho, wo, o] = conv.output_dims();
    let mut out = Tensor4::zeros(conv.output_dims());
    for n in 0..conv.batch {
        for oh in 0..ho {
            for ow in 0..wo {
                for oc in 0..o {
                    let mut acc = 0i64;
                    for tap in 0..conv.taps() {
                        let Some((h, w)) = conv.tap_source(oh, ow, tap) else {
                            continue;
                        };
                        let (kr, ks) = (tap / conv.kernel_w, tap % conv.kernel_w);
                        for i in 0..conv.in_channels {
                            acc += feature.at([n, h, w, i]) as i64
                                * weights.at([oc, kr, ks, i]) as i64;
                        }
                    }
                    out.set([n, oh, ow, oc], narrow(acc)?);
                }
            }
        }
    }
    Ok(out)
}

/// Explicit im2col matrix (`M x K`, row-major) of a feature map.
pub fn im2col(conv: &ConvConfig, feature: &Tensor4<i32>) -> Result<Vec<i32>> {
    let g = conv.gemm_shape()?;
    if feature.dims() != conv.feature_dims() {
        return Err(Error::Argument(format!(
            "feature dims {:?} do not match {:?}",
            feature.dims(),
            conv.feature_dims()
        )));
    }
    let mut a = Vec::with_capacity(g.m * g.k);
    for row in 0..g.m {
        for col in 0..g.k {
            a.push(match source_coord(conv, row, col)? {
                SourceSlot::Valid { n, h, w, i } => feature.at([n, h, w, i]),
                SourceSlot::PadZero => 0,
            });
        }
    }
    Ok(a)
}

/// Convolution computed as the lowered matrix product `im2col(x) * W`,
/// reshaped back to `(N, H_out, W_out, O)`.
pub fn lowered_conv(
    conv: &ConvConfig,
    feature: &Tensor4<i32>,
    weights: &Tensor4<i32>,
) -> Result<Tensor4<i32>> {
    check_operands(conv, feature, weights)?;
    let g = conv.gemm_shape()?;
    let a = im2col(conv, feature)?;
    // ORSI flattened over (r, s, i) is exactly the K order of the columns.
    let b = weights.data();
    let mut out = Tensor4::zeros(conv.output_dims());
    for row in 0..g.m {
        let (n, oh, ow) = conv.row_coords(row);
        for col in 0..g.n {
            let acc: i64 = (0..g.k)
                .map(|k| a[row * g.k + k] as i64 * b[col * g.k + k] as i64)
                .sum();
            out.set([n, oh, ow, col], narrow(acc)?);
        }
    }
    Ok(out)
}

fn narrow(acc: i64) -> Result<i32> {
    i32::try_from(acc).map_err(|_| Error::Domain(format!("accumulator {acc} overflows 32 bits")))
}

pub(crate) fn check_operands(
    conv: &ConvConfig,
    feature: &Tensor4<i32>,
    weights: &Tensor4<i32>,
) -> Result<()> {
    conv.validate()?;
    if feature.dims() != conv.feature_dims() {
        return Err(Error::Argument(format!(
            "feature dims {:?} do not match NHWC {:?}",
            feature.dims(),
            conv.feature_dims()
        )));
    }
    if weights.dims() != conv.weight_dims() {
        return Err(Error::Argument(format!(
            "weight dims {:?} do not match ORSI {:?}",
            weights.dims(),
            conv.weight_dims()
        )));
    }
    check_signed_range(feature, conv.act_bits, "feature")?;
    check_signed_range(weights, conv.wgt_bits, "weight")?;
    Ok(())
}
