//! Activation layouts and coalescing analysis.
//!
//! `NHWC` stores each pixel's channel vector contiguously. `NHWCnc` tiles the
//! batch and channel axes so that one WMMA fragment (`n_tile` images by a
//! 16-byte channel slice) is a single contiguous 128-byte block. Coalescing is
//! measured by counting the distinct 32-byte segments a warp touches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conv::ConvConfig;
use crate::error::{bounds, Error, Result};
use crate::schedule::MachineModel;
use crate::tensor::Tensor4;

/// Fragment row width in bytes.
pub const FRAGMENT_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayoutKind {
    #[serde(rename = "NHWC")]
    Nhwc,
    #[serde(rename = "NHWCnc")]
    Nhwcnc,
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayoutKind::Nhwc => "NHWC",
            LayoutKind::Nhwcnc => "NHWCnc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutDesc {
    pub kind: LayoutKind,
    pub n_tile: usize,
    pub c_tile: usize,
}

impl LayoutDesc {
    pub fn nhwc() -> Self {
        Self {
            kind: LayoutKind::Nhwc,
            n_tile: 1,
            c_tile: 1,
        }
    }

    pub fn nhwcnc(n_tile: usize, c_tile: usize) -> Self {
        Self {
            kind: LayoutKind::Nhwcnc,
            n_tile,
            c_tile,
        }
    }

    /// `kind` with tiles sized to one WMMA fragment of `elem_bits` values.
    pub fn for_fragment(kind: LayoutKind, machine: &MachineModel, elem_bits: u32) -> Self {
        match kind {
            LayoutKind::Nhwc => Self::nhwc(),
            LayoutKind::Nhwcnc => {
                Self::nhwcnc(machine.wmma_m, FRAGMENT_BYTES * 8 / elem_bits as usize)
            }
        }
    }

    fn check(&self, elem_bits: u32) -> Result<()> {
        if self.kind == LayoutKind::Nhwcnc {
            if self.n_tile == 0 || self.c_tile == 0 {
                return Err(Error::Config("NHWCnc tiles must be non-empty".into()));
            }
            if self.c_tile * elem_bits as usize != FRAGMENT_BYTES * 8 {
                return Err(Error::Config(format!(
                    "NHWCnc c_tile {} of {elem_bits}-bit values is not {FRAGMENT_BYTES} bytes wide",
                    self.c_tile
                )));
            }
        }
        Ok(())
    }

    /// Dimensions after padding the tiled axes to whole tiles.
    pub fn padded_dims(&self, dims: [usize; 4]) -> [usize; 4] {
        match self.kind {
            LayoutKind::Nhwc => dims,
            LayoutKind::Nhwcnc => [
                dims[0].div_ceil(self.n_tile) * self.n_tile,
                dims[1],
                dims[2],
                dims[3].div_ceil(self.c_tile) * self.c_tile,
            ],
        }
    }

    pub fn padded_len(&self, dims: [usize; 4]) -> usize {
        self.padded_dims(dims).iter().product()
    }

    /// Element offset without bounds checks. `dims` are the logical dims.
    #[inline]
    pub(crate) fn offset_unchecked(&self, dims: [usize; 4], [n, h, w, c]: [usize; 4]) -> usize {
        match self.kind {
            LayoutKind::Nhwc => ((n * dims[1] + h) * dims[2] + w) * dims[3] + c,
            LayoutKind::Nhwcnc => {
                let c_tiles = dims[3].div_ceil(self.c_tile);
                let outer =
                    ((n / self.n_tile * dims[1] + h) * dims[2] + w) * c_tiles + c / self.c_tile;
                let inner = (n % self.n_tile) * self.c_tile + c % self.c_tile;
                outer * self.n_tile * self.c_tile + inner
            }
        }
    }

    pub fn element_offset(&self, dims: [usize; 4], coord: [usize; 4]) -> Result<usize> {
        const AXES: [&str; 4] = ["n", "h", "w", "c"];
        for axis in 0..4 {
            if coord[axis] >= dims[axis] {
                return Err(bounds(AXES[axis], coord[axis], dims[axis]));
            }
        }
        Ok(self.offset_unchecked(dims, coord))
    }
}

/// Byte offset of element `coord` of a `dims` tensor of `elem_bits` values.
pub fn address_of(
    layout: &LayoutDesc,
    dims: [usize; 4],
    coord: [usize; 4],
    elem_bits: u32,
) -> Result<u64> {
    layout.check(elem_bits)?;
    let off = layout.element_offset(dims, coord)?;
    Ok((off as u64 * elem_bits as u64) / 8)
}

/// A tensor stored in global memory under some layout, one element per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutBuffer {
    pub layout: LayoutDesc,
    pub dims: [usize; 4],
    pub data: Vec<i32>,
}

impl LayoutBuffer {
    pub fn from_tensor(tensor: &Tensor4<i32>, layout: LayoutDesc) -> Self {
        let dims = tensor.dims();
        let mut data = vec![0; layout.padded_len(dims)];
        for n in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    for c in 0..dims[3] {
                        data[layout.offset_unchecked(dims, [n, h, w, c])] = tensor.at([n, h, w, c]);
                    }
                }
            }
        }
        Self { layout, dims, data }
    }

    pub fn get(&self, coord: [usize; 4]) -> Result<i32> {
        Ok(self.data[self.layout.element_offset(self.dims, coord)?])
    }

    pub fn to_tensor(&self) -> Tensor4<i32> {
        Tensor4::from_fn(self.dims, |c| {
            self.data[self.layout.offset_unchecked(self.dims, c)]
        })
    }
}

/// Value-preserving move of `buf` into layout `to`. Padding is zero-filled.
pub fn relayout(buf: &LayoutBuffer, to: LayoutDesc) -> LayoutBuffer {
    let dims = buf.dims;
    let mut data = vec![0; to.padded_len(dims)];
    for n in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                for c in 0..dims[3] {
                    let coord = [n, h, w, c];
                    data[to.offset_unchecked(dims, coord)] =
                        buf.data[buf.layout.offset_unchecked(dims, coord)];
                }
            }
        }
    }
    LayoutBuffer {
        layout: to,
        dims,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub lane: usize,
    pub byte_address: u64,
    pub byte_count: u32,
}

/// Accesses issued by one warp in one load or store instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessTrace {
    accesses: Vec<Access>,
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, lane: usize, byte_address: u64, byte_count: u32) -> Result<()> {
        if !matches!(byte_count, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::Argument(format!(
                "access width must be 1, 2, 4, 8 or 16 bytes, got {byte_count}"
            )));
        }
        self.accesses.push(Access {
            lane,
            byte_address,
            byte_count,
        });
        Ok(())
    }

    pub fn accesses(&self) -> &[Access] {
        &self.accesses
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }
}

pub const SEGMENT_BYTES: u64 = 32;

/// Distinct 32-byte-aligned segments touched by the trace.
pub fn count_transactions(trace: &AccessTrace) -> u64 {
    let mut segs: Vec<u64> = Vec::with_capacity(trace.len() + 1);
    for a in &trace.accesses {
        let first = a.byte_address / SEGMENT_BYTES;
        let last = (a.byte_address + a.byte_count as u64 - 1) / SEGMENT_BYTES;
        segs.extend(first..=last);
    }
    segs.sort_unstable();
    segs.dedup();
    segs.len() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub transactions: u64,
    /// Bytes actually requested (overlaps counted once).
    pub useful_bytes: u64,
    pub fetched_bytes: u64,
}

impl TraceStats {
    pub fn efficiency(&self) -> f64 {
        if self.fetched_bytes == 0 {
            1.0
        } else {
            self.useful_bytes as f64 / self.fetched_bytes as f64
        }
    }
}

pub fn trace_stats(trace: &AccessTrace) -> TraceStats {
    let mut ranges: Vec<(u64, u64)> = trace
        .accesses
        .iter()
        .map(|a| (a.byte_address, a.byte_address + a.byte_count as u64))
        .collect();
    ranges.sort_unstable();
    let mut useful = 0;
    let mut reach = 0;
    for (lo, hi) in ranges {
        let lo = lo.max(reach);
        if hi > lo {
            useful += hi - lo;
        }
        reach = reach.max(hi);
    }
    let transactions = count_transactions(trace);
    TraceStats {
        transactions,
        useful_bytes: useful,
        fetched_bytes: transactions * SEGMENT_BYTES,
    }
}

/// Per-lane accesses of a warp loading one WMMA fragment: `wmma_m` images
/// starting at `n0`, pixel `(h, w)`, a 16-byte channel slice starting at `c0`.
/// Rows past the batch are not loaded.
pub fn wmma_tile_load_trace(
    layout: &LayoutDesc,
    dims: [usize; 4],
    tile_origin: [usize; 4],
    machine: &MachineModel,
    elem_bits: u32,
) -> Result<AccessTrace> {
    layout.check(elem_bits)?;
    let [n0, h, w, c0] = tile_origin;
    let slice = FRAGMENT_BYTES * 8 / elem_bits as usize;
    if layout.kind == LayoutKind::Nhwcnc && (n0 % layout.n_tile != 0 || c0 % layout.c_tile != 0) {
        return Err(Error::Alignment(format!(
            "tile origin (n={n0}, c={c0}) is not aligned to NHWCnc tiles ({} x {})",
            layout.n_tile, layout.c_tile
        )));
    }
    if c0 % slice != 0 {
        return Err(Error::Alignment(format!(
            "channel origin {c0} is not a multiple of the {slice}-channel fragment slice"
        )));
    }
    if c0 + slice > dims[3] {
        return Err(bounds("c", c0 + slice - 1, dims[3]));
    }
    layout.element_offset(dims, tile_origin)?;
    let mut trace = AccessTrace::new();
    for (lane, n) in (n0..(n0 + machine.wmma_m).min(dims[0])).enumerate() {
        let addr = address_of(layout, dims, [n, h, w, c0], elem_bits)?;
        trace.push(lane, addr, FRAGMENT_BYTES as u32)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescingRow {
    pub layout: LayoutKind,
    pub tile: String,
    pub transactions: u64,
    pub useful_bytes: u64,
    pub fetched_bytes: u64,
    pub efficiency: f64,
}

/// Fragment-load statistics of a few representative tiles of `conv`'s input
/// under both layouts. Channels are padded to whole fragment slices.
pub fn coalescing_report(conv: &ConvConfig, machine: &MachineModel) -> Result<Vec<CoalescingRow>> {
    conv.validate()?;
    let bits = conv.act_bits;
    let slice = FRAGMENT_BYTES * 8 / bits as usize;
    let dims = [
        conv.batch,
        conv.height,
        conv.width,
        conv.in_channels.div_ceil(slice) * slice,
    ];
    let last_c = dims[3] - slice;
    let origins = [
        [0, 0, 0, 0],
        [0, conv.height / 2, conv.width / 2, 0],
        [0, conv.height - 1, conv.width - 1, last_c],
    ];
    let mut rows = Vec::new();
    for kind in [LayoutKind::Nhwc, LayoutKind::Nhwcnc] {
        let layout = LayoutDesc::for_fragment(kind, machine, bits);
        for origin in origins {
            let st = trace_stats(&wmma_tile_load_trace(&layout, dims, origin, machine, bits)?);
            rows.push(CoalescingRow {
                layout: kind,
                tile: format!(
                    "n{}:h{}:w{}:c{}",
                    origin[0], origin[1], origin[2], origin[3]
                ),
                transactions: st.transactions,
                useful_bytes: st.useful_bytes,
                fetched_bytes: st.fetched_bytes,
                efficiency: st.efficiency(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn t4() -> MachineModel {
        MachineModel::t4()
    }

    #[test]
    fn nhwc_origin_is_zero() {
        assert_eq!(
            address_of(&LayoutDesc::nhwc(), [2, 3, 3, 8], [0, 0, 0, 0], 4).unwrap(),
            0
        );
    }

    /// Enumerates the byte spans a set of coordinates occupies.
    fn spans(layout: &LayoutDesc, dims: [usize; 4]) -> Vec<(u64, u64)> {
        let mut bytes = BTreeSet::new();
        for n in 0..8 {
            for c in 0..32 {
                let bit = layout.element_offset(dims, [n, 0, 0, c]).unwrap() as u64 * 4;
                bytes.insert(bit / 8);
            }
        }
        let mut out: Vec<(u64, u64)> = Vec::new();
        for b in bytes {
            match out.last_mut() {
                Some((_, end)) if *end == b => *end = b + 1,
                _ => out.push((b, b + 1)),
            }
        }
        out
    }

    #[test]
    fn nhwcnc_fragment_is_one_contiguous_block() {
        let s = spans(&LayoutDesc::nhwcnc(8, 32), [8, 1, 1, 1024]);
        assert_eq!(s, vec![(0, 128)]);
    }

    #[test]
    fn nhwc_fragment_is_scattered() {
        let s = spans(&LayoutDesc::nhwc(), [8, 1, 1, 1024]);
        let want: Vec<(u64, u64)> = (0..8).map(|n| (n * 512, n * 512 + 16)).collect();
        assert_eq!(s, want);
    }

    #[test]
    fn out_of_range_coordinate() {
        assert!(matches!(
            address_of(&LayoutDesc::nhwc(), [1, 2, 2, 4], [0, 2, 0, 0], 8),
            Err(Error::Bounds { .. })
        ));
        assert!(address_of(&LayoutDesc::nhwcnc(8, 16), [1, 1, 1, 8], [0, 0, 0, 0], 4).is_err());
    }

    #[test]
    fn address_injective_small_tensors() {
        for dims in [[3, 2, 3, 5], [8, 2, 2, 32], [9, 1, 2, 40]] {
            for layout in [
                LayoutDesc::nhwc(),
                LayoutDesc::nhwcnc(8, 32),
                LayoutDesc::nhwcnc(4, 16),
            ] {
                let mut seen = BTreeSet::new();
                for n in 0..dims[0] {
                    for h in 0..dims[1] {
                        for w in 0..dims[2] {
                            for c in 0..dims[3] {
                                let off = layout.element_offset(dims, [n, h, w, c]).unwrap();
                                assert!(off < layout.padded_len(dims));
                                assert!(seen.insert(off), "{layout:?} {dims:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn relayout_round_trip_and_point_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [10, 6, 6, 48];
        let x = Tensor4::random_signed(dims, 4, &mut rng);
        let a = LayoutBuffer::from_tensor(&x, LayoutDesc::nhwc());
        let b_desc = LayoutDesc::nhwcnc(8, 32);
        assert_eq!(relayout(&a, LayoutDesc::nhwc()), a);
        let b = relayout(&a, b_desc);
        assert_eq!(relayout(&b, LayoutDesc::nhwc()), a);
        assert_eq!(b.to_tensor(), x);

        let mut multiset_a: Vec<i32> = a.data.clone();
        let mut multiset_b: Vec<i32> = b.data.to_vec();
        // padding contributes zeros only
        let pad = b.data.len() - a.data.len();
        multiset_a.extend(std::iter::repeat_n(0, pad));
        multiset_a.sort_unstable();
        multiset_b.sort_unstable();
        assert_eq!(multiset_a, multiset_b);

        let mut single = Tensor4::zeros(dims);
        single.set([3, 5, 5, 40], 7);
        let moved = relayout(
            &LayoutBuffer::from_tensor(&single, LayoutDesc::nhwc()),
            b_desc,
        );
        let at = b_desc.element_offset(dims, [3, 5, 5, 40]).unwrap();
        assert_eq!(moved.data[at], 7);
        assert_eq!(moved.data.iter().filter(|v| **v != 0).count(), 1);
    }

    fn trace_of(items: impl IntoIterator<Item = (u64, u32)>) -> AccessTrace {
        let mut t = AccessTrace::new();
        for (lane, (addr, count)) in items.into_iter().enumerate() {
            t.push(lane, addr, count).unwrap();
        }
        t
    }

    #[test]
    fn transaction_counting() {
        assert_eq!(
            count_transactions(&trace_of((0..32).map(|l| (l * 4, 4)))),
            4
        );
        let strided = trace_of((0..8).map(|l| (l * 512, 16)));
        let st = trace_stats(&strided);
        assert_eq!(st.transactions, 8);
        assert_eq!(st.useful_bytes, 128);
        assert_eq!(st.fetched_bytes, 256);
        assert!((st.efficiency() - 0.5).abs() < 1e-12);
        assert_eq!(count_transactions(&AccessTrace::new()), 0);
        // an unaligned 16-byte access straddles two segments
        assert_eq!(count_transactions(&trace_of([(24, 16)])), 2);
        assert!(AccessTrace::new().push(0, 0, 3).is_err());
    }

    #[test]
    fn fragment_load_transactions() {
        let m = t4();
        let dims = [8, 2, 2, 1024];
        let tiled = LayoutDesc::nhwcnc(8, 32);
        let t = wmma_tile_load_trace(&tiled, dims, [0, 1, 1, 64], &m, 4).unwrap();
        assert_eq!(count_transactions(&t), 4);
        let t = wmma_tile_load_trace(&LayoutDesc::nhwc(), dims, [0, 1, 1, 64], &m, 4).unwrap();
        assert_eq!(count_transactions(&t), 8);
        assert!(matches!(
            wmma_tile_load_trace(&tiled, dims, [1, 0, 0, 0], &m, 4),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            wmma_tile_load_trace(&tiled, dims, [0, 0, 0, 16], &m, 4),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn degenerate_single_image_layouts_coincide() {
        let m = t4();
        let dims = [1, 3, 3, 64];
        let a = wmma_tile_load_trace(&LayoutDesc::nhwc(), dims, [0, 1, 2, 32], &m, 4).unwrap();
        let b =
            wmma_tile_load_trace(&LayoutDesc::nhwcnc(1, 32), dims, [0, 1, 2, 32], &m, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(count_transactions(&a), count_transactions(&b));
    }

    #[test]
    fn report_rows() {
        let c = ConvConfig::square(8, 7, 1024, 1024, 3, 1, 1);
        let rows = coalescing_report(&c, &t4()).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let want = if r.layout == LayoutKind::Nhwc { 8 } else { 4 };
            assert_eq!(r.transactions, want, "{r:?}");
            assert_eq!(r.useful_bytes, 128);
        }
    }
}
