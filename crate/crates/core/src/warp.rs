//! Bit-exact model of a 32-lane warp: shuffle intrinsics, register-level
//! packing of low-precision outputs and the redistribution that makes every
//! lane of a packed store carry useful data.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WARP_SIZE: usize = 32;

/// One 32-bit register across the 32 lanes of a warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct WarpState {
    pub lanes: [u32; WARP_SIZE],
}

impl WarpState {
    pub fn new(lanes: [u32; WARP_SIZE]) -> Self {
        Self { lanes }
    }

    pub fn from_fn(f: impl FnMut(usize) -> u32) -> Self {
        Self {
            lanes: std::array::from_fn(f),
        }
    }
}

impl fmt::Display for WarpState {
    /// Four rows of eight lanes, fixed-width hex.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in 0..4 {
            write!(f, "lanes {:>2}-{:>2}:", row * 8, row * 8 + 7)?;
            for lane in row * 8..row * 8 + 8 {
                write!(f, " {:08x}", self.lanes[lane])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn check_width(width: usize) -> Result<()> {
    if !matches!(width, 2 | 4 | 8 | 16 | 32) {
        return Err(Error::Argument(format!(
            "shuffle width must be 2, 4, 8, 16 or 32, got {width}"
        )));
    }
    Ok(())
}

/// `__shfl_down_sync` semantics: within each aligned group of `width` lanes,
/// lane `i` reads lane `i + offset` if that lane is in the same group and
/// keeps its own value otherwise.
pub fn shuffle_down(w: &WarpState, offset: usize, width: usize) -> Result<WarpState> {
    check_width(width)?;
    if offset >= width {
        return Err(Error::Argument(format!(
            "shuffle offset {offset} must be below width {width}"
        )));
    }
    Ok(WarpState::from_fn(|lane| {
        let group_end = (lane / width + 1) * width;
        let src = lane + offset;
        if src < group_end {
            w.lanes[src]
        } else {
            w.lanes[lane]
        }
    }))
}

/// `__shfl_sync` semantics within groups of `width`: lane `i` reads the lane
/// `src(i)` of its own group (`src` is taken modulo `width`).
pub fn shuffle_idx(w: &WarpState, width: usize, src: impl Fn(usize) -> usize) -> Result<WarpState> {
    check_width(width)?;
    Ok(WarpState::from_fn(|lane| {
        let base = lane / width * width;
        w.lanes[base + src(lane) % width]
    }))
}

/// Number of lanes whose values combine into one packed 32-bit word.
pub fn lanes_per_word(bits: u32) -> Result<usize> {
    match bits {
        4 => Ok(8),
        8 => Ok(4),
        _ => Err(Error::Argument(format!(
            "packing supports 4- or 8-bit values, got {bits}"
        ))),
    }
}

/// Packs one `bits`-wide value per lane into 32-bit words.
///
/// Runs `log2(32 / bits)` combining rounds. Round `r` shuffles down by
/// `2^r` within groups of `32 / bits` lanes and ORs the partner's word in,
/// shifted left by `2^r * bits`. Afterwards lane `g * (32 / bits)` holds the
/// values of its group packed lowest-lane-first; the other lanes hold partial
/// words that are don't-care. Returns the state after every round.
pub fn pack_rounds(w: &WarpState, bits: u32) -> Result<Vec<WarpState>> {
    let group = lanes_per_word(bits)?;
    let mask = (1u32 << bits) - 1;
    if let Some(lane) = w.lanes.iter().position(|v| v & !mask != 0) {
        return Err(Error::Argument(format!(
            "lane {lane} holds {:#x}, which does not fit in {bits} bits",
            w.lanes[lane]
        )));
    }
    let mut rounds = Vec::new();
    let mut cur = *w;
    let mut offset = 1;
    while offset < group {
        let partner = shuffle_down(&cur, offset, group)?;
        let shift = offset as u32 * bits;
        cur = WarpState::from_fn(|lane| cur.lanes[lane] | (partner.lanes[lane] << shift));
        rounds.push(cur);
        offset *= 2;
    }
    Ok(rounds)
}

pub fn pack_lanes(w: &WarpState, bits: u32) -> Result<WarpState> {
    Ok(*pack_rounds(w, bits)?.last().expect("at least one round"))
}

/// 4-bit packing across groups of eight lanes (offsets 1, 2, 4; shifts 4,
/// 8, 16). Lane `8k` ends up with the nibbles of lanes `8k..8k+8`, nibble
/// `i` at bits `[4i, 4i + 4)`.
pub fn pack_int4(w: &WarpState) -> Result<WarpState> {
    pack_lanes(w, 4)
}

pub fn unpack_int4(word: u32) -> [u8; 8] {
    std::array::from_fn(|i| ((word >> (4 * i)) & 0xF) as u8)
}

pub fn unpack_int8(word: u32) -> [u8; 4] {
    word.to_le_bytes()
}

/// Two's-complement encoding of a signed value, saturated to `bits` bits.
pub fn clip_to_field(value: i32, bits: u32) -> u32 {
    let (lo, hi) = crate::tensor::signed_range(bits);
    (value.clamp(lo, hi) as u32) & ((1u32 << bits) - 1)
}

/// Inverse of [`clip_to_field`] for values already in range.
pub fn sign_extend(field: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((field << shift) as i32) >> shift
}

/// Registers after redistribution, with a per-lane usefulness mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedRegisters {
    pub regs: Vec<WarpState>,
    /// Bit `lane` of `useful[r]` is set when lane `lane` of `regs[r]` holds a
    /// packed word rather than a don't-care value.
    pub useful: Vec<u32>,
}

impl PackedRegisters {
    pub fn useful_lanes(&self) -> usize {
        self.useful.iter().map(|m| m.count_ones() as usize).sum()
    }

    /// Useful words in register, lane order.
    pub fn useful_words(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (reg, mask) in self.regs.iter().zip(&self.useful) {
            for lane in 0..WARP_SIZE {
                if mask >> lane & 1 == 1 {
                    out.push(reg.lanes[lane]);
                }
            }
        }
        out
    }
}

/// Gathers packed words from several register tiles so that every lane of a
/// store carries one.
///
/// After packing, tile `t` only has useful words at lanes `g * group`.
/// Output register `t / group` receives them at lanes `g * group + t % group`
/// via one index shuffle per tile, so `group` tiles fill all 32 lanes.
pub fn redistribute_packed_groups(tiles: &[WarpState], group: usize) -> Result<PackedRegisters> {
    if tiles.is_empty() {
        return Err(Error::Argument(
            "redistribution needs at least one tile".into(),
        ));
    }
    check_width(group)?;
    let out_regs = tiles.len().div_ceil(group);
    let mut regs = vec![WarpState::default(); out_regs];
    let mut useful = vec![0u32; out_regs];
    for (t, tile) in tiles.iter().enumerate() {
        let slot = t % group;
        let gathered = shuffle_idx(tile, group, |_| 0)?;
        let reg = &mut regs[t / group];
        for lane in (slot..WARP_SIZE).step_by(group) {
            reg.lanes[lane] = gathered.lanes[lane];
            useful[t / group] |= 1 << lane;
        }
    }
    Ok(PackedRegisters { regs, useful })
}

/// [`redistribute_packed_groups`] for 4-bit packing (groups of eight lanes).
pub fn redistribute_packed(tiles: &[WarpState]) -> Result<PackedRegisters> {
    redistribute_packed_groups(tiles, 8)
}

/// Accumulation of `terms` products of `act_bits` by `wgt_bits` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumSpec {
    pub act_bits: u32,
    pub wgt_bits: u32,
    pub terms: u64,
}

/// Conservative accumulator width: `ceil(log2(2^a * 2^w * terms)) + 1`.
pub fn bits_required(a: &AccumSpec) -> Result<u32> {
    if a.terms == 0 {
        return Err(Error::Argument("terms must be at least 1".into()));
    }
    let log_terms = a.terms.next_power_of_two().trailing_zeros();
    Ok(a.act_bits + a.wgt_bits + log_terms + 1)
}

/// Smallest input-channel count `C` with `2^a * 2^w * taps * C >=
/// 2^(acc_bits - 1)`, i.e. the depth at which an `acc_bits` accumulator
/// could first be filled.
pub fn channels_to_saturate(acc_bits: u32, act_bits: u32, wgt_bits: u32, taps: u64) -> Result<u64> {
    if taps == 0 {
        return Err(Error::Argument("taps must be at least 1".into()));
    }
    if acc_bits == 0 || acc_bits > 63 || act_bits + wgt_bits > 62 {
        return Err(Error::Argument(format!(
            "unsupported widths: acc {acc_bits}, act {act_bits}, wgt {wgt_bits}"
        )));
    }
    let target = 1u128 << (acc_bits - 1);
    let per_channel = (1u128 << (act_bits + wgt_bits)) * taps as u128;
    Ok(target.div_ceil(per_channel) as u64)
}
