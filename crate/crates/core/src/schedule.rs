//! The tiling/ordering schedule, the machine it targets and the finite knob
//! space the tuner explores.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvConfig;
use crate::error::{Error, Result};
use crate::layout::LayoutKind;
use crate::workload::Workload;

/// One point of the schedule space: six tiling/ordering knobs plus the
/// optimization flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub blk_row_warps: u32,
    pub blk_col_warps: u32,
    pub warp_row_tiles: u32,
    pub warp_col_tiles: u32,
    pub chunk: u32,
    pub reorder_inner: bool,
    #[serde(default)]
    pub duplicate_aware: bool,
    #[serde(default)]
    pub register_packing: bool,
    #[serde(default = "default_layout")]
    pub layout: LayoutKind,
}

fn default_layout() -> LayoutKind {
    LayoutKind::Nhwc
}

impl ScheduleConfig {
    pub fn new(
        blk_row_warps: u32,
        blk_col_warps: u32,
        warp_row_tiles: u32,
        warp_col_tiles: u32,
        chunk: u32,
        reorder_inner: bool,
    ) -> Self {
        Self {
            blk_row_warps,
            blk_col_warps,
            warp_row_tiles,
            warp_col_tiles,
            chunk,
            reorder_inner,
            duplicate_aware: false,
            register_packing: false,
            layout: LayoutKind::Nhwc,
        }
    }

    pub fn with_flags(mut self, flags: OptFlags) -> Self {
        self.duplicate_aware = flags.duplicate_aware;
        self.register_packing = flags.register_packing;
        self.layout = flags.layout;
        self
    }

    pub fn flags(&self) -> OptFlags {
        OptFlags {
            duplicate_aware: self.duplicate_aware,
            register_packing: self.register_packing,
            layout: self.layout,
        }
    }

    pub fn warps_per_block(&self) -> u32 {
        self.blk_row_warps * self.blk_col_warps
    }

    pub fn knob(&self, knob: Knob) -> u32 {
        match knob {
            Knob::BlkRowWarps => self.blk_row_warps,
            Knob::BlkColWarps => self.blk_col_warps,
            Knob::WarpRowTiles => self.warp_row_tiles,
            Knob::WarpColTiles => self.warp_col_tiles,
            Knob::Chunk => self.chunk,
            Knob::ReorderInner => self.reorder_inner as u32,
        }
    }

    pub fn set_knob(&mut self, knob: Knob, value: u32) {
        match knob {
            Knob::BlkRowWarps => self.blk_row_warps = value,
            Knob::BlkColWarps => self.blk_col_warps = value,
            Knob::WarpRowTiles => self.warp_row_tiles = value,
            Knob::WarpColTiles => self.warp_col_tiles = value,
            Knob::Chunk => self.chunk = value,
            Knob::ReorderInner => self.reorder_inner = value != 0,
        }
    }

    pub fn knob_vector(&self) -> [u32; 6] {
        Knob::ALL.map(|k| self.knob(k))
    }

    /// Number of knobs on which two schedules differ.
    pub fn hamming(&self, other: &ScheduleConfig) -> u32 {
        Knob::ALL
            .iter()
            .filter(|k| self.knob(**k) != other.knob(**k))
            .count() as u32
    }
}

impl fmt::Display for ScheduleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{},{},{})",
            self.blk_row_warps,
            self.blk_col_warps,
            self.warp_row_tiles,
            self.warp_col_tiles,
            self.chunk,
            self.reorder_inner
        )?;
        let mut flags = Vec::new();
        if self.duplicate_aware {
            flags.push("dup");
        }
        if self.register_packing {
            flags.push("pack");
        }
        if self.layout == LayoutKind::Nhwcnc {
            flags.push("nhwcnc");
        }
        if !flags.is_empty() {
            write!(f, "+{}", flags.join("+"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    BlkRowWarps,
    BlkColWarps,
    WarpRowTiles,
    WarpColTiles,
    Chunk,
    ReorderInner,
}

impl Knob {
    pub const ALL: [Knob; 6] = [
        Knob::BlkRowWarps,
        Knob::BlkColWarps,
        Knob::WarpRowTiles,
        Knob::WarpColTiles,
        Knob::Chunk,
        Knob::ReorderInner,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Knob::BlkRowWarps => "blk_row_warps",
            Knob::BlkColWarps => "blk_col_warps",
            Knob::WarpRowTiles => "warp_row_tiles",
            Knob::WarpColTiles => "warp_col_tiles",
            Knob::Chunk => "chunk",
            Knob::ReorderInner => "reorder_inner",
        }
    }
}

/// Optimization switches that are fixed for one tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OptFlags {
    pub duplicate_aware: bool,
    pub register_packing: bool,
    pub layout: LayoutKind,
}

impl OptFlags {
    pub fn none() -> Self {
        Self {
            duplicate_aware: false,
            register_packing: false,
            layout: LayoutKind::Nhwc,
        }
    }

    pub fn all() -> Self {
        Self {
            duplicate_aware: true,
            register_packing: true,
            layout: LayoutKind::Nhwcnc,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.duplicate_aware {
            parts.push("dup");
        }
        if self.register_packing {
            parts.push("pack");
        }
        if self.layout == LayoutKind::Nhwcnc {
            parts.push("nhwcnc");
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl Default for OptFlags {
    fn default() -> Self {
        Self::all()
    }
}

fn pow2_default() -> Vec<u32> {
    vec![1, 2, 4, 8]
}

fn reorder_default() -> Vec<bool> {
    vec![false, true]
}

/// Candidate values per knob. Every point also carries `flags`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobSpace {
    #[serde(default = "pow2_default")]
    pub blk_row_warps: Vec<u32>,
    #[serde(default = "pow2_default")]
    pub blk_col_warps: Vec<u32>,
    #[serde(default = "pow2_default")]
    pub warp_row_tiles: Vec<u32>,
    #[serde(default = "pow2_default")]
    pub warp_col_tiles: Vec<u32>,
    #[serde(default = "pow2_default")]
    pub chunk: Vec<u32>,
    #[serde(default = "reorder_default")]
    pub reorder_inner: Vec<bool>,
    #[serde(default)]
    pub flags: OptFlags,
}

impl Default for KnobSpace {
    fn default() -> Self {
        Self {
            blk_row_warps: pow2_default(),
            blk_col_warps: pow2_default(),
            warp_row_tiles: pow2_default(),
            warp_col_tiles: pow2_default(),
            chunk: pow2_default(),
            reorder_inner: reorder_default(),
            flags: OptFlags::default(),
        }
    }
}

impl KnobSpace {
    pub fn with_flags(mut self, flags: OptFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for knob in Knob::ALL {
            let values = self.values(knob);
            if values.is_empty() {
                return Err(Error::Config(format!(
                    "knob {} has no candidates",
                    knob.name()
                )));
            }
            let mut sorted = values.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != values.len() {
                return Err(Error::Config(format!(
                    "knob {} lists a value twice",
                    knob.name()
                )));
            }
            if knob != Knob::ReorderInner && values.iter().any(|v| !v.is_power_of_two()) {
                return Err(Error::Config(format!(
                    "knob {} values must be powers of two",
                    knob.name()
                )));
            }
        }
        Ok(())
    }

    pub fn values(&self, knob: Knob) -> Vec<u32> {
        match knob {
            Knob::BlkRowWarps => self.blk_row_warps.clone(),
            Knob::BlkColWarps => self.blk_col_warps.clone(),
            Knob::WarpRowTiles => self.warp_row_tiles.clone(),
            Knob::WarpColTiles => self.warp_col_tiles.clone(),
            Knob::Chunk => self.chunk.clone(),
            Knob::ReorderInner => self.reorder_inner.iter().map(|b| *b as u32).collect(),
        }
    }

    fn len_of(&self, knob: Knob) -> usize {
        match knob {
            Knob::BlkRowWarps => self.blk_row_warps.len(),
            Knob::BlkColWarps => self.blk_col_warps.len(),
            Knob::WarpRowTiles => self.warp_row_tiles.len(),
            Knob::WarpColTiles => self.warp_col_tiles.len(),
            Knob::Chunk => self.chunk.len(),
            Knob::ReorderInner => self.reorder_inner.len(),
        }
    }

    /// Size of the Cartesian product, before validity filtering.
    pub fn len(&self) -> usize {
        Knob::ALL.iter().map(|k| self.len_of(*k)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `index`-th point in mixed-radix order (last knob fastest).
    pub fn point(&self, mut index: usize) -> ScheduleConfig {
        let mut digits = [0usize; 6];
        for (slot, knob) in Knob::ALL.iter().enumerate().rev() {
            let n = self.len_of(*knob);
            digits[slot] = index % n;
            index /= n;
        }
        ScheduleConfig {
            blk_row_warps: self.blk_row_warps[digits[0]],
            blk_col_warps: self.blk_col_warps[digits[1]],
            warp_row_tiles: self.warp_row_tiles[digits[2]],
            warp_col_tiles: self.warp_col_tiles[digits[3]],
            chunk: self.chunk[digits[4]],
            reorder_inner: self.reorder_inner[digits[5]],
            duplicate_aware: self.flags.duplicate_aware,
            register_packing: self.flags.register_packing,
            layout: self.flags.layout,
        }
    }

    pub fn contains(&self, sched: &ScheduleConfig) -> bool {
        sched.flags() == self.flags
            && Knob::ALL
                .iter()
                .all(|k| self.values(*k).contains(&sched.knob(*k)))
    }

    pub fn iter(&self) -> impl Iterator<Item = ScheduleConfig> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

fn machine_default_max_warps() -> u32 {
    32
}
fn machine_default_max_blocks() -> u32 {
    16
}
fn machine_default_max_regs() -> u32 {
    255
}
fn machine_default_base_regs() -> u32 {
    24
}
fn machine_default_hiding() -> u32 {
    8
}

/// Throughput and capacity constants of a Tensor-Core GPU.
///
/// Throughputs (`peak_mma_per_cycle`, `dram_bytes_per_cycle`,
/// `smem_bytes_per_cycle`) are device-wide totals; the cycle estimate splits
/// them evenly across SMs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineModel {
    pub num_sms: u32,
    pub smem_per_sm: u64,
    pub regs_per_sm: u64,
    pub warp_size: u32,
    pub wmma_m: usize,
    pub wmma_n: usize,
    pub wmma_k: usize,
    pub transaction_bytes: u64,
    pub peak_mma_per_cycle: f64,
    pub dram_bytes_per_cycle: f64,
    pub smem_bytes_per_cycle: f64,
    #[serde(default = "machine_default_max_warps")]
    pub max_warps_per_block: u32,
    #[serde(default = "machine_default_max_warps")]
    pub max_warps_per_sm: u32,
    #[serde(default = "machine_default_max_blocks")]
    pub max_blocks_per_sm: u32,
    #[serde(default = "machine_default_max_regs")]
    pub max_regs_per_thread: u32,
    /// Registers every thread needs besides accumulators and fragments.
    #[serde(default = "machine_default_base_regs")]
    pub base_regs_per_thread: u32,
    /// Resident warps per SM needed to reach full throughput.
    #[serde(default = "machine_default_hiding")]
    pub latency_hiding_warps: u32,
}

impl MachineModel {
    /// T4-like defaults for 4-bit MMA (`m8n8k32`).
    pub fn t4() -> Self {
        Self {
            num_sms: 40,
            smem_per_sm: 64 * 1024,
            regs_per_sm: 65536,
            warp_size: 32,
            wmma_m: 8,
            wmma_n: 8,
            wmma_k: 32,
            transaction_bytes: 32,
            // one m8n8k32 per SM per cycle
            peak_mma_per_cycle: 40.0,
            // ~320 GB/s at ~1.59 GHz
            dram_bytes_per_cycle: 200.0,
            smem_bytes_per_cycle: 40.0 * 128.0,
            max_warps_per_block: 32,
            max_warps_per_sm: 32,
            max_blocks_per_sm: 16,
            max_regs_per_thread: 255,
            base_regs_per_thread: 24,
            latency_hiding_warps: 8,
        }
    }

    /// T4-like defaults with the MMA depth matching `act_bits`.
    pub fn t4_for(act_bits: u32) -> Self {
        let mut m = Self::t4();
        m.wmma_k = expected_wmma_k(act_bits);
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.warp_size != 32 {
            return Err(Error::Config(format!(
                "warp_size must be 32, got {}",
                self.warp_size
            )));
        }
        if self.transaction_bytes != 32 {
            return Err(Error::Config(format!(
                "transaction_bytes must be 32, got {}",
                self.transaction_bytes
            )));
        }
        if self.wmma_m == 0 || self.wmma_n == 0 || self.wmma_k == 0 {
            return Err(Error::Config("WMMA dimensions must be positive".into()));
        }
        if self.num_sms == 0 || self.max_blocks_per_sm == 0 || self.latency_hiding_warps == 0 {
            return Err(Error::Config("SM counts must be positive".into()));
        }
        for (name, v) in [
            ("peak_mma_per_cycle", self.peak_mma_per_cycle),
            ("dram_bytes_per_cycle", self.dram_bytes_per_cycle),
            ("smem_bytes_per_cycle", self.smem_bytes_per_cycle),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for MachineModel {
    fn default() -> Self {
        Self::t4()
    }
}

/// MMA accumulation depth for a given activation precision.
pub fn expected_wmma_k(act_bits: u32) -> usize {
    if act_bits == 8 {
        16
    } else {
        32
    }
}

/// One reason a schedule cannot run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    NotPowerOfTwo { knob: &'static str, value: u32 },
    WarpsPerBlock { warps: u32, limit: u32 },
    BlockTileRows { rows: usize, limit: usize },
    BlockTileCols { cols: usize, limit: usize },
    SharedMemory { bytes: u64, limit: u64 },
    Chunk { chunk: u32, k_steps: usize },
    Registers { per_thread: u32, per_block: u64 },
    MmaShape { wmma_k: usize, act_bits: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotPowerOfTwo { knob, value } => {
                write!(f, "{knob} = {value} is not a positive power of two")
            }
            Violation::WarpsPerBlock { warps, limit } => {
                write!(f, "warps per block {warps} > {limit}")
            }
            Violation::BlockTileRows { rows, limit } => {
                write!(f, "block tile rows {rows} exceed padded M {limit}")
            }
            Violation::BlockTileCols { cols, limit } => {
                write!(f, "block tile cols {cols} exceed padded N {limit}")
            }
            Violation::SharedMemory { bytes, limit } => {
                write!(f, "shared memory {bytes} bytes > {limit} per SM")
            }
            Violation::Chunk { chunk, k_steps } => {
                write!(
                    f,
                    "chunk {chunk} does not divide {k_steps} k-steps per kernel position"
                )
            }
            Violation::Registers {
                per_thread,
                per_block,
            } => write!(
                f,
                "registers: {per_thread} per thread, {per_block} per block exceed limits"
            ),
            Violation::MmaShape { wmma_k, act_bits } => {
                write!(
                    f,
                    "wmma_k {wmma_k} does not match {act_bits}-bit activations"
                )
            }
        }
    }
}

/// All rule violations of `sched` on `conv` and `machine`; empty means valid.
pub fn validate(
    sched: &ScheduleConfig,
    conv: &ConvConfig,
    machine: &MachineModel,
) -> Result<Vec<Violation>> {
    Ok(Workload::new(*conv, *machine)?.violations(sched))
}

/// Shared memory one thread block allocates: input staging, weight staging
/// and output staging.
pub fn smem_bytes(
    sched: &ScheduleConfig,
    conv: &ConvConfig,
    machine: &MachineModel,
) -> Result<u64> {
    Ok(Workload::new(*conv, *machine)?.smem(sched).total())
}

/// Changes exactly one knob to a different candidate value. The knob is
/// drawn uniformly among knobs with more than one candidate, the new value
/// uniformly among the remaining candidates.
pub fn mutate<R: Rng + ?Sized>(
    sched: &ScheduleConfig,
    space: &KnobSpace,
    rng: &mut R,
) -> Result<ScheduleConfig> {
    let mutable: Vec<Knob> = Knob::ALL
        .into_iter()
        .filter(|k| space.len_of(*k) > 1)
        .collect();
    if mutable.is_empty() {
        return Err(Error::NoMutation);
    }
    let knob = mutable[rng.random_range(0..mutable.len())];
    let current = sched.knob(knob);
    let others: Vec<u32> = space
        .values(knob)
        .into_iter()
        .filter(|v| *v != current)
        .collect();
    let mut out = *sched;
    out.set_knob(knob, others[rng.random_range(0..others.len())]);
    Ok(out)
}

/// Every valid point of `space`, in mixed-radix order.
pub fn enumerate(
    space: &KnobSpace,
    conv: &ConvConfig,
    machine: &MachineModel,
) -> Result<Vec<ScheduleConfig>> {
    Workload::new(*conv, *machine)?.enumerate(space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashSet, VecDeque};

    fn stage2() -> ConvConfig {
        ConvConfig::square(8, 56, 64, 64, 3, 1, 1)
    }

    #[test]
    fn known_good_stage2_schedule() {
        let s = ScheduleConfig::new(2, 2, 4, 2, 2, false);
        let v = validate(&s, &stage2(), &MachineModel::t4()).unwrap();
        assert!(v.is_empty(), "{v:?}");
        let all_on = s.with_flags(OptFlags::all());
        assert!(validate(&all_on, &stage2(), &MachineModel::t4())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn too_many_warps() {
        let s = ScheduleConfig::new(8, 8, 1, 1, 1, false);
        let v = validate(&s, &stage2(), &MachineModel::t4()).unwrap();
        assert!(v.contains(&Violation::WarpsPerBlock {
            warps: 64,
            limit: 32
        }));
        assert!(v.iter().any(|x| x.to_string() == "warps per block 64 > 32"));
    }

    #[test]
    fn oversized_staging_is_rejected() {
        // 512-row tile staging all nine taps of two k-steps without dedup:
        // 512 * 9 * 2 * 16 bytes alone is 144 KiB
        let s = ScheduleConfig::new(8, 1, 8, 1, 2, false);
        let v = validate(&s, &stage2(), &MachineModel::t4()).unwrap();
        assert!(
            v.iter()
                .any(|x| matches!(x, Violation::SharedMemory { .. })),
            "{v:?}"
        );
        assert!(v.iter().any(|x| x.to_string().starts_with("shared memory")));
    }

    #[test]
    fn chunk_must_divide_k_steps() {
        // 64 channels / 32 = 2 k-steps per kernel position
        let s = ScheduleConfig::new(1, 1, 1, 1, 4, false);
        let v = validate(&s, &stage2(), &MachineModel::t4()).unwrap();
        assert!(v.contains(&Violation::Chunk {
            chunk: 4,
            k_steps: 2
        }));
    }

    #[test]
    fn mma_depth_must_match_precision() {
        let s = ScheduleConfig::new(1, 1, 1, 1, 1, false);
        let v = validate(&s, &stage2().with_bits(8, 8), &MachineModel::t4()).unwrap();
        assert!(v.contains(&Violation::MmaShape {
            wmma_k: 32,
            act_bits: 8
        }));
        let v = validate(&s, &stage2().with_bits(8, 8), &MachineModel::t4_for(8)).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn packing_divides_output_staging_by_eight() {
        let c = stage2();
        let m = MachineModel::t4();
        let w = Workload::new(c, m).unwrap();
        for sched in KnobSpace::default().with_flags(OptFlags::none()).iter() {
            let off = w.smem(&sched);
            let mut packed = sched;
            packed.register_packing = true;
            let on = w.smem(&packed);
            assert_eq!(on.output * 8, off.output);
            assert_eq!(on.input, off.input);
        }
        let single = ScheduleConfig::new(1, 1, 1, 1, 1, false);
        assert_eq!(w.smem(&single).output, 256);
    }

    #[test]
    fn dedup_staging_is_smaller_when_tile_spans_adjacent_pixels() {
        // N = 1 so that rows of a tile are horizontally adjacent pixels
        let c = ConvConfig::square(1, 16, 32, 32, 3, 1, 1);
        let w = Workload::new(c, MachineModel::t4()).unwrap();
        for rows in [1u32, 2, 4] {
            let s = ScheduleConfig::new(rows, 1, 1, 1, 1, false);
            let mut d = s;
            d.duplicate_aware = true;
            assert!(w.smem(&d).input < w.smem(&s).input, "rows {rows}");
        }
        // brute force: the largest block footprint is a full interior row
        // segment, 8 output pixels reading 3 rows x 9 columns
        let s = ScheduleConfig::new(1, 1, 1, 1, 1, false);
        let mut d = s;
        d.duplicate_aware = true;
        let mut worst = 0;
        for block in 0..32i64 {
            let mut pixels = BTreeSet::new();
            let mut pad = false;
            for r in block * 8..block * 8 + 8 {
                let (oh, ow) = (r / 16, r % 16);
                for kr in 0..3i64 {
                    for ks in 0..3i64 {
                        let (h, x) = (oh + kr - 1, ow + ks - 1);
                        if (0..16).contains(&h) && (0..16).contains(&x) {
                            pixels.insert((h, x));
                        } else {
                            pad = true;
                        }
                    }
                }
            }
            worst = worst.max(pixels.len() + pad as usize);
        }
        assert_eq!(worst, 28);
        assert_eq!(w.smem(&d).input, 28 * 16);
        assert_eq!(w.smem(&s).input, 8 * 9 * 16);
    }

    #[test]
    fn validate_ok_implies_smem_fits() {
        let c = stage2();
        let m = MachineModel::t4();
        for flags in [OptFlags::none(), OptFlags::all()] {
            for s in enumerate(&KnobSpace::default().with_flags(flags), &c, &m).unwrap() {
                assert!(smem_bytes(&s, &c, &m).unwrap() <= m.smem_per_sm);
            }
        }
    }

    #[test]
    fn enumeration_properties() {
        let space = KnobSpace::default();
        assert_eq!(space.len(), 2048);
        let c = stage2();
        let m = MachineModel::t4();
        let all = enumerate(&space, &c, &m).unwrap();
        assert!(!all.is_empty());
        assert!(all.len() < space.len());
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(all, enumerate(&space, &c, &m).unwrap());
        for s in &all {
            assert!(validate(s, &c, &m).unwrap().is_empty());
            assert!(space.contains(s));
        }
        assert!(
            all.contains(&ScheduleConfig::new(2, 2, 4, 2, 2, false).with_flags(OptFlags::all()))
        );
    }

    #[test]
    fn point_indexing_is_a_bijection() {
        let space = KnobSpace::default();
        let pts: HashSet<_> = space.iter().collect();
        assert_eq!(pts.len(), space.len());
    }

    #[test]
    fn forced_mutation() {
        let space = KnobSpace {
            blk_row_warps: vec![2],
            blk_col_warps: vec![2],
            warp_row_tiles: vec![1],
            warp_col_tiles: vec![4],
            chunk: vec![1, 2],
            reorder_inner: vec![true],
            flags: OptFlags::none(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = space.point(0);
        for _ in 0..20 {
            let m = mutate(&s, &space, &mut rng).unwrap();
            assert_eq!(m.chunk, 2);
            assert_eq!(m.hamming(&s), 1);
        }
        let frozen = KnobSpace {
            chunk: vec![1],
            ..space
        };
        assert!(matches!(
            mutate(&s, &frozen, &mut rng),
            Err(Error::NoMutation)
        ));
    }

    #[test]
    fn mutation_changes_exactly_one_knob() {
        let space = KnobSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1000 {
            let s = space.point((i * 7919) % space.len());
            let m = mutate(&s, &space, &mut rng).unwrap();
            assert_eq!(m.hamming(&s), 1);
            assert!(space.contains(&m));
        }
    }

    #[test]
    fn mutation_knob_choice_is_uniform() {
        let space = KnobSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = space.point(0);
        let mut counts = [0usize; 6];
        let draws = 100_000;
        for _ in 0..draws {
            let m = mutate(&s, &space, &mut rng).unwrap();
            let k = Knob::ALL
                .iter()
                .position(|k| m.knob(*k) != s.knob(*k))
                .unwrap();
            counts[k] += 1;
        }
        let expect = draws as f64 / 6.0;
        for c in counts {
            assert!((c as f64 - expect).abs() / expect < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn mutation_graph_is_connected() {
        let space = KnobSpace::default();
        // every knob value is reachable: BFS over single-knob moves
        let start = space.point(0);
        let mut seen = HashSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for knob in Knob::ALL {
                for v in space.values(knob) {
                    let mut n = s;
                    n.set_knob(knob, v);
                    if seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        assert_eq!(seen.len(), space.len());
    }

    #[test]
    fn json_round_trip_names() {
        let s = ScheduleConfig::new(2, 2, 4, 2, 2, false).with_flags(OptFlags::all());
        let v = serde_json::to_value(s).unwrap();
        for key in [
            "blk_row_warps",
            "blk_col_warps",
            "warp_row_tiles",
            "warp_col_tiles",
            "chunk",
            "reorder_inner",
            "duplicate_aware",
            "register_packing",
            "layout",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["layout"], "NHWCnc");
        let back: ScheduleConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
        let m: MachineModel =
            serde_json::from_str(&serde_json::to_string(&MachineModel::t4()).unwrap()).unwrap();
        assert_eq!(m, MachineModel::t4());
        let sp: KnobSpace = serde_json::from_str(r#"{"chunk":[1,2]}"#).unwrap();
        assert_eq!(sp.chunk, vec![1, 2]);
        assert_eq!(sp.blk_row_warps, vec![1, 2, 4, 8]);
    }
}
