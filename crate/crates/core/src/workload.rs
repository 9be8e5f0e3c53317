//! Static analysis of one convolution on one machine: tile geometry, resource
//! use, validity and the memory traffic each schedule generates.
//!
//! A `Workload` memoizes per-tile-shape traffic so that costing thousands of
//! schedules of the same convolution stays cheap.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::conv::{ConvConfig, GemmShape};
use crate::error::Result;
use crate::layout::{LayoutDesc, LayoutKind, SEGMENT_BYTES};
use crate::schedule::{expected_wmma_k, Knob, KnobSpace, MachineModel, ScheduleConfig, Violation};
use crate::sim::CostBreakdown;

/// Block and warp extents of a schedule on the lowered GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub wm: usize,
    pub wn: usize,
    pub wk: usize,
    pub warp_m: usize,
    pub warp_n: usize,
    pub bm: usize,
    pub bn: usize,
    pub row_blocks: usize,
    pub col_blocks: usize,
    pub taps: usize,
    /// Input channels padded to whole k-steps.
    pub ip: usize,
    /// k-steps per kernel position.
    pub ck: usize,
    pub chunk: usize,
    pub stages: usize,
    pub warps: usize,
    /// Bytes of one k-step slice of one pixel.
    pub piece: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmemUsage {
    pub input: u64,
    pub weights: u64,
    pub output: u64,
}

impl SmemUsage {
    pub fn total(&self) -> u64 {
        self.input + self.weights + self.output
    }
}

/// Distinct valid pixels, and whether any padding cell occurs, in each run
/// of `span` consecutive GEMM rows.
#[derive(Debug)]
pub(crate) struct SpanCounts {
    pub distinct: Vec<u32>,
    pub pad: Vec<bool>,
}

impl SpanCounts {
    /// Staging slots with the shared zero slot counted.
    pub fn slots(&self, i: usize) -> u64 {
        self.distinct[i] as u64 + self.pad[i] as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct InputKey {
    bm: usize,
    chunk: usize,
    reorder: bool,
    dup: bool,
    layout: LayoutKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct WeightKey {
    bn: usize,
    chunk: usize,
    reorder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct OutputKey {
    bm: usize,
    bn: usize,
    layout: LayoutKind,
}

/// Totals of one global-memory stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct StreamTraffic {
    pub transactions: u64,
    /// Accesses issued (16-byte pieces for loads).
    pub items: u64,
    pub bytes: u64,
}

#[derive(Default)]
struct Cache {
    spans: HashMap<usize, Arc<SpanCounts>>,
    input: HashMap<InputKey, StreamTraffic>,
    weights: HashMap<WeightKey, StreamTraffic>,
    output: HashMap<OutputKey, StreamTraffic>,
    costs: HashMap<ScheduleConfig, CostBreakdown>,
}

/// One convolution on one machine, with memoized analyses.
pub struct Workload {
    conv: ConvConfig,
    machine: MachineModel,
    gemm: GemmShape,
    cache: Mutex<Cache>,
}

impl std::fmt::Debug for Workload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workload")
            .field("conv", &self.conv)
            .field("machine", &self.machine)
            .finish_non_exhaustive()
    }
}

impl Workload {
    pub fn new(conv: ConvConfig, machine: MachineModel) -> Result<Self> {
        conv.validate()?;
        machine.validate()?;
        let gemm = conv.gemm_shape()?;
        Ok(Self {
            conv,
            machine,
            gemm,
            cache: Mutex::new(Cache::default()),
        })
    }

    pub fn conv(&self) -> &ConvConfig {
        &self.conv
    }

    pub fn machine(&self) -> &MachineModel {
        &self.machine
    }

    pub fn gemm(&self) -> GemmShape {
        self.gemm
    }

    /// Assumes every knob is a positive integer.
    pub(crate) fn geometry(&self, s: &ScheduleConfig) -> Geometry {
        let m = &self.machine;
        let (wm, wn, wk) = (m.wmma_m, m.wmma_n, m.wmma_k);
        let warp_m = s.warp_row_tiles as usize * wm;
        let warp_n = s.warp_col_tiles as usize * wn;
        let bm = s.blk_row_warps as usize * warp_m;
        let bn = s.blk_col_warps as usize * warp_n;
        let ip = self.conv.in_channels.div_ceil(wk) * wk;
        let ck = ip / wk;
        let chunk = s.chunk as usize;
        Geometry {
            wm,
            wn,
            wk,
            warp_m,
            warp_n,
            bm,
            bn,
            row_blocks: self.gemm.m.div_ceil(bm),
            col_blocks: self.gemm.n.div_ceil(bn),
            taps: self.conv.taps(),
            ip,
            ck,
            chunk,
            stages: ck / chunk,
            warps: s.warps_per_block() as usize,
            piece: wk * self.conv.act_bits as usize / 8,
        }
    }

    /// Input, weight and output staging of one block.
    pub fn smem(&self, s: &ScheduleConfig) -> SmemUsage {
        let g = self.geometry(s);
        let piece = g.piece as u64;
        let chunk = g.chunk as u64;
        let input_slots = if s.duplicate_aware {
            let spans = self.span_counts(g.bm);
            (0..spans.distinct.len())
                .map(|i| spans.slots(i))
                .max()
                .unwrap_or(0)
        } else {
            (g.bm * g.taps) as u64
        };
        let out_bits = if s.register_packing {
            self.conv.act_bits as u64
        } else {
            32
        };
        SmemUsage {
            input: input_slots * chunk * piece,
            weights: (g.bn * g.taps) as u64 * chunk * piece,
            output: (g.bm * g.bn) as u64 * out_bits / 8,
        }
    }

    /// 32-bit registers per thread: accumulators, one A and one B fragment
    /// per warp tile row/column, and a fixed base.
    pub fn registers_per_thread(&self, s: &ScheduleConfig) -> u32 {
        let m = &self.machine;
        let tiles = (s.warp_row_tiles * s.warp_col_tiles) as usize;
        let acc = tiles * (m.wmma_m * m.wmma_n).div_ceil(m.warp_size as usize);
        let frag_bytes = m.wmma_m * m.wmma_k * self.conv.act_bits as usize / 8;
        let frag = frag_bytes.div_ceil(4 * m.warp_size as usize);
        let frags = (s.warp_row_tiles + s.warp_col_tiles) as usize * frag;
        m.base_regs_per_thread + (acc + frags) as u32
    }

    pub fn registers_per_block(&self, s: &ScheduleConfig) -> u64 {
        self.registers_per_thread(s) as u64
            * self.machine.warp_size as u64
            * s.warps_per_block() as u64
    }

    /// Resident blocks per SM allowed by shared memory, registers and warps.
    pub fn blocks_per_sm(&self, s: &ScheduleConfig) -> u32 {
        let m = &self.machine;
        let smem = self.smem(s).total().max(1);
        let by_smem = m.smem_per_sm / smem;
        let by_regs = m.regs_per_sm / self.registers_per_block(s).max(1);
        let by_warps = (m.max_warps_per_sm / s.warps_per_block().max(1)) as u64;
        by_smem
            .min(by_regs)
            .min(by_warps)
            .min(m.max_blocks_per_sm as u64) as u32
    }

    pub fn violations(&self, s: &ScheduleConfig) -> Vec<Violation> {
        let mut out = Vec::new();
        for knob in Knob::ALL.into_iter().filter(|k| *k != Knob::ReorderInner) {
            let v = s.knob(knob);
            if !v.is_power_of_two() {
                out.push(Violation::NotPowerOfTwo {
                    knob: knob.name(),
                    value: v,
                });
            }
        }
        if !out.is_empty() {
            return out;
        }
        let m = &self.machine;
        if m.wmma_k != expected_wmma_k(self.conv.act_bits) {
            out.push(Violation::MmaShape {
                wmma_k: m.wmma_k,
                act_bits: self.conv.act_bits,
            });
        }
        let g = self.geometry(s);
        let warps = s.warps_per_block();
        if warps > m.max_warps_per_block {
            out.push(Violation::WarpsPerBlock {
                warps,
                limit: m.max_warps_per_block,
            });
        }
        let m_limit = self.gemm.m.div_ceil(g.wm) * g.wm;
        if g.bm > m_limit {
            out.push(Violation::BlockTileRows {
                rows: g.bm,
                limit: m_limit,
            });
        }
        let n_limit = self.gemm.n.div_ceil(g.wn) * g.wn;
        if g.bn > n_limit {
            out.push(Violation::BlockTileCols {
                cols: g.bn,
                limit: n_limit,
            });
        }
        if !g.ck.is_multiple_of(g.chunk) {
            out.push(Violation::Chunk {
                chunk: s.chunk,
                k_steps: g.ck,
            });
        }
        let per_thread = self.registers_per_thread(s);
        let per_block = self.registers_per_block(s);
        if per_thread > m.max_regs_per_thread || per_block > m.regs_per_sm {
            out.push(Violation::Registers {
                per_thread,
                per_block,
            });
        }
        let bytes = self.smem(s).total();
        if bytes > m.smem_per_sm {
            out.push(Violation::SharedMemory {
                bytes,
                limit: m.smem_per_sm,
            });
        }
        out
    }

    pub fn is_valid(&self, s: &ScheduleConfig) -> bool {
        self.violations(s).is_empty()
    }

    pub fn enumerate(&self, space: &KnobSpace) -> Result<Vec<ScheduleConfig>> {
        space.validate()?;
        Ok(space.iter().filter(|s| self.is_valid(s)).collect())
    }

    pub(crate) fn span_counts(&self, span: usize) -> Arc<SpanCounts> {
        if let Some(c) = self.cache.lock().unwrap().spans.get(&span) {
            return c.clone();
        }
        let counts = Arc::new(self.compute_span_counts(span));
        self.cache
            .lock()
            .unwrap()
            .spans
            .entry(span)
            .or_insert(counts)
            .clone()
    }

    fn compute_span_counts(&self, span: usize) -> SpanCounts {
        let conv = &self.conv;
        let rows = self.gemm.m;
        let spans = rows.div_ceil(span);
        let mut stamp = PixelStamp::new(self.pixels());
        let mut distinct = Vec::with_capacity(spans);
        let mut pad = Vec::with_capacity(spans);
        for s in 0..spans {
            stamp.next_epoch();
            let (r0, r1) = (s * span, (s + 1) * span);
            let mut d = 0u32;
            let mut p = r1 > rows;
            for r in r0..r1.min(rows) {
                for t in 0..conv.taps() {
                    match conv.pixel_of(r, t) {
                        Some(px) => {
                            if stamp.insert(px, d) {
                                d += 1;
                            }
                        }
                        None => p = true,
                    }
                }
            }
            distinct.push(d);
            pad.push(p);
        }
        SpanCounts { distinct, pad }
    }

    pub(crate) fn pixels(&self) -> usize {
        self.conv.batch * self.conv.height * self.conv.width
    }

    /// Staging list of row block `rb`: `(smem slot, pixel)` in load order.
    ///
    /// Duplicate-aware blocks stage each distinct pixel once, numbered by
    /// first appearance in a tap-major scan; padding cells all read one
    /// shared zero slot placed after the genuine ones. Oblivious blocks
    /// stage every valid cell at `row * taps + tap`.
    pub(crate) fn block_slots(
        &self,
        g: &Geometry,
        rb: usize,
        dup: bool,
        stamp: &mut PixelStamp,
        out: &mut Vec<(u32, u32)>,
    ) {
        out.clear();
        stamp.next_epoch();
        let r0 = rb * g.bm;
        let r1 = ((rb + 1) * g.bm).min(self.gemm.m);
        for t in 0..g.taps {
            for r in r0..r1 {
                if let Some(px) = self.conv.pixel_of(r, t) {
                    if dup {
                        let next = out.len() as u32;
                        if stamp.insert(px, next) {
                            out.push((next, px as u32));
                        }
                    } else {
                        out.push((((r - r0) * g.taps + t) as u32, px as u32));
                    }
                }
            }
        }
    }

    pub(crate) fn feature_addr(&self, kind: LayoutKind, g: &Geometry) -> FeatureAddr {
        let c = &self.conv;
        FeatureAddr {
            layout: LayoutDesc::for_fragment(kind, &self.machine, c.act_bits),
            dims: [c.batch, c.height, c.width, g.ip],
            hw: c.height * c.width,
            w: c.width,
            wk: g.wk,
            bits: c.act_bits as u64,
        }
    }

    pub(crate) fn weight_addr(&self, g: &Geometry, o: usize, t: usize, p: usize) -> u64 {
        (((o * g.taps + t) * g.ip + p * g.wk) as u64) * self.conv.wgt_bits as u64 / 8
    }

    pub(crate) fn output_layout(&self, kind: LayoutKind) -> LayoutDesc {
        LayoutDesc::for_fragment(kind, &self.machine, self.conv.act_bits)
    }

    /// Channels written per output store access.
    pub(crate) fn output_piece(&self, g: &Geometry) -> usize {
        g.bn.min(self.output_layout(LayoutKind::Nhwcnc).c_tile)
    }

    /// Feature traffic of one full column of row blocks.
    fn input_traffic(&self, g: &Geometry, s: &ScheduleConfig) -> StreamTraffic {
        let key = InputKey {
            bm: g.bm,
            chunk: g.chunk,
            reorder: s.reorder_inner,
            dup: s.duplicate_aware,
            layout: s.layout,
        };
        if let Some(t) = self.cache.lock().unwrap().input.get(&key) {
            return *t;
        }
        let addr = self.feature_addr(s.layout, g);
        let mut stamp = PixelStamp::new(self.pixels());
        let mut slots = Vec::new();
        let mut seg = SegmentCounter::new();
        let mut traffic = StreamTraffic::default();
        for rb in 0..g.row_blocks {
            self.block_slots(g, rb, s.duplicate_aware, &mut stamp, &mut slots);
            for ko in 0..g.stages {
                for_each_input_item(&slots, g.chunk, s.reorder_inner, |_, px, q| {
                    seg.push(addr.of(px as usize, ko * g.chunk + q), g.piece as u64);
                    traffic.items += 1;
                });
                seg.flush();
            }
        }
        traffic.transactions = seg.total;
        traffic.bytes = traffic.items * g.piece as u64;
        self.cache.lock().unwrap().input.insert(key, traffic);
        traffic
    }

    /// Weight traffic of one full row of column blocks.
    fn weight_traffic(&self, g: &Geometry, s: &ScheduleConfig) -> StreamTraffic {
        let key = WeightKey {
            bn: g.bn,
            chunk: g.chunk,
            reorder: s.reorder_inner,
        };
        if let Some(t) = self.cache.lock().unwrap().weights.get(&key) {
            return *t;
        }
        let mut seg = SegmentCounter::new();
        let mut traffic = StreamTraffic::default();
        for cb in 0..g.col_blocks {
            let cols = cb * g.bn..((cb + 1) * g.bn).min(self.gemm.n);
            for ko in 0..g.stages {
                for_each_weight_item(cols.clone(), g.taps, g.chunk, s.reorder_inner, |o, t, q| {
                    seg.push(self.weight_addr(g, o, t, ko * g.chunk + q), g.piece as u64);
                    traffic.items += 1;
                });
                seg.flush();
            }
        }
        traffic.transactions = seg.total;
        traffic.bytes = traffic.items * g.piece as u64;
        self.cache.lock().unwrap().weights.insert(key, traffic);
        traffic
    }

    fn output_traffic(&self, g: &Geometry, s: &ScheduleConfig) -> StreamTraffic {
        let key = OutputKey {
            bm: g.bm,
            bn: g.bn,
            layout: s.layout,
        };
        if let Some(t) = self.cache.lock().unwrap().output.get(&key) {
            return *t;
        }
        let layout = self.output_layout(s.layout);
        let dims = self.conv.output_dims();
        let bits = self.conv.act_bits as u64;
        let width = self.output_piece(g);
        let mut seg = SegmentCounter::new();
        let mut traffic = StreamTraffic::default();
        for rb in 0..g.row_blocks {
            for cb in 0..g.col_blocks {
                for_each_output_item(self, g, rb, cb, width, |row, c, n| {
                    let (b, oh, ow) = self.conv.row_coords(row);
                    let (addr, bytes) = byte_span(
                        layout.offset_unchecked(dims, [b, oh, ow, c]) as u64,
                        n as u64,
                        bits,
                    );
                    seg.push(addr, bytes);
                    traffic.items += 1;
                    traffic.bytes += bytes;
                });
                seg.flush();
            }
        }
        traffic.transactions = seg.total;
        self.cache.lock().unwrap().output.insert(key, traffic);
        traffic
    }

    /// Static cost of a valid schedule; the cycle estimate is filled in.
    pub(crate) fn cost(&self, s: &ScheduleConfig) -> CostBreakdown {
        if let Some(c) = self.cache.lock().unwrap().costs.get(s) {
            return c.clone();
        }
        let g = self.geometry(s);
        let piece = g.piece as u64;
        let input = self.input_traffic(&g, s);
        let weights = self.weight_traffic(&g, s);
        let output = self.output_traffic(&g, s);
        let rb = g.row_blocks as u64;
        let cb = g.col_blocks as u64;
        let k_steps = (g.taps * g.ck) as u64;

        // fragment reads, per column warp for A and per row warp for B
        let a_rows_per_col_warp = if s.duplicate_aware {
            let spans = self.span_counts(g.warp_m);
            (0..spans.distinct.len())
                .map(|i| spans.slots(i))
                .sum::<u64>()
        } else {
            (rb * g.bm as u64) * g.taps as u64
        };
        let a_bytes = a_rows_per_col_warp * g.ck as u64 * piece * s.blk_col_warps as u64 * cb;
        let b_bytes =
            (g.bn * g.taps) as u64 * g.ck as u64 * piece * s.blk_row_warps as u64 * rb * cb;
        let smem = self.smem(s);
        let out_stage = smem.output * rb * cb;

        let mut cost = CostBreakdown {
            // every block stages its own input tile and weight tile
            global_load_transactions: input.transactions * cb + weights.transactions * rb,
            global_store_transactions: output.transactions,
            smem_load_bytes: a_bytes + b_bytes + out_stage,
            smem_store_bytes: (input.items * cb + weights.items * rb) * piece + out_stage,
            mma_ops: rb * cb * (g.bm / g.wm) as u64 * (g.bn / g.wn) as u64 * k_steps,
            smem_per_block: smem.total(),
            blocks: rb * cb,
            blocks_per_sm: self.blocks_per_sm(s) as u64,
            occupancy_waves: 0,
            estimated_cycles: 0.0,
            warps_per_block: g.warps as u64,
            feature_loads: input.items * cb,
            output_smem_store_bytes: out_stage,
        };
        crate::sim::fill_estimate(&mut cost, &self.machine);
        self.cache.lock().unwrap().costs.insert(*s, cost.clone());
        cost
    }
}

/// Calls `f(slot, pixel, q)` for each staged piece of one stage.
pub(crate) fn for_each_input_item(
    slots: &[(u32, u32)],
    chunk: usize,
    reorder: bool,
    mut f: impl FnMut(u32, u32, usize),
) {
    if reorder {
        for q in 0..chunk {
            for &(slot, px) in slots {
                f(slot, px, q);
            }
        }
    } else {
        for &(slot, px) in slots {
            for q in 0..chunk {
                f(slot, px, q);
            }
        }
    }
}

/// Calls `f(o, tap, q)` for each staged weight piece of one stage.
pub(crate) fn for_each_weight_item(
    cols: std::ops::Range<usize>,
    taps: usize,
    chunk: usize,
    reorder: bool,
    mut f: impl FnMut(usize, usize, usize),
) {
    if reorder {
        for q in 0..chunk {
            for t in 0..taps {
                for o in cols.clone() {
                    f(o, t, q);
                }
            }
        }
    } else {
        for t in 0..taps {
            for o in cols.clone() {
                for q in 0..chunk {
                    f(o, t, q);
                }
            }
        }
    }
}

/// Calls `f(row, first channel, channels)` for each output store of block
/// `(rb, cb)`; padding rows and columns are not stored.
pub(crate) fn for_each_output_item(
    w: &Workload,
    g: &Geometry,
    rb: usize,
    cb: usize,
    width: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = w.gemm.n;
    let rows = rb * g.bm..((rb + 1) * g.bm).min(w.gemm.m);
    let mut c = cb * g.bn;
    let c_end = ((cb + 1) * g.bn).min(n);
    while c < c_end {
        let len = width.min(c_end - c);
        for r in rows.clone() {
            f(r, c, len);
        }
        c += width;
    }
}

/// First byte and byte count covering `count` packed elements of `bits`
/// each, starting at element `offset`.
pub(crate) fn byte_span(offset: u64, count: u64, bits: u64) -> (u64, u64) {
    let start = offset * bits / 8;
    let end = ((offset + count) * bits).div_ceil(8);
    (start, end - start)
}

/// Byte address of a k-step slice of a feature pixel.
pub(crate) struct FeatureAddr {
    pub layout: LayoutDesc,
    pub dims: [usize; 4],
    hw: usize,
    w: usize,
    wk: usize,
    bits: u64,
}

impl FeatureAddr {
    #[inline]
    pub fn element(&self, pixel: usize, p: usize) -> usize {
        let n = pixel / self.hw;
        let rem = pixel % self.hw;
        self.layout
            .offset_unchecked(self.dims, [n, rem / self.w, rem % self.w, p * self.wk])
    }

    #[inline]
    pub fn of(&self, pixel: usize, p: usize) -> u64 {
        self.element(pixel, p) as u64 * self.bits / 8
    }
}

/// Per-pixel marks that reset in O(1) between scans.
pub(crate) struct PixelStamp {
    mark: Vec<u32>,
    slot: Vec<u32>,
    epoch: u32,
}

impl PixelStamp {
    pub fn new(pixels: usize) -> Self {
        Self {
            mark: vec![0; pixels],
            slot: vec![0; pixels],
            epoch: 0,
        }
    }

    pub fn next_epoch(&mut self) {
        if self.epoch == u32::MAX {
            self.mark.fill(0);
            self.epoch = 0;
        }
        self.epoch += 1;
    }

    /// Records `pixel` at `slot`; false if already seen this epoch.
    #[inline]
    pub fn insert(&mut self, pixel: usize, slot: u32) -> bool {
        if self.mark[pixel] == self.epoch {
            return false;
        }
        self.mark[pixel] = self.epoch;
        self.slot[pixel] = slot;
        true
    }

    #[inline]
    pub fn get(&self, pixel: usize) -> Option<u32> {
        (self.mark[pixel] == self.epoch).then(|| self.slot[pixel])
    }
}

/// Counts distinct 32-byte segments per warp-wide group of 32 accesses.
pub(crate) struct SegmentCounter {
    segs: Vec<u64>,
    in_group: usize,
    pub total: u64,
}

impl SegmentCounter {
    pub fn new() -> Self {
        Self {
            segs: Vec::with_capacity(64),
            in_group: 0,
            total: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, addr: u64, bytes: u64) {
        let first = addr / SEGMENT_BYTES;
        let last = (addr + bytes - 1) / SEGMENT_BYTES;
        self.segs.extend(first..=last);
        self.in_group += 1;
        if self.in_group == 32 {
            self.flush();
        }
    }

    pub fn flush(&mut self) {
        if self.segs.is_empty() {
            self.in_group = 0;
            return;
        }
        self.segs.sort_unstable();
        self.segs.dedup();
        self.total += self.segs.len() as u64;
        self.segs.clear();
        self.in_group = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{count_transactions, AccessTrace};
    use std::collections::HashSet;

    fn small() -> ConvConfig {
        ConvConfig::square(2, 6, 40, 24, 3, 1, 1)
    }

    #[test]
    fn segment_counter_matches_trace_oracle() {
        let addrs: Vec<u64> = (0..100u64).map(|i| (i * 48) % 700).collect();
        let mut seg = SegmentCounter::new();
        let mut expect = 0;
        for group in addrs.chunks(32) {
            let mut t = AccessTrace::new();
            for (lane, a) in group.iter().enumerate() {
                t.push(lane, *a, 16).unwrap();
                seg.push(*a, 16);
            }
            expect += count_transactions(&t);
        }
        seg.flush();
        assert_eq!(seg.total, expect);
    }

    #[test]
    fn span_counts_match_brute_force() {
        let c = small();
        let w = Workload::new(c, MachineModel::t4()).unwrap();
        let m = c.gemm_shape().unwrap().m;
        for span in [8, 16, 24, 64] {
            let sc = w.span_counts(span);
            for (i, d) in sc.distinct.iter().enumerate() {
                let mut set = HashSet::new();
                let mut pad = false;
                for r in i * span..(i + 1) * span {
                    if r >= m {
                        pad = true;
                        continue;
                    }
                    for t in 0..9 {
                        match c.pixel_of(r, t) {
                            Some(p) => {
                                set.insert(p);
                            }
                            None => pad = true,
                        }
                    }
                }
                assert_eq!(*d as usize, set.len());
                assert_eq!(sc.pad[i], pad);
            }
        }
    }

    #[test]
    fn dedup_slots_are_distinct_pixels() {
        let c = small();
        let w = Workload::new(c, MachineModel::t4()).unwrap();
        let s = ScheduleConfig::new(2, 1, 2, 1, 1, false);
        let g = w.geometry(&s);
        let mut stamp = PixelStamp::new(w.pixels());
        let mut slots = Vec::new();
        for rb in 0..g.row_blocks {
            w.block_slots(&g, rb, true, &mut stamp, &mut slots);
            let px: HashSet<_> = slots.iter().map(|s| s.1).collect();
            assert_eq!(px.len(), slots.len());
            for (i, s) in slots.iter().enumerate() {
                assert_eq!(s.0 as usize, i);
            }
            assert_eq!(slots.len() as u32, w.span_counts(g.bm).distinct[rb]);
        }
    }

    #[test]
    fn channel_padding() {
        let w = Workload::new(small(), MachineModel::t4()).unwrap();
        let g = w.geometry(&ScheduleConfig::new(1, 1, 1, 1, 1, false));
        assert_eq!((g.ip, g.ck), (64, 2));
        assert_eq!(g.piece, 16);
    }

    #[test]
    fn registers() {
        let w = Workload::new(small(), MachineModel::t4()).unwrap();
        let s = ScheduleConfig::new(2, 2, 4, 2, 1, false);
        // 24 base + 8 tiles * 2 accumulators + 6 fragments
        assert_eq!(w.registers_per_thread(&s), 24 + 16 + 6);
        assert_eq!(w.registers_per_block(&s), 46 * 32 * 4);
    }
}
