//! Costed and functional execution of a schedule, and the noisy measurement
//! that stands in for hardware during tuning.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{check_operands, ConvConfig};
use crate::error::{Error, Result};
use crate::layout::LayoutBuffer;
use crate::schedule::{MachineModel, ScheduleConfig};
use crate::tensor::Tensor4;
use crate::warp::{
    bits_required, clip_to_field, lanes_per_word, pack_lanes, redistribute_packed_groups,
    sign_extend, AccumSpec, WarpState, WARP_SIZE,
};
use crate::workload::{
    byte_span, for_each_input_item, for_each_output_item, for_each_weight_item, PixelStamp,
    SegmentCounter, Workload,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub global_load_transactions: u64,
    pub global_store_transactions: u64,
    pub smem_load_bytes: u64,
    pub smem_store_bytes: u64,
    pub mma_ops: u64,
    pub smem_per_block: u64,
    pub blocks: u64,
    pub blocks_per_sm: u64,
    pub occupancy_waves: u64,
    pub estimated_cycles: f64,
    pub warps_per_block: u64,
    /// 16-byte feature-map pieces fetched from global memory.
    pub feature_loads: u64,
    /// Bytes written to shared memory by the output path.
    pub output_smem_store_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub schedule: ScheduleConfig,
    pub runtime: f64,
    pub cost: CostBreakdown,
}

/// Per-wave components of the cycle estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTerms {
    pub waves: u64,
    /// Blocks per SM in a full wave.
    pub resident: u64,
    pub mma: f64,
    pub smem: f64,
    pub dram: f64,
    pub epilogue: f64,
    /// Fraction of peak throughput reachable with the resident warps.
    pub efficiency: f64,
}

impl CycleTerms {
    /// Main-loop time of one wave. Resident blocks overlap each other's
    /// phases: with `r` blocks the non-binding terms add `1/r` of their
    /// time on top of the binding one (a lone block loads, then computes).
    pub fn main_loop(&self) -> f64 {
        let bound = self.mma.max(self.dram).max(self.smem);
        let sum = self.mma + self.dram + self.smem;
        bound + (sum - bound) / self.resident as f64
    }

    pub fn total(&self) -> f64 {
        self.waves as f64 * (self.main_loop() + self.epilogue) / self.efficiency
    }
}

/// Roofline terms per wave of resident blocks.
///
/// The main loop of a wave is bound by the slowest of MMA issue and
/// shared-memory bandwidth (both per SM) and DRAM bandwidth (shared by the
/// whole device). The output epilogue, staging through shared memory and
/// then storing, follows the main loop of its block and is added on top.
/// Throughput is derated when too few warps are resident to hide latency.
pub fn cycle_terms(cost: &CostBreakdown, machine: &MachineModel) -> Result<CycleTerms> {
    machine.validate()?;
    if cost.blocks == 0 || cost.blocks_per_sm == 0 {
        return Err(Error::Config("cost has no resident blocks".into()));
    }
    let sms = machine.num_sms as u64;
    let blocks = cost.blocks as f64;
    let wave_blocks = cost.blocks.min(sms * cost.blocks_per_sm);
    let resident = wave_blocks.div_ceil(sms) as f64;
    let wave_blocks = wave_blocks as f64;
    let sm_mma = machine.peak_mma_per_cycle / sms as f64;
    let sm_smem = machine.smem_bytes_per_cycle / sms as f64;
    let tb = machine.transaction_bytes as f64;

    let out_smem = 2 * cost.output_smem_store_bytes;
    let main_smem = (cost.smem_load_bytes + cost.smem_store_bytes).saturating_sub(out_smem);
    let warps = resident * cost.warps_per_block as f64;
    Ok(CycleTerms {
        waves: occupancy_waves(cost, machine),
        resident: resident as u64,
        mma: resident * cost.mma_ops as f64 / blocks / sm_mma,
        smem: resident * main_smem as f64 / blocks / sm_smem,
        dram: wave_blocks * cost.global_load_transactions as f64 * tb
            / blocks
            / machine.dram_bytes_per_cycle,
        epilogue: resident * out_smem as f64 / blocks / sm_smem
            + wave_blocks * cost.global_store_transactions as f64 * tb
                / blocks
                / machine.dram_bytes_per_cycle,
        efficiency: (warps / machine.latency_hiding_warps as f64).min(1.0),
    })
}

pub fn estimate_cycles(cost: &CostBreakdown, machine: &MachineModel) -> Result<f64> {
    Ok(cycle_terms(cost, machine)?.total())
}

fn occupancy_waves(cost: &CostBreakdown, machine: &MachineModel) -> u64 {
    let per_wave = machine.num_sms as u64 * cost.blocks_per_sm.max(1);
    cost.blocks.div_ceil(per_wave)
}

pub(crate) fn fill_estimate(cost: &mut CostBreakdown, machine: &MachineModel) {
    cost.occupancy_waves = occupancy_waves(cost, machine);
    // the machine was validated when the workload was built
    cost.estimated_cycles = estimate_cycles(cost, machine).unwrap_or(f64::INFINITY);
}

/// Static cost of `sched`; no tensors are touched.
pub fn analyze(workload: &Workload, sched: &ScheduleConfig) -> Result<CostBreakdown> {
    let v = workload.violations(sched);
    if !v.is_empty() {
        return Err(Error::Schedule(v));
    }
    Ok(workload.cost(sched))
}

/// Runtime of `sched` perturbed by zero-mean Gaussian relative noise.
pub fn measure<R: Rng + ?Sized>(
    workload: &Workload,
    sched: &ScheduleConfig,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Argument(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let cost = analyze(workload, sched)?;
    let exact = cost.estimated_cycles;
    let runtime = if noise_sigma == 0.0 {
        exact
    } else {
        let eps: f64 = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::Argument(e.to_string()))?
            .sample(rng);
        // keep runtimes positive under very large noise
        (exact * (1.0 + eps)).max(exact * 1e-3)
    };
    Ok(Measurement {
        schedule: *sched,
        runtime,
        cost,
    })
}

/// Counters collected while actually running the schedule.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    pub feature_loads: u64,
    pub weight_loads: u64,
    pub global_load_transactions: u64,
    pub global_store_transactions: u64,
    pub output_smem_store_bytes: u64,
    /// Feature pieces fetched more than once by the same block.
    pub refetched: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutput {
    /// Full-precision accumulators, `(N, H_out, W_out, O)`.
    pub output: Tensor4<i32>,
    /// Accumulators saturated to `act_bits` as written back to memory.
    pub quantized: Tensor4<i32>,
    pub cost: CostBreakdown,
    pub stats: ExecStats,
}

/// Runs the block/warp/MMA loop nest of `sched` on real data.
pub fn execute(
    conv: &ConvConfig,
    sched: &ScheduleConfig,
    machine: &MachineModel,
    feature: &Tensor4<i32>,
    weights: &Tensor4<i32>,
) -> Result<ExecOutput> {
    let workload = Workload::new(*conv, *machine)?;
    execute_on(&workload, sched, feature, weights)
}

pub fn execute_on(
    workload: &Workload,
    sched: &ScheduleConfig,
    feature: &Tensor4<i32>,
    weights: &Tensor4<i32>,
) -> Result<ExecOutput> {
    let conv = *workload.conv();
    let cost = analyze(workload, sched)?;
    check_operands(&conv, feature, weights)?;
    crate::tensor::check_signed_range(feature, conv.act_bits, "feature")?;
    crate::tensor::check_signed_range(weights, conv.wgt_bits, "weight")?;
    let gemm = workload.gemm();
    let acc_bits = bits_required(&AccumSpec {
        act_bits: conv.act_bits,
        wgt_bits: conv.wgt_bits,
        terms: gemm.k as u64,
    })?;
    if acc_bits > 32 {
        return Err(Error::Domain(format!(
            "reduction of {} terms needs {acc_bits}-bit accumulators",
            gemm.k
        )));
    }

    let g = workload.geometry(sched);
    let (wm, wn, wk, taps) = (g.wm, g.wn, g.wk, g.taps);
    let addr = workload.feature_addr(sched.layout, &g);
    // global feature map in the schedule's layout, channels padded to k-steps
    let padded = Tensor4::from_fn(addr.dims, |[n, h, w, c]| {
        if c < conv.in_channels {
            feature.at([n, h, w, c])
        } else {
            0
        }
    });
    let global_in = LayoutBuffer::from_tensor(&padded, addr.layout);
    let out_layout = workload.output_layout(sched.layout);
    let out_dims = conv.output_dims();
    let mut global_out = LayoutBuffer {
        layout: out_layout,
        dims: out_dims,
        data: vec![0; out_layout.padded_len(out_dims)],
    };
    let mut exact = Tensor4::<i32>::zeros(out_dims);

    let mut stats = ExecStats::default();
    let mut load_seg = SegmentCounter::new();
    let mut store_seg = SegmentCounter::new();
    let mut stamp = PixelStamp::new(workload.pixels());
    let mut slots = Vec::new();
    let mut fetched = std::collections::HashSet::new();
    let out_width = workload.output_piece(&g);

    let in_slot_cap = if sched.duplicate_aware {
        g.bm * taps + 1
    } else {
        g.bm * taps
    };
    let mut smem_in = vec![0i32; in_slot_cap * g.chunk * wk];
    let mut smem_w = vec![0i32; g.bn * taps * g.chunk * wk];
    let mut acc = vec![0i32; g.bm * g.bn];
    // smem row index of every (block row, tap), rebuilt per block
    let mut row_slot = vec![0u32; g.bm * taps];

    for rb in 0..g.row_blocks {
        workload.block_slots(&g, rb, sched.duplicate_aware, &mut stamp, &mut slots);
        let r0 = rb * g.bm;
        let zero_slot = slots.len() as u32;
        for lr in 0..g.bm {
            let r = r0 + lr;
            for t in 0..taps {
                row_slot[lr * taps + t] = if sched.duplicate_aware {
                    match (r < gemm.m).then(|| conv.pixel_of(r, t)).flatten() {
                        Some(px) => stamp.get(px).expect("pixel staged by this block"),
                        None => zero_slot,
                    }
                } else {
                    (lr * taps + t) as u32
                };
            }
        }
        for cb in 0..g.col_blocks {
            let c0 = cb * g.bn;
            acc.fill(0);
            fetched.clear();
            for ko in 0..g.stages {
                // stage features
                smem_in.fill(0);
                for_each_input_item(&slots, g.chunk, sched.reorder_inner, |slot, px, q| {
                    let p = ko * g.chunk + q;
                    let src = addr.element(px as usize, p);
                    let dst = (slot as usize * g.chunk + q) * wk;
                    smem_in[dst..dst + wk].copy_from_slice(&global_in.data[src..src + wk]);
                    load_seg.push(src as u64 * conv.act_bits as u64 / 8, g.piece as u64);
                    stats.feature_loads += 1;
                    if !fetched.insert((px, p)) {
                        stats.refetched += 1;
                    }
                });
                load_seg.flush();
                // stage weights; columns past O stay zero
                smem_w.fill(0);
                let cols = c0..(c0 + g.bn).min(gemm.n);
                for_each_weight_item(cols, taps, g.chunk, sched.reorder_inner, |o, t, q| {
                    let p = ko * g.chunk + q;
                    let dst = (((o - c0) * taps + t) * g.chunk + q) * wk;
                    let (kr, ks) = (t / conv.kernel_w, t % conv.kernel_w);
                    for c in 0..wk {
                        let i = p * wk + c;
                        smem_w[dst + c] = if i < conv.in_channels {
                            weights.at([o, kr, ks, i])
                        } else {
                            0
                        };
                    }
                    load_seg.push(workload.weight_addr(&g, o, t, p), g.piece as u64);
                    stats.weight_loads += 1;
                });
                load_seg.flush();
                // warps, warp tiles, then k-steps of this stage
                for wr in 0..sched.blk_row_warps as usize {
                    for wc in 0..sched.blk_col_warps as usize {
                        for i in 0..sched.warp_row_tiles as usize {
                            for j in 0..sched.warp_col_tiles as usize {
                                let lr0 = wr * g.warp_m + i * wm;
                                let lc0 = wc * g.warp_n + j * wn;
                                for t in 0..taps {
                                    for q in 0..g.chunk {
                                        mma_tile(
                                            &mut acc,
                                            g.bn,
                                            (lr0, lc0),
                                            (wm, wn, wk),
                                            |ii| {
                                                let slot = row_slot[(lr0 + ii) * taps + t] as usize;
                                                let base = (slot * g.chunk + q) * wk;
                                                &smem_in[base..base + wk]
                                            },
                                            |jj| {
                                                let base =
                                                    (((lc0 + jj) * taps + t) * g.chunk + q) * wk;
                                                &smem_w[base..base + wk]
                                            },
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }

            // epilogue: exact accumulators and the saturated store path
            for lr in 0..g.bm {
                let r = r0 + lr;
                if r >= gemm.m {
                    continue;
                }
                let (n, oh, ow) = conv.row_coords(r);
                for lc in 0..g.bn.min(gemm.n - c0) {
                    exact.set([n, oh, ow, c0 + lc], acc[lr * g.bn + lc]);
                }
            }
            let staged = if sched.register_packing {
                packed_output(&acc, g.bm, g.bn, (wm, wn), conv.act_bits)?
            } else {
                acc.iter()
                    .map(|v| sign_extend(clip_to_field(*v, conv.act_bits), conv.act_bits))
                    .collect()
            };
            let staged_bits = if sched.register_packing {
                conv.act_bits
            } else {
                32
            };
            stats.output_smem_store_bytes += (g.bm * g.bn) as u64 * staged_bits as u64 / 8;
            let mut block_bytes = 0u64;
            for_each_output_item(workload, &g, rb, cb, out_width, |r, c, len| {
                let (n, oh, ow) = conv.row_coords(r);
                let lr = r - r0;
                for k in 0..len {
                    let off = out_layout.offset_unchecked(out_dims, [n, oh, ow, c + k]);
                    global_out.data[off] = staged[lr * g.bn + c - c0 + k];
                }
                let start = out_layout.offset_unchecked(out_dims, [n, oh, ow, c]) as u64;
                let (addr, bytes) = byte_span(start, len as u64, conv.act_bits as u64);
                store_seg.push(addr, bytes);
                block_bytes += bytes;
            });
            store_seg.flush();
            debug_assert!(block_bytes > 0);
        }
    }
    stats.global_load_transactions = load_seg.total;
    stats.global_store_transactions = store_seg.total;
    Ok(ExecOutput {
        output: exact,
        quantized: global_out.to_tensor(),
        cost,
        stats,
    })
}

/// One `wm x wn x wk` integer MMA accumulated into the block tile.
#[inline]
fn mma_tile<'a>(
    acc: &mut [i32],
    ld: usize,
    (r0, c0): (usize, usize),
    (wm, wn, wk): (usize, usize, usize),
    a_row: impl Fn(usize) -> &'a [i32],
    b_col: impl Fn(usize) -> &'a [i32],
) {
    for ii in 0..wm {
        let a = &a_row(ii)[..wk];
        let out = &mut acc[(r0 + ii) * ld + c0..(r0 + ii) * ld + c0 + wn];
        for (jj, o) in out.iter_mut().enumerate() {
            let b = &b_col(jj)[..wk];
            let mut s = 0i32;
            for k in 0..wk {
                s += a[k] * b[k];
            }
            *o += s;
        }
    }
}

/// Saturates each warp tile to `bits`, packs it across lanes, redistributes
/// the packed words into full registers and decodes what the store writes.
fn packed_output(
    acc: &[i32],
    bm: usize,
    bn: usize,
    (wm, wn): (usize, usize),
    bits: u32,
) -> Result<Vec<i32>> {
    let group = lanes_per_word(bits)?;
    let per_tile = wm * wn;
    let halves = per_tile.div_ceil(WARP_SIZE);
    let mut out = vec![0i32; bm * bn];
    for tr in 0..bm / wm {
        for tc in 0..bn / wn {
            // tile values row-major, split into warp-wide registers
            let value = |idx: usize| {
                let (ii, jj) = (idx / wn, idx % wn);
                acc[(tr * wm + ii) * bn + tc * wn + jj]
            };
            let mut packed = Vec::with_capacity(halves);
            for h in 0..halves {
                let reg = WarpState::from_fn(|lane| {
                    let idx = h * WARP_SIZE + lane;
                    if idx < per_tile {
                        clip_to_field(value(idx), bits)
                    } else {
                        0
                    }
                });
                packed.push(pack_lanes(&reg, bits)?);
            }
            let regs = redistribute_packed_groups(&packed, group)?;
            for (r, (reg, mask)) in regs.regs.iter().zip(&regs.useful).enumerate() {
                for lane in 0..WARP_SIZE {
                    if mask >> lane & 1 == 0 {
                        continue;
                    }
                    let h = r * group + lane % group;
                    let first = h * WARP_SIZE + lane / group * group;
                    for f in 0..group {
                        let idx = first + f;
                        if idx >= per_tile {
                            continue;
                        }
                        let field = (reg.lanes[lane] >> (f as u32 * bits)) & ((1u32 << bits) - 1);
                        let (ii, jj) = (idx / wn, idx % wn);
                        out[(tr * wm + ii) * bn + tc * wn + jj] = sign_extend(field, bits);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::direct_conv;
    use crate::layout::LayoutKind;
    use crate::schedule::{KnobSpace, OptFlags};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_flags() -> Vec<OptFlags> {
        let mut out = Vec::new();
        for d in [false, true] {
            for p in [false, true] {
                for l in [LayoutKind::Nhwc, LayoutKind::Nhwcnc] {
                    out.push(OptFlags {
                        duplicate_aware: d,
                        register_packing: p,
                        layout: l,
                    });
                }
            }
        }
        out
    }

    fn run(conv: ConvConfig, sched: ScheduleConfig, seed: u64) -> (ExecOutput, Tensor4<i32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor4::random_signed(conv.feature_dims(), conv.act_bits, &mut rng);
        let w = Tensor4::random_signed(conv.weight_dims(), conv.wgt_bits, &mut rng);
        let out = execute(&conv, &sched, &MachineModel::t4_for(conv.act_bits), &f, &w).unwrap();
        (out, direct_conv(&conv, &f, &w).unwrap())
    }

    #[test]
    fn matches_direct_conv_for_every_flag_combination() {
        let conv = ConvConfig::square(2, 6, 40, 20, 3, 1, 1);
        for (i, flags) in all_flags().into_iter().enumerate() {
            for base in [
                ScheduleConfig::new(1, 1, 1, 1, 1, false),
                ScheduleConfig::new(2, 2, 2, 1, 2, true),
                ScheduleConfig::new(4, 1, 1, 2, 1, false),
            ] {
                let s = base.with_flags(flags);
                let (out, reference) = run(conv, s, i as u64);
                assert_eq!(out.output, reference, "{s}");
                let sat = Tensor4::from_fn(reference.dims(), |c| reference.at(c).clamp(-8, 7));
                assert_eq!(out.quantized, sat, "{s}");
            }
        }
    }

    #[test]
    fn eight_bit_operands() {
        let conv = ConvConfig::square(1, 5, 20, 12, 3, 1, 1).with_bits(8, 8);
        for flags in all_flags() {
            let s = ScheduleConfig::new(2, 1, 1, 1, 1, true).with_flags(flags);
            let (out, reference) = run(conv, s, 3);
            assert_eq!(out.output, reference);
            let sat = Tensor4::from_fn(reference.dims(), |c| reference.at(c).clamp(-128, 127));
            assert_eq!(out.quantized, sat);
        }
    }

    #[test]
    fn functional_counters_agree_with_analysis() {
        let conv = ConvConfig::square(2, 7, 64, 24, 3, 2, 1);
        for flags in all_flags() {
            for base in [
                ScheduleConfig::new(1, 1, 1, 1, 1, false),
                ScheduleConfig::new(2, 1, 2, 2, 2, true),
                ScheduleConfig::new(1, 2, 4, 1, 2, false),
            ] {
                let s = base.with_flags(flags);
                let (out, _) = run(conv, s, 1);
                let c = &out.cost;
                assert_eq!(out.stats.feature_loads, c.feature_loads, "{s}");
                assert_eq!(
                    out.stats.global_load_transactions, c.global_load_transactions,
                    "{s}"
                );
                assert_eq!(
                    out.stats.global_store_transactions, c.global_store_transactions,
                    "{s}"
                );
                assert_eq!(
                    out.stats.output_smem_store_bytes, c.output_smem_store_bytes,
                    "{s}"
                );
                if flags.duplicate_aware {
                    assert_eq!(out.stats.refetched, 0, "{s}");
                }
            }
        }
    }

    #[test]
    fn odd_output_channels_store_whole_bytes() {
        // 4-bit outputs: a 3-channel piece spans two bytes
        let conv = ConvConfig::square(1, 5, 32, 3, 3, 1, 1);
        for flags in all_flags() {
            let s = ScheduleConfig::new(1, 1, 1, 1, 1, false).with_flags(flags);
            let (out, _) = run(conv, s, 3);
            assert!(out.stats.global_store_transactions > 0);
            assert_eq!(
                out.stats.global_store_transactions, out.cost.global_store_transactions,
                "{s}"
            );
        }
    }

    #[test]
    fn four_by_four_single_block_loads() {
        let conv = ConvConfig::square(1, 4, 32, 8, 3, 1, 1);
        let m = MachineModel::t4();
        let w = Workload::new(conv, m).unwrap();
        // 16 rows: two warps of 8 rows, one block
        let s = ScheduleConfig::new(2, 1, 1, 1, 1, false);
        let off = analyze(&w, &s).unwrap();
        let mut d = s;
        d.duplicate_aware = true;
        let on = analyze(&w, &d).unwrap();
        assert_eq!(off.blocks, 1);
        assert_eq!(off.feature_loads, 100);
        assert_eq!(on.feature_loads, 16);
        assert!(on.global_load_transactions < off.global_load_transactions);
    }

    #[test]
    fn mma_ops_ignore_flags() {
        let conv = ConvConfig::square(2, 9, 64, 40, 3, 1, 1);
        let w = Workload::new(conv, MachineModel::t4()).unwrap();
        let g = conv.gemm_shape().unwrap();
        for base in KnobSpace::default()
            .with_flags(OptFlags::none())
            .iter()
            .step_by(37)
        {
            if !w.is_valid(&base) {
                continue;
            }
            let bm = (base.blk_row_warps * base.warp_row_tiles * 8) as u64;
            let bn = (base.blk_col_warps * base.warp_col_tiles * 8) as u64;
            let expect = (g.m as u64).div_ceil(bm)
                * (g.n as u64).div_ceil(bn)
                * (bm / 8)
                * (bn / 8)
                * (g.k as u64 / 32);
            for flags in all_flags() {
                let s = base.with_flags(flags);
                if w.is_valid(&s) {
                    assert_eq!(analyze(&w, &s).unwrap().mma_ops, expect);
                }
            }
        }
    }

    #[test]
    fn packing_divides_output_smem_stores_by_eight() {
        let conv = ConvConfig::square(8, 56, 64, 64, 3, 1, 1);
        let w = Workload::new(conv, MachineModel::t4()).unwrap();
        let s = ScheduleConfig::new(2, 2, 2, 2, 2, false);
        let mut p = s;
        p.register_packing = true;
        let off = analyze(&w, &s).unwrap().output_smem_store_bytes;
        let on = analyze(&w, &p).unwrap().output_smem_store_bytes;
        assert_eq!(off, on * 8);
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let conv = ConvConfig::square(1, 4, 32, 8, 3, 1, 1);
        let s = ScheduleConfig::new(8, 8, 1, 1, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor4::random_signed(conv.feature_dims(), 4, &mut rng);
        let wt = Tensor4::random_signed(conv.weight_dims(), 4, &mut rng);
        let err = execute(&conv, &s, &MachineModel::t4(), &f, &wt).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
        let bad = Tensor4::from_fn(conv.feature_dims(), |_| 9);
        let ok = ScheduleConfig::new(1, 1, 1, 1, 1, false);
        let err = execute(&conv, &ok, &MachineModel::t4(), &bad, &wt).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn noise_free_measurement_is_exact_and_deterministic() {
        let conv = ConvConfig::square(8, 56, 64, 64, 3, 1, 1);
        let w = Workload::new(conv, MachineModel::t4()).unwrap();
        let s = ScheduleConfig::new(2, 2, 4, 2, 2, false).with_flags(OptFlags::all());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = measure(&w, &s, 0.0, &mut rng).unwrap();
        assert_eq!(m.runtime, m.cost.estimated_cycles);
        assert!(m.runtime > 0.0);
        let a = measure(&w, &s, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = measure(&w, &s, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_sigma_is_relative() {
        let conv = ConvConfig::square(8, 56, 64, 64, 3, 1, 1);
        let w = Workload::new(conv, MachineModel::t4()).unwrap();
        let s = ScheduleConfig::new(2, 2, 4, 2, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let exact = analyze(&w, &s).unwrap().estimated_cycles;
        let xs: Vec<f64> = (0..10_000)
            .map(|_| measure(&w, &s, 0.05, &mut rng).unwrap().runtime / exact - 1.0)
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd =
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.005, "{sd}");
    }

    fn sample_cost() -> CostBreakdown {
        let conv = ConvConfig::square(8, 28, 128, 128, 3, 1, 1);
        let w = Workload::new(conv, MachineModel::t4()).unwrap();
        analyze(&w, &ScheduleConfig::new(2, 2, 2, 2, 2, false)).unwrap()
    }

    #[test]
    fn more_dram_bandwidth_never_hurts() {
        let c = sample_cost();
        let m = MachineModel::t4();
        let mut fast = m;
        fast.dram_bytes_per_cycle *= 2.0;
        assert!(estimate_cycles(&c, &fast).unwrap() <= estimate_cycles(&c, &m).unwrap());
    }

    #[test]
    fn fewer_transactions_never_hurt() {
        let c = sample_cost();
        let m = MachineModel::t4();
        let mut less = c.clone();
        less.global_load_transactions /= 2;
        assert!(estimate_cycles(&less, &m).unwrap() <= estimate_cycles(&c, &m).unwrap());
    }

    #[test]
    fn zero_throughput_is_a_config_error() {
        let mut m = MachineModel::t4();
        m.smem_bytes_per_cycle = 0.0;
        assert!(matches!(
            estimate_cycles(&sample_cost(), &m),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn packing_raises_occupancy_when_smem_limited() {
        let conv = ConvConfig::square(8, 56, 64, 64, 3, 1, 1);
        let w = Workload::new(conv, MachineModel::t4()).unwrap();
        let s = ScheduleConfig::new(2, 2, 4, 2, 2, false).with_flags(OptFlags {
            duplicate_aware: true,
            register_packing: false,
            layout: LayoutKind::Nhwc,
        });
        let mut p = s;
        p.register_packing = true;
        let (off, on) = (analyze(&w, &s).unwrap(), analyze(&w, &p).unwrap());
        assert!(on.blocks_per_sm > off.blocks_per_sm);
        assert!(on.estimated_cycles < off.estimated_cycles);
    }
}
