//! Functional execution of an instruction stream against a modeled DRAM and
//! the three on-chip buffers.
//!
//! All arithmetic is 32-bit two's-complement with wraparound. SRAM slots are
//! poisoned until written: reading a never-written slot is an error rather
//! than silently returning stale data, which turns compiler bugs into loud
//! failures. SHR is an arithmetic (sign-propagating) shift with the amount
//! taken modulo 32.

use thiserror::Error;

use crate::codegen::{AluUopSrc, BufferKind, DmaPattern, DramImage, OpStream, VtaInstr};
use crate::ir::{AluOpKind, VtaConfig};
use crate::matrix::Mat;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("instr {instr}: read of never-written {buffer:?} slot {slot}")]
    PoisonedRead {
        instr: usize,
        buffer: BufferKind,
        slot: usize,
    },
    #[error("instr {instr}: {detail}")]
    RangeError { instr: usize, detail: String },
}

// ---------------------------------------------------------------------------
// DRAM
// ---------------------------------------------------------------------------

/// The flat element store plus its region table. Host code writes inputs
/// through [`DramStore::write_matrix`]; during execution only Store
/// instructions mutate it.
#[derive(Clone, Debug)]
pub struct DramStore {
    pub image: DramImage,
    pub data: Vec<i32>,
}

impl DramStore {
    pub fn new(image: DramImage) -> Self {
        let len = image.total_elements;
        DramStore {
            image,
            data: vec![0; len],
        }
    }

    pub fn with_init(image: DramImage, data: Vec<i32>) -> Self {
        assert_eq!(data.len(), image.total_elements);
        DramStore { image, data }
    }

    /// Write a logical matrix into a region (padding stays zero).
    pub fn write_matrix(&mut self, region: usize, mat: &Mat) {
        let r = self.image.region(region).clone();
        assert_eq!(
            (mat.rows, mat.cols),
            (r.rows, r.cols),
            "matrix shape must match region {}",
            r.name
        );
        for row in 0..r.padded_rows {
            for col in 0..r.padded_cols {
                let v = if row < mat.rows && col < mat.cols {
                    mat.get(row, col)
                } else {
                    0
                };
                self.data[r.offset + row * r.padded_cols + col] = v;
            }
        }
    }

    /// Read back the logical (unpadded) content of a region.
    pub fn read_logical(&self, region: usize) -> Mat {
        let r = self.image.region(region);
        let mut out = Mat::zeros(r.rows, r.cols);
        for row in 0..r.rows {
            for col in 0..r.cols {
                out.set(row, col, self.data[r.offset + row * r.padded_cols + col]);
            }
        }
        out
    }

    /// Read selected logical rows of a region (logical columns only).
    pub fn read_rows(&self, region: usize, rows: &[usize]) -> Vec<Vec<i32>> {
        let r = self.image.region(region);
        rows.iter()
            .map(|&row| {
                (0..r.cols)
                    .map(|col| self.data[r.offset + row * r.padded_cols + col])
                    .collect()
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Machine state
// ---------------------------------------------------------------------------

struct Sram {
    bs: usize,
    inp: Vec<i32>,
    inp_valid: Vec<bool>,
    wgt: Vec<i32>,
    wgt_valid: Vec<bool>,
    acc: Vec<i32>,
    acc_valid: Vec<bool>,
}

impl Sram {
    fn new(cfg: &VtaConfig) -> Self {
        let blk = cfg.bs * cfg.bs;
        Sram {
            bs: cfg.bs,
            inp: vec![0; cfg.inp_size * blk],
            inp_valid: vec![false; cfg.inp_size],
            wgt: vec![0; cfg.wgt_size * blk],
            wgt_valid: vec![false; cfg.wgt_size],
            acc: vec![0; cfg.acc_size * cfg.bs],
            acc_valid: vec![false; cfg.acc_size],
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TraceRecord {
    pub index: usize,
    pub opcode: &'static str,
    /// Items moved for Load/Store, uops applied for Gemm/Alu.
    pub counts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ExecutionTrace {
    /// Instructions applied, regardless of trace level.
    pub executed: usize,
    pub records: Vec<TraceRecord>,
}

impl ExecutionTrace {
    /// One JSON object per executed instruction, newline-separated.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace serialization"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TraceLevel {
    #[default]
    Off,
    Counts,
    Digests,
}

fn fnv1a64(data: &[i32]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

fn apply_alu(op: AluOpKind, x: i32, y: i32) -> i32 {
    match op {
        AluOpKind::Max => x.max(y),
        AluOpKind::Min => x.min(y),
        AluOpKind::Add => x.wrapping_add(y),
        AluOpKind::Mul => x.wrapping_mul(y),
        AluOpKind::Shr => x >> ((y as u32) & 31),
    }
}

/// Execute the stream in order. Load/Gemm/Alu never touch DRAM; Store never
/// touches SRAM. Returns the per-instruction trace.
pub fn run(
    stream: &OpStream,
    dram: &mut DramStore,
    cfg: &VtaConfig,
    trace: TraceLevel,
) -> Result<ExecutionTrace, SimError> {
    let mut sram = Sram::new(cfg);
    let mut out = ExecutionTrace::default();
    for (index, instr) in stream.instrs.iter().enumerate() {
        let digest_buf = step(&mut sram, dram, instr, index)?;
        out.executed += 1;
        if trace != TraceLevel::Off {
            let digest = match (trace, digest_buf) {
                (TraceLevel::Digests, Some(buf)) => Some(format!("{:016x}", fnv1a64(buf))),
                _ => None,
            };
            // Borrow of sram ends before the next iteration.
            let record = TraceRecord {
                index,
                opcode: instr.opcode_name(),
                counts: match instr {
                    VtaInstr::Load { pattern, .. } | VtaInstr::Store { pattern, .. } => {
                        pattern.len()
                    }
                    other => other.uop_count(),
                },
                digest,
            };
            out.records.push(record);
        }
    }
    Ok(out)
}

fn region_item_bounds(image: &DramImage, region: usize, buffer: BufferKind, bs: usize) -> usize {
    let r = image.region(region);
    match buffer {
        BufferKind::Inp | BufferKind::Wgt => {
            let (br, bc) = r.block_grid(bs);
            br * bc
        }
        BufferKind::Acc => r.vector_count(bs),
    }
}

fn check_pattern(
    pattern: &DmaPattern,
    limit: usize,
    what: &str,
    index: usize,
) -> Result<(), SimError> {
    if pattern.is_empty() || pattern.max_item() >= limit {
        return Err(SimError::RangeError {
            instr: index,
            detail: format!(
                "{what} pattern [{}+{}x{}@{}] exceeds {} items",
                pattern.item_start,
                pattern.items_per_row,
                pattern.row_count,
                pattern.row_stride,
                limit
            ),
        });
    }
    Ok(())
}

/// Apply one instruction. Returns the buffer slice to digest for tracing.
fn step<'s>(
    sram: &'s mut Sram,
    dram: &mut DramStore,
    instr: &VtaInstr,
    index: usize,
) -> Result<Option<&'s [i32]>, SimError> {
    let bs = sram.bs;
    let blk = bs * bs;
    match instr {
        VtaInstr::Load {
            buffer,
            region,
            pattern,
            dst_slot,
        } => {
            let items = region_item_bounds(&dram.image, *region, *buffer, bs);
            check_pattern(pattern, items, "load", index)?;
            let r = dram.image.region(*region).clone();
            match buffer {
                BufferKind::Inp | BufferKind::Wgt => {
                    let (slots, valid, data) = if *buffer == BufferKind::Inp {
                        (sram.inp_valid.len(), &mut sram.inp_valid, &mut sram.inp)
                    } else {
                        (sram.wgt_valid.len(), &mut sram.wgt_valid, &mut sram.wgt)
                    };
                    for (j, item) in pattern.items().enumerate() {
                        let slot = dst_slot + j;
                        if slot >= slots {
                            return Err(SimError::RangeError {
                                instr: index,
                                detail: format!("load fills slot {slot} beyond capacity {slots}"),
                            });
                        }
                        let (_, bc) = r.block_grid(bs);
                        let (bi, bj) = (item / bc, item % bc);
                        for u in 0..bs {
                            for v in 0..bs {
                                data[slot * blk + u * bs + v] = dram.data
                                    [r.offset + (bi * bs + u) * r.padded_cols + bj * bs + v];
                            }
                        }
                        valid[slot] = true;
                    }
                    Ok(Some(if *buffer == BufferKind::Inp {
                        &sram.inp
                    } else {
                        &sram.wgt
                    }))
                }
                BufferKind::Acc => {
                    let vw = r.padded_cols / bs;
                    for (j, item) in pattern.items().enumerate() {
                        let slot = dst_slot + j;
                        if slot >= sram.acc_valid.len() {
                            return Err(SimError::RangeError {
                                instr: index,
                                detail: format!(
                                    "load fills ACC slot {slot} beyond capacity {}",
                                    sram.acc_valid.len()
                                ),
                            });
                        }
                        let (row, seg) = (item / vw, item % vw);
                        for t in 0..bs {
                            sram.acc[slot * bs + t] =
                                dram.data[r.offset + row * r.padded_cols + seg * bs + t];
                        }
                        sram.acc_valid[slot] = true;
                    }
                    Ok(Some(&sram.acc))
                }
            }
        }
        VtaInstr::Store {
            region,
            pattern,
            src_slot,
        } => {
            let items = region_item_bounds(&dram.image, *region, BufferKind::Acc, bs);
            check_pattern(pattern, items, "store", index)?;
            let r = dram.image.region(*region).clone();
            let vw = r.padded_cols / bs;
            for (j, item) in pattern.items().enumerate() {
                let slot = src_slot + j;
                if slot >= sram.acc_valid.len() {
                    return Err(SimError::RangeError {
                        instr: index,
                        detail: format!("store reads ACC slot {slot} beyond capacity"),
                    });
                }
                if !sram.acc_valid[slot] {
                    return Err(SimError::PoisonedRead {
                        instr: index,
                        buffer: BufferKind::Acc,
                        slot,
                    });
                }
                let (row, seg) = (item / vw, item % vw);
                for t in 0..bs {
                    dram.data[r.offset + row * r.padded_cols + seg * bs + t] =
                        sram.acc[slot * bs + t];
                }
            }
            Ok(None)
        }
        VtaInstr::Gemm { uops } => {
            for u in uops {
                if u.inp_slot >= sram.inp_valid.len() || !sram.inp_valid[u.inp_slot] {
                    return Err(SimError::PoisonedRead {
                        instr: index,
                        buffer: BufferKind::Inp,
                        slot: u.inp_slot,
                    });
                }
                if u.wgt_slot >= sram.wgt_valid.len() || !sram.wgt_valid[u.wgt_slot] {
                    return Err(SimError::PoisonedRead {
                        instr: index,
                        buffer: BufferKind::Wgt,
                        slot: u.wgt_slot,
                    });
                }
                for row in 0..bs {
                    let slot = u.acc_start + row * u.acc_stride;
                    if slot >= sram.acc_valid.len() {
                        return Err(SimError::RangeError {
                            instr: index,
                            detail: format!("gemm ACC slot {slot} beyond capacity"),
                        });
                    }
                    if !sram.acc_valid[slot] {
                        return Err(SimError::PoisonedRead {
                            instr: index,
                            buffer: BufferKind::Acc,
                            slot,
                        });
                    }
                }
                let a = u.inp_slot * blk;
                let b = u.wgt_slot * blk;
                for row in 0..bs {
                    let c = (u.acc_start + row * u.acc_stride) * bs;
                    for col in 0..bs {
                        let mut sum = sram.acc[c + col];
                        for t in 0..bs {
                            sum = sum.wrapping_add(
                                sram.inp[a + row * bs + t].wrapping_mul(sram.wgt[b + t * bs + col]),
                            );
                        }
                        sram.acc[c + col] = sum;
                    }
                }
            }
            Ok(Some(&sram.acc))
        }
        VtaInstr::Alu { op, uops, .. } => {
            for u in uops {
                if u.dst_slot >= sram.acc_valid.len() || !sram.acc_valid[u.dst_slot] {
                    return Err(SimError::PoisonedRead {
                        instr: index,
                        buffer: BufferKind::Acc,
                        slot: u.dst_slot,
                    });
                }
                match u.src {
                    AluUopSrc::Imm(c) => {
                        let d = u.dst_slot * bs;
                        for t in 0..bs {
                            sram.acc[d + t] = apply_alu(*op, sram.acc[d + t], c);
                        }
                    }
                    AluUopSrc::Slot(s) => {
                        if s >= sram.acc_valid.len() || !sram.acc_valid[s] {
                            return Err(SimError::PoisonedRead {
                                instr: index,
                                buffer: BufferKind::Acc,
                                slot: s,
                            });
                        }
                        let d = u.dst_slot * bs;
                        let y = s * bs;
                        for t in 0..bs {
                            sram.acc[d + t] = apply_alu(*op, sram.acc[d + t], sram.acc[y + t]);
                        }
                    }
                }
            }
            Ok(Some(&sram.acc))
        }
    }
}
