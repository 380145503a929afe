//! Binary artifact files and their layout manifest.
//!
//! `vtac compile` emits, for a program named `<N>`:
//!
//! * `instructions<N>.bin`: a 16-byte header (`VTAS`, version, record count)
//!   followed by fixed 32-byte little-endian records:
//!   opcode u8 | aux u8 | region u16 | f0..f3 u32 | dram_offset u64 | extra u64.
//!   Load/Store records put the 2-D DMA pattern in f0..f3 and the SRAM slot
//!   in `extra`; Gemm/Alu header records carry a uop count and are followed
//!   by that many uop records.
//! * `weight<N>.bin` / `bias<N>.bin`: concatenated region payloads
//!   (row-major int32), located by `file`/`file_offset` in the manifest.
//! * `dram_layout<N>.json`: the region table, config, designated store
//!   rows, and stream statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    AluUop, AluUopSrc, BufferKind, CodegenError, DmaPattern, DramImage, DramRegion, GemmUop,
    OpStream, Role, StreamStats, VtaInstr,
};
use crate::ir::{AluOpKind, PaddedProgram, VtaConfig};
use crate::matrix::Mat;

const MAGIC: &[u8; 4] = b"VTAS";
const VERSION: u32 = 1;

const OP_LOAD: u8 = 0;
const OP_STORE: u8 = 1;
const OP_GEMM: u8 = 2;
const OP_GEMM_UOP: u8 = 3;
const OP_ALU: u8 = 4;
const OP_ALU_UOP: u8 = 5;

#[derive(Clone, Copy, Default)]
struct Record {
    opcode: u8,
    aux: u8,
    region: u16,
    f: [u32; 4],
    dram_offset: u64,
    extra: u64,
}

fn encode_record(r: &Record) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[0] = r.opcode;
    out[1] = r.aux;
    out[2..4].copy_from_slice(&r.region.to_le_bytes());
    out[4..8].copy_from_slice(&r.f[0].to_le_bytes());
    out[8..12].copy_from_slice(&r.f[1].to_le_bytes());
    out[12..16].copy_from_slice(&r.f[2].to_le_bytes());
    out[16..20].copy_from_slice(&r.f[3].to_le_bytes());
    out[20..28].copy_from_slice(&r.dram_offset.to_le_bytes());
    out[28..32].copy_from_slice(&(r.extra as u32).to_le_bytes());
    out
}

fn decode_record(bytes: &[u8]) -> Record {
    Record {
        opcode: bytes[0],
        aux: bytes[1],
        region: u16::from_le_bytes([bytes[2], bytes[3]]),
        f: [
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
            u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
        ],
        dram_offset: u64::from_le_bytes(bytes[20..28].try_into().unwrap()),
        extra: u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as u64,
    }
}

fn alu_kind_code(op: AluOpKind) -> u8 {
    match op {
        AluOpKind::Max => 0,
        AluOpKind::Min => 1,
        AluOpKind::Add => 2,
        AluOpKind::Mul => 3,
        AluOpKind::Shr => 4,
    }
}

fn alu_kind_from(code: u8) -> Result<AluOpKind, CodegenError> {
    Ok(match code {
        0 => AluOpKind::Max,
        1 => AluOpKind::Min,
        2 => AluOpKind::Add,
        3 => AluOpKind::Mul,
        4 => AluOpKind::Shr,
        other => return Err(CodegenError::Format(format!("bad ALU kind {other}"))),
    })
}

pub fn encode_stream(stream: &OpStream, image: &DramImage) -> Vec<u8> {
    let mut records: Vec<Record> = Vec::new();
    for instr in &stream.instrs {
        match instr {
            VtaInstr::Load {
                buffer,
                region,
                pattern,
                dst_slot,
            } => records.push(Record {
                opcode: OP_LOAD,
                aux: *buffer as u8,
                region: *region as u16,
                f: [
                    pattern.item_start as u32,
                    pattern.items_per_row as u32,
                    pattern.row_stride as u32,
                    pattern.row_count as u32,
                ],
                dram_offset: image.region(*region).offset as u64,
                extra: *dst_slot as u64,
            }),
            VtaInstr::Store {
                region,
                pattern,
                src_slot,
            } => records.push(Record {
                opcode: OP_STORE,
                aux: 0,
                region: *region as u16,
                f: [
                    pattern.item_start as u32,
                    pattern.items_per_row as u32,
                    pattern.row_stride as u32,
                    pattern.row_count as u32,
                ],
                dram_offset: image.region(*region).offset as u64,
                extra: *src_slot as u64,
            }),
            VtaInstr::Gemm { uops } => {
                records.push(Record {
                    opcode: OP_GEMM,
                    f: [uops.len() as u32, 0, 0, 0],
                    ..Record::default()
                });
                for u in uops {
                    records.push(Record {
                        opcode: OP_GEMM_UOP,
                        f: [
                            u.acc_start as u32,
                            u.acc_stride as u32,
                            u.inp_slot as u32,
                            u.wgt_slot as u32,
                        ],
                        ..Record::default()
                    });
                }
            }
            VtaInstr::Alu {
                op,
                immediate,
                uops,
            } => {
                records.push(Record {
                    opcode: OP_ALU,
                    aux: alu_kind_code(*op) | (u8::from(*immediate) << 4),
                    f: [uops.len() as u32, 0, 0, 0],
                    ..Record::default()
                });
                for u in uops {
                    let (src, imm) = match u.src {
                        AluUopSrc::Slot(s) => (s as u32, 0),
                        AluUopSrc::Imm(c) => (0, c as u32),
                    };
                    records.push(Record {
                        opcode: OP_ALU_UOP,
                        f: [u.dst_slot as u32, src, imm, 0],
                        ..Record::default()
                    });
                }
            }
        }
    }
    let mut out = Vec::with_capacity(16 + records.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in &records {
        out.extend_from_slice(&encode_record(r));
    }
    out
}

pub fn decode_stream(bytes: &[u8]) -> Result<OpStream, CodegenError> {
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(CodegenError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CodegenError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + count * 32 {
        return Err(CodegenError::Format(format!(
            "expected {} bytes for {count} records, got {}",
            16 + count * 32,
            bytes.len()
        )));
    }
    let records: Vec<Record> = (0..count)
        .map(|i| decode_record(&bytes[16 + i * 32..16 + (i + 1) * 32]))
        .collect();

    let mut instrs = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let r = &records[i];
        match r.opcode {
            OP_LOAD | OP_STORE => {
                let pattern = DmaPattern {
                    item_start: r.f[0] as usize,
                    items_per_row: r.f[1] as usize,
                    row_stride: r.f[2] as usize,
                    row_count: r.f[3] as usize,
                };
                if r.opcode == OP_LOAD {
                    let buffer = match r.aux {
                        0 => BufferKind::Inp,
                        1 => BufferKind::Wgt,
                        2 => BufferKind::Acc,
                        other => return Err(CodegenError::Format(format!("bad buffer {other}"))),
                    };
                    instrs.push(VtaInstr::Load {
                        buffer,
                        region: r.region as usize,
                        pattern,
                        dst_slot: r.extra as usize,
                    });
                } else {
                    instrs.push(VtaInstr::Store {
                        region: r.region as usize,
                        pattern,
                        src_slot: r.extra as usize,
                    });
                }
                i += 1;
            }
            OP_GEMM => {
                let n = r.f[0] as usize;
                let mut uops = Vec::with_capacity(n);
                for k in 0..n {
                    let u = records
                        .get(i + 1 + k)
                        .filter(|u| u.opcode == OP_GEMM_UOP)
                        .ok_or_else(|| CodegenError::Format("truncated GEMM uops".into()))?;
                    uops.push(GemmUop {
                        acc_start: u.f[0] as usize,
                        acc_stride: u.f[1] as usize,
                        inp_slot: u.f[2] as usize,
                        wgt_slot: u.f[3] as usize,
                    });
                }
                instrs.push(VtaInstr::Gemm { uops });
                i += 1 + n;
            }
            OP_ALU => {
                let n = r.f[0] as usize;
                let op = alu_kind_from(r.aux & 0x0f)?;
                let immediate = r.aux & 0x10 != 0;
                let mut uops = Vec::with_capacity(n);
                for k in 0..n {
                    let u = records
                        .get(i + 1 + k)
                        .filter(|u| u.opcode == OP_ALU_UOP)
                        .ok_or_else(|| CodegenError::Format("truncated ALU uops".into()))?;
                    uops.push(AluUop {
                        dst_slot: u.f[0] as usize,
                        src: if immediate {
                            AluUopSrc::Imm(u.f[2] as i32)
                        } else {
                            AluUopSrc::Slot(u.f[1] as usize)
                        },
                    });
                }
                instrs.push(VtaInstr::Alu {
                    op,
                    immediate,
                    uops,
                });
                i += 1 + n;
            }
            other => {
                return Err(CodegenError::Format(format!(
                    "unexpected opcode {other} at record {i}"
                )))
            }
        }
    }
    Ok(OpStream { instrs })
}

// ---------------------------------------------------------------------------
// Layout manifest and bundle IO
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionMeta {
    pub name: String,
    pub role: Role,
    pub layer: usize,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
    /// "weight" or "bias" when the region payload lives in an artifact file.
    pub file: Option<String>,
    pub file_offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub name: String,
    pub config: VtaConfig,
    pub total_elements: usize,
    pub regions: Vec<RegionMeta>,
    pub input_regions: Vec<String>,
    pub output_region: String,
    pub store_rows: Vec<usize>,
    pub stats: StreamStats,
    pub partitions: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CodegenError> {
    std::fs::write(path, bytes).map_err(|source| CodegenError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, CodegenError> {
    std::fs::read(path).map_err(|source| CodegenError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write the artifact set for one program. `region_data` supplies the
/// payload for file-backed regions (weights, biases, synthesized blocks),
/// keyed by region name; zero-filled regions may be omitted.
pub fn write_artifacts(
    dir: &Path,
    prog: &PaddedProgram,
    image: &DramImage,
    layer: usize,
    stream: &OpStream,
    stats: StreamStats,
    partitions: usize,
    region_data: &BTreeMap<String, Mat>,
) -> Result<Vec<PathBuf>, CodegenError> {
    let suffix = &prog.ir.name;
    let mut weight_payload: Vec<u8> = Vec::new();
    let mut bias_payload: Vec<u8> = Vec::new();
    let mut regions_meta = Vec::new();
    let mut input_regions = Vec::new();

    for region in &image.regions {
        if region.layer != layer {
            continue;
        }
        // file_offset counts elements, matching read_artifacts.
        let (file, file_offset) = match region.role {
            Role::Weight | Role::Scratch => {
                let offset = weight_payload.len() / 4;
                weight_payload.extend(padded_payload(region, region_data)?);
                (Some("weight".to_string()), offset)
            }
            Role::Bias => {
                let offset = bias_payload.len() / 4;
                bias_payload.extend(padded_payload(region, region_data)?);
                (Some("bias".to_string()), offset)
            }
            Role::Input => {
                input_regions.push(region.name.clone());
                (None, 0)
            }
            Role::Output => (None, 0),
        };
        regions_meta.push(RegionMeta {
            name: region.name.clone(),
            role: region.role,
            layer: region.layer,
            offset: region.offset,
            rows: region.rows,
            cols: region.cols,
            padded_rows: region.padded_rows,
            padded_cols: region.padded_cols,
            file,
            file_offset,
        });
    }

    let meta = ArtifactMeta {
        name: suffix.clone(),
        config: prog.config,
        total_elements: image.total_elements,
        regions: regions_meta,
        input_regions,
        output_region: prog.output().decl.name.clone(),
        store_rows: prog.store_rows.clone(),
        stats,
        partitions,
    };

    let mut written = Vec::new();
    let instr_path = dir.join(format!("instructions{suffix}.bin"));
    write_file(&instr_path, &encode_stream(stream, image))?;
    written.push(instr_path);
    let weight_path = dir.join(format!("weight{suffix}.bin"));
    write_file(&weight_path, &weight_payload)?;
    written.push(weight_path);
    let bias_path = dir.join(format!("bias{suffix}.bin"));
    write_file(&bias_path, &bias_payload)?;
    written.push(bias_path);
    let layout_path = dir.join(format!("dram_layout{suffix}.json"));
    let json =
        serde_json::to_string_pretty(&meta).map_err(|e| CodegenError::Format(e.to_string()))?;
    write_file(&layout_path, json.as_bytes())?;
    written.push(layout_path);
    Ok(written)
}

/// Region payload as padded row-major bytes; missing entries are zero-filled
/// (the zero-bias region has no explicit data).
fn padded_payload(
    region: &DramRegion,
    region_data: &BTreeMap<String, Mat>,
) -> Result<Vec<u8>, CodegenError> {
    match region_data.get(&region.name) {
        Some(mat) => {
            if mat.rows != region.rows || mat.cols != region.cols {
                return Err(CodegenError::Format(format!(
                    "payload for region {} is {}x{}, expected {}x{}",
                    region.name, mat.rows, mat.cols, region.rows, region.cols
                )));
            }
            Ok(mat
                .pad_to(region.padded_rows, region.padded_cols)
                .to_le_bytes())
        }
        None => Ok(vec![0u8; region.len() * 4]),
    }
}

#[derive(Debug)]
pub struct LoadedArtifacts {
    pub meta: ArtifactMeta,
    pub image: DramImage,
    pub stream: OpStream,
    /// Initial DRAM element store (file-backed regions filled in).
    pub dram_init: Vec<i32>,
}

/// Load a compiled artifact set. `suffix` selects among several programs in
/// one directory; with `None` the directory must hold exactly one layout.
pub fn read_artifacts(dir: &Path, suffix: Option<&str>) -> Result<LoadedArtifacts, CodegenError> {
    let suffix = match suffix {
        Some(s) => s.to_string(),
        None => {
            let mut found = Vec::new();
            let entries = std::fs::read_dir(dir).map_err(|source| CodegenError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            for entry in entries {
                let entry = entry.map_err(|source| CodegenError::Io {
                    path: dir.display().to_string(),
                    source,
                })?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(mid) = name
                    .strip_prefix("dram_layout")
                    .and_then(|rest| rest.strip_suffix(".json"))
                {
                    found.push(mid.to_string());
                }
            }
            if found.len() != 1 {
                return Err(CodegenError::Format(format!(
                    "expected exactly one dram_layout*.json in {}, found {}",
                    dir.display(),
                    found.len()
                )));
            }
            found.remove(0)
        }
    };

    let layout_bytes = read_file(&dir.join(format!("dram_layout{suffix}.json")))?;
    let meta: ArtifactMeta = serde_json::from_slice(&layout_bytes)
        .map_err(|e| CodegenError::Format(format!("layout manifest: {e}")))?;

    let regions: Vec<DramRegion> = meta
        .regions
        .iter()
        .map(|r| DramRegion {
            name: r.name.clone(),
            role: r.role,
            layer: r.layer,
            offset: r.offset,
            rows: r.rows,
            cols: r.cols,
            padded_rows: r.padded_rows,
            padded_cols: r.padded_cols,
        })
        .collect();
    let image = DramImage::from_regions(regions, meta.total_elements);

    let stream = decode_stream(&read_file(&dir.join(format!("instructions{suffix}.bin")))?)?;

    let weight = read_file(&dir.join(format!("weight{suffix}.bin")))?;
    let bias = read_file(&dir.join(format!("bias{suffix}.bin")))?;
    let mut dram_init = vec![0i32; meta.total_elements];
    for r in &meta.regions {
        let payload = match r.file.as_deref() {
            Some("weight") => &weight,
            Some("bias") => &bias,
            _ => continue,
        };
        let len = r.padded_rows * r.padded_cols;
        let bytes = payload
            .get(r.file_offset * 4..(r.file_offset + len) * 4)
            .ok_or_else(|| {
                CodegenError::Format(format!("payload for region {} out of bounds", r.name))
            })?;
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            dram_init[r.offset + i] = i32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }

    Ok(LoadedArtifacts {
        meta,
        image,
        stream,
        dram_init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_codec_round_trips() {
        let r = Record {
            opcode: OP_LOAD,
            aux: 2,
            region: 7,
            f: [1, 2, 3, 4],
            dram_offset: 99,
            extra: 12,
        };
        let bytes = encode_record(&r);
        assert_eq!(bytes.len(), 32);
        let d = decode_record(&bytes);
        assert_eq!(d.opcode, r.opcode);
        assert_eq!(d.aux, r.aux);
        assert_eq!(d.region, r.region);
        assert_eq!(d.f, r.f);
        assert_eq!(d.dram_offset, r.dram_offset);
        assert_eq!(d.extra, r.extra);
    }

    #[test]
    fn stream_codec_round_trips() {
        let image = DramImage::from_regions(
            vec![DramRegion {
                name: "A".into(),
                role: Role::Input,
                layer: 0,
                offset: 0,
                rows: 4,
                cols: 4,
                padded_rows: 4,
                padded_cols: 4,
            }],
            16,
        );
        let stream = OpStream {
            instrs: vec![
                VtaInstr::Load {
                    buffer: BufferKind::Acc,
                    region: 0,
                    pattern: DmaPattern {
                        item_start: 0,
                        items_per_row: 2,
                        row_stride: 2,
                        row_count: 4,
                    },
                    dst_slot: 0,
                },
                VtaInstr::Gemm {
                    uops: vec![GemmUop {
                        acc_start: 0,
                        acc_stride: 2,
                        inp_slot: 1,
                        wgt_slot: 3,
                    }],
                },
                VtaInstr::Alu {
                    op: AluOpKind::Shr,
                    immediate: true,
                    uops: vec![AluUop {
                        dst_slot: 5,
                        src: AluUopSrc::Imm(-3),
                    }],
                },
                VtaInstr::Store {
                    region: 0,
                    pattern: DmaPattern::contiguous(1, 3),
                    src_slot: 2,
                },
            ],
        };
        let bytes = encode_stream(&stream, &image);
        assert_eq!(decode_stream(&bytes).unwrap(), stream);
    }

    #[test]
    fn truncated_stream_rejected() {
        let image = DramImage::from_regions(vec![], 0);
        let bytes = encode_stream(&OpStream::default(), &image);
        assert!(decode_stream(&bytes[..8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_stream(&bad).is_err());
    }
}
