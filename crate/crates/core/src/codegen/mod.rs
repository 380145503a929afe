//! Lowering: DRAM image layout, translation of a partitioned program into a
//! linear VTA instruction stream, stream statistics, and a static residency
//! verifier.
//!
//! Every DRAM region holds one padded matrix in row-major element order.
//! Loads and stores address *items* of a region (`bs x bs` blocks for
//! INP/WGT, length-`bs` row segments called "vectors" for ACC) through a 2-D
//! pattern of start item, items per row, row stride, and row count. One
//! pattern is one DMA transfer and counts as one instruction; GEMM and ALU
//! instructions carry their atomic block operations as uops.

pub mod artifact;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocking::AluPairSrc;
use crate::ir::{AluOpKind, MatrixSource, PaddedProgram, VtaConfig};
use crate::matrix::{round_up, Mat};
use crate::partition::{AluPlan, OffloadPlan, Partition, ProgramPlan};

pub use artifact::{
    decode_stream, encode_stream, read_artifacts, write_artifacts, ArtifactMeta, LoadedArtifacts,
};

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("aliased regions disagree on padded shape: {0}")]
    AliasShapeMismatch(String),
    #[error("no region for matrix {name:?} in layer {layer}")]
    MissingRegion { layer: usize, name: String },
    #[error("internal slot bookkeeping error: {0}")]
    SlotOverflow(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact format error: {0}")]
    Format(String),
}

// ---------------------------------------------------------------------------
// DRAM image
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Weight,
    Bias,
    Output,
    Scratch,
}

/// Name of the synthesized zero-bias region (GEMM without an ACC load).
pub const ZERO_BIAS: &str = "__bias";
/// Name of the synthesized diagonal block region (scalar GEMM).
pub const SCALAR_WGT: &str = "__scalar";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramRegion {
    pub name: String,
    pub role: Role,
    pub layer: usize,
    /// Element offset of the region within the DRAM image.
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
}

impl DramRegion {
    pub fn len(&self) -> usize {
        self.padded_rows * self.padded_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_grid(&self, bs: usize) -> (usize, usize) {
        (self.padded_rows / bs, self.padded_cols / bs)
    }

    /// Item count when addressed as ACC vectors.
    pub fn vector_count(&self, bs: usize) -> usize {
        self.padded_rows * (self.padded_cols / bs)
    }
}

#[derive(Clone, Debug, Default)]
pub struct DramImage {
    pub regions: Vec<DramRegion>,
    pub total_elements: usize,
    lookup: BTreeMap<(usize, String), usize>,
}

impl DramImage {
    pub fn lookup(&self, layer: usize, name: &str) -> Result<usize, CodegenError> {
        self.lookup
            .get(&(layer, name.to_string()))
            .copied()
            .ok_or_else(|| CodegenError::MissingRegion {
                layer,
                name: name.to_string(),
            })
    }

    pub fn region(&self, index: usize) -> &DramRegion {
        &self.regions[index]
    }

    pub fn from_regions(regions: Vec<DramRegion>, total_elements: usize) -> Self {
        let lookup = regions
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.layer, r.name.clone()), i))
            .collect();
        DramImage {
            regions,
            total_elements,
            lookup,
        }
    }
}

/// Chained layers: the consumer's input matrix aliases the producer's output
/// region instead of getting its own.
#[derive(Clone, Debug)]
pub struct AliasLink {
    pub producer_layer: usize,
    pub consumer_layer: usize,
    pub consumer_matrix: String,
}

/// Deterministic layout: layers in order, regions in declaration order, each
/// aligned to a `bs*bs` element boundary; synthesized bias/scalar regions
/// follow the declared ones.
pub fn allocate_dram(
    programs: &[&PaddedProgram],
    links: &[AliasLink],
) -> Result<DramImage, CodegenError> {
    let mut regions: Vec<DramRegion> = Vec::new();
    let mut lookup: BTreeMap<(usize, String), usize> = BTreeMap::new();
    let mut cursor = 0usize;

    for (layer, prog) in programs.iter().enumerate() {
        let bs = prog.config.bs;
        let align = bs * bs;
        let acc_loaded: BTreeSet<&str> = prog
            .ir
            .load
            .acc
            .iter()
            .flat_map(|acc| {
                let mut names = vec![acc.matrix.as_str()];
                if let crate::ir::AccLoadRest::Second(s) = &acc.rest {
                    names.push(s.as_str());
                }
                names
            })
            .collect();

        let push = |regions: &mut Vec<DramRegion>,
                    cursor: &mut usize,
                    lookup: &mut BTreeMap<(usize, String), usize>,
                    region: DramRegion| {
            let mut region = region;
            region.offset = round_up(*cursor, align);
            *cursor = region.offset + region.len();
            lookup.insert((layer, region.name.clone()), regions.len());
            regions.push(region);
        };

        for m in &prog.matrices {
            let link = links
                .iter()
                .find(|l| l.consumer_layer == layer && l.consumer_matrix == m.decl.name);
            if let Some(link) = link {
                // Alias: resolve to the producer's output region.
                let producer = programs[link.producer_layer];
                let out_name = &producer.output().decl.name;
                let idx = *lookup
                    .get(&(link.producer_layer, out_name.clone()))
                    .ok_or_else(|| CodegenError::MissingRegion {
                        layer: link.producer_layer,
                        name: out_name.clone(),
                    })?;
                let r = &regions[idx];
                if r.rows != m.decl.rows
                    || r.cols != m.decl.cols
                    || r.padded_rows != m.padded_rows
                    || r.padded_cols != m.padded_cols
                {
                    return Err(CodegenError::AliasShapeMismatch(format!(
                        "layer {} output {} is {}x{} ({}x{} padded), layer {layer} input {} is \
                         {}x{} ({}x{} padded)",
                        link.producer_layer,
                        out_name,
                        r.rows,
                        r.cols,
                        r.padded_rows,
                        r.padded_cols,
                        m.decl.name,
                        m.decl.rows,
                        m.decl.cols,
                        m.padded_rows,
                        m.padded_cols
                    )));
                }
                lookup.insert((layer, m.decl.name.clone()), idx);
                continue;
            }
            let role = match &m.decl.source {
                MatrixSource::Output => Role::Output,
                MatrixSource::Input => Role::Input,
                MatrixSource::File(_) => {
                    if acc_loaded.contains(m.decl.name.as_str()) {
                        Role::Bias
                    } else {
                        Role::Weight
                    }
                }
            };
            push(
                &mut regions,
                &mut cursor,
                &mut lookup,
                DramRegion {
                    name: m.decl.name.clone(),
                    role,
                    layer,
                    offset: 0,
                    rows: m.decl.rows,
                    cols: m.decl.cols,
                    padded_rows: m.padded_rows,
                    padded_cols: m.padded_cols,
                },
            );
        }

        if prog.gemm_shape.is_some() && prog.ir.load.acc.is_none() {
            let out = prog.output();
            push(
                &mut regions,
                &mut cursor,
                &mut lookup,
                DramRegion {
                    name: ZERO_BIAS.into(),
                    role: Role::Bias,
                    layer,
                    offset: 0,
                    rows: out.padded_rows,
                    cols: out.padded_cols,
                    padded_rows: out.padded_rows,
                    padded_cols: out.padded_cols,
                },
            );
        }
        if prog.scalar_gemm.is_some() {
            push(
                &mut regions,
                &mut cursor,
                &mut lookup,
                DramRegion {
                    name: SCALAR_WGT.into(),
                    role: Role::Weight,
                    layer,
                    offset: 0,
                    rows: bs,
                    cols: bs,
                    padded_rows: bs,
                    padded_cols: bs,
                },
            );
        }
    }

    Ok(DramImage {
        regions,
        total_elements: cursor,
        lookup,
    })
}

/// Content of the synthesized regions of one program (the diagonal scalar
/// block; the zero bias region needs no explicit data).
pub fn synthesized_region_data(prog: &PaddedProgram) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    if let Some(b) = prog.scalar_gemm {
        let bs = prog.config.bs;
        let mut m = Mat::zeros(bs, bs);
        for d in 0..bs {
            m.set(d, d, b);
        }
        out.push((SCALAR_WGT.to_string(), m));
    }
    out
}

// ---------------------------------------------------------------------------
// Instruction stream
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BufferKind {
    Inp,
    Wgt,
    Acc,
}

/// One 2-D DMA transfer over region items: rows of `items_per_row`
/// consecutive items, starting `row_stride` apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DmaPattern {
    pub item_start: usize,
    pub items_per_row: usize,
    pub row_stride: usize,
    pub row_count: usize,
}

impl DmaPattern {
    pub fn contiguous(start: usize, count: usize) -> Self {
        DmaPattern {
            item_start: start,
            items_per_row: count,
            row_stride: 0,
            row_count: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.items_per_row * self.row_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.row_count).flat_map(move |r| {
            (0..self.items_per_row).map(move |c| self.item_start + r * self.row_stride + c)
        })
    }

    pub fn max_item(&self) -> usize {
        self.item_start + self.row_stride * self.row_count.saturating_sub(1) + self.items_per_row
            - 1
    }
}

/// One atomic block multiply-accumulate. The ACC operand is the `bs` vectors
/// `acc_start + u*acc_stride`, matching the per-row uop addressing of the
/// hardware.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmUop {
    pub acc_start: usize,
    pub acc_stride: usize,
    pub inp_slot: usize,
    pub wgt_slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluUopSrc {
    Slot(usize),
    Imm(i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AluUop {
    pub dst_slot: usize,
    pub src: AluUopSrc,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VtaInstr {
    Load {
        buffer: BufferKind,
        region: usize,
        pattern: DmaPattern,
        dst_slot: usize,
    },
    Store {
        region: usize,
        pattern: DmaPattern,
        src_slot: usize,
    },
    Gemm {
        uops: Vec<GemmUop>,
    },
    Alu {
        op: AluOpKind,
        immediate: bool,
        uops: Vec<AluUop>,
    },
}

impl VtaInstr {
    pub fn opcode_name(&self) -> &'static str {
        match self {
            VtaInstr::Load { .. } => "LOAD",
            VtaInstr::Store { .. } => "STORE",
            VtaInstr::Gemm { .. } => "GEMM",
            VtaInstr::Alu { .. } => "ALU",
        }
    }

    pub fn uop_count(&self) -> usize {
        match self {
            VtaInstr::Gemm { uops } => uops.len(),
            VtaInstr::Alu { uops, .. } => uops.len(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStream {
    pub instrs: Vec<VtaInstr>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub instructions: usize,
    pub uops: usize,
}

/// Instructions are the coalesced Load/Store/Gemm/Alu records; uops are the
/// atomic block operations they carry. Uops are invariant under strategy.
pub fn count_stats(stream: &OpStream) -> StreamStats {
    StreamStats {
        instructions: stream.instrs.len(),
        uops: stream.instrs.iter().map(VtaInstr::uop_count).sum(),
    }
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

struct LowerCx<'a> {
    prog: &'a PaddedProgram,
    image: &'a DramImage,
    layer: usize,
    bs: usize,
    /// ACC image width in segments (= output padded_cols / bs).
    width: usize,
}

impl<'a> LowerCx<'a> {
    fn region_of(&self, name: &str) -> Result<usize, CodegenError> {
        self.image.lookup(self.layer, name)
    }

    fn output_region(&self) -> Result<usize, CodegenError> {
        self.region_of(&self.prog.output().decl.name)
    }

    fn bias_region(&self) -> Result<usize, CodegenError> {
        match &self.prog.ir.load.acc {
            Some(acc) => self.region_of(&acc.matrix),
            None => self.region_of(ZERO_BIAS),
        }
    }
}

/// Bounding rectangle of a set of block ids over a `grid_cols`-wide grid;
/// the set must cover the rectangle exactly.
fn block_rect(
    blocks: &BTreeSet<usize>,
    grid_cols: usize,
) -> Result<(usize, usize, usize, usize), CodegenError> {
    let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0, usize::MAX, 0);
    for &b in blocks {
        let (i, j) = (b / grid_cols, b % grid_cols);
        i0 = i0.min(i);
        i1 = i1.max(i + 1);
        j0 = j0.min(j);
        j1 = j1.max(j + 1);
    }
    if blocks.len() != (i1 - i0) * (j1 - j0) {
        return Err(CodegenError::SlotOverflow(format!(
            "partition touches a non-rectangular block set ({} blocks in a {}x{} bound)",
            blocks.len(),
            i1 - i0,
            j1 - j0
        )));
    }
    Ok((i0, i1, j0, j1))
}

/// Lower a planned program against its DRAM image. GEMM partitions come
/// first, then ALU partitions, matching the phase ordering contract.
pub fn lower(
    prog: &PaddedProgram,
    plan: &ProgramPlan,
    image: &DramImage,
    layer: usize,
) -> Result<OpStream, CodegenError> {
    let cx = LowerCx {
        prog,
        image,
        layer,
        bs: prog.config.bs,
        width: prog.acc_width,
    };
    let mut instrs = Vec::new();
    match plan {
        ProgramPlan::Single(part) => lower_single(&cx, part, &mut instrs)?,
        ProgramPlan::Phased { gemm, alu } => {
            if let Some(gemm_plan) = gemm {
                lower_gemm_plan(&cx, gemm_plan, alu.is_some(), &mut instrs)?;
            }
            if let Some(alu_plan) = alu {
                lower_alu_plan(&cx, alu_plan, gemm.is_some(), &mut instrs)?;
            }
        }
    }
    Ok(OpStream { instrs })
}

fn load_inp_whole(cx: &LowerCx) -> Result<Option<VtaInstr>, CodegenError> {
    let Some(inp) = &cx.prog.ir.load.inp else {
        return Ok(None);
    };
    let region = cx.region_of(&inp.matrix)?;
    let m = cx.prog.matrix(&inp.matrix);
    Ok(Some(VtaInstr::Load {
        buffer: BufferKind::Inp,
        region,
        pattern: DmaPattern {
            item_start: 0,
            items_per_row: m.block_cols,
            row_stride: m.block_cols,
            row_count: m.block_rows,
        },
        dst_slot: 0,
    }))
}

fn load_wgt_whole(cx: &LowerCx) -> Result<Option<VtaInstr>, CodegenError> {
    if cx.prog.scalar_gemm.is_some() {
        return Ok(Some(VtaInstr::Load {
            buffer: BufferKind::Wgt,
            region: cx.region_of(SCALAR_WGT)?,
            pattern: DmaPattern::contiguous(0, 1),
            dst_slot: 0,
        }));
    }
    let Some(wgt) = &cx.prog.ir.load.wgt else {
        return Ok(None);
    };
    let region = cx.region_of(&wgt.matrix)?;
    let m = cx.prog.matrix(&wgt.matrix);
    Ok(Some(VtaInstr::Load {
        buffer: BufferKind::Wgt,
        region,
        pattern: DmaPattern {
            item_start: 0,
            items_per_row: m.block_cols,
            row_stride: m.block_cols,
            row_count: m.block_rows,
        },
        dst_slot: 0,
    }))
}

/// Split an ascending item list into maximal 2-D DMA patterns: maximal
/// consecutive chunks first, then equal-length chunks at a constant stride
/// stack into one pattern. Returns each pattern with its offset into the
/// original list (= SRAM slot offset for sequentially-filled transfers).
fn coalesce_dma(items: &[usize]) -> Vec<(DmaPattern, usize)> {
    let mut chunks: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let mut j = i + 1;
        while j < items.len() && items[j] == items[j - 1] + 1 {
            j += 1;
        }
        chunks.push((i, j - i));
        i = j;
    }
    let mut out = Vec::new();
    let mut c = 0;
    while c < chunks.len() {
        let (first, len) = chunks[c];
        let mut rows = 1;
        let mut stride = 0;
        let mut k = c + 1;
        while k < chunks.len() {
            let (idx, l) = chunks[k];
            if l != len {
                break;
            }
            let d = items[idx] - items[chunks[k - 1].0];
            if rows == 1 {
                stride = d;
            } else if d != stride {
                break;
            }
            rows += 1;
            k += 1;
        }
        out.push((
            DmaPattern {
                item_start: items[first],
                items_per_row: len,
                row_stride: stride,
                row_count: rows,
            },
            first,
        ));
        c = k;
    }
    out
}

/// Loads that materialise the given image vectors (ascending) into ACC slots
/// `base_slot..`. For GEMM programs the image is the output/bias matrix
/// itself; for ALU-only programs the positions map into the loaded sources.
fn acc_vector_loads(
    cx: &LowerCx,
    vectors: &[usize],
    from_output: bool,
    base_slot: usize,
    out: &mut Vec<VtaInstr>,
) -> Result<(), CodegenError> {
    if from_output {
        let region = cx.output_region()?;
        for (pattern, offset) in coalesce_dma(vectors) {
            out.push(VtaInstr::Load {
                buffer: BufferKind::Acc,
                region,
                pattern,
                dst_slot: base_slot + offset,
            });
        }
        return Ok(());
    }
    // ALU-only: vector v covers (position v/width, segment v%width); the
    // position table maps to a source matrix row. Source padded widths equal
    // the image width (validated), so items keep the same vector indexing.
    let positions = &cx.prog.acc_positions;
    let mut span_start = 0;
    while span_start < vectors.len() {
        let matrix_of = |v: usize| positions[v / cx.width].matrix;
        let item_of = |v: usize| {
            let pos = positions[v / cx.width];
            pos.row * cx.width + v % cx.width
        };
        let m = matrix_of(vectors[span_start]);
        let mut span_end = span_start + 1;
        while span_end < vectors.len()
            && matrix_of(vectors[span_end]) == m
            && item_of(vectors[span_end]) > item_of(vectors[span_end - 1])
        {
            span_end += 1;
        }
        let items: Vec<usize> = vectors[span_start..span_end]
            .iter()
            .map(|&v| item_of(v))
            .collect();
        let region = cx.region_of(&cx.prog.matrices[m].decl.name)?;
        for (pattern, offset) in coalesce_dma(&items) {
            out.push(VtaInstr::Load {
                buffer: BufferKind::Acc,
                region,
                pattern,
                dst_slot: base_slot + span_start + offset,
            });
        }
        span_start = span_end;
    }
    Ok(())
}

/// Store `store_vectors` (a subset of the resident `vectors`) back to the
/// output region; records need consecutive SRAM slots, so spans break on
/// residency gaps.
fn acc_vector_stores(
    cx: &LowerCx,
    vectors: &[usize],
    store_vectors: &[usize],
    out: &mut Vec<VtaInstr>,
) -> Result<(), CodegenError> {
    let region = cx.output_region()?;
    let slot_of = |v: usize| {
        vectors
            .binary_search(&v)
            .expect("stored vector is resident")
    };
    let mut span_start = 0;
    while span_start < store_vectors.len() {
        let mut span_end = span_start + 1;
        while span_end < store_vectors.len()
            && slot_of(store_vectors[span_end]) == slot_of(store_vectors[span_end - 1]) + 1
        {
            span_end += 1;
        }
        let span = &store_vectors[span_start..span_end];
        let base = slot_of(span[0]);
        for (pattern, offset) in coalesce_dma(span) {
            out.push(VtaInstr::Store {
                region,
                pattern,
                src_slot: base + offset,
            });
        }
        span_start = span_end;
    }
    Ok(())
}

fn gemm_instr(
    cx: &LowerCx,
    part: &Partition,
    acc_rect: (usize, usize, usize, usize),
    inp_slot: &dyn Fn(usize) -> usize,
    wgt_slot: &dyn Fn(usize) -> usize,
) -> VtaInstr {
    let (bi0, _, bj0, bj1) = acc_rect;
    let rect_w = bj1 - bj0;
    let uops = part
        .triples
        .iter()
        .map(|t| {
            let (bi, bj) = (t.l / cx.width, t.l % cx.width);
            GemmUop {
                acc_start: (bi - bi0) * cx.bs * rect_w + (bj - bj0),
                acc_stride: rect_w,
                inp_slot: inp_slot(t.p),
                wgt_slot: wgt_slot(t.m),
            }
        })
        .collect();
    VtaInstr::Gemm { uops }
}

fn lower_single(
    cx: &LowerCx,
    part: &Partition,
    out: &mut Vec<VtaInstr>,
) -> Result<(), CodegenError> {
    let prog = cx.prog;
    if prog.gemm_shape.is_some() {
        if let Some(instr) = load_inp_whole(cx)? {
            out.push(instr);
        }
        if let Some(instr) = load_wgt_whole(cx)? {
            out.push(instr);
        }
        // Initialise the whole accumulator image from the bias region.
        let region = cx.bias_region()?;
        out.push(VtaInstr::Load {
            buffer: BufferKind::Acc,
            region,
            pattern: DmaPattern {
                item_start: 0,
                items_per_row: cx.width,
                row_stride: cx.width,
                row_count: prog.acc_total_rows,
            },
            dst_slot: 0,
        });
    } else {
        let vectors: Vec<usize> = (0..prog.acc_total_rows * cx.width).collect();
        acc_vector_loads(cx, &vectors, false, 0, out)?;
    }

    if !part.triples.is_empty() {
        // The whole image is resident row-major, so a block's vectors start
        // at its first row and stride by the image width; whole-matrix loads
        // place block k in slot k.
        let uops = part
            .triples
            .iter()
            .map(|t| {
                let (bi, bj) = (t.l / cx.width, t.l % cx.width);
                GemmUop {
                    acc_start: bi * cx.bs * cx.width + bj,
                    acc_stride: cx.width,
                    inp_slot: t.p,
                    wgt_slot: t.m,
                }
            })
            .collect();
        out.push(VtaInstr::Gemm { uops });
    }

    for run in &part.alu_runs {
        out.push(VtaInstr::Alu {
            op: run.op,
            immediate: run.immediate,
            uops: run
                .pairs
                .iter()
                .map(|p| AluUop {
                    dst_slot: p.dst,
                    src: match p.src {
                        AluPairSrc::Vector(v) => AluUopSrc::Slot(v),
                        AluPairSrc::Scalar(c) => AluUopSrc::Imm(c),
                    },
                })
                .collect(),
        });
    }

    let mut store_rows = prog.store_rows.clone();
    store_rows.sort_unstable();
    let vectors: Vec<usize> = (0..prog.acc_total_rows * cx.width).collect();
    let store_vectors: Vec<usize> = store_rows
        .iter()
        .flat_map(|&r| r * cx.width..(r + 1) * cx.width)
        .collect();
    acc_vector_stores(cx, &vectors, &store_vectors, out)
}

fn lower_gemm_plan(
    cx: &LowerCx,
    plan: &OffloadPlan,
    alu_follows: bool,
    out: &mut Vec<VtaInstr>,
) -> Result<(), CodegenError> {
    let prog = cx.prog;
    let shape = &plan.shape;
    let designated: Vec<usize> = {
        let mut rows = prog.store_rows.clone();
        rows.sort_unstable();
        rows
    };

    let mut idx = 0;
    while idx < plan.partitions.len() {
        let group = plan.partitions[idx].acc_group;
        let mut end = idx + 1;
        while end < plan.partitions.len() && plan.partitions[end].acc_group == group {
            end += 1;
        }
        let acc_blocks = plan.partitions[idx].distinct_acc_blocks();
        debug_assert!(plan.partitions[idx..end]
            .iter()
            .all(|p| p.distinct_acc_blocks() == acc_blocks));
        let rect = block_rect(&acc_blocks, cx.width)?;
        let (bi0, bi1, bj0, bj1) = rect;
        let rect_w = bj1 - bj0;
        let (r0, r1) = (bi0 * cx.bs, bi1 * cx.bs);

        // One ACC lifetime per group: bias in, compute chunks, result out.
        out.push(VtaInstr::Load {
            buffer: BufferKind::Acc,
            region: cx.bias_region()?,
            pattern: DmaPattern {
                item_start: r0 * cx.width + bj0,
                items_per_row: rect_w,
                row_stride: cx.width,
                row_count: r1 - r0,
            },
            dst_slot: 0,
        });

        for part in &plan.partitions[idx..end] {
            let inp_blocks = part.distinct_inp();
            let (pi0, pi1, pk0, pk1) = block_rect(&inp_blocks, shape.lambda)?;
            out.push(VtaInstr::Load {
                buffer: BufferKind::Inp,
                region: cx.region_of(&prog.ir.load.inp.as_ref().unwrap().matrix)?,
                pattern: DmaPattern {
                    item_start: pi0 * shape.lambda + pk0,
                    items_per_row: pk1 - pk0,
                    row_stride: shape.lambda,
                    row_count: pi1 - pi0,
                },
                dst_slot: 0,
            });
            let inp_w = pk1 - pk0;
            let inp_slot = move |p: usize| {
                let (i, k) = (p / shape.lambda, p % shape.lambda);
                (i - pi0) * inp_w + (k - pk0)
            };

            let wgt_slot: Box<dyn Fn(usize) -> usize> = if plan.scalar {
                out.push(VtaInstr::Load {
                    buffer: BufferKind::Wgt,
                    region: cx.region_of(SCALAR_WGT)?,
                    pattern: DmaPattern::contiguous(0, 1),
                    dst_slot: 0,
                });
                Box::new(|_| 0)
            } else {
                let wgt_blocks = part.distinct_wgt();
                let (mk0, mk1, mj0, mj1) = block_rect(&wgt_blocks, shape.beta)?;
                out.push(VtaInstr::Load {
                    buffer: BufferKind::Wgt,
                    region: cx.region_of(&prog.ir.load.wgt.as_ref().unwrap().matrix)?,
                    pattern: DmaPattern {
                        item_start: mk0 * shape.beta + mj0,
                        items_per_row: mj1 - mj0,
                        row_stride: shape.beta,
                        row_count: mk1 - mk0,
                    },
                    dst_slot: 0,
                });
                let wgt_w = mj1 - mj0;
                Box::new(move |m: usize| {
                    let (k, j) = (m / shape.beta, m % shape.beta);
                    (k - mk0) * wgt_w + (j - mj0)
                })
            };

            out.push(gemm_instr(cx, part, rect, &inp_slot, &*wgt_slot));
        }

        // Write the group's rows back: everything when an ALU phase still
        // needs the region contents, else only the designated rows.
        let store_rows: Vec<usize> = if alu_follows {
            (r0..r1).collect()
        } else {
            designated
                .iter()
                .copied()
                .filter(|r| (r0..r1).contains(r))
                .collect()
        };
        let mut run = 0;
        while run < store_rows.len() {
            let mut stop = run + 1;
            while stop < store_rows.len() && store_rows[stop] == store_rows[stop - 1] + 1 {
                stop += 1;
            }
            out.push(VtaInstr::Store {
                region: cx.output_region()?,
                pattern: DmaPattern {
                    item_start: store_rows[run] * cx.width + bj0,
                    items_per_row: rect_w,
                    row_stride: cx.width,
                    row_count: stop - run,
                },
                src_slot: (store_rows[run] - r0) * rect_w,
            });
            run = stop;
        }
        idx = end;
    }
    Ok(())
}

fn lower_alu_plan(
    cx: &LowerCx,
    plan: &AluPlan,
    gemm_preceded: bool,
    out: &mut Vec<VtaInstr>,
) -> Result<(), CodegenError> {
    for part in &plan.partitions {
        acc_vector_loads(cx, &part.vectors, gemm_preceded, 0, out)?;
        let local_slot = |vector: usize| -> usize {
            part.vectors
                .binary_search(&vector)
                .expect("ALU pair references a resident vector")
        };
        for run in &part.runs {
            out.push(VtaInstr::Alu {
                op: run.op,
                immediate: run.immediate,
                uops: run
                    .pairs
                    .iter()
                    .map(|p| AluUop {
                        dst_slot: local_slot(p.dst),
                        src: match p.src {
                            AluPairSrc::Vector(v) => AluUopSrc::Slot(local_slot(v)),
                            AluPairSrc::Scalar(c) => AluUopSrc::Imm(c),
                        },
                    })
                    .collect(),
            });
        }
        acc_vector_stores(cx, &part.vectors, &part.store_vectors, out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Residency verifier
// ---------------------------------------------------------------------------

/// Static linear scan: every GEMM/ALU slot reference must be populated by an
/// earlier Load (or GEMM output), stores read only written slots, and every
/// DMA stays inside its region and buffer.
pub fn verify_stream(
    stream: &OpStream,
    image: &DramImage,
    config: &VtaConfig,
) -> Result<(), String> {
    let bs = config.bs;
    let mut inp = vec![false; config.inp_size];
    let mut wgt = vec![false; config.wgt_size];
    let mut acc = vec![false; config.acc_size];
    for (idx, instr) in stream.instrs.iter().enumerate() {
        let fail = |msg: String| Err(format!("instr {idx}: {msg}"));
        match instr {
            VtaInstr::Load {
                buffer,
                region,
                pattern,
                dst_slot,
            } => {
                if pattern.is_empty() {
                    return fail("empty load pattern".into());
                }
                let r = image.region(*region);
                let (valid, items): (&mut Vec<bool>, usize) = match buffer {
                    BufferKind::Inp => (&mut inp, r.block_grid(bs).0 * r.block_grid(bs).1),
                    BufferKind::Wgt => (&mut wgt, r.block_grid(bs).0 * r.block_grid(bs).1),
                    BufferKind::Acc => (&mut acc, r.vector_count(bs)),
                };
                if pattern.max_item() >= items {
                    return fail(format!(
                        "load reads item {} of region {} ({} items)",
                        pattern.max_item(),
                        r.name,
                        items
                    ));
                }
                if dst_slot + pattern.len() > valid.len() {
                    return fail(format!(
                        "load fills slots {}..{} beyond capacity {}",
                        dst_slot,
                        dst_slot + pattern.len(),
                        valid.len()
                    ));
                }
                for s in *dst_slot..dst_slot + pattern.len() {
                    valid[s] = true;
                }
            }
            VtaInstr::Store {
                region,
                pattern,
                src_slot,
            } => {
                let r = image.region(*region);
                if pattern.max_item() >= r.vector_count(bs) {
                    return fail(format!(
                        "store writes item {} of region {} ({} vectors)",
                        pattern.max_item(),
                        r.name,
                        r.vector_count(bs)
                    ));
                }
                for s in *src_slot..src_slot + pattern.len() {
                    if s >= acc.len() {
                        return fail(format!("store reads slot {s} beyond ACC capacity"));
                    }
                    if !acc[s] {
                        return fail(format!("store reads never-written ACC slot {s}"));
                    }
                }
            }
            VtaInstr::Gemm { uops } => {
                for u in uops {
                    if u.inp_slot >= inp.len() || !inp[u.inp_slot] {
                        return fail(format!("gemm reads unpopulated INP slot {}", u.inp_slot));
                    }
                    if u.wgt_slot >= wgt.len() || !wgt[u.wgt_slot] {
                        return fail(format!("gemm reads unpopulated WGT slot {}", u.wgt_slot));
                    }
                    for row in 0..bs {
                        let slot = u.acc_start + row * u.acc_stride;
                        if slot >= acc.len() || !acc[slot] {
                            return fail(format!(
                                "gemm accumulates into unpopulated ACC slot {slot}"
                            ));
                        }
                    }
                }
            }
            VtaInstr::Alu { uops, .. } => {
                for u in uops {
                    if u.dst_slot >= acc.len() || !acc[u.dst_slot] {
                        return fail(format!("alu writes unpopulated ACC slot {}", u.dst_slot));
                    }
                    if let AluUopSrc::Slot(s) = u.src {
                        if s >= acc.len() || !acc[s] {
                            return fail(format!("alu reads unpopulated ACC slot {s}"));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Check that the stream writes every designated output element exactly once
/// in its final phase (and never writes outside the output region's rows).
pub fn check_store_coverage(
    stream: &OpStream,
    image: &DramImage,
    prog: &PaddedProgram,
    layer: usize,
) -> Result<(), String> {
    let out_region = image
        .lookup(layer, &prog.output().decl.name)
        .map_err(|e| e.to_string())?;
    let width = prog.acc_width;
    // Count writes per designated element in the *last* store touching it;
    // intermediate GEMM-phase stores are tracked separately.
    let mut writes: BTreeMap<usize, usize> = BTreeMap::new();
    for instr in &stream.instrs {
        if let VtaInstr::Store {
            region, pattern, ..
        } = instr
        {
            if *region != out_region {
                return Err("store outside the output region".into());
            }
            for item in pattern.items() {
                *writes.entry(item).or_insert(0) += 1;
            }
        }
    }
    let has_alu_phase = prog.gemm_shape.is_some() && !prog.alu_decls.is_empty();
    for &row in &prog.store_rows {
        for seg in 0..width {
            let item = row * width + seg;
            match writes.get(&item) {
                None => return Err(format!("designated vector {item} never stored")),
                Some(1) => {}
                // With separate GEMM and ALU phases a designated row may be
                // stored by both; more than two writes is always a bug.
                Some(2) if has_alu_phase => {}
                Some(n) => {
                    return Err(format!("designated vector {item} stored {n} times"));
                }
            }
        }
    }
    Ok(())
}
