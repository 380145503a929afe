//! Shared test harness: a grammar-driven random program generator, data
//! generators, and a compile-simulate-compare driver.

#![allow(dead_code)]

use std::collections::BTreeMap;

use vta_core::ir::{self, VtaConfig};
use vta_core::matrix::{round_up, Mat};
use vta_core::oracle::{compare_bitwise, reference_eval, CompareReport};
use vta_core::pipeline::{compile_single, execute, CompiledProgram, PipelineError};
use vta_core::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProgramKind {
    GemmOnly,
    GemmAlu,
    AluOnly,
    ScalarGemm,
    AddAcc,
}

pub const ALL_KINDS: [ProgramKind; 5] = [
    ProgramKind::GemmOnly,
    ProgramKind::GemmAlu,
    ProgramKind::AluOnly,
    ProgramKind::ScalarGemm,
    ProgramKind::AddAcc,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    Int8,
    FullInt32,
}

pub struct GeneratedCase {
    pub text: String,
    pub data: BTreeMap<String, Mat>,
}

fn gen_mat(rng: &mut SplitMix64, rows: usize, cols: usize, range: ValueRange) -> Mat {
    let data = (0..rows * cols)
        .map(|_| match range {
            ValueRange::Int8 => rng.next_i8_range(),
            ValueRange::FullInt32 => {
                // Mix in extremes to stress wraparound.
                if rng.chance(5) {
                    [i32::MIN, i32::MAX][rng.below(2)]
                } else {
                    rng.next_i32()
                }
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Logical dimension derived from a block count: sometimes exactly aligned,
/// sometimes short by a few elements to exercise padding.
fn logical_dim(rng: &mut SplitMix64, blocks: usize, bs: usize) -> usize {
    let full = blocks * bs;
    if rng.chance(50) {
        full
    } else {
        full - rng.below(bs.min(full - (blocks - 1) * bs - 1).max(1))
    }
}

fn descriptor_rows(rows: &[usize]) -> String {
    rows.iter()
        .map(|r| format!("[[{r}, 1], 1]"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// A random ALU op list over the vector space `dst_vectors`/`src_vectors`
/// (the latter includes a second loaded matrix, if any). `allow_vv` permits
/// vector-vector couplings; those stay row-aligned so column batching works,
/// and the full coupled row set is kept within `row_budget`.
fn gen_alu_ops(
    rng: &mut SplitMix64,
    width: usize,
    dst_vectors: usize,
    src_vectors: usize,
    allow_vv: bool,
    row_budget: usize,
) -> Vec<String> {
    let mut ops = Vec::new();
    let op_names = ["MAX", "MIN", "ADD", "MUL", "SHR"];
    let count = 1 + rng.below(4);
    let budget_rows = row_budget.max(2).min(dst_vectors / width + 1);
    for _ in 0..count {
        let name = op_names[rng.below(5)];
        let vv = allow_vv && rng.chance(40) && src_vectors / width >= 2;
        if vv {
            // Couple two whole rows inside the budget: dst row in the
            // destination area, src row anywhere in the image.
            let dst_row = rng.below(budget_rows.min(dst_vectors / width).max(1));
            let src_row = rng.below(budget_rows.min(src_vectors / width).max(1));
            ops.push(format!(
                "[\"{name}\", [[{}, 1], [{}, 1], {width}]]",
                dst_row * width,
                src_row * width
            ));
        } else {
            let imm = match name {
                "SHR" => rng.range_i32(0, 31),
                _ => rng.range_i32(-64, 64),
            };
            // Arbitrary strided immediate sweep within bounds.
            let start = rng.below(dst_vectors);
            let stride = rng.below(3);
            let max_iters = (dst_vectors - 1 - start)
                .checked_div(stride)
                .map_or(dst_vectors, |n| n + 1);
            let iters = 1 + rng.below(max_iters.min(dst_vectors).max(1));
            ops.push(format!(
                "[\"{name}_IMM\", [[{start}, {stride}], {imm}, {iters}]]"
            ));
        }
    }
    ops
}

/// Generate a random valid program plus matching input data. Shapes stay
/// within `max_blocks` per dimension.
pub fn gen_program(
    rng: &mut SplitMix64,
    cfg: &VtaConfig,
    kind: ProgramKind,
    range: ValueRange,
    max_blocks: usize,
) -> GeneratedCase {
    let bs = cfg.bs;
    let blocks = |rng: &mut SplitMix64| 1 + rng.below(max_blocks);
    let mut data = BTreeMap::new();

    let (a_blocks, l_blocks, b_blocks) = (blocks(rng), blocks(rng), blocks(rng));
    let m = logical_dim(rng, a_blocks, bs);
    let k = logical_dim(rng, l_blocks, bs);
    let n = logical_dim(rng, b_blocks, bs);

    let text = match kind {
        ProgramKind::GemmOnly | ProgramKind::GemmAlu | ProgramKind::ScalarGemm => {
            let scalar = kind == ProgramKind::ScalarGemm;
            let (out_rows, out_cols) = if scalar { (m, k) } else { (m, n) };
            let with_bias = rng.chance(50);
            let mut matrices = vec![format!("        \"A\": [{m}, {k}, \"input\"]")];
            data.insert("A".into(), gen_mat(rng, m, k, range));
            let mut load = vec![r#"        "INP": ["A"]"#.to_string()];
            if !scalar {
                matrices.push(format!("        \"B\": [{k}, {n}, \"input\"]"));
                data.insert("B".into(), gen_mat(rng, k, n, range));
                load.push("        \"WGT\": [\"B\"]".into());
            }
            if with_bias {
                matrices.push(format!(
                    "        \"X\": [{out_rows}, {out_cols}, \"input\"]"
                ));
                data.insert("X".into(), gen_mat(rng, out_rows, out_cols, range));
                load.push("        \"ACC\": [\"X\"]".into());
            }
            matrices.push(format!(
                "        \"C\": [{out_rows}, {out_cols}, \"output\"]"
            ));
            let rhs = if scalar {
                rng.range_i32(-100, 100).to_string()
            } else {
                "\"B\"".to_string()
            };
            let width = round_up(out_cols, bs) / bs;
            let padded_rows = round_up(out_rows, bs);
            let alu_section = if kind == ProgramKind::GemmAlu {
                let vectors = padded_rows * width;
                let ops = gen_alu_ops(rng, width, vectors, vectors, true, cfg.acc_size);
                format!(
                    ",\n    \"ALU\": {{\n        \"C\": [\n            {}\n        ]\n    }}",
                    ops.join(",\n            ")
                )
            } else {
                String::new()
            };
            let store = gen_store(rng, out_rows);
            format!(
                "{{\n    \"NAME\": \"_t\",\n    \"MATRICES\": {{\n{}\n    }},\n    \"LOAD\": {{\n{}\n    }},\n    \"GEMM\": [\"C\", \"A\", {rhs}]{alu_section},\n    \"STORE\": {{\"C\": [{store}]}},\n    \"STRATEGY\": {}\n}}",
                matrices.join(",\n"),
                load.join(",\n"),
                1 + rng.below(4)
            )
        }
        ProgramKind::AluOnly => {
            let (rows, cols) = (m, n);
            let width = round_up(cols, bs) / bs;
            let padded_rows = round_up(rows, bs);
            data.insert("X".into(), gen_mat(rng, rows, cols, range));
            let use_desc = rng.chance(30);
            let (load_acc, dst_vectors) = if use_desc {
                let count = 1 + rng.below(rows);
                let picked: Vec<usize> = (0..count).map(|_| rng.below(rows)).collect();
                (
                    format!("\"ACC\": [\"X\", {}]", descriptor_rows(&picked)),
                    picked.len() * width,
                )
            } else {
                ("\"ACC\": [\"X\"]".to_string(), padded_rows * width)
            };
            let ops = gen_alu_ops(
                rng,
                width,
                dst_vectors,
                dst_vectors,
                !use_desc,
                cfg.acc_size,
            );
            let store_rows_bound = (dst_vectors / width).min(rows);
            let store = gen_store(rng, store_rows_bound);
            format!(
                "{{\n    \"NAME\": \"_t\",\n    \"MATRICES\": {{\n        \"X\": [{rows}, {cols}, \"input\"],\n        \"C\": [{rows}, {cols}, \"output\"]\n    }},\n    \"LOAD\": {{{load_acc}}},\n    \"ALU\": {{\n        \"C\": [\n            {}\n        ]\n    }},\n    \"STORE\": {{\"C\": [{store}]}}\n}}",
                ops.join(",\n            ")
            )
        }
        ProgramKind::AddAcc => {
            let (rows, cols) = (m, n);
            data.insert("X".into(), gen_mat(rng, rows, cols, range));
            data.insert("Y".into(), gen_mat(rng, rows, cols, range));
            let store = gen_store(rng, rows);
            format!(
                "{{\n    \"NAME\": \"_t\",\n    \"MATRICES\": {{\n        \"X\": [{rows}, {cols}, \"input\"],\n        \"Y\": [{rows}, {cols}, \"input\"],\n        \"C\": [{rows}, {cols}, \"output\"]\n    }},\n    \"LOAD\": {{\"ACC\": [\"X\", \"Y\"]}},\n    \"ALU\": {{\"C\": [[\"ADD_ACC\", [\"X\", \"Y\"]]]}},\n    \"STORE\": {{\"C\": [{store}]}}\n}}"
            )
        }
    };
    GeneratedCase { text, data }
}

fn gen_store(rng: &mut SplitMix64, rows: usize) -> String {
    if rng.chance(70) || rows == 1 {
        "\"C\"".to_string()
    } else {
        let count = 1 + rng.below(rows);
        let mut picked: Vec<usize> = Vec::new();
        for _ in 0..count {
            let r = rng.below(rows);
            if !picked.contains(&r) {
                picked.push(r);
            }
        }
        descriptor_rows(&picked)
    }
}

pub struct CaseOutcome {
    pub report: CompareReport,
    pub compiled: CompiledProgram,
}

/// Compile a program text under `cfg`/`strategy`, simulate it, and compare
/// bit-exactly against the dense reference.
pub fn run_case(
    text: &str,
    cfg: &VtaConfig,
    strategy: Option<u8>,
    data: &BTreeMap<String, Mat>,
) -> Result<CaseOutcome, PipelineError> {
    let program = ir::parse_ir(text)?;
    let prog = ir::validate_shapes(&program, cfg)?;
    let compiled = compile_single(prog, strategy)?;
    let sim_rows = execute(&compiled, data)?;
    let oracle_inputs: BTreeMap<String, Vec<Vec<i32>>> =
        data.iter().map(|(k, v)| (k.clone(), v.to_rows())).collect();
    let reference = reference_eval(&program, cfg, &oracle_inputs)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let report =
        compare_bitwise(&sim_rows, &reference).map_err(|e| PipelineError::Data(e.to_string()))?;
    Ok(CaseOutcome { report, compiled })
}

#[allow(dead_code)]
pub fn desk() -> VtaConfig {
    VtaConfig::DESK
}

/// Second acceptance config: production buffer capacities with a desk-scale
/// block edge, so shapes up to 8x8x8 blocks run unpartitioned.
#[allow(dead_code)]
pub fn default_bs4() -> VtaConfig {
    VtaConfig {
        bs: 4,
        ..VtaConfig::DEFAULT
    }
}
