//! End-to-end single-program convenience: parse, validate, plan, lower, and
//! execute against in-memory data. The CLI, the verify workflow, and the
//! test harnesses all drive the compiler through this surface.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codegen::{
    allocate_dram, check_store_coverage, count_stats, lower, synthesized_region_data,
    verify_stream, CodegenError, DramImage, OpStream, StreamStats,
};
use crate::ir::{IrError, MatrixSource, PaddedProgram};
use crate::matrix::Mat;
use crate::partition::{plan_program, PlanError, ProgramPlan};
use crate::simulator::{run, DramStore, SimError, TraceLevel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("stream verification: {0}")]
    Verify(String),
    #[error("{0}")]
    Data(String),
}

pub struct CompiledProgram {
    pub prog: PaddedProgram,
    pub plan: ProgramPlan,
    pub image: DramImage,
    pub stream: OpStream,
    pub stats: StreamStats,
    pub partitions: usize,
}

/// Compile one validated program against its own private DRAM image and
/// statically check the lowered stream.
pub fn compile_single(
    prog: PaddedProgram,
    strategy: Option<u8>,
) -> Result<CompiledProgram, PipelineError> {
    let plan = plan_program(&prog, strategy)?;
    let image = allocate_dram(&[&prog], &[])?;
    let stream = lower(&prog, &plan, &image, 0)?;
    verify_stream(&stream, &image, &prog.config).map_err(PipelineError::Verify)?;
    check_store_coverage(&stream, &image, &prog, 0).map_err(PipelineError::Verify)?;
    let stats = count_stats(&stream);
    let partitions = plan.partition_count();
    Ok(CompiledProgram {
        prog,
        plan,
        image,
        stream,
        stats,
        partitions,
    })
}

/// Build the initial DRAM for a compiled program: zero everywhere, then the
/// synthesized regions, then `data` for every input- and file-backed matrix.
pub fn initial_dram(
    compiled: &CompiledProgram,
    data: &BTreeMap<String, Mat>,
) -> Result<DramStore, PipelineError> {
    let mut dram = DramStore::new(compiled.image.clone());
    for (name, mat) in synthesized_region_data(&compiled.prog) {
        let region = compiled.image.lookup(0, &name)?;
        dram.write_matrix(region, &mat);
    }
    for m in &compiled.prog.matrices {
        if m.decl.source == MatrixSource::Output {
            continue;
        }
        let mat = data
            .get(&m.decl.name)
            .ok_or_else(|| PipelineError::Data(format!("no data for matrix {}", m.decl.name)))?;
        if mat.rows != m.decl.rows || mat.cols != m.decl.cols {
            return Err(PipelineError::Data(format!(
                "data for {} is {}x{}, declared {}x{}",
                m.decl.name, mat.rows, mat.cols, m.decl.rows, m.decl.cols
            )));
        }
        let region = compiled.image.lookup(0, &m.decl.name)?;
        dram.write_matrix(region, mat);
    }
    Ok(dram)
}

/// Run the compiled stream over fresh DRAM and return the designated output
/// rows (logical width, STORE-clause order).
pub fn execute(
    compiled: &CompiledProgram,
    data: &BTreeMap<String, Mat>,
) -> Result<Vec<Vec<i32>>, PipelineError> {
    let mut dram = initial_dram(compiled, data)?;
    run(
        &compiled.stream,
        &mut dram,
        &compiled.prog.config,
        TraceLevel::Off,
    )?;
    let out_region = compiled
        .image
        .lookup(0, &compiled.prog.output().decl.name)?;
    Ok(dram.read_rows(out_region, &compiled.prog.store_rows))
}
