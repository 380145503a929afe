//! Independent dense reference semantics and bit-exact comparison.
//!
//! This module deliberately shares no arithmetic or indexing code with
//! `blocking`, `codegen`, or `simulator`: matrices are vectors of rows, the
//! padding is computed locally, and every operation is a plain scalar loop.
//! Keeping the reference separate is what makes the bit-exact comparison a
//! real oracle rather than a tautology.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{
    AccLoadRest, AluClause, AluSrc, GemmRhs, IrProgram, MatrixSource, StoreSpec, VtaConfig,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("missing input data for matrix {0:?}")]
    MissingInput(String),
    #[error("input for {name:?} is {got_rows}x{got_cols}, declared {rows}x{cols}")]
    ShapeMismatch {
        name: String,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
}

/// Rows of the designated output, in STORE-clause order, logical width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseProgramResult {
    pub rows: Vec<Vec<i32>>,
    pub row_indices: Vec<usize>,
}

type Rows = Vec<Vec<i32>>;

fn pad_up(n: usize, bs: usize) -> usize {
    n.div_ceil(bs) * bs
}

fn padded(data: &Rows, rows: usize, cols: usize, bs: usize) -> Rows {
    let (pr, pc) = (pad_up(rows, bs), pad_up(cols, bs));
    let mut out = vec![vec![0i32; pc]; pr];
    for r in 0..rows {
        for c in 0..cols {
            out[r][c] = data[r][c];
        }
    }
    out
}

fn elementwise(op: crate::ir::AluOpKind, x: i32, y: i32) -> i32 {
    use crate::ir::AluOpKind::*;
    match op {
        Max => {
            if x > y {
                x
            } else {
                y
            }
        }
        Min => {
            if x < y {
                x
            } else {
                y
            }
        }
        Add => x.wrapping_add(y),
        Mul => x.wrapping_mul(y),
        Shr => x >> (y.rem_euclid(32) as u32),
    }
}

/// Evaluate a program densely: `C := X + A x B` (or `X + A*b`, or the loaded
/// ACC rows), then the ALU list in declaration order via scalar loops, then
/// extraction of the stored rows. All arithmetic wraps at 32 bits.
pub fn reference_eval(
    program: &IrProgram,
    config: &VtaConfig,
    inputs: &BTreeMap<String, Rows>,
) -> Result<DenseProgramResult, OracleError> {
    let bs = config.bs;
    let output = program.output();

    let fetch = |name: &str| -> Result<Rows, OracleError> {
        let decl = program.matrix(name).expect("validated reference");
        match decl.source {
            MatrixSource::Output => Ok(vec![vec![0; decl.cols]; decl.rows]),
            _ => {
                let data = inputs
                    .get(name)
                    .ok_or_else(|| OracleError::MissingInput(name.to_string()))?;
                let got_rows = data.len();
                let got_cols = data.first().map_or(0, Vec::len);
                if got_rows != decl.rows || got_cols != decl.cols {
                    return Err(OracleError::ShapeMismatch {
                        name: name.to_string(),
                        rows: decl.rows,
                        cols: decl.cols,
                        got_rows,
                        got_cols,
                    });
                }
                Ok(padded(data, decl.rows, decl.cols, bs))
            }
        }
    };

    // The working image: for GEMM programs, the padded accumulator matrix;
    // for ALU-only programs, the loaded row sequence(s).
    let mut image: Rows;
    let dst_rows;
    if let Some(gemm) = &program.gemm {
        let a_decl = program.matrix(&gemm.src).unwrap();
        let a = fetch(&gemm.src)?;
        let (out_pr, out_pc) = (pad_up(output.rows, bs), pad_up(output.cols, bs));
        image = match &program.load.acc {
            Some(acc) => fetch(&acc.matrix)?,
            None => vec![vec![0; out_pc]; out_pr],
        };
        match &gemm.rhs {
            GemmRhs::Matrix(rhs_name) => {
                let b = fetch(rhs_name)?;
                for r in 0..a_decl.rows {
                    for c in 0..output.cols {
                        let mut sum = image[r][c];
                        for t in 0..a_decl.cols {
                            sum = sum.wrapping_add(a[r][t].wrapping_mul(b[t][c]));
                        }
                        image[r][c] = sum;
                    }
                }
            }
            GemmRhs::Scalar(scalar) => {
                for r in 0..a_decl.rows {
                    for c in 0..a_decl.cols {
                        image[r][c] = image[r][c].wrapping_add(a[r][c].wrapping_mul(*scalar));
                    }
                }
            }
        }
        dst_rows = out_pr;
    } else {
        let acc = program.load.acc.as_ref().expect("validated ALU program");
        let first = fetch(&acc.matrix)?;
        match &acc.rest {
            AccLoadRest::Whole => {
                image = first;
                dst_rows = image.len();
            }
            AccLoadRest::Descriptors(descs) => {
                let mut rows = Vec::new();
                for d in descs {
                    for idx in d.indices() {
                        rows.push(first[idx].clone());
                    }
                }
                dst_rows = rows.len();
                image = rows;
            }
            AccLoadRest::Second(second_name) => {
                dst_rows = first.len();
                image = first;
                image.extend(fetch(second_name)?);
            }
        }
    }

    // The ALU list: scalar loops over each declaration's iterations.
    // Indices address bs-wide vectors of the image, row-major.
    let width = pad_up(output.cols, bs) / bs;
    if let Some(alu) = &program.alu {
        let decls: Vec<crate::ir::AluDecl> = match &alu.clause {
            AluClause::Ops(ops) => ops.clone(),
            AluClause::AddAcc { .. } => {
                // X(i) += Y(i) over every row: one sweep of all vectors of
                // the first loaded matrix against the second's.
                let vectors = dst_rows * width;
                vec![crate::ir::AluDecl {
                    op: crate::ir::AluOpKind::Add,
                    dst_start: 0,
                    dst_stride: 1,
                    src: AluSrc::Vector {
                        start: vectors,
                        stride: 1,
                    },
                    iterations: vectors,
                }]
            }
        };
        for d in &decls {
            for j in 0..d.iterations {
                let x = d.dst_start + j * d.dst_stride;
                let (xr, xs) = (x / width, x % width);
                match d.src {
                    AluSrc::Immediate(c) => {
                        for t in 0..bs {
                            let v = &mut image[xr][xs * bs + t];
                            *v = elementwise(d.op, *v, c);
                        }
                    }
                    AluSrc::Vector { start, stride } => {
                        let y = start + j * stride;
                        let (yr, ys) = (y / width, y % width);
                        for t in 0..bs {
                            let s = image[yr][ys * bs + t];
                            let v = &mut image[xr][xs * bs + t];
                            *v = elementwise(d.op, *v, s);
                        }
                    }
                }
            }
        }
    }

    // Extraction of the stored rows, logical width, clause order.
    let store_bound = if program.gemm.is_some() {
        output.rows
    } else {
        dst_rows.min(output.rows)
    };
    let mut row_indices = Vec::new();
    match &program.store.spec {
        StoreSpec::Whole => row_indices.extend(0..store_bound),
        StoreSpec::Rows(descs) => {
            for d in descs {
                row_indices.extend(d.indices());
            }
        }
    }
    let rows = row_indices
        .iter()
        .map(|&r| image[r][..output.cols].to_vec())
        .collect();
    Ok(DenseProgramResult { rows, row_indices })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub row: usize,
    pub col: usize,
    pub simulated: i32,
    pub reference: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompareReport {
    pub status: &'static str,
    pub mismatches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_divergence: Option<Divergence>,
}

impl CompareReport {
    pub fn is_match(&self) -> bool {
        self.mismatches == 0
    }
}

/// Exact int32 comparison over the designated rows. Coordinates in the
/// report use the output matrix's own row indices.
pub fn compare_bitwise(
    simulated: &[Vec<i32>],
    reference: &DenseProgramResult,
) -> Result<CompareReport, OracleError> {
    if simulated.len() != reference.rows.len()
        || simulated
            .iter()
            .zip(&reference.rows)
            .any(|(s, r)| s.len() != r.len())
    {
        return Err(OracleError::ShapeMismatch {
            name: "simulated output".into(),
            rows: reference.rows.len(),
            cols: reference.rows.first().map_or(0, Vec::len),
            got_rows: simulated.len(),
            got_cols: simulated.first().map_or(0, Vec::len),
        });
    }
    let mut mismatches = 0;
    let mut first = None;
    for (i, (sim_row, ref_row)) in simulated.iter().zip(&reference.rows).enumerate() {
        for (col, (s, r)) in sim_row.iter().zip(ref_row).enumerate() {
            if s != r {
                mismatches += 1;
                if first.is_none() {
                    first = Some(Divergence {
                        row: reference.row_indices[i],
                        col,
                        simulated: *s,
                        reference: *r,
                    });
                }
            }
        }
    }
    Ok(CompareReport {
        status: if mismatches == 0 { "match" } else { "mismatch" },
        mismatches,
        first_divergence: first,
    })
}
