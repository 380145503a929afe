//! The JSON VTA intermediate representation: hardware configuration, program
//! types, a strict parser, a canonical renderer, and shape validation.
//!
//! A program declares up to three source matrices plus one output, buffer
//! LOAD clauses, a GEMM and/or a list of ALU operations targeting the output,
//! a STORE clause, and an optional partitioning strategy. Keys may arrive in
//! any order (ordering is only linted); the renderer always emits the
//! canonical order NAME, MATRICES, LOAD, GEMM, ALU, STORE, STRATEGY.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::matrix::round_up;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("syntax error at {path}: {message}")]
    Syntax { path: String, message: String },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("matrix {0} has a zero dimension")]
    EmptyMatrix(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn syn(path: impl Into<String>, message: impl Into<String>) -> IrError {
    IrError::Syntax {
        path: path.into(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Hardware configuration
// ---------------------------------------------------------------------------

/// VTA hardware parameters: block edge length and per-buffer capacities.
///
/// `inp_size` and `wgt_size` count `bs x bs` blocks; `acc_size` counts
/// length-`bs` vectors and must be a multiple of `bs` so whole accumulator
/// blocks fit cleanly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VtaConfig {
    pub bs: usize,
    pub inp_size: usize,
    pub wgt_size: usize,
    pub acc_size: usize,
}

impl VtaConfig {
    /// Production-scale defaults.
    pub const DEFAULT: VtaConfig = VtaConfig {
        bs: 16,
        inp_size: 2048,
        wgt_size: 1024,
        acc_size: 2048,
    };

    /// Tiny configuration that forces partitioning on desk-scale fixtures.
    pub const DESK: VtaConfig = VtaConfig {
        bs: 2,
        inp_size: 4,
        wgt_size: 4,
        acc_size: 8,
    };

    pub fn validate(&self) -> Result<(), IrError> {
        if self.bs < 2 {
            return Err(IrError::Config(format!("bs must be >= 2, got {}", self.bs)));
        }
        if self.inp_size < 1 || self.wgt_size < 1 || self.acc_size < 1 {
            return Err(IrError::Config("buffer sizes must be >= 1".into()));
        }
        if !self.acc_size.is_multiple_of(self.bs) {
            return Err(IrError::Config(format!(
                "acc_size ({}) must be a multiple of bs ({})",
                self.acc_size, self.bs
            )));
        }
        Ok(())
    }

    /// ACC capacity expressed in whole `bs x bs` blocks.
    pub fn acc_blocks(&self) -> usize {
        self.acc_size / self.bs
    }

    pub fn from_json(text: &str) -> Result<VtaConfig, IrError> {
        let cfg: VtaConfig = serde_json::from_str(text)
            .map_err(|e| IrError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<VtaConfig, IrError> {
        let text = std::fs::read_to_string(path).map_err(|source| IrError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

// ---------------------------------------------------------------------------
// Program types
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MatrixSource {
    Input,
    Output,
    File(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixDecl {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub source: MatrixSource,
}

/// A `[[a, b], c]` row gather: rows `a + j*b` for `j < c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadDescriptor {
    pub start: usize,
    pub stride: usize,
    pub count: usize,
}

impl LoadDescriptor {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count).map(move |j| self.start + j * self.stride)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferLoad {
    pub matrix: String,
    /// Empty means the whole matrix.
    pub descriptors: Vec<LoadDescriptor>,
}

/// The ACC clause can also name a second matrix loaded after the first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccLoadRest {
    Whole,
    Descriptors(Vec<LoadDescriptor>),
    Second(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccLoad {
    pub matrix: String,
    pub rest: AccLoadRest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadClause {
    pub inp: Option<BufferLoad>,
    pub wgt: Option<BufferLoad>,
    pub acc: Option<AccLoad>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AluOpKind {
    Max,
    Min,
    Add,
    Mul,
    Shr,
}

impl AluOpKind {
    pub fn name(self) -> &'static str {
        match self {
            AluOpKind::Max => "MAX",
            AluOpKind::Min => "MIN",
            AluOpKind::Add => "ADD",
            AluOpKind::Mul => "MUL",
            AluOpKind::Shr => "SHR",
        }
    }

    fn from_name(s: &str) -> Option<(AluOpKind, bool)> {
        let (base, imm) = match s.strip_suffix("_IMM") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let kind = match base {
            "MAX" => AluOpKind::Max,
            "MIN" => AluOpKind::Min,
            "ADD" => AluOpKind::Add,
            "MUL" => AluOpKind::Mul,
            "SHR" => AluOpKind::Shr,
            _ => return None,
        };
        Some((kind, imm))
    }
}

impl fmt::Display for AluOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluSrc {
    Vector { start: usize, stride: usize },
    Immediate(i32),
}

/// One line of the ALU list: `op(dst(j), src(j))` for `j < iterations`, with
/// `dst(j) = dst_start + j*dst_stride`. Indices address ACC vectors of the
/// padded accumulator image, row-major (`vector = row*beta + segment`); for
/// single-block-column matrices a vector index is exactly a row index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AluDecl {
    pub op: AluOpKind,
    pub dst_start: usize,
    pub dst_stride: usize,
    pub src: AluSrc,
    pub iterations: usize,
}

impl AluDecl {
    pub fn is_immediate(&self) -> bool {
        matches!(self.src, AluSrc::Immediate(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AluClause {
    Ops(Vec<AluDecl>),
    AddAcc { lhs: String, rhs: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AluSection {
    pub target: String,
    pub clause: AluClause,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GemmRhs {
    Matrix(String),
    Scalar(i32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GemmClause {
    pub dst: String,
    pub src: String,
    pub rhs: GemmRhs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreSpec {
    Whole,
    Rows(Vec<LoadDescriptor>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreClause {
    pub matrix: String,
    pub spec: StoreSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrProgram {
    pub name: String,
    pub matrices: Vec<MatrixDecl>,
    pub load: LoadClause,
    pub gemm: Option<GemmClause>,
    pub alu: Option<AluSection>,
    pub store: StoreClause,
    pub strategy: Option<u8>,
}

impl IrProgram {
    pub fn matrix(&self, name: &str) -> Option<&MatrixDecl> {
        self.matrices.iter().find(|m| m.name == name)
    }

    pub fn output(&self) -> &MatrixDecl {
        self.matrices
            .iter()
            .find(|m| m.source == MatrixSource::Output)
            .expect("validated program has an output matrix")
    }
}

// ---------------------------------------------------------------------------
// Lexical helpers
// ---------------------------------------------------------------------------

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_bin_path(s: &str) -> bool {
    s.len() > 4
        && s.ends_with(".bin")
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '/'))
}

/// The grammar's `hex` production. No clause consumes it today; it is kept
/// for forward compatibility of the primitive set.
pub fn is_hex_literal(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_hexdigit())
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

const CANONICAL_ORDER: [&str; 7] = [
    "NAME", "MATRICES", "LOAD", "GEMM", "ALU", "STORE", "STRATEGY",
];

pub fn parse_ir(text: &str) -> Result<IrProgram, IrError> {
    parse_ir_with_lints(text).map(|(p, _)| p)
}

/// Parse and also report non-fatal lints (currently: top-level key order
/// deviating from the grammar's canonical order).
pub fn parse_ir_with_lints(text: &str) -> Result<(IrProgram, Vec<String>), IrError> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        syn(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| syn("$", "top level must be a JSON object"))?;

    let mut lints = Vec::new();
    let observed: Vec<&str> = obj.keys().map(String::as_str).collect();
    for key in &observed {
        if !CANONICAL_ORDER.contains(key) {
            return Err(syn(*key, "unknown top-level key"));
        }
    }
    let canonical: Vec<&str> = CANONICAL_ORDER
        .iter()
        .copied()
        .filter(|k| observed.contains(k))
        .collect();
    if observed != canonical {
        lints.push(format!(
            "top-level keys out of canonical order: found [{}], expected [{}]",
            observed.join(", "),
            canonical.join(", ")
        ));
    }

    let name = parse_name(obj.get("NAME").ok_or_else(|| syn("NAME", "missing"))?)?;
    let matrices = parse_matrices(
        obj.get("MATRICES")
            .ok_or_else(|| syn("MATRICES", "missing"))?,
    )?;
    let load = parse_load(obj.get("LOAD").ok_or_else(|| syn("LOAD", "missing"))?)?;
    let gemm = obj.get("GEMM").map(parse_gemm).transpose()?;
    let alu = obj.get("ALU").map(parse_alu).transpose()?;
    let store = parse_store(obj.get("STORE").ok_or_else(|| syn("STORE", "missing"))?)?;
    let strategy = obj.get("STRATEGY").map(parse_strategy).transpose()?;

    if gemm.is_none() && alu.is_none() {
        return Err(syn("$", "program must declare GEMM, ALU, or both"));
    }

    let program = IrProgram {
        name,
        matrices,
        load,
        gemm,
        alu,
        store,
        strategy,
    };
    check_semantics(&program)?;
    Ok((program, lints))
}

fn parse_name(v: &Value) -> Result<String, IrError> {
    let s = v.as_str().ok_or_else(|| syn("NAME", "must be a string"))?;
    if !is_identifier(s) {
        return Err(syn("NAME", format!("invalid identifier {s:?}")));
    }
    Ok(s.to_string())
}

fn parse_matrices(v: &Value) -> Result<Vec<MatrixDecl>, IrError> {
    let obj = v
        .as_object()
        .ok_or_else(|| syn("MATRICES", "must be an object"))?;
    if obj.is_empty() || obj.len() > 4 {
        return Err(syn("MATRICES", "expected 1-3 matrices plus one output"));
    }
    let mut out = Vec::new();
    for (name, spec) in obj {
        let path = format!("MATRICES.{name}");
        if !is_identifier(name) {
            return Err(syn(&path, "matrix name is not an identifier"));
        }
        let arr = spec
            .as_array()
            .ok_or_else(|| syn(&path, "must be [rows, cols, source]"))?;
        if arr.len() != 3 {
            return Err(syn(&path, "must be [rows, cols, source]"));
        }
        let rows = parse_usize(&arr[0], &format!("{path}[0]"))?;
        let cols = parse_usize(&arr[1], &format!("{path}[1]"))?;
        let src_s = arr[2]
            .as_str()
            .ok_or_else(|| syn(format!("{path}[2]"), "source must be a string"))?;
        let source = match src_s {
            "input" => MatrixSource::Input,
            "output" => MatrixSource::Output,
            p if is_bin_path(p) => MatrixSource::File(p.to_string()),
            other => {
                return Err(syn(
                    format!("{path}[2]"),
                    format!("expected \"input\", \"output\", or a .bin path, got {other:?}"),
                ))
            }
        };
        out.push(MatrixDecl {
            name: name.clone(),
            rows,
            cols,
            source,
        });
    }
    let outputs = out
        .iter()
        .filter(|m| m.source == MatrixSource::Output)
        .count();
    if outputs != 1 {
        return Err(syn("MATRICES", "exactly one matrix must be the output"));
    }
    if out.last().unwrap().source != MatrixSource::Output {
        return Err(syn("MATRICES", "the output matrix must be declared last"));
    }
    Ok(out)
}

fn parse_usize(v: &Value, path: &str) -> Result<usize, IrError> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| syn(path, "must be a non-negative integer"))
}

fn parse_i32(v: &Value, path: &str) -> Result<i32, IrError> {
    v.as_i64()
        .and_then(|n| i32::try_from(n).ok())
        .ok_or_else(|| syn(path, "must be an int32"))
}

fn parse_descriptor(v: &Value, path: &str) -> Result<LoadDescriptor, IrError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| syn(path, "descriptor must be [[start, stride], count]"))?;
    let pair = arr[0]
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| syn(path, "descriptor must start with an int pair"))?;
    let start = parse_usize(&pair[0], path)?;
    let stride = parse_usize(&pair[1], path)?;
    let count = parse_usize(&arr[1], path)?;
    if count == 0 {
        return Err(IrError::Semantic(format!("{path}: count must be positive")));
    }
    Ok(LoadDescriptor {
        start,
        stride,
        count,
    })
}

fn parse_buffer_load(v: &Value, path: &str) -> Result<BufferLoad, IrError> {
    let arr = v.as_array().ok_or_else(|| syn(path, "must be an array"))?;
    if arr.is_empty() {
        return Err(syn(path, "must name a matrix"));
    }
    let matrix = arr[0]
        .as_str()
        .filter(|s| is_identifier(s))
        .ok_or_else(|| syn(path, "first element must be a matrix name"))?
        .to_string();
    let descriptors = arr[1..]
        .iter()
        .enumerate()
        .map(|(i, d)| parse_descriptor(d, &format!("{path}[{}]", i + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BufferLoad {
        matrix,
        descriptors,
    })
}

fn parse_acc_load(v: &Value, path: &str) -> Result<AccLoad, IrError> {
    let arr = v.as_array().ok_or_else(|| syn(path, "must be an array"))?;
    if arr.is_empty() {
        return Err(syn(path, "must name a matrix"));
    }
    let matrix = arr[0]
        .as_str()
        .filter(|s| is_identifier(s))
        .ok_or_else(|| syn(path, "first element must be a matrix name"))?
        .to_string();
    let rest = match &arr[1..] {
        [] => AccLoadRest::Whole,
        [Value::String(second)] if is_identifier(second) => AccLoadRest::Second(second.clone()),
        tail => AccLoadRest::Descriptors(
            tail.iter()
                .enumerate()
                .map(|(i, d)| parse_descriptor(d, &format!("{path}[{}]", i + 1)))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    Ok(AccLoad { matrix, rest })
}

fn parse_load(v: &Value) -> Result<LoadClause, IrError> {
    let obj = v
        .as_object()
        .ok_or_else(|| syn("LOAD", "must be an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "INP" | "WGT" | "ACC") {
            return Err(syn(format!("LOAD.{key}"), "unknown buffer"));
        }
    }
    let inp = obj
        .get("INP")
        .map(|v| parse_buffer_load(v, "LOAD.INP"))
        .transpose()?;
    let wgt = obj
        .get("WGT")
        .map(|v| parse_buffer_load(v, "LOAD.WGT"))
        .transpose()?;
    let acc = obj
        .get("ACC")
        .map(|v| parse_acc_load(v, "LOAD.ACC"))
        .transpose()?;
    // Grammar: INP (optionally WGT, ACC), or ACC alone.
    if inp.is_none() && (wgt.is_some() || acc.is_none()) {
        return Err(syn(
            "LOAD",
            "expected INP with optional WGT/ACC, or ACC alone",
        ));
    }
    Ok(LoadClause { inp, wgt, acc })
}

fn parse_gemm(v: &Value) -> Result<GemmClause, IrError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| syn("GEMM", "must be [dst, src, rhs]"))?;
    let dst = arr[0]
        .as_str()
        .filter(|s| is_identifier(s))
        .ok_or_else(|| syn("GEMM[0]", "must be a matrix name"))?
        .to_string();
    let src = arr[1]
        .as_str()
        .filter(|s| is_identifier(s))
        .ok_or_else(|| syn("GEMM[1]", "must be a matrix name"))?
        .to_string();
    let rhs = match &arr[2] {
        Value::String(s) if is_identifier(s) => GemmRhs::Matrix(s.clone()),
        v @ Value::Number(_) => GemmRhs::Scalar(parse_i32(v, "GEMM[2]")?),
        _ => return Err(syn("GEMM[2]", "must be a matrix name or an integer")),
    };
    Ok(GemmClause { dst, src, rhs })
}

fn parse_alu_op(v: &Value, path: &str) -> Result<AluDecl, IrError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| syn(path, "ALU op must be [name, args]"))?;
    let op_name = arr[0]
        .as_str()
        .ok_or_else(|| syn(path, "op name must be a string"))?;
    let (op, imm) = AluOpKind::from_name(op_name)
        .ok_or_else(|| syn(path, format!("unknown ALU op {op_name:?}")))?;
    let args = arr[1]
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| syn(path, "ALU args must have three elements"))?;
    let dst = args[0]
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| syn(path, "destination must be an int pair"))?;
    let dst_start = parse_usize(&dst[0], path)?;
    let dst_stride = parse_usize(&dst[1], path)?;
    let src = if imm {
        AluSrc::Immediate(parse_i32(&args[1], path)?)
    } else {
        let pair = args[1]
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| syn(path, "vector-vector source must be an int pair"))?;
        AluSrc::Vector {
            start: parse_usize(&pair[0], path)?,
            stride: parse_usize(&pair[1], path)?,
        }
    };
    let iterations = parse_usize(&args[2], path)?;
    if iterations == 0 {
        return Err(IrError::Semantic(format!(
            "{path}: iteration count must be positive"
        )));
    }
    Ok(AluDecl {
        op,
        dst_start,
        dst_stride,
        src,
        iterations,
    })
}

fn parse_alu(v: &Value) -> Result<AluSection, IrError> {
    let obj = v
        .as_object()
        .ok_or_else(|| syn("ALU", "must be an object"))?;
    if obj.len() != 1 {
        return Err(syn("ALU", "must declare exactly one target matrix"));
    }
    let (target, ops_v) = obj.iter().next().unwrap();
    if !is_identifier(target) {
        return Err(syn("ALU", "target must be a matrix name"));
    }
    let path = format!("ALU.{target}");
    let arr = ops_v
        .as_array()
        .ok_or_else(|| syn(&path, "must be an array of operations"))?;
    if arr.is_empty() {
        return Err(syn(&path, "operation list is empty"));
    }
    // ADD_ACC is a standalone form; otherwise this is an op list.
    let first_name = arr[0]
        .as_array()
        .and_then(|a| a.first())
        .and_then(Value::as_str);
    let clause = if first_name == Some("ADD_ACC") {
        if arr.len() != 1 {
            return Err(syn(&path, "ADD_ACC cannot be mixed with other ALU ops"));
        }
        let add = arr[0].as_array().unwrap();
        let args = add
            .get(1)
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| syn(&path, "ADD_ACC expects [lhs, rhs]"))?;
        let lhs = args[0]
            .as_str()
            .filter(|s| is_identifier(s))
            .ok_or_else(|| syn(&path, "ADD_ACC lhs must be a matrix name"))?;
        let rhs = args[1]
            .as_str()
            .filter(|s| is_identifier(s))
            .ok_or_else(|| syn(&path, "ADD_ACC rhs must be a matrix name"))?;
        AluClause::AddAcc {
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    } else {
        AluClause::Ops(
            arr.iter()
                .enumerate()
                .map(|(i, op)| parse_alu_op(op, &format!("{path}[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
        )
    };
    Ok(AluSection {
        target: target.clone(),
        clause,
    })
}

fn parse_store(v: &Value) -> Result<StoreClause, IrError> {
    let obj = v
        .as_object()
        .ok_or_else(|| syn("STORE", "must be an object"))?;
    if obj.len() != 1 {
        return Err(syn("STORE", "must declare exactly one matrix"));
    }
    let (matrix, spec_v) = obj.iter().next().unwrap();
    if !is_identifier(matrix) {
        return Err(syn("STORE", "target must be a matrix name"));
    }
    let path = format!("STORE.{matrix}");
    let arr = spec_v
        .as_array()
        .ok_or_else(|| syn(&path, "must be an array"))?;
    let spec = match arr.as_slice() {
        [Value::String(s)] => {
            if s != matrix {
                return Err(IrError::Semantic(format!(
                    "{path}: whole-matrix store must repeat the matrix name"
                )));
            }
            StoreSpec::Whole
        }
        [] => return Err(syn(&path, "store spec is empty")),
        descs => StoreSpec::Rows(
            descs
                .iter()
                .enumerate()
                .map(|(i, d)| parse_descriptor(d, &format!("{path}[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    Ok(StoreClause {
        matrix: matrix.clone(),
        spec,
    })
}

fn parse_strategy(v: &Value) -> Result<u8, IrError> {
    let n = v
        .as_i64()
        .ok_or_else(|| syn("STRATEGY", "must be an integer"))?;
    if !(1..=4).contains(&n) {
        return Err(IrError::Semantic(format!(
            "STRATEGY must be in 1..4, got {n}"
        )));
    }
    Ok(n as u8)
}

// ---------------------------------------------------------------------------
// Semantic checks (names, clause consistency)
// ---------------------------------------------------------------------------

fn check_semantics(p: &IrProgram) -> Result<(), IrError> {
    let mut seen = BTreeSet::new();
    for m in &p.matrices {
        if !seen.insert(m.name.as_str()) {
            return Err(IrError::Semantic(format!(
                "matrix {:?} declared more than once",
                m.name
            )));
        }
    }
    let output = p
        .matrices
        .iter()
        .find(|m| m.source == MatrixSource::Output)
        .unwrap();

    let lookup = |name: &str, ctx: &str| -> Result<&MatrixDecl, IrError> {
        p.matrix(name)
            .ok_or_else(|| IrError::Semantic(format!("{ctx} references unknown matrix {name:?}")))
    };
    let non_output = |name: &str, ctx: &str| -> Result<(), IrError> {
        if name == output.name {
            return Err(IrError::Semantic(format!(
                "{ctx} cannot reference the output matrix {name:?}"
            )));
        }
        Ok(())
    };

    if let Some(load) = &p.load.inp {
        lookup(&load.matrix, "LOAD.INP")?;
        non_output(&load.matrix, "LOAD.INP")?;
    }
    if let Some(load) = &p.load.wgt {
        lookup(&load.matrix, "LOAD.WGT")?;
        non_output(&load.matrix, "LOAD.WGT")?;
    }
    if let Some(load) = &p.load.acc {
        lookup(&load.matrix, "LOAD.ACC")?;
        non_output(&load.matrix, "LOAD.ACC")?;
        if let AccLoadRest::Second(second) = &load.rest {
            lookup(second, "LOAD.ACC")?;
            non_output(second, "LOAD.ACC")?;
        }
    }

    match &p.gemm {
        Some(gemm) => {
            if gemm.dst != output.name {
                return Err(IrError::Semantic(format!(
                    "GEMM destination {:?} must be the output matrix {:?}",
                    gemm.dst, output.name
                )));
            }
            lookup(&gemm.src, "GEMM")?;
            non_output(&gemm.src, "GEMM src")?;
            let inp = p.load.inp.as_ref().ok_or_else(|| {
                IrError::Semantic("GEMM program must load its src matrix into INP".into())
            })?;
            if inp.matrix != gemm.src {
                return Err(IrError::Semantic(format!(
                    "LOAD.INP loads {:?} but GEMM src is {:?}",
                    inp.matrix, gemm.src
                )));
            }
            match &gemm.rhs {
                GemmRhs::Matrix(rhs) => {
                    lookup(rhs, "GEMM")?;
                    non_output(rhs, "GEMM rhs")?;
                    let wgt = p.load.wgt.as_ref().ok_or_else(|| {
                        IrError::Semantic("GEMM program must load its rhs matrix into WGT".into())
                    })?;
                    if &wgt.matrix != rhs {
                        return Err(IrError::Semantic(format!(
                            "LOAD.WGT loads {:?} but GEMM rhs is {:?}",
                            wgt.matrix, rhs
                        )));
                    }
                }
                GemmRhs::Scalar(_) => {
                    if p.load.wgt.is_some() {
                        return Err(IrError::Semantic(
                            "scalar GEMM takes no WGT load (the diagonal block is synthesized)"
                                .into(),
                        ));
                    }
                }
            }
            // The planner owns per-partition load sets; partial preloads
            // would leave GEMM reading unwritten slots.
            let whole = p.load.inp.as_ref().is_none_or(|l| l.descriptors.is_empty())
                && p.load.wgt.as_ref().is_none_or(|l| l.descriptors.is_empty())
                && p.load
                    .acc
                    .as_ref()
                    .is_none_or(|l| !matches!(l.rest, AccLoadRest::Descriptors(_)));
            if !whole {
                return Err(IrError::Semantic(
                    "GEMM programs must load whole matrices (no descriptor lists)".into(),
                ));
            }
            if let Some(acc) = &p.load.acc {
                if matches!(acc.rest, AccLoadRest::Second(_)) {
                    return Err(IrError::Semantic(
                        "GEMM programs load at most one matrix into ACC".into(),
                    ));
                }
            }
        }
        None => {
            if p.load.inp.is_some() || p.load.wgt.is_some() {
                return Err(IrError::Semantic(
                    "INP/WGT loads are only meaningful for GEMM programs".into(),
                ));
            }
            if p.load.acc.is_none() {
                return Err(IrError::Semantic(
                    "ALU-only program must initialise ACC with a LOAD".into(),
                ));
            }
        }
    }

    if let Some(alu) = &p.alu {
        if alu.target != output.name {
            return Err(IrError::Semantic(format!(
                "ALU target {:?} must be the output matrix {:?}",
                alu.target, output.name
            )));
        }
        if let AluClause::AddAcc { lhs, rhs } = &alu.clause {
            if p.gemm.is_some() {
                return Err(IrError::Semantic(
                    "ADD_ACC cannot be combined with GEMM in one program".into(),
                ));
            }
            lookup(lhs, "ADD_ACC")?;
            lookup(rhs, "ADD_ACC")?;
            non_output(lhs, "ADD_ACC")?;
            non_output(rhs, "ADD_ACC")?;
            let acc = p.load.acc.as_ref().unwrap();
            let ok = acc.matrix == *lhs && matches!(&acc.rest, AccLoadRest::Second(s) if s == rhs);
            if !ok {
                return Err(IrError::Semantic(
                    "ADD_ACC operands must match the two matrices loaded into ACC".into(),
                ));
            }
        }
    }

    if p.store.matrix != output.name {
        return Err(IrError::Semantic(format!(
            "STORE matrix {:?} must be the output matrix {:?}",
            p.store.matrix, output.name
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn descriptor_value(d: &LoadDescriptor) -> Value {
    serde_json::json!([[d.start, d.stride], d.count])
}

/// Emit the canonical JSON form; `parse_ir(render_ir(p))` is structurally `p`.
pub fn render_ir(p: &IrProgram) -> String {
    let mut root = serde_json::Map::new();
    root.insert("NAME".into(), Value::String(p.name.clone()));

    let mut mats = serde_json::Map::new();
    for m in &p.matrices {
        let src = match &m.source {
            MatrixSource::Input => "input".to_string(),
            MatrixSource::Output => "output".to_string(),
            MatrixSource::File(path) => path.clone(),
        };
        mats.insert(m.name.clone(), serde_json::json!([m.rows, m.cols, src]));
    }
    root.insert("MATRICES".into(), Value::Object(mats));

    let mut load = serde_json::Map::new();
    if let Some(b) = &p.load.inp {
        load.insert("INP".into(), buffer_load_value(b));
    }
    if let Some(b) = &p.load.wgt {
        load.insert("WGT".into(), buffer_load_value(b));
    }
    if let Some(acc) = &p.load.acc {
        let mut arr = vec![Value::String(acc.matrix.clone())];
        match &acc.rest {
            AccLoadRest::Whole => {}
            AccLoadRest::Descriptors(ds) => arr.extend(ds.iter().map(descriptor_value)),
            AccLoadRest::Second(s) => arr.push(Value::String(s.clone())),
        }
        load.insert("ACC".into(), Value::Array(arr));
    }
    root.insert("LOAD".into(), Value::Object(load));

    if let Some(g) = &p.gemm {
        let rhs = match &g.rhs {
            GemmRhs::Matrix(m) => Value::String(m.clone()),
            GemmRhs::Scalar(b) => Value::from(*b),
        };
        root.insert(
            "GEMM".into(),
            Value::Array(vec![
                Value::String(g.dst.clone()),
                Value::String(g.src.clone()),
                rhs,
            ]),
        );
    }

    if let Some(alu) = &p.alu {
        let ops = match &alu.clause {
            AluClause::AddAcc { lhs, rhs } => {
                vec![serde_json::json!(["ADD_ACC", [lhs, rhs]])]
            }
            AluClause::Ops(decls) => decls
                .iter()
                .map(|d| {
                    let name = if d.is_immediate() {
                        format!("{}_IMM", d.op.name())
                    } else {
                        d.op.name().to_string()
                    };
                    let src = match d.src {
                        AluSrc::Vector { start, stride } => serde_json::json!([start, stride]),
                        AluSrc::Immediate(c) => Value::from(c),
                    };
                    serde_json::json!([name, [[d.dst_start, d.dst_stride], src, d.iterations]])
                })
                .collect(),
        };
        let mut section = serde_json::Map::new();
        section.insert(alu.target.clone(), Value::Array(ops));
        root.insert("ALU".into(), Value::Object(section));
    }

    let store_spec = match &p.store.spec {
        StoreSpec::Whole => vec![Value::String(p.store.matrix.clone())],
        StoreSpec::Rows(ds) => ds.iter().map(descriptor_value).collect(),
    };
    let mut store = serde_json::Map::new();
    store.insert(p.store.matrix.clone(), Value::Array(store_spec));
    root.insert("STORE".into(), Value::Object(store));

    if let Some(s) = p.strategy {
        root.insert("STRATEGY".into(), Value::from(s));
    }
    serde_json::to_string_pretty(&Value::Object(root)).expect("JSON rendering cannot fail")
}

fn buffer_load_value(b: &BufferLoad) -> Value {
    let mut arr = vec![Value::String(b.matrix.clone())];
    arr.extend(b.descriptors.iter().map(descriptor_value));
    Value::Array(arr)
}

// ---------------------------------------------------------------------------
// Shape validation and padding
// ---------------------------------------------------------------------------

/// Block shape of a GEMM: A is `alpha x lambda`, B `lambda x beta`,
/// C `alpha x beta`, all in blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub alpha: usize,
    pub lambda: usize,
    pub beta: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedMatrix {
    pub decl: MatrixDecl,
    pub padded_rows: usize,
    pub padded_cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

/// Image position -> source row, for ALU-only programs where the ACC image is
/// assembled from one or two loaded row sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccPos {
    pub matrix: usize,
    pub row: usize,
}

/// A validated program with padded dimensions and derived ACC-image facts.
#[derive(Clone, Debug)]
pub struct PaddedProgram {
    pub ir: IrProgram,
    pub config: VtaConfig,
    pub matrices: Vec<PaddedMatrix>,
    pub output_index: usize,
    pub gemm_shape: Option<BlockShape>,
    pub scalar_gemm: Option<i32>,
    /// ACC image width in blocks (= output padded_cols / bs).
    pub acc_width: usize,
    /// Image positions that belong to the destination sequence.
    pub acc_dst_rows: usize,
    /// Total image rows, including a second loaded matrix if any.
    pub acc_total_rows: usize,
    /// ALU-only: mapping image position -> (matrix index, source row).
    /// Empty for GEMM programs (the image is the output matrix itself).
    pub acc_positions: Vec<AccPos>,
    /// Desugared ALU list (ADD_ACC expands to a vector-vector ADD).
    pub alu_decls: Vec<AluDecl>,
    /// Output rows designated by the STORE clause, in clause order.
    pub store_rows: Vec<usize>,
}

impl PaddedProgram {
    pub fn matrix_index(&self, name: &str) -> usize {
        self.matrices
            .iter()
            .position(|m| m.decl.name == name)
            .expect("validated name")
    }

    pub fn matrix(&self, name: &str) -> &PaddedMatrix {
        &self.matrices[self.matrix_index(name)]
    }

    pub fn output(&self) -> &PaddedMatrix {
        &self.matrices[self.output_index]
    }

    /// Strategy from the IR, defaulting to 1 as the compiler does.
    pub fn strategy(&self) -> u8 {
        self.ir.strategy.unwrap_or(1)
    }
}

pub fn validate_shapes(program: &IrProgram, config: &VtaConfig) -> Result<PaddedProgram, IrError> {
    config.validate()?;
    let bs = config.bs;

    let mut matrices = Vec::with_capacity(program.matrices.len());
    for decl in &program.matrices {
        if decl.rows == 0 || decl.cols == 0 {
            return Err(IrError::EmptyMatrix(decl.name.clone()));
        }
        let padded_rows = round_up(decl.rows, bs);
        let padded_cols = round_up(decl.cols, bs);
        matrices.push(PaddedMatrix {
            decl: decl.clone(),
            padded_rows,
            padded_cols,
            block_rows: padded_rows / bs,
            block_cols: padded_cols / bs,
        });
    }
    let output_index = matrices
        .iter()
        .position(|m| m.decl.source == MatrixSource::Output)
        .unwrap();
    let out = matrices[output_index].clone();
    let by_name =
        |name: &str| -> &PaddedMatrix { matrices.iter().find(|m| m.decl.name == name).unwrap() };

    let mut gemm_shape = None;
    let mut scalar_gemm = None;
    if let Some(gemm) = &program.gemm {
        let a = by_name(&gemm.src);
        match &gemm.rhs {
            GemmRhs::Matrix(rhs) => {
                let b = by_name(rhs);
                if a.decl.cols != b.decl.rows {
                    return Err(IrError::Shape(format!(
                        "GEMM inner dimensions disagree: {} is {}x{}, {} is {}x{}",
                        a.decl.name,
                        a.decl.rows,
                        a.decl.cols,
                        b.decl.name,
                        b.decl.rows,
                        b.decl.cols
                    )));
                }
                if out.decl.rows != a.decl.rows || out.decl.cols != b.decl.cols {
                    return Err(IrError::Shape(format!(
                        "GEMM output {} must be {}x{}, declared {}x{}",
                        out.decl.name, a.decl.rows, b.decl.cols, out.decl.rows, out.decl.cols
                    )));
                }
                gemm_shape = Some(BlockShape {
                    alpha: a.block_rows,
                    lambda: a.block_cols,
                    beta: b.block_cols,
                });
            }
            GemmRhs::Scalar(b) => {
                // C := X + A*b pairs block column k with itself, so the
                // output shares A's shape.
                if out.decl.rows != a.decl.rows || out.decl.cols != a.decl.cols {
                    return Err(IrError::Shape(format!(
                        "scalar GEMM output {} must share {}'s shape {}x{}",
                        out.decl.name, a.decl.name, a.decl.rows, a.decl.cols
                    )));
                }
                gemm_shape = Some(BlockShape {
                    alpha: a.block_rows,
                    lambda: a.block_cols,
                    beta: a.block_cols,
                });
                scalar_gemm = Some(*b);
            }
        }
        if let Some(acc) = &program.load.acc {
            let x = by_name(&acc.matrix);
            if x.decl.rows != out.decl.rows || x.decl.cols != out.decl.cols {
                return Err(IrError::Shape(format!(
                    "ACC bias {} must share the output shape {}x{}, declared {}x{}",
                    x.decl.name, out.decl.rows, out.decl.cols, x.decl.rows, x.decl.cols
                )));
            }
        }
    }

    // Assemble the ACC image: for GEMM programs it is the padded output; for
    // ALU-only programs it is the loaded row sequence(s).
    let acc_width = out.padded_cols / bs;
    let mut acc_positions = Vec::new();
    let (acc_dst_rows, acc_total_rows);
    if program.gemm.is_some() {
        acc_dst_rows = out.padded_rows;
        acc_total_rows = out.padded_rows;
    } else {
        let acc = program.load.acc.as_ref().unwrap();
        let first = by_name(&acc.matrix);
        let first_index = matrices
            .iter()
            .position(|m| m.decl.name == acc.matrix)
            .unwrap();
        if first.decl.cols != out.decl.cols {
            return Err(IrError::Shape(format!(
                "ACC-loaded {} has {} columns but the output has {}",
                first.decl.name, first.decl.cols, out.decl.cols
            )));
        }
        match &acc.rest {
            AccLoadRest::Whole => {
                if first.decl.rows != out.decl.rows {
                    return Err(IrError::Shape(format!(
                        "whole-matrix ACC load of {} ({} rows) must match the output ({} rows)",
                        first.decl.name, first.decl.rows, out.decl.rows
                    )));
                }
                for row in 0..first.padded_rows {
                    acc_positions.push(AccPos {
                        matrix: first_index,
                        row,
                    });
                }
            }
            AccLoadRest::Descriptors(descs) => {
                for d in descs {
                    for row in d.indices() {
                        if row >= first.decl.rows {
                            return Err(IrError::Shape(format!(
                                "LOAD.ACC descriptor row {} outside {} ({} rows)",
                                row, first.decl.name, first.decl.rows
                            )));
                        }
                        acc_positions.push(AccPos {
                            matrix: first_index,
                            row,
                        });
                    }
                }
            }
            AccLoadRest::Second(second_name) => {
                let second = by_name(second_name);
                let second_index = matrices
                    .iter()
                    .position(|m| m.decl.name == *second_name)
                    .unwrap();
                if first.decl.rows != out.decl.rows {
                    return Err(IrError::Shape(format!(
                        "ACC destination {} ({} rows) must match the output ({} rows)",
                        first.decl.name, first.decl.rows, out.decl.rows
                    )));
                }
                if second.decl.cols != out.decl.cols {
                    return Err(IrError::Shape(format!(
                        "second ACC matrix {} has {} columns but the output has {}",
                        second.decl.name, second.decl.cols, out.decl.cols
                    )));
                }
                for row in 0..first.padded_rows {
                    acc_positions.push(AccPos {
                        matrix: first_index,
                        row,
                    });
                }
                for row in 0..second.padded_rows {
                    acc_positions.push(AccPos {
                        matrix: second_index,
                        row,
                    });
                }
            }
        }
        acc_dst_rows = match &acc.rest {
            AccLoadRest::Descriptors(_) => acc_positions.len(),
            _ => first.padded_rows,
        };
        acc_total_rows = acc_positions.len();
        if acc_dst_rows > out.padded_rows {
            return Err(IrError::Shape(format!(
                "ACC load supplies {} destination rows; output holds {}",
                acc_dst_rows, out.padded_rows
            )));
        }
    }

    // Desugar and bound-check the ALU list. Indices address vectors of the
    // padded ACC image (vector = row*acc_width + segment).
    let mut alu_decls = Vec::new();
    if let Some(alu) = &program.alu {
        match &alu.clause {
            AluClause::Ops(decls) => alu_decls.extend(decls.iter().copied()),
            AluClause::AddAcc { lhs, rhs } => {
                let x = by_name(lhs);
                let y = by_name(rhs);
                if x.decl.rows != y.decl.rows || x.decl.cols != y.decl.cols {
                    return Err(IrError::Shape(format!(
                        "ADD_ACC operands {} and {} must share a shape",
                        lhs, rhs
                    )));
                }
                // X(i) += Y(i) over every padded row; rows are acc_width
                // consecutive vectors, so one stride-1 sweep covers all.
                let vectors = x.padded_rows * acc_width;
                alu_decls.push(AluDecl {
                    op: AluOpKind::Add,
                    dst_start: 0,
                    dst_stride: 1,
                    src: AluSrc::Vector {
                        start: vectors,
                        stride: 1,
                    },
                    iterations: vectors,
                });
            }
        }
        let dst_bound = acc_dst_rows * acc_width;
        let src_bound = acc_total_rows * acc_width;
        for (i, d) in alu_decls.iter().enumerate() {
            for j in 0..d.iterations {
                let dst = d.dst_start + j * d.dst_stride;
                if dst >= dst_bound {
                    return Err(IrError::Shape(format!(
                        "ALU op {i} writes vector {dst}, outside the {dst_bound} destination vectors"
                    )));
                }
                if let AluSrc::Vector { start, stride } = d.src {
                    let src = start + j * stride;
                    if src >= src_bound {
                        return Err(IrError::Shape(format!(
                            "ALU op {i} reads vector {src}, outside the {src_bound} image vectors"
                        )));
                    }
                }
            }
        }
    }

    // Designated output rows.
    let store_bound = if program.gemm.is_some() {
        out.decl.rows
    } else {
        acc_dst_rows.min(out.decl.rows)
    };
    let mut store_rows = Vec::new();
    match &program.store.spec {
        StoreSpec::Whole => store_rows.extend(0..store_bound),
        StoreSpec::Rows(descs) => {
            let mut seen = BTreeSet::new();
            for d in descs {
                for row in d.indices() {
                    if row >= store_bound {
                        return Err(IrError::Shape(format!(
                            "STORE row {row} outside the {store_bound} stored rows"
                        )));
                    }
                    if !seen.insert(row) {
                        return Err(IrError::Semantic(format!(
                            "STORE designates row {row} more than once"
                        )));
                    }
                    store_rows.push(row);
                }
            }
        }
    }
    if store_rows.is_empty() {
        return Err(IrError::Semantic("STORE designates no rows".into()));
    }

    Ok(PaddedProgram {
        ir: program.clone(),
        config: *config,
        matrices,
        output_index,
        gemm_shape,
        scalar_gemm,
        acc_width,
        acc_dst_rows,
        acc_total_rows,
        acc_positions,
        alu_decls,
        store_rows,
    })
}
