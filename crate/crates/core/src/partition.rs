//! SRAM capacity partitioning: overflow detection, the four GEMM offload
//! strategies, the ALU strategy, and plan validation.
//!
//! A plan splits the atomic-operation set into an ordered list of partitions.
//! Partitions carrying the same `acc_group` keep the same output blocks
//! resident in ACC across k-dimension chunks: the accumulator is initialised
//! before the first partition of the group and written back after the last,
//! so every output element is stored exactly once.
//!
//! Capacity is counted in distinct blocks per buffer (ACC in blocks times
//! bs vectors); a block referenced by several triples of one partition is
//! loaded once.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::blocking::{expand_bgemm, expand_bgemm_scalar, AluPair, AluPairSrc, GemmTriple};
use crate::ir::{AluDecl, AluOpKind, AluSrc, BlockShape, PaddedProgram, VtaConfig};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("unknown strategy {0}; expected 1..4")]
    UnknownStrategy(u8),
    #[error("strategy infeasible: {0}")]
    StrategyInfeasible(String),
    #[error("ALU working set does not fit: {0}")]
    Capacity(String),
}

/// Maximal runs of same-(op, mode) atomic ALU operations; one run lowers to
/// one ALU instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AluOpRun {
    pub op: AluOpKind,
    pub immediate: bool,
    pub pairs: Vec<AluPair>,
}

/// One offload's worth of GEMM work.
#[derive(Clone, Debug, Default)]
pub struct Partition {
    pub triples: Vec<GemmTriple>,
    pub alu_runs: Vec<AluOpRun>,
    pub acc_group: usize,
}

impl Partition {
    pub fn distinct_inp(&self) -> BTreeSet<usize> {
        self.triples.iter().map(|t| t.p).collect()
    }

    pub fn distinct_wgt(&self) -> BTreeSet<usize> {
        self.triples.iter().map(|t| t.m).collect()
    }

    pub fn distinct_acc_blocks(&self) -> BTreeSet<usize> {
        self.triples.iter().map(|t| t.l).collect()
    }

    pub fn alu_pairs(&self) -> impl Iterator<Item = &AluPair> {
        self.alu_runs.iter().flat_map(|r| r.pairs.iter())
    }
}

#[derive(Clone, Debug)]
pub struct OffloadPlan {
    pub strategy: u8,
    pub shape: BlockShape,
    /// Scalar GEMM covers only the diagonal k == j triples with WGT index 0.
    pub scalar: bool,
    pub partitions: Vec<Partition>,
}

impl OffloadPlan {
    pub fn expected_triples(&self) -> Vec<GemmTriple> {
        if self.scalar {
            expand_bgemm_scalar(self.shape.alpha, self.shape.lambda)
        } else {
            expand_bgemm(self.shape.alpha, self.shape.lambda, self.shape.beta)
        }
    }

    pub fn groups(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| p.acc_group + 1)
            .max()
            .unwrap_or(0)
    }
}

/// One batch of the ALU strategy: the resident image vectors (sorted), the
/// op runs to apply, and the vectors written back to the output region.
#[derive(Clone, Debug)]
pub struct AluPartition {
    pub vectors: Vec<usize>,
    pub runs: Vec<AluOpRun>,
    pub store_vectors: Vec<usize>,
}

impl AluPartition {
    pub fn distinct_vectors(&self) -> usize {
        self.vectors.len()
    }
}

#[derive(Clone, Debug)]
pub struct AluPlan {
    /// Row-wise processing (all ops immediate) vs column-by-column batching.
    pub column_mode: bool,
    pub partitions: Vec<AluPartition>,
}

/// The whole program's offload structure.
#[derive(Clone, Debug)]
pub enum ProgramPlan {
    /// Everything fits in SRAM: one offload carrying all atomic operations.
    Single(Partition),
    /// bGEMM partitions execute first, then the ALU partitions.
    Phased {
        gemm: Option<OffloadPlan>,
        alu: Option<AluPlan>,
    },
}

impl ProgramPlan {
    pub fn partition_count(&self) -> usize {
        match self {
            ProgramPlan::Single(_) => 1,
            ProgramPlan::Phased { gemm, alu } => {
                gemm.as_ref().map_or(0, |g| g.partitions.len())
                    + alu.as_ref().map_or(0, |a| a.partitions.len())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Overflow detection
// ---------------------------------------------------------------------------

pub fn needs_partitioning(shape: &BlockShape, config: &VtaConfig) -> bool {
    shape.alpha * shape.lambda > config.inp_size
        || shape.lambda * shape.beta > config.wgt_size
        || shape.alpha * shape.beta * config.bs > config.acc_size
}

// ---------------------------------------------------------------------------
// GEMM strategies
// ---------------------------------------------------------------------------

fn chunks(total: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    let chunk = chunk.max(1);
    (0..total.div_ceil(chunk)).map(move |n| (n * chunk, ((n + 1) * chunk).min(total)))
}

pub fn plan_gemm(
    shape: &BlockShape,
    strategy: u8,
    config: &VtaConfig,
) -> Result<OffloadPlan, PlanError> {
    config
        .validate()
        .map_err(|e| PlanError::StrategyInfeasible(e.to_string()))?;
    let partitions = match strategy {
        1 => plan_strategy1(shape, config),
        2 => plan_strategy2(shape, config),
        3 => plan_strategy3(shape, config),
        4 => plan_strategy4(shape, config),
        other => return Err(PlanError::UnknownStrategy(other)),
    };
    Ok(OffloadPlan {
        strategy,
        shape: *shape,
        scalar: false,
        partitions,
    })
}

fn rect_triples(
    shape: &BlockShape,
    rows: (usize, usize),
    cols: (usize, usize),
    ks: (usize, usize),
) -> Vec<GemmTriple> {
    let mut triples = Vec::new();
    for i in rows.0..rows.1 {
        for j in cols.0..cols.1 {
            for k in ks.0..ks.1 {
                triples.push(GemmTriple {
                    l: i * shape.beta + j,
                    p: i * shape.lambda + k,
                    m: k * shape.beta + j,
                });
            }
        }
    }
    triples
}

/// Strategy 1: one output block per group; a row of A times a column of B,
/// chunked along k when the row/column overflows INP or WGT.
fn plan_strategy1(shape: &BlockShape, cfg: &VtaConfig) -> Vec<Partition> {
    let chunk = shape.lambda.min(cfg.inp_size).min(cfg.wgt_size);
    let mut partitions = Vec::new();
    let mut group = 0;
    for i in 0..shape.alpha {
        for j in 0..shape.beta {
            for (k0, k1) in chunks(shape.lambda, chunk) {
                partitions.push(Partition {
                    triples: rect_triples(shape, (i, i + 1), (j, j + 1), (k0, k1)),
                    alu_runs: Vec::new(),
                    acc_group: group,
                });
            }
            group += 1;
        }
    }
    partitions
}

/// Strategy 2: square output tiles with edge `t`, the largest t whose t*t
/// blocks fit every buffer; operand tiles iterate over k.
fn plan_strategy2(shape: &BlockShape, cfg: &VtaConfig) -> Vec<Partition> {
    let cap = cfg.inp_size.min(cfg.wgt_size).min(cfg.acc_blocks());
    let t = cap.isqrt().max(1);
    let mut partitions = Vec::new();
    let mut group = 0;
    for (i0, i1) in chunks(shape.alpha, t) {
        for (j0, j1) in chunks(shape.beta, t) {
            let th = i1 - i0;
            let tw = j1 - j0;
            let kchunk = shape
                .lambda
                .min(cfg.inp_size / th)
                .min(cfg.wgt_size / tw)
                .max(1);
            for (k0, k1) in chunks(shape.lambda, kchunk) {
                partitions.push(Partition {
                    triples: rect_triples(shape, (i0, i1), (j0, j1), (k0, k1)),
                    alu_runs: Vec::new(),
                    acc_group: group,
                });
            }
            group += 1;
        }
    }
    partitions
}

/// Strategy 3: a column slice of A times the matching B blocks, producing a
/// column of C; column-major over C, chunked along k.
fn plan_strategy3(shape: &BlockShape, cfg: &VtaConfig) -> Vec<Partition> {
    let run = shape.alpha.min(cfg.acc_blocks()).min(cfg.inp_size).max(1);
    let mut partitions = Vec::new();
    let mut group = 0;
    for j in 0..shape.beta {
        for (i0, i1) in chunks(shape.alpha, run) {
            let ih = i1 - i0;
            let kchunk = shape.lambda.min(cfg.inp_size / ih).min(cfg.wgt_size).max(1);
            for (k0, k1) in chunks(shape.lambda, kchunk) {
                partitions.push(Partition {
                    triples: rect_triples(shape, (i0, i1), (j, j + 1), (k0, k1)),
                    alu_runs: Vec::new(),
                    acc_group: group,
                });
            }
            group += 1;
        }
    }
    partitions
}

/// Strategy 4: a block of A times a row slice of B, producing a row of C;
/// the exact transpose mirror of Strategy 3.
fn plan_strategy4(shape: &BlockShape, cfg: &VtaConfig) -> Vec<Partition> {
    let run = shape.beta.min(cfg.acc_blocks()).min(cfg.wgt_size).max(1);
    let mut partitions = Vec::new();
    let mut group = 0;
    for i in 0..shape.alpha {
        for (j0, j1) in chunks(shape.beta, run) {
            let jw = j1 - j0;
            let kchunk = shape.lambda.min(cfg.wgt_size / jw).min(cfg.inp_size).max(1);
            for (k0, k1) in chunks(shape.lambda, kchunk) {
                partitions.push(Partition {
                    triples: rect_triples(shape, (i, i + 1), (j0, j1), (k0, k1)),
                    alu_runs: Vec::new(),
                    acc_group: group,
                });
            }
            group += 1;
        }
    }
    partitions
}

/// Restrict a full-cube plan to the diagonal k == j triples of a scalar GEMM
/// and point every WGT reference at the single synthesized block.
fn restrict_to_scalar(mut plan: OffloadPlan) -> OffloadPlan {
    let shape = plan.shape;
    for part in &mut plan.partitions {
        part.triples
            .retain(|t| t.l % shape.beta == t.p % shape.lambda);
        for t in &mut part.triples {
            t.m = 0;
        }
    }
    plan.partitions.retain(|p| !p.triples.is_empty());
    // Each diagonal triple appears exactly once, so nothing accumulates
    // across k-chunks: every partition gets its own ACC lifetime.
    for (i, part) in plan.partitions.iter_mut().enumerate() {
        part.acc_group = i;
    }
    plan.scalar = true;
    plan
}

// ---------------------------------------------------------------------------
// Plan validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingTriple(GemmTriple),
    ForeignTriple {
        partition: usize,
        triple: GemmTriple,
    },
    DuplicateTriple {
        partition: usize,
        triple: GemmTriple,
    },
    InpCapacity {
        partition: usize,
        used: usize,
        cap: usize,
    },
    WgtCapacity {
        partition: usize,
        used: usize,
        cap: usize,
    },
    AccCapacity {
        partition: usize,
        used_vectors: usize,
        cap: usize,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingTriple(t) => write!(f, "cover: triple {t:?} never scheduled"),
            Violation::ForeignTriple { partition, triple } => {
                write!(
                    f,
                    "partition {partition}: triple {triple:?} outside the operation set"
                )
            }
            Violation::DuplicateTriple { partition, triple } => {
                write!(
                    f,
                    "partition {partition}: triple {triple:?} already scheduled"
                )
            }
            Violation::InpCapacity {
                partition,
                used,
                cap,
            } => {
                write!(
                    f,
                    "partition {partition}: {used} INP blocks exceed capacity {cap}"
                )
            }
            Violation::WgtCapacity {
                partition,
                used,
                cap,
            } => {
                write!(
                    f,
                    "partition {partition}: {used} WGT blocks exceed capacity {cap}"
                )
            }
            Violation::AccCapacity {
                partition,
                used_vectors,
                cap,
            } => {
                write!(
                    f,
                    "partition {partition}: {used_vectors} ACC vectors exceed capacity {cap}"
                )
            }
        }
    }
}

/// Check cover, disjointness, and per-buffer distinct-block capacity for
/// every partition; the first violation found is returned.
pub fn validate_plan(plan: &OffloadPlan, config: &VtaConfig) -> Result<(), Violation> {
    let expected: BTreeSet<GemmTriple> = plan.expected_triples().into_iter().collect();
    let mut seen: BTreeSet<GemmTriple> = BTreeSet::new();
    for (idx, part) in plan.partitions.iter().enumerate() {
        for t in &part.triples {
            if !expected.contains(t) {
                return Err(Violation::ForeignTriple {
                    partition: idx,
                    triple: *t,
                });
            }
            if !seen.insert(*t) {
                return Err(Violation::DuplicateTriple {
                    partition: idx,
                    triple: *t,
                });
            }
        }
        let inp = part.distinct_inp().len();
        if inp > config.inp_size {
            return Err(Violation::InpCapacity {
                partition: idx,
                used: inp,
                cap: config.inp_size,
            });
        }
        let wgt = part.distinct_wgt().len();
        if wgt > config.wgt_size {
            return Err(Violation::WgtCapacity {
                partition: idx,
                used: wgt,
                cap: config.wgt_size,
            });
        }
        let acc = part.distinct_acc_blocks().len() * config.bs;
        if acc > config.acc_size {
            return Err(Violation::AccCapacity {
                partition: idx,
                used_vectors: acc,
                cap: config.acc_size,
            });
        }
    }
    if let Some(missing) = expected.difference(&seen).next() {
        return Err(Violation::MissingTriple(*missing));
    }
    Ok(())
}

pub fn validate_alu_plan(plan: &AluPlan, config: &VtaConfig) -> Result<(), String> {
    for (idx, part) in plan.partitions.iter().enumerate() {
        let used = part.distinct_vectors();
        if used > config.acc_size {
            return Err(format!(
                "ALU partition {idx}: {used} vectors exceed ACC capacity {}",
                config.acc_size
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ALU strategy
// ---------------------------------------------------------------------------

/// Inputs of the ALU planner, phrased over vectors of the tall ACC image.
#[derive(Clone, Debug)]
pub struct AluProblem<'a> {
    pub decls: &'a [AluDecl],
    /// Image width in segments (one matrix row spans `width` vectors).
    pub width: usize,
    /// Vectors that must reach the output region even when no op touches
    /// them (designated rows the surrounding pipeline does not write).
    pub passthrough_vectors: Vec<usize>,
    /// Vectors whose final values must be written back.
    pub store_vectors: Vec<usize>,
}

fn decl_pair(d: &AluDecl, j: usize) -> AluPair {
    AluPair {
        dst: d.dst_start + j * d.dst_stride,
        src: match d.src {
            AluSrc::Immediate(c) => AluPairSrc::Scalar(c),
            AluSrc::Vector { start, stride } => AluPairSrc::Vector(start + j * stride),
        },
    }
}

fn push_run(runs: &mut Vec<AluOpRun>, op: AluOpKind, immediate: bool, pairs: Vec<AluPair>) {
    if pairs.is_empty() {
        return;
    }
    if let Some(last) = runs.last_mut() {
        if last.op == op && last.immediate == immediate {
            last.pairs.extend(pairs);
            return;
        }
    }
    runs.push(AluOpRun {
        op,
        immediate,
        pairs,
    });
}

/// Expand the declaration list to vector pairs in declaration order, keeping
/// only pairs whose destination satisfies `keep`.
fn runs_for(decls: &[AluDecl], keep: impl Fn(usize) -> bool) -> Vec<AluOpRun> {
    let mut runs = Vec::new();
    for d in decls {
        let pairs = (0..d.iterations)
            .map(|j| decl_pair(d, j))
            .filter(|p| keep(p.dst))
            .collect();
        push_run(&mut runs, d.op, d.is_immediate(), pairs);
    }
    runs
}

/// Full expansion over the whole image (single-offload path).
pub fn full_alu_runs(decls: &[AluDecl]) -> Vec<AluOpRun> {
    runs_for(decls, |_| true)
}

/// Decompose a succession of ALU ops into capacity-respecting batches.
/// All-immediate lists process independent vectors along the line in maximal
/// runs; vector-vector ops couple vectors that must stay resident together,
/// and packing the coupling components in ascending order reproduces
/// column-by-column batching for row-level operations.
pub fn plan_alu(problem: &AluProblem, config: &VtaConfig) -> Result<AluPlan, PlanError> {
    let acc = config.acc_size;
    let store_set: BTreeSet<usize> = problem.store_vectors.iter().copied().collect();

    let mut touched: BTreeSet<usize> = BTreeSet::new();
    let all_immediate = problem.decls.iter().all(AluDecl::is_immediate);
    for d in problem.decls {
        for j in 0..d.iterations {
            let p = decl_pair(d, j);
            touched.insert(p.dst);
            if let AluPairSrc::Vector(src) = p.src {
                touched.insert(src);
            }
        }
    }
    // Vectors with no op on them are independent copies and never have to
    // share residency with the coupled working set.
    let passthrough_only: Vec<usize> = problem
        .passthrough_vectors
        .iter()
        .copied()
        .filter(|v| !touched.contains(v))
        .collect();

    let partition_for = |mut vectors: Vec<usize>, runs: Vec<AluOpRun>| {
        vectors.sort_unstable();
        let store_vectors = vectors
            .iter()
            .copied()
            .filter(|v| store_set.contains(v))
            .collect();
        AluPartition {
            vectors,
            runs,
            store_vectors,
        }
    };

    let mut partitions = Vec::new();

    if all_immediate {
        // Never-reused vectors, processed along the line in maximal runs.
        let union: Vec<usize> = touched
            .iter()
            .copied()
            .chain(passthrough_only.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for batch in union.chunks(acc.max(1)) {
            let set: BTreeSet<usize> = batch.iter().copied().collect();
            let runs = runs_for(problem.decls, |dst| set.contains(&dst));
            partitions.push(partition_for(batch.to_vec(), runs));
        }
        return Ok(AluPlan {
            column_mode: false,
            partitions,
        });
    }

    // Vector-vector couplings present: vectors linked by some pair must stay
    // resident together. Union-find over the touched set yields coupling
    // components; packing them in ascending order reproduces column-by-column
    // batching for row-level couplings (one small component per segment).
    let index: BTreeMap<usize, usize> = touched
        .iter()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let mut parent: Vec<usize> = (0..touched.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for d in problem.decls {
        for j in 0..d.iterations {
            let p = decl_pair(d, j);
            if let AluPairSrc::Vector(src) = p.src {
                let (a, b) = (index[&p.dst], index[&src]);
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let ordered: Vec<usize> = touched.iter().copied().collect();
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &v) in ordered.iter().enumerate() {
        components.entry(find(&mut parent, i)).or_default().push(v);
    }
    // Ascending by smallest member; every component's vectors are sorted.
    let mut groups: Vec<Vec<usize>> = components.into_values().collect();
    groups.sort_by_key(|g| g[0]);

    let mut current: Vec<usize> = Vec::new();
    for group in groups {
        if group.len() > acc {
            return Err(PlanError::Capacity(format!(
                "a coupled set of {} vectors exceeds the {} ACC slots available",
                group.len(),
                acc
            )));
        }
        if current.len() + group.len() > acc {
            let batch = std::mem::take(&mut current);
            let set: BTreeSet<usize> = batch.iter().copied().collect();
            let runs = runs_for(problem.decls, |dst| set.contains(&dst));
            partitions.push(partition_for(batch, runs));
        }
        current.extend(group);
    }
    if !current.is_empty() {
        current.sort_unstable();
        let set: BTreeSet<usize> = current.iter().copied().collect();
        let runs = runs_for(problem.decls, |dst| set.contains(&dst));
        partitions.push(partition_for(current, runs));
    }
    for batch in passthrough_only.chunks(acc.max(1)) {
        partitions.push(partition_for(batch.to_vec(), Vec::new()));
    }
    Ok(AluPlan {
        column_mode: true,
        partitions,
    })
}

// ---------------------------------------------------------------------------
// Whole-program planning
// ---------------------------------------------------------------------------

pub fn plan_program(
    prog: &PaddedProgram,
    strategy_override: Option<u8>,
) -> Result<ProgramPlan, PlanError> {
    let cfg = &prog.config;
    let strategy = strategy_override.unwrap_or_else(|| prog.strategy());
    if !(1..=4).contains(&strategy) {
        return Err(PlanError::UnknownStrategy(strategy));
    }

    let gemm_overflow = prog
        .gemm_shape
        .as_ref()
        .is_some_and(|shape| needs_partitioning(shape, cfg));
    let image_vectors = prog.acc_total_rows * prog.acc_width;
    let image_fits = image_vectors <= cfg.acc_size;

    if !gemm_overflow && image_fits {
        let triples = match (&prog.gemm_shape, prog.scalar_gemm) {
            (Some(shape), None) => expand_bgemm(shape.alpha, shape.lambda, shape.beta),
            (Some(shape), Some(_)) => expand_bgemm_scalar(shape.alpha, shape.lambda),
            (None, _) => Vec::new(),
        };
        return Ok(ProgramPlan::Single(Partition {
            triples,
            alu_runs: full_alu_runs(&prog.alu_decls),
            acc_group: 0,
        }));
    }

    let gemm = match &prog.gemm_shape {
        Some(shape) => {
            let plan = plan_gemm(shape, strategy, cfg)?;
            Some(if prog.scalar_gemm.is_some() {
                restrict_to_scalar(plan)
            } else {
                plan
            })
        }
        None => None,
    };

    let alu = if prog.alu_decls.is_empty() {
        None
    } else {
        let width = prog.acc_width;
        let mut dst: BTreeSet<usize> = BTreeSet::new();
        for d in &prog.alu_decls {
            for j in 0..d.iterations {
                dst.insert(d.dst_start + j * d.dst_stride);
            }
        }
        let designated: Vec<usize> = prog
            .store_rows
            .iter()
            .flat_map(|&r| (0..width).map(move |s| r * width + s))
            .collect();
        // With a GEMM phase in front every designated vector is already in
        // DRAM, so only ALU-touched ones need a second write; otherwise the
        // designated vectors must pass through ACC explicitly.
        let (passthrough, store_vectors) = if prog.gemm_shape.is_some() {
            let store: Vec<usize> = designated
                .iter()
                .copied()
                .filter(|v| dst.contains(v))
                .collect();
            (Vec::new(), store)
        } else {
            let passthrough: Vec<usize> = designated
                .iter()
                .copied()
                .filter(|v| !dst.contains(v))
                .collect();
            (passthrough, designated)
        };
        let problem = AluProblem {
            decls: &prog.alu_decls,
            width,
            passthrough_vectors: passthrough,
            store_vectors,
        };
        Some(plan_alu(&problem, cfg)?)
    };

    Ok(ProgramPlan::Phased { gemm, alu })
}
