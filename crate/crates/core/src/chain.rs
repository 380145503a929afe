//! Multi-layer execution: a network manifest orders per-layer IR programs
//! and describes the host-side reshaping performed between offloads.
//!
//! Manifest schema (JSON):
//!
//! ```text
//! {
//!   "layers": [{"ir": "l1.json", "strategy": 2}, ...],
//!   "edges":  [{"from": "input" | <layer>, "to": <layer>,
//!               "reshapes": [{"im2row": {...}} | {"row2tensor": {...}}],
//!               "to_matrix": "A",        // optional with a single input
//!               "dst_col": 0}],          // optional concat column offset
//!   "input_shape": [1, C, H, W],
//!   "output": <layer>
//! }
//! ```
//!
//! An edge with no reshapes and no column offset, feeding the only edge of
//! its target matrix, is aliased: the consumer reads the producer's output
//! region directly and no host copy happens.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{
    self, allocate_dram, count_stats, lower, verify_stream, AliasLink, DramImage, OpStream,
    StreamStats,
};
use crate::ir::{self, IrError, MatrixSource, PaddedProgram, VtaConfig};
use crate::matrix::{Mat, Tensor3};
use crate::partition::{plan_program, PlanError, ProgramPlan};
use crate::simulator::{run, DramStore, SimError, TraceLevel};

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("reshape error: {0}")]
    Shape(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<ChainError>,
    },
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Codegen(#[from] codegen::CodegenError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn at_layer(layer: usize) -> impl Fn(ChainError) -> ChainError {
    move |source| ChainError::Layer {
        layer,
        source: Box::new(source),
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub ir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeSource {
    Layer(usize),
    Tag(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Im2RowParams {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    #[serde(default)]
    pub pad_h: usize,
    #[serde(default)]
    pub pad_w: usize,
}

impl Im2RowParams {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride_w + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReshapeStep {
    Im2Row(Im2RowParams),
    Row2Tensor {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub from: EdgeSource,
    pub to: usize,
    #[serde(default)]
    pub reshapes: Vec<ReshapeStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_matrix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_col: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub layers: Vec<LayerSpec>,
    pub edges: Vec<Edge>,
    /// NCHW (N must be 1) or CHW.
    pub input_shape: Vec<usize>,
    pub output: usize,
}

impl NetworkManifest {
    pub fn from_file(path: &Path) -> Result<NetworkManifest, ChainError> {
        let text = std::fs::read_to_string(path).map_err(|source| ChainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: NetworkManifest = serde_json::from_str(&text)
            .map_err(|e| ChainError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn input_chw(&self) -> Result<(usize, usize, usize), ChainError> {
        match self.input_shape.as_slice() {
            [1, c, h, w] => Ok((*c, *h, *w)),
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(ChainError::Manifest(format!(
                "input_shape must be [1,C,H,W] or [C,H,W], got {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.layers.is_empty() {
            return Err(ChainError::Manifest("no layers".into()));
        }
        if self.output >= self.layers.len() {
            return Err(ChainError::Manifest(format!(
                "output layer {} out of range",
                self.output
            )));
        }
        self.input_chw()?;
        for (i, e) in self.edges.iter().enumerate() {
            if e.to >= self.layers.len() {
                return Err(ChainError::Manifest(format!(
                    "edge {i}: target out of range"
                )));
            }
            match &e.from {
                EdgeSource::Layer(p) if *p >= e.to => {
                    // Layer order is the topological order.
                    return Err(ChainError::Manifest(format!(
                        "edge {i}: source layer {p} does not precede target {}",
                        e.to
                    )));
                }
                EdgeSource::Layer(_) => {}
                EdgeSource::Tag(t) if t == "input" => {}
                EdgeSource::Tag(t) => {
                    return Err(ChainError::Manifest(format!(
                        "edge {i}: unknown source {t:?}"
                    )))
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Host-side reshaping
// ---------------------------------------------------------------------------

/// Flatten receptive-field patches into matrix rows: row `r` is output
/// position `(r / out_w, r mod out_w)`; within a row, columns run
/// channel-major, then kernel row, then kernel column. Padding reads zero.
pub fn im2row(tensor: &Tensor3, p: &Im2RowParams) -> Result<Mat, ChainError> {
    if (tensor.channels, tensor.height, tensor.width) != (p.channels, p.height, p.width) {
        return Err(ChainError::Shape(format!(
            "im2row params expect {}x{}x{}, tensor is {}x{}x{}",
            p.channels, p.height, p.width, tensor.channels, tensor.height, tensor.width
        )));
    }
    if p.kernel_h == 0
        || p.kernel_w == 0
        || p.stride_h == 0
        || p.stride_w == 0
        || p.height + 2 * p.pad_h < p.kernel_h
        || p.width + 2 * p.pad_w < p.kernel_w
    {
        return Err(ChainError::Shape("degenerate im2row geometry".into()));
    }
    let (out_h, out_w) = (p.out_h(), p.out_w());
    let mut mat = Mat::zeros(out_h * out_w, p.channels * p.kernel_h * p.kernel_w);
    for oh in 0..out_h {
        for ow in 0..out_w {
            let row = oh * out_w + ow;
            for c in 0..p.channels {
                for ki in 0..p.kernel_h {
                    for kj in 0..p.kernel_w {
                        let col = c * p.kernel_h * p.kernel_w + ki * p.kernel_w + kj;
                        let y = (oh * p.stride_h + ki) as isize - p.pad_h as isize;
                        let x = (ow * p.stride_w + kj) as isize - p.pad_w as isize;
                        let v = if y >= 0
                            && x >= 0
                            && (y as usize) < p.height
                            && (x as usize) < p.width
                        {
                            tensor.get(c, y as usize, x as usize)
                        } else {
                            0
                        };
                        mat.set(row, col, v);
                    }
                }
            }
        }
    }
    Ok(mat)
}

/// Inverse of the 1x1-kernel flattening: `tensor(c, h, w) = mat(h*W + w, c)`.
pub fn row2tensor(
    mat: &Mat,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor3, ChainError> {
    if mat.rows != height * width || mat.cols != channels {
        return Err(ChainError::Shape(format!(
            "row2tensor expects a {}x{} matrix for {}x{}x{}, got {}x{}",
            height * width,
            channels,
            channels,
            height,
            width,
            mat.rows,
            mat.cols
        )));
    }
    let mut t = Tensor3::zeros(channels, height, width);
    for h in 0..height {
        for w in 0..width {
            for c in 0..channels {
                t.set(c, h, w, mat.get(h * width + w, c));
            }
        }
    }
    Ok(t)
}

/// Payload flowing along an edge while reshape steps are applied.
#[derive(Clone, Debug)]
enum Payload {
    T(Tensor3),
    M(Mat),
}

fn apply_reshapes(start: Payload, steps: &[ReshapeStep]) -> Result<Payload, ChainError> {
    let mut cur = start;
    for step in steps {
        cur = match (cur, step) {
            (Payload::T(t), ReshapeStep::Im2Row(p)) => Payload::M(im2row(&t, p)?),
            (
                Payload::M(m),
                ReshapeStep::Row2Tensor {
                    channels,
                    height,
                    width,
                },
            ) => Payload::T(row2tensor(&m, *channels, *height, *width)?),
            (Payload::M(_), ReshapeStep::Im2Row(_)) => {
                return Err(ChainError::Shape(
                    "im2row applies to a tensor; insert row2tensor first".into(),
                ))
            }
            (Payload::T(_), ReshapeStep::Row2Tensor { .. }) => {
                return Err(ChainError::Shape("row2tensor applies to a matrix".into()))
            }
        };
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Network compilation and execution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub strategy: u8,
    pub partitions: usize,
    pub stats: StreamStats,
}

pub struct CompiledNetwork {
    pub manifest: NetworkManifest,
    pub programs: Vec<PaddedProgram>,
    pub plans: Vec<ProgramPlan>,
    pub image: DramImage,
    pub streams: Vec<OpStream>,
    pub reports: Vec<LayerReport>,
    /// Payload for file-backed regions, keyed by (layer, region name).
    pub file_data: BTreeMap<(usize, String), Mat>,
    aliased: Vec<(usize, String)>,
}

/// Parse, validate, plan, and lower every layer against one shared DRAM
/// image. IR paths resolve relative to `base_dir`.
pub fn compile_network(
    manifest: &NetworkManifest,
    config: &VtaConfig,
    base_dir: &Path,
) -> Result<CompiledNetwork, ChainError> {
    manifest.validate()?;
    let mut programs = Vec::new();
    let mut ir_dirs: Vec<PathBuf> = Vec::new();
    for (layer, spec) in manifest.layers.iter().enumerate() {
        let path = base_dir.join(&spec.ir);
        let text = std::fs::read_to_string(&path).map_err(|source| ChainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parsed = ir::parse_ir(&text).map_err(|e| at_layer(layer)(e.into()))?;
        let prog = ir::validate_shapes(&parsed, config).map_err(|e| at_layer(layer)(e.into()))?;
        ir_dirs.push(path.parent().unwrap_or(Path::new(".")).to_path_buf());
        programs.push(prog);
    }

    // Edges that qualify for zero-copy aliasing.
    let mut links = Vec::new();
    let mut aliased = Vec::new();
    for e in &manifest.edges {
        if let EdgeSource::Layer(p) = e.from {
            let target = resolve_target(&programs[e.to], e)?;
            let single_edge = manifest
                .edges
                .iter()
                .filter(|other| {
                    other.to == e.to
                        && resolve_target(&programs[e.to], other)
                            .map(|t| t == target)
                            .unwrap_or(false)
                })
                .count()
                == 1;
            if e.reshapes.is_empty() && e.dst_col.is_none() && single_edge {
                links.push(AliasLink {
                    producer_layer: p,
                    consumer_layer: e.to,
                    consumer_matrix: target.clone(),
                });
                aliased.push((e.to, target.clone()));
            }
        }
    }

    let prog_refs: Vec<&PaddedProgram> = programs.iter().collect();
    let image = allocate_dram(&prog_refs, &links)?;

    let mut plans = Vec::new();
    let mut streams = Vec::new();
    let mut reports = Vec::new();
    let mut file_data = BTreeMap::new();
    for (layer, prog) in programs.iter().enumerate() {
        let strategy = manifest.layers[layer].strategy;
        let plan = plan_program(prog, strategy).map_err(|e| at_layer(layer)(e.into()))?;
        let stream = lower(prog, &plan, &image, layer).map_err(|e| at_layer(layer)(e.into()))?;
        verify_stream(&stream, &image, config)
            .map_err(|msg| at_layer(layer)(ChainError::Manifest(msg)))?;
        reports.push(LayerReport {
            name: prog.ir.name.clone(),
            strategy: strategy.unwrap_or_else(|| prog.strategy()),
            partitions: plan.partition_count(),
            stats: count_stats(&stream),
        });

        for m in &prog.matrices {
            if let MatrixSource::File(rel) = &m.decl.source {
                if aliased.contains(&(layer, m.decl.name.clone())) {
                    continue;
                }
                let path = ir_dirs[layer].join(rel);
                let bytes = std::fs::read(&path).map_err(|source| ChainError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let mat = Mat::from_le_bytes(m.decl.rows, m.decl.cols, &bytes)
                    .map_err(|e| at_layer(layer)(ChainError::Shape(e)))?;
                file_data.insert((layer, m.decl.name.clone()), mat);
            }
        }
        for (name, mat) in codegen::synthesized_region_data(prog) {
            file_data.insert((layer, name), mat);
        }
        plans.push(plan);
        streams.push(stream);
    }

    Ok(CompiledNetwork {
        manifest: manifest.clone(),
        programs,
        plans,
        image,
        streams,
        reports,
        file_data,
        aliased,
    })
}

fn resolve_target<'p>(prog: &'p PaddedProgram, edge: &Edge) -> Result<&'p String, ChainError> {
    if let Some(name) = &edge.to_matrix {
        let m = prog
            .matrices
            .iter()
            .find(|m| &m.decl.name == name)
            .ok_or_else(|| ChainError::Manifest(format!("edge targets unknown matrix {name:?}")))?;
        if m.decl.source != MatrixSource::Input {
            return Err(ChainError::Manifest(format!(
                "edge target {name:?} is not an input matrix"
            )));
        }
        return Ok(&m.decl.name);
    }
    let mut inputs = prog
        .matrices
        .iter()
        .filter(|m| m.decl.source == MatrixSource::Input);
    match (inputs.next(), inputs.next()) {
        (Some(only), None) => Ok(&only.decl.name),
        (None, _) => Err(ChainError::Manifest(
            "edge targets a layer with no input matrix".into(),
        )),
        _ => Err(ChainError::Manifest(
            "layer has several input matrices; edge needs to_matrix".into(),
        )),
    }
}

#[derive(Clone, Debug)]
pub struct NetworkResult {
    pub output_rows: Vec<Vec<i32>>,
    pub output_row_indices: Vec<usize>,
    pub reports: Vec<LayerReport>,
}

/// Execute layers in manifest order: reshape incoming data, write it into
/// the layer's input region, run the layer's stream, and hand the output on.
pub fn run_network(
    compiled: &CompiledNetwork,
    input: &Tensor3,
) -> Result<NetworkResult, ChainError> {
    let manifest = &compiled.manifest;
    let (c, h, w) = manifest.input_chw()?;
    if (input.channels, input.height, input.width) != (c, h, w) {
        return Err(ChainError::Shape(format!(
            "network input must be {c}x{h}x{w}, got {}x{}x{}",
            input.channels, input.height, input.width
        )));
    }

    let mut dram = DramStore::new(compiled.image.clone());
    for ((layer, name), mat) in &compiled.file_data {
        let region = compiled.image.lookup(*layer, name)?;
        dram.write_matrix(region, mat);
    }

    let mut outputs: Vec<Option<Mat>> = vec![None; compiled.programs.len()];
    for (layer, prog) in compiled.programs.iter().enumerate() {
        // Assemble this layer's runtime inputs from its incoming edges.
        let mut staged: BTreeMap<String, Mat> = BTreeMap::new();
        for e in manifest.edges.iter().filter(|e| e.to == layer) {
            let target = resolve_target(prog, e)?.clone();
            if compiled.aliased.contains(&(layer, target.clone())) {
                continue; // zero-copy: producer already wrote the region
            }
            let start = match &e.from {
                EdgeSource::Tag(_) => Payload::T(input.clone()),
                EdgeSource::Layer(p) => Payload::M(
                    outputs[*p]
                        .clone()
                        .ok_or_else(|| ChainError::Manifest(format!("layer {p} has no output")))?,
                ),
            };
            let payload = match apply_reshapes(start, &e.reshapes).map_err(at_layer(layer))? {
                Payload::M(m) => m,
                Payload::T(_) => {
                    return Err(at_layer(layer)(ChainError::Shape(
                        "edge must end in matrix form; append an im2row step".into(),
                    )))
                }
            };
            let decl = &prog.matrix(&target).decl;
            let staged_mat = staged
                .entry(target.clone())
                .or_insert_with(|| Mat::zeros(decl.rows, decl.cols));
            let col0 = e.dst_col.unwrap_or(0);
            if payload.rows != decl.rows || col0 + payload.cols > decl.cols {
                return Err(at_layer(layer)(ChainError::Shape(format!(
                    "edge payload {}x{} does not fit {} ({}x{}) at column {col0}",
                    payload.rows, payload.cols, target, decl.rows, decl.cols
                ))));
            }
            for r in 0..payload.rows {
                for cc in 0..payload.cols {
                    staged_mat.set(r, col0 + cc, payload.get(r, cc));
                }
            }
        }
        for (name, mat) in &staged {
            let region = compiled.image.lookup(layer, name)?;
            dram.write_matrix(region, mat);
        }

        run(
            &compiled.streams[layer],
            &mut dram,
            &prog.config,
            TraceLevel::Off,
        )
        .map_err(|e| at_layer(layer)(e.into()))?;

        // The logical output feeds downstream reshapes. Rows the STORE
        // clause skips read back as zero.
        let out_region = compiled.image.lookup(layer, &prog.output().decl.name)?;
        outputs[layer] = Some(dram.read_logical(out_region));
    }

    let out_prog = &compiled.programs[manifest.output];
    let out_region = compiled
        .image
        .lookup(manifest.output, &out_prog.output().decl.name)?;
    let output_rows = dram.read_rows(out_region, &out_prog.store_rows);
    Ok(NetworkResult {
        output_rows,
        output_row_indices: out_prog.store_rows.clone(),
        reports: compiled.reports.clone(),
    })
}
