//! `vtac`, compile, run, verify, and inspect VTA IR programs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use serde_json::json;

use vta_core::chain::{compile_network, run_network, NetworkManifest};
use vta_core::codegen::write_artifacts;
use vta_core::ir::{self, IrProgram, MatrixSource, VtaConfig};
use vta_core::matrix::Mat;
use vta_core::oracle::{compare_bitwise, reference_eval};
use vta_core::partition::ProgramPlan;
use vta_core::pipeline::{compile_single, execute, CompiledProgram};
use vta_core::rng::SplitMix64;
use vta_core::simulator::{run as simulate, DramStore, TraceLevel};
use vta_core::Tensor3;

#[derive(Parser)]
#[command(
    name = "vtac",
    version,
    about = "Stand-alone VTA compiler and functional simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile an IR program to binary artifacts.
    Compile {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Partitioning strategy override (1..4).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        strategy: Option<u8>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the offload plan as JSON.
        #[arg(long)]
        emit_plan: bool,
    },
    /// Execute compiled artifacts on the functional simulator.
    Run {
        #[arg(long)]
        artifacts: PathBuf,
        /// Raw little-endian int32 input matrix (row-major, no header).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a JSON-lines execution trace to stderr.
        #[arg(long)]
        trace: bool,
    },
    /// Compile, simulate, and compare against the dense reference.
    Verify {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Number of random input seeds.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Comma-separated strategies to exercise.
        #[arg(long, default_value = "1,2,3,4")]
        strategies: String,
        #[arg(long)]
        json: bool,
    },
    /// Instruction/uop statistics per strategy.
    #[command(group(ArgGroup::new("subject").required(true).args(["shape", "ir"])))]
    Stats {
        /// GEMM block shape AxLxB (e.g. 4x8x4).
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        ir: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Execute a multi-layer network manifest.
    Chain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Raw little-endian int32 CHW input tensor.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn log_level() -> u8 {
    std::env::var("VTAC_LOG")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("vtac: error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile {
            ir,
            config,
            strategy,
            out,
            emit_plan,
        } => cmd_compile(&ir, &config, strategy, &out, emit_plan),
        Command::Run {
            artifacts,
            input,
            out,
            trace,
        } => cmd_run(&artifacts, &input, &out, trace),
        Command::Verify {
            ir,
            config,
            seeds,
            strategies,
            json,
        } => cmd_verify(&ir, &config, seeds, &strategies, json),
        Command::Stats {
            shape,
            ir,
            config,
            json,
        } => cmd_stats(shape.as_deref(), ir.as_deref(), &config, json),
        Command::Chain {
            manifest,
            config,
            input,
            out,
            json,
        } => cmd_chain(&manifest, &config, &input, &out, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => fail(msg),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), String> {
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_program(ir_path: &Path, config_path: &Path) -> Result<(IrProgram, VtaConfig), String> {
    let config = VtaConfig::from_file(config_path).map_err(|e| e.to_string())?;
    let text = read_text(ir_path)?;
    let (program, lints) = ir::parse_ir_with_lints(&text).map_err(|e| e.to_string())?;
    if log_level() >= 1 {
        for lint in &lints {
            eprintln!("vtac: lint: {lint}");
        }
    }
    Ok((program, config))
}

/// Data for every file-backed matrix, read relative to the IR's directory.
fn file_matrix_data(program: &IrProgram, ir_path: &Path) -> Result<BTreeMap<String, Mat>, String> {
    let dir = ir_path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for m in &program.matrices {
        if let MatrixSource::File(rel) = &m.source {
            let bytes = read_bytes(&dir.join(rel))?;
            let mat = Mat::from_le_bytes(m.rows, m.cols, &bytes)
                .map_err(|e| format!("{}: {e}", m.name))?;
            out.insert(m.name.clone(), mat);
        }
    }
    Ok(out)
}

fn rows_to_bytes(rows: &[Vec<i32>]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn plan_json(plan: &ProgramPlan) -> serde_json::Value {
    match plan {
        ProgramPlan::Single(part) => json!({
            "form": "single",
            "triples": part.triples.iter().map(|t| [t.l, t.p, t.m]).collect::<Vec<_>>(),
            "alu_pairs": part.alu_runs.iter().map(|r| r.pairs.len()).sum::<usize>(),
        }),
        ProgramPlan::Phased { gemm, alu } => {
            let gemm_json = gemm.as_ref().map(|g| {
                json!({
                    "strategy": g.strategy,
                    "shape": [g.shape.alpha, g.shape.lambda, g.shape.beta],
                    "scalar": g.scalar,
                    "partitions": g.partitions.iter().map(|p| json!({
                        "group": p.acc_group,
                        "triples": p.triples.iter().map(|t| [t.l, t.p, t.m]).collect::<Vec<_>>(),
                    })).collect::<Vec<_>>(),
                })
            });
            let alu_json = alu.as_ref().map(|a| {
                json!({
                    "column_mode": a.column_mode,
                    "partitions": a.partitions.iter().map(|p| json!({
                        "vectors": p.vectors,
                        "pairs": p.runs.iter().map(|r| r.pairs.len()).sum::<usize>(),
                        "store_vectors": p.store_vectors,
                    })).collect::<Vec<_>>(),
                })
            });
            json!({ "form": "phased", "gemm": gemm_json, "alu": alu_json })
        }
    }
}

// ---------------------------------------------------------------------------
// compile
// ---------------------------------------------------------------------------

fn cmd_compile(
    ir_path: &Path,
    config_path: &Path,
    strategy: Option<u8>,
    out_dir: &Path,
    emit_plan: bool,
) -> Result<(), String> {
    let (program, config) = load_program(ir_path, config_path)?;
    let prog = ir::validate_shapes(&program, &config).map_err(|e| e.to_string())?;
    let compiled = compile_single(prog, strategy).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let mut region_data = file_matrix_data(&program, ir_path)?;
    for (name, mat) in vta_core::codegen::synthesized_region_data(&compiled.prog) {
        region_data.insert(name, mat);
    }
    let files = write_artifacts(
        out_dir,
        &compiled.prog,
        &compiled.image,
        0,
        &compiled.stream,
        compiled.stats,
        compiled.partitions,
        &region_data,
    )
    .map_err(|e| e.to_string())?;
    if emit_plan {
        let path = out_dir.join(format!("plan{}.json", compiled.prog.ir.name));
        let text = serde_json::to_string_pretty(&plan_json(&compiled.plan)).unwrap();
        write_bytes(&path, text.as_bytes())?;
    }
    if log_level() >= 1 {
        for f in &files {
            eprintln!("vtac: wrote {}", f.display());
        }
    }
    println!(
        "instructions={} uops={} partitions={}",
        compiled.stats.instructions, compiled.stats.uops, compiled.partitions
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(artifacts: &Path, input: &Path, out: &Path, trace: bool) -> Result<(), String> {
    let loaded = vta_core::codegen::read_artifacts(artifacts, None).map_err(|e| e.to_string())?;
    let mut dram = DramStore::with_init(loaded.image.clone(), loaded.dram_init);

    if loaded.meta.input_regions.len() != 1 {
        return Err(format!(
            "artifact expects {} input regions; `vtac run` supplies exactly one",
            loaded.meta.input_regions.len()
        ));
    }
    let input_name = &loaded.meta.input_regions[0];
    let region = loaded
        .image
        .lookup(0, input_name)
        .map_err(|e| e.to_string())?;
    let r = loaded.image.region(region).clone();
    let bytes = read_bytes(input)?;
    let mat = Mat::from_le_bytes(r.rows, r.cols, &bytes).map_err(|e| format!("--input: {e}"))?;
    dram.write_matrix(region, &mat);

    let level = match (trace, log_level() >= 2) {
        (true, true) => TraceLevel::Digests,
        (true, false) => TraceLevel::Counts,
        _ => TraceLevel::Off,
    };
    let trace_out = simulate(&loaded.stream, &mut dram, &loaded.meta.config, level)
        .map_err(|e| e.to_string())?;
    if trace {
        eprint!("{}", trace_out.to_json_lines());
    }

    let out_region = loaded
        .image
        .lookup(0, &loaded.meta.output_region)
        .map_err(|e| e.to_string())?;
    let rows = dram.read_rows(out_region, &loaded.meta.store_rows);
    write_bytes(out, &rows_to_bytes(&rows))?;
    println!(
        "rows={} cols={} instructions={}",
        rows.len(),
        rows.first().map_or(0, Vec::len),
        trace_out.executed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn random_input_data(
    program: &IrProgram,
    seed: u64,
    files: &BTreeMap<String, Mat>,
) -> BTreeMap<String, Mat> {
    let mut data = files.clone();
    for m in &program.matrices {
        if m.source != MatrixSource::Input {
            continue;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in m.name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = SplitMix64::new(seed ^ h);
        // Even seeds sample the int8 range; odd seeds the full int32 range.
        let values = (0..m.rows * m.cols)
            .map(|_| {
                if seed.is_multiple_of(2) {
                    rng.next_i8_range()
                } else {
                    rng.next_i32()
                }
            })
            .collect();
        data.insert(m.name.clone(), Mat::from_vec(m.rows, m.cols, values));
    }
    data
}

fn cmd_verify(
    ir_path: &Path,
    config_path: &Path,
    seeds: u64,
    strategies: &str,
    json: bool,
) -> Result<(), String> {
    let (program, config) = load_program(ir_path, config_path)?;
    let prog = ir::validate_shapes(&program, &config).map_err(|e| e.to_string())?;
    let strategy_list: Vec<u8> = strategies
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u8>()
                .ok()
                .filter(|n| (1..=4).contains(n))
                .ok_or_else(|| format!("bad strategy list {strategies:?}"))
        })
        .collect::<Result<_, _>>()?;

    let files = file_matrix_data(&program, ir_path)?;
    let compiled: Vec<(u8, CompiledProgram)> = strategy_list
        .iter()
        .map(|&s| {
            compile_single(prog.clone(), Some(s))
                .map(|c| (s, c))
                .map_err(|e| format!("strategy {s}: {e}"))
        })
        .collect::<Result<_, _>>()?;

    let mut cases = Vec::new();
    let mut matches = 0usize;
    for seed in 0..seeds {
        let data = random_input_data(&program, seed, &files);
        let oracle_inputs: BTreeMap<String, Vec<Vec<i32>>> =
            data.iter().map(|(k, v)| (k.clone(), v.to_rows())).collect();
        let reference =
            reference_eval(&program, &config, &oracle_inputs).map_err(|e| e.to_string())?;
        for (strategy, comp) in &compiled {
            let sim_rows = execute(comp, &data).map_err(|e| e.to_string())?;
            let report = compare_bitwise(&sim_rows, &reference).map_err(|e| e.to_string())?;
            if report.is_match() {
                matches += 1;
            }
            if !json {
                let mut line = format!("seed={seed} strategy={strategy}: {}", report.status);
                if let Some(d) = &report.first_divergence {
                    let _ = write!(
                        line,
                        " first=({}, {}) simulated={} reference={} mismatches={}",
                        d.row, d.col, d.simulated, d.reference, report.mismatches
                    );
                }
                println!("{line}");
            }
            cases.push(json!({
                "seed": seed,
                "strategy": strategy,
                "status": report.status,
                "mismatches": report.mismatches,
                "first_divergence": report.first_divergence,
            }));
        }
    }
    let total = cases.len();
    let ok = matches == total;
    if json {
        let doc = json!({
            "program": program.name,
            "status": if ok { "match" } else { "mismatch" },
            "matched": matches,
            "total": total,
            "cases": cases,
        });
        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    } else {
        println!("{matches}/{total} match");
    }
    if ok {
        Ok(())
    } else {
        Err(format!("{}/{} cases diverged", total - matches, total))
    }
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

fn synthetic_gemm(shape: &str, config: &VtaConfig) -> Result<IrProgram, String> {
    let dims: Vec<usize> = shape
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map_err(|e| format!("--shape must be AxLxB in blocks: {e}"))?;
    let [a, l, b] = dims.as_slice() else {
        return Err("--shape must be AxLxB in blocks".into());
    };
    if *a == 0 || *l == 0 || *b == 0 {
        return Err("--shape dimensions must be positive".into());
    }
    let bs = config.bs;
    let text = format!(
        r#"{{
    "NAME": "_stats",
    "MATRICES": {{
        "A": [{}, {}, "input"],
        "B": [{}, {}, "input"],
        "C": [{}, {}, "output"]
    }},
    "LOAD": {{"INP": ["A"], "WGT": ["B"]}},
    "GEMM": ["C", "A", "B"],
    "STORE": {{"C": ["C"]}}
}}"#,
        a * bs,
        l * bs,
        l * bs,
        b * bs,
        a * bs,
        b * bs
    );
    ir::parse_ir(&text).map_err(|e| e.to_string())
}

fn cmd_stats(
    shape: Option<&str>,
    ir_path: Option<&Path>,
    config_path: &Path,
    json: bool,
) -> Result<(), String> {
    let config = VtaConfig::from_file(config_path).map_err(|e| e.to_string())?;
    let program = match (shape, ir_path) {
        (Some(s), None) => synthetic_gemm(s, &config)?,
        (None, Some(p)) => load_program(p, config_path)?.0,
        _ => unreachable!("clap arg group enforces exactly one"),
    };
    let prog = ir::validate_shapes(&program, &config).map_err(|e| e.to_string())?;

    let mut rows = Vec::new();
    for strategy in 1..=4u8 {
        let compiled = compile_single(prog.clone(), Some(strategy)).map_err(|e| e.to_string())?;
        rows.push((strategy, compiled.stats, compiled.partitions));
    }
    if json {
        let doc = json!({
            "config": config,
            "shape": prog.gemm_shape.map(|s| [s.alpha, s.lambda, s.beta]),
            "strategies": rows.iter().map(|(s, st, p)| json!({
                "strategy": s,
                "instructions": st.instructions,
                "uops": st.uops,
                "partitions": p,
            })).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    } else {
        println!(
            "{:<9} {:>13} {:>10} {:>11}",
            "strategy", "instructions", "uops", "partitions"
        );
        for (s, st, p) in &rows {
            println!("{s:<9} {:>13} {:>10} {p:>11}", st.instructions, st.uops);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// chain
// ---------------------------------------------------------------------------

fn cmd_chain(
    manifest_path: &Path,
    config_path: &Path,
    input: &Path,
    out_dir: &Path,
    json: bool,
) -> Result<(), String> {
    let config = VtaConfig::from_file(config_path).map_err(|e| e.to_string())?;
    let manifest = NetworkManifest::from_file(manifest_path).map_err(|e| e.to_string())?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let compiled = compile_network(&manifest, &config, base).map_err(|e| e.to_string())?;

    let (c, h, w) = manifest.input_chw().map_err(|e| e.to_string())?;
    let bytes = read_bytes(input)?;
    if bytes.len() != c * h * w * 4 {
        return Err(format!(
            "--input: expected {} bytes for a {c}x{h}x{w} int32 tensor, got {}",
            c * h * w * 4,
            bytes.len()
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let tensor = Tensor3::from_vec(c, h, w, data);

    let result = run_network(&compiled, &tensor).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    for (layer, prog) in compiled.programs.iter().enumerate() {
        let mut region_data: BTreeMap<String, Mat> = BTreeMap::new();
        for ((l, name), mat) in &compiled.file_data {
            if *l == layer {
                region_data.insert(name.clone(), mat.clone());
            }
        }
        write_artifacts(
            out_dir,
            prog,
            &compiled.image,
            layer,
            &compiled.streams[layer],
            compiled.reports[layer].stats,
            compiled.reports[layer].partitions,
            &region_data,
        )
        .map_err(|e| e.to_string())?;
    }
    write_bytes(
        &out_dir.join("output.bin"),
        &rows_to_bytes(&result.output_rows),
    )?;

    let report = json!({
        "layers": result.reports,
        "output_rows": result.output_rows.len(),
        "output_cols": result.output_rows.first().map_or(0, Vec::len),
        "output_row_indices": result.output_row_indices,
    });
    let report_text = serde_json::to_string_pretty(&report).unwrap();
    write_bytes(&out_dir.join("report.json"), report_text.as_bytes())?;
    if json {
        println!("{report_text}");
    } else {
        for r in &result.reports {
            println!(
                "layer{} strategy={} instructions={} uops={} partitions={}",
                r.name, r.strategy, r.stats.instructions, r.stats.uops, r.partitions
            );
        }
        println!(
            "output rows={} cols={}",
            result.output_rows.len(),
            result.output_rows.first().map_or(0, Vec::len)
        );
    }
    Ok(())
}
