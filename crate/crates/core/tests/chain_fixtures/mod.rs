//! Desk-scale network fixtures for the chain-correctness criterion. The
//! composed oracle re-implements the reshapes with its own loops and runs
//! each layer through the dense reference evaluator.

use std::collections::BTreeMap;
use std::path::Path;

use vta_core::chain::{
    compile_network, run_network, Edge, EdgeSource, Im2RowParams, LayerSpec, NetworkManifest,
    ReshapeStep,
};
use vta_core::ir::{parse_ir, VtaConfig};
use vta_core::matrix::{Mat, Tensor3};
use vta_core::oracle::reference_eval;
use vta_core::pipeline::{compile_single, execute};
use vta_core::rng::SplitMix64;

type Rows = Vec<Vec<i32>>;

fn mat_rows(m: &Mat) -> Rows {
    m.to_rows()
}

fn random_tensor(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(
        c,
        h,
        w,
        (0..c * h * w).map(|_| rng.next_i8_range()).collect(),
    )
}

fn random_mat(rng: &mut SplitMix64, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.next_i8_range()).collect(),
    )
}

/// Independent im2row: channel-major columns, kernel rows then columns.
fn im2row_ref(t: &Tensor3, kh: usize, kw: usize) -> Rows {
    let (c_n, h, w) = (t.channels, t.height, t.width);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut rows = Vec::new();
    for y in 0..oh {
        for x in 0..ow {
            let mut row = Vec::new();
            for c in 0..c_n {
                for ki in 0..kh {
                    for kj in 0..kw {
                        row.push(t.get(c, y + ki, x + kj));
                    }
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Independent conv-output flattening: matrix rows are spatial positions,
/// columns channels; the flat vector is channel-major.
fn flatten_ref(rows: &Rows, channels: usize, h: usize, w: usize) -> Rows {
    let mut flat = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                flat.push(rows[y * w + x][c]);
            }
        }
    }
    vec![flat]
}

fn conv_ir(
    name: &str,
    rows: usize,
    cols: usize,
    filters: usize,
    wgt: &str,
    relu_vectors: usize,
) -> String {
    format!(
        r#"{{
        "NAME": "{name}",
        "MATRICES": {{
            "A": [{rows}, {cols}, "input"],
            "B": [{cols}, {filters}, "{wgt}"],
            "C": [{rows}, {filters}, "output"]
        }},
        "LOAD": {{"INP": ["A"], "WGT": ["B"]}},
        "GEMM": ["C", "A", "B"],
        "ALU": {{"C": [["MAX_IMM", [[0, 1], 0, {relu_vectors}]]]}},
        "STORE": {{"C": ["C"]}}
    }}"#
    )
}

fn gemm_ir(name: &str, rows: usize, cols: usize, out_cols: usize, wgt: &str) -> String {
    format!(
        r#"{{
        "NAME": "{name}",
        "MATRICES": {{
            "A": [{rows}, {cols}, "input"],
            "B": [{cols}, {out_cols}, "{wgt}"],
            "C": [{rows}, {out_cols}, "output"]
        }},
        "LOAD": {{"INP": ["A"], "WGT": ["B"]}},
        "GEMM": ["C", "A", "B"],
        "STORE": {{"C": ["C"]}}
    }}"#
    )
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn relu_vectors(rows: usize, cols: usize, bs: usize) -> usize {
    let pr = rows.div_ceil(bs) * bs;
    let width = cols.div_ceil(bs);
    pr * width
}

fn eval_layer(ir_text: &str, cfg: &VtaConfig, a: Rows, b: Rows) -> Rows {
    let program = parse_ir(ir_text).unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("A".to_string(), a);
    inputs.insert("B".to_string(), b);
    reference_eval(&program, cfg, &inputs).unwrap().rows
}

/// Two layers: conv-as-GEMM with ReLU, then a fully-connected layer fed by
/// the flattened conv output. Ten seeds, each under all four strategies.
pub fn two_layer_matches_composed_oracle() {
    let cfg = VtaConfig::DESK;
    let dir = tempfile::tempdir().unwrap();
    let mut wrng = SplitMix64::new(42);
    let w1 = random_mat(&mut wrng, 8, 3);
    let w2 = random_mat(&mut wrng, 27, 5);
    std::fs::write(dir.path().join("w1.bin"), w1.to_le_bytes()).unwrap();
    std::fs::write(dir.path().join("w2.bin"), w2.to_le_bytes()).unwrap();
    let conv = conv_ir("_conv", 9, 8, 3, "./w1.bin", relu_vectors(9, 3, cfg.bs));
    let fc = gemm_ir("_fc", 1, 27, 5, "./w2.bin");
    write(dir.path(), "conv.json", &conv);
    write(dir.path(), "fc.json", &fc);

    let im2row_params = Im2RowParams {
        channels: 2,
        height: 4,
        width: 4,
        kernel_h: 2,
        kernel_w: 2,
        stride_h: 1,
        stride_w: 1,
        pad_h: 0,
        pad_w: 0,
    };

    for strategy in 1..=4u8 {
        let manifest = NetworkManifest {
            layers: vec![
                LayerSpec {
                    ir: "conv.json".into(),
                    strategy: Some(strategy),
                },
                LayerSpec {
                    ir: "fc.json".into(),
                    strategy: Some(strategy),
                },
            ],
            edges: vec![
                Edge {
                    from: EdgeSource::Tag("input".into()),
                    to: 0,
                    reshapes: vec![ReshapeStep::Im2Row(im2row_params)],
                    to_matrix: None,
                    dst_col: None,
                },
                Edge {
                    from: EdgeSource::Layer(0),
                    to: 1,
                    reshapes: vec![
                        ReshapeStep::Row2Tensor {
                            channels: 3,
                            height: 3,
                            width: 3,
                        },
                        ReshapeStep::Im2Row(Im2RowParams {
                            channels: 3,
                            height: 3,
                            width: 3,
                            kernel_h: 3,
                            kernel_w: 3,
                            stride_h: 1,
                            stride_w: 1,
                            pad_h: 0,
                            pad_w: 0,
                        }),
                    ],
                    to_matrix: None,
                    dst_col: None,
                },
            ],
            input_shape: vec![1, 2, 4, 4],
            output: 1,
        };
        let compiled = compile_network(&manifest, &cfg, dir.path()).unwrap();
        for seed in 0..10 {
            let mut rng = SplitMix64::new(seed);
            let input = random_tensor(&mut rng, 2, 4, 4);
            let result = run_network(&compiled, &input).unwrap();

            // Composed oracle with independent reshapes.
            let a1 = im2row_ref(&input, 2, 2);
            let out1 = eval_layer(&conv, &cfg, a1, mat_rows(&w1));
            let a2 = flatten_ref(&out1, 3, 3, 3);
            let expected = eval_layer(&fc, &cfg, a2, mat_rows(&w2));
            assert_eq!(
                result.output_rows, expected,
                "strategy {strategy} seed {seed}"
            );
        }
    }
}

/// Three layers with parallel branches: two convolutions over the same input
/// concatenate column-wise into a final GEMM layer.
pub fn branching_concat_matches_composed_oracle() {
    let cfg = VtaConfig::DESK;
    let dir = tempfile::tempdir().unwrap();
    let mut wrng = SplitMix64::new(77);
    let w0 = random_mat(&mut wrng, 8, 2);
    let w1 = random_mat(&mut wrng, 8, 3);
    let w2 = random_mat(&mut wrng, 5, 4);
    std::fs::write(dir.path().join("w0.bin"), w0.to_le_bytes()).unwrap();
    std::fs::write(dir.path().join("w1.bin"), w1.to_le_bytes()).unwrap();
    std::fs::write(dir.path().join("w2.bin"), w2.to_le_bytes()).unwrap();
    let conv0 = conv_ir("_b0", 9, 8, 2, "./w0.bin", relu_vectors(9, 2, cfg.bs));
    let conv1 = conv_ir("_b1", 9, 8, 3, "./w1.bin", relu_vectors(9, 3, cfg.bs));
    let head = gemm_ir("_head", 9, 5, 4, "./w2.bin");
    write(dir.path(), "b0.json", &conv0);
    write(dir.path(), "b1.json", &conv1);
    write(dir.path(), "head.json", &head);

    let im2row_params = Im2RowParams {
        channels: 2,
        height: 4,
        width: 4,
        kernel_h: 2,
        kernel_w: 2,
        stride_h: 1,
        stride_w: 1,
        pad_h: 0,
        pad_w: 0,
    };
    let manifest = NetworkManifest {
        layers: vec![
            LayerSpec {
                ir: "b0.json".into(),
                strategy: None,
            },
            LayerSpec {
                ir: "b1.json".into(),
                strategy: Some(2),
            },
            LayerSpec {
                ir: "head.json".into(),
                strategy: Some(3),
            },
        ],
        edges: vec![
            Edge {
                from: EdgeSource::Tag("input".into()),
                to: 0,
                reshapes: vec![ReshapeStep::Im2Row(im2row_params)],
                to_matrix: None,
                dst_col: None,
            },
            Edge {
                from: EdgeSource::Tag("input".into()),
                to: 1,
                reshapes: vec![ReshapeStep::Im2Row(im2row_params)],
                to_matrix: None,
                dst_col: None,
            },
            Edge {
                from: EdgeSource::Layer(0),
                to: 2,
                reshapes: vec![],
                to_matrix: Some("A".into()),
                dst_col: Some(0),
            },
            Edge {
                from: EdgeSource::Layer(1),
                to: 2,
                reshapes: vec![],
                to_matrix: Some("A".into()),
                dst_col: Some(2),
            },
        ],
        input_shape: vec![2, 4, 4],
        output: 2,
    };
    let compiled = compile_network(&manifest, &cfg, dir.path()).unwrap();
    for seed in 0..10 {
        let mut rng = SplitMix64::new(1000 + seed);
        let input = random_tensor(&mut rng, 2, 4, 4);
        let result = run_network(&compiled, &input).unwrap();

        let a = im2row_ref(&input, 2, 2);
        let out0 = eval_layer(&conv0, &cfg, a.clone(), mat_rows(&w0));
        let out1 = eval_layer(&conv1, &cfg, a, mat_rows(&w1));
        let concat: Rows = (0..9)
            .map(|r| {
                let mut row = out0[r].clone();
                row.extend(&out1[r]);
                row
            })
            .collect();
        let expected = eval_layer(&head, &cfg, concat, mat_rows(&w2));
        assert_eq!(result.output_rows, expected, "seed {seed}");
    }
}

/// A one-layer manifest behaves exactly like running the layer directly.
pub fn single_layer_manifest_equals_direct_run() {
    let cfg = VtaConfig::DESK;
    let dir = tempfile::tempdir().unwrap();
    let mut wrng = SplitMix64::new(5);
    let w = random_mat(&mut wrng, 8, 3);
    std::fs::write(dir.path().join("w.bin"), w.to_le_bytes()).unwrap();
    let conv = conv_ir("_solo", 9, 8, 3, "./w.bin", relu_vectors(9, 3, cfg.bs));
    write(dir.path(), "solo.json", &conv);

    let manifest = NetworkManifest {
        layers: vec![LayerSpec {
            ir: "solo.json".into(),
            strategy: None,
        }],
        edges: vec![Edge {
            from: EdgeSource::Tag("input".into()),
            to: 0,
            reshapes: vec![ReshapeStep::Im2Row(Im2RowParams {
                channels: 2,
                height: 4,
                width: 4,
                kernel_h: 2,
                kernel_w: 2,
                stride_h: 1,
                stride_w: 1,
                pad_h: 0,
                pad_w: 0,
            })],
            to_matrix: None,
            dst_col: None,
        }],
        input_shape: vec![1, 2, 4, 4],
        output: 0,
    };
    let compiled = compile_network(&manifest, &cfg, dir.path()).unwrap();
    let mut rng = SplitMix64::new(9);
    let input = random_tensor(&mut rng, 2, 4, 4);
    let via_chain = run_network(&compiled, &input).unwrap();

    // Same layer run directly over the pre-reshaped input.
    let program = parse_ir(&conv).unwrap();
    let prog = vta_core::ir::validate_shapes(&program, &cfg).unwrap();
    let direct = compile_single(prog, None).unwrap();
    let mut data = BTreeMap::new();
    data.insert("A".to_string(), Mat::from_rows(&im2row_ref(&input, 2, 2)));
    data.insert("B".to_string(), w.clone());
    let rows = execute(&direct, &data).unwrap();
    assert_eq!(via_chain.output_rows, rows);
}
