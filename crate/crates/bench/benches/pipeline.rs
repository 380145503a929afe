//! Criterion benchmarks over the compile pipeline and the functional
//! simulator at desk scale.

use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use vta_core::blocking::expand_bgemm;
use vta_core::ir::{parse_ir, validate_shapes, VtaConfig};
use vta_core::matrix::Mat;
use vta_core::oracle::reference_eval;
use vta_core::pipeline::{compile_single, execute};
use vta_core::rng::SplitMix64;

fn gemm_text(m: usize, k: usize, n: usize) -> String {
    format!(
        r#"{{
        "NAME": "_bench",
        "MATRICES": {{
            "A": [{m}, {k}, "input"],
            "B": [{k}, {n}, "input"],
            "C": [{m}, {n}, "output"]
        }},
        "LOAD": {{"INP": ["A"], "WGT": ["B"]}},
        "GEMM": ["C", "A", "B"],
        "ALU": {{"C": [["MAX_IMM", [[0, 1], 0, {m}]]]}},
        "STORE": {{"C": ["C"]}}
    }}"#
    )
}

fn bench_inputs(m: usize, k: usize, n: usize) -> BTreeMap<String, Mat> {
    let mut rng = SplitMix64::new(1);
    let mut data = BTreeMap::new();
    data.insert(
        "A".to_string(),
        Mat::from_vec(m, k, (0..m * k).map(|_| rng.next_i8_range()).collect()),
    );
    data.insert(
        "B".to_string(),
        Mat::from_vec(k, n, (0..k * n).map(|_| rng.next_i8_range()).collect()),
    );
    data
}

fn benches(c: &mut Criterion) {
    let cfg = VtaConfig::DESK;
    let (m, k, n) = (16, 16, 16); // 8x8x8 blocks at bs=2
    let text = gemm_text(m, k, n);
    let program = parse_ir(&text).unwrap();
    let prog = validate_shapes(&program, &cfg).unwrap();
    let data = bench_inputs(m, k, n);

    c.bench_function("expand_bgemm_16x16x16", |b| {
        b.iter(|| expand_bgemm(black_box(16), black_box(16), black_box(16)))
    });

    c.bench_function("compile_desk_8x8x8_strategy2", |b| {
        b.iter(|| compile_single(black_box(prog.clone()), Some(2)).unwrap())
    });

    let compiled = compile_single(prog.clone(), Some(2)).unwrap();
    c.bench_function("simulate_desk_8x8x8", |b| {
        b.iter(|| execute(black_box(&compiled), black_box(&data)).unwrap())
    });

    let oracle_inputs: BTreeMap<String, Vec<Vec<i32>>> =
        data.iter().map(|(k, v)| (k.clone(), v.to_rows())).collect();
    c.bench_function("reference_eval_desk_8x8x8", |b| {
        b.iter(|| reference_eval(black_box(&program), &cfg, black_box(&oracle_inputs)).unwrap())
    });
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
