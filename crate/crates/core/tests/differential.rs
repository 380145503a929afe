//! Differential testing: every generated program, compiled under every
//! strategy, must simulate to the exact bytes the dense reference produces.

mod common;

use common::{gen_program, run_case, ProgramKind, ValueRange, ALL_KINDS};
use vta_core::ir::VtaConfig;
use vta_core::rng::SplitMix64;

fn exercise(cfg: &VtaConfig, seed: u64, cases: usize, range: ValueRange) {
    let mut rng = SplitMix64::new(seed);
    for case in 0..cases {
        let kind = ALL_KINDS[case % ALL_KINDS.len()];
        let generated = gen_program(&mut rng, cfg, kind, range, 8);
        for strategy in 1..=4 {
            let outcome = run_case(&generated.text, cfg, Some(strategy), &generated.data)
                .unwrap_or_else(|e| {
                    panic!(
                        "case {case} ({kind:?}, strategy {strategy}) failed: {e}\n{}",
                        generated.text
                    )
                });
            assert!(
                outcome.report.is_match(),
                "case {case} ({kind:?}, strategy {strategy}) diverged: {:?}\n{}",
                outcome.report.first_divergence,
                generated.text
            );
        }
    }
}

#[test]
fn desk_config_full_int32() {
    exercise(&VtaConfig::DESK, 0xd15c0, 40, ValueRange::FullInt32);
}

#[test]
fn desk_config_int8() {
    exercise(&VtaConfig::DESK, 0x1234, 40, ValueRange::Int8);
}

#[test]
fn roomy_config_bs4() {
    let cfg = VtaConfig {
        bs: 4,
        ..VtaConfig::DEFAULT
    };
    exercise(&cfg, 0xbeef, 30, ValueRange::FullInt32);
}

#[test]
fn cramped_asymmetric_config() {
    let cfg = VtaConfig {
        bs: 2,
        inp_size: 2,
        wgt_size: 3,
        acc_size: 6,
    };
    exercise(&cfg, 0xc0ffee, 30, ValueRange::Int8);
}

/// Long soak across many configs; run with `cargo test -- --ignored`.
#[test]
#[ignore]
fn soak_many_configs() {
    let configs = [
        VtaConfig::DESK,
        VtaConfig {
            bs: 2,
            inp_size: 1,
            wgt_size: 1,
            acc_size: 2,
        },
        VtaConfig {
            bs: 2,
            inp_size: 7,
            wgt_size: 2,
            acc_size: 10,
        },
        VtaConfig {
            bs: 4,
            inp_size: 3,
            wgt_size: 5,
            acc_size: 8,
        },
        VtaConfig {
            bs: 4,
            ..VtaConfig::DEFAULT
        },
        VtaConfig {
            bs: 8,
            inp_size: 2,
            wgt_size: 2,
            acc_size: 16,
        },
    ];
    for (i, cfg) in configs.iter().enumerate() {
        exercise(cfg, 0x50a0 ^ i as u64, 150, ValueRange::FullInt32);
        exercise(cfg, 0x51bb ^ i as u64, 150, ValueRange::Int8);
    }
}

#[test]
fn single_case_each_kind_smoke() {
    let mut rng = SplitMix64::new(7);
    for kind in ALL_KINDS {
        let generated = gen_program(&mut rng, &VtaConfig::DESK, kind, ValueRange::Int8, 4);
        let outcome = run_case(&generated.text, &VtaConfig::DESK, None, &generated.data)
            .unwrap_or_else(|e| panic!("{kind:?}: {e}\n{}", generated.text));
        assert!(outcome.report.is_match(), "{kind:?}: {}", generated.text);
        let _ = ProgramKind::GemmOnly;
    }
}
