use rn_rompc::fom::{manufacture_benchmark, BenchmarkConfig, FullOrderModel};
use rn_rompc::ssm::SsmRom;
use rn_rompc::tube::{verify_prop1, TubeParams, VerifyOptions};
use rn_rompc::Execution;

fn small() -> (FullOrderModel, SsmRom) {
    manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap()
}

#[test]
fn model_based_tubes_bound_the_errors() {
    let (model, rom) = small();
    let params = TubeParams::model_based(rom.constants(), model.d_bar());
    let report = verify_prop1(&model, &rom, &params, 40, 1.0, 3, &VerifyOptions::default(), Execution::Parallel).unwrap();
    assert_eq!(report.violations(), 0);
    assert!(report.max_s_ratio() <= 1.0 && report.max_delta_ratio() <= 1.0);
    assert!(report.max_delta_ratio() > 0.0);
}

#[test]
fn understated_disturbance_bound_is_caught() {
    let (model, rom) = small();
    let mut params = TubeParams::model_based(rom.constants(), model.d_bar());
    params.d_bar *= 0.5;
    let opts = VerifyOptions { s0_max: 0.0, delta0_max: 0.0, ..Default::default() };
    let report = verify_prop1(&model, &rom, &params, 20, 1.0, 3, &opts, Execution::Parallel).unwrap();
    assert!(report.violations() > 0);
    assert!(report.max_delta_ratio() > 1.5);
}

#[test]
fn lipschitz_term_has_slack_on_the_benchmark() {
    // Errors stay small enough that the nonlinear coupling never binds.
    let (model, rom) = small();
    let mut params = TubeParams::model_based(rom.constants(), model.d_bar());
    params.l_fnl *= 0.5;
    let opts = VerifyOptions { s0_max: 0.0, delta0_max: 0.0, ..Default::default() };
    let report = verify_prop1(&model, &rom, &params, 20, 1.0, 3, &opts, Execution::Parallel).unwrap();
    assert_eq!(report.violations(), 0);
}

#[test]
fn verification_is_identical_across_execution_modes() {
    let (model, rom) = small();
    let params = TubeParams::model_based(rom.constants(), model.d_bar());
    let opts = VerifyOptions::default();
    let a = verify_prop1(&model, &rom, &params, 12, 0.5, 8, &opts, Execution::Sequential).unwrap();
    let b = verify_prop1(&model, &rom, &params, 12, 0.5, 8, &opts, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}
