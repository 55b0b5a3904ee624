//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dropkan::data::{split, toy_blobs, SplitFractions};
use dropkan::experiments::{
    exp1_deviation, exp2_settings, prepare, prepare_splits, run_exp1, run_exp2, ExperimentConfig, SearchSpec,
    SettingResult,
};
use dropkan::verify::{
    pa_expectation_check, ps_expectation_check, eval_identity_check, excision_witness, gradient_check, gradient_flow_witness,
    homogeneity_witness, reference_forward, CheckOutcome,
};

const SEED: u64 = 2024;

const BUDGET_EVAL_IDENTITY: Duration = Duration::from_secs(5);
const BUDGET_PA_EXPECTATION: Duration = Duration::from_secs(10);
const BUDGET_PS_EXPECTATION: Duration = Duration::from_secs(1);
const BUDGET_GRADIENTS: Duration = Duration::from_secs(60);
const BUDGET_EXP1: Duration = Duration::from_secs(5 * 60);
const BUDGET_EXP2: Duration = Duration::from_secs(15 * 60);

const CAR_NO_DROP_MIN_TEST_ACCURACY: f64 = 0.80;
const TOY_VALID_SLACK: f64 = 0.02;

struct Verdict {
    passed: bool,
    detail: String,
}

fn car_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/car.csv")
}

fn timed(budget: Duration, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed();
    Verdict {
        passed: v.passed && elapsed < budget,
        detail: format!("{}; {:.2}s of {}s budget", v.detail, elapsed.as_secs_f64(), budget.as_secs()),
    }
}

fn from_checks(checks: &[CheckOutcome]) -> Verdict {
    Verdict {
        passed: checks.iter().all(|c| c.passed),
        detail: checks
            .iter()
            .map(|c| format!("{}={:.3e}", c.name, c.observed))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn eval_identity() -> Verdict {
    timed(BUDGET_EVAL_IDENTITY, || {
        from_checks(&[eval_identity_check(SEED, 100).unwrap()])
    })
}

fn pa_expectation() -> Verdict {
    timed(BUDGET_PA_EXPECTATION, || {
        from_checks(&[pa_expectation_check(SEED, 3..=12, &reference_forward).unwrap()])
    })
}

fn ps_expectation() -> Verdict {
    timed(BUDGET_PS_EXPECTATION, || from_checks(&[ps_expectation_check(SEED, 200, &reference_forward).unwrap()]))
}

fn witnesses() -> Verdict {
    from_checks(&[
        excision_witness(SEED).unwrap(),
        homogeneity_witness(SEED).unwrap(),
        gradient_flow_witness(SEED).unwrap(),
    ])
}

fn gradients() -> Verdict {
    timed(BUDGET_GRADIENTS, || from_checks(&gradient_check(SEED, 20).unwrap()))
}

fn exp1_car() -> Verdict {
    timed(BUDGET_EXP1, || {
        let config = ExperimentConfig {
            dataset: Some(car_path()),
            architecture: Some(vec![6, 2, 2, 1]),
            steps: 100,
            eval_every: 10,
            repeats: 5,
            passes: 5,
            seed: SEED,
            ..ExperimentConfig::default()
        };
        let rows = run_exp1(&config, &prepare(&config).unwrap()).unwrap();
        let pa = exp1_deviation(&rows, "dropkan_pa_w_scale", "no_drop").unwrap();
        let dropout = exp1_deviation(&rows, "dropout_w_scale", "no_drop").unwrap();
        Verdict {
            passed: pa < dropout,
            detail: format!("MAD dropkan_pa_w_scale={pa:.4} < dropout_w_scale={dropout:.4}"),
        }
    })
}

fn well_formed(results: &[SettingResult]) -> bool {
    let names: Vec<&str> = results.iter().map(|r| r.search.setting.name.as_str()).collect();
    let expected: Vec<String> = exp2_settings().into_iter().map(|s| s.name).collect();
    names == expected && results.iter().all(|r| r.test_accuracies.len() == 5)
}

fn exp2_smoke() -> Verdict {
    timed(BUDGET_EXP2, || {
        let base = ExperimentConfig {
            steps: 500,
            search: SearchSpec {
                evaluations: 5,
                ..SearchSpec::default()
            },
            seed: SEED,
            ..ExperimentConfig::default()
        };
        let car_config = ExperimentConfig {
            dataset: Some(car_path()),
            ..base.clone()
        };
        let car = run_exp2(&car_config, &prepare(&car_config).unwrap()).unwrap();
        let toy_data = split(&toy_blobs(200, SEED), SplitFractions::default(), SEED).unwrap();
        let toy = run_exp2(&base, &prepare_splits(&base, toy_data).unwrap()).unwrap();

        let car_no_drop = car[0].test_mean_std().0;
        let toy_no_drop = toy[0].valid_mean_std().0;
        let toy_dropkan = toy
            .iter()
            .filter(|r| r.search.setting.mode.is_dropkan())
            .map(|r| r.valid_mean_std().0)
            .fold(f64::NEG_INFINITY, f64::max);
        let (a, b, c) = (
            well_formed(&car) && well_formed(&toy),
            car_no_drop >= CAR_NO_DROP_MIN_TEST_ACCURACY,
            toy_dropkan >= toy_no_drop - TOY_VALID_SLACK,
        );
        Verdict {
            passed: a && b && c,
            detail: format!(
                "(a) five-setting tables {a}; (b) car no_drop test {car_no_drop:.4} >= {CAR_NO_DROP_MIN_TEST_ACCURACY}; \
                 (c) toy best dropkan valid {toy_dropkan:.4} >= no_drop {toy_no_drop:.4} - {TOY_VALID_SLACK}"
            ),
        }
    })
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_dropkan"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary runs");
    assert!(status.success(), "dropkan {args:?} failed");
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let car = car_path();
    let exp1_dir = tmp.path().join("exp1");
    let verify_dir = tmp.path().join("verify");
    let exp1 = [
        "exp1",
        "--dataset",
        car.to_str().unwrap(),
        "--arch",
        "6,2,2,1",
        "--steps",
        "100",
        "--eval-every",
        "10",
        "--repeats",
        "2",
        "--seed",
        "7",
        "--out",
        exp1_dir.to_str().unwrap(),
    ];
    let verify = ["verify", "--seed", "7", "--out", verify_dir.to_str().unwrap()];
    run_cli(&exp1);
    run_cli(&verify);
    let first = (snapshot(&exp1_dir), snapshot(&verify_dir));
    run_cli(&exp1);
    run_cli(&verify);
    let second = (snapshot(&exp1_dir), snapshot(&verify_dir));
    let names: Vec<&str> = first.0.iter().chain(&first.1).map(|(n, _)| n.as_str()).collect();
    Verdict {
        passed: first == second && names.contains(&"exp1.csv") && names.contains(&"verify_report.txt"),
        detail: format!("byte-identical reruns of {}", names.join(", ")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 eval-mode identity", eval_identity),
        ("2 pa exact expectation over all masks", pa_expectation),
        ("3 ps two-point expectation", ps_expectation),
        ("4 dropout pathology witnesses", witnesses),
        ("5 gradients vs finite differences", gradients),
        ("6 exp1 on car: dropkan_pa tracks no_drop better than dropout", exp1_car),
        ("7 exp2 smoke on toy and car", exp2_smoke),
        ("8 determinism of exp1 and verify", determinism),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let v = check();
        if !v.passed {
            failures += 1;
        }
        println!("{} criterion {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("{}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
