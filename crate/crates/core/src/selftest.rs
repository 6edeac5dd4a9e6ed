//! End-to-end self-check: gradients, propagation against the block oracle,
//! Otsu against exhaustive scan, and trace serialization.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correction::CorrectionMode;
use crate::evaluation::otsu_threshold;
use crate::exec::Exec;
use crate::fixtures::{default_suite, read_suite, Fixture};
use crate::format;
use crate::oracle::{block_discrepancy, otsu_brute_force};
use crate::toy::{gradient_check, LossSpec, ToyConfig, ToyModel, FD_EPSILON};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
const OTSU_CASES: usize = 200;
const SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn gradients(exec: Exec) -> Result<String, String> {
    let mut worst = 0.0f64;
    for cfg in [
        ToyConfig::lxmert_mini(SEED).small(),
        ToyConfig::detr_mini(SEED).small(),
    ] {
        let name = cfg.topology.name();
        let model = ToyModel::new(cfg).map_err(|e| e.to_string())?;
        let task = model.plant_task(SEED);
        let loss = LossSpec::SingleLogit { target: task.label };
        let r = gradient_check(&model, &task.inputs, &loss, FD_EPSILON, exec)
            .map_err(|e| e.to_string())?;
        if r.max_rel_error > GRADIENT_TOLERANCE {
            return Err(format!(
                "{name}: relative error {:.3e} at (layer, head, row, col) {:?}: analytic {:e}, numeric {:e}",
                r.max_rel_error, r.worst, r.worst_values.0, r.worst_values.1
            ));
        }
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("max relative error {worst:.3e}"))
}

fn oracle(fixtures: &[Fixture], exec: Exec) -> Result<String, String> {
    let results = exec.map(fixtures, |f| -> Result<f64, String> {
        let mut worst = 0.0f64;
        for mode in CorrectionMode::ALL {
            for noise in [false, true] {
                // signed row sums can approach zero: the renormalization is
                // ill-conditioned and summation order alone exceeds the tolerance
                if noise && !mode.is_nonnegative() {
                    continue;
                }
                let d = block_discrepancy(&f.trace, mode, noise)
                    .map_err(|e| format!("{}: {e}", f.spec.name))?;
                if !(d <= ORACLE_TOLERANCE) {
                    return Err(format!(
                        "{}: mode {} noise_link {noise}: relative error {d:.3e}",
                        f.spec.name,
                        mode.name()
                    ));
                }
                worst = worst.max(d);
            }
        }
        Ok(worst)
    });
    let mut worst = 0.0f64;
    for r in results {
        worst = worst.max(r?);
    }
    Ok(format!(
        "{} traces, max relative error {worst:.3e}",
        fixtures.len()
    ))
}

fn otsu() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for case in 0..OTSU_CASES {
        let n = rng.random_range(2..200);
        let bins = rng.random_range(2..64);
        let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let got = otsu_threshold(&values, bins).ok();
        let want = otsu_brute_force(&values, bins);
        if got != want {
            return Err(format!(
                "case {case} ({n} values, {bins} bins): {got:?} != {want:?}"
            ));
        }
    }
    Ok(format!("{OTSU_CASES} random histograms"))
}

fn round_trip(fixtures: &[Fixture]) -> Result<String, String> {
    for f in fixtures {
        let bytes = format::encode(&f.trace).map_err(|e| format!("{}: {e}", f.spec.name))?;
        let back = format::decode(&bytes).map_err(|e| format!("{}: {e}", f.spec.name))?;
        if back != f.trace {
            return Err(format!("{}: decoded trace differs", f.spec.name));
        }
        let again = format::encode(&back).map_err(|e| format!("{}: {e}", f.spec.name))?;
        if again != bytes {
            return Err(format!(
                "{}: re-encoding is not byte-identical",
                f.spec.name
            ));
        }
    }
    Ok(format!("{} traces byte-identical", fixtures.len()))
}

/// Runs every check. With `fixture_dir`, the propagation and format checks run
/// on that suite (which is first loaded and verified); otherwise on the
/// default suite generated in memory.
pub fn run(fixture_dir: Option<&Path>, exec: Exec) -> SelfTestReport {
    let mut checks = Vec::new();
    let mut fixtures = Vec::new();
    let load = timed("fixtures", || {
        fixtures = match fixture_dir {
            Some(dir) => read_suite(dir).map_err(|e| e.to_string())?,
            None => default_suite(SEED)
                .iter()
                .map(|s| s.build())
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?,
        };
        let bad: Vec<String> = fixtures
            .iter()
            .filter_map(|f| {
                f.trace
                    .validate()
                    .first()
                    .map(|v| format!("{}: {v}", f.spec.name))
            })
            .collect();
        match bad.first() {
            Some(first) => Err(first.clone()),
            None => Ok(format!("{} fixtures valid", fixtures.len())),
        }
    });
    let loaded = load.passed;
    checks.push(load);
    checks.push(timed("gradient-check", || gradients(exec)));
    if loaded {
        checks.push(timed("block-oracle", || oracle(&fixtures, exec)));
        checks.push(timed("format-round-trip", || round_trip(&fixtures)));
    }
    checks.push(timed("otsu-brute-force", otsu));
    SelfTestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn in_memory_selftest_passes() {
        let r = run(None, Exec::default());
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn corrupted_fixture_names_the_check() {
        let dir = tempfile::tempdir().unwrap();
        let specs = default_suite(4);
        crate::fixtures::write_suite(dir.path(), &specs[..2]).unwrap();
        let path = dir.path().join(format!("{}.xatr", specs[1].name));
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let r = run(Some(dir.path()), Exec::default());
        assert!(!r.passed());
        let failed: Vec<_> = r.failures().map(|c| c.name).collect();
        assert_eq!(failed, ["fixtures"]);
        assert!(
            r.checks[0].detail.contains(&specs[1].name),
            "{}",
            r.checks[0].detail
        );
    }
}
