//! One line per acceptance criterion; exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use trivoxel::verify::{self, CheckResult, GOLDEN_DEFAULT_MIOU, GOLDEN_TOLERANCE};

/// Runs the CLI on the shipped default config into `out`; returns the
/// prediction bytes, the reported mIoU and the wall time.
fn cli_run(out: &Path) -> Result<(Vec<u8>, f64, f64), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.conf");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_trivoxel"))
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let bytes = std::fs::read(out.join("prediction.ovl")).map_err(|e| e.to_string())?;
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).map_err(|e| e.to_string())?;
    let miou = metrics
        .lines()
        .find_map(|l| l.strip_prefix("miou = "))
        .ok_or("metrics.txt has no miou")?
        .parse::<f64>()
        .map_err(|e| e.to_string())?;
    Ok((bytes, miou, elapsed))
}

fn cli_regression() -> CheckResult {
    let start = Instant::now();
    let result = (|| -> Result<(bool, String), String> {
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        let (bytes_a, miou, time_a) = cli_run(a.path())?;
        let (bytes_b, _, time_b) = cli_run(b.path())?;
        let identical = bytes_a == bytes_b;
        let diff = (miou - GOLDEN_DEFAULT_MIOU).abs();
        let slowest = time_a.max(time_b);
        Ok((
            identical && diff <= GOLDEN_TOLERANCE && slowest < 60.0,
            format!("identical files: {identical}, miou {miou} (|diff| {diff:.2e}), slowest run {slowest:.2}s"),
        ))
    })();
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: "end-to-end regression (cli)",
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn main() {
    let start = Instant::now();
    let mut results = vec![
        verify::ssm_path_equivalence(1000),
        verify::discretization_oracle(200),
        verify::jacobian_check(100),
        verify::sparse_dense_equivalence(200),
        verify::class_map_oracle(100),
        verify::lifting_fidelity(20),
        verify::complexity_counters(),
    ];
    let mut e2e = verify::end_to_end_regression();
    let cli = cli_regression();
    e2e.passed &= cli.passed;
    e2e.detail = format!("{}; {}", e2e.detail, cli.detail);
    e2e.elapsed += cli.elapsed;
    results.push(e2e);
    results.extend([verify::metrics_oracle(200, 50), verify::scale_structure()]);
    let suite = start.elapsed().as_secs_f64();
    results[0].passed &= suite < 30.0;
    results[0].detail.push_str(&format!(", whole suite {suite:.2}s (limit 30s)"));

    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
