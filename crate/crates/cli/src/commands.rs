use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hetattr::evaluation::REMOVAL_FRACTIONS;
use hetattr::fixtures::{default_suite, read_suite, write_suite, Fixture, SUITE_FILE};
use hetattr::format::read_trace;
use hetattr::suite::{
    perturbation_report, random_baseline_auc, segmentation_report, Perturbed, SegmentationRow,
};
use hetattr::{
    propagate_with, selftest, AttentionTrace, CorrectionMode, Exec, PropagateOptions, SaliencyMap,
    StreamId,
};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_VERSION, TOOL};
use crate::pnm::{self, Grid};
use crate::{Command, EvalPerturbArgs, EvalSegArgs, ExplainArgs, GenFixturesArgs, SelftestArgs};

/// Files written into one output directory; the manifest goes last.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        Ok(Output {
            dir: dir.to_owned(),
            files: Vec::new(),
        })
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        pnm::write(&self.dir.join(name), bytes)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn finish(
        mut self,
        command: &Command,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
    ) -> Result<(), CliError> {
        self.files.sort();
        self.files.dedup();
        let argv = command.argv();
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool: TOOL.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: argv[0].clone(),
            argv,
            config,
            seed,
            inputs,
            output_dir: self.dir,
            outputs: self.files,
        }
        .write()
    }
}

pub fn execute(command: &Command, out: &Path) -> Result<(), CliError> {
    match command {
        Command::Explain(a) => explain(command, a, out),
        Command::GenFixtures(a) => gen_fixtures(command, a, out),
        Command::EvalSeg(a) => eval_seg(command, a, out),
        Command::EvalPerturb(a) => eval_perturb(command, a, out),
        Command::Selftest(a) => run_selftest(command, a, out),
        Command::Rerun(_) => unreachable!("resolved by the caller"),
    }
}

fn safe_name(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// The stream carrying a CLS token, else the query stream of the last layer.
fn default_stream(trace: &AttentionTrace) -> Result<StreamId, CliError> {
    trace
        .tokens
        .iter()
        .find(|t| t.cls_index.is_some())
        .map(|t| t.stream)
        .or_else(|| trace.layers.last().map(|l| l.query_stream))
        .ok_or_else(|| CliError::Validation("trace has no layers".into()))
}

fn heatmap(
    out: &mut Output,
    prefix: &str,
    map: &SaliencyMap,
    signed: bool,
    factor: usize,
) -> Result<(), CliError> {
    let Some(g) = map.grid else {
        return Ok(());
    };
    let grid = Grid {
        rows: g.rows,
        cols: g.cols,
        values: &map.scores[g.token_range()],
    };
    let base = format!("{prefix}-{}-{}", map.stream.0, safe_name(&map.label));
    if signed {
        out.bytes(&format!("{base}.ppm"), &pnm::diverging(&grid, factor))
    } else {
        out.bytes(&format!("{base}.pgm"), &pnm::grayscale(&grid, factor))
    }
}

fn explain(command: &Command, a: &ExplainArgs, dir: &Path) -> Result<(), CliError> {
    let trace = read_trace(&a.trace).map_err(|e| CliError::format(&a.trace, e))?;
    let method = a.method.method();
    if method.noise_link && !trace.tokens.iter().any(|t| t.noise_link) {
        eprintln!(
            "warning: {} flags no stream for the noise link; --noise-link has no effect",
            a.trace.display()
        );
    }
    let opts = PropagateOptions::new(method.mode).with_noise_link(method.noise_link);
    let result = propagate_with(&trace, &opts)?;
    let stream = match a.stream {
        Some(s) => StreamId(s),
        None => default_stream(&trace)?,
    };
    let meta = trace
        .token_meta(stream)
        .ok_or_else(|| CliError::Validation(format!("trace declares no {stream}")))?;
    let row = match (a.row, meta.cls_index) {
        (Some(r), _) | (None, Some(r)) => r,
        (None, None) => {
            return Err(CliError::Validation(format!(
                "{stream} has no CLS index; pass --row"
            )))
        }
    };
    let (first, second) = result.row_interpretation(stream, row)?;
    let mut totals = Vec::new();
    for id in [result.sources.0, result.sources.1] {
        if trace.token_meta(id).is_some_and(|m| m.grid.is_some()) {
            totals.push(result.patch_total_attention(id)?);
        }
    }
    let maps = [first, second];
    if let Some(bad) = maps
        .iter()
        .chain(&totals)
        .find(|m| m.scores.iter().any(|v| !v.is_finite()))
    {
        return Err(CliError::Numerical(format!(
            "non-finite attribution toward {} ({})",
            bad.stream, bad.label
        )));
    }

    let mut out = Output::create(dir)?;
    out.json(
        "saliency.json",
        &json!({
            "loss": trace.loss_descriptor,
            "method": method.name(),
            "stream": stream,
            "row": row,
            "maps": maps,
            "patch_totals": totals,
        }),
    )?;
    let signed = method.mode == CorrectionMode::Full;
    let factor = a.upsample as usize;
    for m in &maps {
        heatmap(&mut out, "saliency", m, signed, factor)?;
    }
    for m in &totals {
        heatmap(&mut out, "patch-total", m, signed, factor)?;
    }
    println!(
        "explained {stream} row {row} with {}: {} files in {}",
        method.name(),
        out.files.len(),
        dir.display()
    );
    let config = json!({
        "mode": method.mode,
        "noise_link": method.noise_link,
        "stream": stream,
        "row": row,
        "upsample": a.upsample,
    });
    out.finish(command, config, None, vec![a.trace.clone()])
}

fn gen_fixtures(command: &Command, a: &GenFixturesArgs, dir: &Path) -> Result<(), CliError> {
    let specs = default_suite(a.seed);
    let mut out = Output::create(dir)?;
    write_suite(dir, &specs)?;
    out.files.push(SUITE_FILE.into());
    for s in &specs {
        out.files.push(format!("{}.xatr", s.name));
        out.files.push(format!("{}.truth.json", s.name));
    }
    println!("wrote {} fixtures to {}", specs.len(), dir.display());
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    out.finish(
        command,
        json!({ "seed": a.seed, "fixtures": names }),
        Some(a.seed),
        vec![],
    )
}

/// Loads a fixture suite; a directory without a suite index is a validation error.
fn load_suite(dir: &Path) -> Result<Vec<Fixture>, CliError> {
    let meta = fs::metadata(dir).map_err(CliError::io(dir))?;
    if !meta.is_dir() || !dir.join(SUITE_FILE).exists() {
        return Err(CliError::Validation(format!(
            "{}: not a fixture directory (no {SUITE_FILE}); create one with gen-fixtures",
            dir.display()
        )));
    }
    Ok(read_suite(dir)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn segmentation_table(rows: &[SegmentationRow]) -> String {
    let mut s = format!(
        "{:<8} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5}\n",
        "method", "k", "AP", "AR", "AP_m", "AR_m", "AP_l", "AR_l", "gt", "pred"
    );
    for r in rows {
        let sc = &r.score;
        writeln!(
            s,
            "{:<8} {:>5} {:>7.4} {:>7.4} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5}",
            r.method,
            r.scale,
            sc.ap,
            sc.ar,
            opt(sc.ap_medium),
            opt(sc.ar_medium),
            opt(sc.ap_large),
            opt(sc.ar_large),
            sc.num_ground_truths,
            sc.num_predictions
        )
        .unwrap();
    }
    s
}

fn eval_seg(command: &Command, a: &EvalSegArgs, dir: &Path) -> Result<(), CliError> {
    if a.scales.is_empty() || a.scales.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
        return Err(CliError::Validation(format!(
            "--k needs positive finite scales, got {:?}",
            a.scales
        )));
    }
    let fixtures = load_suite(&a.fixtures)?;
    let method = a.method.method();
    let rows = segmentation_report(&fixtures, &[method], &a.scales, Exec::default())?;
    let table = segmentation_table(&rows);
    print!("{table}");

    let mut out = Output::create(dir)?;
    out.json(
        "report.json",
        &json!({ "method": method.name(), "fixtures": fixtures.len(), "rows": rows }),
    )?;
    out.bytes("report.txt", table.as_bytes())?;
    let config = json!({
        "mode": method.mode,
        "noise_link": method.noise_link,
        "k": a.scales,
    });
    out.finish(command, config, None, vec![a.fixtures.clone()])
}

fn eval_perturb(command: &Command, a: &EvalPerturbArgs, dir: &Path) -> Result<(), CliError> {
    let fixtures = load_suite(&a.fixtures)?;
    let method = a.method.method();
    let exec = Exec::default();
    let curves = perturbation_report(&fixtures, method, exec)?;
    let mut baselines = Vec::new();
    if a.baseline_draws > 0 {
        for stream in [Perturbed::Image, Perturbed::Text] {
            let chosen: Vec<Fixture> = fixtures
                .iter()
                .filter(|f| stream == Perturbed::Image || f.has_text())
                .cloned()
                .collect();
            if chosen.is_empty() {
                continue;
            }
            let auc = random_baseline_auc(&chosen, stream, a.baseline_draws, a.seed, exec)?;
            baselines.push(json!({ "stream": stream, "draws": a.baseline_draws, "auc": auc }));
        }
    }

    let mut table = format!(
        "{:<6} {:<9} {:>4} {:>7}  accuracy at",
        "stream", "polarity", "n", "AUC"
    );
    for f in REMOVAL_FRACTIONS {
        write!(table, " {f:>4.1}").unwrap();
    }
    table.push('\n');
    for c in &curves {
        let stream = serde_json::to_value(c.stream).expect("serializes");
        write!(
            table,
            "{:<6} {:<9} {:>4} {:>7.4}             ",
            stream.as_str().unwrap_or("?"),
            c.result.polarity.name(),
            c.samples,
            c.result.auc
        )
        .unwrap();
        for y in &c.result.curve {
            write!(table, " {y:>4.2}").unwrap();
        }
        table.push('\n');
    }
    for b in &baselines {
        writeln!(
            table,
            "{:<6} {:<9} {:>4} {:>7.4}",
            b["stream"].as_str().unwrap_or("?"),
            "random",
            b["draws"].as_u64().unwrap_or(0),
            b["auc"].as_f64().unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    print!("{table}");

    let mut out = Output::create(dir)?;
    out.json(
        "report.json",
        &json!({
            "method": method.name(),
            "fixtures": fixtures.len(),
            "curves": curves,
            "random_baseline": baselines,
        }),
    )?;
    out.bytes("report.txt", table.as_bytes())?;
    let config = json!({
        "mode": method.mode,
        "noise_link": method.noise_link,
        "seed": a.seed,
        "baseline_draws": a.baseline_draws,
    });
    out.finish(command, config, Some(a.seed), vec![a.fixtures.clone()])
}

fn run_selftest(command: &Command, a: &SelftestArgs, dir: &Path) -> Result<(), CliError> {
    let report = selftest::run(a.fixtures.as_deref(), Exec::default());
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {}: {} ({:.1?})", c.name, c.detail, c.elapsed);
    }
    // timings stay out of the written report so reruns are byte-identical
    let checks: Vec<_> = report
        .checks
        .iter()
        .map(|c| json!({ "name": c.name, "passed": c.passed, "detail": c.detail }))
        .collect();
    let mut out = Output::create(dir)?;
    out.json(
        "report.json",
        &json!({ "passed": report.passed(), "checks": checks }),
    )?;
    let inputs = a.fixtures.iter().cloned().collect();
    out.finish(command, json!({ "fixtures": a.fixtures }), None, inputs)?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(CliError::Numerical(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}
