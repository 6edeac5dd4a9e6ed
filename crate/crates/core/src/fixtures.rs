//! Planted fixtures: reproducible (model, input, trace, ground truth) bundles
//! and their on-disk layout.
//!
//! A fixture directory holds `suite.json` (the ordered fixture names) and, per
//! fixture, `<name>.xatr` (the trace) plus `<name>.truth.json` (the
//! [`FixtureRecord`]). Everything is regenerated from the record's spec on
//! load; the stored trace must match the regenerated one bit for bit.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError};
use crate::toy::{LossSpec, PlantedObject, PlantedTask, ToyConfig, ToyError, ToyModel};
use crate::trace::AttentionTrace;

pub const SUITE_FILE: &str = "suite.json";
const SUITE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("fixture {name}: {source}")]
    Toy { name: String, source: ToyError },
    #[error("fixture {name}: {detail}")]
    Mismatch { name: String, detail: String },
    #[error("{0}: suite lists no fixtures")]
    Empty(PathBuf),
    #[error("{path}: unsupported suite version {version}")]
    Version { path: PathBuf, version: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// One object; loss is the object's logit.
    Single,
    /// Two objects of distinct classes; loss is their logit difference.
    Pair,
}

/// Everything needed to regenerate a fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub name: String,
    pub config: ToyConfig,
    pub plant_seed: u64,
    pub kind: PlantKind,
}

/// Ground truth stored next to each trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub spec: FixtureSpec,
    pub loss: LossSpec,
    pub label: usize,
    pub focus: usize,
    pub objects: Vec<PlantedObject>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub model: ToyModel,
    pub task: PlantedTask,
    pub loss: LossSpec,
    pub trace: AttentionTrace,
}

impl FixtureSpec {
    pub fn build(&self) -> Result<Fixture, FixtureError> {
        let toy = |source| FixtureError::Toy {
            name: self.name.clone(),
            source,
        };
        let model = ToyModel::new(self.config.clone()).map_err(toy)?;
        let (task, loss) = match self.kind {
            PlantKind::Single => {
                let t = model.plant_task(self.plant_seed);
                let loss = LossSpec::SingleLogit { target: t.label };
                (t, loss)
            }
            PlantKind::Pair => {
                let t = model.plant_pair(self.plant_seed);
                let loss = LossSpec::Difference {
                    first: t.objects[0].class,
                    second: t.objects[1].class,
                };
                (t, loss)
            }
        };
        let trace = model.make_trace(&task.inputs, &loss).map_err(toy)?;
        Ok(Fixture {
            spec: self.clone(),
            model,
            task,
            loss,
            trace,
        })
    }
}

impl Fixture {
    pub fn record(&self) -> FixtureRecord {
        FixtureRecord {
            spec: self.spec.clone(),
            loss: self.loss,
            label: self.task.label,
            focus: self.task.inputs.focus,
            objects: self.task.objects.clone(),
        }
    }
}

fn spec(
    prefix: &str,
    config: ToyConfig,
    plant_seed: u64,
    kind: PlantKind,
    i: usize,
) -> FixtureSpec {
    let kind_name = match kind {
        PlantKind::Single => "single",
        PlantKind::Pair => "pair",
    };
    FixtureSpec {
        name: format!("{prefix}-{kind_name}-{i:02}"),
        config,
        plant_seed,
        kind,
    }
}

/// Plant seeds derived from the suite seed; distinct per fixture slot.
fn plant_seed(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(slot)
}

/// The suite written by `gen-fixtures`: for each topology, four single-object
/// and two two-object fixtures on one model seeded by `seed`.
pub fn default_suite(seed: u64) -> Vec<FixtureSpec> {
    let mut out = Vec::new();
    for (prefix, config) in [
        ("lxmert", ToyConfig::lxmert_mini(seed)),
        ("detr", ToyConfig::detr_mini(seed)),
    ] {
        for i in 0..4 {
            out.push(spec(
                prefix,
                config.clone(),
                plant_seed(seed, i as u64),
                PlantKind::Single,
                i,
            ));
        }
        for i in 0..2 {
            out.push(spec(
                prefix,
                config.clone(),
                plant_seed(seed, 100 + i as u64),
                PlantKind::Pair,
                i,
            ));
        }
    }
    out
}

/// `n` single-object fixtures sharing one model.
pub fn planted_suite(config: &ToyConfig, n: usize, seed: u64) -> Vec<FixtureSpec> {
    let prefix = config.topology.name();
    (0..n)
        .map(|i| {
            spec(
                prefix,
                config.clone(),
                plant_seed(seed, i as u64),
                PlantKind::Single,
                i,
            )
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteIndex {
    version: u32,
    fixtures: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FixtureError + '_ {
    move |source| FixtureError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FixtureError> {
    let mut text = serde_json::to_string_pretty(value).expect("fixture records serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FixtureError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FixtureError::Json {
        path: path.to_owned(),
        source,
    })
}

/// Builds every spec and writes the suite into `dir` (created if missing).
/// Returns the built fixtures in suite order.
pub fn write_suite(dir: &Path, specs: &[FixtureSpec]) -> Result<Vec<Fixture>, FixtureError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut built = Vec::with_capacity(specs.len());
    for s in specs {
        let f = s.build()?;
        let trace_path = dir.join(format!("{}.xatr", s.name));
        format::write_trace(&f.trace, &trace_path).map_err(|source| FixtureError::Format {
            path: trace_path.clone(),
            source,
        })?;
        write_json(&dir.join(format!("{}.truth.json", s.name)), &f.record())?;
        built.push(f);
    }
    write_json(
        &dir.join(SUITE_FILE),
        &SuiteIndex {
            version: SUITE_VERSION,
            fixtures: specs.iter().map(|s| s.name.clone()).collect(),
        },
    )?;
    Ok(built)
}

/// Reads a suite written by [`write_suite`], checking each stored trace and
/// ground truth against its regenerated counterpart.
pub fn read_suite(dir: &Path) -> Result<Vec<Fixture>, FixtureError> {
    let index_path = dir.join(SUITE_FILE);
    let index: SuiteIndex = read_json(&index_path)?;
    if index.version != SUITE_VERSION {
        return Err(FixtureError::Version {
            path: index_path,
            version: index.version,
        });
    }
    if index.fixtures.is_empty() {
        return Err(FixtureError::Empty(dir.to_owned()));
    }
    index
        .fixtures
        .iter()
        .map(|name| read_fixture(dir, name))
        .collect()
}

fn read_fixture(dir: &Path, name: &str) -> Result<Fixture, FixtureError> {
    let record: FixtureRecord = read_json(&dir.join(format!("{name}.truth.json")))?;
    let mismatch = |detail: String| FixtureError::Mismatch {
        name: name.to_owned(),
        detail,
    };
    if record.spec.name != name {
        return Err(mismatch(format!("record is named {:?}", record.spec.name)));
    }
    let trace_path = dir.join(format!("{name}.xatr"));
    let stored = format::read_trace(&trace_path).map_err(|source| FixtureError::Format {
        path: trace_path,
        source,
    })?;
    let fixture = record.spec.build()?;
    if fixture.record() != record {
        return Err(mismatch(
            "ground truth differs from the regenerated task".into(),
        ));
    }
    if fixture.trace != stored {
        return Err(mismatch(
            "stored trace differs from the regenerated trace".into(),
        ));
    }
    Ok(fixture)
}
