//! Run directories: config snapshot, run log, per-cycle structures, final
//! weights, report and DOT export, each written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::graph::{export_dot, ChannelPlan, Genotype, SupernetModel, GENOTYPE_FORMAT};
use crate::search::{Report, RunLog, SearchConfig, SearchObserver};

pub const CONFIG_FORMAT: &str = "spidernet-config/1";
pub const WEIGHTS_FORMAT: &str = "spidernet-weights/1";

pub const CONFIG_FILE: &str = "config.json";
pub const RUNLOG_FILE: &str = "runlog.json";
pub const REPORT_FILE: &str = "report.json";
pub const WEIGHTS_FILE: &str = "weights_final.json";
pub const DOT_FILE: &str = "model.dot";
pub const FINAL_TAG: &str = "final";

/// Snapshot of everything a run was started with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format: String,
    pub seed: u64,
    /// "spidernet", "random-N" or "retrain".
    pub run: String,
    pub search: SearchConfig,
    pub dataset: DatasetSpec,
    /// Reference run directory for random baselines, genotype for retraining.
    pub source: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(run: impl Into<String>, search: SearchConfig, dataset: DatasetSpec, source: Option<PathBuf>) -> Self {
        RunConfig {
            format: CONFIG_FORMAT.into(),
            seed: search.seed,
            run: run.into(),
            search,
            dataset,
            source,
        }
    }
}

/// Full model state: structure, parameters, running statistics and pruners.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsCheckpoint {
    pub format: String,
    pub genotype_format: String,
    pub seed: u64,
    pub dataset: Option<DatasetSpec>,
    pub batch_size: usize,
    pub model: SupernetModel,
}

impl WeightsCheckpoint {
    pub fn new(model: SupernetModel, seed: u64, dataset: Option<DatasetSpec>, batch_size: usize) -> Self {
        WeightsCheckpoint {
            format: WEIGHTS_FORMAT.into(),
            genotype_format: GENOTYPE_FORMAT.into(),
            seed,
            dataset,
            batch_size,
            model,
        }
    }
}

fn check_format(value: &serde_json::Value, expected: &str, what: &str) -> Result<()> {
    match value.get("format").and_then(|v| v.as_str()) {
        Some(f) if f == expected => Ok(()),
        Some(other) => Err(Error::Format(format!("unsupported {what} format {other:?}"))),
        None => Err(Error::Format(format!("{what} has no format field"))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_versioned<T: DeserializeOwned>(text: &str, expected: &str, what: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    check_format(&value, expected, what)?;
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{what}: {e}")))
}

pub fn load_genotype_file(path: &Path) -> Result<Genotype> {
    Genotype::from_json(&read_text(path)?)
}

pub fn load_weights_file(path: &Path) -> Result<WeightsCheckpoint> {
    let ckpt: WeightsCheckpoint = parse_versioned(&read_text(path)?, WEIGHTS_FORMAT, "weights checkpoint")?;
    if ckpt.genotype_format != GENOTYPE_FORMAT {
        return Err(Error::Format(format!(
            "weights checkpoint holds structure format {:?}",
            ckpt.genotype_format
        )));
    }
    ckpt.model.validate()?;
    Ok(ckpt)
}

pub fn load_runlog_file(path: &Path) -> Result<RunLog> {
    RunLog::from_json(&read_text(path)?)
}

/// DOT text prefixed with a comment naming the structure format and seed.
pub fn dot_with_header(model: &SupernetModel, seed: Option<u64>) -> String {
    let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    format!("// {GENOTYPE_FORMAT} seed {seed}\n{}", export_dot(model))
}

/// DOT text of a structure file. Weights are irrelevant to the drawing, so
/// the structure is instantiated with a fixed seed.
pub fn genotype_dot(genotype: &Genotype) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SupernetModel::instantiate(genotype, ChannelPlan::Recorded, &mut rng)?;
    Ok(dot_with_header(&model, genotype.seed))
}

/// One directory per run. Existing files with the same name are replaced.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDirectory { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::io(
                &root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        Ok(RunDirectory { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn genotype_name(tag: &str) -> String {
        format!("genotype_{tag}.json")
    }

    /// Write through a temporary sibling and rename over the target.
    pub fn write_atomic(&self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        Ok(target)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_atomic(name, text.as_bytes())
    }

    pub fn save_config(&self, config: &RunConfig) -> Result<PathBuf> {
        self.write_json(CONFIG_FILE, config)
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        parse_versioned(&read_text(&self.path(CONFIG_FILE))?, CONFIG_FORMAT, "run config")
    }

    pub fn save_runlog(&self, log: &RunLog) -> Result<PathBuf> {
        self.write_json(RUNLOG_FILE, log)
    }

    pub fn load_runlog(&self) -> Result<RunLog> {
        load_runlog_file(&self.path(RUNLOG_FILE))
    }

    pub fn save_genotype(&self, tag: &str, model: &SupernetModel, seed: u64) -> Result<PathBuf> {
        self.write_json(&Self::genotype_name(tag), &model.genotype(Some(seed)))
    }

    pub fn load_genotype(&self, tag: &str) -> Result<Genotype> {
        load_genotype_file(&self.path(&Self::genotype_name(tag)))
    }

    pub fn save_weights(&self, checkpoint: &WeightsCheckpoint) -> Result<PathBuf> {
        self.write_json(WEIGHTS_FILE, checkpoint)
    }

    pub fn load_weights(&self) -> Result<WeightsCheckpoint> {
        load_weights_file(&self.path(WEIGHTS_FILE))
    }

    pub fn save_report(&self, report: &Report) -> Result<PathBuf> {
        self.write_json(REPORT_FILE, report)
    }

    pub fn load_report(&self) -> Result<Report> {
        parse_versioned(
            &read_text(&self.path(REPORT_FILE))?,
            crate::search::REPORT_FORMAT,
            "report",
        )
    }

    pub fn save_dot(&self, model: &SupernetModel, seed: u64) -> Result<PathBuf> {
        self.write_atomic(DOT_FILE, dot_with_header(model, Some(seed)).as_bytes())
    }
}

/// Writes `genotype_cycle_<k>.json` at every cycle boundary.
impl SearchObserver for RunDirectory {
    fn cycle_end(&mut self, cycle: usize, model: &SupernetModel, log: &RunLog) -> Result<()> {
        self.save_genotype(&format!("cycle_{cycle}"), model, log.seed)?;
        Ok(())
    }
}
