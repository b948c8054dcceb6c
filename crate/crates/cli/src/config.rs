//! Run configuration file: a flat JSON object holding the training
//! settings plus the data and output paths. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use kesa_core::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

const PATH_KEYS: [&str; 6] = ["lexicon", "train", "valid", "test", "output", "classes"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Compiled lexicon TSV. Without it no auxiliary instances are drawn.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub output: PathBuf,
    /// Number of sentence classes; inferred from the labels when absent.
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunConfigFile {
    pub paths: DataPaths,
    pub training: TrainingConfig,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::parse(&text).map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        cfg.validate().map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cfg)
    }

    /// Parses without touching the filesystem. Errors carry the JSON path of
    /// the offending field.
    pub fn parse(text: &str) -> Result<Self, String> {
        let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let Value::Object(all) = value else {
            return Err("top level must be a JSON object".into());
        };
        let (paths, training): (Map<String, Value>, Map<String, Value>) =
            all.into_iter().partition(|(k, _)| PATH_KEYS.contains(&k.as_str()));
        let paths: DataPaths =
            serde_path_to_error::deserialize(Value::Object(paths)).map_err(|e| format_path_error(&e))?;
        let training: TrainingConfig =
            serde_path_to_error::deserialize(Value::Object(training)).map_err(|e| format_path_error(&e))?;
        Ok(Self { paths, training })
    }

    fn validate(&self) -> Result<(), String> {
        self.training
            .validate()
            .map_err(|e| format!("field `{}`: {}", e.field, e.reason))?;
        if self.paths.classes.is_some_and(|c| c < 2) {
            return Err("field `classes`: need at least two classes".into());
        }
        let inputs = [
            ("train", Some(&self.paths.train)),
            ("valid", Some(&self.paths.valid)),
            ("test", Some(&self.paths.test)),
            ("lexicon", self.paths.lexicon.as_ref()),
        ];
        for (field, path) in inputs {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(format!("field `{field}`: {} is not a readable file", p.display()));
                }
            }
        }
        if self.paths.output.exists() && !self.paths.output.is_dir() {
            return Err(format!(
                "field `output`: {} exists and is not a directory",
                self.paths.output.display()
            ));
        }
        Ok(())
    }
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.valid);
        fix(&mut self.test);
        fix(&mut self.output);
        if let Some(l) = self.lexicon.as_mut() {
            fix(l);
        }
    }
}

fn format_path_error(e: &serde_path_to_error::Error<serde_json::Error>) -> String {
    let path = e.path().to_string();
    if path == "." || path.is_empty() {
        e.inner().to_string()
    } else {
        format!("field `{path}`: {}", e.inner())
    }
}
