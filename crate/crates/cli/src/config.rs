//! Layered configuration: command-line flag > config file > built-in default.
//!
//! A config file is TOML. Top-level keys apply to every subcommand that has a
//! field of that name; a table named after the subcommand (`[train-detector]`)
//! applies to that subcommand only and must not contain unknown keys. A run
//! record (`run.json`) is accepted as a config file too: its resolved config
//! becomes the subcommand table, which is how a recorded run is re-executed.

use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// Config-file values for one subcommand, split by layer.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct FileLayer {
    pub common: Map<String, Value>,
    pub section: Map<String, Value>,
}

fn normalize_keys(map: Map<String, Value>) -> Map<String, Value> {
    map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()
}

/// Reads the layer for `command` from a TOML config or a JSON run record.
pub fn load_file(path: &Path, command: &str) -> Result<FileLayer, UsageError> {
    let text =
        fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: String| UsageError(format!("config {}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let record: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if record.get("command").and_then(Value::as_str) != Some(command) {
            return Err(bad(format!("run record is not for `{command}`")));
        }
        let Some(Value::Object(cfg)) = record.get("config").cloned() else {
            return Err(bad("run record has no config object".into()));
        };
        return Ok(FileLayer {
            common: Map::new(),
            section: normalize_keys(cfg),
        });
    }
    let table: toml::Table = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(all) = serde_json::to_value(table).map_err(|e| bad(e.to_string()))? else {
        unreachable!("a TOML table serializes to an object");
    };
    let mut layer = FileLayer::default();
    for (k, v) in all {
        match v {
            Value::Object(section) if k.replace('_', "-") == command => layer.section = normalize_keys(section),
            // Tables for other subcommands.
            Value::Object(_) => {}
            v => {
                layer.common.insert(k.replace('-', "_"), v);
            }
        }
    }
    Ok(layer)
}

fn explicit(matches: &ArgMatches, id: &str) -> bool {
    matches!(
        matches.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

/// Overlays file values onto `parsed` wherever the flag was not given
/// explicitly. The result has every field materialized.
pub fn resolve<T: Serialize + DeserializeOwned>(
    parsed: &T,
    matches: &ArgMatches,
    file: &FileLayer,
) -> Result<T, UsageError> {
    let Value::Object(mut fields) = serde_json::to_value(parsed).map_err(|e| UsageError(e.to_string()))? else {
        unreachable!("argument structs serialize to objects");
    };
    let known: Vec<String> = fields.keys().cloned().collect();
    if let Some(k) = file.section.keys().find(|k| !known.contains(k)) {
        return Err(UsageError(format!("unknown config key `{k}`")));
    }
    let layers = file
        .common
        .iter()
        .filter(|(k, _)| known.contains(k))
        .chain(&file.section);
    for (k, v) in layers {
        if !explicit(matches, k) {
            fields.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| UsageError(format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Args, Command, FromArgMatches};
    use serde::Deserialize;

    #[derive(Debug, Args, Serialize, Deserialize, PartialEq)]
    struct Demo {
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    }

    fn parse(argv: &[&str], file: &FileLayer) -> Result<Demo, UsageError> {
        let m = Demo::augment_args(Command::new("demo")).get_matches_from(argv);
        resolve(&Demo::from_arg_matches(&m).unwrap(), &m, file)
    }

    fn layer(toml_text: &str) -> FileLayer {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, toml_text).unwrap();
        load_file(&p, "demo").unwrap()
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = layer("seed = 7\nunrelated = 1\n[demo]\nepochs = 3\n[other]\nepochs = 99\n");
        let d = parse(&["demo", "--epochs", "5"], &file).unwrap();
        assert_eq!(
            d,
            Demo {
                lr: 1e-5,
                epochs: 5,
                seed: 7
            }
        );
        let d = parse(&["demo"], &file).unwrap();
        assert_eq!(d.epochs, 3);
    }

    #[test]
    fn unknown_section_key_is_a_usage_error() {
        assert!(parse(&["demo"], &layer("[demo]\nepochz = 3\n")).is_err());
        assert!(parse(&["demo"], &layer("[demo]\nepochs = \"three\"\n")).is_err());
    }

    #[test]
    fn run_record_replays_its_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"command":"demo","config":{"lr":0.5,"epochs":2,"seed":4}}"#).unwrap();
        let d = parse(&["demo"], &load_file(&p, "demo").unwrap()).unwrap();
        assert_eq!(
            d,
            Demo {
                lr: 0.5,
                epochs: 2,
                seed: 4
            }
        );
        assert!(load_file(&p, "other").is_err());
    }
}
