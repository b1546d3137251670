//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let f = File::open(path).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Merges `defaults`, the optional config file and the flags, in that order,
/// and deserializes the result. Errors name the offending field.
pub fn resolve<T: DeserializeOwned>(defaults: Value, file: Option<&Path>, flags: &impl Serialize) -> Result<T, CliError> {
    let mut merged = defaults;
    if let Some(path) = file {
        let v = read_json(path)?;
        if !v.is_object() {
            return Err(CliError::usage(format!("{}: config must be a JSON object", path.display())));
        }
        overlay(&mut merged, v);
    }
    let flags = serde_json::to_value(flags).map_err(|e| CliError::usage(e.to_string()))?;
    overlay(&mut merged, flags);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        CliError::usage(format!("invalid config field `{path}`: {}", e.into_inner()))
    })
}

pub fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("config types serialize")
}

/// The JSON document every command writes: the command, its resolved
/// config, the thread count and the result.
pub fn envelope(command: &str, config: &impl Serialize, result: Value) -> Value {
    let mut m = Map::new();
    m.insert("command".into(), command.into());
    m.insert("config".into(), to_value(config));
    m.insert("threads".into(), rayon::current_num_threads().into());
    m.insert("result".into(), result);
    Value::Object(m)
}

/// One-line `#` comment carrying the resolved config for CSV outputs.
pub fn csv_preamble(command: &str, config: &impl Serialize) -> String {
    let mut m = Map::new();
    m.insert("command".into(), command.into());
    m.insert("config".into(), to_value(config));
    m.insert("threads".into(), rayon::current_num_threads().into());
    format!("# {}\n", Value::Object(m))
}

pub fn write_output(path: Option<&Path>, contents: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, contents).map_err(|e| CliError::usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents)?;
            Ok(())
        }
    }
}

pub fn write_json(path: Option<&Path>, value: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    s.push('\n');
    write_output(path, s.as_bytes())
}
