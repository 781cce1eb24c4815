//! Layered run configuration: defaults, then a TOML file, then `--set`
//! overrides, then `--seed`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::Failure;

/// Parses the right-hand side of `--set`. Anything that is not a TOML value
/// is taken as a bare string, so `--set model.mode=siso` works unquoted.
fn parse_value(text: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), Failure> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Failure::Usage(format!("bad key in --set `{assignment}`")));
    }
    let (last, parents) = path.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(Failure::Usage(format!(
                    "--set `{key}`: `{p}` is not a table"
                )))
            }
        };
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

/// Builds the effective configuration and its canonical TOML text.
pub fn load<T>(
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(T, String), Failure>
where
    T: DeserializeOwned + Serialize,
{
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    if let Some(seed) = seed {
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    let cfg: T = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(e.to_string()))?;
    let text = toml::to_string(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok((cfg, text))
}
