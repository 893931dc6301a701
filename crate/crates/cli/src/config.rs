//! Config files: TOML on disk, `key.path=value` overrides on the command line.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Parses `value` as a TOML literal, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!("override {spec:?}: {k} is not a table"),
        };
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (or starts from an empty table) and applies `overrides`.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(table)
}

pub fn decode<T: DeserializeOwned>(table: Table) -> Result<T> {
    Ok(Value::Table(table).try_into()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_type() {
        let mut t = "steps = 5\n[model]\nhidden_dim = 8\n".parse::<Table>().unwrap();
        apply_override(&mut t, "model.hidden_dim=64").unwrap();
        apply_override(&mut t, "model.attention_mode=SELF").unwrap();
        apply_override(&mut t, "adamw.beta2=0.99").unwrap();
        assert_eq!(t["model"]["hidden_dim"].as_integer(), Some(64));
        assert_eq!(t["model"]["attention_mode"].as_str(), Some("SELF"));
        assert_eq!(t["adamw"]["beta2"].as_float(), Some(0.99));
        assert!(apply_override(&mut t, "steps.x=1").is_err());
        assert!(apply_override(&mut t, "nonsense").is_err());
    }
}
