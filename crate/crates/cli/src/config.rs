//! Run configuration: defaults, then an optional TOML file, then the
//! `EPISEG_SEED` environment variable, then `--set key=value` overrides,
//! then explicit flags. Unknown keys are rejected when the merged table is
//! deserialised.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::Failure;

pub const SEED_ENV: &str = "EPISEG_SEED";

/// Flag-level overrides, as dotted key paths.
#[derive(Default)]
pub struct Overrides {
    entries: Vec<(String, Value)>,
}

impl Overrides {
    pub fn put(&mut self, key: &str, value: impl Into<Value>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn put_opt<T: Into<Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.put(key, v);
        }
    }
}

/// `key=value` with a TOML literal value; anything that does not parse as
/// one is taken as a bare string.
fn parse_assignment(raw: &str) -> Result<(String, Value), Failure> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got `{raw}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Failure::Usage(format!("--set has an empty key in `{raw}`")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::Usage(format!("`{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => match raw.trim().parse::<u64>() {
            Ok(seed) => seed_value(seed).map(|_| Some(seed)),
            Err(_) => Err(Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`"))),
        },
        Err(_) => Ok(None),
    }
}

/// Seeds travel through TOML integers, which are signed 64-bit.
pub fn seed_value(seed: u64) -> Result<Value, Failure> {
    i64::try_from(seed)
        .map(Value::Integer)
        .map_err(|_| Failure::Usage(format!("seed {seed} exceeds {}", i64::MAX)))
}

/// Merges all layers into a `T`. `seed_keys` receive the environment seed.
pub fn resolve<T>(file: Option<&Path>, seed_keys: &[&str], sets: &[String], flags: Overrides) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut table = Table::try_from(T::default()).map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let file_table: Table = text
            .parse()
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        merge(&mut table, file_table);
    }
    if let Some(seed) = env_seed()? {
        for key in seed_keys {
            set_path(&mut table, key, seed_value(seed)?)?;
        }
    }
    for raw in sets {
        let (k, v) = parse_assignment(raw)?;
        set_path(&mut table, &k, v)?;
    }
    for (k, v) in flags.entries {
        set_path(&mut table, &k, v)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(format!("config: {}", e.message())))
}

/// Writes the resolved config as TOML.
pub fn write_resolved<T: Serialize>(config: &T, path: &Path) -> Result<(), Failure> {
    let text = toml::to_string(config).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        rate: f64,
        widths: Vec<i64>,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        name: String,
        seed: u64,
        inner: Inner,
    }

    #[test]
    fn set_parses_toml_literals_and_falls_back_to_strings() {
        assert_eq!(parse_assignment("a.b=3").unwrap(), ("a.b".into(), Value::Integer(3)));
        assert_eq!(parse_assignment("x=[1, 2]").unwrap().1, Value::Array(vec![1.into(), 2.into()]));
        assert_eq!(parse_assignment("x=hello").unwrap().1, Value::String("hello".into()));
        assert!(parse_assignment("novalue").is_err());
    }

    #[test]
    fn later_layers_win_and_unknown_keys_fail() {
        let mut flags = Overrides::default();
        flags.put("inner.rate", 0.5);
        let sets = vec!["inner.rate=0.25".to_string(), "inner.widths=[4, 8]".to_string()];
        let got: Outer = resolve(None, &[], &sets, flags).unwrap();
        assert_eq!(got.inner, Inner { rate: 0.5, widths: vec![4, 8] });

        let bad = vec!["inner.speed=1".to_string()];
        assert!(resolve::<Outer>(None, &[], &bad, Overrides::default()).is_err());
    }

    #[test]
    fn file_layer_merges_nested_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "name = \"run\"\n[inner]\nrate = 2.0\n").unwrap();
        let got: Outer = resolve(Some(&path), &[], &[], Overrides::default()).unwrap();
        assert_eq!(got.name, "run");
        assert_eq!(got.inner.rate, 2.0);
    }
}
