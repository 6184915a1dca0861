use fdgan_core::error::{Error, Result};
use fdgan_core::training::TrainConfig;
use toml::{Table, Value};

/// Applies one `dotted.key=value` assignment. The value is read as a TOML
/// literal, falling back to a bare string, so `steps=50`,
/// `model.base_channels=64` and `variant=baseline` all work.
pub fn apply_override(config: &TrainConfig, assignment: &str) -> Result<TrainConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut table: Table = toml::from_str(&config.to_toml()).map_err(|e| Error::config(e.to_string()))?;
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = &mut table;
    for p in parents {
        node = node
            .get_mut(*p)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| Error::config(format!("unknown config section {p:?} in {key:?}")))?;
    }
    if !node.contains_key(*last) {
        return Err(Error::config(format!("unknown config key {key:?}")));
    }
    node.insert(last.to_string(), value);
    TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?)
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdgan_core::variant::Variant;

    #[test]
    fn nested_and_top_level_keys_are_overridden() {
        let base = TrainConfig::default();
        let c = apply_override(&base, "model.base_channels=64").unwrap();
        assert_eq!(c.model.base_channels, 64);
        let c = apply_override(&c, "variant=baseline").unwrap();
        assert_eq!(c.variant, Variant::Baseline);
        let c = apply_override(&c, "lr_generator = 1e-3").unwrap();
        assert_eq!(c.lr_generator, 1e-3);
        assert_eq!(c.model.base_channels, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = TrainConfig::default();
        for bad in ["nope=1", "model.nope=1", "steps", "steps=abc", "model=3", ".steps=1"] {
            assert!(apply_override(&base, bad).is_err(), "{bad}");
        }
    }
}
