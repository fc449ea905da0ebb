//! Layered run configuration: typed defaults, then the subcommand's section
//! of an optional JSON file, then command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Sections a config file may contain, one per subcommand.
pub const SECTIONS: [&str; 10] =
    ["synth", "ingest", "features", "ate", "train-clf", "train-gen", "train-cvae", "generate", "generate-cvae", "evaluate"];

pub const SNAPSHOT: &str = "config.json";

/// Flag values keyed by their config path; unset flags are skipped.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &str, value: Option<T>) -> Result<&mut Self> {
        if let Some(v) = value {
            let mut node = &mut self.0;
            let mut keys: Vec<&str> = path.split('.').collect();
            let last = keys.pop().expect("non-empty path");
            for k in keys {
                node = node
                    .entry(k)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("override paths do not collide");
            }
            node.insert(last.to_string(), serde_json::to_value(v)?);
        }
        Ok(self)
    }

    fn has_seed(&self) -> bool {
        self.0.contains_key("seed")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn file_section(path: &Path, section: &str) -> Result<Option<Value>> {
    let src = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let root: Value = serde_json::from_str(&src).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(map) = root else { bail!("config {} must be a JSON object", path.display()) };
    if let Some(unknown) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        bail!("config {}: unknown section {unknown:?} (expected one of {})", path.display(), SECTIONS.join(", "));
    }
    match map.get(section) {
        None => Ok(None),
        Some(v @ Value::Object(_)) => Ok(Some(v.clone())),
        Some(_) => bail!("config {}: section {section:?} must be an object", path.display()),
    }
}

/// Defaults < file section < flags. A top-level `seed` missing from both the
/// file and the flags falls back to `CAM_SEED`. Unknown keys are errors.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(
    section: &str,
    file: Option<&Path>,
    flags: Overrides,
) -> Result<C> {
    let mut value = serde_json::to_value(C::default())?;
    let mut seeded = flags.has_seed();
    if let Some(path) = file {
        if let Some(over) = file_section(path, section)? {
            seeded |= over.get("seed").is_some();
            merge(&mut value, over);
        }
    }
    merge(&mut value, Value::Object(flags.0));
    if !seeded && value.get("seed").is_some() {
        if let Ok(raw) = std::env::var("CAM_SEED") {
            let seed: u64 = raw.trim().parse().with_context(|| format!("CAM_SEED={raw:?} is not an unsigned integer"))?;
            value["seed"] = Value::from(seed);
        }
    }
    serde_json::from_value(value).with_context(|| format!("invalid {section} configuration"))
}

/// Writes the resolved configuration beside a run's outputs.
pub fn write_snapshot<C: Serialize>(dir: &Path, config: &C) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(SNAPSHOT);
    fs::write(&path, serde_json::to_string_pretty(config)? + "\n").with_context(|| format!("writing {}", path.display()))
}
