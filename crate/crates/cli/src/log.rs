//! Line-oriented JSON events on stderr. Elapsed times appear only here,
//! never in written artifacts.

use std::sync::OnceLock;
use std::time::Instant;

use serde_json::{json, Value};

fn start() -> &'static Instant {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now)
}

pub fn emit(level: &str, event: &str, fields: Value) {
    let mut line = json!({ "level": level, "event": event, "elapsed_ms": start().elapsed().as_millis() as u64 });
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

pub fn info(event: &str, fields: Value) {
    emit("info", event, fields);
}

pub fn warn(event: &str, fields: Value) {
    emit("warn", event, fields);
}

pub fn init() {
    start();
}
