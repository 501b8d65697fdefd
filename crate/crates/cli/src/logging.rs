//! Line-delimited JSON logs on stderr.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::json;

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = json!({
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

pub fn init(level: Level) {
    let filter = level.to_level_filter();
    if log::set_boxed_logger(Box::new(JsonLogger { level: filter })).is_ok() {
        log::set_max_level(filter);
    }
}
