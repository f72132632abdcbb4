#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use chrono::{TimeZone, Utc};
use qarisk::pipeline::FixedClock;
use qarisk::synth::{fixture_files, FIXTURE_SEED};

/// Writes the bundled fixture into `dir`.
pub fn write_fixture(dir: &Path) {
    for (rel, content) in fixture_files(FIXTURE_SEED) {
        let path = dir.join(rel);
        std::fs::create_dir_all(path.parent().expect("relative path has a parent")).expect("mkdir");
        std::fs::write(path, content).expect("write fixture file");
    }
}

pub fn clock(hour: u32) -> FixedClock {
    FixedClock(
        Utc.with_ymd_and_hms(2024, 6, 1, hour, 0, 0)
            .single()
            .expect("valid time"),
    )
}
