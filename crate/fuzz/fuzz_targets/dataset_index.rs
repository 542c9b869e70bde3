#![no_main]

use std::path::{Component, Path};

use libfuzzer_sys::fuzz_target;
use spt_core::dataset::DatasetIndex;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(idx) = DatasetIndex::parse(text) {
        for e in &idx.samples {
            for p in [&e.image, &e.mask] {
                assert!(Path::new(p).components().all(|c| matches!(c, Component::Normal(_))));
            }
        }
    }
});
