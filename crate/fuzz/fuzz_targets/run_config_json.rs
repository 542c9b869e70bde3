#![no_main]

use libfuzzer_sys::fuzz_target;
use spt_core::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::from_json(text) else { return };
    // Whatever parses must serialize to something that parses again.
    RunConfig::from_json(&cfg.to_json()).unwrap();
});
