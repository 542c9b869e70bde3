#![no_main]

use libfuzzer_sys::fuzz_target;
use spt_core::PromptSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = PromptSet::from_json(text) {
        let _ = p.validate(64);
    }
});
