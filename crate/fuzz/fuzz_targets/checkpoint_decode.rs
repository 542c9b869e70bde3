#![no_main]

use libfuzzer_sys::fuzz_target;
use spt_core::checkpoint::decode;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode(data) {
        assert_eq!(ckpt.header.tensors.len(), ckpt.tensors.len());
        for (meta, t) in ckpt.header.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(meta.shape.as_slice(), t.shape());
        }
    }
});
