#![no_main]

use libfuzzer_sys::fuzz_target;
use spt_core::pgm::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    let Ok(pgm) = decode_pgm(data) else { return };
    assert_eq!(pgm.pixels.len(), pgm.width * pgm.height);
    // Re-encoding at maxval 255 must decode to the same raster.
    if pgm.maxval == 255 {
        let again = decode_pgm(&encode_pgm(pgm.width, pgm.height, &pgm.pixels)).unwrap();
        assert_eq!(again, pgm);
    }
    let _ = pgm.to_mask();
    let image = pgm.to_image().unwrap();
    assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
});
