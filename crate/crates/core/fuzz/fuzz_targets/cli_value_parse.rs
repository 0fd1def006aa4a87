#![no_main]

use libfuzzer_sys::fuzz_target;
use mir_core::cli::{parse_layer_selection, parse_token_counts};

fuzz_target!(|data: &[u8]| {
    let input = String::from_utf8_lossy(data);
    if let Ok(layers) = parse_layer_selection(&input) {
        let mut seen = std::collections::HashSet::new();
        assert!(layers.iter().all(|l| seen.insert(*l)));
    }
    if let Ok((r, s)) = parse_token_counts(&input) {
        assert!(r >= 2 && s >= 2);
    }
});
