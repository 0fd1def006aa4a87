#![no_main]

use libfuzzer_sys::fuzz_target;
use mir_core::moca::{params_from_json, params_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = params_from_json(text) {
        assert_eq!(params_from_json(&params_to_json(&params)).expect("round trip"), params);
    }
});
