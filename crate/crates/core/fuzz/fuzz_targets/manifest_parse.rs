#![no_main]

use libfuzzer_sys::fuzz_target;
use mir_core::tensor_io::RunManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunManifest::from_json_str(text) {
        let again = RunManifest::from_json_str(&m.to_json_string()).expect("serialized manifest parses");
        assert_eq!(again.layers, m.layers);
        for entry in &m.layers {
            let _ = m.layer_paths(entry.index);
        }
    }
});
