#![no_main]

use libfuzzer_sys::fuzz_target;
use mir_core::tensor_io::npy;

fuzz_target!(|data: &[u8]| {
    let _ = npy::decode_header(data);
    if let Ok(tensor) = npy::decode(data) {
        // Compared as bytes: NaN payloads would defeat a value comparison.
        let bytes = npy::encode(&tensor).expect("decoded tensor re-encodes");
        let again = npy::decode(&bytes).expect("re-encoded tensor decodes");
        assert_eq!(npy::encode(&again).unwrap(), bytes);
    }
});
