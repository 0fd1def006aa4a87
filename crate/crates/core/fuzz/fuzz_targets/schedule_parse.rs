#![no_main]

use libfuzzer_sys::fuzz_target;
use mir_core::synth::{parse_schedule, SynthSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schedule) = parse_schedule(text) {
        for dim in [1, 2, 8] {
            let _ = SynthSpec::new(dim, (2, 2), 0, schedule.clone()).validate();
        }
    }
});
