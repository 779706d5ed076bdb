#![no_main]

use libfuzzer_sys::fuzz_target;
use sbl_doa::formats::{apply_override, parse_override};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ov) = parse_override(text) {
        let mut doc = serde_json::json!({
            "scene": { "sources": [{ "angle_deg": 0.0, "power_db": 0.0 }], "snr_db": 0.0, "snapshots": 1 },
            "methods": [{ "method": "sbl" }],
            "runs": 1
        });
        let _ = apply_override(&mut doc, &ov);
    }
});
