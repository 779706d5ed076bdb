#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Accepted files must also convert to matrices and dictionaries.
    if let Ok(file) = sbl_doa::formats::parse_snapshot_file(text) {
        let _ = file.snapshot_sets();
        let _ = file.dictionaries();
    }
});
