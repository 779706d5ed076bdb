#![no_main]

use libfuzzer_sys::fuzz_target;
use sbl_doa::formats::{parse_spectrum_csv, write_spectrum_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(csv) = parse_spectrum_csv(text) {
        // Whatever parses must survive a write/parse cycle bit for bit.
        let again = parse_spectrum_csv(&write_spectrum_csv("", &csv.angles_deg, &csv.values))
            .expect("written spectrum parses");
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&again.angles_deg), bits(&csv.angles_deg));
        assert_eq!(bits(&again.values), bits(&csv.values));
    }
});
