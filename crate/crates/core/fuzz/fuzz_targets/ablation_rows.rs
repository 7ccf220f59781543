#![no_main]

use libfuzzer_sys::fuzz_target;
use vspcn::ablation::parse_rows;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_rows(text) {
        for r in rows {
            r.toggles.validate().expect("parsed rows are valid");
        }
    }
});
