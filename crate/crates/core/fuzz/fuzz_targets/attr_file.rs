#![no_main]

use libfuzzer_sys::fuzz_target;
use vspcn::attributes::parse_attribute_vectors;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_attribute_vectors(text, None) {
        assert_eq!(m.names.len(), m.vectors.rows());
        assert!(m.vectors.all_finite());
    }
    let _ = parse_attribute_vectors(text, Some((3, 4)));
});
