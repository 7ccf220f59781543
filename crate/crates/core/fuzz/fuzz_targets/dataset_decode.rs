#![no_main]

use libfuzzer_sys::fuzz_target;
use vspcn::data::GzslDataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = GzslDataset::decode(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(ds.encode(), data);
    }
});
