#![no_main]

use libfuzzer_sys::fuzz_target;
use vspcn::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let canon = cfg.to_text();
        let back = RunConfig::parse(&canon).expect("canonical text parses");
        assert_eq!(back.to_text(), canon);
        let _ = cfg.validate();
    }
});
