#![no_main]

use libfuzzer_sys::fuzz_target;
use vspcn::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ckpt.encode()).expect("re-decode");
        assert_eq!(again, ckpt);
    }
});
