#![no_main]

use fdct::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::decode(data) else {
        return;
    };
    // compare encodings, not values: NaN payloads are legal
    let bytes = ck.encode();
    let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
    assert_eq!(again.encode(), bytes);
});
