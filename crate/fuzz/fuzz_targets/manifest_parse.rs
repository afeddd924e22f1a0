#![no_main]

use fdct::data::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(m) = parse_manifest(data) else {
        return;
    };
    let bytes = serde_json::to_vec(&m).expect("manifest serializes");
    assert_eq!(parse_manifest(&bytes).expect("round trip"), m);
});
