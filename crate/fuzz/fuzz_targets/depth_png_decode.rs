#![no_main]

use fdct::data::png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(depth) = png::decode_depth(data) else {
        return;
    };
    let (h, w, mm) = png::decode_depth_mm(data).expect("same bytes decode");
    assert_eq!(depth.shape(), (h, w));
    assert_eq!(png::depth_to_mm(&depth), mm);
    let bytes = png::encode_depth(&depth).expect("decoded depth encodes");
    assert_eq!(png::decode_depth_mm(&bytes).expect("round trip").2, mm);
});
