#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(trace) = overthink::trace::decode_trace(data) {
        let again = overthink::trace::encode_trace(&trace.head, &trace.samples).expect("decoded trace re-encodes");
        assert_eq!(again, data);
    }
});
