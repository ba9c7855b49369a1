#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = overthink::detectors::decode_detector(data, None) {
        let again = overthink::detectors::encode_detector(&d).expect("decoded detector re-encodes");
        assert_eq!(again, data);
        let _ = d.predict_proba(&vec![0.5; d.num_features()]);
    }
});
