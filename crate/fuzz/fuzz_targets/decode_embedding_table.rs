#![no_main]

use libfuzzer_sys::fuzz_target;
use overthink::trace::{decode_embedding_table, encode_embedding_table};

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = decode_embedding_table(data) {
        // Near-unit vectors are renormalized on read, so canonical bytes appear after one pass.
        let canonical = encode_embedding_table(&table).expect("decoded table re-encodes");
        let again = decode_embedding_table(&canonical).expect("canonical table decodes");
        assert_eq!(again, table);
        assert_eq!(encode_embedding_table(&again).unwrap(), canonical);
    }
});
