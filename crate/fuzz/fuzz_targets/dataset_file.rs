#![no_main]

use fedpr::dataset_file::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clients) = decode(data) {
        let bytes = encode(&clients).expect("decoded data re-encodes");
        assert_eq!(decode(&bytes).expect("re-encoded data decodes"), clients);
    }
});
