#![no_main]

use kesdt::harness::parse_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_csv(data, "fuzz") {
        assert!(ds.examples.iter().all(|e| e.label <= 1));
    }
});
