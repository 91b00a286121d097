#![no_main]

use kesdt::harness::{preprocess, PreprocessRules};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let rules = PreprocessRules::default();
    let tokens = preprocess(&text, &rules);
    assert!(tokens.iter().all(|t| !t.is_empty() && t.bytes().all(|b| b.is_ascii_lowercase())));
    assert_eq!(preprocess(&tokens.join(" "), &rules), tokens);
});
