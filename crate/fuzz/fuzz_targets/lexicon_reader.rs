#![no_main]

use kesdt::lexicon::{build_dictionary_from_reader, build_trie, DictionaryConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(words) = build_dictionary_from_reader(data, &DictionaryConfig::default()) {
        let trie = build_trie(&words);
        assert_eq!(trie.word_count(), words.len());
        assert!(words.iter().all(|w| trie.lookup(w)));
    }
});
