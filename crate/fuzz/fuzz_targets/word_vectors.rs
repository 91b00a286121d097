#![no_main]

use kesdt::embedding::EmbeddingTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = EmbeddingTable::from_reader(data) {
        for w in table.words() {
            assert_eq!(table.get(w).map(<[f32]>::len), Some(table.dim()));
        }
    }
});
