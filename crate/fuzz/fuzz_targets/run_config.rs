#![no_main]

use kesdt::cli::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml(text) {
            let _ = cfg.validate();
            if let Ok(out) = cfg.to_toml() {
                RunConfig::from_toml(&out).expect("serialized config parses");
            }
        }
    }
});
