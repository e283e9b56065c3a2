#![no_main]
use libfuzzer_sys::fuzz_target;
use protovit::config::{parse_config, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if parse_config(text).is_ok() {
        if let Ok(cfg) = RunConfig::resolve(Some(text), &[], None) {
            let again = RunConfig::resolve(Some(&cfg.to_text()), &[], None).expect("echoed config parses");
            assert_eq!(again.to_text(), cfg.to_text());
        }
    }
});
