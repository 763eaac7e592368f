#![no_main]

use libfuzzer_sys::fuzz_target;
use parity_lab::config::parse_config_str;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config_str(text) {
            // Anything accepted must be valid and parse again once serialized.
            cfg.validate().expect("accepted configs are valid");
            let json = serde_json::to_string(&cfg).expect("accepted configs serialize");
            parse_config_str(&json).expect("serialized configs parse");
        }
    }
});
