#![no_main]

use fedpr::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let echoed = ExperimentConfig::from_json(&cfg.to_json()).expect("echoed config parses");
        assert_eq!(echoed, cfg);
    }
});
