#![no_main]

use ctmpc_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::from_toml(text) else { return };
    let once = cfg.to_toml();
    let again = RunConfig::from_toml(&once).expect("re-encoded config parses");
    assert_eq!(again.to_toml(), once);
});
