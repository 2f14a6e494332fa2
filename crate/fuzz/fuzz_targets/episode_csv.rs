#![no_main]

use ctmpc_core::simloop::EpisodeLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(log) = EpisodeLog::read_csv(data) else { return };
    let mut once = Vec::new();
    log.write_csv(&mut once).expect("episode writes");
    let again = EpisodeLog::read_csv(once.as_slice()).expect("re-encoded episode parses");
    let mut twice = Vec::new();
    again.write_csv(&mut twice).expect("episode writes");
    assert_eq!(once, twice);
});
