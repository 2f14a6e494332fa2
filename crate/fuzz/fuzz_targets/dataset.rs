#![no_main]

use ctmpc_core::scenario::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = Dataset::read_from(data) else { return };
    let mut once = Vec::new();
    ds.write_to(&mut once).expect("dataset writes");
    let again = Dataset::read_from(once.as_slice()).expect("re-encoded dataset parses");
    let mut twice = Vec::new();
    again.write_to(&mut twice).expect("dataset writes");
    assert_eq!(once, twice);
});
