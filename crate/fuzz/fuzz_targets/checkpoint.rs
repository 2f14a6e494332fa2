#![no_main]

use ctmpc_core::ensemble::MemberNetwork;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(net) = MemberNetwork::from_json(text) else { return };
    // accepted checkpoints are valid networks and re-encode stably
    let once = net.to_json();
    let again = MemberNetwork::from_json(&once).expect("re-encoded checkpoint parses");
    assert_eq!(again.to_json(), once);
    let _ = net.memory_report();
});
