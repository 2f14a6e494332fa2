#![no_main]

use ctmpc_core::qp::QpProblem;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(qp) = QpProblem::from_toml(text) else { return };
    let once = qp.to_toml();
    let again = QpProblem::from_toml(&once).expect("re-encoded problem parses");
    assert_eq!(again.to_toml(), once);
});
