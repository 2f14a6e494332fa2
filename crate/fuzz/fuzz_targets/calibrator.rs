#![no_main]

use ctmpc_core::conformal::ConformalCalibrator;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cal) = ConformalCalibrator::from_json(text) else { return };
    assert!(cal.scores().windows(2).all(|w| w[0] <= w[1]));
    let again = ConformalCalibrator::from_json(&cal.to_json()).expect("re-encoded calibrator parses");
    assert_eq!(again, cal);
    for alpha in [0.01, 0.1, 0.5] {
        let _ = cal.quantile(alpha);
    }
});
