#![no_main]

use libfuzzer_sys::fuzz_target;
use ncdeon::config::Settings;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(s) = Settings::from_text(text) {
        if s.validate().is_err() {
            return;
        }
        assert_eq!(Settings::from_text(&s.to_text()).unwrap(), s);
    }
});
