#![no_main]

use fdct::config_file::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::parse(text) else {
        return;
    };
    let toml = cfg.to_toml();
    let again = RunConfig::parse(&toml).expect("resolved config parses");
    assert_eq!(again.to_toml(), toml);
});
