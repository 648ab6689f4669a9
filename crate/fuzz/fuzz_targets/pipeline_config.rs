#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = PipelineConfig::from_toml_str(text) {
        // Anything the schema accepts must validate and re-serialize.
        cfg.validate().expect("accepted config must validate");
        let _ = toml::to_string(&cfg);
    }
});
