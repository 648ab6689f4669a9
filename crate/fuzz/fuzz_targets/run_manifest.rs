#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::dataio::{DatasetManifest, RunManifest};

fuzz_target!(|data: &[u8]| {
    let _ = RunManifest::from_json(data);
    if let Ok(m) = DatasetManifest::from_json(data) {
        let _ = m.validate();
    }
});
