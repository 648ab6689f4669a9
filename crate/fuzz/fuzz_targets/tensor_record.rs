#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::dataio::TensorRecord;

// Split the input into (sidecar, payload) at a length-prefixed boundary and
// exercise the untrusted-bytes parser; valid records must round-trip.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let split = u16::from_le_bytes([data[0], data[1]]) as usize % (data.len() - 1);
    let (sidecar, payload) = data[2..].split_at(split.min(data.len() - 2));
    if let Ok(t) = TensorRecord::from_bytes(sidecar, payload) {
        let again = TensorRecord::from_bytes(t.sidecar_json().as_bytes(), &t.payload())
            .expect("canonical serialization must reparse");
        assert_eq!(t.shape, again.shape);
        assert_eq!(t.data.len(), again.data.len());
    }
});
