#![no_main]
use libfuzzer_sys::fuzz_target;
use neurorecon::category::parse_taxonomy;

// Three TSV documents separated by NUL bytes; parser must never panic and
// accepted taxonomies must answer mapping queries without panicking.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut parts = text.splitn(4, '\0');
    let names = parts.next().unwrap_or("");
    let edges = parts.next().unwrap_or("");
    let classes = parts.next().unwrap_or("");
    let overrides = parts.next();
    if let Ok(tax) = parse_taxonomy(names, edges, classes, overrides) {
        for id in tax.nodes.keys().take(8) {
            let _ = tax.map_category(id);
        }
    }
});
