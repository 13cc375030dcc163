//! Replays the checked-in fuzz seeds through the parser entry points.

use std::fs;
use std::path::PathBuf;

use citytft::checkpoint::Checkpoint;
use citytft::dataio::{parse_buildings_str, parse_loads_str, parse_weather_str, SplitManifest};
use citytft::synthgen::SynthConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn weather_seeds() {
    for (name, data) in seeds("weather_csv") {
        assert!(parse_weather_str("fuzz", text(&data)).is_err(), "{name}");
    }
}

#[test]
fn building_seeds() {
    for (name, data) in seeds("building_csv") {
        let r = parse_buildings_str(text(&data));
        assert_eq!(r.is_ok(), name != "seed_duplicate", "{name}");
    }
}

#[test]
fn loads_seeds() {
    for (name, data) in seeds("loads_csv") {
        assert!(parse_loads_str("c", "b", text(&data)).is_err(), "{name}");
    }
}

#[test]
fn split_manifest_seeds() {
    for (name, data) in seeds("split_manifest") {
        let r = SplitManifest::from_json_str(text(&data));
        assert_eq!(r.is_ok(), name == "seed_default", "{name}");
        if let Ok(m) = r {
            assert_eq!(SplitManifest::from_json_str(&m.to_json_string()).unwrap(), m);
        }
    }
}

#[test]
fn synth_config_seeds() {
    for (name, data) in seeds("synth_config") {
        let cfg = SynthConfig::from_json_str(text(&data)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(SynthConfig::from_json_str(&cfg.to_json_string()).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("checkpoint") {
        match Checkpoint::decode(&data) {
            Ok(ck) => {
                assert!(!name.contains("truncated") && !name.contains("magic"), "{name}");
                assert_eq!(ck.encode(), data, "{name}");
                ck.to_model().unwrap();
            }
            Err(_) => assert!(name.contains("truncated") || name.contains("magic"), "{name}"),
        }
    }
}
