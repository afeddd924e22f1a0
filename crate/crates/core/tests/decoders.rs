//! Replays the checked-in fuzz corpus through every decoder and checks that
//! byte-level mutations of valid inputs are rejected cleanly, never by panic.

use std::path::PathBuf;

use fdct::config_file::RunConfig;
use fdct::data::{parse_manifest, png};
use fdct::model::Checkpoint;
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

fn checkpoint(data: &[u8]) -> bool {
    let Ok(ck) = Checkpoint::decode(data) else {
        return false;
    };
    let bytes = ck.encode();
    let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
    assert_eq!(again.encode(), bytes);
    true
}

fn config(data: &[u8]) -> bool {
    let Some(cfg) = std::str::from_utf8(data)
        .ok()
        .and_then(|t| RunConfig::parse(t).ok())
    else {
        return false;
    };
    let toml = cfg.to_toml();
    assert_eq!(RunConfig::parse(&toml).unwrap().to_toml(), toml);
    true
}

fn depth_png(data: &[u8]) -> bool {
    let Ok(depth) = png::decode_depth(data) else {
        return false;
    };
    let (h, w, mm) = png::decode_depth_mm(data).unwrap();
    assert_eq!(depth.shape(), (h, w));
    assert_eq!(png::depth_to_mm(&depth), mm);
    let bytes = png::encode_depth(&depth).unwrap();
    assert_eq!(png::decode_depth_mm(&bytes).unwrap().2, mm);
    true
}

fn manifest(data: &[u8]) -> bool {
    let Ok(m) = parse_manifest(data) else {
        return false;
    };
    let bytes = serde_json::to_vec(&m).unwrap();
    assert_eq!(parse_manifest(&bytes).unwrap(), m);
    true
}

type Decoder = fn(&[u8]) -> bool;

const TARGETS: &[(&str, Decoder)] = &[
    ("checkpoint_decode", checkpoint),
    ("config_parse", config),
    ("depth_png_decode", depth_png),
    ("manifest_parse", manifest),
];

#[test]
fn corpus_seeds_decode_as_named() {
    // seeds prefixed `bad_` must be rejected, the rest accepted
    for (target, decode) in TARGETS {
        for (name, bytes) in corpus(target) {
            let want = !name.starts_with("bad_");
            assert_eq!(decode(&bytes), want, "{target}/{name}");
        }
    }
}

#[test]
fn truncations_never_panic() {
    for (target, decode) in TARGETS {
        for (_, bytes) in corpus(target) {
            let step = (bytes.len() / 64).max(1);
            for n in (0..bytes.len()).step_by(step) {
                decode(&bytes[..n]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_seeds_never_panic(
        target in 0..TARGETS.len(),
        pick in any::<prop::sample::Index>(),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
    ) {
        let (name, decode) = TARGETS[target];
        let seeds = corpus(name);
        let mut bytes = seeds[pick.index(seeds.len())].1.clone();
        if !bytes.is_empty() {
            for (at, v) in flips {
                let i = at.index(bytes.len());
                bytes[i] ^= v;
            }
        }
        decode(&bytes);
    }
}
