//! Replays the checked-in fuzz seeds, plus seeded mutations of each, through
//! the same properties the fuzz targets assert. Decoders must return errors,
//! never panic, on anything malformed.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelae::checkpoint::Checkpoint;
use skelae::data::{decode_dataset, encode_dataset, parse_ntu_skeleton, write_ntu_skeleton, BodyMode, Precision};
use skelae::evaluation::FeatureBank;
use skelae::graph::SkeletonGraph;
use skelae::training::RunMeta;

const MUTANTS_PER_SEED: usize = 400;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Truncation, bit flips, byte runs, splices and integer-field smashing.
fn mutate(input: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut v = input.to_vec();
    if v.is_empty() {
        return vec![rng.random()];
    }
    let at = rng.random_range(0..v.len());
    match rng.random_range(0..6) {
        0 => v.truncate(at),
        1 => v[at] ^= 1 << rng.random_range(0..8),
        2 => {
            let end = (at + 8).min(v.len());
            let fill = if rng.random() { 0xFF } else { 0x00 };
            v[at..end].fill(fill);
        }
        3 => {
            let n = rng.random_range(1..16);
            v.splice(at..at, (0..n).map(|_| rng.random::<u8>()));
        }
        4 => {
            let end = (at + rng.random_range(1..64)).min(v.len());
            v.drain(at..end);
        }
        _ => {
            // Text inputs: replace one token with an extreme value.
            let tokens = ["-1", "0", "1e400", "nan", "18446744073709551616", "99999999", "", "\n"];
            let token = tokens[rng.random_range(0..tokens.len())].as_bytes();
            let end = v[at..].iter().position(|b| b.is_ascii_whitespace()).map_or(v.len(), |p| at + p);
            v.splice(at..end, token.iter().copied());
        }
    }
    v
}

fn for_each_input(target: &str, mut check: impl FnMut(&[u8])) {
    for (k, (name, seed)) in seeds(target).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        check(&seed);
        for _ in 0..MUTANTS_PER_SEED {
            let mutant = mutate(&seed, &mut rng);
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mutant)));
            assert!(outcome.is_ok(), "{target}/{name}: panic on mutant {mutant:?}");
        }
    }
}

#[test]
fn ntu_skeleton_seeds_and_mutants() {
    for (name, seed) in seeds("ntu_skeleton") {
        assert!(parse_ntu_skeleton(std::str::from_utf8(&seed).unwrap(), BodyMode::All).is_ok(), "{name}");
    }
    for_each_input("ntu_skeleton", |data| {
        let Ok(text) = std::str::from_utf8(data) else { return };
        let _ = parse_ntu_skeleton(text, BodyMode::ConcatTwo);
        for mode in [BodyMode::First, BodyMode::All] {
            let Ok(seqs) = parse_ntu_skeleton(text, mode) else { continue };
            for s in &seqs {
                let written = write_ntu_skeleton(std::slice::from_ref(s)).expect("parsed body writes");
                let again = parse_ntu_skeleton(&written, BodyMode::First).expect("written body parses");
                assert_eq!(again[0].coords(), s.coords());
            }
        }
    });
}

#[test]
fn checkpoint_seeds_and_mutants() {
    for (name, seed) in seeds("checkpoint_decode") {
        let ckpt = Checkpoint::decode(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ckpt.encode(), seed, "{name}: the encoding is canonical");
        serde_json::from_str::<RunMeta>(&ckpt.meta).unwrap();
    }
    for_each_input("checkpoint_decode", |data| {
        if let Ok(ckpt) = Checkpoint::decode(data) {
            let again = Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint decodes");
            assert_eq!(again.encode(), ckpt.encode());
        }
    });
}

#[test]
fn dataset_cache_seeds_and_mutants() {
    for (name, seed) in seeds("dataset_decode") {
        decode_dataset(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for_each_input("dataset_decode", |data| {
        if let Ok(split) = decode_dataset(data) {
            let bytes = encode_dataset(&split, Precision::F64);
            assert_eq!(decode_dataset(&bytes).expect("re-encoded cache decodes"), split);
        }
    });
}

#[test]
fn feature_bank_seeds_and_mutants() {
    for (name, seed) in seeds("bank_decode") {
        let bank = FeatureBank::decode(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(bank.encode(), seed, "{name}");
    }
    for_each_input("bank_decode", |data| {
        if let Ok(bank) = FeatureBank::decode(data) {
            assert_eq!(bank.labels.len(), bank.len());
            assert_eq!(FeatureBank::decode(&bank.encode()).expect("re-encoded bank decodes").encode(), bank.encode());
        }
    });
}

#[test]
fn bone_list_seeds_and_mutants() {
    for (name, seed) in seeds("bone_list") {
        SkeletonGraph::parse_bone_list(std::str::from_utf8(&seed).unwrap(), None)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for_each_input("bone_list", |data| {
        let Ok(text) = std::str::from_utf8(data) else { return };
        if let Ok(g) = SkeletonGraph::parse_bone_list(text, None) {
            let m = g.joints();
            for row in g.laplacian().chunks(m) {
                assert_eq!(row.iter().sum::<f64>(), 0.0);
            }
            assert_eq!(g.trace(), 2.0 * g.edges().len() as f64);
        }
    });
    let huge = "0 4000000000\n";
    assert!(SkeletonGraph::parse_bone_list(huge, None).is_err(), "dense matrices are bounded");
}

#[test]
fn run_meta_seeds_and_mutants() {
    for (name, seed) in seeds("run_meta") {
        let meta: RunMeta = serde_json::from_slice(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
        meta.train.validate().unwrap();
        meta.model.block_shapes().unwrap();
    }
    for_each_input("run_meta", |data| {
        if let Ok(meta) = serde_json::from_slice::<RunMeta>(data) {
            let _ = meta.train.validate();
            let _ = meta.model.block_shapes();
            let _ = meta.model.param_count();
        }
    });
}
