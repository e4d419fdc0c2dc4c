use std::fs;
use std::path::Path;

use nlcode::backtrans::DualModel;
use nlcode::checkpoint::{self, BLOB, MANIFEST};
use nlcode::config::RunConfig;
use nlcode::tensor::{AdamState, ParamStore};
use nlcode::tokenizer::{Vocab, Vocabs};
use nlcode::transformer::TransformerConfig;
use nlcode::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocabs() -> Vocabs {
    Vocabs {
        intent: Vocab::train(&["sort the list a", "reverse list b"], 24).unwrap(),
        snippet: Vocab::train(&["sorted(a)", "b[::-1]"], 24).unwrap(),
    }
}

fn model(vocabs: &Vocabs) -> (ParamStore, DualModel, AdamState) {
    let cfg = TransformerConfig {
        num_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 12,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let dual = DualModel::new(
        &cfg,
        vocabs.intent.len(),
        vocabs.snippet.len(),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
    adam.step = 17;
    for (i, m) in adam.m.iter_mut().enumerate() {
        m.data_mut().iter_mut().for_each(|x| *x = i as f64 * 0.25);
    }
    (store, dual, adam)
}

fn save_fresh(dir: &Path) {
    let v = vocabs();
    let (store, dual, adam) = model(&v);
    checkpoint::save(dir, 42, &RunConfig::default(), &v, &dual, &store, &adam).unwrap();
}

#[test]
fn round_trip_restores_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let v = vocabs();
    let (store, dual, adam) = model(&v);
    checkpoint::save(tmp.path(), 42, &RunConfig::default(), &v, &dual, &store, &adam).unwrap();
    let ck = checkpoint::load(tmp.path()).unwrap();
    assert_eq!(ck.step, 42);
    assert_eq!(ck.adam, adam);
    assert_eq!(ck.vocabs, v);
    assert_eq!(ck.config, RunConfig::default());
    assert_eq!(ck.dual.f.config(), dual.f.config());
    for ((_, a), (_, b)) in store.iter().zip(ck.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_fresh(&a);
    checkpoint::load(&a).unwrap().save(&b).unwrap();
    for name in fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()) {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn corrupted_blob_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    save_fresh(tmp.path());
    let mut blob = fs::read(tmp.path().join(BLOB)).unwrap();
    blob[100] ^= 0x40;
    fs::write(tmp.path().join(BLOB), &blob).unwrap();
    let err = checkpoint::load(tmp.path()).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("digest")), "{err}");

    blob.truncate(blob.len() - 8);
    fs::write(tmp.path().join(BLOB), &blob).unwrap();
    assert!(matches!(checkpoint::load(tmp.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn manifest_shape_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    save_fresh(tmp.path());
    let path = tmp.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    let line = text.lines().find(|l| l.starts_with("param F.out.b ")).unwrap().to_string();
    let bad = line.replace("shape=", "shape=1x");
    fs::write(&path, text.replace(&line, &bad)).unwrap();
    let err = checkpoint::load(tmp.path()).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("F.out.b")), "{err}");

    fs::write(&path, text.replace("d_model=8", "d_model=16")).unwrap();
    assert!(matches!(checkpoint::load(tmp.path()), Err(Error::Checkpoint(_))));
    fs::write(&path, text.replace("format_version 1", "format_version 9")).unwrap();
    assert!(matches!(checkpoint::load(tmp.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn missing_directory_names_the_path() {
    let err = checkpoint::load(Path::new("/definitely/not/here")).err().unwrap();
    assert!(err.to_string().contains("/definitely/not/here"));
    assert!(!err.is_validation());
}
