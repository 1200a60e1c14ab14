mod common;

use chela::layer::{ChelaModel, ModelConfig, ModelInput, Params};
use chela::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use chela::train::{load_checkpoint, save_checkpoint, train_loop, Checkpoint, TaskKind, TrainConfig};

fn trained() -> Checkpoint {
    let cfg = ModelConfig::lm(2, 8, 16, 5, 11);
    let task = TaskKind::Copy.task(&cfg, None, 4, 11).unwrap();
    let tc = TrainConfig {
        steps: 3,
        batch_size: 4,
        eval_every: 3,
        eval_batches: 1,
        data_seed: 11,
        ..TrainConfig::default()
    };
    let out = train_loop(ChelaModel::new(cfg).unwrap(), &task, &tc).unwrap();
    Checkpoint {
        model: out.model,
        optim: Some(out.optim),
        rng_state: out.rng_state,
        step: out.steps_run as u64,
    }
}

#[test]
fn file_round_trip_is_bit_identical() {
    let ck = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    let input = ModelInput::tokens((0..32).map(|i| i % 5).collect(), 2, 16).unwrap();
    let a = ck.model.forward(&input).unwrap();
    let b = back.model.forward(&input).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    save_checkpoint(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&ck).unwrap());
}

#[test]
fn independent_reader_agrees_with_the_payload() {
    let ck = trained();
    let bytes = encode_checkpoint(&ck).unwrap();
    let (manifest, payload) = common::split(&bytes);
    assert_eq!(manifest["step"].as_u64(), Some(ck.step));
    assert_eq!(manifest["rng_state"].as_u64(), Some(ck.rng_state));
    let stored = common::tensors(&bytes);
    let params = ck.model.params.named();
    let optim = ck.optim.as_ref().unwrap();
    assert_eq!(stored.len(), 3 * params.len());
    let total: usize = stored.iter().map(|(_, s, _)| 4 * s.iter().product::<usize>()).sum();
    assert_eq!(total, payload.len());
    for (name, t) in &params {
        let (_, shape, vals) = stored.iter().find(|(n, _, _)| n == name).unwrap();
        assert_eq!(shape.as_slice(), t.shape(), "{name}");
        assert!(vals.iter().zip(t.data()).all(|(a, b)| *a as f64 == *b), "{name}");
    }
    for (i, (name, _)) in params.iter().enumerate() {
        let m = stored.iter().find(|(n, _, _)| *n == format!("adam.m.{name}")).unwrap();
        let v = stored.iter().find(|(n, _, _)| *n == format!("adam.v.{name}")).unwrap();
        assert!(m.2.iter().zip(optim.m[i].data()).all(|(a, b)| *a as f64 == *b));
        assert!(v.2.iter().zip(optim.v[i].data()).all(|(a, b)| *a as f64 == *b));
    }
}

#[test]
fn corrupted_files_get_specific_errors() {
    let ck = trained();
    let valid = encode_checkpoint(&ck).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, bytes, matches) in common::corruptions(&valid) {
        let path = dir.path().join("bad.ck");
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Ok(_) => panic!("{name}: accepted"),
            Err(e) => assert!(matches(&e), "{name}: wrong error {e:?}"),
        }
        assert!(decode_checkpoint(&bytes).is_err());
    }
    let missing = dir.path().join("absent.ck");
    assert!(matches!(load_checkpoint(&missing), Err(chela::ChelaError::Io { .. })));
}

#[test]
fn weights_only_checkpoint_has_no_optimizer() {
    let mut ck = trained();
    ck.optim = None;
    let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
    assert!(back.optim.is_none());
    assert_eq!(back.model, ck.model);
}
