use slu_core::net::{init_params, load_checkpoint, load_checkpoint_for, load_optimizer, save_checkpoint, save_optimizer, ModelConfig, NetError, Sgd};

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = init_params(&ModelConfig::small(16, 12), "abc", 7).unwrap();
    ckpt.lineage = vec!["asr".into(), "ner".into()];
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.bit_eq(&ckpt));
    assert_eq!(back.lineage, ckpt.lineage);
    assert_eq!(back.alphabet_id, "abc");
    assert!(!dir.path().join("m.ckpt.tmp").exists());
}

#[test]
fn loading_for_another_config_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::small(16, 12);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&init_params(&cfg, "abc", 1).unwrap(), &path).unwrap();

    let mut wider = cfg.clone();
    wider.hidden += 1;
    match load_checkpoint_for(&path, &wider) {
        Err(NetError::ShapeMismatch { tensor, .. }) => assert!(tensor.starts_with("rnn.0."), "{tensor}"),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    let mut no_bn = cfg.clone();
    no_bn.batch_norm = false;
    let err = load_checkpoint_for(&path, &no_bn).unwrap_err();
    assert!(err.to_string().contains("rnn.0."), "{err}");
    assert!(load_checkpoint_for(&path, &cfg).is_ok());
}

#[test]
fn damaged_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&init_params(&ModelConfig::small(16, 5), "x", 1).unwrap(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(NetError::Checksum)));
    std::fs::write(&path, &bytes[..mid]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn optimizer_state_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_params(&ModelConfig::small(16, 5), "x", 1).unwrap();
    let mut opt = Sgd::new(0.9, Some(400.0));
    opt.set_velocity(ckpt.body.clone(), ckpt.head.clone());
    let path = dir.path().join("opt.bin");
    save_optimizer(&opt, &path).unwrap();
    assert_eq!(load_optimizer(&path).unwrap(), opt);
}
