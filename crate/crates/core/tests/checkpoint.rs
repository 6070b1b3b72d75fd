use mcrlab_core::alignment::{export_embeddings, import_embeddings, EmbeddingRow};
use mcrlab_core::autograd::LrGroup;
use mcrlab_core::config::ExperimentConfig;
use mcrlab_core::data::{generate_corpus, prepare_studies, synthetic_vocabulary, PreparedStudy, SyntheticSpec};
use mcrlab_core::encoders::Modality;
use mcrlab_core::training::{load_checkpoint, lr_at, save_checkpoint, train_until, LrSchedule, TrainState};
use ndarray::Array2;

fn tiny() -> (ExperimentConfig, Vec<PreparedStudy>) {
    let cfg = ExperimentConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        proj_dim: 8,
        proj_hidden: 16,
        vision_depth: 1,
        text_depth: 1,
        decoder_depth: 1,
        num_heads: 2,
        batch_size: 4,
        epochs: 3,
        warmup_epochs: 1,
        ..ExperimentConfig::default()
    };
    let spec = SyntheticSpec {
        n_studies: 8,
        image_size: 16,
        ..SyntheticSpec::default()
    };
    let (pairs, _) = generate_corpus(&spec).unwrap();
    let vocab = synthetic_vocabulary(&spec.catalog);
    let studies = prepare_studies(&pairs, &vocab, &cfg).unwrap();
    (cfg, studies)
}

fn no_log(_: &TrainState) -> mcrlab_core::Result<()> {
    Ok(())
}

#[test]
fn round_trip_restores_identical_forward() {
    let (cfg, studies) = tiny();
    let mut state = TrainState::new(&cfg).unwrap();
    train_until(&mut state, &studies, 1, None, no_log).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path, Some(&cfg)).unwrap();
    assert_eq!((back.step, back.epoch), (state.step, state.epoch));
    let grids: Vec<_> = studies.iter().map(|s| &s.views[0]).collect();
    let seqs: Vec<_> = studies.iter().map(|s| &s.tokens).collect();
    assert_eq!(
        state.model.embed_images(&state.store, &grids, 4).unwrap(),
        back.model.embed_images(&back.store, &grids, 4).unwrap()
    );
    assert_eq!(
        state.model.embed_reports(&state.store, &seqs, 4).unwrap(),
        back.model.embed_reports(&back.store, &seqs, 4).unwrap()
    );
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (cfg, studies) = tiny();
    let mut straight = TrainState::new(&cfg).unwrap();
    train_until(&mut straight, &studies, 2, None, no_log).unwrap();

    let mut first = TrainState::new(&cfg).unwrap();
    train_until(&mut first, &studies, 1, None, no_log).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path, Some(&cfg)).unwrap();
    train_until(&mut resumed, &studies, 2, None, no_log).unwrap();

    assert_eq!(resumed.step, straight.step);
    for (a, b) in resumed.store.values().iter().zip(straight.store.values()) {
        assert_eq!(a, b);
    }
}

#[test]
fn corrupted_file_is_rejected() {
    let (cfg, _) = tiny();
    let state = TrainState::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path, None).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path, None).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt"), None).is_err());
}

#[test]
fn config_hash_mismatch_is_rejected() {
    let (cfg, _) = tiny();
    let state = TrainState::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let other = ExperimentConfig {
        lambda_mim: 0.5,
        ..cfg.clone()
    };
    let err = load_checkpoint(&path, Some(&other)).unwrap_err().to_string();
    assert!(err.contains("hash"), "{err}");
    let loaded = load_checkpoint(&path, None).unwrap();
    assert_eq!(loaded.cfg(), &cfg);
}

#[test]
fn schedule_endpoints_are_exact() {
    let cfg = ExperimentConfig::default();
    let spe = 63;
    let s = LrSchedule::from_config(&cfg, spe);
    for group in [LrGroup::Encoder, LrGroup::Rest] {
        let peak = s.peak(group);
        assert_eq!(lr_at(0, &cfg, spe, group), 0.0);
        assert_eq!(lr_at(cfg.warmup_epochs * spe, &cfg, spe, group), peak);
        let last = lr_at(s.final_step(), &cfg, spe, group);
        assert!((last - peak / 100.0).abs() < 1e-9, "{last}");
        let mid = lr_at(cfg.warmup_epochs * spe / 2, &cfg, spe, group);
        assert!((mid - peak * 0.5).abs() < peak * 0.01);
    }
}

#[test]
fn embedding_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.25 - 1.0);
    let rows = vec![
        EmbeddingRow { study_id: "s1".into(), modality: Modality::Vision, row: 0, view: Some(0) },
        EmbeddingRow { study_id: "s1".into(), modality: Modality::Vision, row: 1, view: Some(1) },
        EmbeddingRow { study_id: "s1".into(), modality: Modality::Text, row: 2, view: None },
    ];
    let (bin, side) = (dir.path().join("e.bin"), dir.path().join("e.jsonl"));
    export_embeddings(m.view(), &rows, &bin, &side).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    assert_eq!(&bytes[..8], b"MCREMB01");
    assert_eq!(bytes.len(), 24 + 12 * 4);
    let (m2, rows2) = import_embeddings(&bin, &side).unwrap();
    assert_eq!(m2, m);
    assert_eq!(rows2, rows);
    assert!(std::fs::read_to_string(&side).unwrap().contains("\"modality\":\"vision\""));
    assert!(export_embeddings(m.view(), &rows[..2], &bin, &side).is_err());
}
