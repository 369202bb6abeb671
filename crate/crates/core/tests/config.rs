use m2ae::config::{RunConfig, KEYS};
use m2ae::signals::Modality;
use m2ae::training::TrainMode;
use m2ae::Error;

#[test]
fn defaults_come_from_each_module() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.model.d_enc, 64);
    assert_eq!(cfg.train.batch_size, 16);
    assert_eq!(cfg.loss.lambda, 0.1);
    assert_eq!(cfg.augment.noise_std, 0.05);
}

#[test]
fn parses_sections_comments_and_blank_lines() {
    let text = "# desk run\n\nmodel.d_enc = 32   # narrower\ntrain.mode=single_modal_ppg\nloss.tau = 0.2\n\
                augment.warp_step_std = 0.3\ndata.split_seed = 9\ntrain.mask_ratio_min = 0.2\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.model.d_enc, 32);
    assert_eq!(cfg.train.mode, TrainMode::SingleModal(Modality::Ppg));
    assert_eq!(cfg.loss.tau, 0.2);
    assert_eq!(cfg.augment.warp_step_std, 0.3);
    assert_eq!(cfg.split_seed, 9);
    assert_eq!(cfg.train.mask_ratio_range, (0.2, 0.9));
}

#[test]
fn unknown_and_repeated_keys_are_errors() {
    assert!(matches!(RunConfig::parse("model.width = 3"), Err(Error::UnknownKey(k)) if k == "model.width"));
    assert!(matches!(RunConfig::parse("seed = 3"), Err(Error::UnknownKey(_))));
    assert!(matches!(RunConfig::parse("loss.tau = 1\nloss.tau = 2"), Err(Error::InvalidValue { .. })));
    assert!(RunConfig::parse("model.d_enc").is_err());
}

#[test]
fn values_are_validated_by_their_modules() {
    for bad in [
        "model.d_enc = abc",
        "model.heads = 5",
        "train.batch_size = 1",
        "train.mask_ratio_min = 0.05",
        "loss.lambda = -0.5",
        "loss.tau = 0",
        "augment.noise_std = -1",
        "data.train_fraction = 0.9",
        "model.dropout = 1.0",
    ] {
        let err = RunConfig::parse(bad).unwrap_err();
        assert!(err.is_input_error(), "{bad}: {err}");
    }
}

#[test]
fn overrides_apply_on_top_of_the_file() {
    let mut cfg = RunConfig::default();
    cfg.apply_text("train.max_epochs = 4").unwrap();
    cfg.apply_override("train.max_epochs=7").unwrap();
    cfg.apply_override(" model.dec_width = 16 ").unwrap();
    assert_eq!((cfg.train.max_epochs, cfg.model.dec_width), (7, 16));
    assert!(cfg.apply_override("train.max_epochs").is_err());
    assert!(matches!(cfg.apply_override("nope=1"), Err(Error::UnknownKey(_))));
}

#[test]
fn text_form_round_trips_every_key() {
    let mut cfg = RunConfig::default();
    cfg.apply_text("model.d_enc = 16\ntrain.learning_rate = 0.00031\ntrain.mode = single_modal_ecg\ndata.train_fraction = 0.7\ndata.valid_fraction = 0.2").unwrap();
    let text = cfg.to_text();
    assert_eq!(text.lines().count(), KEYS.len());
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
}
