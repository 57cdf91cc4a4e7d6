use priorcascade::config::ExperimentConfig;

const EXAMPLE: &str = include_str!("../../../configs/example.toml");

#[test]
fn example_config_matches_desk_defaults() {
    let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg, ExperimentConfig::desk());
}

#[test]
fn commented_augment_block_parses() {
    let text = EXAMPLE.replace("# [train.augment]", "[train.augment]");
    let text = ["flip_prob", "max_rotation_deg", "crop", "max_retries"]
        .iter()
        .fold(text, |t, k| t.replace(&format!("# {k} ="), &format!("{k} =")));
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let aug = cfg.train.augment.expect("augment section");
    assert_eq!(aug.crop, Some(40));
    assert_eq!(aug.max_retries, 5);
}
