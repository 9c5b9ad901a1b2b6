use composer_lab_cli::config::{ConfigError, RunConfig, KEYS};

fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig, ConfigError> {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::parse(text, &o)
}

#[test]
fn empty_file_gives_documented_defaults() {
    let cfg = parse("", &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.composer.r, 8);
    assert_eq!(cfg.train.alpha, 0.75);
    assert_eq!(cfg.composer.targets, "QV");
    assert_eq!(cfg.train.weight_decay, 0.05);
    assert_eq!(cfg.train.pipeline, "context_class");
    assert_eq!(RunConfig::load(Some("default".as_ref()), &[]).unwrap(), cfg);
}

#[test]
fn overrides_apply_after_the_file() {
    let cfg = parse("[composer]\nr = 4\n", &["composer.r=16", "composer.targets=QKV", "train.lr=3e-4"]).unwrap();
    assert_eq!(cfg.composer.r, 16);
    assert_eq!(cfg.composer.targets, "QKV");
    assert_eq!(cfg.train.lr, 3e-4);
    // dotted keys in the file mean the same as tables
    assert_eq!(parse("composer.r = 16", &[]).unwrap().composer.r, 16);
}

#[test]
fn errors_name_the_exact_key() {
    let unknown = parse("[composer]\nrankk = 3\n", &[]).unwrap_err();
    assert!(matches!(&unknown, ConfigError::UnknownKey(k) if k == "composer.rankk"));
    assert!(unknown.to_string().contains("composer.rankk"));
    let typed = parse("", &["train.alpha=\"high\""]).unwrap_err();
    assert!(matches!(&typed, ConfigError::Type { key, .. } if key == "train.alpha"), "{typed}");
    let bool_key = parse("[quant]\nenabled = 3\n", &[]).unwrap_err();
    assert!(bool_key.to_string().contains("quant.enabled"));
    let attention = parse("", &["composer.attention=sideways"]).unwrap_err();
    assert!(attention.to_string().contains("composer.attention"), "{attention}");
    let bits = parse("", &["quant.w_bits=3"]).unwrap_err();
    assert!(bits.to_string().contains("quant"), "{bits}");
    let alpha = parse("", &["train.alpha=1.5"]).unwrap_err();
    assert!(matches!(alpha, ConfigError::Constraint { .. }));
    assert!(matches!(parse("", &["composer.r"]), Err(ConfigError::BadOverride(_))));
    assert!(matches!(parse("[[", &[]), Err(ConfigError::Syntax(_))));
}

#[test]
fn every_key_is_settable_and_serialization_round_trips() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml();
    assert_eq!(parse(&text, &[]).unwrap(), cfg);
    let table: toml::Table = toml::from_str(&text).unwrap();
    let mut found = Vec::new();
    for (section, v) in &table {
        match v {
            toml::Value::Table(t) => found.extend(t.keys().map(|k| format!("{section}.{k}"))),
            _ => found.push(section.clone()),
        }
    }
    found.sort();
    let mut keys: Vec<String> = KEYS.iter().map(|k| k.to_string()).collect();
    keys.sort();
    assert_eq!(found, keys);
}
