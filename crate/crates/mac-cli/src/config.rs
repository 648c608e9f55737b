//! Run configuration assembly: schema defaults, then an optional flat
//! `key = value` file, then command line flags, later layers winning.

use std::path::Path;

use mac::data::Schema;
use mac::model::MacConfig;
use mac::training::TrainSettings;
use mac::{Error, Result};

/// Everything a training-style command needs to know before touching data.
#[derive(Debug, Clone)]
pub struct Setup {
    pub schema: Schema,
    pub config: MacConfig,
    pub settings: TrainSettings,
}

/// Flag-level overrides shared by the training-style commands.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub h1: Option<usize>,
    pub h2: Option<usize>,
}

pub fn build_setup(
    schema: Schema,
    config_path: Option<&Path>,
    flags: FlagOverrides,
) -> Result<Setup> {
    let mut config = MacConfig::for_schema(schema);
    let mut settings = TrainSettings::default();
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        apply_file(&text, &mut config, &mut settings)?;
    }
    if let Some(h1) = flags.h1 {
        config.word_heads = h1;
    }
    if let Some(h2) = flags.h2 {
        config.doc_heads = h2;
    }
    if let Some(seed) = flags.seed {
        settings.seed = seed;
    }
    if config.use_speakers && !schema.has_speakers() {
        return Err(Error::Config(format!(
            "schema {schema} has no speaker metadata, cannot enable the speaker channel"
        )));
    }
    config.validate()?;
    validate_settings(&settings)?;
    Ok(Setup {
        schema,
        config,
        settings,
    })
}

fn validate_settings(s: &TrainSettings) -> Result<()> {
    if s.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if s.max_epochs == 0 {
        return Err(Error::Config("max_epochs must be positive".into()));
    }
    if s.folds < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    if !(s.weight_decay.is_finite() && s.weight_decay >= 0.0) {
        return Err(Error::Config("weight_decay must be non-negative".into()));
    }
    if !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
        return Err(Error::Config(
            "val_fraction must be strictly between 0 and 1".into(),
        ));
    }
    Ok(())
}

fn apply_file(text: &str, config: &mut MacConfig, settings: &mut TrainSettings) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected 'key = value', got '{line}'",
                lineno + 1
            ))
        })?;
        apply_entry(key.trim(), value.trim(), config, settings)?;
    }
    Ok(())
}

fn parse_into<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for config key '{key}'")))
}

fn apply_entry(
    key: &str,
    value: &str,
    config: &mut MacConfig,
    settings: &mut TrainSettings,
) -> Result<()> {
    match key {
        "hidden" => config.hidden = parse_into(key, value)?,
        "embed_dim" => config.embed_dim = parse_into(key, value)?,
        "speaker_dim" => config.speaker_dim = parse_into(key, value)?,
        "publisher_dim" => config.publisher_dim = parse_into(key, value)?,
        "word_heads" | "h1" => config.word_heads = parse_into(key, value)?,
        "doc_heads" | "h2" => config.doc_heads = parse_into(key, value)?,
        "word_attn_dim" => config.word_attn_dim = parse_into(key, value)?,
        "doc_attn_dim" => config.doc_attn_dim = parse_into(key, value)?,
        "claim_len" => config.claim_len = parse_into(key, value)?,
        "doc_len" => config.doc_len = parse_into(key, value)?,
        "max_docs" => config.max_docs = parse_into(key, value)?,
        "use_speakers" => config.use_speakers = parse_into(key, value)?,
        "use_publishers" => config.use_publishers = parse_into(key, value)?,
        "word_attention_mode" => config.word_attention_mode = parse_into(key, value)?,
        "doc_attention_mode" => config.doc_attention_mode = parse_into(key, value)?,
        "mlp_hidden" => config.mlp_hidden = parse_into(key, value)?,
        "mlp_inner" => config.mlp_inner = parse_into(key, value)?,
        "batch_size" => settings.batch_size = parse_into(key, value)?,
        "learning_rate" => settings.learning_rate = parse_into(key, value)?,
        "weight_decay" => settings.weight_decay = parse_into(key, value)?,
        "decoupled_decay" => settings.decoupled_decay = parse_into(key, value)?,
        "patience" => settings.patience = parse_into(key, value)?,
        "max_epochs" => settings.max_epochs = parse_into(key, value)?,
        "folds" => settings.folds = parse_into(key, value)?,
        "val_fraction" => settings.val_fraction = parse_into(key, value)?,
        "min_token_freq" => settings.min_token_freq = parse_into(key, value)?,
        "seed" => settings.seed = parse_into(key, value)?,
        other => {
            return Err(Error::Config(format!(
                "unknown config key '{other}'"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mac::model::AttentionMode;

    #[test]
    fn schema_defaults_differ() {
        let sn = build_setup(Schema::Snopes, None, FlagOverrides::default()).unwrap();
        assert_eq!(sn.config.word_heads, 5);
        assert_eq!(sn.config.doc_heads, 2);
        assert!(!sn.config.use_speakers);
        assert!(sn.config.use_publishers);
        assert_eq!(sn.config.hidden, 300);
        assert_eq!(sn.settings.batch_size, 32);
        assert_eq!(sn.settings.learning_rate, 0.001);
        assert_eq!(sn.settings.seed, 42);

        let pf = build_setup(Schema::Politifact, None, FlagOverrides::default()).unwrap();
        assert_eq!(pf.config.word_heads, 3);
        assert_eq!(pf.config.doc_heads, 1);
        assert!(pf.config.use_speakers);
    }

    #[test]
    fn file_and_flags_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\n\nhidden = 4\nh1 = 2\nword_attention_mode = mean_pool\nseed = 7\nlearning_rate = 0.01\n",
        )
        .unwrap();
        let flags = FlagOverrides {
            seed: Some(99),
            h1: None,
            h2: Some(1),
        };
        let got = build_setup(Schema::Snopes, Some(&path), flags).unwrap();
        assert_eq!(got.config.hidden, 4);
        assert_eq!(got.config.word_heads, 2); // file
        assert_eq!(got.config.doc_heads, 1); // flag beats schema default 2
        assert_eq!(got.config.word_attention_mode, AttentionMode::MeanPool);
        assert_eq!(got.settings.seed, 99); // flag beats file
        assert_eq!(got.settings.learning_rate, 0.01);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for bad in ["bogus_key = 3\n", "hidden = soup\n", "just a line\n"] {
            let path = dir.path().join("bad.conf");
            std::fs::write(&path, bad).unwrap();
            let err = build_setup(Schema::Snopes, Some(&path), FlagOverrides::default())
                .unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad:?} gave {err:?}");
        }
    }

    #[test]
    fn speaker_channel_rejected_for_snopes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "use_speakers = true\n").unwrap();
        let err =
            build_setup(Schema::Snopes, Some(&path), FlagOverrides::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // The same file is fine under the schema that has speakers.
        build_setup(Schema::Politifact, Some(&path), FlagOverrides::default()).unwrap();
    }

    #[test]
    fn degenerate_settings_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            "batch_size = 0\n",
            "max_epochs = 0\n",
            "folds = 1\n",
            "learning_rate = 0\n",
            "val_fraction = 1.0\n",
            "h1 = 0\n",
        ] {
            let path = dir.path().join("bad.conf");
            std::fs::write(&path, bad).unwrap();
            let err = build_setup(Schema::Politifact, Some(&path), FlagOverrides::default())
                .unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad:?} gave {err:?}");
        }
    }
}
