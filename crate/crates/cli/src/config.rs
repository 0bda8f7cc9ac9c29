//! Run configuration: one TOML file with `[data]`, `[train]`, `[eval]`,
//! `[sweep]` and `[paths]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dmg_core::data::SyntheticSpec;
use dmg_core::eval::{default_lambda_grid, EvalConfig, SweepParam};
use dmg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            param: SweepParam::LambdaO,
            values: default_lambda_grid(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    /// Dataset directory (manifest + CSVs). Defaults to `<out>/data`.
    pub data: Option<PathBuf>,
    /// Checkpoint read by `eval`. Defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepSection,
    pub paths: Paths,
}

/// The parts of a run configuration that affect results; echoed into reports.
#[derive(Serialize)]
struct Echo<'a> {
    data: &'a SyntheticSpec,
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
    sweep: &'a SweepSection,
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = RunConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.out, &mut cfg.paths.data, &mut cfg.paths.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Ok(toml::from_str(text)?)
    }

    /// `--seed` overrides both the data and the training seed.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.data.seed = s;
            self.train.seed = s;
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(Echo {
            data: &self.data,
            train: &self.train,
            eval: &self.eval,
            sweep: &self.sweep,
        })
        .expect("config serializes")
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.out.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| out.join("data"))
    }

    pub fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dmg_core::eval::InferenceMode;
    use dmg_core::train::Method;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::parse(
            r#"
            [data]
            n_per_domain = 60
            [data.split]
            test = 0.3
            train = 0.6
            val = 0.1
            [train]
            method = "aggregate"
            schedule = { kind = "constant", lr0 = 0.01 }
            [eval]
            modes = ["pred-ens", "single-mask:src1"]
            [sweep]
            param = "lambda_S"
            values = [0.0, 1.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.n_per_domain, 60);
        assert_eq!(cfg.data.split.test, 0.3);
        assert_eq!(cfg.train.method, Method::Aggregate);
        assert_eq!(cfg.eval.modes[1], InferenceMode::SingleMask("src1".into()));
        assert_eq!(cfg.sweep.param, SweepParam::LambdaS);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nlamda_o = 0.1\n").unwrap_err();
        assert!(format!("{err:#}").contains("lamda_o"), "{err:#}");
        let err = RunConfig::parse("[trian]\n").unwrap_err();
        assert!(format!("{err:#}").contains("trian"), "{err:#}");
    }

    #[test]
    fn echo_excludes_paths() {
        let mut cfg = RunConfig::default();
        cfg.paths.out = Some("/tmp/x".into());
        let echo = cfg.echo();
        assert!(echo.get("paths").is_none());
        assert!(echo.get("train").is_some());
    }

    #[test]
    fn seed_override_hits_data_and_train() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(Some(9));
        assert_eq!((cfg.data.seed, cfg.train.seed), (9, 9));
    }
}
