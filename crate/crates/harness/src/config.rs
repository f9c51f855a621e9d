//! Run configuration: a line-based `key = value` file that pins everything a
//! run depends on. A run is a pure function of the parsed config, so the
//! canonical echo is written next to every output for provenance.

use std::fmt::Write as _;

use modnet_core::ee::{EeConfig, ModuleArch};
use modnet_core::il::{EeReset, PgReset, ResetStrategy, SnPolicy, TrainerConfig};
use modnet_core::pg::PgConfig;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_seed: u64,
    /// Questions with ground-truth programs available for supervision.
    pub n_supervised: usize,
    pub arch: ModuleArch,
    /// Module width C.
    pub channels: usize,
    /// Module-embedding width.
    pub embed: usize,
    pub il_enabled: bool,
    pub ee_reset: EeReset,
    pub pg_reset: PgReset,
    pub sn_policy: SnPolicy,
    pub t_interact: usize,
    pub t_transmit: usize,
    pub t_pg: usize,
    /// 0 picks the per-reset default (250 scratch / 200 seeded / 50 no_reset).
    pub t_ee: usize,
    pub n_generations: usize,
    pub batch_size: usize,
    pub gt_per_batch: usize,
    pub pg_lr: f64,
    /// 0 picks the per-architecture default (5e-4 tensor, 1e-3 otherwise).
    pub ee_lr: f64,
    pub use_reward_baseline: bool,
    /// Mid-phase evaluation cadence; 0 evaluates at phase boundaries only.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_seed: 1,
            n_supervised: 135,
            arch: ModuleArch::TensorFilm,
            channels: 64,
            embed: 64,
            il_enabled: true,
            ee_reset: EeReset::Scratch,
            pg_reset: PgReset::Retrain,
            sn_policy: SnPolicy::LearningPhaseOnly,
            t_interact: 2000,
            t_transmit: 256_000,
            t_pg: 2000,
            t_ee: 0,
            n_generations: 20,
            batch_size: 128,
            gt_per_batch: 4,
            pg_lr: 1e-4,
            ee_lr: 0.0,
            use_reward_baseline: false,
            eval_every: 500,
            seed: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key} ({expect})")]
    BadValue { line: usize, key: String, value: String, expect: &'static str },
    #[error("{0}")]
    Invalid(String),
}

fn arch_tag(a: ModuleArch) -> &'static str {
    match a {
        ModuleArch::TensorNmn => "tensor",
        ModuleArch::VectorNmn => "vector",
        ModuleArch::TensorFilm => "tensor_film",
    }
}

fn ee_reset_tag(r: EeReset) -> &'static str {
    match r {
        EeReset::Scratch => "scratch",
        EeReset::Seeded => "seeded",
        EeReset::NoReset => "no_reset",
    }
}

fn pg_reset_tag(r: PgReset) -> &'static str {
    match r {
        PgReset::Retrain => "retrain",
        PgReset::NoRetrain => "no_retrain",
    }
}

fn sn_tag(p: SnPolicy) -> &'static str {
    match p {
        SnPolicy::LearningPhaseOnly => "learning_phase_only",
        SnPolicy::FullSn => "full_sn",
        SnPolicy::NoSn => "no_sn",
    }
}

impl RunConfig {
    /// Canonical text: every key in fixed order. `parse(echo(c)) == c`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let kv: &[(&str, String)] = &[
            ("dataset_seed", self.dataset_seed.to_string()),
            ("n_supervised", self.n_supervised.to_string()),
            ("arch", arch_tag(self.arch).into()),
            ("channels", self.channels.to_string()),
            ("embed", self.embed.to_string()),
            ("il_enabled", self.il_enabled.to_string()),
            ("ee_reset", ee_reset_tag(self.ee_reset).into()),
            ("pg_reset", pg_reset_tag(self.pg_reset).into()),
            ("sn_policy", sn_tag(self.sn_policy).into()),
            ("t_interact", self.t_interact.to_string()),
            ("t_transmit", self.t_transmit.to_string()),
            ("t_pg", self.t_pg.to_string()),
            ("t_ee", self.t_ee.to_string()),
            ("n_generations", self.n_generations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("gt_per_batch", self.gt_per_batch.to_string()),
            ("pg_lr", format!("{:e}", self.pg_lr)),
            ("ee_lr", format!("{:e}", self.ee_lr)),
            ("use_reward_baseline", self.use_reward_baseline.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Parses overrides on top of the defaults. Lines are `key = value`;
    /// blank lines and `#` comments are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line, text: raw.to_string() })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |expect: &'static str| ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                expect,
            };
            match key {
                "dataset_seed" => cfg.dataset_seed = value.parse().map_err(|_| bad("u64"))?,
                "n_supervised" => cfg.n_supervised = value.parse().map_err(|_| bad("usize"))?,
                "arch" => {
                    cfg.arch = match value {
                        "tensor" => ModuleArch::TensorNmn,
                        "vector" => ModuleArch::VectorNmn,
                        "tensor_film" => ModuleArch::TensorFilm,
                        _ => return Err(bad("tensor|vector|tensor_film")),
                    }
                }
                "channels" => cfg.channels = value.parse().map_err(|_| bad("usize"))?,
                "embed" => cfg.embed = value.parse().map_err(|_| bad("usize"))?,
                "il_enabled" => cfg.il_enabled = value.parse().map_err(|_| bad("bool"))?,
                "ee_reset" => {
                    cfg.ee_reset = match value {
                        "scratch" => EeReset::Scratch,
                        "seeded" => EeReset::Seeded,
                        "no_reset" => EeReset::NoReset,
                        _ => return Err(bad("scratch|seeded|no_reset")),
                    }
                }
                "pg_reset" => {
                    cfg.pg_reset = match value {
                        "retrain" => PgReset::Retrain,
                        "no_retrain" => PgReset::NoRetrain,
                        _ => return Err(bad("retrain|no_retrain")),
                    }
                }
                "sn_policy" => {
                    cfg.sn_policy = match value {
                        "learning_phase_only" => SnPolicy::LearningPhaseOnly,
                        "full_sn" => SnPolicy::FullSn,
                        "no_sn" => SnPolicy::NoSn,
                        _ => return Err(bad("learning_phase_only|full_sn|no_sn")),
                    }
                }
                "t_interact" => cfg.t_interact = value.parse().map_err(|_| bad("usize"))?,
                "t_transmit" => cfg.t_transmit = value.parse().map_err(|_| bad("usize"))?,
                "t_pg" => cfg.t_pg = value.parse().map_err(|_| bad("usize"))?,
                "t_ee" => cfg.t_ee = value.parse().map_err(|_| bad("usize"))?,
                "n_generations" => cfg.n_generations = value.parse().map_err(|_| bad("usize"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("usize"))?,
                "gt_per_batch" => cfg.gt_per_batch = value.parse().map_err(|_| bad("usize"))?,
                "pg_lr" => cfg.pg_lr = value.parse().map_err(|_| bad("f64"))?,
                "ee_lr" => cfg.ee_lr = value.parse().map_err(|_| bad("f64"))?,
                "use_reward_baseline" => {
                    cfg.use_reward_baseline = value.parse().map_err(|_| bad("bool"))?
                }
                "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("usize"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("u64"))?,
                _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.n_supervised > 135 {
            return fail(format!("n_supervised {} exceeds the 135 training questions", self.n_supervised));
        }
        if self.channels == 0 || self.embed == 0 {
            return fail("channels and embed must be positive".into());
        }
        if self.batch_size == 0 || self.gt_per_batch > self.batch_size {
            return fail(format!(
                "need batch_size > 0 and gt_per_batch <= batch_size, got {}/{}",
                self.gt_per_batch, self.batch_size
            ));
        }
        if self.gt_per_batch > 0 && self.n_supervised == 0 {
            return fail("gt_per_batch > 0 needs n_supervised > 0".into());
        }
        if self.n_generations == 0 || self.t_interact == 0 {
            return fail("n_generations and t_interact must be positive".into());
        }
        if self.il_enabled && (self.t_transmit == 0 || (self.pg_reset == PgReset::Retrain && self.t_pg == 0)) {
            return fail("iterated learning needs t_transmit > 0 and t_pg > 0 when retraining".into());
        }
        if self.pg_lr <= 0.0 || self.ee_lr < 0.0 {
            return fail("learning rates must be positive (ee_lr 0 = architecture default)".into());
        }
        Ok(())
    }

    pub fn strategy(&self) -> ResetStrategy {
        ResetStrategy { ee: self.ee_reset, pg: self.pg_reset, sn: self.sn_policy }
    }

    pub fn ee_config(&self) -> EeConfig {
        EeConfig { arch: self.arch, channels: self.channels, embed: self.embed, ..EeConfig::default() }
    }

    /// Expands into the trainer's config; zero-valued `t_ee` / `ee_lr` take
    /// their strategy / architecture defaults.
    pub fn to_trainer(&self) -> TrainerConfig {
        let mut tc = TrainerConfig::new(self.ee_config(), self.strategy(), self.il_enabled, self.seed);
        tc.pg = PgConfig::default();
        tc.schedule.t_interact = self.t_interact;
        tc.schedule.t_transmit = self.t_transmit;
        tc.schedule.t_pg = self.t_pg;
        if self.t_ee > 0 {
            tc.schedule.t_ee = self.t_ee;
        }
        tc.schedule.n_generations = self.n_generations;
        tc.schedule.batch_size = self.batch_size;
        tc.schedule.gt_per_batch = self.gt_per_batch;
        tc.pg_lr = self.pg_lr;
        if self.ee_lr > 0.0 {
            tc.ee_lr = self.ee_lr;
        }
        tc.use_reward_baseline = self.use_reward_baseline;
        tc.eval_every = self.eval_every;
        tc
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.echo().as_bytes())
    }
}

/// FNV-1a: stable across platforms and releases, unlike the std hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
