//! Named ablation configurations: the nine iterated-learning variants
//! (normalization x engine reset) plus the two long-interaction baselines.

use modnet_core::il::{EeReset, PgReset, SnPolicy};

use crate::config::RunConfig;

/// The eleven presets, in table order. All share the default headline
/// dataset and schedule; only the ablated knobs differ.
pub fn ablation_presets() -> Vec<(&'static str, RunConfig)> {
    let base = RunConfig::default();
    let il = |ee: EeReset, pg: PgReset, sn: SnPolicy| {
        let mut c = base.clone();
        c.il_enabled = true;
        c.ee_reset = ee;
        c.pg_reset = pg;
        c.sn_policy = sn;
        c
    };
    let baseline = |sn: SnPolicy| {
        let mut c = base.clone();
        c.il_enabled = false;
        c.sn_policy = sn;
        c
    };
    use EeReset::*;
    use PgReset::*;
    use SnPolicy::*;
    vec![
        ("il_scratch", il(Scratch, Retrain, LearningPhaseOnly)),
        ("il_seeded", il(Seeded, Retrain, LearningPhaseOnly)),
        ("il_noreset", il(NoReset, Retrain, LearningPhaseOnly)),
        ("il_scratch_nosn", il(Scratch, Retrain, NoSn)),
        ("il_seeded_nosn", il(Seeded, Retrain, NoSn)),
        ("il_noreset_nosn", il(NoReset, Retrain, NoSn)),
        ("il_scratch_noretrain", il(Scratch, NoRetrain, LearningPhaseOnly)),
        ("il_seeded_noretrain", il(Seeded, NoRetrain, LearningPhaseOnly)),
        ("il_noreset_noretrain", il(NoReset, NoRetrain, LearningPhaseOnly)),
        ("baseline_fullsn", baseline(FullSn)),
        ("baseline_nosn", baseline(NoSn)),
    ]
}

pub fn preset(name: &str) -> Option<RunConfig> {
    ablation_presets().into_iter().find(|(n, _)| *n == name).map(|(_, c)| c)
}

pub fn preset_names() -> Vec<&'static str> {
    ablation_presets().into_iter().map(|(n, _)| n).collect()
}
