use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{LmrlError, Result};
use crate::fusion::FusionMode;
use crate::metrics::{EvalReport, F1_THRESHOLDS};
use crate::mpr::{RepresentationKind, SimilarityKind};
use crate::synthgen::{load_manifest, load_split, LabeledSequence};

use super::{evaluate, train, write_text, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Integration,
    Losses,
    Similarity,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Integration => "integration",
            Suite::Losses => "losses",
            Suite::Similarity => "similarity",
        }
    }

    /// Named configuration variants derived from `base`.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Suite::Integration => FusionMode::ALL
                .into_iter()
                .map(|mode| {
                    let mut cfg = base.clone();
                    cfg.fusion.mode = mode;
                    (mode.name().to_string(), cfg)
                })
                .collect(),
            Suite::Losses => [
                ("den", false, false, true),
                ("tri_den", false, true, true),
                ("loc_den", true, false, true),
                ("loc_tri", true, true, false),
                ("loc_tri_den", true, true, true),
            ]
            .into_iter()
            .map(|(name, loc, tri, den)| {
                let mut cfg = base.clone();
                cfg.loss.use_loc = loc;
                cfg.loss.use_tri = tri;
                cfg.loss.use_den = den;
                (name.to_string(), cfg)
            })
            .collect(),
            Suite::Similarity => [
                (
                    "tsm",
                    RepresentationKind::PlainTsm,
                    SimilarityKind::NegSqDistance,
                ),
                (
                    "sa",
                    RepresentationKind::SelfAttention,
                    SimilarityKind::Bilinear,
                ),
                (
                    "mpr_tsm",
                    RepresentationKind::MultiScale,
                    SimilarityKind::NegSqDistance,
                ),
                (
                    "lmrl",
                    RepresentationKind::MultiScale,
                    SimilarityKind::Bilinear,
                ),
            ]
            .into_iter()
            .map(|(name, rep, sim)| {
                let mut cfg = base.clone();
                cfg.mpr.representation = rep;
                cfg.mpr.similarity = sim;
                (name.to_string(), cfg)
            })
            .collect(),
        }
    }
}

impl FromStr for Suite {
    type Err = LmrlError;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::Integration, Suite::Losses, Suite::Similarity]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                LmrlError::Usage(format!(
                    "unknown suite `{s}` (expected integration, losses or similarity)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mae,obo,frame_acc,edit");
    for tau in F1_THRESHOLDS {
        write!(out, ",f1_{tau}").unwrap();
    }
    out.push('\n');
    for r in rows {
        let m = &r.report;
        write!(
            out,
            "{},{},{},{},{}",
            r.variant, m.mae, m.obo, m.frame_acc, m.edit
        )
        .unwrap();
        for tau in F1_THRESHOLDS {
            write!(out, ",{}", m.f1[&tau]).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Trains every variant of `suite` and scores its best checkpoint on `test`.
pub fn run_suite(
    suite: Suite,
    base: &RunConfig,
    train_set: &[LabeledSequence],
    val_set: &[LabeledSequence],
    test_set: &[LabeledSequence],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (variant, cfg) in suite.variants(base) {
        let outcome = train(&cfg, train_set, val_set)?;
        let store = outcome.best.restore()?;
        let report = evaluate(&store, &cfg.model(), test_set)?.report;
        rows.push(AblationRow { variant, report });
    }
    Ok(rows)
}

/// Runs a suite on the dataset at `cfg.data_dir` and writes
/// `ablation_<suite>.csv` to `cfg.out_dir`.
pub fn cmd_ablate(cfg: &RunConfig, suite: &str) -> Result<Vec<AblationRow>> {
    let suite: Suite = suite.parse()?;
    cfg.validate()?;
    let manifest = load_manifest(&cfg.data_dir)?;
    let train_set = load_split(&cfg.data_dir, &manifest, "train")?;
    let val_set = load_split(&cfg.data_dir, &manifest, "val")?;
    let test_set = load_split(&cfg.data_dir, &manifest, "test")?;
    let rows = run_suite(suite, cfg, &train_set, &val_set, &test_set)?;
    write_text(
        &cfg.out_dir.join(format!("ablation_{}.csv", suite.name())),
        &rows_csv(&rows),
    )?;
    Ok(rows)
}
