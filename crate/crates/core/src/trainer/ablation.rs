use std::fs;
use std::path::{Path, PathBuf};

use super::{pretrain, RunControl, TrainData};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_model, ProbeResult, Report};
use crate::model::Variant;
use crate::teacher::build_teacher;
use crate::video_data::Corpus;

/// Published full-scale numbers (C3D backbone, UCF101, Acc@1 / Acc@5 in percent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub variant: Variant,
    pub acc1: f64,
    pub acc5: f64,
}

pub const REFERENCE_ROWS: [ReferenceRow; 3] = [
    ReferenceRow { variant: Variant::Full, acc1: 80.4, acc5: 95.7 },
    ReferenceRow { variant: Variant::TaskIndependent, acc1: 79.3, acc5: 92.1 },
    ReferenceRow { variant: Variant::NoKd, acc1: 77.6, acc5: 93.7 },
];

const REFERENCE_NOTE: &str = "published full-scale trend, C3D backbone pre-trained on Kinetics-400, \
UCF101 Acc@1/Acc@5 in percent; toy columns are not expected to match";

pub type AblationRow = ProbeResult;

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub report: Report,
    /// One model checkpoint per variant, from the first seed.
    pub checkpoints: Vec<(Variant, PathBuf)>,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Train every variant for each of `config.trainer.ablation_runs` seeds
/// (`seed, seed + 1, ...`), probe each model and write the report. Variants
/// trained with the same seed share their shared-encoder initialisation.
pub fn run_ablation_suite(config: &Config, corpus: &Corpus, out_dir: &Path) -> Result<AblationReport> {
    config.validate()?;
    let teacher = build_teacher(&config.teacher)?;
    let runs = out_dir.join("runs");
    let mut results = Vec::new();
    let mut checkpoints = Vec::new();
    let base_seed = config.trainer.seed;
    for variant in Variant::ALL {
        for k in 0..config.trainer.ablation_runs as u64 {
            let seed = base_seed.wrapping_add(k);
            let mut cfg = config.clone();
            cfg.trainer.variant = variant;
            cfg.trainer.seed = seed;
            let data = TrainData {
                videos: &corpus.train,
                teacher: variant.has_kd().then_some(teacher.as_ref()),
            };
            let run_dir = runs.join(format!("{variant}_seed{seed}"));
            let outcome = pretrain(&cfg, &data, &run_dir, RunControl::default())?;
            results.push(evaluate_model(&outcome.model, &corpus.train, &corpus.test, &cfg.probe, seed)?);
            if k == 0 {
                let dest = out_dir.join(format!("{variant}.ckpt"));
                fs::copy(&outcome.checkpoint, &dest).map_err(|e| Error::io(format!("copying to {}", dest.display()), e))?;
                checkpoints.push((variant, dest));
            }
        }
    }
    let mut report = Report::from_results(&results);
    for row in &mut report.summary {
        if let Some(r) = REFERENCE_ROWS.iter().find(|r| r.variant.as_str() == row.variant) {
            row.reference_acc1 = Some(r.acc1);
            row.reference_acc5 = Some(r.acc5);
        }
    }
    report.reference_note = Some(REFERENCE_NOTE.to_string());
    let (csv, json) = emit_report(&report, out_dir)?;
    Ok(AblationReport {
        report,
        checkpoints,
        csv,
        json,
    })
}
