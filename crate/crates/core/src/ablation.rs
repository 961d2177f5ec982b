//! Two-phase experiment runs and the ablation grid built on them.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cfpan::NeckKind;
use crate::datasets::{Dataset, SplitSpec};
use crate::detector::{
    evaluate, fine_tune, finetune_set, train_base, Checkpoint, DetectOptions, Detector, DetectorConfig, StepRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::gcl::{GclConfig, LossKind};

/// Base training set, pool the K-shot sets are drawn from, and test set.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub base: Dataset,
    pub pool: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub shots: usize,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub base: Checkpoint,
    pub finetuned: Vec<FinetuneRun>,
    pub num_params: usize,
    /// Largest simplex violation seen after any optimizer step.
    pub max_simplex_violation: f64,
}

impl ExperimentRun {
    pub fn novel_maps(&self, shots: usize) -> Vec<f64> {
        self.finetuned
            .iter()
            .filter(|r| r.shots == shots)
            .map(|r| r.report.novel_map.unwrap_or(0.0))
            .collect()
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// One base run with `base_seed`, then a fine-tune and evaluation for
/// every `(shots, seed)` pair. `on_step` sees every optimizer step of
/// both phases.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    config: &DetectorConfig,
    data: &ExperimentData,
    split: &SplitSpec,
    shots: &[usize],
    seeds: &[u64],
    base_seed: u64,
    opts: &DetectOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<ExperimentRun> {
    let mut worst = 0.0f64;
    let mut hook = |r: &StepRecord, _: &Detector| {
        worst = worst.max(r.simplex_violation);
        on_step(r);
        Ok(())
    };
    let base = train_base(&data.base, split, config.clone(), base_seed, &mut hook)?;
    let mut finetuned = Vec::new();
    for &k in shots {
        for &seed in seeds {
            let set = finetune_set(&data.pool, split, config.finetune_set, k, seed)?;
            let checkpoint = fine_tune(&base, &set, split, seed, &mut hook)?;
            let report = evaluate(&checkpoint, &data.test, split, Some(k), seed, opts)?;
            finetuned.push(FinetuneRun {
                shots: k,
                seed,
                checkpoint,
                report,
            });
        }
    }
    Ok(ExperimentRun {
        num_params: base.detector.num_params(),
        base,
        finetuned,
        max_simplex_violation: worst,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Neck,
    Cbam,
    Stages,
    Loss,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Neck => "neck",
            Axis::Cbam => "cbam",
            Axis::Stages => "stages",
            Axis::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "neck" => Axis::Neck,
            "cbam" => Axis::Cbam,
            "stages" => Axis::Stages,
            "loss" => Axis::Loss,
            _ => return Err(Error::Config(format!("unknown ablation axis '{s}' (expected neck, cbam, stages, loss)"))),
        })
    }
}

/// Named configurations along `axis`, derived from `config`. The loss axis
/// reserves one node per novel class of `split` for the standard variant.
pub fn variants(axis: Axis, config: &DetectorConfig, split: &SplitSpec) -> Vec<(String, DetectorConfig)> {
    let with = |f: &dyn Fn(&mut DetectorConfig)| {
        let mut c = config.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Neck => vec![
            ("cfpan".into(), with(&|c| c.neck.kind = NeckKind::Cfpan)),
            (
                "fpn".into(),
                with(&|c| {
                    c.neck.kind = NeckKind::Fpn;
                    c.neck.cbam = false;
                }),
            ),
        ],
        Axis::Cbam => vec![
            ("on".into(), with(&|c| c.neck.cbam = true)),
            ("off".into(), with(&|c| c.neck.cbam = false)),
        ],
        Axis::Stages => (1..=4)
            .map(|n| (n.to_string(), with(&|c| c.rpn = c.rpn.restaged(n))))
            .collect(),
        Axis::Loss => vec![
            (
                "gcl".into(),
                with(&|c| {
                    if c.gcl.loss != LossKind::Gcl {
                        c.gcl = GclConfig {
                            scale: c.gcl.scale,
                            eps: c.gcl.eps,
                            ..GclConfig::default()
                        };
                    }
                }),
            ),
            (
                "standard".into(),
                with(&|c| {
                    c.gcl = GclConfig {
                        scale: c.gcl.scale,
                        eps: c.gcl.eps,
                        ..GclConfig::standard(split.novel.len())
                    }
                }),
            ),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub variant: String,
    pub shots: usize,
    /// `None` on the median-over-seeds summary row.
    pub seed: Option<u64>,
    pub novel_map: Option<f64>,
    pub base_map: Option<f64>,
    pub num_params: usize,
}

/// Runs every variant of `axis` and returns one row per
/// `(variant, shots, seed)` followed by a median row per `(variant, shots)`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    axis: Axis,
    config: &DetectorConfig,
    data: &ExperimentData,
    split: &SplitSpec,
    shots: &[usize],
    seeds: &[u64],
    base_seed: u64,
    opts: &DetectOptions,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    if shots.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one shot setting and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (name, cfg) in variants(axis, config, split) {
        cfg.validate()?;
        progress(&format!("{} = {name}", axis.name()));
        let run = run_experiment(&cfg, data, split, shots, seeds, base_seed, opts, |_| {})?;
        for r in &run.finetuned {
            rows.push(AblationRow {
                axis,
                variant: name.clone(),
                shots: r.shots,
                seed: Some(r.seed),
                novel_map: r.report.novel_map,
                base_map: r.report.base_map,
                num_params: run.num_params,
            });
        }
        for &k in shots {
            let base: Vec<f64> = run
                .finetuned
                .iter()
                .filter(|r| r.shots == k)
                .filter_map(|r| r.report.base_map)
                .collect();
            summary.push(AblationRow {
                axis,
                variant: name.clone(),
                shots: k,
                seed: None,
                novel_map: median(&run.novel_maps(k)),
                base_map: median(&base),
                num_params: run.num_params,
            });
        }
    }
    rows.extend(summary);
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with a leading `#` line carrying the resolved configuration.
pub fn to_csv(rows: &[AblationRow], config: &serde_json::Value) -> String {
    let mut s = format!("# config={config}\naxis,variant,shots,seed,novel_map,base_map,num_params\n");
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "median".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.axis.name(),
            r.variant,
            r.shots,
            seed,
            opt(r.novel_map),
            opt(r.base_map),
            r.num_params
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_split;

    fn split() -> SplitSpec {
        let classes = crate::datasets::DatasetSpec::default().class_names();
        make_split(&classes, "synthetic").unwrap()
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn stage_variants_grow_in_parameters() {
        let vs = variants(Axis::Stages, &DetectorConfig::micro(), &split());
        let counts: Vec<usize> = vs
            .iter()
            .map(|(_, c)| Detector::new(c.clone(), vec!["a".into(), "b".into()], 0).unwrap().num_params())
            .collect();
        assert_eq!(counts.len(), 4);
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn every_variant_validates() {
        for axis in [Axis::Neck, Axis::Cbam, Axis::Stages, Axis::Loss] {
            for (name, c) in variants(axis, &DetectorConfig::default(), &split()) {
                c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
        assert!(Axis::parse("width").is_err());
    }

    #[test]
    fn csv_has_median_rows() {
        let rows = vec![
            AblationRow {
                axis: Axis::Loss,
                variant: "gcl".into(),
                shots: 10,
                seed: Some(1),
                novel_map: Some(0.25),
                base_map: None,
                num_params: 7,
            },
            AblationRow {
                axis: Axis::Loss,
                variant: "gcl".into(),
                shots: 10,
                seed: None,
                novel_map: Some(0.25),
                base_map: None,
                num_params: 7,
            },
        ];
        let csv = to_csv(&rows, &serde_json::json!({"k": 1}));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], r#"# config={"k":1}"#);
        assert_eq!(lines[2], "loss,gcl,10,1,0.250000,,7");
        assert_eq!(lines[3], "loss,gcl,10,median,0.250000,,7");
    }
}
