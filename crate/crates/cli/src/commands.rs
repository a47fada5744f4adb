use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fscl_core::metrics::{confusion_tensor, fairness_report, FairnessReport, SimilarityDispersion};
use fscl_core::synth::{
    generate_features, generate_ideal_biased_labels, Dataset, Labels,
};
use fscl_core::theorem::{count_formulas, delta_v_study, DeltaStudyReport};
use fscl_core::trainer::{
    finish_pipeline, forward_encode, pipeline_data, Checkpoint, EpochLog, PipelineSpec,
    RepresentationTrainer,
};
use fscl_core::synth::BiasSpec;
use fscl_core::{LossKind, RngSeed};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, ExperimentConfig, Generator};
use crate::error::{CliError, Result};
use crate::io::{cell, read_dataset, read_json, write_dataset, write_json, CommentedCsv};

pub const MANIFEST_SCHEMA: &str = "fscl.manifest.v1";
pub const TRAIN_LOG_SCHEMA: &str = "fscl.train_log.v1";
pub const REPORT_SCHEMA: &str = "fscl.report.v1";
pub const DELTA_SCHEMA: &str = "fscl.delta_v.v1";
pub const COUNTS_SCHEMA: &str = "fscl.counts.v1";
pub const EMBEDDINGS_SCHEMA: &str = "fscl.embeddings.v1";
pub const METRICS_SCHEMA: &str = "fscl.metrics.v1";

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub y: usize,
    pub s: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    pub samples: usize,
    pub hidden_sensitive: usize,
    pub cells: Vec<CellCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub dim: usize,
    pub train: SplitSummary,
    pub test: SplitSummary,
    pub config: ExperimentConfig,
}

fn summarize(file: &str, data: &Dataset) -> SplitSummary {
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&y, s) in data.targets.iter().zip(&data.sensitive) {
        if let Some(s) = s {
            *cells.entry((y, *s)).or_default() += 1;
        }
    }
    SplitSummary {
        file: file.into(),
        samples: data.len(),
        hidden_sensitive: data.sensitive.iter().filter(|s| s.is_none()).count(),
        cells: cells
            .into_iter()
            .map(|((y, s), count)| CellCount { y, s, count })
            .collect(),
    }
}

/// Train and balanced test splits for the `[data]` section.
pub fn build_dataset(d: &DataSection) -> Result<(Dataset, Dataset)> {
    let seed = RngSeed(d.seed);
    let (mut train, test) = match d.generator {
        Generator::Imbalanced => pipeline_data(&PipelineSpec {
            alpha: d.alpha,
            train_total: d.train_total,
            test_total: d.test_total,
            features: d.features(),
            data_seed: seed,
        })?,
        Generator::Ideal => {
            let bias: BiasSpec = d.bias();
            let train_labels = generate_ideal_biased_labels(&bias, seed)?;
            let groups = d.m * d.m;
            if !d.test_total.is_multiple_of(groups) {
                return Err(CliError::Config(format!(
                    "data.test_total must be a multiple of m² = {groups}, got {}",
                    d.test_total
                )));
            }
            let per_cell = d.test_total / groups;
            let mut test_labels = Labels {
                targets: Vec::new(),
                sensitive: Vec::new(),
            };
            for y in 0..d.m {
                for s in 0..d.m {
                    test_labels.targets.extend(std::iter::repeat_n(y, per_cell));
                    test_labels.sensitive.extend(std::iter::repeat_n(s, per_cell));
                }
            }
            let world = seed.derive(7);
            (
                generate_features(&train_labels, &d.features(), world, 0)?,
                generate_features(&test_labels, &d.features(), world, 1)?,
            )
        }
    };
    if d.hide_sensitive_fraction > 0.0 {
        let mut rng = seed.derive(11).stream(0);
        for s in &mut train.sensitive {
            if rng.random::<f64>() < d.hide_sensitive_fraction {
                *s = None;
            }
        }
    }
    Ok((train, test))
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let (train, test) = build_dataset(&cfg.data)?;
    let dir = cfg.output_dir();
    write_dataset(&dir.join(TRAIN_FILE), &train)?;
    write_dataset(&dir.join(TEST_FILE), &test)?;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        seed: cfg.data.seed,
        dim: train.dim(),
        train: summarize(TRAIN_FILE, &train),
        test: summarize(TEST_FILE, &test),
        config: cfg.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema: String,
    pub loss: LossKind,
    pub seed: u64,
    pub epochs: usize,
    pub equalized_odds: f64,
    pub demographic_parity: f64,
    pub equal_opportunity: f64,
    pub accuracy: f64,
    pub skipped_combos: usize,
    pub skipped_anchors_total: usize,
    pub sensitive_probe: Option<f64>,
    pub dispersion: Option<SimilarityDispersion>,
    pub dispersion_repr: Option<SimilarityDispersion>,
    pub classifier_loss: Vec<f64>,
    pub config: ExperimentConfig,
}

pub struct TrainOptions<'a> {
    pub losses: &'a [LossKind],
    pub resume: bool,
    pub data_dir: Option<&'a Path>,
    pub quiet: bool,
}

fn log_table(cfg: &ExperimentConfig, kind: LossKind, log: &[EpochLog]) -> CommentedCsv {
    let columns = ["epoch", "loss", "loss_sum", "skipped_anchors", "v_p", "v_a", "v", "probe"];
    let mut table = CommentedCsv::new(TRAIN_LOG_SCHEMA, columns.map(String::from).to_vec())
        .comment("loss", kind.name())
        .comment("seed", cfg.train.seed.to_string())
        .comment("config", cfg.echo());
    for e in log {
        table.row(vec![
            e.epoch.to_string(),
            e.loss.to_string(),
            e.loss_sum.to_string(),
            e.skipped_anchors.to_string(),
            cell(e.v.map(|v| v.v_p)),
            cell(e.v.map(|v| v.v_a)),
            cell(e.v.map(|v| v.v)),
            cell(e.probe),
        ]);
    }
    table
}

fn resume_trainer(
    path: &Path,
    config: fscl_core::trainer::TrainConfig,
    input_dim: usize,
) -> Result<RepresentationTrainer> {
    let mut cp: Checkpoint = read_json(path)?;
    let mut expected = config;
    expected.epochs_repr = cp.config.epochs_repr;
    expected.epochs_clf = cp.config.epochs_clf;
    if expected != cp.config {
        return Err(CliError::Config(format!(
            "{}: checkpoint was written with a different configuration",
            path.display()
        )));
    }
    if cp.epoch > config.epochs_repr {
        return Err(CliError::Config(format!(
            "{}: checkpoint has {} epochs, more than train.epochs_repr = {}",
            path.display(),
            cp.epoch,
            config.epochs_repr
        )));
    }
    if cp.params.input_dim() != input_dim {
        return Err(CliError::Data(format!(
            "{}: encoder expects {} features, dataset has {input_dim}",
            path.display(),
            cp.params.input_dim()
        )));
    }
    cp.config = config;
    Ok(RepresentationTrainer::from_checkpoint(cp)?)
}

/// Trains one encoder and classifier per loss on the same data and seed. Each loss writes
/// `<dir>/<loss>/{train_log.csv, checkpoint.json, report.json}`.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<Vec<ReportFile>> {
    let dir = cfg.output_dir();
    let data_dir = opts.data_dir.unwrap_or(dir);
    let train = read_dataset(&data_dir.join(TRAIN_FILE))?;
    let test = read_dataset(&data_dir.join(TEST_FILE))?;
    if test.sensitive.iter().any(Option::is_none) {
        return Err(CliError::Data(format!(
            "{}: the test split needs every sensitive label",
            data_dir.join(TEST_FILE).display()
        )));
    }
    let losses: Vec<LossKind> = if opts.losses.is_empty() {
        vec![cfg.loss.kind]
    } else {
        opts.losses.to_vec()
    };
    let hidden = train.sensitive.iter().any(Option::is_none);
    let mut reports = Vec::new();
    for kind in losses {
        if hidden && kind.uses_sensitive() && !cfg.train.partial_sensitive {
            return Err(CliError::Config(format!(
                "{kind} needs sensitive labels that the training data withholds; \
                 set train.partial_sensitive = true or pick a loss that ignores them"
            )));
        }
        let config = cfg.train_config(kind)?;
        let out = dir.join(kind.name());
        let cp_path = out.join(CHECKPOINT_FILE);
        let mut trainer = if opts.resume {
            resume_trainer(&cp_path, config, train.dim())?
        } else {
            RepresentationTrainer::new(config, train.dim())?
        };
        while trainer.epochs_done() < config.epochs_repr {
            let e = trainer.run_epoch(&train, Some(&test))?;
            if !opts.quiet {
                eprintln!("{kind} epoch {}/{} loss {:.6}", e.epoch + 1, config.epochs_repr, e.loss);
            }
            write_json(&cp_path, &trainer.checkpoint())?;
        }
        write_json(&cp_path, &trainer.checkpoint())?;
        let (encoder, log) = trainer.into_parts();
        let outcome = finish_pipeline(encoder, log, &train, &test, &config)?;
        let log = &outcome.log;
        log_table(cfg, kind, &log.representation).write(&out.join(LOG_FILE))?;
        let report: FairnessReport = log.final_report.clone().expect("test split has labels");
        let file = ReportFile {
            schema: REPORT_SCHEMA.into(),
            loss: kind,
            seed: cfg.train.seed,
            epochs: log.representation.len(),
            equalized_odds: report.equalized_odds,
            demographic_parity: report.demographic_parity,
            equal_opportunity: report.equal_opportunity,
            accuracy: report.accuracy,
            skipped_combos: report.skipped_combos,
            skipped_anchors_total: log.representation.iter().map(|e| e.skipped_anchors).sum(),
            sensitive_probe: log.final_probe,
            dispersion: log.final_dispersion.clone(),
            dispersion_repr: log.final_dispersion_repr.clone(),
            classifier_loss: log.classifier.clone(),
            config: cfg.clone(),
        };
        write_json(&out.join(REPORT_FILE), &file)?;
        reports.push(file);
    }
    Ok(reports)
}

pub struct TheoremOutput {
    pub study: DeltaStudyReport,
    pub count_mismatches: usize,
    pub count_rows: usize,
}

/// Writes `delta_v.csv` (one row per seed plus a sign-agreement footer) and `counts.csv`
/// (closed form against enumeration over the `[study] grid_m` grid).
pub fn verify_theorem(cfg: &ExperimentConfig) -> Result<TheoremOutput> {
    let dir = cfg.output_dir();
    let study = delta_v_study(&cfg.study_config())?;
    let columns = [
        "seed",
        "delta_v_a",
        "delta_v_p",
        "delta_v",
        "alpha_bar",
        "beta_bar",
        "phi_gap",
        "rates_within_2x",
        "assumption_violated",
    ];
    let mut delta = CommentedCsv::new(DELTA_SCHEMA, columns.map(String::from).to_vec())
        .comment("lambda", format!("{} -> {}", study.lambda_low, study.lambda_high))
        .comment("config", cfg.echo());
    for r in &study.rows {
        delta.row(vec![
            r.seed.to_string(),
            r.delta_v_a.to_string(),
            r.delta_v_p.to_string(),
            r.delta_v.to_string(),
            r.alpha_bar.to_string(),
            r.beta_bar.to_string(),
            r.phi_gap.to_string(),
            u8::from(r.rates_within_2x()).to_string(),
            u8::from(study.assumption_violated).to_string(),
        ]);
    }
    let a = study.sign_agreement;
    delta.footer(
        "sign_agreement",
        format!(
            "v_a_nonpositive={} v_p_positive={} v_negative={} rates_within_2x={}",
            a.v_a_nonpositive, a.v_p_positive, a.v_negative, a.rates_within_2x
        ),
    );
    delta.write(&dir.join("delta_v.csv"))?;

    let columns = ["m", "r", "C", "quantity", "closed_form", "brute_force", "uniform", "mismatch"];
    let mut counts = CommentedCsv::new(COUNTS_SCHEMA, columns.map(String::from).to_vec())
        .comment("config", cfg.echo());
    let mut mismatches = 0;
    let mut rows = 0;
    for &m in &cfg.study.grid_m {
        for r in [m * m, m * m + 1, 2 * m * m] {
            for c in 1..=3 {
                let report = count_formulas(&BiasSpec::new(m, r as f64, c)?)?;
                for (name, check) in report.checks() {
                    let bad = !check.holds();
                    mismatches += usize::from(bad);
                    rows += 1;
                    counts.row(vec![
                        m.to_string(),
                        r.to_string(),
                        c.to_string(),
                        name.into(),
                        check.closed_form.to_string(),
                        check.brute_force.to_string(),
                        u8::from(check.uniform).to_string(),
                        u8::from(bad).to_string(),
                    ]);
                }
            }
        }
    }
    counts.write(&dir.join("counts.csv"))?;
    Ok(TheoremOutput {
        study,
        count_mismatches: mismatches,
        count_rows: rows,
    })
}

pub struct ExportOptions {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Up to `output.export_per_group` samples of every `(y, s)` group, with their representations
/// (and projections when `output.export_z` is set). Returns the output path and row count.
pub fn export_embeddings(cfg: &ExperimentConfig, opts: &ExportOptions) -> Result<(PathBuf, usize)> {
    let dir = cfg.output_dir();
    let cp_path = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| dir.join(cfg.loss.kind.name()).join(CHECKPOINT_FILE));
    let data_path = opts.data.clone().unwrap_or_else(|| dir.join(TEST_FILE));
    let out = opts.out.clone().unwrap_or_else(|| {
        cp_path
            .parent()
            .map_or_else(|| PathBuf::from("embeddings.csv"), |p| p.join("embeddings.csv"))
    });
    let cp: Checkpoint = read_json(&cp_path)?;
    let data = read_dataset(&data_path)?;
    if cp.params.input_dim() != data.dim() {
        return Err(CliError::Data(format!(
            "{}: encoder expects {} features, {} has {}",
            cp_path.display(),
            cp.params.input_dim(),
            data_path.display(),
            data.dim()
        )));
    }
    let mut groups: BTreeMap<(usize, Option<usize>), Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        groups.entry((data.targets[i], data.sensitive[i])).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (k, members) in groups.values_mut().enumerate() {
        members.shuffle(&mut RngSeed(cfg.output.export_seed).stream(k as u64));
        chosen.extend(members.iter().take(cfg.output.export_per_group).copied());
    }
    chosen.sort_unstable();
    let features: Vec<Vec<f64>> = chosen.iter().map(|&i| data.features[i].clone()).collect();
    let (h, z) = forward_encode(&cp.params, &features)?;
    let mut columns: Vec<String> = vec!["origin_id".into(), "y".into(), "s".into()];
    columns.extend((1..=cp.params.repr_dim()).map(|d| format!("h_{d}")));
    if cfg.output.export_z {
        columns.extend((1..=z.first().map_or(0, Vec::len)).map(|d| format!("z_{d}")));
    }
    let mut table = CommentedCsv::new(EMBEDDINGS_SCHEMA, columns)
        .comment("loss", cp.config.loss.kind.name())
        .comment("checkpoint_epoch", cp.epoch.to_string())
        .comment("config", cfg.echo());
    for (row, &i) in chosen.iter().enumerate() {
        let mut cells = vec![
            i.to_string(),
            data.targets[i].to_string(),
            data.sensitive[i].map_or_else(String::new, |s| s.to_string()),
        ];
        cells.extend(h[row].iter().map(f64::to_string));
        if cfg.output.export_z {
            cells.extend(z[row].iter().map(f64::to_string));
        }
        table.row(cells);
    }
    table.write(&out)?;
    Ok((out, chosen.len()))
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    y: usize,
    #[serde(alias = "c", alias = "pred")]
    prediction: usize,
    s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema: String,
    pub samples: usize,
    #[serde(flatten)]
    pub report: FairnessReport,
}

/// Fairness report for a CSV of `y,prediction,s` rows (`#` lines are comments).
pub fn metrics(predictions: &Path) -> Result<MetricsFile> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(predictions)
        .map_err(|e| CliError::Data(format!("{}: {e}", predictions.display())))?;
    let mut y = Vec::new();
    let mut c = Vec::new();
    let mut s = Vec::new();
    for row in reader.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| CliError::Data(format!("{}: {e}", predictions.display())))?;
        y.push(row.y);
        c.push(row.prediction);
        s.push(row.s);
    }
    let tensor = confusion_tensor(&y, &c, &s)?;
    Ok(MetricsFile {
        schema: METRICS_SCHEMA.into(),
        samples: y.len(),
        report: fairness_report(&tensor)?,
    })
}
