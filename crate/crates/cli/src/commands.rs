//! The four pipelines behind the subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use risktube::conformal::{fit_category_calibrators, CalibratorConfig, CategoryCalibrator, CategoryClassifier, CentroidModel};
use risktube::gate::{write_trace, GateConfig};
use risktube::metrics::{BoundaryConfig, EvalConfig, MetricReport};
use risktube::pipeline::{
    brake_report, calibration_records, clip_brakes, evaluate_method, evaluate_online, fit_fallback_classifier, partition, Method,
    Predictor,
};
use risktube::sim::{generate_dataset, read_scenarios, split_dataset, write_scenarios, DatasetSpec, DatasetSplit, Scenario};
use risktube::tube::{AmbiguityPolicy, Horizon};

use crate::error::CliError;
use crate::manifest::{read_input, sha256_hex, write_atomic, RunManifest};

pub const CALIBRATOR_SCHEMA: &str = "risktube/calibrator/v1";
pub const SPLIT_RATIOS: (u32, u32, u32) = (8, 1, 1);

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Parses a dataset description: JSON for `.json` files, TOML otherwise.
pub fn load_spec(path: &Path) -> Result<(DatasetSpec, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let spec: DatasetSpec = if is_json {
        serde_json::from_str(text).map_err(|e| validation(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(text).map_err(|e| validation(format!("{}: {e}", path.display())))?
    };
    spec.validate().map_err(|e| validation(format!("{}: {e}", path.display())))?;
    Ok((spec, bytes))
}

pub fn simulate(config: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let (spec, config_bytes) = load_spec(config)?;
    let scenarios = generate_dataset(&spec.scenarios, spec.n_per_config, seed)?;
    let mut bytes = Vec::new();
    write_scenarios(&scenarios, &mut bytes)?;
    write_atomic(out, &bytes)?;
    info!("wrote {} scenarios to {}", scenarios.len(), out.display());

    let mut m = RunManifest::new("simulate", Some(seed), serde_json::to_value(&spec).map_err(validation)?);
    m.multi = Some(spec.is_multi());
    m.input(config, &config_bytes);
    m.output(out, &bytes);
    m.write(out)?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(Vec<Scenario>, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let scenarios = read_scenarios(bytes.as_slice()).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    if scenarios.is_empty() {
        return Err(validation(format!("{}: no scenarios", path.display())));
    }
    Ok((scenarios, bytes))
}

fn common_horizon(scenarios: &[Scenario]) -> Result<Horizon, CliError> {
    let h = scenarios[0].config.horizon;
    if let Some(s) = scenarios.iter().find(|s| s.config.horizon != h) {
        return Err(validation(format!(
            "scenario `{}` uses horizon {}, the dataset starts with {}",
            s.id,
            s.config.horizon.len(),
            h.len()
        )));
    }
    Ok(h)
}

fn scenario_digest(s: &Scenario) -> Result<String, CliError> {
    Ok(sha256_hex(s.to_json_line().map_err(validation)?.as_bytes()))
}

/// Everything `evaluate` and `brake-eval` need from a calibration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratorFile {
    pub schema: String,
    pub dataset_sha256: String,
    pub split_seed: u64,
    pub split: DatasetSplit,
    /// Digests of the calibration scenarios, used to detect leakage.
    pub calibration_digests: Vec<String>,
    pub calibrator: CategoryCalibrator,
    /// Category assignment for objects without one.
    pub fallback: Option<CentroidModel>,
}

impl CalibratorFile {
    fn classifier(&self) -> CategoryClassifier {
        match &self.fallback {
            Some(m) => CategoryClassifier::Stub(m.clone()),
            None => CategoryClassifier::Oracle,
        }
    }
}

pub fn calibrate(dataset: &Path, seed: u64, alpha: f64, gamma: f64, out: &Path) -> Result<(), CliError> {
    let cfg = CalibratorConfig::new(alpha, gamma);
    cfg.validate().map_err(validation)?;
    let (scenarios, bytes) = load_dataset(dataset)?;
    let horizon = common_horizon(&scenarios)?;
    let ids: Vec<String> = scenarios.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, SPLIT_RATIOS, seed)?;
    let [train, cal_set, _] = partition(&scenarios, &split);
    info!(
        "split {} / {} / {} scenarios",
        split.train.len(),
        split.calibration.len(),
        split.test.len()
    );

    let records = calibration_records(&cal_set, horizon)?;
    let calibrator = fit_category_calibrators(&records, horizon, cfg)?;
    let flagged = calibrator.flagged();
    if !flagged.is_empty() {
        warn!("{} calibration cells fell back to the conservative cap", flagged.len());
    }
    let fallback = match fit_fallback_classifier(&train, horizon) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("no fallback category classifier: {e}");
            None
        }
    };
    let file = CalibratorFile {
        schema: CALIBRATOR_SCHEMA.into(),
        dataset_sha256: sha256_hex(&bytes),
        split_seed: seed,
        calibration_digests: cal_set.iter().map(|s| scenario_digest(s)).collect::<Result<_, _>>()?,
        split,
        calibrator,
        fallback,
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(validation)?;
    text.push('\n');
    write_atomic(out, text.as_bytes())?;

    let mut m = RunManifest::new(
        "calibrate",
        Some(seed),
        json!({ "alpha": alpha, "gamma": gamma, "split_ratios": [SPLIT_RATIOS.0, SPLIT_RATIOS.1, SPLIT_RATIOS.2] }),
    );
    m.input(dataset, &bytes);
    m.output(out, text.as_bytes());
    m.write(out)?;
    Ok(())
}

fn load_calibrator(path: &Path) -> Result<(CalibratorFile, Vec<u8>), CliError> {
    let bytes = read_input(path)?;
    let file: CalibratorFile = serde_json::from_slice(&bytes).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    if file.schema != CALIBRATOR_SCHEMA {
        return Err(validation(format!(
            "{}: unsupported schema `{}`, expected `{CALIBRATOR_SCHEMA}`",
            path.display(),
            file.schema
        )));
    }
    file.calibrator
        .validate()
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    Ok((file, bytes))
}

/// Scenarios to evaluate: the stored test split when the dataset is the one
/// that was calibrated on, every scenario otherwise. Any scenario that was
/// used for calibration is rejected.
fn test_scenarios<'a>(
    scenarios: &'a [Scenario],
    dataset_bytes: &[u8],
    cal: &CalibratorFile,
) -> Result<Vec<&'a Scenario>, CliError> {
    let same_dataset = sha256_hex(dataset_bytes) == cal.dataset_sha256;
    let chosen: Vec<&Scenario> = if same_dataset {
        let overlap: Vec<&String> = cal
            .split
            .test
            .iter()
            .filter(|id| cal.split.calibration.contains(id))
            .collect();
        if !overlap.is_empty() {
            return Err(CliError::SplitOverlap(format!(
                "test split shares {} scenario ids with the calibration split (first: {})",
                overlap.len(),
                overlap[0]
            )));
        }
        let [_, _, test] = partition(scenarios, &cal.split);
        test
    } else {
        scenarios.iter().collect()
    };
    let used: BTreeSet<&str> = cal.calibration_digests.iter().map(String::as_str).collect();
    for s in &chosen {
        if used.contains(scenario_digest(s)?.as_str()) {
            return Err(CliError::SplitOverlap(format!(
                "scenario `{}` was used for calibration",
                s.id
            )));
        }
    }
    if chosen.is_empty() {
        return Err(validation("no test scenarios to evaluate"));
    }
    Ok(chosen)
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub dataset: PathBuf,
    pub calibrator: PathBuf,
    pub method: Method,
    pub online: bool,
    pub ambiguity: AmbiguityPolicy,
    pub tau: f64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvaluationOutput<'a> {
    method: Method,
    online: bool,
    ambiguity: AmbiguityPolicy,
    tau: f64,
    scenarios: usize,
    report: &'a MetricReport,
}

pub fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let boundary = BoundaryConfig::new(args.tau).map_err(validation)?;
    if args.online && args.method != Method::Ours {
        return Err(validation("--online only applies to --method ours"));
    }
    let (scenarios, data_bytes) = load_dataset(&args.dataset)?;
    let (cal, cal_bytes) = load_calibrator(&args.calibrator)?;
    let test = test_scenarios(&scenarios, &data_bytes, &cal)?;
    let classifier = cal.classifier();
    let predictor = Predictor::new(args.method, Some(&cal.calibrator), &classifier).with_ambiguity(args.ambiguity);
    let eval = EvalConfig {
        boundary,
        ambiguity: args.ambiguity,
    };
    let report = if args.online {
        evaluate_online(&test, &predictor, &eval)?.0
    } else {
        evaluate_method(&test, &predictor, cal.calibrator.horizon, &eval)?
    };
    info!(
        "{}: coverage {:.4}, tube volume {:.4} over {} objects",
        args.method, report.coverage, report.tube_volume, report.n_objects
    );

    let output = EvaluationOutput {
        method: args.method,
        online: args.online,
        ambiguity: args.ambiguity,
        tau: args.tau,
        scenarios: test.len(),
        report: &report,
    };
    let mut text = serde_json::to_string_pretty(&output).map_err(validation)?;
    text.push('\n');
    let mut csv_bytes = Vec::new();
    let label = if args.online {
        format!("{}-online", args.method)
    } else {
        args.method.to_string()
    };
    MetricReport::write_csv(&[(label.as_str(), "test", &report)], &mut csv_bytes).map_err(validation)?;
    let csv_out = csv_path(&args.out);
    write_atomic(&args.out, text.as_bytes())?;
    write_atomic(&csv_out, &csv_bytes)?;

    let mut m = RunManifest::new(
        "evaluate",
        Some(cal.split_seed),
        json!({
            "method": args.method,
            "online": args.online,
            "ambiguity": args.ambiguity,
            "tau": args.tau,
        }),
    );
    m.input(&args.dataset, &data_bytes);
    m.input(&args.calibrator, &cal_bytes);
    m.output(&args.out, text.as_bytes());
    m.output(&csv_out, &csv_bytes);
    m.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BrakeArgs {
    pub dataset: PathBuf,
    pub calibrator: PathBuf,
    pub ambiguity: AmbiguityPolicy,
    pub distance_threshold: f64,
    pub traces: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn brake_eval(args: &BrakeArgs) -> Result<(), CliError> {
    let gate = GateConfig {
        distance_threshold: args.distance_threshold,
        ambiguity: args.ambiguity,
        anticipation_steps: 0,
    };
    gate.validate().map_err(validation)?;
    let (scenarios, data_bytes) = load_dataset(&args.dataset)?;
    let (cal, cal_bytes) = load_calibrator(&args.calibrator)?;
    let test = test_scenarios(&scenarios, &data_bytes, &cal)?;
    if let Some(s) = test.iter().find(|s| !s.has_distances()) {
        return Err(validation(format!("scenario `{}` has frames without distance_m", s.id)));
    }
    let classifier = cal.classifier();
    let clips = test
        .iter()
        .map(|s| clip_brakes(s, &cal.calibrator, &classifier, &gate))
        .collect::<Result<Vec<_>, _>>()?;
    let report = brake_report(&clips)?;
    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes).map_err(validation)?;
    write_atomic(&args.out, &csv_bytes)?;

    let mut m = RunManifest::new(
        "brake-eval",
        Some(cal.split_seed),
        json!({
            "ambiguity": args.ambiguity,
            "distance_threshold": args.distance_threshold,
        }),
    );
    m.input(&args.dataset, &data_bytes);
    m.input(&args.calibrator, &cal_bytes);
    m.output(&args.out, &csv_bytes);
    if let Some(dir) = &args.traces {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        for c in &clips {
            let mut buf = Vec::new();
            write_trace(&c.ours, &c.gt, &c.within, &mut buf).map_err(validation)?;
            let path = dir.join(format!("{}.csv", c.scenario));
            write_atomic(&path, &buf)?;
            m.output(&path, &buf);
        }
    }
    m.write(&args.out)?;
    Ok(())
}
