//! Command implementations behind the `fedtgnn` binary.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use fedtgnn::audit::{audit_dir, AuditReport};
use fedtgnn::config::RunConfig;
use fedtgnn::data::{export_csv, load_dataset, parse_dataset, synth_gdm, PatientDataset, Schema};
use fedtgnn::experiment::{ablation_table, run_experiment, ExperimentResult};
use fedtgnn::{Error, Result};

/// Columns expected for each public dataset.
pub fn expected_features(schema: Schema) -> Option<usize> {
    match schema {
        Schema::Pima => Some(8),
        Schema::EarlyStage => Some(16),
        Schema::SyntheticGdm => None,
    }
}

/// Converts a KEEL/ARFF file (`@attribute` header, `@data` section) to CSV text.
pub fn keel_to_csv(text: &str) -> Result<String> {
    let mut names = Vec::new();
    let mut rows = Vec::new();
    let mut in_data = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%')) {
        let lower = line.to_ascii_lowercase();
        if in_data {
            rows.push(line.split(',').map(str::trim).collect::<Vec<_>>().join(","));
        } else if lower.starts_with("@attribute") {
            let name = line
                .split_whitespace()
                .nth(1)
                .ok_or_else(|| Error::Format {
                    path: None,
                    detail: format!("attribute line without a name: {line}"),
                })?;
            names.push(name.trim_matches('\'').to_string());
        } else if lower.starts_with("@data") {
            in_data = true;
        }
    }
    if names.is_empty() || !in_data {
        return Err(Error::Format {
            path: None,
            detail: "no @attribute header or @data section".into(),
        });
    }
    let mut out = names.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct FetchOutcome {
    pub path: PathBuf,
    pub checksum: String,
    pub rows: usize,
    pub features: usize,
}

/// Copies a public dataset into canonical CSV form and writes `<out>.sha256`.
pub fn fetch(schema: Schema, source: &Path, out: &Path, expected_checksum: Option<&str>) -> Result<FetchOutcome> {
    let raw = std::fs::read_to_string(source)?;
    let text = if raw.trim_start().starts_with('@') { keel_to_csv(&raw)? } else { raw };
    let data = parse_dataset(&text, schema)?;
    if let Some(d) = expected_features(schema) {
        if data.n_features() != d {
            return Err(Error::Format {
                path: Some(source.to_path_buf()),
                detail: format!("{} expects {d} features, found {}", schema.name(), data.n_features()),
            });
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    export_csv(&data, schema, out)?;
    let checksum = sha256_hex(&std::fs::read(out)?);
    if let Some(want) = expected_checksum {
        if !want.eq_ignore_ascii_case(&checksum) {
            std::fs::remove_file(out)?;
            return Err(Error::Format {
                path: Some(out.to_path_buf()),
                detail: format!("checksum mismatch: expected {want}, got {checksum}"),
            });
        }
    }
    let mut sum_path = out.as_os_str().to_owned();
    sum_path.push(".sha256");
    let file_name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    std::fs::write(&sum_path, format!("{checksum}  {file_name}\n"))?;
    Ok(FetchOutcome {
        path: out.to_path_buf(),
        checksum,
        rows: data.n_rows(),
        features: data.n_features(),
    })
}

/// Loads the configured dataset; synthetic GDM is generated unless a path is set.
pub fn load(cfg: &RunConfig) -> Result<PatientDataset> {
    if cfg.dataset == Schema::SyntheticGdm && cfg.data_path.is_empty() {
        return synth_gdm(cfg.synth_rows, cfg.seeds.first().copied().unwrap_or(42));
    }
    let path = cfg.effective_data_path();
    if !path.exists() {
        return Err(Error::Format {
            path: Some(path.clone()),
            detail: format!("dataset file not found; run `fedtgnn fetch --dataset {} --source <file>` first", cfg.dataset.name()),
        });
    }
    load_dataset(&path, cfg.dataset)
}

/// Runs the experiment and writes `config.txt`, `results.json` and `folds.csv` under `cfg.out`.
pub fn run_and_write(cfg: &RunConfig, data: &PatientDataset) -> Result<ExperimentResult> {
    let plan = cfg.plan()?;
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), cfg.echo())?;
    let result = run_experiment(&plan, data)?;
    result.write_json(&out.join("results.json"))?;
    result.write_csv(&out.join("folds.csv"))?;
    Ok(result)
}

pub fn write_ablation(result: &ExperimentResult, out: &Path) -> Result<String> {
    let table = ablation_table(result);
    std::fs::write(out.join("ablation.txt"), &table)?;
    Ok(table)
}

/// Audits `dir` if it holds a manifest, otherwise every immediate subdirectory that does.
pub fn audit_tree(dir: &Path) -> Result<Vec<(PathBuf, AuditReport)>> {
    if dir.join("manifest.json").exists() {
        return Ok(vec![(dir.to_path_buf(), audit_dir(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Format {
            path: Some(dir.to_path_buf()),
            detail: "no message dumps found".into(),
        });
    }
    subdirs.into_iter().map(|d| audit_dir(&d).map(|r| (d, r))).collect()
}
