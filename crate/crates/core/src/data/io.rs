use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PatientDataset;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Pima,
    EarlyStage,
    SyntheticGdm,
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pima" => Ok(Schema::Pima),
            "early_stage" | "early" => Ok(Schema::EarlyStage),
            "synthetic_gdm" | "gdm" => Ok(Schema::SyntheticGdm),
            other => Err(Error::Config(format!("unknown dataset schema '{other}'"))),
        }
    }
}

impl Schema {
    pub fn name(self) -> &'static str {
        match self {
            Schema::Pima => "pima",
            Schema::EarlyStage => "early_stage",
            Schema::SyntheticGdm => "synthetic_gdm",
        }
    }

    /// Required row count, when the public dataset has a fixed size.
    pub fn expected_rows(self) -> Option<usize> {
        match self {
            Schema::Pima => Some(768),
            Schema::EarlyStage => Some(520),
            Schema::SyntheticGdm => None,
        }
    }

    pub fn columns(self) -> Vec<ColumnSpec> {
        use ValueKind::*;
        let c = |name: &'static str, aliases: &'static [&'static str], kind, continuous| ColumnSpec {
            name,
            aliases,
            kind,
            continuous,
        };
        match self {
            Schema::Pima => vec![
                c("pregnancies", &["preg"], Numeric, true),
                c("glucose", &["plas", "plasmaglucose"], Numeric, true),
                c("blood_pressure", &["pres", "bloodpressure"], Numeric, true),
                c("skin_thickness", &["skin", "skinthickness"], Numeric, true),
                c("insulin", &["insu"], Numeric, true),
                c("bmi", &["mass"], Numeric, true),
                c("pedigree", &["pedi", "diabetespedigreefunction"], Numeric, true),
                c("age", &[], Numeric, true),
            ],
            Schema::EarlyStage => vec![
                c("age", &[], Numeric, true),
                c("gender", &["sex"], Binary, false),
                c("polyuria", &[], Binary, false),
                c("polydipsia", &[], Binary, false),
                c("sudden_weight_loss", &[], Binary, false),
                c("weakness", &[], Binary, false),
                c("polyphagia", &[], Binary, false),
                c("genital_thrush", &[], Binary, false),
                c("visual_blurring", &[], Binary, false),
                c("itching", &[], Binary, false),
                c("irritability", &[], Binary, false),
                c("delayed_healing", &[], Binary, false),
                c("partial_paresis", &[], Binary, false),
                c("muscle_stiffness", &[], Binary, false),
                c("alopecia", &[], Binary, false),
                c("obesity", &[], Binary, false),
            ],
            Schema::SyntheticGdm => vec![
                c("age", &[], Numeric, true),
                c("bmi", &[], Numeric, true),
                c("gravidity", &[], Numeric, false),
                c("parity", &[], Numeric, false),
                c("family_history", &[], Binary, false),
                c("pcos", &[], Binary, false),
                c("fasting_glucose", &[], Numeric, true),
                c("ogtt_2h", &["ogtt"], Numeric, true),
                c("systolic_bp", &[], Numeric, true),
                c("diastolic_bp", &[], Numeric, true),
            ],
        }
    }

    pub fn label_column(self) -> (&'static str, &'static [&'static str]) {
        match self {
            Schema::Pima => ("outcome", &["class"]),
            Schema::EarlyStage => ("class", &["outcome"]),
            Schema::SyntheticGdm => ("gdm", &["outcome", "class"]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Numeric,
    Binary,
}

#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub name: &'static str,
    pub aliases: &'static [&'static str],
    pub kind: ValueKind,
    pub continuous: bool,
}

fn normalize(header: &str) -> String {
    header
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn matches(header: &str, name: &str, aliases: &[&str]) -> bool {
    let h = normalize(header);
    h == normalize(name) || aliases.iter().any(|a| h == normalize(a))
}

fn parse_binary(raw: &str) -> Option<f64> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "yes" | "positive" | "male" | "tested_positive" | "1" | "1.0" | "true" => Some(1.0),
        "no" | "negative" | "female" | "tested_negative" | "0" | "0.0" | "false" => Some(0.0),
        _ => None,
    }
}

/// Loads a comma-separated file with a header row.
pub fn load_dataset(path: &Path, schema: Schema) -> Result<PatientDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, schema)
}

pub fn parse_dataset(text: &str, schema: Schema) -> Result<PatientDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Ingestion {
            row: 0,
            column: "<header>".into(),
            detail: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Ingestion {
            row: 0,
            column: "<header>".into(),
            detail: "empty file".into(),
        });
    }

    let specs = schema.columns();
    let find = |name: &str, aliases: &[&str]| -> Result<usize> {
        headers
            .iter()
            .position(|h| matches(h, name, aliases))
            .ok_or_else(|| Error::Ingestion {
                row: 0,
                column: name.to_string(),
                detail: format!("missing column (found {:?})", headers),
            })
    };
    let positions = specs
        .iter()
        .map(|s| find(s.name, s.aliases))
        .collect::<Result<Vec<_>>>()?;
    let (label_name, label_aliases) = schema.label_column();
    let label_pos = find(label_name, label_aliases)?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Ingestion {
            row,
            column: "<record>".into(),
            detail: e.to_string(),
        })?;
        for (spec, &p) in specs.iter().zip(&positions) {
            let raw = record.get(p).unwrap_or("");
            let v = match spec.kind {
                ValueKind::Numeric => raw.parse::<f64>().ok().filter(|v| v.is_finite()),
                ValueKind::Binary => parse_binary(raw),
            };
            values.push(v.ok_or_else(|| Error::Ingestion {
                row,
                column: spec.name.to_string(),
                detail: format!("unparseable value '{raw}'"),
            })?);
        }
        let raw = record.get(label_pos).unwrap_or("");
        let y = parse_binary(raw).ok_or_else(|| Error::Ingestion {
            row,
            column: label_name.to_string(),
            detail: format!("unparseable label '{raw}'"),
        })?;
        labels.push(Some(y as u8));
    }

    if labels.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: "<data>".into(),
            detail: "no data rows".into(),
        });
    }
    if let Some(expected) = schema.expected_rows() {
        if labels.len() != expected {
            return Err(Error::Ingestion {
                row: labels.len(),
                column: "<data>".into(),
                detail: format!("{} has {expected} rows, file has {}", schema.name(), labels.len()),
            });
        }
    }

    let n = labels.len();
    let features = DenseMatrix::from_vec(n, specs.len(), values)?;
    PatientDataset::new(
        features,
        labels,
        specs.iter().map(|s| s.continuous).collect(),
        specs.iter().map(|s| s.name.to_string()).collect(),
    )
}

/// Writes `data` with its feature names plus the schema's label column.
pub fn export_csv(data: &PatientDataset, schema: Schema, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header: Vec<String> = data.feature_names.clone();
    header.push(schema.label_column().0.to_string());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for i in 0..data.n_rows() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(data.labels[i].map_or(String::new(), |y| y.to_string()));
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
