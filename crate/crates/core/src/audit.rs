//! Field-level privacy audit over dumped federation messages.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{DumpManifest, Field, FederationMessage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub files_scanned: usize,
    pub fields_scanned: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Array lengths that would indicate per-node or per-edge payloads.
fn forbidden_lengths(manifest: &DumpManifest) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for s in &manifest.silos {
        for len in [
            s.n_nodes,
            s.n_nodes * s.n_features,
            s.n_nodes * manifest.embedding_dim,
            s.n_nodes * 2,
            s.n_edges,
            s.n_edges * 2,
            s.n_edges * 3,
        ] {
            if len > 0 {
                out.insert(len);
            }
        }
    }
    out
}

/// Checks one encoded message against the manifest.
pub fn audit_message(name: &str, bytes: &[u8], manifest: &DumpManifest) -> (usize, Vec<String>) {
    let fields = match FederationMessage::fields(bytes) {
        Ok((_, f)) => f,
        Err(e) => return (0, vec![format!("{name}: unparseable message ({e})")]),
    };
    let forbidden = forbidden_lengths(manifest);
    let max_nodes = manifest.silos.iter().map(|s| s.n_nodes as u64).max().unwrap_or(0);
    let mut bad = Vec::new();
    for field in &fields {
        match field {
            Field::Array("params", a) => {
                if a.len() != manifest.param_len {
                    bad.push(format!("{name}: params has {} values, model has {}", a.len(), manifest.param_len));
                }
            }
            Field::Array(label, a) => {
                if !a.is_empty() && a.len() != manifest.embedding_dim {
                    bad.push(format!("{name}: {label} has {} values, expected {}", a.len(), manifest.embedding_dim));
                }
                if forbidden.contains(&a.len()) {
                    bad.push(format!("{name}: {label} length {} matches a per-node or per-edge payload", a.len()));
                }
            }
            Field::Count(label, v) if label.starts_with("count") || *label == "n_k" => {
                if *v > max_nodes {
                    bad.push(format!("{name}: {label}={v} exceeds every silo's node count"));
                }
            }
            Field::Count(..) => {}
        }
    }
    (fields.len(), bad)
}

/// Scans `dir/*.msg` using `dir/manifest.json`.
pub fn audit_dir(dir: &Path) -> Result<AuditReport> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DumpManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path).map_err(|e| Error::Format {
        path: Some(manifest_path.clone()),
        detail: format!("cannot read manifest: {e}"),
    })?)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "msg"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format {
            path: Some(dir.to_path_buf()),
            detail: "no .msg files to audit".into(),
        });
    }
    let mut report = AuditReport {
        files_scanned: 0,
        fields_scanned: 0,
        violations: Vec::new(),
    };
    for path in files {
        let bytes = std::fs::read(&path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (n, bad) = audit_message(&name, &bytes, &manifest);
        report.files_scanned += 1;
        report.fields_scanned += n;
        report.violations.extend(bad);
    }
    Ok(report)
}
