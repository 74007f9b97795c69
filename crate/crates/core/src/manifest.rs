//! Dataset manifests: one JSON object per line, one line per image.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An object-center label. Ground truth carries no confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub cx: f64,
    pub cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Annotation {
    pub fn new(cx: f64, cy: f64) -> Self {
        Self {
            cx,
            cy,
            confidence: None,
        }
    }

    pub fn with_confidence(cx: f64, cy: f64, confidence: f64) -> Self {
        Self {
            cx,
            cy,
            confidence: Some(confidence),
        }
    }

    pub fn distance(&self, other: &Annotation) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(format!("non-finite center ({}, {})", self.cx, self.cy));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("confidence {c} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Real,
    Synthetic,
    PseudoLabeled,
    Refined,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_path: Option<String>,
    pub width: u32,
    pub height: u32,
    pub gsd_cm_per_px: f64,
    pub has_vehicles: bool,
    pub annotations: Vec<Annotation>,
    pub domain_tag: Domain,
    pub stage_tag: Stage,
    /// Only the image-level `has_vehicles` flag is known; `annotations` is
    /// not an instance-level labeling.
    #[serde(default, skip_serializing_if = "is_false")]
    pub weak_only: bool,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidEntry {
            path: self.image_path.clone(),
            message,
        };
        if self.weak_only {
            if !self.annotations.is_empty() {
                return Err(fail("weak-only entry carries instance annotations".into()));
            }
        } else if self.has_vehicles == self.annotations.is_empty() {
            return Err(fail(format!(
                "has_vehicles={} disagrees with {} annotations",
                self.has_vehicles,
                self.annotations.len()
            )));
        }
        if !(self.gsd_cm_per_px > 0.0 && self.gsd_cm_per_px.is_finite()) {
            return Err(fail(format!("invalid gsd {}", self.gsd_cm_per_px)));
        }
        for a in &self.annotations {
            a.validate().map_err(fail)?;
        }
        Ok(())
    }

    /// Replaces the instance labels, keeping `has_vehicles` consistent.
    pub fn set_annotations(&mut self, annotations: Vec<Annotation>) {
        self.has_vehicles = !annotations.is_empty();
        self.annotations = annotations;
        self.weak_only = false;
    }

    /// Drops instance labels, keeping only the image-level flag.
    pub fn to_weak(&self) -> ManifestEntry {
        ManifestEntry {
            annotations: Vec::new(),
            weak_only: true,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.image_path.as_str()) {
                return Err(Error::DuplicatePath(e.image_path.clone()));
            }
            e.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.has_vehicles).count()
    }

    pub fn annotation_count(&self) -> usize {
        self.entries.iter().map(|e| e.annotations.len()).sum()
    }

    /// Keeps entries whose GSD is at most `max_gsd` cm/px.
    pub fn filter_max_gsd(&self, max_gsd: f64) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.gsd_cm_per_px <= max_gsd)
                .cloned()
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::ManifestLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::ManifestLine {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::new(entries)
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in &manifest.entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_reader(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, anns: Vec<Annotation>) -> ManifestEntry {
        ManifestEntry {
            image_path: path.into(),
            map_path: None,
            width: 112,
            height: 112,
            gsd_cm_per_px: 12.5,
            has_vehicles: !anns.is_empty(),
            annotations: anns,
            domain_tag: Domain::Source,
            stage_tag: Stage::Real,
            weak_only: false,
        }
    }

    #[test]
    fn empty_manifest_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&DatasetManifest::default(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn annotation_order_preserved() {
        let m = DatasetManifest::new(vec![entry(
            "a.amap",
            vec![Annotation::new(3.0, 4.0), Annotation::with_confidence(1.0, 2.0, 0.5)],
        )])
        .unwrap();
        let back = DatasetManifest::from_jsonl(&m.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.entries[0].annotations[0].cx, 3.0);
    }

    #[test]
    fn keys_match_schema() {
        let mut e = entry("a.amap", vec![Annotation::new(1.0, 2.0)]);
        e.map_path = Some("a.map.amap".into());
        e.stage_tag = Stage::PseudoLabeled;
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "annotations",
                "domain_tag",
                "gsd_cm_per_px",
                "has_vehicles",
                "height",
                "image_path",
                "map_path",
                "stage_tag",
                "width"
            ]
        );
        assert_eq!(v["stage_tag"], "pseudo-labeled");
        assert_eq!(v["domain_tag"], "source");
    }

    #[test]
    fn has_vehicles_without_annotations_needs_weak_marker() {
        let mut e = entry("a.amap", vec![]);
        e.has_vehicles = true;
        assert!(matches!(
            DatasetManifest::new(vec![e.clone()]),
            Err(Error::InvalidEntry { .. })
        ));
        e.weak_only = true;
        let m = DatasetManifest::new(vec![e]).unwrap();
        let text = m.to_jsonl().unwrap();
        assert!(text.contains("\"weak_only\":true"));
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let e = entry("a.amap", vec![]);
        assert!(matches!(
            DatasetManifest::new(vec![e.clone(), e]),
            Err(Error::DuplicatePath(_))
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = DatasetManifest::new(vec![entry("a.amap", vec![])])
            .unwrap()
            .to_jsonl()
            .unwrap();
        let text = format!("{good}{{not json\n");
        match DatasetManifest::from_jsonl(&text) {
            Err(Error::ManifestLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn confidence_out_of_range_rejected() {
        let e = entry("a.amap", vec![Annotation::with_confidence(0.0, 0.0, 1.5)]);
        assert!(DatasetManifest::new(vec![e]).is_err());
    }

    #[test]
    fn gsd_filter() {
        let mut coarse = entry("b.amap", vec![]);
        coarse.gsd_cm_per_px = 30.0;
        let m = DatasetManifest::new(vec![entry("a.amap", vec![]), coarse]).unwrap();
        let kept = m.filter_max_gsd(15.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.entries[0].image_path, "a.amap");
    }
}
