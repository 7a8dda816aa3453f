//! Five-class glomerular label system and dataset manifest bookkeeping.
//!
//! The label set covers normal glomeruli, the three fine-grained global
//! glomerulosclerosis (GGS) subtypes, and a non-glomerular reject class.
//! Labels move through a three-step decision chain (glomerular vs not,
//! GGS vs not, fine subtype) and collapse to a binary scheme for external
//! validation cohorts that only distinguish sclerosed from normal.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown class label `{0}`")]
    UnknownLabel(String),
    #[error("manifest row {row}: missing field `{field}`")]
    MissingField { row: usize, field: &'static str },
    #[error("manifest read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

/// The closed five-class label set used by the patch classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlomClass {
    /// Structurally normal glomerulus.
    Normal,
    /// Obsolescent GGS: nonspecific global sclerosis that increases with aging.
    Obsolescent,
    /// Solidified GGS: global sclerosis associated with hypertension-related injury.
    Solidified,
    /// Disappearing GGS: end stage in which the tuft merges into fibrotic interstitium.
    Disappearing,
    /// Anything that is not a glomerulus.
    NonGlomerular,
}

impl GlomClass {
    /// All classes in canonical order. Probability vectors and confusion
    /// matrices index classes in this order.
    pub const ALL: [GlomClass; 5] = [
        GlomClass::Normal,
        GlomClass::Obsolescent,
        GlomClass::Solidified,
        GlomClass::Disappearing,
        GlomClass::NonGlomerular,
    ];

    pub const COUNT: usize = 5;

    /// Canonical index of this class within [`GlomClass::ALL`].
    pub fn index(self) -> usize {
        match self {
            GlomClass::Normal => 0,
            GlomClass::Obsolescent => 1,
            GlomClass::Solidified => 2,
            GlomClass::Disappearing => 3,
            GlomClass::NonGlomerular => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<GlomClass> {
        Self::ALL.get(i).copied()
    }

    /// Canonical label string used in manifests, JSON lines, and XML.
    pub fn as_str(self) -> &'static str {
        match self {
            GlomClass::Normal => "normal",
            GlomClass::Obsolescent => "obsolescent",
            GlomClass::Solidified => "solidified",
            GlomClass::Disappearing => "disappearing",
            GlomClass::NonGlomerular => "non_glomerular",
        }
    }

    pub fn is_ggs(self) -> bool {
        matches!(
            self,
            GlomClass::Obsolescent | GlomClass::Solidified | GlomClass::Disappearing
        )
    }
}

impl fmt::Display for GlomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GlomClass {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(GlomClass::Normal),
            "obsolescent" => Ok(GlomClass::Obsolescent),
            "solidified" => Ok(GlomClass::Solidified),
            "disappearing" => Ok(GlomClass::Disappearing),
            "non_glomerular" => Ok(GlomClass::NonGlomerular),
            other => Err(TaxonomyError::UnknownLabel(other.to_string())),
        }
    }
}

/// Outcome of collapsing the five classes to the binary external-validation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryLabel {
    /// Any of the three GGS subtypes, merged into one sclerosed class.
    Positive,
    /// Normal glomeruli.
    Negative,
    /// Non-glomerular patches, discarded entirely in the binary setting.
    Dropped,
}

/// Merge rule for binary external validation: the three GGS subtypes form
/// a single positive class, normal stays negative, non-glomerular is dropped.
pub fn to_binary(label: GlomClass) -> BinaryLabel {
    match label {
        GlomClass::Obsolescent | GlomClass::Solidified | GlomClass::Disappearing => {
            BinaryLabel::Positive
        }
        GlomClass::Normal => BinaryLabel::Negative,
        GlomClass::NonGlomerular => BinaryLabel::Dropped,
    }
}

/// Fine-grained GGS subtype, defined only when a label passes the GGS gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FineGgs {
    Obsolescent,
    Solidified,
    Disappearing,
}

/// Position of a label in the three-step decision chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierarchyPath {
    /// First gate: glomerulus at all?
    pub is_glomerulus: bool,
    /// Second gate: globally sclerosed? `None` when the first gate fails.
    pub is_ggs: Option<bool>,
    /// Third gate: which GGS subtype? `None` unless `is_ggs == Some(true)`.
    pub fine: Option<FineGgs>,
}

/// Expand a label into the hierarchical decision chain.
pub fn hierarchy(label: GlomClass) -> HierarchyPath {
    match label {
        GlomClass::NonGlomerular => HierarchyPath {
            is_glomerulus: false,
            is_ggs: None,
            fine: None,
        },
        GlomClass::Normal => HierarchyPath {
            is_glomerulus: true,
            is_ggs: Some(false),
            fine: None,
        },
        GlomClass::Obsolescent => HierarchyPath {
            is_glomerulus: true,
            is_ggs: Some(true),
            fine: Some(FineGgs::Obsolescent),
        },
        GlomClass::Solidified => HierarchyPath {
            is_glomerulus: true,
            is_ggs: Some(true),
            fine: Some(FineGgs::Solidified),
        },
        GlomClass::Disappearing => HierarchyPath {
            is_glomerulus: true,
            is_ggs: Some(true),
            fine: Some(FineGgs::Disappearing),
        },
    }
}

/// One labeled patch in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_id: String,
    pub patient_id: String,
    pub wsi_id: String,
    pub label: GlomClass,
}

/// Labeled-patch inventory with patient provenance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tally entries per class.
    pub fn class_counts(&self) -> BTreeMap<GlomClass, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    /// Read a manifest from CSV with header `patch_id,patient_id,wsi_id,label`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TaxonomyError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut entries = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |idx: usize, name: &'static str| {
                record
                    .get(idx)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .ok_or(TaxonomyError::MissingField { row: i + 1, field: name })
            };
            entries.push(ManifestEntry {
                patch_id: field(0, "patch_id")?,
                patient_id: field(1, "patient_id")?,
                wsi_id: field(2, "wsi_id")?,
                label: field(3, "label")?.parse()?,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, TaxonomyError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TaxonomyError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["patch_id", "patient_id", "wsi_id", "label"])?;
        for e in &self.entries {
            wtr.write_record([&e.patch_id, &e.patient_id, &e.wsi_id, e.label.as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-class counts with percentages rounded to the nearest integer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassDistribution {
    pub total: usize,
    pub per_class: Vec<ClassShare>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassShare {
    pub class: GlomClass,
    pub count: usize,
    /// `round(100 * count / total)`; raw counts are authoritative.
    pub percent: u32,
}

/// Count entries per class. An empty manifest yields an empty report.
pub fn class_distribution(manifest: &DatasetManifest) -> ClassDistribution {
    let counts = manifest.class_counts();
    let total = manifest.len();
    let per_class = counts
        .into_iter()
        .map(|(class, count)| ClassShare {
            class,
            count,
            percent: ((count as f64) * 100.0 / (total as f64)).round() as u32,
        })
        .collect();
    ClassDistribution { total, per_class }
}
