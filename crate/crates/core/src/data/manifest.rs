use std::collections::HashSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{volume_header, DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Grade {
    Normal,
    LowGrade,
    HighGrade,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::Normal, Grade::LowGrade, Grade::HighGrade];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Grade> {
        Grade::ALL.get(i).copied()
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g as u8
    }
}

impl TryFrom<u8> for Grade {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Grade, String> {
        Grade::from_index(v as usize).ok_or_else(|| format!("unknown label {v}, expected 0, 1 or 2"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeCase {
    pub id: String,
    pub label: Grade,
    /// Modality tag to volume path. Relative paths resolve against the
    /// manifest's directory when loaded.
    pub modalities: IndexMap<String, PathBuf>,
    /// Inclusive `[lo, hi]`.
    pub pancreas_slices: [usize; 2],
    pub center_slice: usize,
}

impl VolumeCase {
    pub fn lo(&self) -> usize {
        self.pancreas_slices[0]
    }

    pub fn hi(&self) -> usize {
        self.pancreas_slices[1]
    }

    pub fn range_len(&self) -> usize {
        self.hi() + 1 - self.lo()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub cases: Vec<VolumeCase>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    id: String,
    label: i64,
    modalities: IndexMap<String, PathBuf>,
    pancreas_slices: [usize; 2],
    center_slice: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    cases: Vec<RawCase>,
}

/// Parses a manifest, resolves volume paths and checks every case against
/// the headers of its volumes.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| DataError::ManifestParse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(raw.cases.len());
    for rc in raw.cases {
        let label = u8::try_from(rc.label)
            .ok()
            .and_then(|l| Grade::try_from(l).ok())
            .ok_or_else(|| DataError::case(&rc.id, format!("unknown label {}", rc.label)))?;
        if !seen.insert(rc.id.clone()) {
            return Err(DataError::case(&rc.id, "duplicate case id"));
        }
        let modalities = rc
            .modalities
            .into_iter()
            .map(|(m, p)| (m, if p.is_absolute() { p } else { base.join(p) }))
            .collect();
        let case = VolumeCase {
            id: rc.id,
            label,
            modalities,
            pancreas_slices: rc.pancreas_slices,
            center_slice: rc.center_slice,
        };
        check_case(&case)?;
        cases.push(case);
    }
    Ok(Manifest { cases })
}

fn check_case(case: &VolumeCase) -> Result<()> {
    if case.modalities.is_empty() {
        return Err(DataError::case(&case.id, "no modalities"));
    }
    let [lo, hi] = case.pancreas_slices;
    if !(lo <= case.center_slice && case.center_slice <= hi) {
        return Err(DataError::case(
            &case.id,
            format!("need lo <= center <= hi, got [{lo}, {hi}] with center {}", case.center_slice),
        ));
    }
    let mut dims0: Option<(&str, [usize; 3])> = None;
    for (m, p) in &case.modalities {
        if !p.is_file() {
            return Err(DataError::case(
                &case.id,
                format!("modality {m:?} file {} not found", p.display()),
            ));
        }
        let (dims, _) = volume_header(p)?;
        if hi >= dims[0] {
            return Err(DataError::case(
                &case.id,
                format!("slice range [{lo}, {hi}] exceeds depth {} of {m:?}", dims[0]),
            ));
        }
        match dims0 {
            None => dims0 = Some((m, dims)),
            Some((m0, d0)) if d0 != dims => {
                return Err(DataError::case(
                    &case.id,
                    format!("{m0:?} has dims {d0:?} but {m:?} has {dims:?}"),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Writes `manifest` as JSON. Paths are written as given.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| DataError::io(path, e))
}
