use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{load_manifest, load_volume, DataError, Grade, Manifest, Result, VolumeCase};
use crate::inflation::{FusionSpec, FusionStrategy};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 5;

/// Input crop: pancreas ROI or the whole scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Roi,
    Whole,
}

impl InputKind {
    /// In-plane side length after resizing.
    pub fn size(self) -> usize {
        match self {
            InputKind::Roi => 128,
            InputKind::Whole => 256,
        }
    }

    pub fn default_batch(self) -> usize {
        match self {
            InputKind::Roi => 32,
            InputKind::Whole => 16,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Roi => "roi",
            InputKind::Whole => "whole",
        }
    }
}

impl FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "roi" => Ok(InputKind::Roi),
            "whole" => Ok(InputKind::Whole),
            other => Err(format!("unknown input kind {other:?}, expected roi or whole")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Odd number of consecutive slices per sample.
    pub k: usize,
    /// In-plane side length after resizing.
    pub size: usize,
    pub fusion: FusionSpec,
}

impl WindowConfig {
    pub fn new(k: usize, size: usize, fusion: FusionSpec) -> Result<Self> {
        let c = WindowConfig { k, size, fusion };
        c.validate()?;
        Ok(c)
    }

    pub fn for_input(kind: InputKind, fusion: FusionSpec) -> Self {
        WindowConfig {
            k: DEFAULT_K,
            size: kind.size(),
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(DataError::Config(format!("k must be odd and positive, got {}", self.k)));
        }
        if self.size == 0 {
            return Err(DataError::Config("target size must be >= 1".into()));
        }
        self.fusion
            .validate()
            .map_err(|e| DataError::Config(e.to_string()))
    }
}

/// Slices `start .. start + k` of a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceWindow {
    pub start: usize,
    pub k: usize,
}

impl SliceWindow {
    pub fn slices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.k
    }

    pub fn last(&self) -> usize {
        self.start + self.k - 1
    }
}

fn check_range(case: &VolumeCase, k: usize) -> Result<()> {
    if k == 0 || case.range_len() < k {
        return Err(DataError::RangeTooShort {
            case: case.id.clone(),
            lo: case.lo(),
            hi: case.hi(),
            k,
        });
    }
    Ok(())
}

/// Every window of `k` consecutive slices inside `[lo, hi]`, ascending.
pub fn train_windows(case: &VolumeCase, cfg: &WindowConfig) -> Result<Vec<SliceWindow>> {
    check_range(case, cfg.k)?;
    Ok((case.lo()..=case.hi() + 1 - cfg.k)
        .map(|start| SliceWindow { start, k: cfg.k })
        .collect())
}

/// The window centered on `center_slice`, shifted back inside `[lo, hi]`
/// when it would cross either end.
pub fn test_window(case: &VolumeCase, cfg: &WindowConfig) -> Result<SliceWindow> {
    check_range(case, cfg.k)?;
    let start = case
        .center_slice
        .saturating_sub(cfg.k / 2)
        .clamp(case.lo(), case.hi() + 1 - cfg.k);
    Ok(SliceWindow { start, k: cfg.k })
}

/// Bilinear resize of an `h x w` row-major image with corner-aligned
/// sampling. Constant images stay constant and equal sizes copy exactly.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w, "image is not {h}x{w}");
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let axis = |n: usize, t: usize| -> Vec<(usize, usize, f32)> {
        (0..t)
            .map(|i| {
                let pos = if t > 1 {
                    (i * (n - 1)) as f64 / (t - 1) as f64
                } else {
                    0.0
                };
                let i0 = (pos.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, th), axis(w, tw));
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + fx * (r0[x1] - r0[x0]);
            let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
            out.push(top + fy * (bottom - top));
        }
    }
    out
}

/// Rescales to `[0, 1]` by `(x - min) / (max - min)`; a constant input
/// becomes all zeros.
pub fn normalize_min_max(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// A case with every modality normalized and resized to `size x size`,
/// stored as `D x size x size` stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub id: String,
    pub label: Grade,
    pub depth: usize,
    pub size: usize,
    pub modalities: IndexMap<String, Vec<f32>>,
}

impl PreparedCase {
    pub fn prepare(case: &VolumeCase, size: usize) -> Result<Self> {
        let mut modalities = IndexMap::new();
        let mut depth = None;
        for (m, path) in &case.modalities {
            let mut v = load_volume(path)?;
            match depth {
                None => depth = Some(v.dims[0]),
                Some(d) if d != v.dims[0] => {
                    return Err(DataError::SizeMismatch(format!(
                        "case {:?}: modality {m:?} has depth {} instead of {d}",
                        case.id, v.dims[0]
                    )))
                }
                _ => {}
            }
            normalize_min_max(&mut v.data);
            let [d, h, w] = v.dims;
            let mut stack = Vec::with_capacity(d * size * size);
            for z in 0..d {
                stack.extend(resize_bilinear(v.slice(z), h, w, size, size));
            }
            modalities.insert(m.clone(), stack);
        }
        Ok(PreparedCase {
            id: case.id.clone(),
            label: case.label,
            depth: depth.ok_or_else(|| DataError::Config(format!("case {:?} has no modalities", case.id)))?,
            size,
            modalities,
        })
    }

    fn stack(&self, m: &str) -> Result<&[f32]> {
        self.modalities
            .get(m)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::MissingModality {
                case: self.id.clone(),
                modality: m.to_string(),
            })
    }

    /// Slice `d` of modality `m`, `size * size` values.
    pub fn slice(&self, m: &str, d: usize) -> Result<&[f32]> {
        let plane = self.size * self.size;
        if d >= self.depth {
            return Err(DataError::SizeMismatch(format!(
                "case {:?}: slice {d} outside depth {}",
                self.id, self.depth
            )));
        }
        Ok(&self.stack(m)?[d * plane..(d + 1) * plane])
    }

    /// One slice tiled to 3 channels: `(3, size, size)`.
    pub fn slice_image(&self, m: &str, d: usize) -> Result<Tensor<f32>> {
        let s = self.slice(m, d)?;
        Ok(Tensor::new(vec![3, self.size, self.size], s.repeat(3)).expect("dims match"))
    }
}

/// A manifest with every case prepared at one in-plane size.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<PreparedCase>,
    pub size: usize,
}

impl Dataset {
    pub fn load(manifest: impl AsRef<Path>, size: usize) -> Result<Self> {
        Self::from_manifest(load_manifest(manifest)?, size)
    }

    pub fn from_manifest(manifest: Manifest, size: usize) -> Result<Self> {
        let cases = manifest
            .cases
            .iter()
            .map(|c| PreparedCase::prepare(c, size))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            manifest,
            cases,
            size,
        })
    }

    pub fn labels(&self) -> Vec<Grade> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.cases.iter().position(|c| c.id == id)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// Network inputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    /// `(N, 3|M|, k, S, S)`, modalities in fusion order.
    Early { key: String, tensor: Tensor<f32> },
    /// One `(N, 3, k, S, S)` tensor per modality.
    Intermediate(IndexMap<String, Tensor<f32>>),
}

impl BatchInputs {
    /// Keys match the modality tags of the fused graph's inputs.
    pub fn into_map(self) -> HashMap<String, Tensor<f32>> {
        match self {
            BatchInputs::Early { key, tensor } => HashMap::from([(key, tensor)]),
            BatchInputs::Intermediate(m) => m.into_iter().collect(),
        }
    }
}

/// Stacks windows into `N, C, D, H, W` tensors, each modality tiled to
/// three channels.
pub fn assemble_batch(
    items: &[(&PreparedCase, SliceWindow)],
    cfg: &WindowConfig,
) -> Result<BatchInputs> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(DataError::Config("empty batch".into()));
    }
    let (k, s) = (cfg.k, cfg.size);
    let plane = s * s;
    for (case, w) in items {
        if case.size != s {
            return Err(DataError::SizeMismatch(format!(
                "case {:?} prepared at {}x{} but the window config wants {s}x{s}",
                case.id, case.size, case.size
            )));
        }
        if w.k != k || w.last() >= case.depth {
            return Err(DataError::SizeMismatch(format!(
                "case {:?}: window {:?} does not fit k = {k} and depth {}",
                case.id, w, case.depth
            )));
        }
    }
    let block = |m: &str| -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(items.len() * 3 * k * plane);
        for (case, w) in items {
            let stack = &case.stack(m)?[w.start * plane..(w.last() + 1) * plane];
            for _ in 0..3 {
                out.extend_from_slice(stack);
            }
        }
        Ok(out)
    };
    let n = items.len();
    let mods = &cfg.fusion.modalities;
    match cfg.fusion.strategy {
        FusionStrategy::Intermediate => {
            let mut map = IndexMap::new();
            for m in mods {
                let t = Tensor::new(vec![n, 3, k, s, s], block(m)?).expect("dims match");
                map.insert(m.clone(), t);
            }
            Ok(BatchInputs::Intermediate(map))
        }
        FusionStrategy::Early => {
            let per = 3 * k * plane;
            let blocks = mods.iter().map(|m| block(m)).collect::<Result<Vec<_>>>()?;
            let mut data = Vec::with_capacity(n * per * mods.len());
            for i in 0..n {
                for b in &blocks {
                    data.extend_from_slice(&b[i * per..(i + 1) * per]);
                }
            }
            let tensor = Tensor::new(vec![n, 3 * mods.len(), k, s, s], data).expect("dims match");
            let key = if mods.len() == 1 { mods[0].clone() } else { mods.join("+") };
            Ok(BatchInputs::Early { key, tensor })
        }
    }
}
