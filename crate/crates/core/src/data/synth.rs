use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_manifest, save_volume, DataError, Grade, Manifest, Result, Volume, VolumeCase};

/// Paired T1/T2 phantoms: an elliptic gland crossed by a duct whose radius
/// grows with the grade, plus uniform noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Cases per grade, in grade order.
    pub per_class: [usize; 3],
    pub seed: u64,
    pub depth: usize,
    /// In-plane side length.
    pub size: usize,
    pub spacing: [f32; 3],
}

impl SynthConfig {
    pub fn new(per_class: [usize; 3], seed: u64) -> Self {
        SynthConfig {
            per_class,
            seed,
            depth: 16,
            size: 64,
            spacing: [3.0, 1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class.contains(&0) {
            return Err(DataError::Config(format!(
                "every class needs at least one case, got {:?}",
                self.per_class
            )));
        }
        if self.depth < 12 || self.size < 16 {
            return Err(DataError::Config(format!(
                "phantoms need depth >= 12 and size >= 16, got {} and {}",
                self.depth, self.size
            )));
        }
        Ok(())
    }
}

/// Duct radius as a fraction of the in-plane size, per grade.
const DUCT_RADIUS: [f64; 3] = [0.05, 0.1, 0.16];
const NOISE: f64 = 0.04;

struct Intensity {
    background: f64,
    gland: f64,
    duct: f64,
}

const T1: Intensity = Intensity {
    background: 0.25,
    gland: 0.6,
    duct: 0.15,
};
const T2: Intensity = Intensity {
    background: 0.15,
    gland: 0.35,
    duct: 0.95,
};

/// Writes `volumes/*.innv` and `manifest.json` under `out_dir` and returns
/// the manifest path. Output is a pure function of `cfg`.
pub fn make_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| DataError::io(&vol_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    for grade in Grade::ALL {
        for _ in 0..cfg.per_class[grade.index()] {
            let id = format!("case_{:03}", cases.len());
            let (case, t1, t2) = phantom(cfg, grade, &id, &mut rng);
            for (m, v) in [("T1", &t1), ("T2", &t2)] {
                save_volume(v, out_dir.join(&case.modalities[m]))?;
            }
            cases.push(case);
        }
    }
    let path = out_dir.join("manifest.json");
    save_manifest(&Manifest { cases }, &path)?;
    Ok(path)
}

fn phantom(cfg: &SynthConfig, grade: Grade, id: &str, rng: &mut ChaCha8Rng) -> (VolumeCase, Volume, Volume) {
    let (d, s) = (cfg.depth, cfg.size);
    let len = rng.gen_range(7..=9).min(d - 4);
    let lo = rng.gen_range(2..=d - len - 2);
    let hi = lo + len - 1;
    let center = ((lo + hi) / 2).saturating_add_signed(rng.gen_range(-1..=1)).clamp(lo, hi);

    let sf = s as f64;
    let cy = sf / 2.0 + rng.gen_range(-0.06..0.06) * sf;
    let cx = sf / 2.0 + rng.gen_range(-0.06..0.06) * sf;
    let (semi_a, semi_b) = (0.36 * sf, 0.26 * sf);
    let tilt: f64 = rng.gen_range(-0.5..0.5);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let radius = DUCT_RADIUS[grade.index()] * sf * rng.gen_range(0.9..1.1);
    let (dir_y, dir_x) = angle.sin_cos();

    let mut t1 = Vec::with_capacity(d * s * s);
    let mut t2 = Vec::with_capacity(d * s * s);
    for z in 0..d {
        let scale = if (lo..=hi).contains(&z) {
            1.0 - 0.5 * (z as f64 - center as f64).abs() / (len as f64 / 2.0 + 1.0)
        } else {
            0.0
        };
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (u, v) = (dx * tilt.cos() + dy * tilt.sin(), dy * tilt.cos() - dx * tilt.sin());
                let in_gland = scale > 0.0
                    && (u / (semi_a * scale)).powi(2) + (v / (semi_b * scale)).powi(2) <= 1.0;
                let in_duct = in_gland && (dx * dir_y - dy * dir_x).abs() <= radius;
                for (out, p) in [(&mut t1, &T1), (&mut t2, &T2)] {
                    let base = if in_duct {
                        p.duct
                    } else if in_gland {
                        p.gland
                    } else {
                        p.background
                    };
                    out.push((base + rng.gen_range(-NOISE..NOISE)) as f32);
                }
            }
        }
    }
    let modalities = IndexMap::from([
        ("T1".to_string(), PathBuf::from(format!("volumes/{id}_T1.innv"))),
        ("T2".to_string(), PathBuf::from(format!("volumes/{id}_T2.innv"))),
    ]);
    let case = VolumeCase {
        id: id.to_string(),
        label: grade,
        modalities,
        pancreas_slices: [lo, hi],
        center_slice: center,
    };
    let dims = [d, s, s];
    (
        case,
        Volume::new(dims, cfg.spacing, t1).expect("valid phantom"),
        Volume::new(dims, cfg.spacing, t2).expect("valid phantom"),
    )
}
