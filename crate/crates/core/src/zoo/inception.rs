use super::{BackboneConfig, Builder, Family, Result, ZooError};
use crate::graph::NetworkGraph;
use crate::tensor::Padding::{Same, Valid};
use crate::tensor::PoolKind::{Avg, Max};

type T = (String, usize);

fn block_a(b: &mut Builder, name: &str, x: &T, pool_features: usize) -> T {
    let x = (x.0.as_str(), x.1);
    let w = |c| b.width(c);
    let (c64, c48, c96, cp) = (w(64), w(48), w(96), w(pool_features));
    let b1 = b.conv_bn_relu(&format!("{name}.branch1x1"), x, c64, [1, 1], 1, Same);
    let b5 = b.conv_bn_relu(&format!("{name}.branch5x5_1"), x, c48, [1, 1], 1, Same);
    let b5 = b.conv_bn_relu(&format!("{name}.branch5x5_2"), (&b5.0, b5.1), c64, [5, 5], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_1"), x, c64, [1, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_2"), (&d.0, d.1), c96, [3, 3], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_3"), (&d.0, d.1), c96, [3, 3], 1, Same);
    let p = b.pool(&format!("{name}.branch_pool.pool"), x.0, Avg, 3, 1, Same);
    let p = b.conv_bn_relu(&format!("{name}.branch_pool"), (&p, x.1), cp, [1, 1], 1, Same);
    b.concat(&format!("{name}.concat"), &[b1, b5, d, p])
}

fn block_b(b: &mut Builder, name: &str, x: &T) -> T {
    let x = (x.0.as_str(), x.1);
    let (c384, c64, c96) = (b.width(384), b.width(64), b.width(96));
    let b3 = b.conv_bn_relu(&format!("{name}.branch3x3"), x, c384, [3, 3], 2, Valid);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_1"), x, c64, [1, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_2"), (&d.0, d.1), c96, [3, 3], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_3"), (&d.0, d.1), c96, [3, 3], 2, Valid);
    let p = b.pool(&format!("{name}.branch_pool"), x.0, Max, 3, 2, Valid);
    b.concat(&format!("{name}.concat"), &[b3, d, (p, x.1)])
}

/// Factorized 7x7 block (1x7 and 7x1 convolutions).
fn block_c(b: &mut Builder, name: &str, x: &T, c7: usize) -> T {
    let x = (x.0.as_str(), x.1);
    let (c192, c7) = (b.width(192), b.width(c7));
    let b1 = b.conv_bn_relu(&format!("{name}.branch1x1"), x, c192, [1, 1], 1, Same);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7_1"), x, c7, [1, 1], 1, Same);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7_2"), (&s.0, s.1), c7, [1, 7], 1, Same);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7_3"), (&s.0, s.1), c192, [7, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch7x7dbl_1"), x, c7, [1, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch7x7dbl_2"), (&d.0, d.1), c7, [7, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch7x7dbl_3"), (&d.0, d.1), c7, [1, 7], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch7x7dbl_4"), (&d.0, d.1), c7, [7, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch7x7dbl_5"), (&d.0, d.1), c192, [1, 7], 1, Same);
    let p = b.pool(&format!("{name}.branch_pool.pool"), x.0, Avg, 3, 1, Same);
    let p = b.conv_bn_relu(&format!("{name}.branch_pool"), (&p, x.1), c192, [1, 1], 1, Same);
    b.concat(&format!("{name}.concat"), &[b1, s, d, p])
}

fn block_d(b: &mut Builder, name: &str, x: &T) -> T {
    let x = (x.0.as_str(), x.1);
    let (c192, c320) = (b.width(192), b.width(320));
    let t = b.conv_bn_relu(&format!("{name}.branch3x3_1"), x, c192, [1, 1], 1, Same);
    let t = b.conv_bn_relu(&format!("{name}.branch3x3_2"), (&t.0, t.1), c320, [3, 3], 2, Valid);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7x3_1"), x, c192, [1, 1], 1, Same);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7x3_2"), (&s.0, s.1), c192, [1, 7], 1, Same);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7x3_3"), (&s.0, s.1), c192, [7, 1], 1, Same);
    let s = b.conv_bn_relu(&format!("{name}.branch7x7x3_4"), (&s.0, s.1), c192, [3, 3], 2, Valid);
    let p = b.pool(&format!("{name}.branch_pool"), x.0, Max, 3, 2, Valid);
    b.concat(&format!("{name}.concat"), &[t, s, (p, x.1)])
}

/// Expanded filter bank (1x3 and 3x1 splits).
fn block_e(b: &mut Builder, name: &str, x: &T) -> T {
    let x = (x.0.as_str(), x.1);
    let (c320, c384, c448, c192) = (b.width(320), b.width(384), b.width(448), b.width(192));
    let b1 = b.conv_bn_relu(&format!("{name}.branch1x1"), x, c320, [1, 1], 1, Same);
    let t = b.conv_bn_relu(&format!("{name}.branch3x3_1"), x, c384, [1, 1], 1, Same);
    let ta = b.conv_bn_relu(&format!("{name}.branch3x3_2a"), (&t.0, t.1), c384, [1, 3], 1, Same);
    let tb = b.conv_bn_relu(&format!("{name}.branch3x3_2b"), (&t.0, t.1), c384, [3, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_1"), x, c448, [1, 1], 1, Same);
    let d = b.conv_bn_relu(&format!("{name}.branch3x3dbl_2"), (&d.0, d.1), c384, [3, 3], 1, Same);
    let da = b.conv_bn_relu(&format!("{name}.branch3x3dbl_3a"), (&d.0, d.1), c384, [1, 3], 1, Same);
    let db = b.conv_bn_relu(&format!("{name}.branch3x3dbl_3b"), (&d.0, d.1), c384, [3, 1], 1, Same);
    let p = b.pool(&format!("{name}.branch_pool.pool"), x.0, Avg, 3, 1, Same);
    let p = b.conv_bn_relu(&format!("{name}.branch_pool"), (&p, x.1), c192, [1, 1], 1, Same);
    b.concat(&format!("{name}.concat"), &[b1, ta, tb, da, db, p])
}

fn stage_name(stage: u8, i: usize) -> String {
    format!("mixed_{stage}{}", (b'b' + i as u8) as char)
}

/// Inception-v3 without the auxiliary classifier.
///
/// Stem and grid reductions use valid padding, everything else same
/// padding. At full width a 128x128 input reaches the last block at 2x2.
pub fn build_inception_v3(cfg: &BackboneConfig) -> Result<NetworkGraph> {
    if cfg.family != Family::InceptionV3 {
        return Err(ZooError::Config("expected the inception_v3 family".into()));
    }
    cfg.validate()?;
    let blocks = cfg.blocks();
    let mut b = Builder::new("inception_v3", cfg);
    let w = |b: &Builder, c| b.width(c);
    let x = ("input", cfg.input_channels);
    let (c32, c64, c80, c192) = (w(&b, 32), w(&b, 64), w(&b, 80), w(&b, 192));
    let s = b.conv_bn_relu("stem.conv1a", x, c32, [3, 3], 2, Valid);
    let s = b.conv_bn_relu("stem.conv2a", (&s.0, s.1), c32, [3, 3], 1, Valid);
    let s = b.conv_bn_relu("stem.conv2b", (&s.0, s.1), c64, [3, 3], 1, Same);
    let p = b.pool("stem.pool1", &s.0, Max, 3, 2, Valid);
    let s = b.conv_bn_relu("stem.conv3b", (&p, s.1), c80, [1, 1], 1, Valid);
    let s = b.conv_bn_relu("stem.conv4a", (&s.0, s.1), c192, [3, 3], 1, Valid);
    let p = b.pool("stem.pool2", &s.0, Max, 3, 2, Valid);
    let mut x: T = (p, s.1);

    for i in 0..blocks[0] {
        x = block_a(&mut b, &stage_name(5, i), &x, if i == 0 { 32 } else { 64 });
    }
    if blocks[1] > 0 || blocks[2] > 0 {
        x = block_b(&mut b, "mixed_6a", &x);
        for i in 0..blocks[1] {
            let c7 = match i {
                0 => 128,
                _ if i + 1 == blocks[1] => 192,
                _ => 160,
            };
            x = block_c(&mut b, &stage_name(6, i), &x, c7);
        }
    }
    if blocks[2] > 0 {
        x = block_d(&mut b, "mixed_7a", &x);
        for i in 0..blocks[2] {
            x = block_e(&mut b, &stage_name(7, i), &x);
        }
    }
    b.finish((&x.0, x.1), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_shapes, validate, LayerSpec};
    use std::collections::HashMap;

    fn shapes(g: &NetworkGraph, dims: Vec<usize>) -> crate::graph::ShapeTable {
        infer_shapes(g, &HashMap::from([("input".to_string(), dims)])).unwrap()
    }

    #[test]
    fn full_size_on_roi_input() {
        let g = build_inception_v3(&BackboneConfig::full(Family::InceptionV3, 3)).unwrap();
        assert_eq!(validate(&g), vec![]);
        let t = shapes(&g, vec![1, 3, 128, 128]);
        assert_eq!(t["head.softmax"], vec![1, 3]);
        assert_eq!(t["mixed_5b.concat"][1], 256);
        assert_eq!(t["mixed_5d.concat"][1], 288);
        assert_eq!(t["mixed_6e.concat"][1], 768);
        assert_eq!(t["mixed_7a.concat"][1], 1280);
        assert_eq!(t["mixed_7c.concat"], vec![1, 2048, 2, 2]);
        let t = shapes(&g, vec![1, 3, 256, 256]);
        assert_eq!(t["head.softmax"], vec![1, 3]);
    }

    #[test]
    fn has_factorized_convs() {
        let g = build_inception_v3(&BackboneConfig::full(Family::InceptionV3, 3)).unwrap();
        let has = |k: &[usize]| {
            g.nodes
                .iter()
                .any(|n| matches!(&n.layer, LayerSpec::Conv(c) if c.kernel == k))
        };
        assert!(has(&[1, 7]) && has(&[7, 1]) && has(&[3, 3]));
    }

    #[test]
    fn tiny_runs_at_32() {
        let g = build_inception_v3(&BackboneConfig::tiny(Family::InceptionV3, 3)).unwrap();
        assert_eq!(shapes(&g, vec![1, 3, 32, 32])["head.softmax"], vec![1, 3]);
    }
}
