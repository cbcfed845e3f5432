use super::{BackboneConfig, Builder, Family, Result, ZooError};
use crate::graph::NetworkGraph;
use crate::tensor::Padding::Same;
use crate::tensor::PoolKind::{Avg, Max};

/// Bottleneck width is this many times the growth rate.
pub const BN_SIZE: usize = 4;

/// DenseNet-121 with pre-activation dense layers
/// (BN-ReLU-conv1x1-BN-ReLU-conv3x3) and channel-halving transitions.
pub fn build_densenet121(cfg: &BackboneConfig) -> Result<NetworkGraph> {
    if cfg.family != Family::Densenet121 {
        return Err(ZooError::Config("expected the densenet121 family".into()));
    }
    cfg.validate()?;
    let blocks = cfg.blocks();
    let growth = cfg.growth_rate;
    let mut b = Builder::new("densenet121", cfg);
    let init = b.width(64);
    let c = b.conv("stem.conv", ("input", cfg.input_channels), init, [7, 7], 2, Same);
    let n = b.bn("stem.bn", (&c, init));
    let r = b.relu("stem.relu", &n);
    let mut x = (b.pool("stem.pool", &r, Max, 3, 2, Same), init);

    for (bi, &layers) in blocks.iter().enumerate() {
        for l in 0..layers {
            let p = format!("block{}.layer{}", bi + 1, l + 1);
            let n1 = b.bn(&format!("{p}.norm1"), (&x.0, x.1));
            let r1 = b.relu(&format!("{p}.relu1"), &n1);
            let c1 = b.conv(&format!("{p}.conv1"), (&r1, x.1), BN_SIZE * growth, [1, 1], 1, Same);
            let n2 = b.bn(&format!("{p}.norm2"), (&c1, BN_SIZE * growth));
            let r2 = b.relu(&format!("{p}.relu2"), &n2);
            let c2 = b.conv(&format!("{p}.conv2"), (&r2, BN_SIZE * growth), growth, [3, 3], 1, Same);
            x = b.concat(&format!("{p}.concat"), &[x, (c2, growth)]);
        }
        if bi + 1 < blocks.len() {
            let p = format!("transition{}", bi + 1);
            let half = (x.1 / 2).max(1);
            let n = b.bn(&format!("{p}.norm"), (&x.0, x.1));
            let r = b.relu(&format!("{p}.relu"), &n);
            let c = b.conv(&format!("{p}.conv"), (&r, x.1), half, [1, 1], 1, Same);
            x = (b.pool(&format!("{p}.pool"), &c, Avg, 2, 2, Same), half);
        }
    }
    let n = b.bn("final.bn", (&x.0, x.1));
    let r = b.relu("final.relu", &n);
    b.finish((&r, x.1), cfg)
}
