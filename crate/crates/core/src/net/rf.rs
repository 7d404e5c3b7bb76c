//! Theoretical receptive field along the trunk of a network.

use super::config::{NetworkConfig, Stage};

/// One layer as seen by the receptive-field recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfLayer {
    pub extent: [usize; 3],
    pub dilation: [usize; 3],
    pub stride: [usize; 3],
}

impl RfLayer {
    pub fn conv(extent: [usize; 3], dilation: [usize; 3]) -> Self {
        Self { extent, dilation, stride: [1; 3] }
    }

    pub fn pool2() -> Self {
        Self { extent: [2, 2, 1], dilation: [1; 3], stride: [2, 2, 1] }
    }
}

/// `1 + Σ (k − 1)·d·J` per axis, where `J` is the product of the strides of
/// all earlier layers.
pub fn receptive_field_of(layers: &[RfLayer]) -> [usize; 3] {
    let mut rf = [1; 3];
    let mut jump = [1; 3];
    for l in layers {
        for a in 0..3 {
            rf[a] += (l.extent[a] - 1) * l.dilation[a] * jump[a];
            jump[a] *= l.stride[a];
        }
    }
    rf
}

/// Trunk layers from the input to the deepest prediction head. Heads,
/// upsampling and the fusion convolution sit off the trunk and are not
/// counted.
pub fn trunk_layers(config: &NetworkConfig) -> Vec<RfLayer> {
    let last_head = config.stages.iter().rposition(|s| matches!(s, Stage::Head { .. })).unwrap_or(config.stages.len());
    let mut out = Vec::new();
    for s in &config.stages[..last_head] {
        match *s {
            Stage::Residual { dilation } => {
                out.extend([RfLayer::conv([3, 3, 1], [dilation, dilation, 1]); 2]);
            }
            Stage::InterSlice => out.push(RfLayer::conv([1, 1, 3], [1; 3])),
            Stage::Downsample => out.push(RfLayer::pool2()),
            Stage::Head { .. } => {}
        }
    }
    out
}

/// `(rf_x, rf_y, rf_z)` of the deepest output path.
pub fn receptive_field(config: &NetworkConfig) -> [usize; 3] {
    receptive_field_of(&trunk_layers(config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetKind;

    #[test]
    fn single_layers() {
        assert_eq!(receptive_field_of(&[RfLayer::conv([3, 3, 1], [1; 3])]), [3, 3, 1]);
        assert_eq!(
            receptive_field_of(&[RfLayer::conv([3, 3, 1], [1; 3]), RfLayer::conv([1, 1, 3], [1; 3])]),
            [3, 3, 3]
        );
        assert_eq!(receptive_field_of(&[RfLayer::conv([3, 3, 1], [2, 2, 1])]), [5, 5, 1]);
    }

    #[test]
    fn canonical_values() {
        let rf = |k| receptive_field(&NetworkConfig::canonical(k, 8));
        assert_eq!(rf(NetKind::WNet), [220, 220, 9]);
        assert_eq!(rf(NetKind::TNet), [220, 220, 9]);
        assert_eq!(rf(NetKind::ENet), [122, 122, 9]);
    }
}
