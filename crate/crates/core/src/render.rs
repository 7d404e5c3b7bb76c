//! PNG slice overlays: a grayscale modality slice with labels blended on top
//! (edema green, non-enhancing core red, enhancing core yellow).

use crate::error::{Error, Result};
use crate::volume::{LabelMap, VolumeSet};

pub const OVERLAY_ALPHA: f32 = 0.5;

/// Overlay colour of a label, if it has one.
pub fn label_color(label: u8) -> Option<[u8; 3]> {
    match label {
        2 => Some([0, 255, 0]),
        1 => Some([255, 0, 0]),
        4 => Some([255, 255, 0]),
        _ => None,
    }
}

/// 8-bit RGB image, rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Format { what: "png", detail: e.to_string() };
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&self.data).map_err(fail)?;
        w.finish().map_err(fail)?;
        Ok(out)
    }
}

/// Slice `index` across `axis` (0 = x, 1 = y, 2 = z) of `channel`. The two
/// remaining axes become columns and rows in increasing order. Intensities
/// are scaled by the channel's range over the whole volume.
pub fn render_overlay(
    volume: &VolumeSet,
    channel: usize,
    labels: Option<&LabelMap>,
    axis: usize,
    index: usize,
) -> Result<RgbImage> {
    let dims = volume.dims();
    if axis > 2 || index >= dims[axis] {
        return Err(Error::invalid(format!("slice {index} on axis {axis} is outside extents {dims:?}")));
    }
    if channel >= volume.channels() {
        return Err(Error::invalid(format!("channel {channel} of {}", volume.channels())));
    }
    if let Some(l) = labels {
        if l.dims() != dims {
            return Err(Error::shape(format!("labels {:?} against volume {dims:?}", l.dims())));
        }
    }
    let data = volume.channel(channel);
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let [ca, ra] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let (width, height) = (dims[ca], dims[ra]);
    let mut out = Vec::with_capacity(3 * width * height);
    for row in 0..height {
        for col in 0..width {
            let mut p = [0; 3];
            p[axis] = index;
            p[ca] = col;
            p[ra] = row;
            let i = (p[0] * dims[1] + p[1]) * dims[2] + p[2];
            let g = ((data[i] - lo) * scale).round().clamp(0.0, 255.0);
            let rgb = match labels.and_then(|l| label_color(l.data()[i])) {
                Some(c) => c.map(|c| ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c as f32).round() as u8),
                None => [g as u8; 3],
            };
            out.extend_from_slice(&rgb);
        }
    }
    Ok(RgbImage { width, height, data: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume() -> VolumeSet {
        VolumeSet::new([4, 3, 2], 1, (0..24).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn background_is_pure_gray() {
        let img = render_overlay(&volume(), 0, Some(&LabelMap::zeros([4, 3, 2])), 2, 1).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert!(img.data.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        // voxel (3, 2, 1) is the maximum
        assert_eq!(img.pixel(3, 2), [255; 3]);
        assert_eq!(img.pixel(0, 0), [11; 3]);
    }

    #[test]
    fn enhancing_voxel_is_yellow() {
        let mut labels = vec![0; 24];
        labels[(2 * 3 + 1) * 2 + 1] = 4;
        let l = LabelMap::new([4, 3, 2], labels).unwrap();
        let img = render_overlay(&volume(), 0, Some(&l), 2, 1).unwrap();
        let [r, g, b] = img.pixel(2, 1);
        assert!(r == g && r > b && b < 128, "{r} {g} {b}");
        let gray = img.pixel(1, 1)[0];
        assert!(gray < r);
    }

    #[test]
    fn rejects_out_of_range_slice_and_is_deterministic() {
        assert!(render_overlay(&volume(), 0, None, 2, 2).is_err());
        assert!(render_overlay(&volume(), 0, None, 3, 0).is_err());
        let a = render_overlay(&volume(), 0, None, 0, 1).unwrap().to_png().unwrap();
        let b = render_overlay(&volume(), 0, None, 0, 1).unwrap().to_png().unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[1..4], b"PNG");
    }
}
