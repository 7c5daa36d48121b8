//! Operations shared by the batch commands and the HTTP service, so both
//! produce identical bytes for identical inputs.

use anyhow::{anyhow, bail, Context, Result};

use n3f::apps::{self, FeatureSource, QueryDescriptor, QueryRegion};
use n3f::imageio;
use n3f::renderer::{self, OccupancyOverride, RenderOutput};
use n3f::teacher::FeatureMap;
use n3f::trainer::Checkpoint;

/// 256-entry heatmap palette: piecewise-linear through five anchor colors
/// (dark purple, blue, teal, green, yellow) with integer interpolation.
pub const COLORMAP: [[u8; 3]; 256] = build_colormap();

const ANCHORS: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

const fn build_colormap() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        // 4 segments over indices 0..=255
        let pos = i * 4;
        let seg = if pos / 255 >= 4 { 3 } else { pos / 255 };
        let frac = pos - seg * 255;
        let mut c = 0;
        while c < 3 {
            let a = ANCHORS[seg][c] as i32;
            let b = ANCHORS[seg + 1][c] as i32;
            let num = (b - a) * frac as i32;
            let step = if num >= 0 { (num + 127) / 255 } else { (num - 127) / 255 };
            out[i][c] = (a + step) as u8;
            c += 1;
        }
        i += 1;
    }
    out
}

/// Largest displayed distance; chords between unit vectors never exceed 2.
const HEATMAP_RANGE: f64 = 2.0;

/// Close pixels are bright, far or featureless pixels dark.
pub fn heatmap_rgb(distances: &[f64]) -> Vec<u8> {
    distances
        .iter()
        .flat_map(|&d| {
            let t = (d / HEATMAP_RANGE).clamp(0.0, 1.0);
            COLORMAP[255 - (t * 255.0).round() as usize]
        })
        .collect()
}

pub fn heatmap_png(distances: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    Ok(imageio::encode_rgb8(width, height, &heatmap_rgb(distances))?)
}

/// Row-major little-endian `f32` grid.
pub fn raw_grid(distances: &[f64]) -> Vec<u8> {
    distances.iter().flat_map(|&d| (d as f32).to_le_bytes()).collect()
}

pub fn mask_png(mask: &[bool], width: usize, height: usize) -> Result<Vec<u8>> {
    let px: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    Ok(imageio::encode_gray8(width, height, &px)?)
}

pub fn rgb_png(out: &RenderOutput) -> Result<Vec<u8>> {
    let px: Vec<u8> = out.rgb.iter().map(|&v| imageio::to_u8(v as f64)).collect();
    Ok(imageio::encode_rgb8(out.width, out.height, &px)?)
}

/// Pixels whose accumulated opacity reaches one half.
pub fn opacity_mask(out: &RenderOutput) -> Vec<bool> {
    out.acc.iter().map(|&a| a >= 0.5).collect()
}

pub fn render_view(ckpt: &Checkpoint, view: usize, occupancy: Option<&dyn OccupancyOverride>) -> Result<RenderOutput> {
    let camera = ckpt
        .meta
        .cameras
        .get(view)
        .ok_or_else(|| anyhow!("view {view} out of range (checkpoint has {} cameras)", ckpt.meta.cameras.len()))?;
    Ok(renderer::render_image(&ckpt.field, camera, &ckpt.meta.render_config(), occupancy)?)
}

pub fn region_from_mask_file(path: &std::path::Path, view: usize) -> Result<QueryRegion> {
    let (w, h, mask) = imageio::read_mask(path).with_context(|| format!("reading query mask {}", path.display()))?;
    Ok(QueryRegion::new(view, w, h, mask)?)
}

/// Descriptor averaged over `region` of a distilled feature map.
pub fn descriptor(features: &FeatureMap, region: &QueryRegion, normalize: bool) -> Result<QueryDescriptor> {
    if (features.height(), features.width()) != (region.height, region.width) {
        bail!(
            "mask is {}×{} but view {} renders at {}×{}",
            region.width,
            region.height,
            region.view,
            features.width(),
            features.height()
        );
    }
    Ok(apps::mean_descriptor(features, region, normalize, FeatureSource::Distilled)?)
}

pub fn distances(features: &FeatureMap, desc: &QueryDescriptor) -> Result<Vec<f64>> {
    Ok(apps::distance_map(features, desc)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_spans_anchors() {
        assert_eq!(COLORMAP[0], ANCHORS[0]);
        assert_eq!(COLORMAP[255], ANCHORS[4]);
    }

    #[test]
    fn heatmap_is_bright_when_close() {
        let px = heatmap_rgb(&[0.0, 2.0, apps::ZERO_FEATURE_DISTANCE]);
        assert_eq!(&px[..3], &ANCHORS[4]);
        assert_eq!(&px[3..6], &ANCHORS[0]);
        assert_eq!(&px[6..9], &ANCHORS[0]);
    }

    #[test]
    fn raw_grid_is_little_endian_f32() {
        let bytes = raw_grid(&[1.0, 0.5]);
        assert_eq!(bytes.len(), 8);
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 0.5);
    }
}
