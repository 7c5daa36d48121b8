//! 8-bit RGB, 8-bit gray, and 16-bit gray PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: png::DecodingError },
    #[error("{path}: {source}")]
    Encode { path: PathBuf, source: png::EncodingError },
    #[error("{path}: expected {expected}, found {found}")]
    Format { path: PathBuf, expected: &'static str, found: String },
    #[error("buffer of {len} values does not fit {width}×{height}×{channels}")]
    Size { len: usize, width: usize, height: usize, channels: usize },
}

/// Decoded image with interleaved 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Unit-range value to an 8-bit sample.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io { path: path.to_path_buf(), source }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<(), ImageError> {
    let enc_err = |source| ImageError::Encode { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

fn check_len(len: usize, width: usize, height: usize, channels: usize) -> Result<(), ImageError> {
    if len != width * height * channels || width == 0 || height == 0 {
        return Err(ImageError::Size { len, width, height, channels });
    }
    Ok(())
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), ImageError> {
    check_len(rgb.len(), width, height, 3)?;
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), ImageError> {
    check_len(gray.len(), width, height, 1)?;
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, gray)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, gray: &[u16]) -> Result<(), ImageError> {
    check_len(gray.len(), width, height, 1)?;
    let bytes: Vec<u8> = gray.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// In-memory PNG of interleaved 8-bit RGB samples.
pub fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>, ImageError> {
    encode_png(width, height, png::ColorType::Rgb, rgb, 3)
}

pub fn encode_gray8(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>, ImageError> {
    encode_png(width, height, png::ColorType::Grayscale, gray, 1)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, bytes: &[u8], channels: usize) -> Result<Vec<u8>, ImageError> {
    check_len(bytes.len(), width, height, channels)?;
    let enc_err = |source| ImageError::Encode { path: PathBuf::from("<memory>"), source };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(enc_err)?;
        writer.write_image_data(bytes).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}

/// Reads an 8-bit PNG as RGB or gray samples, expanding palettes.
pub fn read_png8(path: &Path) -> Result<Image8, ImageError> {
    let dec_err = |source| ImageError::Decode { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(dec_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(dec_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Format { path: path.to_path_buf(), expected: "8-bit samples", found: format!("{:?}", info.bit_depth) });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(ImageError::Format { path: path.to_path_buf(), expected: "gray or RGB", found: format!("{other:?}") })
        }
    };
    buf.truncate(info.buffer_size());
    Ok(Image8 { width: info.width as usize, height: info.height as usize, channels, data: buf })
}

/// Reads an 8-bit RGB PNG as unit-range floats, `H × W × 3`.
pub fn read_rgb_unit(path: &Path) -> Result<(usize, usize, Vec<f32>), ImageError> {
    let img = read_png8(path)?;
    if img.channels != 3 {
        return Err(ImageError::Format { path: path.to_path_buf(), expected: "RGB", found: "gray".into() });
    }
    Ok((img.width, img.height, img.data.iter().map(|&v| v as f32 / 255.0).collect()))
}

/// Reads a binary mask PNG; any nonzero sample counts as inside.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), ImageError> {
    let img = read_png8(path)?;
    let mask = img.data.chunks(img.channels).map(|px| px.iter().any(|&v| v > 0)).collect();
    Ok((img.width, img.height, mask))
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), ImageError> {
    let gray: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_gray8(path, width, height, &gray)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        write_rgb8(&p, 3, 2, &rgb).unwrap();
        let img = read_png8(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 3));
        assert_eq!(img.data, rgb);

        let m = dir.path().join("m.png");
        let mask = vec![true, false, false, true, true, false];
        write_mask(&m, 3, 2, &mask).unwrap();
        assert_eq!(read_mask(&m).unwrap().2, mask);
        assert!(matches!(read_rgb_unit(&m), Err(ImageError::Format { .. })));
    }

    #[test]
    fn size_and_missing_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_rgb8(&dir.path().join("x.png"), 2, 2, &[0; 5]), Err(ImageError::Size { .. })));
        assert!(matches!(read_png8(&dir.path().join("nope.png")), Err(ImageError::Io { .. })));
    }

    #[test]
    fn unit_quantization() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(2.0), 255);
        assert_eq!(to_u8(0.5), 128);
    }
}
