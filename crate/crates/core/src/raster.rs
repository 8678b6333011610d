//! File containers for depth maps and masks.
//!
//! * Encoded three-channel depth: 8-bit RGB PNG, `(R, G, B) = (c0, c1, c2)`.
//! * Logical uint24 depth: `SBD1` raw container. 16-byte little-endian header
//!   (`b"SBD1"`, `u32` height, `u32` width, `u32` reserved = 0) followed by
//!   row-major 3-byte little-endian pixels.
//! * Sensor depth: 16-bit grayscale PNG holding millimeters.
//! * Masks: 8-bit grayscale PNG (nonzero = member) or uncompressed RLE JSON.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_codec::{self, CodecError, DepthMap, EncodedDepthImage, RelativeDepthParams};
use crate::object_depth::{ObjectDepthError, ObjectMask};

pub const SBD1_MAGIC: &[u8; 4] = b"SBD1";
pub const SBD1_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Mask(#[from] ObjectDepthError),
    #[error("not an SBD1 file: {0}")]
    BadHeader(String),
    #[error("unsupported raster layout: {0}")]
    Unsupported(String),
    #[error("invalid RLE mask: {0}")]
    BadRle(String),
}

impl RasterError {
    /// True when the failure came from the filesystem rather than the content.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            RasterError::Io { .. }
                | RasterError::Image {
                    source: image::ImageError::IoError(_),
                    ..
                }
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> RasterError + '_ {
    move |source| RasterError::Image {
        path: path.display().to_string(),
        source,
    }
}

pub fn sbd1_to_bytes(map: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(SBD1_HEADER_LEN + map.values().len() * 3);
    out.extend_from_slice(SBD1_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&v.to_le_bytes()[..3]);
    }
    out
}

pub fn sbd1_from_bytes(bytes: &[u8]) -> Result<DepthMap, RasterError> {
    if bytes.len() < SBD1_HEADER_LEN || &bytes[..4] != SBD1_MAGIC {
        return Err(RasterError::BadHeader("missing SBD1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (height, width) = (word(4), word(8));
    let payload = &bytes[SBD1_HEADER_LEN..];
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| RasterError::BadHeader(format!("dimensions {height}x{width} overflow")))?;
    if payload.len() != expected {
        return Err(RasterError::BadHeader(format!(
            "{height}x{width} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(3)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], 0]))
        .collect();
    Ok(DepthMap::new(height, width, values)?)
}

pub fn write_sbd1(path: &Path, map: &DepthMap) -> Result<(), RasterError> {
    fs::write(path, sbd1_to_bytes(map)).map_err(io_err(path))
}

pub fn read_sbd1(path: &Path) -> Result<DepthMap, RasterError> {
    sbd1_from_bytes(&fs::read(path).map_err(io_err(path))?)
}

pub fn encoded_to_png_bytes(img: &EncodedDepthImage) -> Result<Vec<u8>, RasterError> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.to_rgb_bytes())
            .expect("buffer size matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(img_err(Path::new("<memory>")))?;
    Ok(out.into_inner())
}

pub fn write_encoded_png(path: &Path, img: &EncodedDepthImage) -> Result<(), RasterError> {
    fs::write(path, encoded_to_png_bytes(img)?).map_err(io_err(path))
}

/// Reads an 8-bit RGB PNG as raw channel triples without validating them.
pub fn read_encoded_png(path: &Path) -> Result<EncodedDepthImage, RasterError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let dynimg = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(img_err(path))?;
    match dynimg {
        DynamicImage::ImageRgb8(buf) => rgb_to_encoded(buf),
        other => Err(RasterError::Unsupported(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn rgb_to_encoded(buf: ImageBuffer<Rgb<u8>, Vec<u8>>) -> Result<EncodedDepthImage, RasterError> {
    let (w, h) = buf.dimensions();
    let pixels = buf.pixels().map(|p| p.0).collect();
    Ok(EncodedDepthImage::new(h as usize, w as usize, pixels)?)
}

/// Writes a 16-bit grayscale PNG of millimeters. Depths above `u16::MAX`
/// cannot be represented in this container.
pub fn write_mm16_png(path: &Path, map: &DepthMap) -> Result<(), RasterError> {
    let data: Vec<u16> = map
        .values()
        .iter()
        .map(|&v| u16::try_from(v))
        .collect::<Result<_, _>>()
        .map_err(|_| RasterError::Unsupported("depth exceeds 65535 mm for a 16-bit PNG".into()))?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, data).expect("sized");
    buf.save_with_format(path, ImageFormat::Png).map_err(img_err(path))
}

/// Loads a metric depth map from any supported container, detected by
/// content: `SBD1`, 16-bit grayscale PNG (mm) or encoded RGB PNG.
pub fn read_depth(path: &Path) -> Result<DepthMap, RasterError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(SBD1_MAGIC) {
        return sbd1_from_bytes(&bytes);
    }
    let dynimg = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(img_err(path))?;
    match dynimg {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let values = buf.into_raw().into_iter().map(u32::from).collect();
            Ok(DepthMap::new(h as usize, w as usize, values)?)
        }
        DynamicImage::ImageRgb8(buf) => Ok(depth_codec::decode_map(&rgb_to_encoded(buf)?)?),
        other => Err(RasterError::Unsupported(format!(
            "{}: depth must be SBD1, 16-bit gray or 8-bit RGB PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads a 16-bit grayscale PNG of relative inverse depth (0 = far end,
/// 65535 = near end) and converts it to metric millimeters. Returns the map
/// and the number of saturated pixels.
pub fn read_relative_png(path: &Path, params: RelativeDepthParams) -> Result<(DepthMap, usize), RasterError> {
    let dynimg = image::open(path).map_err(img_err(path))?;
    let DynamicImage::ImageLuma16(buf) = dynimg else {
        return Err(RasterError::Unsupported(format!(
            "{}: relative depth must be a 16-bit gray PNG",
            path.display()
        )));
    };
    let (w, h) = buf.dimensions();
    let rel: Vec<f64> = buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
    Ok(depth_codec::relative_map_to_metric(h as usize, w as usize, &rel, params)?)
}

/// `(width, height)` of an image file, reading only its header.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize), RasterError> {
    let (w, h) = image::image_dimensions(path).map_err(img_err(path))?;
    Ok((w as usize, h as usize))
}

/// Uncompressed run-length mask. Runs alternate background/foreground,
/// starting with background, over pixels in column-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl RleMask {
    pub fn to_mask(&self) -> Result<ObjectMask, RasterError> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(RasterError::BadRle(format!(
                "runs cover {total} pixels, expected {}",
                h * w
            )));
        }
        let mut members = vec![false; h * w];
        let mut pos = 0;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + run {
                    let (x, y) = (p / h, p % h);
                    members[y * w + x] = true;
                }
            }
            pos += run;
        }
        Ok(ObjectMask::new(h, w, members)?)
    }

    pub fn from_mask(mask: &ObjectMask) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for x in 0..w {
            for y in 0..h {
                if mask.contains(x, y) != current {
                    counts.push(run);
                    run = 0;
                    current = !current;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self {
            size: [h, w],
            counts,
        }
    }
}

pub fn write_mask_png(path: &Path, mask: &ObjectMask) -> Result<(), RasterError> {
    let (h, w) = (mask.height(), mask.width());
    let data = (0..h * w)
        .map(|i| if mask.contains(i % w, i / w) { 255 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized");
    buf.save_with_format(path, ImageFormat::Png).map_err(img_err(path))
}

/// Reads a mask from a `.json` RLE file or an 8-bit grayscale PNG.
pub fn read_mask(path: &Path) -> Result<ObjectMask, RasterError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let rle: RleMask =
            serde_json::from_slice(&bytes).map_err(|e| RasterError::BadRle(e.to_string()))?;
        return rle.to_mask();
    }
    let dynimg = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(img_err(path))?;
    match dynimg {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let members = buf.into_raw().into_iter().map(|v| v != 0).collect();
            Ok(ObjectMask::new(h as usize, w as usize, members)?)
        }
        other => Err(RasterError::Unsupported(format!(
            "{}: masks must be 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_codec::encode_map;

    #[test]
    fn sbd1_header_layout() {
        let m = DepthMap::new(1, 2, vec![1500, 131071]).unwrap();
        let bytes = sbd1_to_bytes(&m);
        assert_eq!(&bytes[..4], b"SBD1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        // 1500 = 0x0005DC, 131071 = 0x01FFFF
        assert_eq!(&bytes[16..], &[0xDC, 0x05, 0x00, 0xFF, 0xFF, 0x01]);
        assert_eq!(sbd1_from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn sbd1_rejects_garbage() {
        assert!(sbd1_from_bytes(b"PNG\0").is_err());
        let mut bytes = sbd1_to_bytes(&DepthMap::new(1, 1, vec![5]).unwrap());
        bytes.pop();
        assert!(sbd1_from_bytes(&bytes).is_err());
        // 0x020000 exceeds the 17-bit range.
        let mut over = sbd1_to_bytes(&DepthMap::new(1, 1, vec![0]).unwrap());
        over[18] = 0x02;
        assert!(matches!(sbd1_from_bytes(&over), Err(RasterError::Codec(_))));
    }

    #[test]
    fn png_containers() {
        let dir = tempfile::tempdir().unwrap();
        let m = DepthMap::new(2, 3, vec![0, 1, 1500, 40000, 65535, 7]).unwrap();

        let enc = dir.path().join("enc.png");
        write_encoded_png(&enc, &encode_map(&m)).unwrap();
        assert_eq!(read_encoded_png(&enc).unwrap(), encode_map(&m));
        assert_eq!(read_depth(&enc).unwrap(), m);

        let gray = dir.path().join("mm16.png");
        write_mm16_png(&gray, &m).unwrap();
        assert_eq!(read_depth(&gray).unwrap(), m);

        let sbd = dir.path().join("m.sbd");
        write_sbd1(&sbd, &m).unwrap();
        assert_eq!(read_depth(&sbd).unwrap(), m);
        assert_eq!(image_dimensions(&enc).unwrap(), (3, 2));
    }

    #[test]
    fn masks() {
        let dir = tempfile::tempdir().unwrap();
        let mask = ObjectMask::new(2, 3, vec![true, false, false, true, true, false]).unwrap();
        let rle = RleMask::from_mask(&mask);
        // column-major: (0,0)=1 (0,1)=1 | (1,0)=0 (1,1)=1 | (2,0)=0 (2,1)=0
        assert_eq!(rle.counts, vec![0, 2, 1, 1, 2]);
        assert_eq!(rle.to_mask().unwrap(), mask);

        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        let j = dir.path().join("m.json");
        fs::write(&j, serde_json::to_vec(&rle).unwrap()).unwrap();
        assert_eq!(read_mask(&j).unwrap(), mask);

        let bad = RleMask {
            size: [2, 2],
            counts: vec![1, 1],
        };
        assert!(bad.to_mask().is_err());
    }
}
