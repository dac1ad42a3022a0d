//! File formats.
//!
//! * RGB images: 8-bit RGB PNG.
//! * Semantic labels: 8-bit grayscale PNG with codes 0 (BG), 1 (FG), 2 (unlabeled).
//! * Instance labels: 16-bit grayscale PNG, 0 = background.
//! * Float rasters (probability, embedding, distance): `NWS1` magic, then
//!   H, W, C as u32 LE, then H·W·C f32 LE values, row-major, channel-fastest.
//! * Points: CSV with a `row,col` header.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::raster::{
    DistanceMap, EmbeddingField, Grid, InstanceLabelMap, Point, PointSet, ProbabilityMap,
    RasterImage, SemanticLabel, SemanticLabelMap,
};

pub const FLOAT_MAGIC: &[u8; 4] = b"NWS1";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    RasterImage::new(h as usize, w as usize, img.into_raw())
}

pub fn save_image(path: &Path, image: &RasterImage) -> Result<()> {
    let buf = RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.as_bytes().to_vec(),
    )
    .expect("buffer length checked by RasterImage");
    write_atomic(path, &encode_png(&buf)?)
}

pub fn encode_semantic(labels: &SemanticLabelMap) -> Result<Vec<u8>> {
    let raw = labels.as_slice().iter().map(|l| l.code()).collect();
    let buf = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, raw)
        .expect("buffer length matches grid");
    encode_png(&buf)
}

pub fn decode_semantic(bytes: &[u8]) -> Result<SemanticLabelMap> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::MalformedHeader(format!(
                "semantic labels must be 8-bit grayscale, found {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let labels = gray
        .into_raw()
        .into_iter()
        .map(SemanticLabel::from_code)
        .collect::<Result<Vec<_>>>()?;
    Grid::from_vec(h as usize, w as usize, labels)
}

pub fn save_semantic(path: &Path, labels: &SemanticLabelMap) -> Result<()> {
    write_atomic(path, &encode_semantic(labels)?)
}

pub fn load_semantic(path: &Path) -> Result<SemanticLabelMap> {
    decode_semantic(&fs::read(path)?)
}

pub fn encode_instances(map: &InstanceLabelMap) -> Result<Vec<u8>> {
    if map.count() > u16::MAX as usize {
        return Err(Error::TooManyInstances(map.count()));
    }
    let raw = map.as_slice().iter().map(|&id| id as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw)
            .expect("buffer length matches grid");
    encode_png(&buf)
}

/// Decodes a 16-bit (or 8-bit) grayscale instance PNG. Non-contiguous ids are
/// compacted to `1..=N` preserving order.
pub fn decode_instances(bytes: &[u8]) -> Result<InstanceLabelMap> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let ids: Vec<u32> = match img {
        image::DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(u32::from).collect(),
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::MalformedHeader(format!(
                "instance labels must be grayscale, found {:?}",
                other.color()
            )))
        }
    };
    Ok(InstanceLabelMap::from_raw(Grid::from_vec(h, w, ids)?))
}

pub fn save_instances(path: &Path, map: &InstanceLabelMap) -> Result<()> {
    write_atomic(path, &encode_instances(map)?)
}

pub fn load_instances(path: &Path) -> Result<InstanceLabelMap> {
    decode_instances(&fs::read(path)?)
}

/// Raw float raster as stored in an `NWS1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

pub fn encode_floats(raster: &FloatRaster) -> Result<Vec<u8>> {
    let expected = raster.height * raster.width * raster.channels;
    if raster.values.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            actual: raster.values.len(),
        });
    }
    let mut out = Vec::with_capacity(16 + 4 * expected);
    out.extend_from_slice(FLOAT_MAGIC);
    for dim in [raster.height, raster.width, raster.channels] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::MalformedHeader(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for v in &raster.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_floats(bytes: &[u8]) -> Result<FloatRaster> {
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader(format!(
            "expected a 16-byte header, found {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != FLOAT_MAGIC {
        return Err(Error::MalformedHeader("missing NWS1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width, channels) = (word(4), word(8), word(12));
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            actual: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(FloatRaster {
        height,
        width,
        channels,
        values,
    })
}

fn single_channel(raster: FloatRaster) -> Result<Grid<f32>> {
    if raster.channels != 1 {
        return Err(Error::dims(
            "1 channel",
            format!("{} channels", raster.channels),
        ));
    }
    Grid::from_vec(raster.height, raster.width, raster.values)
}

pub fn encode_probability(prob: &ProbabilityMap) -> Result<Vec<u8>> {
    encode_floats(&FloatRaster {
        height: prob.height(),
        width: prob.width(),
        channels: 1,
        values: prob.as_slice().to_vec(),
    })
}

pub fn decode_probability(bytes: &[u8]) -> Result<ProbabilityMap> {
    let grid = single_channel(decode_floats(bytes)?)?;
    if let Some(v) = grid.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(format!("probability {v} outside [0, 1]")));
    }
    Ok(grid)
}

pub fn save_probability(path: &Path, prob: &ProbabilityMap) -> Result<()> {
    write_atomic(path, &encode_probability(prob)?)
}

pub fn load_probability(path: &Path) -> Result<ProbabilityMap> {
    decode_probability(&fs::read(path)?)
}

pub fn save_distance(path: &Path, dist: &DistanceMap) -> Result<()> {
    let bytes = encode_floats(&FloatRaster {
        height: dist.height(),
        width: dist.width(),
        channels: 1,
        values: dist.as_slice().to_vec(),
    })?;
    write_atomic(path, &bytes)
}

pub fn load_distance(path: &Path) -> Result<DistanceMap> {
    let grid = single_channel(decode_floats(&fs::read(path)?)?)?;
    if let Some(v) = grid.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::OutOfRange(format!("distance {v} is negative")));
    }
    Ok(grid)
}

pub fn encode_embedding(field: &EmbeddingField) -> Result<Vec<u8>> {
    encode_floats(&FloatRaster {
        height: field.height(),
        width: field.width(),
        channels: field.dim(),
        values: field.as_slice().to_vec(),
    })
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingField> {
    let r = decode_floats(bytes)?;
    EmbeddingField::new(r.height, r.width, r.channels, r.values)
}

pub fn save_embedding(path: &Path, field: &EmbeddingField) -> Result<()> {
    write_atomic(path, &encode_embedding(field)?)
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingField> {
    decode_embedding(&fs::read(path)?)
}

pub fn format_points(points: &PointSet) -> String {
    let mut s = String::from("row,col\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.row, p.col));
    }
    s
}

pub fn parse_points(text: &str, path: &Path) -> Result<PointSet> {
    let bad = |message: String| Error::MalformedPoints {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "row,col" => {}
        Some((_, header)) => {
            return Err(bad(format!("expected header `row,col`, found `{header}`")))
        }
        None => return Err(bad("missing header".into())),
    }
    let mut points = Vec::new();
    for (lineno, line) in lines {
        let mut fields = line.split(',').map(str::trim);
        let mut next = |name: &str| -> Result<usize> {
            let field = fields
                .next()
                .ok_or_else(|| bad(format!("line {}: missing {name}", lineno + 1)))?;
            field
                .parse()
                .map_err(|_| bad(format!("line {}: invalid {name} `{field}`", lineno + 1)))
        };
        let row = next("row")?;
        let col = next("col")?;
        if fields.next().is_some() {
            return Err(bad(format!("line {}: expected two fields", lineno + 1)));
        }
        points.push(Point::new(row, col));
    }
    PointSet::new(points)
}

pub fn save_points(path: &Path, points: &PointSet) -> Result<()> {
    write_atomic(path, format_points(points).as_bytes())
}

pub fn load_points(path: &Path) -> Result<PointSet> {
    parse_points(&fs::read_to_string(path)?, path)
}
