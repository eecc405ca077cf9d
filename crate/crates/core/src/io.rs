//! File I/O for images, depth maps and focal stacks.
//!
//! PNG and PFM are the only formats. Quantization happens here and nowhere
//! else: 8-bit PNG stores `round(v·255)`, 16-bit PNG stores `round(v·65535)`,
//! PFM stores the value as a little-endian `f32`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{DepthMap, DepthRange, Image};
use crate::optics::FocusSchedule;
use crate::render::FocalStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png8,
    Png16,
    Pfm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png8 | ImageFormat::Png16 => "png",
            ImageFormat::Pfm => "pfm",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "png8" | "png" => Some(ImageFormat::Png8),
            "png16" => Some(ImageFormat::Png16),
            "pfm" => Some(ImageFormat::Pfm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageFormat::Png8 => "png8",
            ImageFormat::Png16 => "png16",
            ImageFormat::Pfm => "pfm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    /// 16-bit grayscale PNG holding millimeters; 0 marks an invalid pixel.
    Png16Mm,
    /// Single-channel PFM holding meters.
    PfmM,
}

impl DepthFormat {
    /// Picks the format from the file extension (`.png` or `.pfm`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(DepthFormat::Png16Mm),
            "pfm" => Some(DepthFormat::PfmM),
            _ => None,
        }
    }
}

/// A depth map read from disk together with the repairs applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoad {
    pub depth: DepthMap,
    /// Pixels stored as 0 (or non-positive / non-finite), replaced by `range.min`.
    pub invalid: usize,
    /// Valid pixels that fell outside the range and were clamped into it.
    pub clamped: usize,
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pfm => encode_pfm(img.height(), img.width(), img.channels(), img.data()),
        ImageFormat::Png8 => {
            let q: Vec<u8> = img
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            encode_png(
                img.width(),
                img.height(),
                img.channels(),
                png::BitDepth::Eight,
                &q,
                path,
            )?
        }
        ImageFormat::Png16 => {
            let q: Vec<u8> = img
                .data()
                .iter()
                .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
                .collect();
            encode_png(
                img.width(),
                img.height(),
                img.channels(),
                png::BitDepth::Sixteen,
                &q,
                path,
            )?
        }
    };
    write_bytes(path, &bytes)
}

/// Loads a PNG (8- or 16-bit, gray or RGB) or PFM image, sniffing the format
/// from the file contents.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(PNG_MAGIC) {
        let raw = decode_png(&bytes, path)?;
        let scale = match raw.bit_depth {
            8 => 255.0,
            _ => 65535.0,
        };
        let data = raw.samples.iter().map(|&s| f64::from(s) / scale).collect();
        Image::new(raw.height, raw.width, raw.channels, data)
    } else if bytes.starts_with(b"P") {
        let (h, w, ch, data) = decode_pfm(&bytes, path)?;
        Image::new(h, w, ch, data).map_err(|e| Error::malformed(path, "pfm", e.to_string()))
    } else {
        Err(Error::malformed(path, "image", "neither a PNG nor a PFM signature"))
    }
}

pub fn save_depth(depth: &DepthMap, path: &Path, format: DepthFormat) -> Result<()> {
    let bytes = match format {
        DepthFormat::PfmM => encode_pfm(depth.height(), depth.width(), 1, depth.data()),
        DepthFormat::Png16Mm => {
            let q: Vec<u8> = depth
                .data()
                .iter()
                .flat_map(|&m| ((m * 1000.0).round().clamp(0.0, 65535.0) as u16).to_be_bytes())
                .collect();
            encode_png(depth.width(), depth.height(), 1, png::BitDepth::Sixteen, &q, path)?
        }
    };
    write_bytes(path, &bytes)
}

/// Loads a depth map, replacing invalid pixels by `range.min` and clamping the
/// rest into `range`.
pub fn load_depth(path: &Path, format: DepthFormat, range: &DepthRange) -> Result<DepthLoad> {
    let bytes = read_bytes(path)?;
    let (h, w, meters): (usize, usize, Vec<f64>) = match format {
        DepthFormat::PfmM => {
            if !bytes.starts_with(b"P") {
                return Err(Error::malformed(path, "pfm", "missing PF/Pf signature"));
            }
            let (h, w, ch, data) = decode_pfm(&bytes, path)?;
            if ch != 1 {
                return Err(Error::UnsupportedChannels {
                    path: path.into(),
                    channels: ch,
                });
            }
            (h, w, data)
        }
        DepthFormat::Png16Mm => {
            if !bytes.starts_with(PNG_MAGIC) {
                return Err(Error::malformed(path, "png", "missing PNG signature"));
            }
            let raw = decode_png(&bytes, path)?;
            if raw.channels != 1 {
                return Err(Error::UnsupportedChannels {
                    path: path.into(),
                    channels: raw.channels,
                });
            }
            if raw.bit_depth != 16 {
                return Err(Error::malformed(path, "png", "depth PNG must be 16-bit"));
            }
            let data = raw.samples.iter().map(|&mm| f64::from(mm) / 1000.0).collect();
            (raw.height, raw.width, data)
        }
    };
    let mut invalid = 0;
    let mut clamped = 0;
    let repaired = meters
        .into_iter()
        .map(|d| {
            if !d.is_finite() || d <= 0.0 {
                invalid += 1;
                range.min
            } else {
                let c = d.clamp(range.min, range.max);
                if c != d {
                    clamped += 1;
                }
                c
            }
        })
        .collect();
    Ok(DepthLoad {
        depth: DepthMap::new(h, w, repaired)?,
        invalid,
        clamped,
    })
}

/// Writes a false-colour 8-bit RGB preview; near is warm, far is cool, on an
/// inverse-depth scale over `range`.
pub fn save_depth_preview(depth: &DepthMap, range: &DepthRange, path: &Path) -> Result<()> {
    let (qmin, qmax) = (1.0 / range.max, 1.0 / range.min);
    let mut rgb = Vec::with_capacity(depth.data().len() * 3);
    for &d in depth.data() {
        let t = ((1.0 / d - qmin) / (qmax - qmin)).clamp(0.0, 1.0);
        rgb.extend(colormap(t).map(|v| (v * 255.0).round() as u8));
    }
    let bytes = encode_png(depth.width(), depth.height(), 3, png::BitDepth::Eight, &rgb, path)?;
    write_bytes(path, &bytes)
}

// Piecewise-linear blue -> cyan -> yellow -> red ramp.
fn colormap(t: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.1, 0.1, 0.6], [0.0, 0.8, 0.9], [1.0, 0.9, 0.1], [0.8, 0.05, 0.05]];
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

pub fn slice_file_name(index: usize, format: ImageFormat) -> String {
    format!("slice_{index:02}.{}", format.extension())
}

/// Writes `slice_00.<ext>` … plus `schedule.csv` (`index,focus_m`) into `dir`.
pub fn save_stack(stack: &FocalStack, dir: &Path, format: ImageFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("index,focus_m\n");
    for (i, (slice, focus)) in stack.slices().iter().zip(stack.schedule().distances()).enumerate() {
        save_image(slice, &dir.join(slice_file_name(i, format)), format)?;
        csv.push_str(&format!("{i},{focus}\n"));
    }
    write_bytes(&dir.join("schedule.csv"), csv.as_bytes())
}

/// Reads a stack written by [`save_stack`]; each slice may be PFM or PNG.
pub fn load_stack(dir: &Path) -> Result<FocalStack> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let schedule_path = dir.join("schedule.csv");
    let text = fs::read_to_string(&schedule_path).map_err(|e| Error::io(&schedule_path, e))?;
    let mut distances = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("index")) {
            continue;
        }
        let mut fields = line.split(',');
        let parsed = match (fields.next(), fields.next(), fields.next()) {
            (Some(i), Some(f), None) => i.trim().parse::<usize>().ok().zip(f.trim().parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((i, f)) if i == distances.len() => distances.push(f),
            _ => {
                return Err(Error::malformed(
                    &schedule_path,
                    "csv",
                    format!("bad schedule row {}: {line:?}", lineno + 1),
                ))
            }
        }
    }
    let schedule = FocusSchedule::new(distances)?;
    let mut slices = Vec::with_capacity(schedule.len());
    for i in 0..schedule.len() {
        let path =
            find_slice(dir, i).ok_or_else(|| Error::MissingFile(dir.join(slice_file_name(i, ImageFormat::Pfm))))?;
        slices.push(load_image(&path)?);
    }
    FocalStack::new(slices, schedule)
}

fn find_slice(dir: &Path, index: usize) -> Option<PathBuf> {
    [ImageFormat::Pfm, ImageFormat::Png8]
        .into_iter()
        .map(|f| dir.join(slice_file_name(index, f)))
        .find(|p| p.is_file())
}

fn encode_pfm(height: usize, width: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    // Scanlines are stored bottom to top.
    for row in (0..height).rev() {
        let start = row * width * channels;
        for &v in &data[start..start + width * channels] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bad = |reason: &str| Error::malformed(path, "pfm", reason);
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    let channels = match token() {
        Some(b"PF") => 3,
        Some(b"Pf") => 1,
        _ => return Err(bad("missing PF/Pf signature")),
    };
    let mut number = |what: &str| -> Result<f64> {
        token()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad(&format!("unreadable {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let scale = number("scale")?;
    if width < 1.0 || height < 1.0 || width.fract() != 0.0 || height.fract() != 0.0 || scale == 0.0 {
        return Err(bad("invalid dimensions or scale"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("header not terminated"));
    }
    pos += 1;
    let (width, height) = (width as usize, height as usize);
    let n = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() != n * 4 {
        return Err(bad(&format!("expected {} raster bytes, found {}", n * 4, raster.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let file_row = i / (width * channels);
        let within = i % (width * channels);
        data[(height - 1 - file_row) * width * channels + within] = f64::from(v);
    }
    Ok((height, width, channels, data))
}

fn encode_png(
    width: usize,
    height: usize,
    channels: usize,
    depth: png::BitDepth,
    samples: &[u8],
    path: &Path,
) -> Result<Vec<u8>> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => {
            return Err(Error::UnsupportedChannels {
                path: path.into(),
                channels: other,
            })
        }
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::malformed(path, "png", e.to_string()))?;
        writer
            .write_image_data(samples)
            .map_err(|e| Error::malformed(path, "png", e.to_string()))?;
    }
    Ok(out)
}

struct RawPng {
    height: usize,
    width: usize,
    channels: usize,
    bit_depth: u8,
    samples: Vec<u16>,
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<RawPng> {
    let bad = |e: png::DecodingError| Error::malformed(path, "png", e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // Expands palettes and sub-byte grayscale; keeps 16-bit samples intact.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::malformed(path, "png", "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 0,
    };
    if channels != 1 && channels != 3 {
        return Err(Error::UnsupportedChannels {
            path: path.into(),
            channels,
        });
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let n = width * height * channels;
    let (bit_depth, samples) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            16,
            buf[..n * 2]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect(),
        ),
        png::BitDepth::Eight => (8, buf[..n].iter().map(|&b| u16::from(b)).collect()),
        _ => {
            return Err(Error::malformed(
                path,
                "png",
                "unexpected sub-byte depth after expansion",
            ))
        }
    };
    Ok(RawPng {
        height,
        width,
        channels,
        bit_depth,
        samples,
    })
}
