//! Image and depth-map file formats: binary PPM (P6) for color, binary
//! PGM (P5) for masks, 16-bit PGM for depth visualization, and raw
//! little-endian f32 depth maps with an 8-byte width/height header.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed {0}: {1}")]
    Malformed(&'static str, String),
}

/// Depth visualization range in scene units.
pub const DEPTH_VIS_MIN: f64 = 1.0;
pub const DEPTH_VIS_MAX: f64 = 82.5;

/// RGB image with float channels in `[0, 1]`, row-major.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` values.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn read_pnm_header<R: Read>(
    r: &mut R,
    magic: &'static str,
) -> Result<(usize, usize, usize), ImageIoError> {
    let mut fields = Vec::new();
    let mut byte = [0u8; 1];
    // magic + 3 whitespace-separated fields, '#' comments allowed
    let mut token = String::new();
    let mut in_comment = false;
    while fields.len() < 4 {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_whitespace() {
            if !token.is_empty() {
                fields.push(std::mem::take(&mut token));
            }
        } else {
            token.push(c);
        }
    }
    if fields[0] != magic {
        return Err(ImageIoError::Malformed(
            "pnm",
            format!("expected {magic}, found {}", fields[0]),
        ));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageIoError::Malformed("pnm", format!("bad header field {s}")))
    };
    Ok((parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), ImageIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let mut buf = Vec::with_capacity(img.data.len());
    for v in &img.data {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, ImageIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let (width, height, maxval) = read_pnm_header(&mut r, "P6")?;
    if maxval != 255 {
        return Err(ImageIoError::Malformed("ppm", format!("maxval {maxval}")));
    }
    let mut buf = vec![0u8; 3 * width * height];
    r.read_exact(&mut buf)?;
    Ok(RgbImage {
        width,
        height,
        data: buf.iter().map(|b| *b as f32 / 255.0).collect(),
    })
}

/// Mask file: P5 with 0 = masked (excluded) pixels.
pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>), ImageIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let (width, height, maxval) = read_pnm_header(&mut r, "P5")?;
    if maxval >= 256 {
        return Err(ImageIoError::Malformed("pgm", format!("maxval {maxval}")));
    }
    let mut buf = vec![0u8; width * height];
    r.read_exact(&mut buf)?;
    // true = excluded pixel
    Ok((width, height, buf.iter().map(|b| *b == 0).collect()))
}

pub fn write_mask_pgm(path: &Path, width: usize, height: usize, excluded: &[bool]) -> Result<(), ImageIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let buf: Vec<u8> = excluded.iter().map(|m| if *m { 0 } else { 255 }).collect();
    w.write_all(&buf)?;
    Ok(())
}

/// 16-bit PGM depth visualization: linear in
/// `[DEPTH_VIS_MIN, DEPTH_VIS_MAX]`, clamped.
pub fn write_depth_pgm(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<(), ImageIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(depth.len() * 2);
    for d in depth {
        let t = ((*d as f64 - DEPTH_VIS_MIN) / (DEPTH_VIS_MAX - DEPTH_VIS_MIN)).clamp(0.0, 1.0);
        let v = (t * 65535.0).round() as u16;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Raw depth: 8-byte header (width u32, height u32, little-endian) then
/// `width * height` little-endian f32 values.
pub fn write_depth_raw(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<(), ImageIoError> {
    assert_eq!(depth.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    for d in depth {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth_raw(path: &Path) -> Result<(usize, usize, Vec<f32>), ImageIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let width = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let height = u32::from_le_bytes(b4) as usize;
    if width * height > 1 << 28 {
        return Err(ImageIoError::Malformed("depth", "implausible size".into()));
    }
    let mut buf = vec![0u8; width * height * 4];
    r.read_exact(&mut buf)?;
    let depth = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((width, height, depth))
}
