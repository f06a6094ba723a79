//! File formats: binary sinograms and images, PNG previews, and the small
//! CSV tables (detector profile, learned α/β, loss history).
//!
//! All binary formats are little-endian and end with a CRC-32 of every
//! preceding byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detector::DetectorVariables;
use crate::error::{Error, Result};
use crate::geometry::{DetectorCount, Mode, ScanGeometry};
use crate::real::Real;
use crate::simulator::{DetectorProfile, ImageGrid, Sinogram};
use crate::trainer::LossRecord;

pub const SINOGRAM_MAGIC: &[u8; 8] = b"RINRSINO";
pub const IMAGE_MAGIC: &[u8; 8] = b"RINRIMAG";
pub const FORMAT_VERSION: u8 = 1;

/// Append-only little-endian encoder.
#[derive(Debug, Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, values: impl IntoIterator<Item = f32>) {
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }
    /// Appends the CRC-32 trailer and returns the finished buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.bytes(&crc.to_le_bytes());
        self.buf
    }
}

/// Bounds-checked decoder over a buffer whose CRC trailer was verified.
#[derive(Debug)]
pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and CRC trailer; the reader starts after the version byte.
    pub fn open(data: &'a [u8], magic: &[u8; 8], what: &str) -> Result<Self> {
        if data.len() < magic.len() + 1 + 4 || &data[..magic.len()] != magic {
            return Err(Error::Format(format!("not a {what} file")));
        }
        let (body, trailer) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format(format!("{what} checksum mismatch")));
        }
        let version = body[magic.len()];
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported {what} version {version}")));
        }
        Ok(Reader {
            data: body,
            pos: magic.len() + 1,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} unexpected trailing bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_geometry(w: &mut Writer, g: &ScanGeometry) -> Result<()> {
    w.u8(match g.mode {
        Mode::Fan2d => 0,
        Mode::Cone3d => 1,
    });
    w.u32(g.n_views)?;
    w.f64(g.view_range[0]);
    w.f64(g.view_range[1]);
    match g.n_detectors {
        DetectorCount::Line(n) => {
            w.u8(0);
            w.u32(n)?;
        }
        DetectorCount::Panel([rows, cols]) => {
            w.u8(1);
            w.u32(rows)?;
            w.u32(cols)?;
        }
    }
    w.f64(g.detector_spacing);
    w.f64(g.source_to_center);
    w.f64(g.center_to_detector);
    w.u8(g.grid_shape.len() as u8);
    for &n in &g.grid_shape {
        w.u32(n)?;
    }
    w.u8(g.voxel_size.len() as u8);
    for &s in &g.voxel_size {
        w.f64(s);
    }
    Ok(())
}

fn read_geometry(r: &mut Reader<'_>) -> Result<ScanGeometry> {
    let mode = match r.u8()? {
        0 => Mode::Fan2d,
        1 => Mode::Cone3d,
        m => return Err(Error::Format(format!("unknown geometry mode {m}"))),
    };
    let n_views = r.u32()?;
    let view_range = [r.f64()?, r.f64()?];
    let n_detectors = match r.u8()? {
        0 => DetectorCount::Line(r.u32()?),
        1 => DetectorCount::Panel([r.u32()?, r.u32()?]),
        t => return Err(Error::Format(format!("unknown detector layout {t}"))),
    };
    let detector_spacing = r.f64()?;
    let source_to_center = r.f64()?;
    let center_to_detector = r.f64()?;
    let n = r.u8()? as usize;
    let grid_shape = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n = r.u8()? as usize;
    let voxel_size = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let geometry = ScanGeometry {
        mode,
        n_views,
        view_range,
        n_detectors,
        detector_spacing,
        source_to_center,
        center_to_detector,
        grid_shape,
        voxel_size,
    };
    geometry.validate()?;
    Ok(geometry)
}

pub fn encode_sinogram(sino: &Sinogram) -> Result<Vec<u8>> {
    sino.check()?;
    let mut w = Writer::default();
    w.bytes(SINOGRAM_MAGIC);
    w.u8(FORMAT_VERSION);
    write_geometry(&mut w, &sino.geometry)?;
    w.f32s(sino.values.iter().copied());
    let mut bits = vec![0u8; sino.valid.len().div_ceil(8)];
    for (i, _) in sino.valid.iter().enumerate().filter(|(_, v)| **v) {
        bits[i / 8] |= 1 << (i % 8);
    }
    w.bytes(&bits);
    Ok(w.finish())
}

pub fn decode_sinogram(data: &[u8]) -> Result<Sinogram> {
    let mut r = Reader::open(data, SINOGRAM_MAGIC, "sinogram")?;
    let geometry = read_geometry(&mut r)?;
    let n = geometry.n_views * geometry.detector_count();
    let values = r.f32s(n)?;
    let bits = r.bytes(n.div_ceil(8))?;
    r.finish()?;
    let valid = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let sino = Sinogram {
        geometry,
        values,
        valid,
    };
    sino.check()?;
    Ok(sino)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    fs::write(path, encode_sinogram(sino)?)?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&fs::read(path)?)
}

/// Raw image: header (dimension, shape, voxel size) then `f32` values.
pub fn encode_image(image: &ImageGrid) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(IMAGE_MAGIC);
    w.u8(FORMAT_VERSION);
    w.u8(image.dim() as u8);
    for &n in &image.shape {
        w.u32(n)?;
    }
    for &s in &image.voxel_size {
        w.f64(s);
    }
    w.f32s(image.values.iter().map(|&v| v as f32));
    Ok(w.finish())
}

pub fn decode_image(data: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader::open(data, IMAGE_MAGIC, "image")?;
    let dim = r.u8()? as usize;
    let shape = (0..dim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let voxel_size = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let values = r.f32s(shape.iter().product())?;
    r.finish()?;
    ImageGrid::new(shape, voxel_size, values.into_iter().map(f64::from).collect())
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    fs::write(path, encode_image(image)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    decode_image(&fs::read(path)?)
}

/// 8-bit greyscale rendering, window-levelled to `window` or the image's own
/// range. Volumes show their central `z` slice. Row 0 is the largest `y`.
pub fn preview_png(image: &ImageGrid, window: Option<(f64, f64)>) -> Result<Vec<u8>> {
    let (nx, ny) = match image.shape.as_slice() {
        [nx, ny] | [nx, ny, _] => (*nx, *ny),
        _ => return Err(Error::Dimension(format!("cannot preview shape {:?}", image.shape))),
    };
    let z = image.shape.get(2).map_or(0, |nz| nz / 2);
    let (lo, hi) = window.unwrap_or((image.min(), image.max()));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        let y = ny - 1 - row;
        for x in 0..nx {
            let v = if image.dim() == 3 { image.get(&[x, y, z]) } else { image.get(&[x, y]) };
            pixels.push(((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let buffer = image::GrayImage::from_raw(nx as u32, ny as u32, pixels)
        .ok_or_else(|| Error::Format("preview buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buffer
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_preview(path: &Path, image: &ImageGrid, window: Option<(f64, f64)>) -> Result<()> {
    fs::write(path, preview_png(image, window)?)?;
    Ok(())
}

fn csv_rows<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::Format(format!("expected CSV header '{header}'"))),
    }
    Ok(lines.map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect())))
}

fn parse_cell<V: std::str::FromStr>(cell: Option<&&str>, line: usize) -> Result<V> {
    cell.and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad CSV value on line {line}")))
}

const PROFILE_HEADER: &str = "detector,alpha,defective";

pub fn profile_csv(profile: &DetectorProfile) -> String {
    let mut out = format!("{PROFILE_HEADER}\n");
    for (s, (a, d)) in profile.alpha.iter().zip(&profile.defective).enumerate() {
        writeln!(out, "{s},{a:?},{}", *d as u8).unwrap();
    }
    out
}

pub fn parse_profile_csv(text: &str) -> Result<DetectorProfile> {
    let mut alpha = Vec::new();
    let mut defective = Vec::new();
    for (line, cells) in csv_rows(text, PROFILE_HEADER)? {
        let s: usize = parse_cell(cells.first(), line)?;
        if s != alpha.len() || cells.len() != 3 {
            return Err(Error::Format(format!("profile row {line} out of order")));
        }
        alpha.push(parse_cell(cells.get(1), line)?);
        defective.push(parse_cell::<u8>(cells.get(2), line)? != 0);
    }
    Ok(DetectorProfile { alpha, defective })
}

pub fn write_profile(path: &Path, profile: &DetectorProfile) -> Result<()> {
    fs::write(path, profile_csv(profile))?;
    Ok(())
}

pub fn read_profile(path: &Path) -> Result<DetectorProfile> {
    parse_profile_csv(&fs::read_to_string(path)?)
}

const DETECTOR_HEADER: &str = "detector,alpha,beta,alpha_raw,beta_raw";

/// Learned detector variables: effective α and β plus the raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTable {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn detector_csv<T: Real>(vars: &DetectorVariables<T>) -> String {
    let mut out = format!("{DETECTOR_HEADER}\n");
    for s in 0..vars.len() {
        writeln!(
            out,
            "{s},{:?},{:?},{:?},{:?}",
            vars.alpha(s).as_f64(),
            vars.beta(s).as_f64(),
            vars.alpha_raw[s].as_f64(),
            vars.beta_raw[s].as_f64()
        )
        .unwrap();
    }
    out
}

pub fn parse_detector_csv(text: &str) -> Result<DetectorTable> {
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    for (line, cells) in csv_rows(text, DETECTOR_HEADER)? {
        let s: usize = parse_cell(cells.first(), line)?;
        if s != alpha.len() || cells.len() != 5 {
            return Err(Error::Format(format!("detector row {line} out of order")));
        }
        alpha.push(parse_cell(cells.get(1), line)?);
        beta.push(parse_cell(cells.get(2), line)?);
    }
    Ok(DetectorTable { alpha, beta })
}

pub fn write_detectors<T: Real>(path: &Path, vars: &DetectorVariables<T>) -> Result<()> {
    fs::write(path, detector_csv(vars))?;
    Ok(())
}

pub fn read_detectors(path: &Path) -> Result<DetectorTable> {
    parse_detector_csv(&fs::read_to_string(path)?)
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,loss,lr\n");
    for r in history {
        writeln!(out, "{},{:?},{:?}", r.iteration, r.loss, r.lr).unwrap();
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    fs::write(path, loss_csv(history))?;
    Ok(())
}
