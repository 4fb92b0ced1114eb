//! On-disk formats: `.cfield` complex fields, dataset directories, CSV
//! tables and 16-bit PGM images.
//!
//! `.cfield` layout (little-endian): magic `CFLD0001`, `u32` H, `u32` W,
//! `f64` pitch in metres, then `H·W` interleaved `(re, im)` `f32`, row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, Geometry};
use crate::simulate::{GroundTruth, ScanDataset, ScanPlan};

pub const CFIELD_MAGIC: &[u8; 8] = b"CFLD0001";
pub const MANIFEST_VERSION: u32 = 1;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_cfield(field: &ComplexField) -> Vec<u8> {
    let (h, w) = field.shape();
    let mut out = Vec::with_capacity(24 + 8 * h * w);
    out.extend_from_slice(CFIELD_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&field.pitch().to_le_bytes());
    for v in field.data() {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_cfield(bytes: &[u8]) -> std::result::Result<ComplexField, String> {
    if bytes.len() < 24 || &bytes[..8] != CFIELD_MAGIC {
        return Err("missing CFLD0001 header".into());
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let pitch = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = &bytes[24..];
    if body.len() != 8 * h * w {
        return Err(format!(
            "expected {} payload bytes for {h}x{w}, found {}",
            8 * h * w,
            body.len()
        ));
    }
    let data: Vec<Complex64> = body
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    let arr = Array2::from_shape_vec((h, w), data).map_err(|e| e.to_string())?;
    ComplexField::new(arr, pitch).map_err(|e| e.to_string())
}

pub fn write_cfield(path: impl AsRef<Path>, field: &ComplexField) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cfield(field)).map_err(|e| Error::io(path, e))
}

pub fn read_cfield(path: impl AsRef<Path>) -> Result<ComplexField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cfield(&bytes).map_err(|m| format_err(path, m))
}

/// Dataset `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub n_frames: usize,
    pub frame_shape: [usize; 2],
    pub wavelength_m: f64,
    pub z_sm_m: f64,
    pub z_md_m: f64,
    pub detector_pitch_m: f64,
    pub sample_pitch_m: f64,
    pub photons: Option<f64>,
    pub seed: u64,
    pub has_truth: bool,
    #[serde(default = "default_true")]
    pub far_field: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperture_diameter_m: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl Manifest {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            wavelength: self.wavelength_m,
            z_sample_to_modulator: self.z_sm_m,
            z_modulator_to_detector: self.z_md_m,
            detector_pitch: self.detector_pitch_m,
            sample_plane_pitch: self.sample_pitch_m,
            far_field: self.far_field,
        }
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Create `dir`, refusing to touch existing non-empty output unless `overwrite`.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} exists and is not empty; pass --overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct PositionRow {
    frame: usize,
    y_px: f64,
    x_px: f64,
}

pub fn write_positions(path: impl AsRef<Path>, positions: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (frame, &(y, x)) in positions.iter().enumerate() {
        w.serialize(PositionRow {
            frame,
            y_px: y,
            x_px: x,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_positions(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (k, row) in r.deserialize::<PositionRow>().enumerate() {
        let row = row?;
        if row.frame != k {
            return Err(format_err(path, format!("row {k} has frame index {}", row.frame)));
        }
        out.push((row.y_px, row.x_px));
    }
    Ok(out)
}

/// Serialise any rows to CSV with a header; `\n` line endings.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_frames(path: &Path, frames: &[Array2<f64>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in frames {
        for v in f {
            w.write_all(&(*v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_frames(path: &Path, n: usize, shape: (usize, usize)) -> Result<Vec<Array2<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let per = shape.0 * shape.1;
    if bytes.len() != 4 * n * per {
        return Err(format_err(
            path,
            format!("expected {} bytes for {n} frames of {shape:?}, found {}", 4 * n * per, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4 * per)
        .map(|chunk| {
            let v: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Array2::from_shape_vec(shape, v).expect("chunk length matches shape")
        })
        .collect())
}

pub fn manifest_for(ds: &ScanDataset) -> Manifest {
    let (h, w) = ds.frame_shape();
    Manifest {
        version: MANIFEST_VERSION,
        n_frames: ds.n_frames(),
        frame_shape: [h, w],
        wavelength_m: ds.geometry.wavelength,
        z_sm_m: ds.geometry.z_sample_to_modulator,
        z_md_m: ds.geometry.z_modulator_to_detector,
        detector_pitch_m: ds.geometry.detector_pitch,
        sample_pitch_m: ds.geometry.sample_plane_pitch,
        photons: ds.photons,
        seed: ds.seed,
        has_truth: ds.truth.is_some(),
        far_field: ds.geometry.far_field,
        scan_grid: ds.scan_grid.map(|(r, c)| [r, c]),
        aperture_diameter_m: ds.aperture_diameter,
    }
}

/// Write `manifest.json`, `frames.bin` and, when present, `truth/`.
pub fn write_dataset(dir: &Path, ds: &ScanDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(dir.join("manifest.json"), &manifest_for(ds))?;
    write_frames(&dir.join("frames.bin"), &ds.frames)?;
    if let Some(t) = &ds.truth {
        let td = dir.join("truth");
        fs::create_dir_all(&td).map_err(|e| Error::io(&td, e))?;
        write_cfield(td.join("sample.cfield"), &t.sample)?;
        write_cfield(td.join("probe.cfield"), &t.probe)?;
        write_cfield(td.join("modulator.cfield"), &t.modulator)?;
        write_positions(td.join("positions.csv"), &t.plan.positions)?;
        write_positions(td.join("drift.csv"), &t.drift)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<ScanDataset> {
    let manifest: Manifest = read_json(dir.join("manifest.json"))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(format_err(
            &dir.join("manifest.json"),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let shape = (manifest.frame_shape[0], manifest.frame_shape[1]);
    let frames = read_frames(&dir.join("frames.bin"), manifest.n_frames, shape)?;
    let scan_grid = manifest.scan_grid.map(|g| (g[0], g[1]));
    let truth = if manifest.has_truth {
        let td = dir.join("truth");
        let mut plan = ScanPlan::new(read_positions(td.join("positions.csv"))?)?;
        plan.grid = scan_grid;
        Some(GroundTruth {
            sample: read_cfield(td.join("sample.cfield"))?,
            probe: read_cfield(td.join("probe.cfield"))?,
            modulator: read_cfield(td.join("modulator.cfield"))?,
            plan,
            drift: read_positions(td.join("drift.csv"))?,
        })
    } else {
        None
    };
    let ds = ScanDataset {
        frames,
        geometry: manifest.geometry(),
        photons: manifest.photons,
        seed: manifest.seed,
        scan_grid,
        aperture_diameter: manifest.aperture_diameter_m,
        valid_mask: None,
        truth,
    };
    ds.validate()?;
    Ok(ds)
}

/// 16-bit binary PGM (P5), big-endian samples as the format requires.
pub fn write_pgm16(path: impl AsRef<Path>, image: &Array2<u16>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dim();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in image {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM (8- or 16-bit) as values scaled to `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(format_err(path, format!("unsupported PGM magic {}", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PGM header value {s}")))
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("bad PGM maxval {maxval}")));
    }
    let bpp = if maxval < 256 { 1 } else { 2 };
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() < w * h * bpp {
        return Err(format_err(path, "truncated PGM payload"));
    }
    let scale = 1.0 / maxval as f64;
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let k = (i * w + j) * bpp;
        let v = if bpp == 1 {
            body[k] as f64
        } else {
            u16::from_be_bytes([body[k], body[k + 1]]) as f64
        };
        v * scale
    }))
}

/// Amplitude scaled min→0, max→65535.
pub fn amplitude_image(data: &Array2<Complex64>) -> Array2<u16> {
    let amp = data.mapv(|v| v.norm());
    let lo = amp.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = amp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    amp.mapv(|a| (((a - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16)
}

/// Phase mapped `[-π, π] → [0, 65535]`.
pub fn phase_image(data: &Array2<Complex64>) -> Array2<u16> {
    use std::f64::consts::PI;
    data.mapv(|v| (((v.arg() + PI) / (2.0 * PI)) * 65535.0).round().clamp(0.0, 65535.0) as u16)
}

/// Numbered file inside `dir`, e.g. `object_0007.cfield`.
pub fn numbered(dir: &Path, stem: &str, index: usize) -> PathBuf {
    dir.join(format!("{stem}_{index:04}.cfield"))
}
