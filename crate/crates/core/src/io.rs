//! File formats: MRC2014 volumes and stacks, tilt-angle lists, cloud
//! checkpoints and 16-bit PNG previews.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::volume::{GridSpec, ProjectionImage, ProjectionStack, Volume};

const MRC_HEADER: usize = 1024;
const MRC_MODE_FLOAT: i32 = 2;
const MRC_VERSION: i32 = 20140;

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Raw contents of a mode-2 MRC file.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcData {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Cell dimensions in world units.
    pub cell: [f32; 3],
    pub origin: [f32; 3],
    pub data: Vec<f32>,
}

impl MrcData {
    pub fn voxel_size(&self) -> f64 {
        if self.nx > 0 && self.cell[0] > 0.0 {
            self.cell[0] as f64 / self.nx as f64
        } else {
            1.0
        }
    }

    fn stats(&self) -> (f32, f32, f32, f32) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &x in &self.data {
            lo = lo.min(x as f64);
            hi = hi.max(x as f64);
            sum += x as f64;
        }
        let n = self.data.len() as f64;
        let mean = sum / n;
        let rms = (self.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        (lo as f32, hi as f32, mean as f32, rms as f32)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.nx * self.ny * self.nz;
        if n == 0 {
            return Err(Error::format("dimensions", format!("zero-size map {}x{}x{}", self.nx, self.ny, self.nz)));
        }
        if self.data.len() != n {
            return Err(Error::DimensionMismatch(format!("{} values for a {}x{}x{} map", self.data.len(), self.nx, self.ny, self.nz)));
        }
        let mut h = vec![0u8; MRC_HEADER];
        let mut put_i = |word: usize, v: i32| h[4 * word..4 * word + 4].copy_from_slice(&v.to_le_bytes());
        put_i(0, self.nx as i32);
        put_i(1, self.ny as i32);
        put_i(2, self.nz as i32);
        put_i(3, MRC_MODE_FLOAT);
        put_i(7, self.nx as i32);
        put_i(8, self.ny as i32);
        put_i(9, self.nz as i32);
        put_i(16, 1);
        put_i(17, 2);
        put_i(18, 3);
        put_i(22, if self.nz > 1 { 1 } else { 0 });
        put_i(27, MRC_VERSION);
        let (lo, hi, mean, rms) = self.stats();
        let mut put_f = |word: usize, v: f32| h[4 * word..4 * word + 4].copy_from_slice(&v.to_le_bytes());
        for a in 0..3 {
            put_f(10 + a, self.cell[a]);
            put_f(13 + a, 90.0);
            put_f(49 + a, self.origin[a]);
        }
        put_f(19, lo);
        put_f(20, hi);
        put_f(21, mean);
        put_f(54, rms);
        h[208..212].copy_from_slice(b"MAP ");
        h[212..216].copy_from_slice(&[0x44, 0x44, 0, 0]);
        let mut out = h;
        out.reserve(4 * n);
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MRC_HEADER {
            return Err(Error::Truncated { path: path.into(), expected: MRC_HEADER as u64, found: bytes.len() as u64 });
        }
        let i32_at = |word: usize| i32::from_le_bytes(bytes[4 * word..4 * word + 4].try_into().unwrap());
        let f32_at = |word: usize| f32::from_le_bytes(bytes[4 * word..4 * word + 4].try_into().unwrap());
        if &bytes[208..212] != b"MAP " {
            return Err(Error::format("map", format!("expected magic \"MAP \", found {:?}", &bytes[208..212])));
        }
        if bytes[212] == 0x11 {
            return Err(Error::format("machst", "big-endian files are not supported"));
        }
        let mode = i32_at(3);
        if mode != MRC_MODE_FLOAT {
            return Err(Error::format("mode", format!("only mode 2 (32-bit float) is supported, found {mode}")));
        }
        let dims = [i32_at(0), i32_at(1), i32_at(2)];
        if dims.iter().any(|&d| d <= 0) {
            return Err(Error::format("dimensions", format!("non-positive map size {dims:?}")));
        }
        let ext = i32_at(23);
        if ext < 0 {
            return Err(Error::format("nsymbt", format!("negative extended header size {ext}")));
        }
        let [nx, ny, nz] = dims.map(|d| d as usize);
        let start = MRC_HEADER + ext as usize;
        let expected = start as u64 + 4 * (nx * ny * nz) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() as u64 });
        }
        let data = bytes[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            nx,
            ny,
            nz,
            cell: [f32_at(10), f32_at(11), f32_at(12)],
            origin: [f32_at(49), f32_at(50), f32_at(51)],
            data,
        })
    }
}

pub fn read_mrc(path: &Path) -> Result<MrcData> {
    MrcData::from_bytes(&fs::read(path)?, path)
}

pub fn write_mrc(path: &Path, mrc: &MrcData) -> Result<()> {
    write_atomic(path, &mrc.to_bytes()?)
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let g = vol.grid;
    let vs = g.voxel_size as f32;
    write_mrc(
        path,
        &MrcData {
            nx: g.nx,
            ny: g.ny,
            nz: g.nz,
            cell: [vs * g.nx as f32, vs * g.ny as f32, vs * g.nz as f32],
            origin: g.origin.map(|o| o as f32),
            data: vol.data.iter().map(|&x| x as f32).collect(),
        },
    )
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let m = read_mrc(path)?;
    let grid = GridSpec::new(m.nx, m.ny, m.nz, m.voxel_size(), m.origin.map(|o| o as f64))?;
    Volume::from_data(grid, m.data.iter().map(|&x| x as f64).collect())
}

/// A stack is stored with one section per view.
pub fn write_stack(path: &Path, stack: &ProjectionStack, pixel_size: f64) -> Result<()> {
    let first = stack.images.first().ok_or_else(|| Error::format("dimensions", "empty projection stack"))?;
    let (nu, nv) = (first.nu, first.nv);
    let mut data = Vec::with_capacity(nu * nv * stack.len());
    for img in &stack.images {
        img.same_shape(first)?;
        data.extend(img.data.iter().map(|&x| x as f32));
    }
    let ps = pixel_size as f32;
    write_mrc(
        path,
        &MrcData { nx: nu, ny: nv, nz: stack.len(), cell: [ps * nu as f32, ps * nv as f32, ps * stack.len() as f32], origin: [0.0; 3], data },
    )
}

/// Read a stack; `angles` labels the views and must match the section count.
pub fn read_stack(path: &Path, angles: &[f64]) -> Result<ProjectionStack> {
    let m = read_mrc(path)?;
    if angles.len() != m.nz {
        return Err(Error::DimensionMismatch(format!("{} angles for a stack of {} views", angles.len(), m.nz)));
    }
    let plane = m.nx * m.ny;
    let images = m
        .data
        .chunks_exact(plane)
        .enumerate()
        .map(|(v, c)| ProjectionImage { nu: m.nx, nv: m.ny, data: c.iter().map(|&x| x as f64).collect(), view: v, angle_deg: angles[v] })
        .collect();
    ProjectionStack::new(images)
}

/// One angle in degrees per line; blank lines and `#` comments are skipped.
pub fn read_angles(path: &Path) -> Result<Vec<f64>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(t.parse::<f64>().map_err(|e| Error::format("angles", format!("line {}: {t:?}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_angles(path: &Path, angles: &[f64]) -> Result<()> {
    let mut s = String::new();
    for a in angles {
        s.push_str(&format!("{a}\n"));
    }
    write_atomic(path, s.as_bytes())
}

const CLOUD_MAGIC: &[u8; 4] = b"DZGC";
const CLOUD_VERSION: u32 = 1;

/// Little-endian checkpoint: magic, version, count, then f32 arrays of
/// positions, log-scales, rotations (w, x, y, z) and raw denza.
pub fn cloud_to_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(16 + 44 * n);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let mut put = |x: f64| out.extend_from_slice(&(x as f32).to_le_bytes());
    cloud.positions.iter().flatten().for_each(|&x| put(x));
    cloud.log_scales.iter().flatten().for_each(|&x| put(x));
    cloud.rotations.iter().flatten().for_each(|&x| put(x));
    cloud.denza_raw.iter().for_each(|&x| put(x));
    out
}

pub fn cloud_from_bytes(bytes: &[u8], path: &Path) -> Result<GaussianCloud> {
    if bytes.len() < 16 {
        return Err(Error::Truncated { path: path.into(), expected: 16, found: bytes.len() as u64 });
    }
    if &bytes[..4] != CLOUD_MAGIC {
        return Err(Error::format("magic", format!("expected \"DZGC\", found {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLOUD_VERSION {
        return Err(Error::format("version", format!("unsupported checkpoint version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = 16u64.saturating_add(n.saturating_mul(44));
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() as u64 });
    }
    let n = n as usize;
    let mut vals = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
    let pos = take(3 * n);
    let ls = take(3 * n);
    let rot = take(4 * n);
    let raw = take(n);
    let mut cloud = GaussianCloud::with_capacity(n);
    for i in 0..n {
        cloud.push(
            [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]],
            [ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]],
            [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
            raw[i],
        );
    }
    Ok(cloud)
}

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_atomic(path, &cloud_to_bytes(cloud))
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    cloud_from_bytes(&fs::read(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Map the image minimum to 0 and maximum to 65535; a constant image maps to 0.
    MinMax,
    FixedRange(f64, f64),
}

/// Quantise to 16 bits; returns the samples and the `(lo, hi)` actually used.
pub fn quantize_u16(img: &ProjectionImage, norm: Normalization) -> Result<(Vec<u16>, f64, f64)> {
    if let Some(p) = img.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("pixel {p} is not finite")));
    }
    let (lo, hi) = match norm {
        Normalization::MinMax => (
            img.data.iter().copied().fold(f64::INFINITY, f64::min),
            img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        Normalization::FixedRange(lo, hi) => {
            if !(hi > lo) {
                return Err(Error::Config(format!("fixed range needs hi > lo, got [{lo}, {hi}]")));
            }
            (lo, hi)
        }
    };
    let q = img
        .data
        .iter()
        .map(|&x| if hi > lo { ((x - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0) as u16 } else { 0 })
        .collect();
    Ok((q, lo, hi))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".norm.txt");
    PathBuf::from(s)
}

/// 16-bit grayscale PNG plus a `<path>.norm.txt` sidecar recording the mapping.
pub fn export_png(img: &ProjectionImage, path: &Path, norm: Normalization) -> Result<()> {
    let (q, lo, hi) = quantize_u16(img, norm)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.nu as u32, img.nv as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let bytes: Vec<u8> = q.iter().flat_map(|v| v.to_be_bytes()).collect();
        w.write_image_data(&bytes).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    write_atomic(path, &buf)?;
    let mode = match norm {
        Normalization::MinMax => "minmax",
        Normalization::FixedRange(..) => "fixed",
    };
    write_atomic(&sidecar_path(path), format!("normalization = {mode}\nlo = {lo:e}\nhi = {hi:e}\n").as_bytes())
}

/// Decode a 16-bit grayscale PNG into raw samples.
pub fn read_png_u16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| Error::format("png", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format("png", e.to_string()))?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::format("png", "expected 16-bit grayscale"));
    }
    let data = buf[..info.buffer_size()].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((info.width as usize, info.height as usize, data))
}
