//! Bit-exact file formats: GRD1 grids, SHT1 shot records, NFC1 flow
//! checkpoints, plus PGM heatmap dumps and CSV helpers.
//!
//! All binary formats are little-endian. Readers validate magic bytes and
//! payload sizes before allocating, and never return partial results.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::wavesim::ShotRecord;

const GRD_MAGIC: &[u8; 4] = b"GRD1";
const SHT_MAGIC: &[u8; 4] = b"SHT1";
const NFC_MAGIC: &[u8; 4] = b"NFC1";

/// Sanity cap on declared dimensions so corrupt headers fail fast
/// instead of attempting a huge allocation.
const MAX_DIM: u64 = 1 << 20;

/// A grid read from a GRD1 file: one or more channels plus spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    /// (channel, x, y), row-major per channel on disk, channel-interleaved.
    pub data: Array3<f64>,
    /// Grid spacing in meters.
    pub dx: f64,
}

impl GridFile {
    pub fn single(field: &Array2<f64>, dx: f64) -> Self {
        let (nx, ny) = field.dim();
        let mut data = Array3::zeros((1, nx, ny));
        data.index_axis_mut(ndarray::Axis(0), 0).assign(field);
        Self { data, dx }
    }

    /// Stack same-shaped fields as channels of one grid.
    pub fn stacked(fields: &[&Array2<f64>], dx: f64) -> Result<Self> {
        let (nx, ny) = fields
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| Error::Config("grid needs at least one channel".into()))?;
        let mut data = Array3::zeros((fields.len(), nx, ny));
        for (c, f) in fields.iter().enumerate() {
            if f.dim() != (nx, ny) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{nx}x{ny}"),
                    found: format!("{}x{}", f.dim().0, f.dim().1),
                });
            }
            data.index_axis_mut(ndarray::Axis(0), c).assign(f);
        }
        Ok(Self { data, dx })
    }

    /// First channel as a 2D field.
    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.data.index_axis(ndarray::Axis(0), c).to_owned()
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().0
    }
}

fn read_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(|_| Error::Truncated {
        expected: 4,
        found: 0,
    })?;
    if &got != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&got).into_owned(),
        });
    }
    Ok(())
}

fn check_dim(v: u32, what: &str) -> Result<usize> {
    let v64 = u64::from(v);
    if v64 == 0 || v64 > MAX_DIM {
        return Err(Error::DimensionOverflow(format!("{what}={v}")));
    }
    Ok(v as usize)
}

/// Write a multi-channel grid as GRD1.
///
/// Layout: magic "GRD1", u32 nx, u32 ny, u32 n_channels, f64 dx, then
/// nx*ny*n_channels f64 values row-major with channels interleaved per cell.
pub fn write_grid(grid: &GridFile, path: &Path) -> Result<()> {
    let (nc, nx, ny) = grid.data.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRD_MAGIC)?;
    w.write_u32::<LittleEndian>(nx as u32)?;
    w.write_u32::<LittleEndian>(ny as u32)?;
    w.write_u32::<LittleEndian>(nc as u32)?;
    w.write_f64::<LittleEndian>(grid.dx)?;
    for i in 0..nx {
        for j in 0..ny {
            for c in 0..nc {
                w.write_f64::<LittleEndian>(grid.data[[c, i, j]])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Convenience wrapper writing a single-channel field.
pub fn write_field(field: &Array2<f64>, dx: f64, path: &Path) -> Result<()> {
    write_grid(&GridFile::single(field, dx), path)
}

/// Read a GRD1 grid.
pub fn read_grid(path: &Path) -> Result<GridFile> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, GRD_MAGIC)?;
    let nx = check_dim(r.read_u32::<LittleEndian>()?, "nx")?;
    let ny = check_dim(r.read_u32::<LittleEndian>()?, "ny")?;
    let nc = check_dim(r.read_u32::<LittleEndian>()?, "n_channels")?;
    let dx = r.read_f64::<LittleEndian>()?;
    let total = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nc))
        .ok_or_else(|| Error::DimensionOverflow(format!("{nx}x{ny}x{nc}")))?;
    let mut payload = vec![0.0f64; total];
    for (k, slot) in payload.iter_mut().enumerate() {
        *slot = r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated {
            expected: total * 8,
            found: k * 8,
        })?;
    }
    let mut data = Array3::zeros((nc, nx, ny));
    let mut k = 0;
    for i in 0..nx {
        for j in 0..ny {
            for c in 0..nc {
                data[[c, i, j]] = payload[k];
                k += 1;
            }
        }
    }
    Ok(GridFile { data, dx })
}

/// Read a single-channel GRD1 file as a 2D field.
pub fn read_field(path: &Path) -> Result<(Array2<f64>, f64)> {
    let g = read_grid(path)?;
    if g.data.dim().0 != 1 {
        return Err(Error::ShapeMismatch {
            expected: "1 channel".into(),
            found: format!("{} channels", g.data.dim().0),
        });
    }
    Ok((g.channel(0), g.dx))
}

/// Write a shot record as SHT1: magic, u32 nt, u32 n_receivers,
/// u32 source_index, then nt*n_receivers f64 traces time-major.
pub fn write_shot(record: &ShotRecord, path: &Path) -> Result<()> {
    let (nt, nr) = record.traces.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SHT_MAGIC)?;
    w.write_u32::<LittleEndian>(nt as u32)?;
    w.write_u32::<LittleEndian>(nr as u32)?;
    w.write_u32::<LittleEndian>(record.source_index as u32)?;
    for t in 0..nt {
        for r in 0..nr {
            w.write_f64::<LittleEndian>(record.traces[[t, r]])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an SHT1 shot record.
pub fn read_shot(path: &Path) -> Result<ShotRecord> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, SHT_MAGIC)?;
    let nt = check_dim(r.read_u32::<LittleEndian>()?, "nt")?;
    let nr = check_dim(r.read_u32::<LittleEndian>()?, "n_receivers")?;
    let source_index = r.read_u32::<LittleEndian>()? as usize;
    let total = nt
        .checked_mul(nr)
        .ok_or_else(|| Error::DimensionOverflow(format!("{nt}x{nr}")))?;
    let mut traces = Array2::zeros((nt, nr));
    for k in 0..total {
        let v = r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated {
            expected: total * 8,
            found: k * 8,
        })?;
        traces[[k / nr, k % nr]] = v;
    }
    ShotRecord::new(traces, source_index)
}

/// Write an 8-bit PGM heatmap of a field, min-max scaled.
pub fn write_pgm(field: &Array2<f64>, path: &Path) -> Result<()> {
    let (nx, ny) = field.dim();
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut w = BufWriter::new(File::create(path)?);
    // PGM rows scan y, columns scan x
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    for j in 0..ny {
        for i in 0..nx {
            let v = ((field[[i, j]] - lo) / range * 255.0).round().clamp(0.0, 255.0);
            w.write_all(&[v as u8])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write rows of (name, value) columns as CSV with a header.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) mod nfc {
    //! NFC1 checkpoint payload helpers, used by the flow module.

    use super::*;

    pub fn write_header(w: &mut impl Write) -> Result<()> {
        w.write_all(NFC_MAGIC)?;
        Ok(())
    }

    pub fn read_header(r: &mut impl Read) -> Result<()> {
        read_magic(r, NFC_MAGIC)
    }

    /// One f32 tensor with a shape header: u32 rank, u32 dims, f32 data.
    pub fn write_tensor(w: &mut impl Write, shape: &[usize], data: &[f64]) -> Result<()> {
        w.write_u32::<LittleEndian>(shape.len() as u32)?;
        for &d in shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in data {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn read_tensor(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = r.read_u32::<LittleEndian>()?;
        if rank > 8 {
            return Err(Error::DimensionOverflow(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut total = 1usize;
        for _ in 0..rank {
            let d = check_dim(r.read_u32::<LittleEndian>()?, "tensor dim")?;
            total = total
                .checked_mul(d)
                .ok_or_else(|| Error::DimensionOverflow("tensor size".into()))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(total);
        for k in 0..total {
            let v = r.read_f32::<LittleEndian>().map_err(|_| Error::Truncated {
                expected: total * 4,
                found: k * 4,
            })?;
            data.push(f64::from(v));
        }
        Ok((shape, data))
    }
}
