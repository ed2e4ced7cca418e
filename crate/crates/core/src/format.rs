//! On-disk formats.
//!
//! Series, map and field files share one layout: a text header of
//! `key value...` lines opened by a magic line and closed by `end`,
//! followed by a little-endian binary payload.
//!
//! * Series (`T2PINN-SERIES 1`): keys `rows`, `cols`, `times` (one value
//!   per frame). Payload: `f32` pixels, frame-major then row-major.
//! * Map (`T2PINN-MAP 1`): keys `kind`, `rows`, `cols`. Payload: `f32`
//!   values row-major (NaN outside the mask or where the fit failed), then
//!   one mask byte per voxel (`0` or `1`).
//! * Field (`T2PINN-FIELD 1`): keys `rows`, `cols`, `width`, `t_max`.
//!   Payload: one presence byte per voxel, then for every present voxel its
//!   `f64` signal scale followed by its `f64` flat network parameters.
//!
//! Header floats are written in shortest round-trip notation, so writing
//! a file that was read reproduces it byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{param_len, MlpParams};
use crate::pipeline::{Dims, ImageSeries, MapKind, ParameterMap, TrainedField, VoxelNet};

const SERIES_MAGIC: &str = "T2PINN-SERIES 1";
const MAP_MAGIC: &str = "T2PINN-MAP 1";
const FIELD_MAGIC: &str = "T2PINN-FIELD 1";
const MAX_HEADER_BYTES: usize = 1 << 20;

struct Header {
    entries: Vec<(String, Vec<String>)>,
}

impl Header {
    fn read(r: &mut impl BufRead, magic: &str) -> Result<Self> {
        let mut line = String::new();
        let mut total = 0;
        let mut next = |line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line)?;
            total += n;
            if n == 0 {
                return Err(Error::Format("header ended without `end`".into()));
            }
            if total > MAX_HEADER_BYTES {
                return Err(Error::Format("header too long".into()));
            }
            Ok(())
        };
        next(&mut line)?;
        if line.trim_end() != magic {
            return Err(Error::Format(format!(
                "expected `{magic}`, found `{}`",
                line.trim_end()
            )));
        }
        let mut entries = Vec::new();
        loop {
            next(&mut line)?;
            let mut words = line.split_whitespace();
            match words.next() {
                None => continue,
                Some("end") => break,
                Some(key) => entries.push((key.to_string(), words.map(str::to_string).collect())),
            }
        }
        Ok(Self { entries })
    }

    fn values(&self, key: &str) -> Result<&[String]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))
    }

    fn single(&self, key: &str) -> Result<&str> {
        match self.values(key)? {
            [v] => Ok(v),
            _ => Err(Error::Format(format!("`{key}` takes exactly one value"))),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.single(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("bad value `{v}` for `{key}`")))
    }

    fn dims(&self) -> Result<Dims> {
        let dims = Dims::new(self.parse("rows")?, self.parse("cols")?);
        if dims.is_empty() {
            return Err(Error::Format("grid dimensions must be positive".into()));
        }
        dims.rows
            .checked_mul(dims.cols)
            .filter(|n| *n <= 1 << 28)
            .ok_or_else(|| Error::Format("grid too large".into()))?;
        Ok(dims)
    }
}

fn read_exact_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("payload is truncated".into()),
        _ => e.into(),
    })?;
    Ok(buf)
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("unexpected bytes after payload".into())),
    }
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let bytes = read_exact_vec(r, n * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let bytes = read_exact_vec(r, n * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

fn write_f32s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Writes `series`; pixel values are stored as `f32`.
pub fn write_series(w: &mut impl Write, series: &ImageSeries) -> Result<()> {
    let dims = series.dims();
    let times: Vec<String> = series.times().iter().map(|t| t.to_string()).collect();
    write!(
        w,
        "{SERIES_MAGIC}\nrows {}\ncols {}\ntimes {}\nend\n",
        dims.rows,
        dims.cols,
        times.join(" ")
    )?;
    write_f32s(w, series.data())
}

pub fn read_series(r: &mut impl BufRead) -> Result<ImageSeries> {
    let header = Header::read(r, SERIES_MAGIC)?;
    let dims = header.dims()?;
    let times = header
        .values("times")?
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad echo time `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if times.is_empty() || times.len() > 1 << 16 {
        return Err(Error::Format(format!(
            "unsupported frame count {}",
            times.len()
        )));
    }
    let data = read_f32s(r, times.len() * dims.len())?;
    expect_eof(r)?;
    ImageSeries::new(dims, times, data).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `map`; values are stored as `f32`.
pub fn write_map(w: &mut impl Write, map: &ParameterMap) -> Result<()> {
    let dims = map.dims();
    write!(
        w,
        "{MAP_MAGIC}\nkind {}\nrows {}\ncols {}\nend\n",
        map.kind().as_str(),
        dims.rows,
        dims.cols
    )?;
    write_f32s(w, map.values())?;
    let mask: Vec<u8> = map.mask().iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    Ok(())
}

pub fn read_map(r: &mut impl BufRead) -> Result<ParameterMap> {
    let header = Header::read(r, MAP_MAGIC)?;
    let kind = header.single("kind")?;
    let kind =
        MapKind::parse(kind).ok_or_else(|| Error::Format(format!("unknown map kind `{kind}`")))?;
    let dims = header.dims()?;
    let values = read_f32s(r, dims.len())?;
    let mask = read_exact_vec(r, dims.len())?
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Format(format!("bad mask byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    expect_eof(r)?;
    if values.iter().zip(&mask).any(|(v, &m)| !m && !v.is_nan()) {
        return Err(Error::Format("value outside the mask must be NaN".into()));
    }
    ParameterMap::new(dims, kind, values, mask)
}

/// Writes the trained networks with full `f64` precision.
pub fn write_field(w: &mut impl Write, field: &TrainedField) -> Result<()> {
    let dims = field.dims();
    write!(
        w,
        "{FIELD_MAGIC}\nrows {}\ncols {}\nwidth {}\nt_max {}\nend\n",
        dims.rows,
        dims.cols,
        field.width(),
        field.t_max()
    )?;
    let present: Vec<u8> = field.nets().iter().map(|n| n.is_some() as u8).collect();
    w.write_all(&present)?;
    for net in field.nets().iter().flatten() {
        write_f64s(w, &[net.scale])?;
        write_f64s(w, net.params.as_flat())?;
    }
    Ok(())
}

pub fn read_field(r: &mut impl BufRead) -> Result<TrainedField> {
    let header = Header::read(r, FIELD_MAGIC)?;
    let dims = header.dims()?;
    let width: usize = header.parse("width")?;
    if width == 0 || width > 1024 {
        return Err(Error::Format(format!("unsupported network width {width}")));
    }
    let t_max: f64 = header.parse("t_max")?;
    let present = read_exact_vec(r, dims.len())?;
    let mut nets = Vec::with_capacity(dims.len());
    for b in present {
        nets.push(match b {
            0 => None,
            1 => {
                let scale = read_f64s(r, 1)?[0];
                let params = MlpParams::from_flat(width, t_max, read_f64s(r, param_len(width))?)?;
                Some(VoxelNet { params, scale })
            }
            _ => return Err(Error::Format(format!("bad presence byte {b}"))),
        });
    }
    expect_eof(r)?;
    TrainedField::new(dims, width, t_max, nets)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

pub fn save_series(path: &Path, series: &ImageSeries) -> Result<()> {
    let mut w = create(path)?;
    write_series(&mut w, series)?;
    finish(w)
}

pub fn load_series(path: &Path) -> Result<ImageSeries> {
    read_series(&mut open(path)?)
}

pub fn save_map(path: &Path, map: &ParameterMap) -> Result<()> {
    let mut w = create(path)?;
    write_map(&mut w, map)?;
    finish(w)
}

pub fn load_map(path: &Path) -> Result<ParameterMap> {
    read_map(&mut open(path)?)
}

pub fn save_field(path: &Path, field: &TrainedField) -> Result<()> {
    let mut w = create(path)?;
    write_field(&mut w, field)?;
    finish(w)
}

pub fn load_field(path: &Path) -> Result<TrainedField> {
    read_field(&mut open(path)?)
}

/// Reads a series from CSV with header `row,col,<t_1>,...,<t_I>` and one
/// record per voxel. The grid spans the largest row and column indices;
/// voxels without a record are zero.
pub fn read_series_csv(r: impl Read) -> Result<ImageSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let fmt = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let headers = reader.headers().map_err(fmt)?.clone();
    if headers.len() < 3 || &headers[0] != "row" || &headers[1] != "col" {
        return Err(Error::Format(
            "csv header must be `row,col,<echo times>`".into(),
        ));
    }
    let times = headers
        .iter()
        .skip(2)
        .map(|h| {
            h.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad echo time `{h}` in csv header")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let (mut rows, mut cols) = (0, 0);
    for rec in reader.records() {
        let rec = rec.map_err(fmt)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let idx = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad voxel index `{}`", field(i))))
        };
        let (row, col) = (idx(0)?, idx(1)?);
        let signals = (2..rec.len())
            .map(|i| {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad signal `{}`", field(i))))
            })
            .collect::<Result<Vec<_>>>()?;
        rows = rows.max(row + 1);
        cols = cols.max(col + 1);
        records.push((row, col, signals));
    }
    if records.is_empty() {
        return Err(Error::Format("csv has no voxel records".into()));
    }
    let dims = Dims::new(rows, cols);
    let n = dims.len();
    let mut data = vec![0.0; times.len() * n];
    let mut seen = vec![false; n];
    for (row, col, signals) in records {
        let idx = dims.index(row, col);
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Format(format!(
                "duplicate record for voxel ({row}, {col})"
            )));
        }
        for (i, s) in signals.into_iter().enumerate() {
            data[i * n + idx] = s;
        }
    }
    ImageSeries::new(dims, times, data).map_err(|e| Error::Format(e.to_string()))
}

/// Display window of a grayscale export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Window {
    /// Range of the finite masked-in values, or `[0, 1]` if there are none.
    pub fn auto(map: &ParameterMap) -> Self {
        let (low, high) = map
            .masked_values()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if low <= high {
            Self { low, high }
        } else {
            Self {
                low: 0.0,
                high: 1.0,
            }
        }
    }

    /// Gray level of `v`: linear from 0 at `low` to 255 at `high`, clamped.
    /// NaN maps to 0.
    pub fn gray(&self, v: f64) -> u8 {
        if v.is_nan() {
            return 0;
        }
        let span = self.high - self.low;
        let x = if span > 0.0 {
            (v - self.low) / span
        } else {
            1.0
        };
        (x.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// 8-bit grayscale PNG of `map` under `window`.
pub fn write_png(w: impl Write, map: &ParameterMap, window: Window) -> Result<()> {
    let dims = map.dims();
    let mut enc = png::Encoder::new(w, dims.cols as u32, dims.rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = map.values().iter().map(|&v| window.gray(v)).collect();
    let png_err = |e: png::EncodingError| Error::Io(format!("png: {e}"));
    enc.write_header()
        .map_err(png_err)?
        .write_image_data(&pixels)
        .map_err(png_err)
}

pub fn save_png(path: &Path, map: &ParameterMap, window: Window) -> Result<()> {
    let w = create(path)?;
    write_png(w, map, window)
}
