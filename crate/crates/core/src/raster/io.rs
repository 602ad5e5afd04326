//! Single-band raster files.
//!
//! Two containers are supported:
//!
//! * GeoTIFF (`.tif`, `.tiff`): float32 heights or uint8 labels, GSD taken from
//!   `ModelPixelScaleTag`, upper-left corner from `ModelTiepointTag`, nodata
//!   from the GDAL `GDAL_NODATA` ASCII tag.
//! * Raw fallback (any other extension): little-endian samples with a text
//!   sidecar `<file>.hdr` holding `key value` lines (`rows`, `cols`, `gsd`,
//!   `nodata`, `dtype`, `origin_x`, `origin_y`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use super::{HeightMap, RoofClassMap};
use crate::error::{Error, Result};

/// Borrowed raster accepted by [`save_raster`].
#[derive(Clone, Copy, Debug)]
pub enum RasterRef<'a> {
    Height(&'a HeightMap),
    Roof(&'a RoofClassMap),
}

impl<'a> From<&'a HeightMap> for RasterRef<'a> {
    fn from(m: &'a HeightMap) -> Self {
        RasterRef::Height(m)
    }
}

impl<'a> From<&'a RoofClassMap> for RasterRef<'a> {
    fn from(m: &'a RoofClassMap) -> Self {
        RasterRef::Roof(m)
    }
}

/// A raster read from disk before interpretation.
#[derive(Clone, Debug)]
pub struct LoadedRaster {
    pub rows: usize,
    pub cols: usize,
    pub gsd: Option<f64>,
    pub origin: (f64, f64),
    pub nodata: Option<f64>,
    pub samples: Samples,
}

#[derive(Clone, Debug)]
pub enum Samples {
    Float(Vec<f64>),
    Byte(Vec<u8>),
}

/// Parsed sidecar header of the raw fallback format.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeader {
    pub rows: usize,
    pub cols: usize,
    pub gsd: Option<f64>,
    pub nodata: Option<f64>,
    pub dtype: RawDtype,
    pub origin: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawDtype {
    Float32,
    Uint8,
}

fn is_geotiff(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("tif") | Some("tiff")
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Loads a height raster. Integer rasters are widened to meters as-is.
pub fn load_raster(path: impl AsRef<Path>) -> Result<HeightMap> {
    let path = path.as_ref();
    let raw = read_any(path)?;
    let gsd = raw.gsd.ok_or(Error::MissingMetadata("gsd"))?;
    let values = match raw.samples {
        Samples::Float(v) => v,
        Samples::Byte(v) => v.into_iter().map(f64::from).collect(),
    };
    Ok(HeightMap::with_nodata(raw.rows, raw.cols, gsd, values, raw.nodata)?
        .with_origin(raw.origin.0, raw.origin.1))
}

/// Loads a roof-type label raster (uint8).
pub fn load_roof_map(path: impl AsRef<Path>) -> Result<RoofClassMap> {
    let path = path.as_ref();
    let raw = read_any(path)?;
    match raw.samples {
        Samples::Byte(v) => RoofClassMap::new(raw.rows, raw.cols, v),
        Samples::Float(_) => {
            Err(Error::Format(format!("{}: expected uint8 labels, found float samples", path.display())))
        }
    }
}

fn read_any(path: &Path) -> Result<LoadedRaster> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    if is_geotiff(path) {
        read_geotiff(path)
    } else {
        read_raw(path)
    }
}

/// Writes heights as float32 or labels as uint8. The container is chosen
/// from the extension.
pub fn save_raster<'a>(map: impl Into<RasterRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let map = map.into();
    let path = path.as_ref();
    if let RasterRef::Height(h) = map {
        h.check_finite()?;
    }
    if is_geotiff(path) {
        write_geotiff(map, path)
    } else {
        write_raw(map, path)
    }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn read_geotiff(path: &Path) -> Result<LoadedRaster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let bands = dec
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or(1);
    if bands != 1 {
        return Err(Error::ExpectedSingleBand(bands as usize));
    }
    let gsd = match dec.find_tag(Tag::ModelPixelScaleTag).map_err(|e| tiff_err(path, e))? {
        Some(v) => {
            let scale = v.into_f64_vec().map_err(|e| tiff_err(path, e))?;
            scale.first().copied()
        }
        None => None,
    };
    let origin = match dec.find_tag(Tag::ModelTiepointTag).map_err(|e| tiff_err(path, e))? {
        Some(v) => {
            let tp = v.into_f64_vec().map_err(|e| tiff_err(path, e))?;
            if tp.len() >= 6 {
                // Tiepoint maps raster (i, j) to model (x, y).
                let scale = gsd.unwrap_or(1.0);
                (tp[3] - tp[0] * scale, tp[4] + tp[1] * scale)
            } else {
                (0.0, 0.0)
            }
        }
        None => (0.0, 0.0),
    };
    let nodata = match dec.find_tag(Tag::GdalNodata).map_err(|e| tiff_err(path, e))? {
        Some(v) => {
            let s = v.into_string().map_err(|e| tiff_err(path, e))?;
            Some(parse_nodata(s.trim_end_matches('\0').trim()).ok_or_else(|| {
                Error::Format(format!("{}: unparsable nodata `{s}`", path.display()))
            })?)
        }
        None => None,
    };
    let samples = match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::F32(v) => Samples::Float(v.into_iter().map(f64::from).collect()),
        DecodingResult::F64(v) => Samples::Float(v),
        DecodingResult::U8(v) => Samples::Byte(v),
        DecodingResult::U16(v) => Samples::Float(v.into_iter().map(f64::from).collect()),
        DecodingResult::I16(v) => Samples::Float(v.into_iter().map(f64::from).collect()),
        DecodingResult::I32(v) => Samples::Float(v.into_iter().map(f64::from).collect()),
        DecodingResult::U32(v) => Samples::Float(v.into_iter().map(f64::from).collect()),
        _ => return Err(Error::Format(format!("{}: unsupported sample type", path.display()))),
    };
    Ok(LoadedRaster { rows: h as usize, cols: w as usize, gsd, origin, nodata, samples })
}

fn parse_nodata(s: &str) -> Option<f64> {
    match s.to_ascii_lowercase().as_str() {
        "nan" => Some(f64::NAN),
        "none" | "" => None,
        other => other.parse().ok(),
    }
}

fn format_nodata(nd: f64) -> String {
    if nd.is_nan() {
        "nan".to_string()
    } else {
        format!("{nd}")
    }
}

fn write_geotiff(map: RasterRef<'_>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    // GTRasterTypeGeoKey = RasterPixelIsArea
    let geokeys: [u16; 8] = [1, 1, 0, 1, 1025, 0, 1, 1];
    match map {
        RasterRef::Height(m) => {
            let (gsd, (ox, oy)) = (m.gsd(), m.origin());
            let data: Vec<f32> = m.values().iter().map(|&v| v as f32).collect();
            let mut img = enc
                .new_image::<colortype::Gray32Float>(m.cols() as u32, m.rows() as u32)
                .map_err(|e| tiff_err(path, e))?;
            let dir = img.encoder();
            dir.write_tag(Tag::ModelPixelScaleTag, &[gsd, gsd, 0.0][..]).map_err(|e| tiff_err(path, e))?;
            dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, ox, oy, 0.0][..])
                .map_err(|e| tiff_err(path, e))?;
            dir.write_tag(Tag::GeoKeyDirectoryTag, &geokeys[..]).map_err(|e| tiff_err(path, e))?;
            if let Some(nd) = m.nodata() {
                dir.write_tag(Tag::GdalNodata, format_nodata(nd).as_str()).map_err(|e| tiff_err(path, e))?;
            }
            img.write_data(&data).map_err(|e| tiff_err(path, e))?;
        }
        RasterRef::Roof(m) => {
            let mut img = enc
                .new_image::<colortype::Gray8>(m.cols() as u32, m.rows() as u32)
                .map_err(|e| tiff_err(path, e))?;
            let dir = img.encoder();
            // Label rasters carry a unit scale so they stay self-describing.
            dir.write_tag(Tag::ModelPixelScaleTag, &[1.0f64, 1.0, 0.0][..]).map_err(|e| tiff_err(path, e))?;
            dir.write_tag(Tag::GeoKeyDirectoryTag, &geokeys[..]).map_err(|e| tiff_err(path, e))?;
            img.write_data(m.labels()).map_err(|e| tiff_err(path, e))?;
        }
    }
    Ok(())
}

impl RawHeader {
    pub fn parse(text: &str) -> Result<RawHeader> {
        let mut rows = None;
        let mut cols = None;
        let mut gsd = None;
        let mut nodata = None;
        let mut dtype = RawDtype::Float32;
        let mut origin = (0.0, 0.0);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let value = parts.next().ok_or_else(|| Error::Format(format!("header line `{line}` has no value")))?;
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Format(format!("bad number `{v}` for `{key}`")))
            };
            match key {
                "rows" => rows = Some(num(value)? as usize),
                "cols" => cols = Some(num(value)? as usize),
                "gsd" => gsd = Some(num(value)?),
                "nodata" => nodata = parse_nodata(value),
                "dtype" => {
                    dtype = match value {
                        "float32" => RawDtype::Float32,
                        "uint8" => RawDtype::Uint8,
                        other => return Err(Error::Format(format!("unsupported dtype `{other}`"))),
                    }
                }
                "origin_x" => origin.0 = num(value)?,
                "origin_y" => origin.1 = num(value)?,
                "bands" => {
                    let bands = num(value)? as usize;
                    if bands != 1 {
                        return Err(Error::ExpectedSingleBand(bands));
                    }
                }
                _ => {}
            }
        }
        Ok(RawHeader {
            rows: rows.ok_or(Error::MissingMetadata("rows"))?,
            cols: cols.ok_or(Error::MissingMetadata("cols"))?,
            gsd,
            nodata,
            dtype,
            origin,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!("rows {}\ncols {}\n", self.rows, self.cols);
        if let Some(g) = self.gsd {
            s.push_str(&format!("gsd {g}\n"));
        }
        s.push_str(&format!(
            "nodata {}\n",
            self.nodata.map_or_else(|| "none".to_string(), format_nodata)
        ));
        s.push_str(match self.dtype {
            RawDtype::Float32 => "dtype float32\n",
            RawDtype::Uint8 => "dtype uint8\n",
        });
        s.push_str(&format!("origin_x {}\norigin_y {}\n", self.origin.0, self.origin.1));
        s
    }
}

fn read_raw(path: &Path) -> Result<LoadedRaster> {
    let hdr_path = sidecar(path);
    let text = std::fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let hdr = RawHeader::parse(&text)?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let n = hdr.rows * hdr.cols;
    let samples = match hdr.dtype {
        RawDtype::Float32 => {
            if bytes.len() != n * 4 {
                return Err(Error::Format(format!(
                    "{}: expected {} bytes, found {}",
                    path.display(),
                    n * 4,
                    bytes.len()
                )));
            }
            Samples::Float(
                bytes
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect(),
            )
        }
        RawDtype::Uint8 => {
            if bytes.len() != n {
                return Err(Error::Format(format!(
                    "{}: expected {n} bytes, found {}",
                    path.display(),
                    bytes.len()
                )));
            }
            Samples::Byte(bytes)
        }
    };
    Ok(LoadedRaster { rows: hdr.rows, cols: hdr.cols, gsd: hdr.gsd, origin: hdr.origin, nodata: hdr.nodata, samples })
}

fn write_raw(map: RasterRef<'_>, path: &Path) -> Result<()> {
    let (hdr, bytes) = match map {
        RasterRef::Height(m) => {
            let bytes: Vec<u8> = m.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            let hdr = RawHeader {
                rows: m.rows(),
                cols: m.cols(),
                gsd: Some(m.gsd()),
                nodata: m.nodata(),
                dtype: RawDtype::Float32,
                origin: m.origin(),
            };
            (hdr, bytes)
        }
        RasterRef::Roof(m) => {
            let hdr = RawHeader {
                rows: m.rows(),
                cols: m.cols(),
                gsd: Some(1.0),
                nodata: None,
                dtype: RawDtype::Uint8,
                origin: (0.0, 0.0),
            };
            (hdr, m.labels().to_vec())
        }
    };
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))?;
    let hdr_path = sidecar(path);
    std::fs::write(&hdr_path, hdr.render()).map_err(|e| Error::io(&hdr_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RoofClass;

    #[test]
    fn geotiff_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.tif");
        let vals = vec![0.25, -3.5, 1e3, f32::MIN_POSITIVE as f64];
        let m = HeightMap::new(2, 2, 0.5, vals).unwrap().with_origin(100.0, 200.0);
        save_raster(&m, &p).unwrap();
        let back = load_raster(&p).unwrap();
        assert_eq!(back.shape(), (2, 2));
        assert_eq!(back.gsd(), 0.5);
        assert_eq!(back.origin(), (100.0, 200.0));
        for (a, b) in m.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nodata_survives_both_containers() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["n.tif", "n.raw"] {
            let p = dir.path().join(name);
            let m = HeightMap::with_nodata(1, 3, 1.0, vec![1.0, -9999.0, 2.0], Some(-9999.0)).unwrap();
            save_raster(&m, &p).unwrap();
            let back = load_raster(&p).unwrap();
            assert_eq!(back.nodata(), Some(-9999.0));
            assert!(!back.is_valid(0, 1));
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["r.tif", "r.raw"] {
            let p = dir.path().join(name);
            let m = RoofClassMap::filled(3, 5, RoofClass::Sloped);
            save_raster(&m, &p).unwrap();
            assert_eq!(load_roof_map(&p).unwrap(), m);
        }
    }

    #[test]
    fn raw_header_requires_gsd() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        std::fs::write(&p, [0u8; 4]).unwrap();
        std::fs::write(sidecar(&p), "rows 1\ncols 1\ndtype float32\n").unwrap();
        let err = load_raster(&p).unwrap_err();
        assert!(matches!(err, Error::MissingMetadata("gsd")), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_raster("/definitely/not/here.tif").unwrap_err();
        assert!(err.to_string().contains("file not found"));
    }

    #[test]
    fn non_finite_values_are_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = HeightMap::filled(2, 2, 1.0, 0.0).unwrap();
        m.values_mut()[3] = f64::NAN;
        let err = save_raster(&m, dir.path().join("bad.tif")).unwrap_err();
        assert!(err.to_string().contains("non-finite value"));
    }
}
