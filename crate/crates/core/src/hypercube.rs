//! Hyperspectral cube model, band-interleaved-by-line I/O and band-level
//! products (slices, false-color composites, region spectra).
//!
//! Cubes are stored band-last in memory (`[row][col][band]`), whatever the
//! on-disk interleave, because per-pixel spectra are the dominant access
//! pattern for losses and metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubeKind {
    /// Sensor radiance (nonnegative, unbounded).
    Raw,
    /// Reflectance in `[0, 1]`.
    Calibrated,
}

/// `height x width x bands` spectral volume.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    wavelengths: Vec<f64>,
    data: Vec<f32>,
    kind: CubeKind,
}

impl HyperCube {
    pub fn new(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        data: Vec<f32>,
        kind: CubeKind,
    ) -> Result<Self> {
        if height == 0 || width == 0 || wavelengths.is_empty() {
            return Err(Error::InvalidCube(format!(
                "empty dimension: {height}x{width}x{}",
                wavelengths.len()
            )));
        }
        check_wavelengths(&wavelengths)?;
        let expected = height * width * wavelengths.len();
        if data.len() != expected {
            return Err(Error::InvalidCube(format!(
                "data length {} != {height}*{width}*{}",
                data.len(),
                wavelengths.len()
            )));
        }
        let cube = HyperCube {
            height,
            width,
            wavelengths,
            data,
            kind,
        };
        cube.check_values()?;
        Ok(cube)
    }

    /// Cube whose every pixel carries `spectrum`.
    pub fn filled(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        spectrum: &[f32],
        kind: CubeKind,
    ) -> Result<Self> {
        if spectrum.len() != wavelengths.len() {
            return Err(Error::ShapeMismatch(format!(
                "spectrum has {} bands, wavelength grid has {}",
                spectrum.len(),
                wavelengths.len()
            )));
        }
        let mut data = Vec::with_capacity(height * width * spectrum.len());
        for _ in 0..height * width {
            data.extend_from_slice(spectrum);
        }
        Self::new(height, width, wavelengths, data, kind)
    }

    /// Builds a cube by evaluating `f(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        kind: CubeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let bands = wavelengths.len();
        let mut data = Vec::with_capacity(height * width * bands);
        for y in 0..height {
            for x in 0..width {
                for b in 0..bands {
                    data.push(f(y, x, b));
                }
            }
        }
        Self::new(height, width, wavelengths, data, kind)
    }

    fn check_values(&self) -> Result<()> {
        match self.kind {
            CubeKind::Raw => {
                if let Some(v) = self.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::InvalidCube(format!(
                        "raw cube value {v} is negative or non-finite"
                    )));
                }
            }
            CubeKind::Calibrated => {
                if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::InvalidCube(format!(
                        "calibrated cube value {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn kind(&self) -> CubeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let l = self.bands();
        let start = (row * self.width + col) * l;
        &self.data[start..start + l]
    }

    /// Spectrum of pixel `index` in row-major order.
    pub fn pixel_at(&self, index: usize) -> &[f32] {
        let l = self.bands();
        &self.data[index * l..(index + 1) * l]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.width + col) * self.bands() + band]
    }

    pub fn same_shape(&self, other: &HyperCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands() == other.bands()
    }

    /// Index of the band nearest `nm`; ties go to the lower index.
    pub fn nearest_band(&self, nm: f64) -> Result<usize> {
        nearest_band_index(&self.wavelengths, nm)
    }

    pub fn band_slice(&self, nm: f64) -> Result<Array2<f32>> {
        let b = self.nearest_band(nm)?;
        Ok(self.band_image(b))
    }

    pub fn band_image(&self, band: usize) -> Array2<f32> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| self.get(y, x, band))
    }

    /// Three band slices stacked as RGB and clipped to `[0, 1]`.
    pub fn composite(&self, triplet: &BandTriplet) -> Result<Array3<f32>> {
        if self.kind != CubeKind::Calibrated {
            return Err(Error::InvalidArgument(
                "composites require a calibrated cube".into(),
            ));
        }
        let idx = [
            self.nearest_band(triplet.r_nm)?,
            self.nearest_band(triplet.g_nm)?,
            self.nearest_band(triplet.b_nm)?,
        ];
        Ok(Array3::from_shape_fn(
            (self.height, self.width, 3),
            |(y, x, c)| self.get(y, x, idx[c]).clamp(0.0, 1.0),
        ))
    }

    /// Per-band mean over the masked pixels.
    pub fn roi_mean_spectrum(&self, mask: &Mask) -> Result<Vec<f64>> {
        self.check_mask(mask)?;
        let n = mask.count();
        if n == 0 {
            return Err(Error::EmptyRegion("ROI mask selects no pixels".into()));
        }
        let mut sum = vec![0.0f64; self.bands()];
        for (i, _) in mask.values().iter().enumerate().filter(|(_, m)| **m) {
            for (s, v) in sum.iter_mut().zip(self.pixel_at(i)) {
                *s += *v as f64;
            }
        }
        Ok(sum.into_iter().map(|s| s / n as f64).collect())
    }

    pub fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs cube {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_wavelengths(wl: &[f64]) -> Result<()> {
    if wl.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidCube("non-finite wavelength".into()));
    }
    if let Some(i) = wl.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::InvalidCube(format!(
            "wavelengths not strictly increasing at index {}: {} -> {}",
            i + 1,
            wl[i],
            wl[i + 1]
        )));
    }
    Ok(())
}

pub fn nearest_band_index(wavelengths: &[f64], nm: f64) -> Result<usize> {
    let (lo, hi) = (wavelengths[0], wavelengths[wavelengths.len() - 1]);
    if !(nm >= lo && nm <= hi) {
        return Err(Error::WavelengthOutOfRange {
            nm,
            min: lo,
            max: hi,
        });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, w) in wavelengths.iter().enumerate() {
        let d = (w - nm).abs();
        // strict comparison keeps the lower index on ties
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Evenly spaced wavelength grid over `[start, end]` nm.
pub fn linear_wavelengths(start: f64, end: f64, bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![start];
    }
    (0..bands)
        .map(|i| {
            let f = i as f64 / (bands - 1) as f64;
            start * (1.0 - f) + end * f
        })
        .collect()
}

/// Wavelengths mapped to the red, green and blue composite channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandTriplet {
    pub r_nm: f64,
    pub g_nm: f64,
    pub b_nm: f64,
}

impl BandTriplet {
    pub const fn new(r_nm: f64, g_nm: f64, b_nm: f64) -> Self {
        BandTriplet { r_nm, g_nm, b_nm }
    }

    /// NIR / red-edge / green contrast used for apple bruising.
    pub const BRUISE_CONTRAST: BandTriplet = BandTriplet::new(801.0, 708.0, 551.0);
    /// Approximate true-color composite.
    pub const VISIBLE: BandTriplet = BandTriplet::new(650.0, 540.0, 470.0);

    pub fn validate(&self, wavelengths: &[f64]) -> Result<()> {
        for nm in [self.r_nm, self.g_nm, self.b_nm] {
            nearest_band_index(wavelengths, nm)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BandTriplet {
    type Err = Error;

    /// Parses `"801,708,551"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse("band triplet", e.to_string()))?;
        match parts.as_slice() {
            [r, g, b] => Ok(BandTriplet::new(*r, *g, *b)),
            _ => Err(Error::parse("band triplet", "expected three wavelengths")),
        }
    }
}

/// Boolean pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} values for {height}x{width}",
                values.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            values,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Mask {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [bool] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.values[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|v| *v)
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.values
            .iter()
            .zip(&other.values)
            .all(|(a, b)| !*a || *b)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        Error::ensure_parent(path)?;
        img.save(path)?;
        Ok(())
    }

    /// Reads a grayscale (or color) PNG; pixels brighter than mid-gray are set.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask::from_fn(h as usize, w as usize, |y, x| {
            img.get_pixel(x as u32, y as u32)[0] > 127
        }))
    }
}

/// Writes an `[H][W][3]` image with values in `[0, 1]` as 8-bit PNG.
pub fn write_rgb_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(image[[y as usize, x as usize, ch]]);
        image::Rgb([px(0), px(1), px(2)])
    });
    Error::ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

/// Writes a single-channel image, linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn write_gray_png(image: &Array2<f32>, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let (h, w) = image.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8((image[[y as usize, x as usize]] - lo) / span)])
    });
    Error::ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `wavelength_nm,reflectance` rows.
pub fn write_spectrum_csv(wavelengths: &[f64], spectrum: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("wavelength_nm,reflectance\n");
    for (w, r) in wavelengths.iter().zip(spectrum) {
        writeln!(out, "{w},{r}").unwrap();
    }
    Error::ensure_parent(path)?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// BIL I/O

const DATA_TYPE_F32: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
struct Header {
    samples: usize,
    lines: usize,
    bands: usize,
    wavelengths: Vec<f64>,
    kind: CubeKind,
}

fn parse_header(text: &str) -> Result<Header> {
    // Flatten `{ ... }` blocks that span lines so each entry is `key = value`.
    let mut entries: Vec<(String, String)> = Vec::new();
    let mut pending: Option<(String, String)> = None;
    for raw in text.lines() {
        let line = raw.trim();
        if let Some((key, mut value)) = pending.take() {
            value.push(' ');
            value.push_str(line);
            if line.contains('}') {
                entries.push((key, value));
            } else {
                pending = Some((key, value));
            }
            continue;
        }
        if line.is_empty() || line == "ENVI" || line.starts_with(';') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Header(format!("unrecognized line `{line}`")));
        };
        let key = k.trim().to_ascii_lowercase();
        let value = v.trim().to_string();
        if value.starts_with('{') && !value.contains('}') {
            pending = Some((key, value));
        } else {
            entries.push((key, value));
        }
    }
    if pending.is_some() {
        return Err(Error::Header("unterminated `{` block".into()));
    }

    let find = |key: &str| -> Option<&str> {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    };
    let require_usize = |key: &str| -> Result<usize> {
        let v = find(key).ok_or_else(|| Error::Header(format!("missing `{key}`")))?;
        v.parse::<usize>()
            .map_err(|_| Error::Header(format!("`{key}` is not a count: `{v}`")))
    };

    let samples = require_usize("samples")?;
    let lines = require_usize("lines")?;
    let bands = require_usize("bands")?;
    match find("interleave").map(|s| s.to_ascii_lowercase()) {
        Some(ref s) if s == "bil" => {}
        Some(other) => {
            return Err(Error::Header(format!(
                "unsupported interleave `{other}` (only bil)"
            )))
        }
        None => return Err(Error::Header("missing `interleave`".into())),
    }
    let dtype = require_usize("data type")?;
    if dtype as u32 != DATA_TYPE_F32 {
        return Err(Error::Header(format!(
            "unsupported data type {dtype} (only 4 = float32)"
        )));
    }
    if let Some(bo) = find("byte order") {
        if bo != "0" {
            return Err(Error::Header(format!(
                "unsupported byte order {bo} (only 0 = little endian)"
            )));
        }
    }
    let wl_text = find("wavelength").ok_or_else(|| Error::Header("missing `wavelength`".into()))?;
    let inner = wl_text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| Error::Header("`wavelength` must be a `{...}` list".into()))?;
    let wavelengths: Vec<f64> = inner
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Header(format!("bad wavelength `{s}`")))
        })
        .collect::<Result<_>>()?;
    if wavelengths.len() != bands {
        return Err(Error::Header(format!(
            "{} wavelengths listed for {bands} bands",
            wavelengths.len()
        )));
    }
    let kind = match find("calibrated") {
        Some("1") | Some("true") => CubeKind::Calibrated,
        Some("0") | Some("false") | None => CubeKind::Raw,
        Some(other) => return Err(Error::Header(format!("bad `calibrated` flag `{other}`"))),
    };
    Ok(Header {
        samples,
        lines,
        bands,
        wavelengths,
        kind,
    })
}

fn format_header(cube: &HyperCube) -> String {
    let mut h = String::from("ENVI\n");
    writeln!(h, "samples = {}", cube.width).unwrap();
    writeln!(h, "lines = {}", cube.height).unwrap();
    writeln!(h, "bands = {}", cube.bands()).unwrap();
    writeln!(h, "header offset = 0").unwrap();
    writeln!(h, "data type = {DATA_TYPE_F32}").unwrap();
    writeln!(h, "interleave = bil").unwrap();
    writeln!(h, "byte order = 0").unwrap();
    writeln!(h, "wavelength units = nm").unwrap();
    writeln!(
        h,
        "calibrated = {}",
        u8::from(cube.kind == CubeKind::Calibrated)
    )
    .unwrap();
    // `{:?}` prints the shortest representation that round-trips exactly.
    let wl: Vec<String> = cube.wavelengths.iter().map(|w| format!("{w:?}")).collect();
    writeln!(h, "wavelength = {{ {} }}", wl.join(", ")).unwrap();
    h
}

/// Reads a BIL cube from a header + raw data file pair.
pub fn read_bil(header_path: &Path, data_path: &Path) -> Result<HyperCube> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = parse_header(&text)?;
    check_wavelengths(&header.wavelengths)?;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let (h, w, l) = (header.lines, header.samples, header.bands);
    let expected = (h * w * l * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut data = vec![0f32; h * w * l];
    let mut chunks = bytes.chunks_exact(4);
    for y in 0..h {
        for b in 0..l {
            for x in 0..w {
                let c = chunks.next().expect("size checked above");
                data[(y * w + x) * l + b] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
    }
    HyperCube::new(h, w, header.wavelengths, data, header.kind)
}

/// Writes `cube` as little-endian float32 BIL plus a text header, creating
/// missing parent directories.
pub fn write_bil(cube: &HyperCube, header_path: &Path, data_path: &Path) -> Result<()> {
    Error::ensure_parent(header_path)?;
    Error::ensure_parent(data_path)?;
    let (h, w, l) = (cube.height, cube.width, cube.bands());
    let mut bytes = Vec::with_capacity(h * w * l * 4);
    for y in 0..h {
        for b in 0..l {
            for x in 0..w {
                bytes.extend_from_slice(&cube.get(y, x, b).to_le_bytes());
            }
        }
    }
    fs::write(header_path, format_header(cube)).map_err(|e| Error::io(header_path, e))?;
    let mut f = fs::File::create(data_path).map_err(|e| Error::io(data_path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(data_path, e))?;
    Ok(())
}

/// Header path for a data path: `view.bil` -> `view.hdr`.
pub fn header_path_for(data_path: &Path) -> std::path::PathBuf {
    data_path.with_extension("hdr")
}

/// Reads a cube given either its `.bil` or its `.hdr` path.
pub fn read_cube(path: &Path) -> Result<HyperCube> {
    let (hdr, bil) = cube_paths(path);
    read_bil(&hdr, &bil)
}

pub fn write_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    let (hdr, bil) = cube_paths(path);
    write_bil(cube, &hdr, &bil)
}

fn cube_paths(path: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    if path.extension().is_some_and(|e| e == "hdr") {
        (path.to_path_buf(), path.with_extension("bil"))
    } else {
        (header_path_for(path), path.to_path_buf())
    }
}
