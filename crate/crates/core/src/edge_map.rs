//! Single-channel edge images with values in `[0, 1]`, stored row-major.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdgeMapError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("edge map values must lie in [0, 1] (found {0})")]
    OutOfRange(f64),
    #[error("expected {expected} values, got {got}")]
    Size { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl EdgeMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, EdgeMapError> {
        if values.len() != width * height {
            return Err(EdgeMapError::Size {
                expected: width * height,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EdgeMapError::OutOfRange(*v));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// 8-bit quantization, `round(255 v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, EdgeMapError> {
        if bytes.len() != width * height {
            return Err(EdgeMapError::Size {
                expected: width * height,
                got: bytes.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Values re-quantized through 8 bits, as they come back after a save.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.width, self.height, &self.to_u8()).expect("same size")
    }

    pub fn save_png(&self, path: &Path) -> Result<(), EdgeMapError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| EdgeMapError::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), EdgeMapError> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.to_u8());
        fs::write(path, bytes).map_err(|source| EdgeMapError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load an 8-bit grayscale PNG or a binary PGM (P5), sniffed by content.
    pub fn load(path: &Path) -> Result<Self, EdgeMapError> {
        let bytes = fs::read(path).map_err(|source| EdgeMapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.starts_with(b"P5") {
            return parse_pgm(&bytes).map_err(|reason| EdgeMapError::Format {
                path: path.display().to_string(),
                reason,
            });
        }
        let img = image::load_from_memory(&bytes).map_err(|e| EdgeMapError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::from_u8(w as usize, h as usize, gray.as_raw())
    }
}

fn parse_pgm(bytes: &[u8]) -> Result<EdgeMap, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad PGM header field at byte {start}"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| "truncated PGM raster".to_string())?;
    Ok(EdgeMap {
        width: w,
        height: h,
        values: data.iter().map(|&b| b as f64 / maxval as f64).collect(),
    })
}
