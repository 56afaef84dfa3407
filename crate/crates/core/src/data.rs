//! Samples, manifests and image files.
//!
//! A manifest is a CSV with header
//! `file,x1,y1,...,x6,y6,label,alpha_deg,beta_deg,spacing_mm_px` and an
//! optional trailing `group` column. `file` is relative to the manifest's
//! directory and names either a TGT1 tensor (`.tgt`) or a binary PGM.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, NUM_LANDMARKS};
use crate::tensor::{read_tgt1, write_tgt1, Tensor};

/// One image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub name: String,
    /// `1 x n x n`, intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    pub spacing: f64,
    /// 1 = abnormal.
    pub label: u8,
    pub group: Option<String>,
}

impl ImageSample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub file: String,
    pub landmarks: LandmarkSet,
    pub label: u8,
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub spacing: f64,
    pub group: Option<String>,
}

fn header(with_group: bool) -> String {
    let mut h = String::from("file");
    for i in 1..=NUM_LANDMARKS {
        let _ = write!(h, ",x{i},y{i}");
    }
    h.push_str(",label,alpha_deg,beta_deg,spacing_mm_px");
    if with_group {
        h.push_str(",group");
    }
    h
}

/// Serializes rows; floats use the shortest exact representation.
pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let with_group = rows.iter().any(|r| r.group.is_some());
    let mut out = header(with_group);
    out.push('\n');
    for r in rows {
        out.push_str(&r.file);
        for c in r.landmarks.to_flat() {
            let _ = write!(out, ",{c}");
        }
        let _ = write!(out, ",{},{},{},{}", r.label, r.alpha_deg, r.beta_deg, r.spacing);
        if with_group {
            let _ = write!(out, ",{}", r.group.as_deref().unwrap_or(""));
        }
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    fs::write(path, format_manifest(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{origin}: empty manifest")))?;
    let with_group = if head.trim() == header(false) {
        false
    } else if head.trim() == header(true) {
        true
    } else {
        return Err(Error::Data(format!("{origin}: unexpected manifest header {head:?}")));
    };
    let width = 2 * NUM_LANDMARKS + 5 + usize::from(with_group);
    let mut rows = Vec::new();
    for (n, line) in lines {
        let bad = |what: &str| Error::Data(format!("{origin}:{}: {what}", n + 1));
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != width {
            return Err(bad(&format!("expected {width} columns, got {}", cells.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = cells[i].parse().map_err(|_| bad(&format!("bad number {:?}", cells[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(&format!("non-finite value {:?}", cells[i])))
            }
        };
        let coords = (1..=2 * NUM_LANDMARKS).map(num).collect::<Result<Vec<f64>>>()?;
        let k = 2 * NUM_LANDMARKS + 1;
        let label = match cells[k] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(&format!("label must be 0 or 1, got {other:?}"))),
        };
        let spacing = num(k + 3)?;
        if spacing <= 0.0 {
            return Err(bad("spacing must be positive"));
        }
        rows.push(ManifestRow {
            file: cells[0].to_string(),
            landmarks: LandmarkSet::from_flat(&coords)?,
            label,
            alpha_deg: num(k + 1)?,
            beta_deg: num(k + 2)?,
            spacing,
            group: with_group.then(|| cells[k + 4].to_string()).filter(|g| !g.is_empty()),
        });
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Writes an 8-bit binary PGM, mapping `[0, 1]` to `0..=255`.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = plane_dims(image)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes raw 8-bit gray levels as a PGM.
pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn plane_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match *image.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(Error::dim(format!("expected a single-channel image, got {s:?}"))),
    }
}

/// Reads an 8-bit binary PGM into a `1 x h x w` tensor in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {:?})", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(format!("unsupported PGM {w}x{h} max {max}"));
    }
    let pixels = bytes.get(pos..pos + w * h).ok_or("truncated PGM payload")?;
    Tensor::new(vec![1, h, w], pixels.iter().map(|&b| f32::from(b) / 255.0).collect()).map_err(|e| e.to_string())
}

/// Writes a `1 x h x w` image as a single-tensor TGT1 file.
pub fn write_image_tgt(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_tgt1(&mut out, &[("image", image)])?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_image_tgt(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut tensors = read_tgt1::<f32, _>(&mut bytes.as_slice())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match tensors.len() {
        1 => Ok(tensors.remove(0).1),
        n => Err(Error::Format(format!("{}: expected one tensor, found {n}", path.display()))),
    }
}

/// Loads an image by extension (`.tgt` or PGM).
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let image = if path.extension().is_some_and(|e| e == "tgt") {
        read_image_tgt(path)?
    } else {
        read_pgm(path)?
    };
    let (h, w) = plane_dims(&image)?;
    if h != w {
        return Err(Error::Data(format!("{}: image is {h}x{w}, expected square", path.display())));
    }
    image.reshape(&[1, h, w])
}

/// An in-memory set of samples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every row of a manifest and its image.
    pub fn load(manifest: &Path) -> Result<Self> {
        let rows = read_manifest(manifest)?;
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut samples = Vec::with_capacity(rows.len());
        for row in rows {
            let image = read_image(&dir.join(&row.file))?;
            let n = image.shape()[2];
            if !row.landmarks.within(n, n, 0.0) {
                return Err(Error::Data(format!("{}: landmark outside the {n}x{n} image", row.file)));
            }
            samples.push(ImageSample {
                name: row.file,
                image,
                landmarks: row.landmarks,
                spacing: row.spacing,
                label: row.label,
                group: row.group,
            });
        }
        Ok(Self { samples })
    }

    /// Subset by index.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}
