//! Datasets: IDX image files with CSV regression targets, and the synthetic
//! rectangle task.
//!
//! IDX images use magic `0x00000803` (unsigned bytes, rank 3) followed by
//! big-endian `u32` count, rows and columns, then one byte per pixel. Pixels
//! load as `byte / 255` into `{rows, cols, 1}` tensors. Targets are CSV with
//! a header row naming one column per target dimension; IDX label files
//! (magic `0x00000801`) are accepted as one-dimensional targets.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    targets: Vec<Tensor>,
    pub name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(Error::Format(format!(
                "{} images but {} targets",
                images.len(),
                targets.len()
            )));
        }
        let (Some(img0), Some(tgt0)) = (images.first(), targets.first()) else {
            return Err(Error::Format("dataset has no examples".into()));
        };
        if let Some(i) = images.iter().position(|x| x.shape() != img0.shape()) {
            return Err(Error::Shape(format!(
                "image {i} has shape {} but image 0 has {}",
                images[i].shape(),
                img0.shape()
            )));
        }
        if let Some(i) = targets.iter().position(|y| y.shape() != tgt0.shape()) {
            return Err(Error::Shape(format!(
                "target {i} has shape {} but target 0 has {}",
                targets[i].shape(),
                tgt0.shape()
            )));
        }
        Ok(Dataset {
            images,
            targets,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn targets(&self) -> &[Tensor] {
        &self.targets
    }

    pub fn image_shape(&self) -> &Shape {
        self.images[0].shape()
    }

    pub fn target_shape(&self) -> &Shape {
        self.targets[0].shape()
    }

    /// New dataset holding the given examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Config(format!(
                "index {bad} out of range for {} examples",
                self.len()
            )));
        }
        Dataset::new(
            self.name.clone(),
            indices.iter().map(|&i| self.images[i].clone()).collect(),
            indices.iter().map(|&i| self.targets[i].clone()).collect(),
        )
    }
}

/// Axis-aligned rectangle on a square canvas, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// `side×side×1` canvas with ones inside the rectangle and zeros elsewhere.
pub fn render_rect(side: usize, rect: Rect) -> Result<Tensor> {
    if rect.height == 0
        || rect.width == 0
        || rect.top + rect.height > side
        || rect.left + rect.width > side
    {
        return Err(Error::Config(format!(
            "rectangle {rect:?} does not fit a {side}×{side} canvas"
        )));
    }
    let mut data = vec![0.0; side * side];
    for r in rect.top..rect.top + rect.height {
        data[r * side + rect.left..r * side + rect.left + rect.width].fill(1.0);
    }
    Tensor::from_vec(&[side, side, 1], data)
}

/// Target of a rectangle: `(height / side, width / side)`.
pub fn rect_target(side: usize, rect: Rect) -> Tensor {
    Tensor::from_vec(
        &[2],
        vec![
            rect.height as f64 / side as f64,
            rect.width as f64 / side as f64,
        ],
    )
    .expect("two finite values")
}

/// `m` random filled rectangles on `side×side` canvases, each labelled with
/// its height and width as fractions of the side.
pub fn synth_shapes(m: usize, side: usize, rng: &mut SeededRng) -> Result<Dataset> {
    if side < 8 {
        return Err(Error::Config(format!(
            "synthetic canvas side must be at least 8, got {side}"
        )));
    }
    if m == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one example".into(),
        ));
    }
    let mut images = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m);
    for _ in 0..m {
        let height = 1 + rng.below(side);
        let width = 1 + rng.below(side);
        let top = rng.below(side - height + 1);
        let left = rng.below(side - width + 1);
        let rect = Rect {
            top,
            left,
            height,
            width,
        };
        images.push(render_rect(side, rect)?);
        targets.push(rect_target(side, rect));
    }
    Dataset::new(format!("synthetic-rectangles-{side}"), images, targets)
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated {what} at byte offset {offset}")))
}

/// Parse an IDX rank-3 unsigned-byte image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x} at byte offset 0 (expected {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!(
            "zero image extent {rows}×{cols} at byte offset 8"
        )));
    }
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(Error::Format(format!(
            "truncated IDX image data: expected {} bytes after the header, file ends at byte offset {}",
            count * pixels,
            bytes.len()
        )));
    }
    if body.len() > count * pixels {
        return Err(Error::Format(format!(
            "trailing bytes after IDX image data at byte offset {}",
            16 + count * pixels
        )));
    }
    body.chunks_exact(pixels)
        .map(|img| {
            Tensor::from_vec(
                &[rows, cols, 1],
                img.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect()
}

pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    parse_idx_images(&fs::read(path)?).map_err(|e| e.context(path.display()))
}

/// Encode `{rows, cols, 1}` images with values in `[0, 1]` as IDX bytes
/// (`round(v·255)`).
pub fn encode_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("no images to write".into()))?;
    let [rows, cols, 1] = *first.dims() else {
        return Err(Error::Shape(format!(
            "IDX images must be {{rows,cols,1}}, got {}",
            first.shape()
        )));
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [
        IDX_IMAGES_MAGIC,
        images.len() as u32,
        rows as u32,
        cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Shape(format!("image {i} has shape {}", img.shape())));
        }
        out.extend(
            img.data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_idx_images(path: &Path, images: &[Tensor]) -> Result<()> {
    fs::write(path, encode_idx_images(images)?)?;
    Ok(())
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let count = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX label file declares {count} labels but holds {} bytes after offset 8",
            body.len()
        )));
    }
    body.iter().map(|&b| Tensor::vector(&[b as f64])).collect()
}

/// Parse CSV targets: a header row, then one row of floats per example.
pub fn parse_targets_csv(text: &str) -> Result<Vec<Tensor>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let width = header.split(',').count();
    lines
        .map(|(n, line)| {
            let values = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::Format(format!("line {}: {:?} is not a number", n + 1, f.trim()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != width {
                return Err(Error::Format(format!(
                    "line {}: {} fields but the header has {width}",
                    n + 1,
                    values.len()
                )));
            }
            Tensor::vector(&values).map_err(|e| e.context(format_args!("line {}", n + 1)))
        })
        .collect()
}

/// Header `t0,t1,...` and one row per target, using Rust's shortest
/// round-tripping float formatting.
pub fn encode_targets_csv(targets: &[Tensor]) -> String {
    let width = targets.first().map_or(0, |t| t.numel());
    let mut out = (0..width)
        .map(|j| format!("t{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for t in targets {
        let row: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_targets(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    let parsed = if bytes.len() >= 4 && be_u32(&bytes, 0, "magic")? == IDX_LABELS_MAGIC {
        parse_idx_labels(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| {
            Error::Format(format!(
                "targets are not UTF-8 (byte offset {})",
                e.utf8_error().valid_up_to()
            ))
        })?;
        parse_targets_csv(&text)
    };
    parsed.map_err(|e| e.context(path.display()))
}

/// Images from an IDX file paired with targets from CSV (or IDX labels).
pub fn load_idx(images: &Path, targets: &Path) -> Result<Dataset> {
    let imgs = read_idx_images(images)?;
    let tgts = read_targets(targets)?;
    if imgs.len() != tgts.len() {
        return Err(Error::Format(format!(
            "{} holds {} images but {} holds {} targets",
            images.display(),
            imgs.len(),
            targets.display(),
            tgts.len()
        )));
    }
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, imgs, tgts)
}

/// Write a dataset as `<stem>-images.idx` and `<stem>-targets.csv` in `dir`.
pub fn save_dataset(
    data: &Dataset,
    dir: &Path,
    stem: &str,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    fs::create_dir_all(dir)?;
    let images = dir.join(format!("{stem}-images.idx"));
    let targets = dir.join(format!("{stem}-targets.csv"));
    write_idx_images(&images, data.images())?;
    fs::File::create(&targets)?.write_all(encode_targets_csv(data.targets()).as_bytes())?;
    Ok((images, targets))
}
