//! On-disk dataset layout: `images/*.ppm` (binary P6), `annotations.jsonl`
//! and `manifest.json` per split directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DataSpec, Scene};
use crate::boxes::{BBox, GroundTruth};
use crate::tensor::Tensor;

/// Split directory names, in generation order.
pub const SPLITS: [&str; 4] = ["source_train", "source_test", "target_train", "target_test"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    file: String,
    boxes: Vec<[f32; 4]>,
    labels: Vec<usize>,
}

/// Per-split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub count: usize,
    pub image_size: Option<usize>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
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
            return Err(format_err(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "P6" {
        return Err(format_err(path, format!("expected P6 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad PPM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format_err(path, format!("unsupported maxval {max}")));
    }
    let plane = w * h;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != 3 * plane {
        return Err(format_err(path, format!("raster has {} bytes, expected {}", raster.len(), 3 * plane)));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raster[3 * i + c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).map_err(|e| format_err(path, e.to_string()))
}

/// Writes scenes into `dir` (created if needed). `extra` is stored in the
/// manifest verbatim.
pub fn write_dataset(scenes: &[Scene], dir: &Path, extra: serde_json::Value) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let ann_path = dir.join("annotations.jsonl");
    let mut ann = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
    for s in scenes {
        if s.id.is_empty() || s.id.contains(['/', '\\']) {
            return Err(format_err(dir, format!("scene id {:?} is not a valid file stem", s.id)));
        }
        let file = format!("images/{}.ppm", s.id);
        let path = dir.join(&file);
        fs::write(&path, encode_ppm(&s.image)).map_err(io_err(&path))?;
        let line = AnnotationLine {
            file,
            boxes: s.annotations.iter().map(|g| [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2]).collect(),
            labels: s.annotations.iter().map(|g| g.class_id).collect(),
        };
        let json = serde_json::to_string(&line).expect("annotation serializes");
        writeln!(ann, "{json}").map_err(io_err(&ann_path))?;
    }
    let manifest = SplitManifest {
        count: scenes.len(),
        image_size: scenes.first().map(|s| s.size().0),
        extra,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>, DataError> {
    let mpath = dir.join("manifest.json");
    let manifest: SplitManifest =
        serde_json::from_str(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?).map_err(|e| format_err(&mpath, e.to_string()))?;
    let ann_path = dir.join("annotations.jsonl");
    let reader = BufReader::new(fs::File::open(&ann_path).map_err(io_err(&ann_path))?);
    let mut scenes = Vec::with_capacity(manifest.count);
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: AnnotationLine = serde_json::from_str(&line).map_err(|e| format_err(&ann_path, format!("line {}: {e}", n + 1)))?;
        if entry.boxes.len() != entry.labels.len() {
            return Err(format_err(&ann_path, format!("line {}: {} boxes but {} labels", n + 1, entry.boxes.len(), entry.labels.len())));
        }
        let path = dir.join(&entry.file);
        let image = decode_ppm(&fs::read(&path).map_err(io_err(&path))?, &path)?;
        let mut annotations = Vec::with_capacity(entry.boxes.len());
        for (b, &class_id) in entry.boxes.iter().zip(&entry.labels) {
            let bbox = BBox::new(b[0], b[1], b[2], b[3]);
            if !bbox.is_valid() || class_id >= super::NUM_CLASSES {
                return Err(format_err(&ann_path, format!("line {}: invalid annotation {b:?} / class {class_id}", n + 1)));
            }
            annotations.push(GroundTruth { bbox, class_id });
        }
        let id = Path::new(&entry.file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        scenes.push(Scene { id, image, annotations });
    }
    if scenes.len() != manifest.count {
        return Err(format_err(&mpath, format!("manifest count {} but {} annotation lines", manifest.count, scenes.len())));
    }
    Ok(scenes)
}

/// Top-level manifest of a generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub spec: DataSpec,
    pub counts: std::collections::BTreeMap<String, usize>,
}

/// Generates and writes every split of `spec` under `dir`.
pub fn write_splits(spec: &DataSpec, seed: u64, dir: &Path) -> Result<BenchmarkManifest, DataError> {
    spec.validate().map_err(|e| format_err(dir, e.to_string()))?;
    let mut counts = std::collections::BTreeMap::new();
    for (i, name) in SPLITS.iter().enumerate() {
        let scenes = spec.generate_split(i, seed);
        write_dataset(&scenes, &dir.join(name), serde_json::json!({ "split": name, "seed": seed }))?;
        counts.insert(name.to_string(), scenes.len());
    }
    let manifest = BenchmarkManifest {
        seed,
        spec: spec.clone(),
        counts,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads split `name` of a benchmark written by [`write_splits`].
pub fn read_split(dir: &Path, name: &str) -> Result<Vec<Scene>, DataError> {
    if !SPLITS.contains(&name) {
        return Err(format_err(dir, format!("unknown split {name:?} (expected one of {})", SPLITS.join(", "))));
    }
    read_dataset(&dir.join(name))
}
