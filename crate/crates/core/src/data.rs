//! Datasets: container type, file loaders, and deterministic generators.
//!
//! Loader invariants: pixels are scaled to `[0, 1]` (`u8 / 255`), image
//! tensors are `[height, width, channels]`, and every loader is byte-exact
//! deterministic. The synthetic generators are seeded and reproducible, so
//! experiment configs can name a corpus without shipping data files.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One labeled example; `pixels` keeps the per-example feature shape.
#[derive(Clone, Debug)]
pub struct Example {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// An in-memory labeled dataset with a uniform feature shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    num_classes: usize,
    feature_shape: Vec<usize>,
    examples: Vec<Example>,
}

impl Dataset {
    /// Validates shape uniformity, label range, and finiteness.
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let name = name.into();
        if num_classes < 2 {
            return Err(Error::config(
                format!("dataset {name}"),
                "num_classes must be at least 2",
            ));
        }
        let feature_shape = examples
            .first()
            .map(|e| e.pixels.shape().to_vec())
            .unwrap_or_default();
        for (i, e) in examples.iter().enumerate() {
            if e.pixels.shape() != feature_shape {
                return Err(Error::shape(
                    format!("dataset {name}"),
                    format!(
                        "example {i} has shape {:?}, expected {:?}",
                        e.pixels.shape(),
                        feature_shape
                    ),
                ));
            }
            if e.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: e.label,
                    num_classes,
                });
            }
            e.pixels
                .ensure_finite(&format!("dataset {name}, example {i}"))?;
        }
        Ok(Dataset {
            name,
            num_classes,
            feature_shape,
            examples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Assembles the chosen examples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let row_len: usize = self.feature_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * row_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.examples[i].pixels.data());
            labels.push(self.examples[i].label);
        }
        let mut shape = Vec::with_capacity(self.feature_shape.len() + 1);
        shape.push(indices.len());
        shape.extend_from_slice(&self.feature_shape);
        (
            Tensor::new(shape, data).expect("batch shape consistent by construction"),
            labels,
        )
    }

    /// Concatenates datasets with identical shape and class count.
    pub fn merged(name: impl Into<String>, parts: &[&Dataset]) -> Result<Dataset> {
        let name = name.into();
        let first = parts.first().ok_or_else(|| Error::EmptyDataset {
            context: format!("Dataset::merged {name}"),
        })?;
        let mut examples =
            Vec::with_capacity(parts.iter().map(|p| p.examples.len()).sum::<usize>());
        for p in parts {
            if p.feature_shape != first.feature_shape || p.num_classes != first.num_classes {
                return Err(Error::shape(
                    format!("Dataset::merged {name}"),
                    format!(
                        "part {} (shape {:?}, {} classes) incompatible with {} (shape {:?}, {} classes)",
                        p.name,
                        p.feature_shape,
                        p.num_classes,
                        first.name,
                        first.feature_shape,
                        first.num_classes
                    ),
                ));
            }
            examples.extend_from_slice(&p.examples);
        }
        Dataset::new(name, first.num_classes, examples)
    }
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {offset}")))?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
}

/// Loads an image/label file pair in IDX format (gzipped or plain).
///
/// Pixels are scaled to `[0, 1]`; image shape is `[rows, cols, 1]`. The
/// class count is inferred as `max(label) + 1` (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = read_maybe_gzip(images_path)?;
    let lbl = read_maybe_gzip(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let pixel_count = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(images_path, "image dimensions overflow"))?;
    let pixels = img.get(16..16 + pixel_count).ok_or_else(|| {
        Error::format(
            images_path,
            format!(
                "truncated image payload: need {} bytes, have {}",
                pixel_count,
                img.len().saturating_sub(16)
            ),
        )
    })?;

    let magic = be_u32(&lbl, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&lbl, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::format(
            labels_path,
            format!("label count {n_labels} does not match image count {n}"),
        ));
    }
    let labels = lbl.get(8..8 + n).ok_or_else(|| {
        Error::format(
            labels_path,
            format!(
                "truncated label payload: need {n} bytes, have {}",
                lbl.len().saturating_sub(8)
            ),
        )
    })?;

    let per_image = rows * cols;
    let num_classes = labels
        .iter()
        .copied()
        .max()
        .map_or(2, |m| (m as usize + 1).max(2));
    let examples = (0..n)
        .map(|i| {
            let data: Vec<f32> = pixels[i * per_image..(i + 1) * per_image]
                .iter()
                .map(|b| f32::from(*b) / 255.0)
                .collect();
            Example {
                pixels: Tensor::new(vec![rows, cols, 1], data).expect("shape matches data"),
                label: labels[i] as usize,
            }
        })
        .collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(name, num_classes, examples)
}

/// Writes a dataset of single-channel images as an IDX image/label file pair.
///
/// Pixels are quantized to `u8` (round of `v * 255`); loading the result back
/// reproduces that quantized data exactly.
pub fn write_idx(
    set: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    gzip: bool,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let [rows, cols, 1] = set.feature_shape() else {
        return Err(Error::shape(
            "write_idx",
            format!(
                "expected single-channel [rows, cols, 1] images, got {:?}",
                set.feature_shape()
            ),
        ));
    };
    let mut img = Vec::with_capacity(16 + set.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(*rows as u32).to_be_bytes());
    img.extend_from_slice(&(*cols as u32).to_be_bytes());
    let mut lbl = Vec::with_capacity(8 + set.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for e in set.examples() {
        for v in e.pixels.data() {
            img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        lbl.push(e.label as u8);
    }
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        if gzip {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            std::io::Write::write_all(&mut enc, bytes).map_err(|e| Error::io(path, e))?;
            let compressed = enc.finish().map_err(|e| Error::io(path, e))?;
            std::fs::write(path, compressed).map_err(|e| Error::io(path, e))
        } else {
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
    };
    write(images_path, &img)?;
    write(labels_path, &lbl)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

/// Loads CIFAR-10 binary batch files (3073-byte records: label byte plus
/// three channel planes). Output images are `[32, 32, 3]` channel-interleaved
/// with pixels in `[0, 1]`.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut examples = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let bytes = read_maybe_gzip(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!(
                    "file length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::format(
                    path,
                    format!("record {r} has label byte {label}, expected 0..=9"),
                ));
            }
            let mut data = vec![0.0f32; CIFAR_PLANE * 3];
            for c in 0..3 {
                let plane = &rec[1 + c * CIFAR_PLANE..1 + (c + 1) * CIFAR_PLANE];
                for (i, v) in plane.iter().enumerate() {
                    data[i * 3 + c] = f32::from(*v) / 255.0;
                }
            }
            examples.push(Example {
                pixels: Tensor::new(vec![CIFAR_SIDE, CIFAR_SIDE, 3], data)
                    .expect("shape matches data"),
                label,
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset {
            context: "load_cifar_binary".to_string(),
        });
    }
    Dataset::new("cifar", 10, examples)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Configuration for the Gaussian-blob generator.
#[derive(Clone, Debug)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Feature dimension; examples have shape `[dim]`.
    pub dim: usize,
    /// Per-coordinate standard deviation around the class center.
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            num_classes: 3,
            per_class: 60,
            dim: 4,
            spread: 0.06,
            seed: 0,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic Gaussian blobs in `[0, 1]^dim`, one cluster per class.
///
/// Class centers are resampled until pairwise separated by at least four
/// standard deviations (when the box allows), so small networks can fit the
/// data reliably in tests.
pub fn synth_blobs(cfg: &BlobsConfig) -> Dataset {
    let mut rng = rng::seeded(cfg.seed, "blob-centers");
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let mut attempts = 0;
        loop {
            let cand: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(0.2..0.8)).collect();
            let far_enough = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= 4.0 * cfg.spread
            });
            attempts += 1;
            if far_enough || attempts > 1000 {
                centers.push(cand);
                break;
            }
        }
    }
    let mut rng = rng::seeded(cfg.seed, "blob-points");
    let mut examples = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let data: Vec<f32> = center
                .iter()
                .map(|c| (c + gauss(&mut rng) * cfg.spread).clamp(0.0, 1.0) as f32)
                .collect();
            examples.push(Example {
                pixels: Tensor::new(vec![cfg.dim], data).expect("dim matches"),
                label,
            });
        }
    }
    let mut order_rng = rng::seeded(cfg.seed, "blob-order");
    examples.shuffle(&mut order_rng);
    Dataset::new("blobs", cfg.num_classes, examples).expect("generator respects invariants")
}

// --- procedural digits ---

const DIGIT_SIDE: usize = 28;

enum Stroke {
    Line(Vec<(f64, f64)>),
    Arc {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        a0: f64,
        a1: f64,
    },
}

/// Stroke skeleton of a digit in a unit box (x right, y down).
fn glyph(digit: usize, rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    use std::f64::consts::{PI, TAU};
    match digit {
        0 => vec![Stroke::Arc {
            cx: 0.5,
            cy: 0.5,
            rx: 0.30,
            ry: 0.40,
            a0: 0.0,
            a1: TAU,
        }],
        1 => vec![
            Stroke::Line(vec![(0.36, 0.26), (0.54, 0.10)]),
            Stroke::Line(vec![(0.54, 0.10), (0.54, 0.90)]),
        ],
        2 => vec![
            Stroke::Arc {
                cx: 0.48,
                cy: 0.34,
                rx: 0.28,
                ry: 0.24,
                a0: PI,
                a1: TAU + 0.35,
            },
            Stroke::Line(vec![(0.74, 0.42), (0.20, 0.88)]),
            Stroke::Line(vec![(0.20, 0.88), (0.80, 0.88)]),
        ],
        3 => vec![
            Stroke::Arc {
                cx: 0.46,
                cy: 0.30,
                rx: 0.26,
                ry: 0.21,
                a0: PI + 0.6,
                a1: 2.5 * PI,
            },
            Stroke::Arc {
                cx: 0.46,
                cy: 0.69,
                rx: 0.28,
                ry: 0.23,
                a0: 1.5 * PI,
                a1: 3.0 * PI - 0.6,
            },
        ],
        4 => vec![
            Stroke::Line(vec![(0.64, 0.10), (0.20, 0.62)]),
            Stroke::Line(vec![(0.20, 0.62), (0.84, 0.62)]),
            Stroke::Line(vec![(0.64, 0.10), (0.64, 0.92)]),
        ],
        5 => vec![
            Stroke::Line(vec![(0.76, 0.10), (0.26, 0.10)]),
            Stroke::Line(vec![(0.26, 0.10), (0.25, 0.50)]),
            Stroke::Arc {
                cx: 0.46,
                cy: 0.66,
                rx: 0.26,
                ry: 0.24,
                a0: PI + 0.69,
                a1: 2.5 * PI + 0.5,
            },
        ],
        6 => vec![
            Stroke::Line(vec![(0.66, 0.10), (0.47, 0.40)]),
            Stroke::Arc {
                cx: 0.47,
                cy: 0.64,
                rx: 0.25,
                ry: 0.25,
                a0: 1.5 * PI,
                a1: 3.5 * PI,
            },
        ],
        7 => {
            let mut strokes = vec![
                Stroke::Line(vec![(0.20, 0.12), (0.80, 0.12)]),
                Stroke::Line(vec![(0.80, 0.12), (0.42, 0.90)]),
            ];
            // Crossbar on roughly half the samples, for intra-class variety.
            if rng.gen::<f64>() < 0.5 {
                strokes.push(Stroke::Line(vec![(0.36, 0.50), (0.66, 0.50)]));
            }
            strokes
        }
        8 => vec![
            Stroke::Arc {
                cx: 0.50,
                cy: 0.30,
                rx: 0.20,
                ry: 0.185,
                a0: 0.0,
                a1: TAU,
            },
            Stroke::Arc {
                cx: 0.50,
                cy: 0.71,
                rx: 0.235,
                ry: 0.205,
                a0: 0.0,
                a1: TAU,
            },
        ],
        9 => vec![
            Stroke::Arc {
                cx: 0.52,
                cy: 0.33,
                rx: 0.22,
                ry: 0.20,
                a0: 0.0,
                a1: TAU,
            },
            Stroke::Line(vec![(0.735, 0.36), (0.70, 0.62)]),
            Stroke::Line(vec![(0.70, 0.62), (0.56, 0.90)]),
        ],
        _ => unreachable!("digits are 0..=9"),
    }
}

struct DigitJitter {
    rot: f64,
    sx: f64,
    sy: f64,
    shear: f64,
    tx: f64,
    ty: f64,
    radius: f64,
    ink: f64,
    wobble: [(f64, f64, f64); 2],
}

fn stamp(canvas: &mut [f32], px: f64, py: f64, radius: f64, ink: f64) {
    let lo_x = (px - radius - 1.0).floor().max(0.0) as usize;
    let hi_x = ((px + radius + 1.0).ceil() as usize).min(DIGIT_SIDE - 1);
    let lo_y = (py - radius - 1.0).floor().max(0.0) as usize;
    let hi_y = ((py + radius + 1.0).ceil() as usize).min(DIGIT_SIDE - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
            let v = ((radius + 0.5 - d).clamp(0.0, 1.0) * ink) as f32;
            let cell = &mut canvas[y * DIGIT_SIDE + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

fn render_digit(digit: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let jit = DigitJitter {
        rot: rng.gen_range(-0.21..0.21),
        sx: rng.gen_range(0.82..1.08),
        sy: rng.gen_range(0.82..1.08),
        shear: rng.gen_range(-0.15..0.15),
        tx: rng.gen_range(-1.8..1.8),
        ty: rng.gen_range(-1.8..1.8),
        radius: rng.gen_range(0.85..1.55),
        ink: rng.gen_range(0.85..1.0),
        wobble: [
            (
                rng.gen_range(0.0..0.014),
                rng.gen_range(2.0..7.0),
                rng.gen_range(0.0..TAU2),
            ),
            (
                rng.gen_range(0.0..0.010),
                rng.gen_range(5.0..13.0),
                rng.gen_range(0.0..TAU2),
            ),
        ],
    };
    let strokes = glyph(digit, rng);
    let mut canvas = vec![0.0f32; DIGIT_SIDE * DIGIT_SIDE];
    let (sin_r, cos_r) = jit.rot.sin_cos();
    let scale = 20.0;
    let mut draw = |u: f64, v: f64, t: f64| {
        // Low-frequency wobble perpendicular-ish to nothing in particular;
        // it just bends strokes slightly so samples differ in shape.
        let w: f64 = jit
            .wobble
            .iter()
            .map(|(a, f, p)| a * (f * t + p).sin())
            .sum();
        let (mut x, mut y) = (u - 0.5 + w, v - 0.5 - w);
        x += jit.shear * y;
        x *= jit.sx * scale;
        y *= jit.sy * scale;
        let xr = x * cos_r - y * sin_r;
        let yr = x * sin_r + y * cos_r;
        stamp(
            &mut canvas,
            14.0 + xr + jit.tx,
            14.0 + yr + jit.ty,
            jit.radius,
            jit.ink,
        );
    };
    for stroke in &strokes {
        match stroke {
            Stroke::Line(points) => {
                let total: f64 = points
                    .windows(2)
                    .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
                    .sum();
                let mut walked = 0.0;
                for w in points.windows(2) {
                    let seg = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
                    let steps = (seg / 0.01).ceil().max(1.0) as usize;
                    for s in 0..=steps {
                        let f = s as f64 / steps as f64;
                        let t = (walked + f * seg) / total.max(1e-9);
                        draw(
                            w[0].0 + f * (w[1].0 - w[0].0),
                            w[0].1 + f * (w[1].1 - w[0].1),
                            t,
                        );
                    }
                    walked += seg;
                }
            }
            Stroke::Arc {
                cx,
                cy,
                rx,
                ry,
                a0,
                a1,
            } => {
                let steps = (((a1 - a0).abs() / 0.03).ceil() as usize).max(8);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let a = a0 + t * (a1 - a0);
                    draw(cx + rx * a.cos(), cy + ry * a.sin(), t);
                }
            }
        }
    }
    for v in canvas.iter_mut() {
        *v = (*v + rng.gen_range(0.0..0.04)).clamp(0.0, 1.0);
    }
    canvas
}

const TAU2: f64 = std::f64::consts::TAU;

/// Deterministic procedural digit corpus: 28x28 grayscale glyphs (classes
/// 0 through 9) with seeded affine jitter, stroke-width variation, stroke
/// wobble, and light pixel noise.
///
/// Serves as a stand-in where the real handwritten-digit files are absent;
/// hard enough that attacks behave like they do on the real data, easy
/// enough that a small conv net clears 96% test accuracy.
pub fn synth_digits(per_class: usize, seed: u64) -> Dataset {
    let mut examples = Vec::with_capacity(per_class * 10);
    for digit in 0..10 {
        let mut rng = rng::seeded(seed, &format!("digit-{digit}"));
        for _ in 0..per_class {
            examples.push(Example {
                pixels: Tensor::new(
                    vec![DIGIT_SIDE, DIGIT_SIDE, 1],
                    render_digit(digit, &mut rng),
                )
                .expect("canvas size fixed"),
                label: digit,
            });
        }
    }
    let mut order_rng = rng::seeded(seed, "digit-order");
    examples.shuffle(&mut order_rng);
    Dataset::new("synthetic-digits", 10, examples).expect("generator respects invariants")
}

// ---------------------------------------------------------------------------
// Subsetting
// ---------------------------------------------------------------------------

/// Draws a deterministic subset of `n` examples, without replacement,
/// class-balanced to within one example where class sizes allow.
///
/// When a class has too few examples for its quota, the shortfall is
/// redistributed over the remaining classes in seeded order.
pub fn sample_subset(set: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let chosen = subset_indices(set, n, seed)?;
    let examples = chosen.iter().map(|&i| set.examples()[i].clone()).collect();
    Dataset::new(
        format!("{}-subset{}", set.name(), n),
        set.num_classes(),
        examples,
    )
}

/// Splits off a class-balanced subset of `n` examples (drawn exactly like
/// [`sample_subset`]) and returns it together with the remainder, which
/// keeps the source order.
pub fn split_subset(set: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let chosen = subset_indices(set, n, seed)?;
    let examples = chosen.iter().map(|&i| set.examples()[i].clone()).collect();
    let first = Dataset::new(
        format!("{}-split{}", set.name(), n),
        set.num_classes(),
        examples,
    )?;
    let mut taken = vec![false; set.len()];
    for &i in &chosen {
        taken[i] = true;
    }
    let rest_examples = set
        .examples()
        .iter()
        .enumerate()
        .filter(|(i, _)| !taken[*i])
        .map(|(_, e)| e.clone())
        .collect();
    let rest = Dataset::new(
        format!("{}-rest", set.name()),
        set.num_classes(),
        rest_examples,
    )?;
    Ok((first, rest))
}

fn subset_indices(set: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > set.len() {
        return Err(Error::SubsetTooLarge {
            requested: n,
            available: set.len(),
        });
    }
    let c = set.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, e) in set.examples().iter().enumerate() {
        by_class[e.label].push(i);
    }
    for (label, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::seeded(seed, &format!("subset-class-{label}")));
    }
    let mut class_order: Vec<usize> = (0..c).collect();
    class_order.shuffle(&mut rng::seeded(seed, "subset-class-order"));

    let mut quota = vec![n / c; c];
    for &label in class_order.iter().take(n % c) {
        quota[label] += 1;
    }
    // Redistribute quota that short classes cannot fill.
    loop {
        let mut deficit = 0;
        for label in 0..c {
            if quota[label] > by_class[label].len() {
                deficit += quota[label] - by_class[label].len();
                quota[label] = by_class[label].len();
            }
        }
        if deficit == 0 {
            break;
        }
        let mut placed = false;
        for &label in &class_order {
            while deficit > 0 && quota[label] < by_class[label].len() {
                quota[label] += 1;
                deficit -= 1;
                placed = true;
            }
        }
        assert!(placed || deficit == 0, "subset quota exceeds dataset size");
        if deficit == 0 {
            break;
        }
    }

    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for label in 0..c {
        chosen.extend_from_slice(&by_class[label][..quota[label]]);
    }
    chosen.shuffle(&mut rng::seeded(seed, "subset-order"));
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_in_range() {
        let cfg = BlobsConfig::default();
        let a = synth_blobs(&cfg);
        let b = synth_blobs(&cfg);
        assert_eq!(a.len(), cfg.num_classes * cfg.per_class);
        for (ea, eb) in a.examples().iter().zip(b.examples()) {
            assert_eq!(ea.pixels, eb.pixels);
            assert_eq!(ea.label, eb.label);
        }
        for e in a.examples() {
            assert!(e.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn digits_are_deterministic_and_distinct_across_classes() {
        let a = synth_digits(3, 9);
        let b = synth_digits(3, 9);
        assert_eq!(a.len(), 30);
        for (ea, eb) in a.examples().iter().zip(b.examples()) {
            assert_eq!(ea.pixels, eb.pixels);
        }
        // Mean images of two different digits must differ substantially.
        let mean = |set: &Dataset, d: usize| -> Vec<f32> {
            let mut acc = vec![0.0f32; 784];
            let mut count = 0;
            for e in set.examples().iter().filter(|e| e.label == d) {
                for (a, v) in acc.iter_mut().zip(e.pixels.data()) {
                    *a += v;
                }
                count += 1;
            }
            acc.iter_mut().for_each(|v| *v /= count as f32);
            acc
        };
        let m0 = mean(&a, 0);
        let m1 = mean(&a, 1);
        let dist: f32 = m0.iter().zip(&m1).map(|(a, b)| (a - b).abs()).sum();
        assert!(dist > 10.0, "class means too similar: L1 distance {dist}");
    }

    #[test]
    fn subset_is_balanced_within_one() {
        let set = synth_digits(30, 3);
        let sub = sample_subset(&set, 95, 42).unwrap();
        let counts = sub.class_counts();
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1, "unbalanced counts: {counts:?}");
        assert_eq!(sub.len(), 95);
    }

    #[test]
    fn subset_rejects_oversized_requests() {
        let set = synth_blobs(&BlobsConfig::default());
        match sample_subset(&set, set.len() + 1, 0) {
            Err(Error::SubsetTooLarge { .. }) => {}
            other => panic!("expected SubsetTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn subset_redistributes_when_a_class_is_short() {
        // 2 classes: class 0 has 2 examples, class 1 has 10.
        let mut examples = Vec::new();
        for i in 0..12 {
            examples.push(Example {
                pixels: Tensor::new(vec![2], vec![i as f32 / 12.0, 0.5]).unwrap(),
                label: usize::from(i >= 2),
            });
        }
        let set = Dataset::new("skewed", 2, examples).unwrap();
        let sub = sample_subset(&set, 8, 1).unwrap();
        assert_eq!(sub.len(), 8);
        let counts = sub.class_counts();
        assert_eq!(counts[0], 2);
        assert_eq!(counts[1], 6);
    }

    #[test]
    fn split_subset_partitions_and_matches_sample_subset() {
        let set = synth_blobs(&BlobsConfig {
            num_classes: 3,
            per_class: 10,
            dim: 4,
            spread: 0.05,
            seed: 9,
        });
        let (first, rest) = split_subset(&set, 12, 77).unwrap();
        assert_eq!(first.len(), 12);
        assert_eq!(rest.len(), set.len() - 12);

        // Same draw as sample_subset, example for example.
        let sampled = sample_subset(&set, 12, 77).unwrap();
        for (a, b) in first.examples().iter().zip(sampled.examples()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.pixels, b.pixels);
        }

        // The two halves partition the set: every original example appears
        // exactly once across them (pixels are unique per blob draw).
        let mut seen: Vec<&[f32]> = first
            .examples()
            .iter()
            .chain(rest.examples())
            .map(|e| e.pixels.data())
            .collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), set.len());
    }

    #[test]
    fn merged_requires_compatible_parts() {
        let blobs = synth_blobs(&BlobsConfig::default());
        let digits = synth_digits(2, 0);
        assert!(Dataset::merged("bad", &[&blobs, &digits]).is_err());
        let ok = Dataset::merged("ok", &[&blobs, &blobs]).unwrap();
        assert_eq!(ok.len(), blobs.len() * 2);
    }
}
