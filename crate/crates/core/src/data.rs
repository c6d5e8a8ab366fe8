//! Lane-affordance data: label generation from TuSimple-style lane
//! annotations, image preprocessing, rare-event duplication, a synthetic
//! generator, and the on-disk dataset layout.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_HEIGHT: usize = 720;
pub const IMAGE_WIDTH: usize = 1280;
/// First image row kept by the crop; rows above are mostly sky.
pub const CROP_TOP: usize = 208;
pub const DOWNSCALE: usize = 4;
pub const INPUT_HEIGHT: usize = (IMAGE_HEIGHT - CROP_TOP) / DOWNSCALE;
pub const INPUT_WIDTH: usize = IMAGE_WIDTH / DOWNSCALE;
/// Image row at which the ego-lane centre is measured.
pub const LABEL_HEIGHT: f64 = 500.0;
pub const IMAGE_CENTER_X: f64 = IMAGE_WIDTH as f64 / 2.0;
/// Labels at least this far from the image centre are duplicated.
pub const RARE_DISTANCE: f64 = 100.0;
/// Marker for an absent lane point in the annotation format.
pub const MISSING_X: f64 = -2.0;

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: Vec<f64>,
    pub source_id: String,
    pub duplicated: bool,
}

impl Sample {
    pub fn new(input: Tensor, label: Vec<f64>, source_id: impl Into<String>) -> Self {
        Self {
            input,
            label,
            source_id: source_id.into(),
            duplicated: false,
        }
    }
}

/// `t(v) = 2v/255 − 1`, mapping `[0, 255]` onto `[−1, 1]`.
pub fn normalize_pixel(v: f64) -> f64 {
    2.0 * v / 255.0 - 1.0
}

/// One line of a TuSimple label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    pub raw_file: String,
}

impl LaneRecord {
    pub fn check(&self) -> Result<()> {
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.len() != self.h_samples.len() {
                return Err(Error::Format(format!(
                    "{}: lane {i} has {} points but there are {} h_samples",
                    self.raw_file,
                    lane.len(),
                    self.h_samples.len()
                )));
            }
        }
        Ok(())
    }

    /// x position of `lane` at image row `y`, interpolating linearly between
    /// the nearest annotated rows above and below. `None` when the lane is
    /// not annotated on both sides of `y`.
    pub fn lane_x_at(&self, lane: usize, y: f64) -> Option<f64> {
        let points: Vec<(f64, f64)> = self
            .h_samples
            .iter()
            .zip(&self.lanes[lane])
            .filter(|(_, &x)| x >= 0.0)
            .map(|(&h, &x)| (h, x))
            .collect();
        if let Some(&(_, x)) = points.iter().find(|(h, _)| *h == y) {
            return Some(x);
        }
        let above = points
            .iter()
            .filter(|(h, _)| *h < y)
            .max_by(|a, b| a.0.total_cmp(&b.0))?;
        let below = points
            .iter()
            .filter(|(h, _)| *h > y)
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        let t = (y - above.0) / (below.0 - above.0);
        Some(above.1 + t * (below.1 - above.1))
    }
}

/// Ego-lane centre x at image row `height`: the mean x of the adjacent lane
/// pair that straddles the image centre. Lanes are sorted left to right
/// first, so annotation order does not matter. `None` means the record is
/// skipped.
pub fn generate_label(rec: &LaneRecord, height: f64) -> Option<f64> {
    let mut xs: Vec<f64> = (0..rec.lanes.len()).filter_map(|i| rec.lane_x_at(i, height)).collect();
    xs.sort_by(f64::total_cmp);
    xs.windows(2)
        .find(|w| w[0] < IMAGE_CENTER_X && w[1] > IMAGE_CENTER_X)
        .map(|w| 0.5 * (w[0] + w[1]))
}

/// Crops rows `[208, 720)`, averages channels to grey, box-downsamples by 4
/// and normalises to `[−1, 1]`: `[720, 1280, c] → [128, 320, 1]`.
pub fn preprocess(image: &Tensor) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::dim("preprocess", image.shape(), &[IMAGE_HEIGHT, IMAGE_WIDTH, 1]));
    };
    if h != IMAGE_HEIGHT || w != IMAGE_WIDTH {
        return Err(Error::dim("preprocess", image.shape(), &[IMAGE_HEIGHT, IMAGE_WIDTH, c]));
    }
    let px = image.data();
    let grey = |y: usize, x: usize| -> f64 {
        let base = (y * w + x) * c;
        px[base..base + c].iter().sum::<f64>() / c as f64
    };
    let area = (DOWNSCALE * DOWNSCALE) as f64;
    let mut out = Vec::with_capacity(INPUT_HEIGHT * INPUT_WIDTH);
    for oy in 0..INPUT_HEIGHT {
        for ox in 0..INPUT_WIDTH {
            let mut acc = 0.0;
            for dy in 0..DOWNSCALE {
                for dx in 0..DOWNSCALE {
                    acc += grey(CROP_TOP + oy * DOWNSCALE + dy, ox * DOWNSCALE + dx);
                }
            }
            out.push(normalize_pixel(acc / area));
        }
    }
    Tensor::new(vec![INPUT_HEIGHT, INPUT_WIDTH, 1], out)
}

/// Appends a flagged copy of every sample whose label is at least
/// [`RARE_DISTANCE`] pixels from the image centre.
pub fn duplicate_rare(samples: Vec<Sample>) -> Vec<Sample> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let rare = s
            .label
            .first()
            .is_some_and(|&x| (x - IMAGE_CENTER_X).abs() >= RARE_DISTANCE);
        if rare {
            let mut copy = s.clone();
            copy.duplicated = true;
            copy.source_id.push_str("#dup");
            out.push(s);
            out.push(copy);
        } else {
            out.push(s);
        }
    }
    out
}

/// Row of the resized input that corresponds to [`LABEL_HEIGHT`].
pub fn label_row() -> f64 {
    (LABEL_HEIGHT - CROP_TOP as f64) / DOWNSCALE as f64
}

/// Label in original image coordinates for lane columns measured in the
/// resized input.
pub fn synthetic_label(left_col: f64, right_col: f64) -> f64 {
    DOWNSCALE as f64 * 0.5 * (left_col + right_col)
}

/// Geometry of a rendered synthetic road scene, in resized-input columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Lane columns at [`label_row`].
    pub left_col: f64,
    pub right_col: f64,
    /// Column where the lanes would meet above the image.
    pub vanishing_col: f64,
    pub line_brightness: f64,
    pub background: f64,
    /// Dash period in rows for each lane; `None` draws a solid line.
    pub dashes: [Option<f64>; 2],
    pub dash_phase: f64,
}

/// Row above the image at which synthetic lanes converge.
const HORIZON_ROW: f64 = -24.0;
const LINE_HALF_WIDTH: f64 = 1.6;
const FIRST_LINE_ROW: usize = 8;

impl SyntheticScene {
    fn lane_col(&self, at_label_row: f64, row: f64) -> f64 {
        let t = (row - HORIZON_ROW) / (label_row() - HORIZON_ROW);
        self.vanishing_col + (at_label_row - self.vanishing_col) * t
    }

    /// Raw `[0, 255]` intensities; `noise` supplies one value per pixel.
    pub fn render(&self, mut noise: impl FnMut() -> f64) -> Vec<f64> {
        let mut px = vec![0.0; INPUT_HEIGHT * INPUT_WIDTH];
        for row in 0..INPUT_HEIGHT {
            let r = row as f64;
            // Road gets slightly brighter towards the bottom of the frame.
            let base = self.background + 20.0 * r / INPUT_HEIGHT as f64;
            let cols = [self.lane_col(self.left_col, r), self.lane_col(self.right_col, r)];
            for col in 0..INPUT_WIDTH {
                let mut v = base + noise();
                if row >= FIRST_LINE_ROW {
                    for (lane, &lc) in cols.iter().enumerate() {
                        let visible = match self.dashes[lane] {
                            None => true,
                            Some(period) => ((r + self.dash_phase) / period).fract() < 0.6,
                        };
                        let dist = (col as f64 - lc).abs();
                        if visible && dist < LINE_HALF_WIDTH + 1.0 {
                            let cover = (LINE_HALF_WIDTH + 1.0 - dist).min(1.0);
                            v = v * (1.0 - cover) + self.line_brightness * cover;
                        }
                    }
                }
                px[row * INPUT_WIDTH + col] = v.clamp(0.0, 255.0);
            }
        }
        px
    }

    pub fn label(&self) -> f64 {
        synthetic_label(self.left_col, self.right_col)
    }
}

fn random_scene(rng: &mut ChaCha8Rng) -> SyntheticScene {
    let mid = INPUT_WIDTH as f64 / 2.0;
    // About a third of the scenes put the ego-lane centre far from the image
    // centre so that the rare-event rule has something to duplicate.
    let offset = if rng.gen_bool(0.35) {
        let mag = rng.gen_range(26.0..52.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    } else {
        rng.gen_range(-22.0..22.0)
    };
    let half_width = rng.gen_range(42.0..72.0);
    let center = mid + offset;
    SyntheticScene {
        left_col: center - half_width,
        right_col: center + half_width,
        vanishing_col: mid + rng.gen_range(-25.0..25.0) + 0.3 * offset,
        line_brightness: rng.gen_range(190.0..250.0),
        background: rng.gen_range(40.0..100.0),
        dashes: [
            rng.gen_bool(0.5).then(|| rng.gen_range(10.0..18.0)),
            rng.gen_bool(0.5).then(|| rng.gen_range(10.0..18.0)),
        ],
        dash_phase: rng.gen_range(0.0..18.0),
    }
}

/// `n` rendered two-lane scenes with their ego-lane labels, deterministic in
/// `seed`.
pub fn synthetic_dataset(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::contract("synthetic dataset needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let scene = random_scene(&mut rng);
            let px = scene.render(|| rng.gen_range(-12.0..12.0));
            let input = Tensor::new(
                vec![INPUT_HEIGHT, INPUT_WIDTH, 1],
                px.into_iter().map(normalize_pixel).collect(),
            )?;
            Ok(Sample::new(input, vec![scene.label()], format!("synthetic-{seed}-{i}")))
        })
        .collect()
}

/// Decodes a PNG or PNM image into `[h, w, c]` raw intensities, with `c = 1`
/// for grey images and `c = 3` otherwise.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw): (usize, Vec<u8>) = match img.color().channel_count() {
        1 | 2 => (1, img.into_luma8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    Tensor::new(vec![h, w, c], raw.into_iter().map(f64::from).collect())
}

/// Parses newline-delimited lane records, skipping blank lines.
pub fn read_lane_records(path: &Path) -> Result<Vec<LaneRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LaneRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.check()?;
        out.push(rec);
    }
    Ok(out)
}

/// A record dropped during ingestion and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub raw_file: String,
    pub reason: String,
}

/// Builds samples from lane records and their images under `image_root`.
pub fn prepare_records(records: &[LaneRecord], image_root: &Path) -> Result<(Vec<Sample>, Vec<SkippedRecord>)> {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for rec in records {
        let Some(label) = generate_label(rec, LABEL_HEIGHT) else {
            skipped.push(SkippedRecord {
                raw_file: rec.raw_file.clone(),
                reason: "no adjacent lane pair straddles the image centre".into(),
            });
            continue;
        };
        let path = image_root.join(&rec.raw_file);
        let image = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                skipped.push(SkippedRecord {
                    raw_file: rec.raw_file.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match preprocess(&image) {
            Ok(input) => samples.push(Sample::new(input, vec![label], rec.raw_file.clone())),
            Err(e) => skipped.push(SkippedRecord {
                raw_file: rec.raw_file.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok((samples, skipped))
}

const TENSOR_MAGIC: &[u8; 4] = b"DPRT";
const TENSOR_VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

/// Writes `t` as: magic `DPRT`, version byte, dtype byte (1 = f32), rank as
/// u16, each dimension as u32, then little-endian f32 values.
pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("not a tensor file"));
    }
    if bytes[4] != TENSOR_VERSION || bytes[5] != DTYPE_F32 {
        return Err(bad("unsupported tensor version or dtype"));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let body = &bytes[header..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

/// One line of a dataset `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub file: String,
    pub label: Vec<f64>,
    pub duplicated: bool,
    pub source: String,
}

pub const INDEX_FILE: &str = "index.jsonl";

/// Writes samples as `dir/index.jsonl` plus one tensor file per sample.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut index = BufWriter::new(file);
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let file = format!("{id}.tensor");
        write_tensor_file(&dir.join(&file), &s.input)?;
        let entry = IndexEntry {
            id,
            file,
            label: s.label.clone(),
            duplicated: s.duplicated,
            source: s.source_id.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(index, "{line}").map_err(|e| Error::io(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path: PathBuf = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_index(dir)?
        .into_iter()
        .map(|e| {
            Ok(Sample {
                input: read_tensor_file(&dir.join(&e.file))?,
                label: e.label,
                source_id: e.source,
                duplicated: e.duplicated,
            })
        })
        .collect()
}
