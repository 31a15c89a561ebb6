//! Synthetic planted-dependency dataset, dataset manifests, and image
//! loading.
//!
//! Each synthetic sample is a textured noise image with two 16-px square
//! markers placed in two distinct final-window blocks; each marker is
//! independently red or blue and the binary label is 1 iff the colors match.
//! No single pre-bottleneck node ever sees both markers, so the relation the
//! label depends on can only be resolved across the global bottleneck graph
//! whose edges the model explains.

use crate::error::{Error, Result};
use crate::model::Target;
use crate::trainer::{derive_rng, Sample, Split};
use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MARKER_PX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitName::Train => write!(f, "train"),
            SplitName::Val => write!(f, "val"),
            SplitName::Test => write!(f, "test"),
        }
    }
}

/// Untagged label: integer class id or real regression value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn to_target(self, classification: bool) -> Result<Target> {
        match (self, classification) {
            (Label::Class(c), true) => Ok(Target::Class(c)),
            (Label::Value(v), false) => Ok(Target::Value(v)),
            (Label::Class(c), false) => Ok(Target::Value(c as f64)),
            (Label::Value(v), true) => {
                Err(Error::Data(format!("real-valued label {v} for a classification task")))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub task: String,
    pub input_side: usize,
    pub seed: u64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: SplitName,
    pub image: String,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marker_nodes: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marker_px: Option<[[usize; 4]; 2]>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

/// 60/20/20 split sizes (train gets 60%, validation 20%, test the rest).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

fn split_of(i: usize, n: usize) -> SplitName {
    let (tr, va, _) = split_sizes(n);
    if i < tr {
        SplitName::Train
    } else if i < tr + va {
        SplitName::Val
    } else {
        SplitName::Test
    }
}

struct PlantedSample {
    image: Array3<f64>,
    label: usize,
    marker_nodes: [usize; 2],
    marker_px: [[usize; 4]; 2],
}

/// Smooth low-contrast texture: a coarse random grid, bilinearly upsampled
/// around mid-gray. Deliberately carries little per-image information so the
/// planted markers dominate what a model can key on.
fn textured_background(side: usize, rng: &mut impl Rng) -> Array3<f64> {
    let coarse_n = (side / 32).max(2) + 1;
    let cell = side as f64 / (coarse_n - 1) as f64;
    let mut coarse = vec![0.0f64; coarse_n * coarse_n];
    for v in coarse.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let at = |r: usize, c: usize| coarse[r * coarse_n + c];
    let mut img = Array3::<f64>::zeros((side, side, 3));
    for r in 0..side {
        for c in 0..side {
            let fr = r as f64 / cell;
            let fc = c as f64 / cell;
            let (r0, c0) = (fr.floor() as usize, fc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(coarse_n - 1), (c0 + 1).min(coarse_n - 1));
            let (tr, tc) = (fr - r0 as f64, fc - c0 as f64);
            let top = at(r0, c0) * (1.0 - tc) + at(r0, c1) * tc;
            let bot = at(r1, c0) * (1.0 - tc) + at(r1, c1) * tc;
            let smooth = top * (1.0 - tr) + bot * tr;
            for ch in 0..3 {
                img[(r, c, ch)] = (0.5 + 0.08 * smooth).clamp(0.0, 1.0);
            }
        }
    }
    img
}

// Red and blue share a bright base so the two marker windows sit closer to
// each other than to the gray background in feature space; the global k-NN
// graph then reliably links the marker pair whose relation carries the label.
const MARKER_COLORS: [[f64; 3]; 2] = [[1.0, 0.7, 0.7], [0.7, 0.7, 1.0]]; // red, blue

fn generate_sample(input_side: usize, seed: u64, index: usize) -> PlantedSample {
    let mut rng = derive_rng(seed, &[0x706c_616eu64, index as u64]);
    let mut image = textured_background(input_side, &mut rng);

    let node_side = input_side / 32; // final-stage grid side
    let window_side_nodes = 2; // final-window block = 2x2 final-stage nodes
    let windows_per_side = node_side / window_side_nodes;

    // two distinct final-window blocks
    let total_windows = windows_per_side * windows_per_side;
    let w1 = rng.gen_range(0..total_windows);
    let w2 = {
        let off = rng.gen_range(1..total_windows);
        (w1 + off) % total_windows
    };

    let mut marker_nodes = [0usize; 2];
    let mut marker_px = [[0usize; 4]; 2];
    let mut colors = [0usize; 2];
    for (m, &win) in [w1, w2].iter().enumerate() {
        let (wr, wc) = (win / windows_per_side, win % windows_per_side);
        // one of the window's final-stage nodes
        let dr = rng.gen_range(0..window_side_nodes);
        let dc = rng.gen_range(0..window_side_nodes);
        let (nr, nc) = (wr * window_side_nodes + dr, wc * window_side_nodes + dc);
        marker_nodes[m] = nr * node_side + nc;
        // uniform offset keeping the marker inside the node's 32-px patch
        let max_off = 32 - MARKER_PX;
        let (or, oc) = (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off));
        let (r0, c0) = (nr * 32 + or, nc * 32 + oc);
        marker_px[m] = [r0, c0, r0 + MARKER_PX, c0 + MARKER_PX];
        let color_idx = rng.gen_range(0..2usize);
        colors[m] = color_idx;
        for r in r0..r0 + MARKER_PX {
            for c in c0..c0 + MARKER_PX {
                for ch in 0..3 {
                    image[(r, c, ch)] = MARKER_COLORS[color_idx][ch];
                }
            }
        }
    }
    let label = usize::from(colors[0] == colors[1]);
    PlantedSample { image, label, marker_nodes, marker_px }
}

pub fn save_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut canvas = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (image[(r, c, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(r, c, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(r, c, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            canvas.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    canvas.save_with_format(path, image::ImageFormat::Png).map_err(Error::Image)?;
    Ok(())
}

/// Generate `n` planted samples under `out_dir` (lossless PNGs plus a
/// JSON-lines manifest), split 60/20/20. Fully seed-deterministic; samples
/// are generated in parallel from per-sample derived streams.
pub fn generate_planted_dataset(
    n: usize,
    input_side: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples for 60/20/20 splits, got {n}")));
    }
    if input_side % 64 != 0 || input_side == 0 {
        return Err(Error::Config(format!("input_side {input_side} must be a positive multiple of 64")));
    }
    if input_side / 64 < 2 {
        return Err(Error::Config(format!(
            "input_side {input_side} has a single final-window block; markers need two distinct blocks"
        )));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let records: Vec<ManifestRecord> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let s = generate_sample(input_side, seed, i);
            let split = split_of(i, n);
            let rel = format!("images/{split}_{i:05}.png");
            save_png(&s.image, &out_dir.join(&rel))?;
            Ok(ManifestRecord {
                split,
                image: rel,
                label: Label::Class(s.label),
                marker_nodes: Some(s.marker_nodes),
                marker_px: Some(s.marker_px),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let header = ManifestHeader {
        version: 1,
        task: "classification".into(),
        input_side,
        seed,
        n,
    };
    let manifest = DatasetManifest { header, records, root: out_dir.to_path_buf() };
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&manifest.header)?);
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: ManifestHeader = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Data("empty manifest".into()))?,
    )
    .map_err(|e| Error::Data(format!("bad manifest header: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("bad manifest record {i}: {e}")))?;
        records.push(rec);
    }
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let manifest = DatasetManifest { header, records, root };
    validate_manifest(&manifest)?;
    Ok(manifest)
}

fn validate_manifest(manifest: &DatasetManifest) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.image.clone()) {
            return Err(Error::Data(format!(
                "record {} appears in more than one split position",
                r.image
            )));
        }
        let full = manifest.root.join(&r.image);
        if !full.exists() {
            return Err(Error::Data(format!("referenced image missing: {}", full.display())));
        }
    }
    Ok(())
}

/// Min-max normalization to [0, 1]; a constant image maps to all zeros.
pub fn min_max_normalize(image: &mut Array3<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in image.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        image.fill(0.0);
        return;
    }
    let span = hi - lo;
    image.mapv_inplace(|v| (v - lo) / span);
}

/// Load one image file, resize to `target_side`, min-max normalize.
pub fn load_image(path: &Path, target_side: usize) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot open image {}: {e}", path.display())))?;
    let img = if img.width() as usize != target_side || img.height() as usize != target_side {
        img.resize_exact(
            target_side as u32,
            target_side as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let rgb = img.to_rgb8();
    let mut out = Array3::<f64>::zeros((target_side, target_side, 3));
    for r in 0..target_side {
        for c in 0..target_side {
            let px = rgb.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                out[(r, c, ch)] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    min_max_normalize(&mut out);
    Ok(out)
}

/// In-memory dataset with its three splits.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub classification: bool,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Load every record of a manifest, resizing to `input_side` and min-max
/// normalizing each image.
pub fn load_dataset(manifest: &DatasetManifest, input_side: usize) -> Result<Dataset> {
    let classification = manifest.header.task == "classification";
    let samples: Vec<(SplitName, Sample)> = manifest
        .records
        .par_iter()
        .map(|r| -> Result<(SplitName, Sample)> {
            let full = manifest.root.join(&r.image);
            let image = load_image(&full, input_side)
                .map_err(|e| Error::Data(format!("record {}: {e}", r.image)))?;
            let target = r
                .label
                .to_target(classification)
                .map_err(|e| Error::Data(format!("record {}: {e}", r.image)))?;
            let sample = Sample {
                id: r.image.clone(),
                image,
                target,
                marker_nodes: r.marker_nodes.map(|m| (m[0], m[1])),
            };
            Ok((r.split, sample))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ds = Dataset { classification, ..Dataset::default() };
    for (split, sample) in samples {
        match split {
            SplitName::Train => ds.train.samples.push(sample),
            SplitName::Val => ds.val.samples.push(sample),
            SplitName::Test => ds.test.samples.push(sample),
        }
    }
    Ok(ds)
}
