//! Synthetic shape corpus generation, the GATC1 on-disk format, and seeded
//! subset utilities for scarce-data runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GroupMap;
use crate::error::{GatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "val" => Some(SplitTag::Val),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// In-memory corpus. Pixels are stored as f64 but quantized to f32 at
/// generation time so the on-disk f32 block round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `n * h * w * c` row-major pixels in [0,1].
    pub pixels: Vec<f64>,
    pub fine_labels: Vec<u32>,
    pub group_map: GroupMap,
    /// Scalar regression target per sample (shape scale).
    pub age_like: Vec<f64>,
    /// Three-level stroke style per sample.
    pub gender_like: Vec<u32>,
    /// Binary blemish flag per sample.
    pub aux_binary: Vec<u32>,
    pub splits: Vec<SplitTag>,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_labels.is_empty()
    }

    pub fn sample_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn fine_classes(&self) -> usize {
        self.group_map.0.len()
    }

    pub fn macro_classes(&self) -> usize {
        self.group_map.macro_arity()
    }

    pub fn indices_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == tag).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.sample_dim();
        if self.pixels.len() != n * d {
            return Err(GatError::ShapeMismatch(format!(
                "{} pixels for {} samples of dim {}",
                self.pixels.len(),
                n,
                d
            )));
        }
        for field in [self.age_like.len(), self.gender_like.len(), self.aux_binary.len(), self.splits.len()] {
            if field != n {
                return Err(GatError::ShapeMismatch(format!(
                    "metadata column length {field} for {n} samples"
                )));
            }
        }
        for (i, &f) in self.fine_labels.iter().enumerate() {
            if !self.group_map.0.contains_key(&f) {
                return Err(GatError::InvalidArgument(format!(
                    "sample {i}: fine label {f} outside group map"
                )));
            }
        }
        if self.pixels.iter().any(|p| !p.is_finite()) {
            return Err(GatError::NonFinite("corpus pixels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub class_counts: BTreeMap<u32, usize>,
    pub group_map: GroupMap,
    pub file: String,
    pub crc32: u32,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Renders one shape into a `size * size` single-channel image.
/// `scale` is the half-extent in normalized [-1,1] coordinates and
/// `stroke` the outline width.
fn render_shape(size: usize, fine: u32, half: u32, scale: f64, stroke: f64, amp: f64, blemish: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rounded = fine >= half;
    let family = (fine % half) as usize;
    let (dx, dy) = (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25));
    let mut out = vec![0.0f64; size * size];
    for r in 0..size {
        for c in 0..size {
            let y = (r as f64 + 0.5) / size as f64 * 2.0 - 1.0 - dy;
            let x = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0 - dx;
            // distance of (x, y) to the shape boundary, negative inside
            let d = if rounded {
                match family {
                    0 => (x * x + y * y).sqrt() - scale,
                    1 => {
                        let rr = (x * x + y * y).sqrt();
                        (rr - scale).abs().min((rr - scale * 0.5).abs())
                    }
                    2 => ((x / 1.0).powi(2) + (y / 0.6).powi(2)).sqrt() - scale,
                    _ => {
                        let rr = ((x - scale * 0.3).powi(2) + y * y).sqrt();
                        rr.max(scale * 0.6 - ((x + scale * 0.3).powi(2) + y * y).sqrt()) - scale * 0.8
                    }
                }
            } else {
                match family {
                    0 => x.abs().max(y.abs()) - scale,
                    1 => x.abs() + y.abs() - scale,
                    2 => (x.abs() - scale * 0.25).min(y.abs() - scale * 0.25).max(x.abs().max(y.abs()) - scale),
                    _ => {
                        let e1 = y - scale;
                        let e2 = -y - 1.2 * x - scale * 0.4;
                        let e3 = -y + 1.2 * x - scale * 0.4;
                        e1.max(e2).max(e3)
                    }
                }
            };
            // filled families for index 0 of each macro group, outlines otherwise
            let filled = family == 0;
            let v = if filled {
                1.0 / (1.0 + (d / stroke * 4.0).exp())
            } else {
                (-(d * d) / (2.0 * stroke * stroke)).exp()
            };
            out[r * size + c] = v * amp;
        }
    }
    if blemish {
        let br = size / 8;
        for r in 0..=br {
            for c in 0..=br {
                out[r * size + c] = 1.0;
            }
        }
    }
    for v in out.iter_mut() {
        let noise = rng.gen_range(-0.18..0.18);
        *v = quantize((*v + noise).clamp(0.0, 1.0));
    }
    out
}

/// Deterministic parametric shape corpus. The first half of the fine
/// classes are angular shapes (macro class 0), the rest rounded (macro 1).
pub fn generate_synthetic(n: usize, size: usize, fine_classes: u32, seed: u64) -> Result<LabeledCorpus> {
    if fine_classes < 2 || fine_classes % 2 != 0 {
        return Err(GatError::InvalidArgument(format!(
            "fine_classes must be even and >= 2, got {fine_classes}"
        )));
    }
    if n < fine_classes as usize {
        return Err(GatError::InvalidArgument(format!(
            "n = {n} smaller than fine_classes = {fine_classes}"
        )));
    }
    if size < 8 || size % 4 != 0 {
        return Err(GatError::InvalidArgument(format!(
            "image size {size} must be >= 8 and divisible by 4"
        )));
    }
    let half = fine_classes / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut fine_labels = Vec::with_capacity(n);
    let mut age_like = Vec::with_capacity(n);
    let mut gender_like = Vec::with_capacity(n);
    let mut aux_binary = Vec::with_capacity(n);
    for i in 0..n {
        // round-robin base assignment keeps every class nonempty
        let fine = (i as u32) % fine_classes;
        let scale = quantize(rng.gen_range(0.35..0.85));
        let stroke_level = rng.gen_range(0u32..3);
        let stroke = 0.05 + 0.04 * stroke_level as f64;
        let blemish = rng.gen_bool(0.25) as u32;
        // low contrast keeps the task attackable at the standard budget
        let amp = rng.gen_range(0.25..0.55);
        let img = render_shape(size, fine, half, scale, stroke, amp, blemish == 1, &mut rng);
        pixels.extend_from_slice(&img);
        fine_labels.push(fine);
        age_like.push(scale);
        gender_like.push(stroke_level);
        aux_binary.push(blemish);
    }
    let group_map = GroupMap(
        (0..fine_classes)
            .map(|f| (f, if f < half { 0 } else { 1 }))
            .collect(),
    );
    // 70/15/15 split, stratified per fine class
    let mut splits = vec![SplitTag::Train; n];
    for f in 0..fine_classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| fine_labels[i] == f).collect();
        idx.shuffle(&mut rng);
        let n_test = idx.len() * 15 / 100;
        let n_val = idx.len() * 15 / 100;
        for &i in idx.iter().take(n_test) {
            splits[i] = SplitTag::Test;
        }
        for &i in idx.iter().skip(n_test).take(n_val) {
            splits[i] = SplitTag::Val;
        }
    }
    // within-family label noise on the train split: fine supervision is
    // noisy while the derived macro label stays exact, so the coarse task
    // carries a cleaner training signal than the fine task
    for i in 0..n {
        if half > 1 && splits[i] == SplitTag::Train && rng.gen_bool(0.35) {
            let f = fine_labels[i];
            let base = if f < half { 0 } else { half };
            let mut alt = base + rng.gen_range(0..half - 1);
            if alt >= f {
                alt += 1;
            }
            fine_labels[i] = alt;
        }
    }
    let corpus = LabeledCorpus {
        name: format!("synthetic-{fine_classes}c-{size}px-n{n}-s{seed}"),
        height: size,
        width: size,
        channels: 1,
        pixels,
        fine_labels,
        group_map,
        age_like,
        gender_like,
        aux_binary,
        splits,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[derive(Debug, Serialize, Deserialize)]
struct Gatc1Meta {
    name: String,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    group_map: BTreeMap<u32, u32>,
    columns: Vec<String>,
}

const GATC1_MAGIC: &[u8] = b"GATC1\n";
const CSV_COLUMNS: [&str; 5] = ["fine", "age", "gender", "aux", "split"];

/// Serializes a corpus in the GATC1 layout: magic line, one-line JSON
/// metadata, raw little-endian f32 pixel block, CSV label block, CRC-32
/// footer over everything before it.
pub fn save_corpus(corpus: &LabeledCorpus, path: &Path) -> Result<u32> {
    corpus.validate()?;
    let meta = Gatc1Meta {
        name: corpus.name.clone(),
        n: corpus.len(),
        height: corpus.height,
        width: corpus.width,
        channels: corpus.channels,
        group_map: corpus.group_map.0.clone(),
        columns: CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(GATC1_MAGIC);
    buf.extend_from_slice(serde_json::to_string(&meta)?.as_bytes());
    buf.push(b'\n');
    for &p in &corpus.pixels {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    buf.extend_from_slice(CSV_COLUMNS.join(",").as_bytes());
    buf.push(b'\n');
    for i in 0..corpus.len() {
        buf.extend_from_slice(
            format!(
                "{},{},{},{},{}\n",
                corpus.fine_labels[i],
                corpus.age_like[i],
                corpus.gender_like[i],
                corpus.aux_binary[i],
                corpus.splits[i].as_str()
            )
            .as_bytes(),
        );
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(format!("CRC32 {crc:08x}\n").as_bytes());
    fs::write(path, &buf)?;
    Ok(crc)
}

fn parse_err(offset: usize, msg: impl Into<String>) -> GatError {
    GatError::Parse { offset, msg: msg.into() }
}

pub fn load_corpus(path: &Path) -> Result<LabeledCorpus> {
    let buf = fs::read(path)?;
    if !buf.starts_with(GATC1_MAGIC) {
        return Err(parse_err(0, "missing GATC1 magic"));
    }
    let mut pos = GATC1_MAGIC.len();
    let meta_end = buf[pos..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| pos + i)
        .ok_or_else(|| parse_err(pos, "unterminated metadata line"))?;
    let meta: Gatc1Meta = serde_json::from_slice(&buf[pos..meta_end])
        .map_err(|e| parse_err(pos, format!("metadata: {e}")))?;
    if meta.columns != CSV_COLUMNS {
        return Err(parse_err(pos, format!("unexpected column schema {:?}", meta.columns)));
    }
    pos = meta_end + 1;
    let pixel_count = meta.n * meta.height * meta.width * meta.channels;
    let pixel_bytes = pixel_count * 4;
    if buf.len() < pos + pixel_bytes {
        return Err(parse_err(buf.len(), format!("pixel block truncated, need {pixel_bytes} bytes from byte {pos}")));
    }
    let mut pixels = Vec::with_capacity(pixel_count);
    for i in 0..pixel_count {
        let b = &buf[pos + i * 4..pos + i * 4 + 4];
        pixels.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    }
    pos += pixel_bytes;

    // footer is the fixed-width final line; everything before it is checksummed
    let footer_len = "CRC32 00000000\n".len();
    if buf.len() < pos + footer_len {
        return Err(parse_err(buf.len(), "label block truncated"));
    }
    let footer_start = buf.len() - footer_len;
    let footer = std::str::from_utf8(&buf[footer_start..])
        .map_err(|_| parse_err(footer_start, "footer not utf-8"))?;
    let expected = footer
        .strip_prefix("CRC32 ")
        .and_then(|s| s.strip_suffix('\n'))
        .and_then(|s| u32::from_str_radix(s, 16).ok())
        .ok_or_else(|| parse_err(footer_start, "malformed CRC32 footer"))?;
    let actual = crc32fast::hash(&buf[..footer_start]);
    if actual != expected {
        return Err(GatError::Checksum { expected, actual });
    }

    let csv = std::str::from_utf8(&buf[pos..footer_start])
        .map_err(|_| parse_err(pos, "label block not utf-8"))?;
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| parse_err(pos, "missing CSV header"))?;
    if header != CSV_COLUMNS.join(",") {
        return Err(parse_err(pos, format!("CSV header '{header}' does not match schema")));
    }
    let mut fine_labels = Vec::with_capacity(meta.n);
    let mut age_like = Vec::with_capacity(meta.n);
    let mut gender_like = Vec::with_capacity(meta.n);
    let mut aux_binary = Vec::with_capacity(meta.n);
    let mut splits = Vec::with_capacity(meta.n);
    let mut line_pos = pos + header.len() + 1;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(parse_err(line_pos, format!("expected {} fields, got {}", CSV_COLUMNS.len(), fields.len())));
        }
        let fine: u32 = fields[0].parse().map_err(|_| parse_err(line_pos, "bad fine label"))?;
        fine_labels.push(fine);
        age_like.push(fields[1].parse().map_err(|_| parse_err(line_pos, "bad age column"))?);
        gender_like.push(fields[2].parse().map_err(|_| parse_err(line_pos, "bad gender column"))?);
        aux_binary.push(fields[3].parse().map_err(|_| parse_err(line_pos, "bad aux column"))?);
        splits.push(
            SplitTag::parse(fields[4]).ok_or_else(|| parse_err(line_pos, format!("bad split tag '{}'", fields[4])))?,
        );
        line_pos += line.len() + 1;
    }
    if fine_labels.len() != meta.n {
        return Err(parse_err(pos, format!("metadata declares {} samples, CSV has {}", meta.n, fine_labels.len())));
    }
    let corpus = LabeledCorpus {
        name: meta.name,
        height: meta.height,
        width: meta.width,
        channels: meta.channels,
        pixels,
        fine_labels,
        group_map: GroupMap(meta.group_map),
        age_like,
        gender_like,
        aux_binary,
        splits,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn write_manifest(corpus: &LabeledCorpus, file: &str, seed: u64, crc32: u32, path: &Path) -> Result<DatasetManifest> {
    let mut class_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &f in &corpus.fine_labels {
        *class_counts.entry(f).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        name: corpus.name.clone(),
        seed,
        class_counts,
        group_map: corpus.group_map.clone(),
        file: file.to_string(),
        crc32,
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn take_indices(corpus: &LabeledCorpus, keep: &[usize]) -> LabeledCorpus {
    let d = corpus.sample_dim();
    let mut out = LabeledCorpus {
        name: corpus.name.clone(),
        height: corpus.height,
        width: corpus.width,
        channels: corpus.channels,
        pixels: Vec::with_capacity(keep.len() * d),
        fine_labels: Vec::with_capacity(keep.len()),
        group_map: corpus.group_map.clone(),
        age_like: Vec::with_capacity(keep.len()),
        gender_like: Vec::with_capacity(keep.len()),
        aux_binary: Vec::with_capacity(keep.len()),
        splits: Vec::with_capacity(keep.len()),
    };
    for &i in keep {
        out.pixels.extend_from_slice(corpus.image(i));
        out.fine_labels.push(corpus.fine_labels[i]);
        out.age_like.push(corpus.age_like[i]);
        out.gender_like.push(corpus.gender_like[i]);
        out.aux_binary.push(corpus.aux_binary[i]);
        out.splits.push(corpus.splits[i]);
    }
    out
}

/// Seeded subsample. Stratified mode allocates per-fine-class counts by
/// largest remainder so class proportions hold within one sample; indices
/// come back in original corpus order.
pub fn split_subset(corpus: &LabeledCorpus, fraction: f64, stratify: bool, seed: u64) -> Result<LabeledCorpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GatError::InvalidArgument(format!("fraction {fraction} outside (0,1]")));
    }
    let n = corpus.len();
    let target = (n as f64 * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize>;
    if stratify {
        let mut per_class: Vec<(u32, Vec<usize>)> = corpus
            .group_map
            .0
            .keys()
            .map(|&f| (f, (0..n).filter(|&i| corpus.fine_labels[i] == f).collect::<Vec<_>>()))
            .collect();
        per_class.retain(|(_, idx)| !idx.is_empty());
        // largest remainder allocation of `target` across classes
        let mut alloc: Vec<(usize, f64)> = per_class
            .iter()
            .map(|(_, idx)| {
                let exact = idx.len() as f64 * fraction;
                (exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut assigned: usize = alloc.iter().map(|a| a.0).sum();
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&a, &b| alloc[b].1.partial_cmp(&alloc[a].1).unwrap().then(a.cmp(&b)));
        for &k in &order {
            if assigned >= target {
                break;
            }
            alloc[k].0 += 1;
            assigned += 1;
        }
        keep = Vec::with_capacity(target);
        for ((f, idx), (count, _)) in per_class.iter().zip(&alloc) {
            if *count == 0 {
                return Err(GatError::Degenerate(format!(
                    "fraction {fraction} leaves fine class {f} empty under stratification"
                )));
            }
            let mut shuffled = idx.clone();
            shuffled.shuffle(&mut rng);
            keep.extend(shuffled.into_iter().take(*count));
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        keep = all.into_iter().take(target).collect();
    }
    keep.sort_unstable();
    Ok(take_indices(corpus, &keep))
}
