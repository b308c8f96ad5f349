//! MOTChallenge text files, embedding sidecars and synthetic scenarios.
//!
//! Detection rows follow the MOTChallenge layout
//! `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z` with 1-based frames.
//! Embedding sidecars are little-endian: two `u64` header words (row count,
//! dimension) followed by `rows * dim` `f32` values in detection-file order.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Detection, Tracklet};

/// Detections of a clip grouped by frame.
///
/// Detections are stored in a canonical order (frame, then box, confidence,
/// identity and embedding), so the index of a detection does not depend on
/// the order rows were supplied in.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    detections: Vec<Detection>,
    n_frames: u32,
    has_gt: bool,
    dim: usize,
    // frame_starts[t]..frame_starts[t + 1] indexes frame t.
    frame_starts: Vec<usize>,
}

impl DetectionSet {
    /// Validates and indexes detections. `n_frames` is raised to cover the
    /// last detection when needed.
    pub fn new(mut detections: Vec<Detection>, n_frames: u32, dim: usize) -> Result<Self> {
        for d in &detections {
            d.validate(dim)?;
        }
        detections.sort_by(canonical_order);
        let n_frames = detections
            .last()
            .map_or(n_frames, |d| n_frames.max(d.frame + 1));
        let has_gt = detections.iter().any(|d| d.gt_id.is_some());
        let mut frame_starts = Vec::with_capacity(n_frames as usize + 1);
        let mut cursor = 0;
        for t in 0..=n_frames {
            while cursor < detections.len() && detections[cursor].frame < t {
                cursor += 1;
            }
            frame_starts.push(cursor);
        }
        Ok(Self {
            detections,
            n_frames,
            has_gt,
            dim,
            frame_starts,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            detections: Vec::new(),
            n_frames: 0,
            has_gt: false,
            dim,
            frame_starts: vec![0],
        }
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn get(&self, i: usize) -> &Detection {
        &self.detections[i]
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn n_frames(&self) -> u32 {
        self.n_frames
    }

    pub fn has_gt(&self) -> bool {
        self.has_gt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index range of the detections in frame `t`.
    pub fn frame_range(&self, t: u32) -> Range<usize> {
        if t >= self.n_frames {
            return self.detections.len()..self.detections.len();
        }
        self.frame_starts[t as usize]..self.frame_starts[t as usize + 1]
    }

    pub fn frame(&self, t: u32) -> &[Detection] {
        &self.detections[self.frame_range(t)]
    }

    /// Detections with frames in `frames`, re-based so the first frame is 0,
    /// together with each detection's index in `self`.
    pub fn subset(&self, frames: Range<u32>) -> (DetectionSet, Vec<usize>) {
        let lo = frames.start.min(self.n_frames);
        let hi = frames.end.min(self.n_frames);
        if lo >= hi {
            return (DetectionSet::empty(self.dim), Vec::new());
        }
        let range = self.frame_starts[lo as usize]..self.frame_starts[hi as usize];
        let detections: Vec<Detection> = self.detections[range.clone()]
            .iter()
            .map(|d| Detection {
                frame: d.frame - lo,
                ..d.clone()
            })
            .collect();
        let has_gt = detections.iter().any(|d| d.gt_id.is_some());
        let n_frames = hi - lo;
        let mut frame_starts = Vec::with_capacity(n_frames as usize + 1);
        for t in lo..=hi {
            frame_starts.push(self.frame_starts[t as usize] - range.start);
        }
        let set = DetectionSet {
            detections,
            n_frames,
            has_gt,
            dim: self.dim,
            frame_starts,
        };
        (set, range.collect())
    }

    /// Ground-truth identity of every detection, or an error if any is missing.
    pub fn gt_ids(&self) -> Result<Vec<u32>> {
        self.detections
            .iter()
            .map(|d| d.gt_id.ok_or(Error::MissingGroundTruth))
            .collect()
    }

    /// Groups detection indices by ground-truth id, ordered by id; members are
    /// in frame order.
    pub fn gt_tracks(&self) -> Result<Vec<(u32, Vec<usize>)>> {
        let ids = self.gt_ids()?;
        let mut tracks: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, id) in ids.into_iter().enumerate() {
            tracks.entry(id).or_default().push(i);
        }
        Ok(tracks.into_iter().collect())
    }
}

fn canonical_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    a.frame
        .cmp(&b.frame)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.confidence.total_cmp(&b.confidence))
        .then(a.gt_id.cmp(&b.gt_id))
        .then_with(|| {
            a.embedding
                .iter()
                .zip(&b.embedding)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// One parsed MOTChallenge row, frames already 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRow {
    pub frame: u32,
    pub id: Option<u32>,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

fn parse_int(field: &str, line: usize, what: &str) -> Result<i64> {
    let field = field.trim();
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
        _ => Err(Error::Parse {
            line,
            msg: format!("bad {what} `{field}`"),
        }),
    }
}

fn parse_float(field: &str, line: usize, what: &str) -> Result<f64> {
    let field = field.trim();
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("bad {what} `{field}`"),
        })
}

/// Parses MOTChallenge rows; blank lines are skipped, line numbers are 1-based.
pub fn parse_mot_rows(text: &str) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() < 7 {
            return Err(Error::Parse {
                line,
                msg: format!("expected at least 7 fields, found {}", fields.len()),
            });
        }
        let frame = parse_int(fields[0], line, "frame")?;
        if frame < 1 || frame > u32::MAX as i64 {
            return Err(Error::Parse {
                line,
                msg: format!("frame {frame} out of range (frames are 1-based)"),
            });
        }
        let id = parse_int(fields[1], line, "id")?;
        let id = if id >= 0 {
            Some(u32::try_from(id).map_err(|_| Error::Parse {
                line,
                msg: format!("id {id} out of range"),
            })?)
        } else {
            None
        };
        let x = parse_float(fields[2], line, "bb_left")?;
        let y = parse_float(fields[3], line, "bb_top")?;
        let w = parse_float(fields[4], line, "bb_width")?;
        let h = parse_float(fields[5], line, "bb_height")?;
        let confidence = parse_float(fields[6], line, "conf")?;
        let bbox = BoundingBox::new(x, y, w, h).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {line}: {msg}")),
            other => other,
        })?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Validation(format!(
                "line {line}: confidence {confidence} outside [0, 1]"
            )));
        }
        rows.push(MotRow {
            frame: (frame - 1) as u32,
            id,
            bbox,
            confidence,
        });
    }
    Ok(rows)
}

/// Builds a detection set from parsed rows. Embeddings, when supplied, must
/// match the rows one to one; otherwise pseudo-embeddings are derived from
/// `(frame, box)`.
pub fn detections_from_rows(
    rows: Vec<MotRow>,
    embeddings: Option<Vec<Vec<f64>>>,
    dim: usize,
) -> Result<DetectionSet> {
    if let Some(e) = &embeddings {
        if e.len() != rows.len() {
            return Err(Error::Length {
                expected: rows.len(),
                got: e.len(),
            });
        }
    }
    let mut embeddings = embeddings.map(|e| e.into_iter());
    let detections = rows
        .into_iter()
        .map(|r| {
            let embedding = match embeddings.as_mut() {
                Some(it) => it.next().expect("length checked"),
                None => pseudo_embedding(r.frame, &r.bbox, dim),
            };
            Detection {
                frame: r.frame,
                bbox: r.bbox,
                confidence: r.confidence,
                embedding,
                gt_id: r.id,
            }
        })
        .collect();
    DetectionSet::new(detections, 0, dim)
}

/// Reads a MOTChallenge detection file and an optional embedding sidecar.
pub fn parse_mot(det_path: &Path, embed_path: Option<&Path>, dim: usize) -> Result<DetectionSet> {
    let text = fs::read_to_string(det_path)?;
    let rows = parse_mot_rows(&text)?;
    let embeddings = match embed_path {
        Some(p) => {
            let (emb, d) = read_embeddings(p)?;
            if d != dim {
                return Err(Error::Length {
                    expected: dim,
                    got: d,
                });
            }
            Some(emb)
        }
        None => None,
    };
    detections_from_rows(rows, embeddings, dim)
}

/// Deterministic unit vector derived from a detection's frame and box.
///
/// Carries no identity information; it only keeps the pipeline runnable on
/// files without an embedding sidecar.
pub fn pseudo_embedding(frame: u32, bbox: &BoundingBox, dim: usize) -> Vec<f64> {
    let mut h = splitmix64(frame as u64 ^ 0x9e37_79b9_7f4a_7c15);
    for v in [bbox.x, bbox.y, bbox.w, bbox.h] {
        h = splitmix64(h ^ v.to_bits());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    random_unit_vector(&mut rng, dim)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Reads an embedding sidecar, returning rows and dimension.
pub fn read_embeddings(path: &Path) -> Result<(Vec<Vec<f64>>, usize)> {
    decode_embeddings(&fs::read(path)?)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(Vec<Vec<f64>>, usize)> {
    if bytes.len() < 16 {
        return Err(Error::Length {
            expected: 16,
            got: bytes.len(),
        });
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Validation("embedding header overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            got: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let out = if dim == 0 {
        vec![Vec::new(); rows]
    } else {
        values.chunks_exact(dim).map(|r| r.to_vec()).collect()
    };
    Ok((out, dim))
}

pub fn encode_embeddings<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Vec<u8> {
    let n = rows.len();
    let mut out = Vec::with_capacity(16 + n * dim * 4);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes embeddings of `set` in storage order.
pub fn write_embeddings(set: &DetectionSet, path: &Path) -> Result<()> {
    let bytes = encode_embeddings(
        set.detections().iter().map(|d| d.embedding.as_slice()),
        set.dim(),
    );
    fs::write(path, bytes)?;
    Ok(())
}

fn push_row(out: &mut String, frame: u32, id: i64, b: &BoundingBox, conf: f64) {
    use std::fmt::Write as _;
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},-1,-1,-1",
        frame + 1,
        id,
        b.x,
        b.y,
        b.w,
        b.h,
        conf
    );
}

/// MOTChallenge text for tracker output, sorted by (frame, id).
pub fn format_mot(tracks: &[Tracklet]) -> String {
    let mut rows: Vec<(u32, u64, &Detection)> = tracks
        .iter()
        .flat_map(|t| t.detections().iter().map(move |d| (d.frame, t.id(), d)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::new();
    for (frame, id, d) in rows {
        push_row(&mut out, frame, id as i64, &d.bbox, d.confidence);
    }
    out
}

pub fn write_mot(tracks: &[Tracklet], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(format_mot(tracks).as_bytes())?;
    w.flush()?;
    Ok(())
}

/// MOTChallenge text for a detection set in storage order; identities are
/// written when `with_ids` is set, `-1` otherwise.
pub fn format_detections(set: &DetectionSet, with_ids: bool) -> String {
    let mut out = String::new();
    for d in set.detections() {
        let id = match (with_ids, d.gt_id) {
            (true, Some(id)) => id as i64,
            _ => -1,
        };
        push_row(&mut out, d.frame, id, &d.bbox, d.confidence);
    }
    out
}

pub fn write_detections(set: &DetectionSet, path: &Path, with_ids: bool) -> Result<()> {
    fs::write(path, format_detections(set, with_ids))?;
    Ok(())
}

/// Parameters of a synthetic tracking scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub n_objects: usize,
    pub n_frames: u32,
    pub arena: (f64, f64),
    /// Maximum speed in pixels per frame.
    pub speed: f64,
    /// Per-frame probability that an object picks a new heading.
    pub turn_prob: f64,
    /// Per-object `(start, duration)` frames with no detections.
    pub occlusions: Vec<Vec<(u32, u32)>>,
    pub miss_rate: f64,
    pub embedding_noise_sigma: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_objects: 10,
            n_frames: 200,
            arena: (1920.0, 1080.0),
            speed: 6.0,
            turn_prob: 0.0,
            occlusions: Vec::new(),
            miss_rate: 0.0,
            embedding_noise_sigma: 0.0,
            dim: crate::model::DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

const MIN_BOX_W: f64 = 20.0;
const MAX_BOX_W: f64 = 50.0;
const MAX_ASPECT: f64 = 2.5;

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.n_objects < 1 {
            return bad("n_objects must be at least 1".into());
        }
        if self.n_frames < 2 {
            return bad(format!("n_frames must be at least 2, got {}", self.n_frames));
        }
        for (name, p) in [("miss_rate", self.miss_rate), ("turn_prob", self.turn_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.embedding_noise_sigma >= 0.0 && self.embedding_noise_sigma.is_finite()) {
            return bad(format!(
                "embedding_noise_sigma {} must be finite and non-negative",
                self.embedding_noise_sigma
            ));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return bad(format!("speed {} must be finite and non-negative", self.speed));
        }
        if self.dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(self.arena.0 > MAX_BOX_W && self.arena.1 > MAX_BOX_W * MAX_ASPECT) {
            return bad(format!(
                "arena {:?} too small for {}x{} boxes",
                self.arena,
                MAX_BOX_W,
                MAX_BOX_W * MAX_ASPECT
            ));
        }
        if self.occlusions.len() > self.n_objects {
            return bad("more occlusion lists than objects".into());
        }
        for (obj, gaps) in self.occlusions.iter().enumerate() {
            for &(start, duration) in gaps {
                if duration >= self.n_frames {
                    return bad(format!(
                        "object {obj}: occlusion duration {duration} must be below n_frames {}",
                        self.n_frames
                    ));
                }
                if start >= self.n_frames {
                    return bad(format!("object {obj}: occlusion start {start} out of range"));
                }
            }
        }
        Ok(())
    }

    fn occluded(&self, obj: usize, frame: u32) -> bool {
        self.occlusions.get(obj).is_some_and(|gaps| {
            gaps.iter()
                .any(|&(s, d)| frame >= s && (frame as u64) < s as u64 + d as u64)
        })
    }

    /// Adds `per_object` random occlusion gaps of 1..=`max_len` frames to
    /// every object.
    pub fn with_random_occlusions(mut self, per_object: usize, max_len: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_len = max_len.max(1).min(self.n_frames.saturating_sub(1).max(1));
        self.occlusions = (0..self.n_objects)
            .map(|_| {
                (0..per_object)
                    .map(|_| {
                        let len = rng.random_range(1..=max_len);
                        let start = rng.random_range(1..self.n_frames.max(2));
                        (start, len)
                    })
                    .collect()
            })
            .collect();
        self
    }
}

/// Detections plus the complete ground truth they were sampled from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub detections: DetectionSet,
    /// Every true box of every object in every frame.
    pub truth: DetectionSet,
}

/// Simulates a scenario and returns the surviving detections.
pub fn synthesize(spec: &ScenarioSpec) -> Result<DetectionSet> {
    Ok(synthesize_scenario(spec)?.detections)
}

/// Simulates a scenario, returning detections and complete ground truth.
pub fn synthesize_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (aw, ah) = spec.arena;
    let noise = Normal::new(0.0, spec.embedding_noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Validation(e.to_string()))?;

    struct Object {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        vx: f64,
        vy: f64,
        anchor: Vec<f64>,
    }
    let mut objects: Vec<Object> = (0..spec.n_objects)
        .map(|_| {
            let w = rng.random_range(MIN_BOX_W..MAX_BOX_W);
            let h = w * rng.random_range(1.8..MAX_ASPECT);
            let x = rng.random_range(0.0..aw - w);
            let y = rng.random_range(0.0..ah - h);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = spec.speed * rng.random_range(0.3..1.0);
            Object {
                x,
                y,
                w,
                h,
                vx: speed * heading.cos(),
                vy: speed * heading.sin(),
                anchor: random_unit_vector(&mut rng, spec.dim),
            }
        })
        .collect();

    let mut detections = Vec::new();
    let mut truth = Vec::new();
    for frame in 0..spec.n_frames {
        for (obj, o) in objects.iter_mut().enumerate() {
            if frame > 0 {
                if spec.turn_prob > 0.0 && rng.random::<f64>() < spec.turn_prob {
                    let speed = (o.vx * o.vx + o.vy * o.vy).sqrt();
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    o.vx = speed * heading.cos();
                    o.vy = speed * heading.sin();
                }
                o.x += o.vx;
                o.y += o.vy;
                if o.x < 0.0 || o.x + o.w > aw {
                    o.vx = -o.vx;
                    o.x = o.x.clamp(0.0, aw - o.w);
                }
                if o.y < 0.0 || o.y + o.h > ah {
                    o.vy = -o.vy;
                    o.y = o.y.clamp(0.0, ah - o.h);
                }
            }
            let bbox = BoundingBox::new(o.x, o.y, o.w, o.h)?;
            let gt_id = Some(obj as u32 + 1);
            truth.push(Detection {
                frame,
                bbox,
                confidence: 1.0,
                embedding: o.anchor.clone(),
                gt_id,
            });
            // Draws happen unconditionally so the stream does not depend on
            // which detections survive.
            let missed = rng.random::<f64>() < spec.miss_rate;
            let confidence = rng.random_range(0.5..=1.0);
            let embedding = if spec.embedding_noise_sigma > 0.0 {
                let noisy: Vec<f64> = o.anchor.iter().map(|a| a + noise.sample(&mut rng)).collect();
                let norm = noisy.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    noisy.into_iter().map(|x| x / norm).collect()
                } else {
                    o.anchor.clone()
                }
            } else {
                o.anchor.clone()
            };
            if missed || spec.occluded(obj, frame) {
                continue;
            }
            detections.push(Detection {
                frame,
                bbox,
                confidence,
                embedding,
                gt_id,
            });
        }
    }
    Ok(Scenario {
        detections: DetectionSet::new(detections, spec.n_frames, spec.dim)?,
        truth: DetectionSet::new(truth, spec.n_frames, spec.dim)?,
    })
}
