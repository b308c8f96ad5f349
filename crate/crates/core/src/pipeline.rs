//! End-to-end wiring: affinity, graph construction, scoring, aggregation
//! and clip stitching; plus labeled graphs for training.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affinity::{accumulate_affinity, AffinityScorer, WindowPlan};
use crate::error::{Error, Result};
use crate::graph::{associate_frames, build_part_graph, edge_labels, Association, BuilderConfig};
use crate::ingest::DetectionSet;
use crate::metrics::{graph_stats, GraphStats};
use crate::model::TrackGraph;
use crate::mpn::{GraphInput, LabeledGraph, TrainingSample};
use crate::par;
use crate::solver::{aggregate, group_graph, AggregateConfig, EdgeScorer};
use crate::stitch::{run_clipped, ClipPlan, ClippedRun};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineConfig {
    pub window: WindowPlan,
    pub builder: BuilderConfig,
    pub aggregate: AggregateConfig,
    pub clips: ClipPlan,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.builder.validate()?;
        self.aggregate.validate()?;
        self.clips.validate()?;
        if self.clips.clip_len > self.window.clip_len {
            return Err(Error::Validation(format!(
                "tracking clips of {} frames exceed the affinity limit of {}",
                self.clips.clip_len, self.window.clip_len
            )));
        }
        Ok(())
    }
}

/// Affinity, frame association and the partial graph of one clip.
pub fn build_clip_graph(
    dets: &DetectionSet,
    cfg: &PipelineConfig,
    affinity: &dyn AffinityScorer,
) -> Result<(TrackGraph, Association)> {
    let m = accumulate_affinity(dets, &cfg.window, affinity)?;
    let assoc = associate_frames(dets, &m, &cfg.builder)?;
    let g = build_part_graph(&assoc, dets, &cfg.builder)?;
    Ok((g, assoc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub run: ClippedRun,
    /// Summed over clips.
    pub stats: GraphStats,
    pub clips: usize,
}

/// Tracks a whole sequence clip by clip and stitches the clips.
pub fn track(
    dets: &DetectionSet,
    cfg: &PipelineConfig,
    affinity: &dyn AffinityScorer,
    scorer: &dyn EdgeScorer,
) -> Result<TrackOutput> {
    cfg.validate()?;
    let stats = Mutex::new((GraphStats::default(), 0usize));
    let run = run_clipped(dets, &cfg.clips, |clip| {
        let (g, _) = build_clip_graph(clip, cfg, affinity)?;
        let agg = aggregate(&g, clip, scorer, &cfg.aggregate)?;
        let mut s = stats.lock().expect("stats lock");
        s.0.absorb(&graph_stats(&g));
        s.1 += 1;
        Ok(agg.ids)
    })?;
    let (stats, clips) = stats.into_inner().expect("stats lock");
    Ok(TrackOutput { run, stats, clips })
}

fn labeled(g: &TrackGraph, dets: &DetectionSet) -> Result<Option<LabeledGraph>> {
    if g.edges().is_empty() {
        return Ok(None);
    }
    Ok(Some(LabeledGraph {
        input: GraphInput::from_graph(g)?,
        labels: edge_labels(g, dets)?,
    }))
}

/// How a labeled sequence is cut into training graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplePlan {
    /// Frames per first-pass graph; windows do not overlap.
    pub clip_len: u32,
    /// Frames behind each trajectory-level graph, starting with its
    /// first-pass window.
    pub traj_clip_len: u32,
    /// Pieces every tracker track is cut into for the trajectory graph.
    pub pieces: usize,
    /// Each cut drops up to this many detections, so merges across
    /// occlusion-like gaps are represented.
    pub max_gap: usize,
    pub seed: u64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            clip_len: 32,
            traj_clip_len: 256,
            pieces: 4,
            max_gap: 16,
            seed: 0,
        }
    }
}

impl SamplePlan {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 2 || self.traj_clip_len < 2 {
            return Err(Error::Validation(format!(
                "training clips need at least 2 frames, got {} and {}",
                self.clip_len, self.traj_clip_len
            )));
        }
        if self.pieces == 0 {
            return Err(Error::Validation("tracks must be cut into at least one piece".into()));
        }
        Ok(())
    }
}

/// Cuts every track into `plan.pieces` fragments, dropping a random run of
/// detections at each cut. Returns the surviving detections and the
/// fragments re-indexed into them.
fn fragment(
    dets: &DetectionSet,
    tracks: &[Vec<usize>],
    plan: &SamplePlan,
    rng: &mut ChaCha8Rng,
) -> Result<(DetectionSet, Vec<Vec<usize>>)> {
    let mut keep = vec![true; dets.len()];
    let mut pieces = Vec::new();
    for t in tracks {
        let size = t.len().div_ceil(plan.pieces);
        for (p, chunk) in t.chunks(size).enumerate() {
            let drop = if p == 0 {
                0
            } else {
                rng.random_range(0..=plan.max_gap.min(chunk.len() - 1))
            };
            chunk[..drop].iter().for_each(|&i| keep[i] = false);
            pieces.push(&chunk[drop..]);
        }
    }
    let mut remap = vec![usize::MAX; dets.len()];
    let mut kept = Vec::new();
    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        remap[i] = kept.len();
        kept.push(dets.get(i).clone());
    }
    let cut = DetectionSet::new(kept, dets.n_frames(), dets.dim())?;
    let fragments = pieces
        .into_iter()
        .map(|p| p.iter().map(|&i| remap[i]).collect())
        .collect();
    Ok((cut, fragments))
}

/// Labeled training graphs. Every `clip_len` window yields the partial
/// graph of that window, paired with a trajectory-level graph over the
/// `traj_clip_len` frames from the same start: its tracker tracks are cut
/// into `pieces` fragments, which the second pass should learn to merge.
/// Windows without edges are skipped.
pub fn training_samples(
    dets: &DetectionSet,
    cfg: &PipelineConfig,
    affinity: &dyn AffinityScorer,
    plan: &SamplePlan,
) -> Result<Vec<TrainingSample>> {
    plan.validate()?;
    if !dets.has_gt() {
        return Err(Error::MissingGroundTruth);
    }
    let starts: Vec<u32> = (0..dets.n_frames()).step_by(plan.clip_len as usize).collect();
    let samples = par::try_map(&starts, |&s| -> Result<Option<TrainingSample>> {
        let (clip, _) = dets.subset(s..s.saturating_add(plan.clip_len));
        if clip.is_empty() {
            return Ok(None);
        }
        let (g, _) = build_clip_graph(&clip, cfg, affinity)?;
        let Some(first) = labeled(&g, &clip)? else {
            return Ok(None);
        };
        let (long, _) = dets.subset(s..s.saturating_add(plan.traj_clip_len));
        let m = accumulate_affinity(&long, &cfg.window, affinity)?;
        let assoc = associate_frames(&long, &m, &cfg.builder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ u64::from(s));
        let (cut, fragments) = fragment(&long, &assoc.tracks, plan, &mut rng)?;
        let second = labeled(&group_graph(&fragments, &cut)?, &cut)?;
        Ok(Some(TrainingSample { first, second }))
    })?;
    Ok(samples.into_iter().flatten().collect())
}
