//! RGB(-D) corpus to depth QA dataset conversion.
//!
//! Three levels of questions are produced per image:
//!
//! * **low**: depth of sampled pixels;
//! * **mid**: depth description of annotated objects and closer/further
//!   comparisons between points and between objects;
//! * **high**: free-form spatial conversations, emitted as prompt jobs for an
//!   external model rather than generated here.
//!
//! Coordinates are `(x, y)` = `(column, row)`, zero-indexed. Depth answers are
//! integer millimeters with an `mm` suffix.

mod convert;
mod prompts;

pub use convert::{
    convert_dataset, read_manifest, ConvertSummary, DepthFormat, LevelCounts, LevelToggles, PipelineConfig,
    PipelineError, ShardWriter,
};
pub use prompts::{GptTask, SourcePreset, DEPTHMAP_UNDERSTANDING, ROBOT_SCENE, SPATIAL_UNDERSTANDING};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth_codec::{DepthMap, MISSING_DEPTH};
use crate::object_depth::{
    self, compare_proximity, BoundingBox, DepthDescriptor, ObjectDepthError, ObjectMask, Proximity,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    Sensor,
    Mde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    /// Object name or referring description.
    pub name: String,
    pub bbox: BoundingBox,
    /// 8-bit mask PNG or RLE `.json`, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

/// Normalized inverse depth stored in a 16-bit PNG, plus the scene range
/// needed to make it metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeDepthSpec {
    pub d_min_mm: f64,
    pub d_max_mm: f64,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub rgb_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<String>,
    pub depth_source: DepthSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_depth: Option<RelativeDepthSpec>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    /// Existing conversations, copied through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub existing_conversations: Option<Vec<Turn>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gpt_tasks: Vec<GptTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourcePreset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

impl Turn {
    pub fn human(value: impl Into<String>) -> Self {
        Self {
            from: "human".into(),
            value: value.into(),
        }
    }

    pub fn gpt(value: impl Into<String>) -> Self {
        Self {
            from: "gpt".into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Mid,
    High,
    /// Copied-through conversations that are not depth QA.
    General,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub template: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    /// `[rgb, depth]`; depth may be dropped by RGB-only consumers.
    pub image: Vec<String>,
    pub conversations: Vec<Turn>,
    pub level: Level,
    /// Whether a model may answer this record through depth tool calls.
    pub api_allowed: bool,
    pub provenance: Provenance,
}

/// Inputs for the generators: a manifest record with its depth map and any
/// masks already loaded.
#[derive(Debug, Clone)]
pub struct ImageContext {
    pub record: ImageRecord,
    pub depth: DepthMap,
    /// Parallel to `record.annotations`.
    pub masks: Vec<Option<ObjectMask>>,
    /// Image references written into records.
    pub image_refs: Vec<String>,
}

impl ImageContext {
    pub fn new(record: ImageRecord, depth: DepthMap) -> Self {
        let masks = vec![None; record.annotations.len()];
        let image_refs = vec![record.rgb_path.clone()];
        Self {
            record,
            depth,
            masks,
            image_refs,
        }
    }
}

/// Records plus per-item skip reasons `(what, why)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generated {
    pub records: Vec<QaRecord>,
    pub skipped: Vec<(String, String)>,
}

/// Independent per-image random streams, stable across worker counts.
pub fn derive_rng(seed: u64, image_id: &str, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update([0]);
    h.update(image_id.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

fn record(
    ctx: &ImageContext,
    id: String,
    level: Level,
    q: String,
    a: String,
    provenance: Provenance,
) -> QaRecord {
    QaRecord {
        id,
        image: ctx.image_refs.clone(),
        conversations: vec![Turn::human(q), Turn::gpt(a)],
        level,
        api_allowed: false,
        provenance,
    }
}

fn valid_pixels(map: &DepthMap) -> Vec<usize> {
    map.values()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d != MISSING_DEPTH)
        .map(|(i, _)| i)
        .collect()
}

pub fn point_depth_question(x: usize, y: usize) -> String {
    format!("What is the depth value of point ({x}, {y})?")
}

/// `n` distinct pixels with valid depth, sampled uniformly.
pub fn generate_point_depth_qa(ctx: &ImageContext, n: usize, seed: u64) -> Generated {
    let map = &ctx.depth;
    let valid = valid_pixels(map);
    if valid.is_empty() {
        return Generated {
            records: Vec::new(),
            skipped: vec![(ctx.record.image_id.clone(), "no valid depth".into())],
        };
    }
    let mut rng = derive_rng(seed, &ctx.record.image_id, "point");
    let picks = index::sample(&mut rng, valid.len(), n.min(valid.len()));
    let records = picks
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let p = valid[k];
            let (x, y) = (p % map.width(), p / map.width());
            let d = map.values()[p];
            record(
                ctx,
                format!("{}-point-{i}", ctx.record.image_id),
                Level::Low,
                point_depth_question(x, y),
                format!("{d}mm"),
                Provenance {
                    template: "point_depth".into(),
                    seed,
                    annotations: Vec::new(),
                    points: vec![[x, y]],
                },
            )
        })
        .collect();
    Generated {
        records,
        skipped: Vec::new(),
    }
}

/// How an annotated object's depth was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectDepth {
    Descriptor(DepthDescriptor),
    /// Box-only annotations report just the box center.
    Center(u32),
}

impl ObjectDepth {
    pub fn proximity_depth(&self) -> u32 {
        match self {
            ObjectDepth::Descriptor(d) => d.center_mm,
            ObjectDepth::Center(c) => *c,
        }
    }
}

/// Mask path when a mask exists (clamped to the box), box center otherwise.
pub fn resolve_object_depth(
    map: &DepthMap,
    bbox: &BoundingBox,
    mask: Option<&ObjectMask>,
) -> Result<ObjectDepth, ObjectDepthError> {
    match mask {
        Some(mask) => {
            let clamped = object_depth::clamp_mask_to_bbox(mask, bbox)?;
            object_depth::describe_object(map, &clamped).map(ObjectDepth::Descriptor)
        }
        None => object_depth::describe_bbox_center(map, bbox).map(ObjectDepth::Center),
    }
}

fn skip_reason(e: &ObjectDepthError) -> String {
    match e {
        ObjectDepthError::NoValidDepth => "no valid depth".into(),
        ObjectDepthError::EmptyMask => "empty mask".into(),
        other => other.to_string(),
    }
}

pub fn object_depth_qa_text(name: &str, depth: &ObjectDepth) -> (String, String) {
    match depth {
        ObjectDepth::Descriptor(d) => (
            format!("Describe the depth of the {name}."),
            format!(
                "The depth of the {name} ranges from {}mm to {}mm, with a mean of {}mm and a center depth of {}mm.",
                d.min_mm, d.max_mm, d.mean_mm, d.center_mm
            ),
        ),
        ObjectDepth::Center(c) => (
            format!("What is the depth of the {name}?"),
            format!("The center of the {name} is at a depth of {c}mm."),
        ),
    }
}

/// One record per annotation carrying its depth description.
pub fn generate_object_depth_qa(ctx: &ImageContext, seed: u64) -> Generated {
    let mut out = Generated::default();
    for (ann, mask) in ctx.record.annotations.iter().zip(&ctx.masks) {
        match resolve_object_depth(&ctx.depth, &ann.bbox, mask.as_ref()) {
            Ok(depth) => {
                let (q, a) = object_depth_qa_text(&ann.name, &depth);
                let template = match depth {
                    ObjectDepth::Descriptor(_) => "object_depth_descriptor",
                    ObjectDepth::Center(_) => "object_depth_center",
                };
                out.records.push(record(
                    ctx,
                    format!("{}-object-{}", ctx.record.image_id, ann.id),
                    Level::Mid,
                    q,
                    a,
                    Provenance {
                        template: template.into(),
                        seed,
                        annotations: vec![ann.id.clone()],
                        points: Vec::new(),
                    },
                ));
            }
            Err(e) => out.skipped.push((ann.id.clone(), skip_reason(&e))),
        }
    }
    out
}

/// Which side of the comparison the question asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ask {
    Closer,
    Further,
}

impl Ask {
    fn word(self) -> &'static str {
        match self {
            Ask::Closer => "closer",
            Ask::Further => "further",
        }
    }
}

/// Question and answer for "which of `a`, `b` is closer/further", given how
/// `a` relates to `b`. `None` for ties.
pub fn proximity_qa_text(a: &str, b: &str, a_vs_b: Proximity, ask: Ask) -> Option<(String, String)> {
    let a_wins = match (a_vs_b, ask) {
        (Proximity::Tie, _) => return None,
        (Proximity::Closer, Ask::Closer) | (Proximity::Further, Ask::Further) => true,
        _ => false,
    };
    let w = ask.word();
    let winner = if a_wins { a } else { b };
    Some((
        format!("Which is {w} to the camera, {a} or {b}?"),
        format!("{} is {w} to the camera.", capitalize(winner)),
    ))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn point_label(x: usize, y: usize) -> String {
    format!("point ({x}, {y})")
}

pub fn object_label(name: &str) -> String {
    format!("the {name}")
}

/// Proximity settings for [`generate_proximity_qa`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProximityOptions {
    pub point_pairs: usize,
    pub max_object_pairs: usize,
    pub tie_threshold_mm: u32,
}

impl Default for ProximityOptions {
    fn default() -> Self {
        Self {
            point_pairs: 2,
            max_object_pairs: 3,
            tie_threshold_mm: 0,
        }
    }
}

/// Closer/further questions over random point pairs and annotated object
/// pairs. Ties are dropped.
pub fn generate_proximity_qa(ctx: &ImageContext, opts: ProximityOptions, seed: u64) -> Generated {
    let mut out = Generated::default();
    let mut rng = derive_rng(seed, &ctx.record.image_id, "proximity");
    let map = &ctx.depth;
    let id = &ctx.record.image_id;

    let valid = valid_pixels(map);
    if valid.len() >= 2 {
        for i in 0..opts.point_pairs {
            let pick = index::sample(&mut rng, valid.len(), 2);
            let (pa, pb) = (valid[pick.index(0)], valid[pick.index(1)]);
            let (xa, ya) = (pa % map.width(), pa / map.width());
            let (xb, yb) = (pb % map.width(), pb / map.width());
            let ask = if rng.random_bool(0.5) { Ask::Closer } else { Ask::Further };
            let rel = compare_proximity(map.values()[pa], map.values()[pb], opts.tie_threshold_mm)
                .expect("sampled pixels have depth");
            match proximity_qa_text(&point_label(xa, ya), &point_label(xb, yb), rel, ask) {
                Some((q, a)) => out.records.push(record(
                    ctx,
                    format!("{id}-prox-point-{i}"),
                    Level::Mid,
                    q,
                    a,
                    Provenance {
                        template: format!("proximity_point_{}", ask.word()),
                        seed,
                        annotations: Vec::new(),
                        points: vec![[xa, ya], [xb, yb]],
                    },
                )),
                None => out
                    .skipped
                    .push((format!("{id}-prox-point-{i}"), "tie".into())),
            }
        }
    }

    let resolved: Vec<(usize, u32)> = ctx
        .record
        .annotations
        .iter()
        .zip(&ctx.masks)
        .enumerate()
        .filter_map(|(i, (ann, mask))| {
            resolve_object_depth(map, &ann.bbox, mask.as_ref())
                .ok()
                .map(|d| (i, d.proximity_depth()))
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..resolved.len())
        .flat_map(|i| (i + 1..resolved.len()).map(move |j| (i, j)))
        .collect();
    let keep = opts.max_object_pairs.min(pairs.len());
    let chosen = index::sample(&mut rng, pairs.len().max(1), keep);
    let mut chosen: Vec<usize> = chosen.into_iter().collect();
    chosen.sort_unstable();
    pairs = chosen.into_iter().map(|k| pairs[k]).collect();

    for (i, j) in pairs {
        let (ia, da) = resolved[i];
        let (ib, db) = resolved[j];
        let (a, b) = (&ctx.record.annotations[ia], &ctx.record.annotations[ib]);
        let ask = if rng.random_bool(0.5) { Ask::Closer } else { Ask::Further };
        // Randomize which object is named first.
        let (first, second, d1, d2) = if rng.random_bool(0.5) {
            (a, b, da, db)
        } else {
            (b, a, db, da)
        };
        let rel = compare_proximity(d1, d2, opts.tie_threshold_mm).expect("resolved depths are valid");
        let rid = format!("{id}-prox-object-{}-{}", first.id, second.id);
        match proximity_qa_text(&object_label(&first.name), &object_label(&second.name), rel, ask) {
            Some((q, ans)) => out.records.push(record(
                ctx,
                rid,
                Level::Mid,
                q,
                ans,
                Provenance {
                    template: format!("proximity_object_{}", ask.word()),
                    seed,
                    annotations: vec![first.id.clone(), second.id.clone()],
                    points: Vec::new(),
                },
            )),
            None => out.skipped.push((rid, "tie".into())),
        }
    }
    out
}

/// A request for an external model to write a conversation about an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptJob {
    pub id: String,
    pub image_id: String,
    pub task: GptTask,
    pub images: Vec<String>,
    pub prompt: String,
}

pub fn emit_gpt_prompt_job(record: &ImageRecord, image_refs: &[String], task: GptTask) -> PromptJob {
    let images = if task.needs_depth() {
        image_refs.to_vec()
    } else {
        image_refs.iter().take(1).cloned().collect()
    };
    PromptJob {
        id: format!("{}-{}", record.image_id, task.name()),
        image_id: record.image_id.clone(),
        task,
        images,
        prompt: task.prompt().to_owned(),
    }
}

/// Jobs for every record, one per requested task. Task names come from
/// configuration and are checked here.
pub fn emit_gpt_prompt_jobs(records: &[(ImageRecord, Vec<String>)], task: &str) -> Result<Vec<PromptJob>, String> {
    let task: GptTask = task.parse()?;
    Ok(records
        .iter()
        .map(|(r, refs)| emit_gpt_prompt_job(r, refs, task))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, anns: Vec<Annotation>) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            rgb_path: format!("{id}.png"),
            depth_path: None,
            depth_source: DepthSource::Sensor,
            relative_depth: None,
            annotations: anns,
            existing_conversations: None,
            gpt_tasks: Vec::new(),
            source: None,
        }
    }

    fn ann(id: &str, name: &str, bbox: [usize; 4]) -> Annotation {
        Annotation {
            id: id.into(),
            name: name.into(),
            bbox: bbox.into(),
            mask_path: None,
        }
    }

    #[test]
    fn constant_field_points() {
        let ctx = ImageContext::new(rec("c", vec![]), DepthMap::filled(8, 8, 500).unwrap());
        let g = generate_point_depth_qa(&ctx, 3, 7);
        assert_eq!(g.records.len(), 3);
        assert!(g.records.iter().all(|r| r.conversations[1].value == "500mm"));
        assert_eq!(g, generate_point_depth_qa(&ctx, 3, 7));
        assert_ne!(g, generate_point_depth_qa(&ctx, 3, 8));
    }

    #[test]
    fn point_answers_match_map() {
        let m = DepthMap::new(4, 4, (0..16).map(|v| v * 10).collect()).unwrap();
        let ctx = ImageContext::new(rec("r", vec![]), m.clone());
        let g = generate_point_depth_qa(&ctx, 20, 1);
        // 15 valid pixels, pixel (0, 0) is missing.
        assert_eq!(g.records.len(), 15);
        for r in &g.records {
            let [x, y] = r.provenance.points[0];
            let d = object_depth::depth_at_point(&m, x, y).unwrap();
            assert_ne!(d, 0);
            assert_eq!(r.conversations[1].value, format!("{d}mm"));
            assert_eq!(r.conversations[0].value, point_depth_question(x, y));
        }
    }

    #[test]
    fn no_depth_is_skipped() {
        let ctx = ImageContext::new(rec("z", vec![]), DepthMap::filled(2, 2, 0).unwrap());
        let g = generate_point_depth_qa(&ctx, 3, 1);
        assert!(g.records.is_empty());
        assert_eq!(g.skipped.len(), 1);
    }

    #[test]
    fn object_depth_paths() {
        let mut v = vec![300u32; 50];
        v.extend(vec![800u32; 50]);
        let m = DepthMap::new(10, 10, v).unwrap();
        let mut ctx = ImageContext::new(
            rec("o", vec![ann("cup", "cup", [0, 0, 9, 9]), ann("box", "box", [0, 0, 3, 3])]),
            m.clone(),
        );
        ctx.masks[0] = Some(ObjectMask::full(10, 10));
        let g = generate_object_depth_qa(&ctx, 0);
        assert_eq!(g.records.len(), 2);
        let expect = object_depth::describe_object(&m, &ObjectMask::full(10, 10)).unwrap();
        assert_eq!(
            g.records[0].conversations[1].value,
            object_depth_qa_text("cup", &ObjectDepth::Descriptor(expect)).1
        );
        assert!(g.records[0].conversations[1].value.contains("300mm to 800mm"));
        assert_eq!(
            g.records[1].conversations[1].value,
            "The center of the box is at a depth of 300mm."
        );

        let empty = ImageContext::new(rec("e", vec![]), m);
        assert!(generate_object_depth_qa(&empty, 0).records.is_empty());
    }

    #[test]
    fn object_without_depth_is_skipped() {
        let m = DepthMap::new(1, 2, vec![0, 5]).unwrap();
        let ctx = ImageContext::new(rec("s", vec![ann("a", "thing", [0, 0, 0, 0])]), m);
        let g = generate_object_depth_qa(&ctx, 0);
        assert!(g.records.is_empty());
        assert_eq!(g.skipped, vec![("a".to_string(), "no valid depth".to_string())]);
    }

    #[test]
    fn proximity_text_flips() {
        let (q, a) = proximity_qa_text("the mug", "the lamp", Proximity::Closer, Ask::Closer).unwrap();
        assert_eq!(q, "Which is closer to the camera, the mug or the lamp?");
        assert_eq!(a, "The mug is closer to the camera.");
        let (_, a) = proximity_qa_text("the lamp", "the mug", Proximity::Further, Ask::Closer).unwrap();
        assert_eq!(a, "The mug is closer to the camera.");
        let (_, a) = proximity_qa_text("the mug", "the lamp", Proximity::Closer, Ask::Further).unwrap();
        assert_eq!(a, "The lamp is further to the camera.");
        assert!(proximity_qa_text("a", "b", Proximity::Tie, Ask::Closer).is_none());
    }

    #[test]
    fn object_proximity_labels_nearer_object() {
        // Left half 500 mm, right half 800 mm.
        let v: Vec<u32> = (0..16).map(|i| if i % 4 < 2 { 500 } else { 800 }).collect();
        let m = DepthMap::new(4, 4, v).unwrap();
        let ctx = ImageContext::new(
            rec("p", vec![ann("near", "mug", [0, 0, 1, 3]), ann("far", "lamp", [2, 0, 3, 3])]),
            m,
        );
        let opts = ProximityOptions {
            point_pairs: 0,
            ..Default::default()
        };
        for seed in 0..16 {
            let g = generate_proximity_qa(&ctx, opts, seed);
            assert_eq!(g.records.len(), 1);
            let r = &g.records[0];
            let answer = &r.conversations[1].value;
            if r.provenance.template.ends_with("closer") {
                assert_eq!(answer, "The mug is closer to the camera.");
            } else {
                assert_eq!(answer, "The lamp is further to the camera.");
            }
        }
    }

    #[test]
    fn single_annotation_no_depth_variation() {
        let ctx = ImageContext::new(
            rec("q", vec![ann("a", "mug", [0, 0, 0, 0])]),
            DepthMap::new(1, 1, vec![0]).unwrap(),
        );
        let g = generate_proximity_qa(&ctx, ProximityOptions::default(), 3);
        assert!(g.records.is_empty());
    }

    #[test]
    fn ties_are_dropped() {
        let ctx = ImageContext::new(rec("t", vec![]), DepthMap::filled(3, 3, 400).unwrap());
        let g = generate_proximity_qa(&ctx, ProximityOptions::default(), 3);
        assert!(g.records.is_empty());
        assert_eq!(g.skipped.len(), 2);
    }

    #[test]
    fn prompt_jobs() {
        let r = rec("j", vec![]);
        let refs = vec!["j.png".to_string(), "depth/j.png".to_string()];
        let jobs = emit_gpt_prompt_jobs(&[(r.clone(), refs.clone())], "spatial_understanding").unwrap();
        assert_eq!(jobs.len(), 1);
        assert!(jobs[0].prompt.starts_with(
            "Design a conversation, consisting of no more than 3 Question-Answer pairs"
        ));
        assert_eq!(jobs[0].images, vec!["j.png".to_string()]);
        let d = emit_gpt_prompt_job(&r, &refs, GptTask::DepthmapUnderstanding);
        assert!(d.prompt.contains("Do not directly mention colors"));
        assert_eq!(d.images.len(), 2);
        assert!(emit_gpt_prompt_jobs(&[], "robot_scene").unwrap().is_empty());
        assert!(emit_gpt_prompt_jobs(&[], "sonnets").is_err());
    }
}
