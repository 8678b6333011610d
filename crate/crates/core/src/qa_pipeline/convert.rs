use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    derive_rng, emit_gpt_prompt_job, generate_object_depth_qa, generate_point_depth_qa,
    generate_proximity_qa, DepthSource, GptTask, ImageContext, ImageRecord, Level, PromptJob,
    ProximityOptions, Provenance, QaRecord,
};
use crate::depth_codec::{encode_map, RelativeDepthParams};
use crate::object_depth::ObjectMask;
use crate::par::{self, Execution};
use crate::raster::{self, RasterError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFormat {
    /// Three-channel encoded PNG.
    Png,
    /// `SBD1` uint24 container.
    U24,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelToggles {
    pub low: bool,
    pub mid: bool,
    pub high: bool,
}

impl Default for LevelToggles {
    fn default() -> Self {
        Self {
            low: true,
            mid: true,
            high: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Point-depth questions per image.
    pub point_qas: usize,
    pub proximity_point_pairs: usize,
    pub max_object_pairs: usize,
    pub tie_threshold_mm: u32,
    /// Fraction of records on which depth tool calls are allowed.
    pub api_fraction: f64,
    /// Records per JSONL shard.
    pub shard_size: usize,
    pub depth_format: DepthFormat,
    pub levels: LevelToggles,
    /// Prompt tasks for images that name neither tasks nor a source preset.
    pub default_gpt_tasks: Vec<GptTask>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            point_qas: 3,
            proximity_point_pairs: 2,
            max_object_pairs: 3,
            tie_threshold_mm: 0,
            api_fraction: 0.5,
            shard_size: 1000,
            depth_format: DepthFormat::Png,
            levels: LevelToggles::default(),
            default_gpt_tasks: vec![GptTask::SpatialUnderstanding],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.api_fraction) {
            return Err(PipelineError::Config(format!(
                "api_fraction {} outside [0, 1]",
                self.api_fraction
            )));
        }
        if self.shard_size == 0 {
            return Err(PipelineError::Config("shard_size must be positive".into()));
        }
        Ok(())
    }
}

fn valid_image_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

/// Parses a JSONL manifest. Any malformed line aborts the whole run.
pub fn read_manifest(text: &str) -> Result<Vec<ImageRecord>, PipelineError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PipelineError::Manifest {
            line: i + 1,
            message,
        };
        let rec: ImageRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if !valid_image_id(&rec.image_id) {
            return Err(bad(format!("invalid image_id {:?}", rec.image_id)));
        }
        if !ids.insert(rec.image_id.clone()) {
            return Err(bad(format!("duplicate image_id {:?}", rec.image_id)));
        }
        let mut ann_ids = HashSet::new();
        for a in &rec.annotations {
            if !ann_ids.insert(a.id.as_str()) {
                return Err(bad(format!("duplicate annotation id {:?}", a.id)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub low: usize,
    pub mid: usize,
    pub high: usize,
    pub general: usize,
}

impl LevelCounts {
    pub fn total(&self) -> usize {
        self.low + self.mid + self.high + self.general
    }

    fn add(&mut self, level: Level) {
        match level {
            Level::Low => self.low += 1,
            Level::Mid => self.mid += 1,
            Level::High => self.high += 1,
            Level::General => self.general += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvertSummary {
    pub seed: u64,
    pub images_total: usize,
    pub images_converted: usize,
    /// Image-level skip reasons.
    pub skipped_images: BTreeMap<String, usize>,
    /// QA records per level; `high` counts prompt jobs.
    pub records: LevelCounts,
    pub total_records: usize,
    pub prompt_jobs: usize,
    /// Item-level skips (annotations, tied pairs).
    pub skipped_items: BTreeMap<String, usize>,
    pub saturated_pixels: usize,
    pub shards: Vec<String>,
}

/// Writes records into numbered JSONL shards of at most `shard_size` lines.
pub struct ShardWriter {
    dir: PathBuf,
    shard_size: usize,
    current: Option<BufWriter<File>>,
    in_current: usize,
    names: Vec<String>,
}

impl ShardWriter {
    pub fn new(dir: impl Into<PathBuf>, shard_size: usize) -> Self {
        Self {
            dir: dir.into(),
            shard_size,
            current: None,
            in_current: 0,
            names: Vec::new(),
        }
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<(), PipelineError> {
        if self.current.is_none() || self.in_current == self.shard_size {
            self.finish_current()?;
            let name = format!("shard-{:05}.jsonl", self.names.len());
            let path = self.dir.join(&name);
            self.current = Some(BufWriter::new(File::create(&path).map_err(io_err(&path))?));
            self.names.push(name);
            self.in_current = 0;
        }
        let w = self.current.as_mut().expect("open shard");
        let mut line = serde_json::to_vec(item).expect("records serialize");
        line.push(b'\n');
        w.write_all(&line).map_err(io_err(&self.dir))?;
        self.in_current += 1;
        Ok(())
    }

    fn finish_current(&mut self) -> Result<(), PipelineError> {
        if let Some(mut w) = self.current.take() {
            w.flush().map_err(io_err(&self.dir))?;
        }
        Ok(())
    }

    /// Flushes and returns shard file names in order.
    pub fn finish(mut self) -> Result<Vec<String>, PipelineError> {
        self.finish_current()?;
        Ok(self.names)
    }
}

struct ImageOutcome {
    records: Vec<QaRecord>,
    jobs: Vec<PromptJob>,
    skipped_items: Vec<(String, String)>,
    saturated: usize,
}

/// Loaded inputs, saturated pixel count and per-annotation skips.
type Loaded = (ImageContext, usize, Vec<(String, String)>);

fn load_context(rec: &ImageRecord, base: &Path, depth_ref: &str) -> Result<Loaded, String> {
    let (w, h) = raster::image_dimensions(&base.join(&rec.rgb_path))
        .map_err(|_| "unreadable image".to_string())?;
    let Some(depth_path) = &rec.depth_path else {
        return Err("missing depth".into());
    };
    let depth_path = base.join(depth_path);
    if !depth_path.is_file() {
        return Err("missing depth".into());
    }
    let (depth, saturated) = match rec.relative_depth {
        Some(spec) => {
            let params = RelativeDepthParams::new(spec.d_min_mm, spec.d_max_mm)
                .map_err(|e| format!("invalid relative depth range: {e}"))?;
            raster::read_relative_png(&depth_path, params).map_err(|_| "unreadable depth".to_string())?
        }
        None => (
            raster::read_depth(&depth_path).map_err(|_| "unreadable depth".to_string())?,
            0,
        ),
    };
    if (depth.width(), depth.height()) != (w, h) {
        return Err("depth size mismatch".into());
    }
    if rec.annotations.iter().any(|a| a.bbox.validate(w, h).is_err()) {
        return Err("invalid annotation".into());
    }

    let mut skipped = Vec::new();
    let masks: Vec<Option<ObjectMask>> = rec
        .annotations
        .iter()
        .map(|a| {
            let path = a.mask_path.as_ref()?;
            match raster::read_mask(&base.join(path)) {
                Ok(m) if (m.width(), m.height()) == (w, h) => Some(m),
                Ok(_) => {
                    skipped.push((a.id.clone(), "mask size mismatch".into()));
                    None
                }
                Err(_) => {
                    skipped.push((a.id.clone(), "unreadable mask".into()));
                    None
                }
            }
        })
        .collect();
    // Annotations whose mask was named but unusable are dropped rather than
    // silently downgraded to the box-center path.
    let mut record = rec.clone();
    let mut kept_masks = Vec::new();
    let mut kept = Vec::new();
    for (a, m) in rec.annotations.iter().zip(masks) {
        if a.mask_path.is_some() && m.is_none() {
            continue;
        }
        kept.push(a.clone());
        kept_masks.push(m);
    }
    record.annotations = kept;
    let ctx = ImageContext {
        record,
        depth,
        masks: kept_masks,
        image_refs: vec![rec.rgb_path.clone(), depth_ref.to_owned()],
    };
    Ok((ctx, saturated, skipped))
}

fn gpt_tasks_for(rec: &ImageRecord, config: &PipelineConfig) -> Vec<GptTask> {
    if !rec.gpt_tasks.is_empty() {
        let mut t = rec.gpt_tasks.clone();
        t.sort();
        t.dedup();
        t
    } else if let Some(preset) = rec.source {
        vec![preset.gpt_task()]
    } else {
        config.default_gpt_tasks.clone()
    }
}

fn process_image(
    rec: &ImageRecord,
    base: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    seed: u64,
) -> Result<ImageOutcome, String> {
    let depth_name = match config.depth_format {
        DepthFormat::Png => format!("{}.png", rec.image_id),
        DepthFormat::U24 => format!("{}.sbd", rec.image_id),
    };
    let depth_ref = format!("depth/{depth_name}");
    let (ctx, saturated, mut skipped_items) = load_context(rec, base, &depth_ref)?;
    if rec.depth_source == DepthSource::Mde && rec.relative_depth.is_none() {
        log::debug!("{}: using estimated metric depth as provided", rec.image_id);
    }

    let depth_path = out_dir.join("depth").join(&depth_name);
    let written = match config.depth_format {
        DepthFormat::Png => raster::write_encoded_png(&depth_path, &encode_map(&ctx.depth)),
        DepthFormat::U24 => raster::write_sbd1(&depth_path, &ctx.depth),
    };
    written.map_err(|e| format!("cannot write depth: {e}"))?;

    let mut records = Vec::new();
    if let Some(turns) = &rec.existing_conversations {
        records.push(QaRecord {
            id: format!("{}-general", rec.image_id),
            image: ctx.image_refs.clone(),
            conversations: turns.clone(),
            level: Level::General,
            api_allowed: false,
            provenance: Provenance {
                template: "passthrough".into(),
                seed,
                annotations: Vec::new(),
                points: Vec::new(),
            },
        });
    }
    let mut absorb = |g: super::Generated| {
        records.extend(g.records);
        skipped_items.extend(g.skipped);
    };
    if config.levels.low {
        absorb(generate_point_depth_qa(&ctx, config.point_qas, seed));
    }
    if config.levels.mid {
        absorb(generate_object_depth_qa(&ctx, seed));
        let opts = ProximityOptions {
            point_pairs: config.proximity_point_pairs,
            max_object_pairs: config.max_object_pairs,
            tie_threshold_mm: config.tie_threshold_mm,
        };
        absorb(generate_proximity_qa(&ctx, opts, seed));
    }

    let mut api_rng = derive_rng(seed, &rec.image_id, "api");
    for r in records.iter_mut().filter(|r| r.level != Level::General) {
        r.api_allowed = api_rng.random_bool(config.api_fraction);
    }

    let jobs = if config.levels.high {
        gpt_tasks_for(rec, config)
            .into_iter()
            .map(|t| emit_gpt_prompt_job(rec, &ctx.image_refs, t))
            .collect()
    } else {
        Vec::new()
    };

    Ok(ImageOutcome {
        records,
        jobs,
        skipped_items,
        saturated,
    })
}

/// Converts every manifest record into QA shards under `out_dir`:
///
/// ```text
/// out_dir/
///   depth/<image_id>.png|.sbd    encoded depth
///   qa/shard-00000.jsonl         QA records, manifest order
///   prompts/gpt_jobs.jsonl       prompt jobs for external generation
///   summary.json
/// ```
///
/// Unreadable inputs skip the image and are counted; a malformed manifest
/// aborts before anything is written. Output bytes depend only on the
/// manifest, inputs, config and seed.
pub fn convert_dataset(
    manifest_path: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    seed: u64,
    exec: Execution,
) -> Result<ConvertSummary, PipelineError> {
    config.validate()?;
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let records = read_manifest(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    for sub in ["depth", "qa", "prompts"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    // Stale shards from a previous run would break byte-identical output.
    let qa_dir = out_dir.join("qa");
    for entry in fs::read_dir(&qa_dir).map_err(io_err(&qa_dir))? {
        let path = entry.map_err(io_err(&qa_dir))?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }

    let outcomes = par::map_items(exec, &records, |rec| {
        process_image(rec, base, out_dir, config, seed)
    });

    let mut summary = ConvertSummary {
        seed,
        images_total: records.len(),
        ..Default::default()
    };
    let mut shards = ShardWriter::new(&qa_dir, config.shard_size);
    let jobs_path = out_dir.join("prompts").join("gpt_jobs.jsonl");
    let mut jobs = BufWriter::new(File::create(&jobs_path).map_err(io_err(&jobs_path))?);

    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Err(reason) => {
                log::warn!("skipping {}: {reason}", rec.image_id);
                *summary.skipped_images.entry(reason).or_default() += 1;
            }
            Ok(o) => {
                summary.images_converted += 1;
                summary.saturated_pixels += o.saturated;
                for (what, why) in o.skipped_items {
                    log::info!("{}: skipped {what}: {why}", rec.image_id);
                    *summary.skipped_items.entry(why).or_default() += 1;
                }
                for r in &o.records {
                    summary.records.add(r.level);
                    shards.write(r)?;
                }
                for j in &o.jobs {
                    summary.records.high += 1;
                    let mut line = serde_json::to_vec(j).expect("jobs serialize");
                    line.push(b'\n');
                    jobs.write_all(&line).map_err(io_err(&jobs_path))?;
                }
                summary.prompt_jobs += o.jobs.len();
            }
        }
    }
    jobs.flush().map_err(io_err(&jobs_path))?;
    summary.shards = shards.finish()?;
    summary.total_records = summary.records.total();

    let summary_path = out_dir.join("summary.json");
    let mut body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    body.push('\n');
    fs::write(&summary_path, body).map_err(io_err(&summary_path))?;
    Ok(summary)
}
