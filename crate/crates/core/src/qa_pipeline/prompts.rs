//! Prompt templates for the conversation subsets written by an external
//! language model, and the image-source presets that pick them.

use serde::{Deserialize, Serialize};

use super::DepthSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GptTask {
    DepthmapUnderstanding,
    SpatialUnderstanding,
    RobotScene,
}

impl GptTask {
    pub const ALL: [GptTask; 3] = [
        GptTask::DepthmapUnderstanding,
        GptTask::SpatialUnderstanding,
        GptTask::RobotScene,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GptTask::DepthmapUnderstanding => "depthmap_understanding",
            GptTask::SpatialUnderstanding => "spatial_understanding",
            GptTask::RobotScene => "robot_scene",
        }
    }

    /// The template sent verbatim, typos included: these strings are the
    /// published prompts and are kept byte-identical.
    pub fn prompt(self) -> &'static str {
        match self {
            GptTask::DepthmapUnderstanding => DEPTHMAP_UNDERSTANDING,
            GptTask::SpatialUnderstanding => SPATIAL_UNDERSTANDING,
            GptTask::RobotScene => ROBOT_SCENE,
        }
    }

    /// Whether the job should attach the depth image.
    pub fn needs_depth(self) -> bool {
        self == GptTask::DepthmapUnderstanding
    }
}

impl std::str::FromStr for GptTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GptTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown prompt task {s:?}"))
    }
}

pub const DEPTHMAP_UNDERSTANDING: &str = "Design a conversion between you and a human talking about the depth map. The human asks you to describe the depth map. You should focus on depth value predictions. The colors just represent depth values. Do not directly mention colors on the image in your response, instead, mention the depth distribution they stand for. Looking at the depth map, you should also infer what may be in the image. If something really exists in the rgb image, and can be inferred from the depth map, you can mention they in your response. If possible, pay attention to spatial relationships. When referring to spatial relationships, such as left and right, you should use the real-world left and right, rather than those in the image coordinate system.";

pub const SPATIAL_UNDERSTANDING: &str = "Design a conversation, consisting of no more than 3 Question-Answer pairs, between you and a person asking about this image. The content within the conversation should be logically connected. You should think of what are spatial relationships of objects in the image. Then generate the conversation according regarding the spatial relationships. Spatial relationships can be about, but not limited to these categories: positional (left/right, below/above, behind/front), distance (further/closer to the camera, further/closer to something), size(big/small, tall/short, wide/thin), reach (has A touched/reached B physically). When describing spatial relationships, always use the real-world orientation as if you are standing in the real scene. e.g. when using right side of object, it should talk about what is on the right side of object in the real world, not on the right side of image'. Only describe the things that you are sure about.";

pub const ROBOT_SCENE: &str = "Design a conversation, consisting of no more than 3 Question-Answer pairs, between you and a person asking about this image. The content within the conversation should be logically connected. You should first think of robot task: what may the robot want to do with the objects. And then generate the conversation according to robot task. The conversations can include what robot are doing, how should the robot finish robot task, object count, object position, positional relationships, object appearance, etc. Only describe the things that you are sure about. Please note that you are talking to a person about the image and robot. You are not the robot, and you are not talking to the robot.";

/// Known image sources and how their images are selected and given depth.
///
/// | preset        | prompt task            | depth                          | selection                                                         |
/// |---------------|------------------------|--------------------------------|-------------------------------------------------------------------|
/// | `vg_coco`     | depthmap understanding | estimated                      | random                                                            |
/// | `kitti`       | spatial understanding  | estimated (sensor is sparse)   | random per sequence, near-duplicate frames filtered by hand       |
/// | `nyu_depth_v2`| spatial understanding  | sensor                         | all images                                                        |
/// | `rtx`         | robot scene            | sensor if available, else est. | 3 annotated boxes per image, plus the gripper when visible        |
/// | `sa1b`        | spatial understanding  | estimated                      | random real-world images                                          |
/// | `s2d3d`       | spatial understanding  | sensor                         | random, images with at most 3 objects excluded                    |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePreset {
    VgCoco,
    Kitti,
    NyuDepthV2,
    Rtx,
    Sa1b,
    S2d3d,
}

impl SourcePreset {
    pub fn gpt_task(self) -> GptTask {
        match self {
            SourcePreset::VgCoco => GptTask::DepthmapUnderstanding,
            SourcePreset::Rtx => GptTask::RobotScene,
            SourcePreset::Kitti
            | SourcePreset::NyuDepthV2
            | SourcePreset::Sa1b
            | SourcePreset::S2d3d => GptTask::SpatialUnderstanding,
        }
    }

    /// Expected depth provenance; `None` when it depends on the sub-dataset.
    pub fn depth_source(self) -> Option<DepthSource> {
        match self {
            SourcePreset::NyuDepthV2 | SourcePreset::S2d3d => Some(DepthSource::Sensor),
            SourcePreset::Rtx => None,
            _ => Some(DepthSource::Mde),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_verbatim() {
        assert!(SPATIAL_UNDERSTANDING
            .starts_with("Design a conversation, consisting of no more than 3 Question-Answer pairs"));
        assert!(DEPTHMAP_UNDERSTANDING.contains("Do not directly mention colors"));
        assert!(DEPTHMAP_UNDERSTANDING.starts_with("Design a conversion between you"));
        assert!(ROBOT_SCENE.ends_with("you are not talking to the robot."));
    }

    #[test]
    fn task_names_round_trip() {
        for t in GptTask::ALL {
            assert_eq!(t.name().parse::<GptTask>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert!("poetry".parse::<GptTask>().is_err());
    }
}
