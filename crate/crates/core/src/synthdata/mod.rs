//! Procedural stick-figure corpus with compositional labels.
//!
//! Each sample is a 32×32 grayscale figure built from five joints (head, two
//! hands, two feet) and two internal anchors (neck, hip). The pose image is
//! the 1-px Bresenham skeleton; the appearance image draws the same bones as
//! soft 3-px strokes at limb intensity with bright blobs on the joints.

mod keypoints;
mod render;

use std::fmt;
use std::str::FromStr;

pub use keypoints::{extract_keypoints, mean_keypoint_error};
pub use render::{bresenham, render_body, render_skeleton};

use crate::classifier::PromptComponents;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const JOINTS: usize = 5;
pub const JOINT_NAMES: [&str; JOINTS] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];

/// A point in pixel units: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Keypoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn in_bounds(&self) -> bool {
        let max = (IMAGE_SIZE - 1) as f64;
        (0.0..=max).contains(&self.x) && (0.0..=max).contains(&self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Archetype {
    Standing,
    Sitting,
    ArmsRaised,
    Lunging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    LeftFacing,
    RightFacing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    Full,
    Small,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Standing,
        Archetype::Sitting,
        Archetype::ArmsRaised,
        Archetype::Lunging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Standing => "standing",
            Archetype::Sitting => "sitting",
            Archetype::ArmsRaised => "arms-raised",
            Archetype::Lunging => "lunging",
        }
    }

    /// Left-facing template: five joints followed by neck and hip.
    fn template(self) -> [(f64, f64); JOINTS + 2] {
        match self {
            Archetype::Standing => [
                (13.0, 5.0),
                (9.0, 16.0),
                (19.0, 18.0),
                (13.0, 27.0),
                (18.0, 27.0),
                (14.0, 9.0),
                (15.0, 18.0),
            ],
            Archetype::Sitting => [
                (12.0, 9.0),
                (20.0, 17.0),
                (8.0, 19.0),
                (23.0, 27.0),
                (25.0, 22.0),
                (13.0, 13.0),
                (14.0, 21.0),
            ],
            Archetype::ArmsRaised => [
                (14.0, 9.0),
                (8.0, 5.0),
                (22.0, 5.0),
                (11.0, 27.0),
                (19.0, 27.0),
                (15.0, 13.0),
                (15.0, 21.0),
            ],
            Archetype::Lunging => [
                (11.0, 6.0),
                (5.0, 12.0),
                (22.0, 15.0),
                (6.0, 27.0),
                (25.0, 27.0),
                (12.0, 10.0),
                (15.0, 18.0),
            ],
        }
    }
}

impl Orientation {
    pub const ALL: [Orientation; 2] = [Orientation::LeftFacing, Orientation::RightFacing];

    pub fn name(self) -> &'static str {
        match self {
            Orientation::LeftFacing => "left-facing",
            Orientation::RightFacing => "right-facing",
        }
    }
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Small => "small",
        }
    }

    fn factor(self) -> f64 {
        match self {
            Scale::Full => 1.0,
            Scale::Small => 0.75,
        }
    }
}

/// One label combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoseClass {
    pub archetype: Archetype,
    pub orientation: Orientation,
    pub scale: Scale,
}

impl PoseClass {
    pub fn new(archetype: Archetype, orientation: Orientation) -> Self {
        Self {
            archetype,
            orientation,
            scale: Scale::Full,
        }
    }

    /// The default 4 × 2 × 1 label combinations.
    pub fn default_classes() -> Vec<PoseClass> {
        Archetype::ALL
            .iter()
            .flat_map(|&a| Orientation::ALL.iter().map(move |&o| PoseClass::new(a, o)))
            .collect()
    }

    /// Label components; the scale is listed only when it is not `full`.
    pub fn labels(&self) -> PromptComponents {
        let mut parts = vec![self.archetype.name().to_string(), self.orientation.name().to_string()];
        if self.scale != Scale::Full {
            parts.push(self.scale.name().to_string());
        }
        PromptComponents::new(parts).expect("fixed nonempty names")
    }

    /// Template positions of the five joints followed by neck and hip.
    pub fn template_points(&self) -> [Keypoint; JOINTS + 2] {
        let max = (IMAGE_SIZE - 1) as f64;
        let (cx, cy) = (15.5, 16.0);
        self.archetype.template().map(|(x, y)| {
            let x = if self.orientation == Orientation::RightFacing { max - x } else { x };
            let f = self.scale.factor();
            Keypoint::new(cx + (x - cx) * f, cy + (y - cy) * f)
        })
    }

    pub fn template_keypoints(&self) -> Vec<Keypoint> {
        self.template_points()[..JOINTS].to_vec()
    }

    /// Recovers a class from prompt components such as `standing,left-facing`.
    pub fn from_labels(labels: &PromptComponents) -> Result<PoseClass> {
        let mut archetype = None;
        let mut orientation = None;
        let mut scale = Scale::Full;
        for c in labels.components() {
            if let Some(a) = Archetype::ALL.iter().find(|a| a.name() == c) {
                archetype = Some(*a);
            } else if let Some(o) = Orientation::ALL.iter().find(|o| o.name() == c) {
                orientation = Some(*o);
            } else if c == "small" {
                scale = Scale::Small;
            } else if c != "full" {
                return Err(Error::Config(format!("unknown label component {c:?}")));
            }
        }
        match (archetype, orientation) {
            (Some(archetype), Some(orientation)) => Ok(PoseClass {
                archetype,
                orientation,
                scale,
            }),
            _ => Err(Error::Config(format!("prompt {labels} does not name an archetype and an orientation"))),
        }
    }
}

impl fmt::Display for PoseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.archetype.name(), self.orientation.name())?;
        if self.scale != Scale::Full {
            write!(f, "/{}", self.scale.name())?;
        }
        Ok(())
    }
}

impl FromStr for PoseClass {
    type Err = Error;

    /// Parses `archetype/orientation[/scale]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('/').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::Config(format!("class {s:?} is not archetype/orientation[/scale]")));
        }
        let archetype = *Archetype::ALL
            .iter()
            .find(|a| a.name() == parts[0])
            .ok_or_else(|| Error::Config(format!("unknown archetype {:?}", parts[0])))?;
        let orientation = *Orientation::ALL
            .iter()
            .find(|o| o.name() == parts[1])
            .ok_or_else(|| Error::Config(format!("unknown orientation {:?}", parts[1])))?;
        let scale = match parts.get(2) {
            None | Some(&"full") => Scale::Full,
            Some(&"small") => Scale::Small,
            Some(other) => return Err(Error::Config(format!("unknown scale {other:?}"))),
        };
        Ok(PoseClass {
            archetype,
            orientation,
            scale,
        })
    }
}

/// Parses a comma-separated class list; `all` selects the default set.
pub fn parse_classes(s: &str) -> Result<Vec<PoseClass>> {
    if s.trim() == "all" {
        return Ok(PoseClass::default_classes());
    }
    let classes = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<PoseClass>>>()?;
    if classes.is_empty() {
        return Err(Error::Config("class list is empty".into()));
    }
    Ok(classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub pose_image: Tensor,
    pub keypoints: Vec<Keypoint>,
    pub labels: PromptComponents,
    pub class: PoseClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub classes: Vec<PoseClass>,
    /// Maximum per-point integer offset in pixels, applied independently to x and y.
    pub jitter: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 7,
            classes: PoseClass::default_classes(),
            jitter: 2,
        }
    }
}

/// Renders one figure of `class` with template points displaced by `offsets`.
pub fn render_sample(class: PoseClass, offsets: &[(i64, i64); JOINTS + 2]) -> SyntheticSample {
    let mut points = class.template_points();
    for (p, (dx, dy)) in points.iter_mut().zip(offsets) {
        p.x += *dx as f64;
        p.y += *dy as f64;
    }
    SyntheticSample {
        image: render_body(&points),
        pose_image: render_skeleton(&points),
        keypoints: points[..JOINTS].to_vec(),
        labels: class.labels(),
        class,
    }
}

/// Sample `i` uses class `i mod |classes|` and the `i`-th derived stream.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<SyntheticSample> {
    if config.classes.is_empty() {
        return Err(Error::Config("no classes configured".into()));
    }
    let class = config.classes[index % config.classes.len()];
    let mut rng = RngState::new(config.seed).fork("synthdata").fork_index(index as u64);
    let j = config.jitter.max(0);
    let mut offsets = [(0i64, 0i64); JOINTS + 2];
    for o in offsets.iter_mut() {
        if j > 0 {
            let span = (2 * j + 1) as usize;
            *o = (rng.below(span) as i64 - j, rng.below(span) as i64 - j);
        }
    }
    Ok(render_sample(class, &offsets))
}

pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    if config.count == 0 {
        return Err(Error::Config("corpus count must be at least 1".into()));
    }
    if config.jitter > 3 {
        return Err(Error::Config(format!("jitter {} would push joints off the canvas", config.jitter)));
    }
    (0..config.count).map(|i| generate_sample(config, i)).collect()
}

/// The zero-jitter rendering of a class.
pub fn canonical_sample(class: PoseClass) -> SyntheticSample {
    render_sample(class, &[(0, 0); JOINTS + 2])
}

/// Checks the per-sample invariants, returning a description of the first violation.
pub fn check_sample(s: &SyntheticSample) -> std::result::Result<(), String> {
    if let Some(k) = s.keypoints.iter().find(|k| !k.in_bounds()) {
        return Err(format!("keypoint {k:?} out of bounds"));
    }
    if s.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err("image intensity outside [0,1]".into());
    }
    let pose_fg: Vec<usize> = (0..s.pose_image.len()).filter(|&i| s.pose_image.data()[i] > 0.0).collect();
    if pose_fg.is_empty() {
        return Err("empty skeleton".into());
    }
    let covered = pose_fg.iter().filter(|&&i| s.image.data()[i] > 0.1).count();
    if (covered as f64) < 0.8 * pose_fg.len() as f64 {
        return Err(format!("body covers only {covered}/{} skeleton pixels", pose_fg.len()));
    }
    Ok(())
}
