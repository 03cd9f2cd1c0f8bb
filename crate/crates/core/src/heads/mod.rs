//! Detection and segmentation heads on top of the BEV feature map, plus
//! their losses.

pub mod detect;
pub mod loss;
pub mod matching;
pub mod seg;

use serde::{Deserialize, Serialize};

pub use detect::{decode_boxes, detect, box_target, DetOutput};
pub use loss::{detection_loss, focal_loss, segmentation_loss, total_loss, DetLoss, LossBreakdown, LossWeights};
pub use matching::hungarian;
pub use seg::{seg_decode, SegMasks};

use crate::error::{Error, Result};
use crate::graph::wrap_angle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [Self::Car, Self::Truck, Self::Pedestrian, Self::Cyclist];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Truck => "truck",
            Self::Pedestrian => "pedestrian",
            Self::Cyclist => "cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Length, width, height in meters.
    pub fn size_prior(self) -> [f64; 3] {
        match self {
            Self::Car => [4.5, 1.9, 1.6],
            Self::Truck => [8.0, 2.5, 3.0],
            Self::Pedestrian => [0.6, 0.6, 1.7],
            Self::Cyclist => [1.8, 0.6, 1.7],
        }
    }
}

pub const NUM_OBJ_CLASSES: usize = 4;
/// Number of static map classes (channel 0 is off-road).
pub const NUM_MAP_CLASSES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `[l, w, h]`
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn new(class: ObjectClass, center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self { center, size, yaw: wrap_angle(yaw), velocity: [0.0; 2], class_id: class.id(), score: 1.0 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("box size {:?} must be positive", self.size)));
        }
        if self.class_id >= NUM_OBJ_CLASSES {
            return Err(Error::Config(format!("class id {} out of range", self.class_id)));
        }
        Ok(())
    }

    /// Footprint corners in the ground plane, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[a, b]| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    /// Whether a ground point lies inside the rotated footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let a = c * dx + s * dy;
        let b = -s * dx + c * dy;
        a.abs() <= self.size[0] / 2.0 && b.abs() <= self.size[1] / 2.0
    }

    /// The eight box corners, bottom face first.
    pub fn corners_3d(&self) -> [[f64; 3]; 8] {
        let f = self.corners_bev();
        let z0 = self.center[2] - self.size[2] / 2.0;
        let z1 = self.center[2] + self.size[2] / 2.0;
        std::array::from_fn(|i| {
            let [x, y] = f[i % 4];
            [x, y, if i < 4 { z0 } else { z1 }]
        })
    }
}

/// One detection in the serialized format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: ObjectClass,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
    pub vel: [f64; 2],
}

impl From<&Box3D> for DetectionRecord {
    fn from(b: &Box3D) -> Self {
        Self {
            class: ObjectClass::from_id(b.class_id).unwrap_or(ObjectClass::Car),
            score: b.score,
            bbox: [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw],
            vel: b.velocity,
        }
    }
}

impl From<&DetectionRecord> for Box3D {
    fn from(r: &DetectionRecord) -> Self {
        let b = r.bbox;
        Self {
            center: [b[0], b[1], b[2]],
            size: [b[3], b[4], b[5]],
            yaw: b[6],
            velocity: r.vel,
            class_id: r.class.id(),
            score: r.score,
        }
    }
}

/// Detections of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub seg_blocks: usize,
    pub seg_groups: usize,
    pub velocity: bool,
    pub weights: LossWeights,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl HeadConfig {
    pub fn desk() -> Self {
        Self {
            num_queries: 20,
            decoder_layers: 1,
            ffn_hidden: 32,
            seg_blocks: 4,
            seg_groups: 4,
            velocity: false,
            weights: LossWeights::default(),
        }
    }

    pub fn m2i() -> Self {
        Self { num_queries: 200, decoder_layers: 6, ffn_hidden: 512, ..Self::desk() }
    }

    pub fn roscenes() -> Self {
        Self { num_queries: 900, ..Self::m2i() }
    }

    pub fn box_dim(&self) -> usize {
        if self.velocity {
            10
        } else {
            8
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_queries == 0 || self.decoder_layers == 0 || self.ffn_hidden == 0 || self.seg_blocks == 0 {
            return Err(Error::Config("head counts must be at least 1".into()));
        }
        if self.seg_groups == 0 || channels % self.seg_groups != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {} groups", self.seg_groups)));
        }
        Ok(())
    }
}
