//! Road layouts and the static map classes painted from them.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    FourWay,
    ThreeWay,
    TJunction,
    Straight,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Self::FourWay, Self::ThreeWay, Self::TJunction, Self::Straight];
}

/// Static map classes, one channel each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapClass {
    OffRoad = 0,
    Road = 1,
    LaneDivider = 2,
    Crosswalk = 3,
    Sidewalk = 4,
    Median = 5,
    StopLine = 6,
}

pub const ROAD_HALF_WIDTH: f64 = 7.0;
pub const SIDEWALK_WIDTH: f64 = 3.0;
const DIVIDER_HALF_WIDTH: f64 = 0.3;
const CROSSWALK: [f64; 2] = [8.0, 11.0];
const STOP_LINE: [f64; 2] = [11.0, 11.8];
const MEDIAN_HALF_WIDTH: f64 = 0.8;
const MEDIAN_START: f64 = 16.0;

/// A half-infinite road arm leaving the origin along `dir`, or a full
/// road through the origin when `through` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoadArm {
    pub dir: [f64; 2],
    pub through: bool,
}

impl RoadArm {
    /// `(along, lateral)` coordinates of a point, `along` clamped to the arm.
    pub fn frame(&self, x: f64, y: f64) -> (f64, f64) {
        let along = x * self.dir[0] + y * self.dir[1];
        let lateral = -x * self.dir[1] + y * self.dir[0];
        (along, lateral)
    }

    pub fn covers_along(&self, along: f64) -> bool {
        self.through || along >= -ROAD_HALF_WIDTH
    }

    pub fn heading(&self) -> f64 {
        self.dir[1].atan2(self.dir[0])
    }
}

impl Layout {
    pub fn arms(self) -> Vec<RoadArm> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Self::Straight => vec![RoadArm { dir: [1.0, 0.0], through: true }],
            Self::FourWay => vec![RoadArm { dir: [1.0, 0.0], through: true }, RoadArm { dir: [0.0, 1.0], through: true }],
            Self::TJunction => vec![RoadArm { dir: [1.0, 0.0], through: true }, RoadArm { dir: [0.0, 1.0], through: false }],
            Self::ThreeWay => vec![
                RoadArm { dir: [1.0, 0.0], through: false },
                RoadArm { dir: [-s, s], through: false },
                RoadArm { dir: [-s, -s], through: false },
            ],
        }
    }

    pub fn is_junction(self) -> bool {
        self != Self::Straight
    }

    /// Whether the ground point lies on a carriageway.
    pub fn on_road(self, x: f64, y: f64) -> bool {
        self.arms().iter().any(|a| {
            let (along, lat) = a.frame(x, y);
            a.covers_along(along) && lat.abs() <= ROAD_HALF_WIDTH
        })
    }

    pub fn classify(self, x: f64, y: f64) -> MapClass {
        let arms = self.arms();
        let junction = self.is_junction();
        let mut on_any = false;
        // distance from the junction center along the arm the point is on;
        // for points in the junction box this is small on every arm
        let mut best: Option<MapClass> = None;
        for a in &arms {
            let (along, lat) = a.frame(x, y);
            if !(a.covers_along(along) && lat.abs() <= ROAD_HALF_WIDTH) {
                continue;
            }
            on_any = true;
            let in_box = junction && arms.iter().any(|o| o != a && o.frame(x, y).1.abs() <= ROAD_HALF_WIDTH && o.covers_along(o.frame(x, y).0));
            if in_box {
                continue;
            }
            let d = if junction { along.abs() } else { f64::INFINITY };
            let class = if junction && (CROSSWALK[0]..CROSSWALK[1]).contains(&d) {
                MapClass::Crosswalk
            } else if junction && (STOP_LINE[0]..STOP_LINE[1]).contains(&d) && lat * along.signum() < 0.0 {
                MapClass::StopLine
            } else if lat.abs() <= MEDIAN_HALF_WIDTH && (!junction || d >= MEDIAN_START) {
                MapClass::Median
            } else if lat.abs() <= DIVIDER_HALF_WIDTH {
                MapClass::LaneDivider
            } else {
                MapClass::Road
            };
            best = Some(match best {
                Some(b) if (b as usize) >= (class as usize) => b,
                _ => class,
            });
        }
        if on_any {
            return best.unwrap_or(MapClass::Road);
        }
        let near_road = arms.iter().any(|a| {
            let (along, lat) = a.frame(x, y);
            a.covers_along(along) && lat.abs() <= ROAD_HALF_WIDTH + SIDEWALK_WIDTH
        });
        if near_road {
            MapClass::Sidewalk
        } else {
            MapClass::OffRoad
        }
    }

    /// Ground positions for cameras: the corners of the junction box.
    pub fn camera_corners(self) -> [[f64; 2]; 4] {
        let c = ROAD_HALF_WIDTH + SIDEWALK_WIDTH / 2.0;
        [[c, c], [-c, c], [-c, -c], [c, -c]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_classes() {
        let l = Layout::FourWay;
        assert_eq!(l.classify(0.0, 0.0), MapClass::Road);
        assert_eq!(l.classify(20.0, 20.0), MapClass::OffRoad);
        assert_eq!(l.classify(20.0, 8.0), MapClass::Sidewalk);
        assert_eq!(l.classify(9.0, 3.0), MapClass::Crosswalk);
        assert_eq!(l.classify(20.0, 0.1), MapClass::Median);
        assert_eq!(l.classify(13.0, 0.1), MapClass::LaneDivider);
        assert_eq!(Layout::Straight.classify(0.0, 0.2), MapClass::Median);
        assert_eq!(Layout::Straight.classify(0.0, 12.0), MapClass::OffRoad);
    }

    #[test]
    fn every_layout_uses_several_classes() {
        for l in Layout::ALL {
            let mut seen = std::collections::HashSet::new();
            for i in 0..100 {
                for j in 0..100 {
                    seen.insert(l.classify(-25.0 + i as f64 * 0.5, -25.0 + j as f64 * 0.5));
                }
            }
            assert!(seen.len() >= 4, "{l:?} {seen:?}");
        }
    }

    #[test]
    fn t_junction_has_one_sided_arm() {
        assert!(Layout::TJunction.on_road(0.0, 20.0));
        assert!(!Layout::TJunction.on_road(0.0, -20.0));
    }
}
