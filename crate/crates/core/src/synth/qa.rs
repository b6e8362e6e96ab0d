//! Question templates, the closed answer set, and the geometric answer oracle.

use super::{Category, SceneSpec, TamperSpec, Zone};
use crate::error::{Error, Result};

pub const QUESTION_COUNT: usize = 14;
pub const ANSWER_COUNT: usize = 50;

/// Answer strings in id order. The order is part of the dataset format.
pub const ANSWERS: [&str; ANSWER_COUNT] = [
    "yes",
    "no",
    "vehicle",
    "airplane",
    "ship",
    "building",
    "road",
    "vegetation",
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "north",
    "northeast",
    "east",
    "southeast",
    "south",
    "southwest",
    "west",
    "northwest",
    "larger",
    "smaller",
    "same",
    "near",
    "medium",
    "far",
    "not tampered",
    "water",
    "land",
    "field",
    "top left",
    "top center",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
    "reserved 0",
    "reserved 1",
    "reserved 2",
    "reserved 3",
    "reserved 4",
];

const YES: usize = 0;
const NO: usize = 1;
const FIRST_CATEGORY: usize = 2;
const FIRST_COUNT: usize = 8;
const NORTH: usize = 18;
const LARGER: usize = 26;
const SMALLER: usize = 27;
const SAME: usize = 28;
const NEAR: usize = 29;
const MEDIUM: usize = 30;
const FAR: usize = 31;
pub const NOT_TAMPERED: usize = 32;
const FIRST_ZONE: usize = 33;
const FIRST_CELL: usize = 36;

/// Lookup over [`ANSWERS`].
pub struct AnswerVocabulary;

impl AnswerVocabulary {
    pub fn len() -> usize {
        ANSWER_COUNT
    }

    pub fn text(id: usize) -> Option<&'static str> {
        ANSWERS.get(id).copied()
    }

    pub fn id(text: &str) -> Option<usize> {
        ANSWERS.iter().position(|&a| a == text)
    }
}

/// Question families: whole-image perception, attributes of one region, and relations
/// between the source and tampered regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Basic,
    Independent,
    Related,
}

impl Family {
    pub fn of(category: usize) -> Family {
        match category {
            1..=3 => Family::Basic,
            4..=9 => Family::Independent,
            _ => Family::Related,
        }
    }
}

/// Template for question category `1..=14`.
pub fn question_text(category: usize) -> Result<&'static str> {
    Ok(match category {
        1 => "Has this image been tampered with?",
        2 => "What is the dominant land cover in this image?",
        3 => "Are there any ships in this image?",
        4 => "What is the category of the source object?",
        5 => "What is the category of the tampered object?",
        6 => "Where is the source region located?",
        7 => "Where is the tampered region located?",
        8 => "How many objects share the category of the tampered object?",
        9 => "What land cover is the tampered region placed on?",
        10 => "In which direction was the object moved?",
        11 => "How does the tampered object compare in size to the source object?",
        12 => "How far is the tampered region from the source region?",
        13 => "Are the source and tampered regions on the same land cover?",
        14 => "Has the tampered object been rotated?",
        c => return Err(Error::Contract(format!("question category {c} outside 1..=14"))),
    })
}

/// Answer id of the 3×3 grid cell containing continuous point `(x, y)`.
pub fn grid_cell(x: f64, y: f64, size: usize) -> usize {
    let cell = |v: f64| ((3.0 * v / size as f64).floor().max(0.0) as usize).min(2);
    FIRST_CELL + cell(y) * 3 + cell(x)
}

fn yes_no(b: bool) -> usize {
    if b {
        YES
    } else {
        NO
    }
}

fn zone_answer(zone: Zone) -> usize {
    FIRST_ZONE + zone.index()
}

fn zone_at_point(scene: &SceneSpec, p: [f64; 2]) -> Zone {
    let clamp = |v: f64| (v.floor().max(0.0) as usize).min(scene.size - 1);
    scene.zones.zone_at(clamp(p[0]), clamp(p[1]), scene.size)
}

/// Compass bucket of a displacement in image coordinates (x east, y south).
fn direction(dx: f64, dy: f64) -> usize {
    let angle = (-dy).atan2(dx).to_degrees();
    let sector = ((angle + 360.0 + 22.5) / 45.0).floor() as usize % 8;
    // sectors run counter-clockwise from east; answers run clockwise from north
    const BY_SECTOR: [usize; 8] = [2, 1, 0, 7, 6, 5, 4, 3];
    NORTH + BY_SECTOR[sector]
}

/// Answer id for question `category` about `scene` under `tamper`. Pure and total over
/// valid categories.
pub fn answer_oracle(scene: &SceneSpec, tamper: &TamperSpec, category: usize) -> Result<usize> {
    question_text(category)?;
    match category {
        1 => return Ok(yes_no(tamper.is_tampered())),
        2 => {
            let mut counts = [0usize; 3];
            for z in scene.zones.zone_map(scene.size) {
                counts[z.index()] += 1;
            }
            let best = (0..3).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
            return Ok(zone_answer(Zone::ALL[best]));
        }
        3 => {
            return Ok(yes_no(scene.objects.iter().any(|o| o.category == Category::Ship)));
        }
        _ => {}
    }
    let TamperSpec::CopyMove {
        source_object,
        dest_center,
        scale_factor,
        rotation_deg,
    } = *tamper
    else {
        return Ok(NOT_TAMPERED);
    };
    let src = scene
        .objects
        .get(source_object)
        .ok_or_else(|| Error::Contract(format!("source object {source_object} does not exist")))?;
    let src_center = src.center_point();
    let (dx, dy) = (dest_center[0] - src_center[0], dest_center[1] - src_center[1]);
    Ok(match category {
        4 | 5 => FIRST_CATEGORY + src.category.index(),
        6 => grid_cell(src_center[0], src_center[1], scene.size),
        7 => grid_cell(dest_center[0], dest_center[1], scene.size),
        8 => {
            let same = scene.objects.iter().filter(|o| o.category == src.category).count();
            FIRST_COUNT + (same + 1).min(9)
        }
        9 => zone_answer(zone_at_point(scene, dest_center)),
        10 => direction(dx, dy),
        11 => {
            if scale_factor > 1.1 {
                LARGER
            } else if scale_factor < 0.9 {
                SMALLER
            } else {
                SAME
            }
        }
        12 => {
            let d = dx.hypot(dy) / scene.size as f64;
            if d < 0.3 {
                NEAR
            } else if d < 0.55 {
                MEDIUM
            } else {
                FAR
            }
        }
        13 => yes_no(zone_at_point(scene, src_center) == zone_at_point(scene, dest_center)),
        14 => yes_no(rotation_deg != 0.0),
        _ => unreachable!(),
    })
}
