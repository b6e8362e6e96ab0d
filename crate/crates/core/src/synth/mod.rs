//! Procedural remote-sensing scenes with copy-move tampering, ground-truth masks and
//! question/answer pairs.

mod dataset;
mod pnm;
mod qa;
mod scene;
mod tamper;

use serde::{Deserialize, Serialize};

pub use dataset::{
    emit_dataset, generate_sample, plan, sample_seed, split_counts, tampered_count, Dataset, Manifest, ManifestEntry,
    QaRecord, SampleRecord, SceneRecord, Split, FORMAT_VERSION,
};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use qa::{
    answer_oracle, grid_cell, question_text, AnswerVocabulary, Family, ANSWERS, ANSWER_COUNT, NOT_TAMPERED,
    QUESTION_COUNT,
};
pub use scene::{generate_scene, render_scene, Glyph, HalfPlane, SceneObject, SceneSpec, ZoneLayout};
pub use tamper::{apply_copy_move, sample_tamper, TamperSpec};

/// Object classes that can appear in a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Vehicle,
    Airplane,
    Ship,
    Building,
    Road,
    Vegetation,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Vehicle,
        Category::Airplane,
        Category::Ship,
        Category::Building,
        Category::Road,
        Category::Vegetation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Vehicle => "vehicle",
            Category::Airplane => "airplane",
            Category::Ship => "ship",
            Category::Building => "building",
            Category::Road => "road",
            Category::Vegetation => "vegetation",
        }
    }

    /// Whether an object of this category may sit on `zone`.
    pub fn allowed_on(self, zone: Zone) -> bool {
        match self {
            Category::Ship => zone == Zone::Water,
            Category::Vehicle | Category::Airplane => zone == Zone::Land,
            Category::Building | Category::Road => matches!(zone, Zone::Land | Zone::Field),
            Category::Vegetation => matches!(zone, Zone::Field | Zone::Land),
        }
    }
}

/// Land-cover class of a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Water,
    Land,
    Field,
}

impl Zone {
    pub const ALL: [Zone; 3] = [Zone::Water, Zone::Land, Zone::Field];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Zone::Water => "water",
            Zone::Land => "land",
            Zone::Field => "field",
        }
    }
}
