//! Zone layouts, object glyphs and scene rendering.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, Zone};
use crate::tensor::Tensor;

/// Amplitude of the 2×2 periodic sensor pattern added at capture time.
pub(crate) const SENSOR_PATTERN: f64 = 0.1;
/// Half-width of the uniform per-pixel sensor noise.
pub(crate) const SENSOR_NOISE: f64 = 0.02;
/// Scene colours are mapped into `[TONE_FLOOR, TONE_FLOOR + TONE_SPAN]` so that the
/// pattern and noise never clip.
const TONE_FLOOR: f64 = 0.15;
const TONE_SPAN: f64 = 0.7;
const MIN_OBJECTS: usize = 3;
const MAX_OBJECTS: usize = 10;

/// Pixels whose centre lies on the far side of a line through the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    /// Direction of the line normal, radians.
    pub angle: f64,
    /// Signed distance of the line from the image centre, pixels.
    pub offset: f64,
}

impl HalfPlane {
    fn contains(&self, x: usize, y: usize, size: usize) -> bool {
        let c = size as f64 / 2.0;
        let (px, py) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        px * self.angle.cos() + py * self.angle.sin() > self.offset
    }
}

/// Water is carved out first, then field from what remains; everything else is land.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneLayout {
    pub water: Option<HalfPlane>,
    pub field: Option<HalfPlane>,
}

impl ZoneLayout {
    pub fn zone_at(&self, x: usize, y: usize, size: usize) -> Zone {
        if self.water.is_some_and(|h| h.contains(x, y, size)) {
            Zone::Water
        } else if self.field.is_some_and(|h| h.contains(x, y, size)) {
            Zone::Field
        } else {
            Zone::Land
        }
    }

    /// Row-major zone of every pixel.
    pub fn zone_map(&self, size: usize) -> Vec<Zone> {
        (0..size * size)
            .map(|i| self.zone_at(i % size, i / size, size))
            .collect()
    }
}

/// Category-specific drawing in object-local coordinates (pixels at scale 1, `u` to the
/// right and `v` downward, origin at the object centre).
pub struct Glyph;

impl Glyph {
    /// Radius that bounds the glyph at scale 1.
    pub fn radius(category: Category) -> f64 {
        match category {
            Category::Vehicle => 4.5,
            Category::Airplane => 7.5,
            Category::Ship => 6.5,
            Category::Building => 6.0,
            Category::Road => 7.5,
            Category::Vegetation => 5.0,
        }
    }

    /// Colour of the glyph at `(u, v)`, or `None` outside it. Every glyph carries an
    /// off-centre accent so that 180° turns are visible.
    pub fn color(category: Category, u: f64, v: f64) -> Option<[f64; 3]> {
        let (body, accent) = match category {
            Category::Vehicle => ([0.85, 0.2, 0.2], [0.3, 0.1, 0.1]),
            Category::Airplane => ([0.9, 0.9, 0.85], [0.5, 0.55, 0.6]),
            Category::Ship => ([0.9, 0.6, 0.1], [0.9, 0.9, 0.9]),
            Category::Building => ([0.6, 0.6, 0.68], [0.35, 0.3, 0.3]),
            Category::Road => ([0.22, 0.22, 0.22], [0.85, 0.8, 0.3]),
            Category::Vegetation => ([0.1, 0.38, 0.12], [0.3, 0.6, 0.2]),
        };
        let (inside, accented) = match category {
            Category::Vehicle => (u.abs() <= 3.5 && v.abs() <= 2.0, u > 2.0),
            Category::Airplane => {
                let fuselage = u.abs() <= 5.0 && v.abs() <= 1.0;
                let wings = (0.0..=2.0).contains(&u) && v.abs() <= 5.0;
                let tail = (-5.0..=-3.5).contains(&u) && v.abs() <= 2.5;
                (fuselage || wings || tail, u > 4.0 && v.abs() <= 1.0)
            }
            Category::Ship => (
                (u / 6.0).powi(2) + (v / 2.5).powi(2) <= 1.0,
                (-3.5..=-1.5).contains(&u) && v.abs() <= 1.0,
            ),
            Category::Building => (u.abs() <= 4.0 && v.abs() <= 4.0, u < 0.0 && v < 0.0),
            Category::Road => (u.abs() <= 7.0 && v.abs() <= 1.5, u > 5.0 && v.abs() <= 0.5),
            Category::Vegetation => ((u / 4.5).powi(2) + (v / 3.5).powi(2) <= 1.0, u > 1.5 && v < 0.0),
        };
        inside.then_some(if accented { accent } else { body })
    }
}

/// One object placed in a scene. `center` is a pixel index `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    pub center: [usize; 2],
    pub scale: f64,
    pub rotation_deg: f64,
    pub zone: Zone,
}

impl SceneObject {
    /// Centre in continuous image coordinates, where pixel `(x, y)` spans `[x, x+1)×[y, y+1)`.
    pub fn center_point(&self) -> [f64; 2] {
        [self.center[0] as f64 + 0.5, self.center[1] as f64 + 0.5]
    }

    fn local(&self, x: i64, y: i64) -> (f64, f64) {
        let (dx, dy) = ((x - self.center[0] as i64) as f64, (y - self.center[1] as i64) as f64);
        let (c, s) = super::tamper::cos_sin(self.rotation_deg);
        ((c * dx + s * dy) / self.scale, (-s * dx + c * dy) / self.scale)
    }

    /// Pixels covered by the object with their colours, or `None` if any would fall
    /// outside a `size×size` image.
    pub fn footprint(&self, size: usize) -> Option<Vec<(usize, usize, [f64; 3])>> {
        let r = (Glyph::radius(self.category) * self.scale).ceil() as i64 + 1;
        let (cx, cy) = (self.center[0] as i64, self.center[1] as i64);
        let mut out = Vec::new();
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let (u, v) = self.local(x, y);
                if let Some(color) = Glyph::color(self.category, u, v) {
                    if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                        return None;
                    }
                    out.push((x as usize, y as usize, color));
                }
            }
        }
        Some(out)
    }

    /// Footprint as a row-major membership map.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for (x, y, _) in self.footprint(size).unwrap_or_default() {
            m[y * size + x] = true;
        }
        m
    }
}

/// Everything needed to re-render a clean scene bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub zones: ZoneLayout,
    pub objects: Vec<SceneObject>,
    pub noise_seed: u64,
}

impl SceneSpec {
    /// Objects dilated by one pixel, so that nothing placed later touches them.
    pub(crate) fn occupancy(&self) -> Vec<bool> {
        let n = self.size;
        let mut occ = vec![false; n * n];
        for obj in &self.objects {
            for (x, y, _) in obj.footprint(n).unwrap_or_default() {
                for yy in y.saturating_sub(1)..=(y + 1).min(n - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(n - 1) {
                        occ[yy * n + xx] = true;
                    }
                }
            }
        }
        occ
    }
}

fn zone_color(zone: Zone) -> [f64; 3] {
    match zone {
        Zone::Water => [0.15, 0.25, 0.55],
        Zone::Land => [0.55, 0.5, 0.4],
        Zone::Field => [0.35, 0.55, 0.25],
    }
}

/// Rounds to the nearest multiple of 1/255, as an 8-bit capture would.
pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders zones, objects, sensor noise and the periodic sensor pattern into an
/// `[size, size, 3]` image quantized to 8 bits.
pub fn render_scene(spec: &SceneSpec) -> Tensor {
    let n = spec.size;
    let mut img = vec![0.0; n * n * 3];
    for (i, zone) in spec.zones.zone_map(n).into_iter().enumerate() {
        img[i * 3..i * 3 + 3].copy_from_slice(&zone_color(zone));
    }
    for obj in &spec.objects {
        for (x, y, color) in obj.footprint(n).unwrap_or_default() {
            let i = (y * n + x) * 3;
            img[i..i + 3].copy_from_slice(&color);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    for y in 0..n {
        for x in 0..n {
            let pattern = if (x + y) % 2 == 0 {
                SENSOR_PATTERN
            } else {
                -SENSOR_PATTERN
            };
            for ch in 0..3 {
                let i = (y * n + x) * 3 + ch;
                let noise = rng.gen_range(-SENSOR_NOISE..=SENSOR_NOISE);
                img[i] = quantize(TONE_FLOOR + TONE_SPAN * img[i] + pattern + noise);
            }
        }
    }
    Tensor::new(vec![n, n, 3], img).expect("image shape")
}

fn random_layout(rng: &mut ChaCha8Rng, size: usize) -> ZoneLayout {
    let s = size as f64;
    let tau = std::f64::consts::TAU;
    let water = rng.gen_bool(0.65).then(|| HalfPlane {
        angle: rng.gen_range(0.0..tau),
        offset: rng.gen_range(-0.15..0.4) * s,
    });
    let field = rng.gen_bool(0.7).then(|| HalfPlane {
        angle: rng.gen_range(0.0..tau),
        offset: rng.gen_range(-0.3..0.3) * s,
    });
    ZoneLayout { water, field }
}

/// Places 3–10 non-touching objects on zones that admit their category.
///
/// Returns `None` when fewer than three objects fit; callers then draw a fresh layout.
pub(crate) fn place_objects(rng: &mut ChaCha8Rng, size: usize, zones: ZoneLayout) -> Option<Vec<SceneObject>> {
    let zone_map = zones.zone_map(size);
    let target = rng.gen_range(MIN_OBJECTS..=MAX_OBJECTS);
    let mut spec = SceneSpec {
        size,
        zones,
        objects: Vec::new(),
        noise_seed: 0,
    };
    let mut occupied = spec.occupancy();
    for _ in 0..400 {
        if spec.objects.len() == target {
            break;
        }
        let center = [rng.gen_range(0..size), rng.gen_range(0..size)];
        let zone = zone_map[center[1] * size + center[0]];
        let legal: Vec<Category> = Category::ALL.into_iter().filter(|c| c.allowed_on(zone)).collect();
        let category = *legal.choose(rng).expect("every zone admits a category");
        let obj = SceneObject {
            category,
            center,
            scale: rng.gen_range(0.95..=1.05),
            rotation_deg: 0.0,
            zone,
        };
        let Some(fp) = obj.footprint(size) else { continue };
        let fits = fp.iter().all(|&(x, y, _)| {
            let i = y * size + x;
            !occupied[i] && category.allowed_on(zone_map[i])
        });
        if fits {
            spec.objects.push(obj);
            occupied = spec.occupancy();
        }
    }
    (spec.objects.len() >= MIN_OBJECTS).then_some(spec.objects)
}

/// Deterministic clean scene for `seed`.
pub fn generate_scene(seed: u64, size: usize) -> (SceneSpec, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let zones = random_layout(&mut rng, size);
        if let Some(objects) = place_objects(&mut rng, size, zones) {
            let spec = SceneSpec {
                size,
                zones,
                objects,
                noise_seed: rng.gen(),
            };
            let image = render_scene(&spec);
            return (spec, image);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_image() {
        let (a, ia) = generate_scene(42, 64);
        let (b, ib) = generate_scene(42, 64);
        assert_eq!(a, b);
        assert!(ia.bitwise_eq(&ib));
        let (_, ic) = generate_scene(43, 64);
        assert!(!ia.bitwise_eq(&ic));
    }

    #[test]
    fn objects_are_legal_and_counted() {
        for seed in 0..200 {
            let (spec, _) = generate_scene(seed, 64);
            assert!((3..=10).contains(&spec.objects.len()));
            let zones = spec.zones.zone_map(64);
            for obj in &spec.objects {
                for (x, y, _) in obj.footprint(64).unwrap() {
                    assert!(obj.category.allowed_on(zones[y * 64 + x]), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn glyph_accents_break_half_turn_symmetry() {
        for c in Category::ALL {
            let r = Glyph::radius(c) as i32;
            let asym = (-r..=r).flat_map(|u| (-r..=r).map(move |v| (u, v))).any(|(u, v)| {
                let (u, v) = (u as f64, v as f64);
                Glyph::color(c, u, v) != Glyph::color(c, -u, -v)
            });
            assert!(asym, "{c:?}");
        }
    }

    #[test]
    fn pixels_are_eight_bit() {
        let (_, img) = generate_scene(5, 32);
        for &v in img.data() {
            assert_eq!(quantize(v).to_bits(), v.to_bits());
        }
    }
}
