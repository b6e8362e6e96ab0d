//! Copy-move tampering: resample one object elsewhere in the same image.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{quantize, SceneSpec};
use crate::detector::MaskTriplet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How (and whether) a sample was tampered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TamperSpec {
    Clean,
    CopyMove {
        source_object: usize,
        /// Centre of the pasted copy in continuous image coordinates `(x, y)`.
        dest_center: [f64; 2],
        scale_factor: f64,
        /// Counter-clockwise as displayed; 0, 90, 180, 270 or a free angle.
        rotation_deg: f64,
    },
}

impl TamperSpec {
    pub fn is_tampered(&self) -> bool {
        matches!(self, TamperSpec::CopyMove { .. })
    }
}

/// Cosine and sine of a rotation, exact for quarter turns.
#[allow(clippy::redundant_guards)]
pub(crate) fn cos_sin(deg: f64) -> (f64, f64) {
    match deg {
        d if d == 0.0 => (1.0, 0.0),
        d if d == 90.0 => (0.0, 1.0),
        d if d == 180.0 => (-1.0, 0.0),
        d if d == 270.0 => (0.0, -1.0),
        d => {
            let r = d.to_radians();
            (r.cos(), r.sin())
        }
    }
}

fn bilinear(image: &Tensor, fx: f64, fy: f64, ch: usize) -> f64 {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
    let d = image.data();
    let at = |x: usize, y: usize| d[(y * w + x) * c + ch];
    let top = at(x0, y0) + wx * (at(x1, y0) - at(x0, y0));
    let bottom = at(x0, y1) + wx * (at(x1, y1) - at(x0, y1));
    top + wy * (bottom - top)
}

struct Paste {
    /// For each pasted pixel, the continuous source position it samples.
    pixels: Vec<(usize, usize, f64, f64)>,
    source: Vec<bool>,
}

/// Maps every destination pixel back into the source object; fails if the forward image
/// of the source leaves the frame or the copy overlaps its own source.
fn paste(spec: &SceneSpec, tamper: &TamperSpec) -> Result<Option<Paste>> {
    let TamperSpec::CopyMove {
        source_object,
        dest_center,
        scale_factor,
        rotation_deg,
    } = *tamper
    else {
        return Ok(None);
    };
    let n = spec.size;
    let obj = spec
        .objects
        .get(source_object)
        .ok_or_else(|| Error::Contract(format!("source object {source_object} does not exist")))?;
    // written negated so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(scale_factor > 0.0) {
        return Err(Error::Contract(format!("scale factor {scale_factor} must be positive")));
    }
    let source = obj.mask(n);
    let [cx, cy] = obj.center_point();
    let [dx, dy] = dest_center;
    let (cos, sin) = cos_sin(rotation_deg);
    let size = n as f64;
    // every corner of every source pixel must land inside the frame
    for (i, _) in source.iter().enumerate().filter(|(_, &m)| m) {
        for (ox, oy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let (qx, qy) = ((i % n) as f64 + ox - cx, (i / n) as f64 + oy - cy);
            let px = dx + scale_factor * (cos * qx + sin * qy);
            let py = dy + scale_factor * (-sin * qx + cos * qy);
            if !(0.0..=size).contains(&px) || !(0.0..=size).contains(&py) {
                return Err(Error::Contract("copy-move destination leaves the image".into()));
            }
        }
    }
    let mut pixels = Vec::new();
    for y in 0..n {
        for x in 0..n {
            let (rx, ry) = (x as f64 + 0.5 - dx, y as f64 + 0.5 - dy);
            let qx = cx + (cos * rx - sin * ry) / scale_factor;
            let qy = cy + (sin * rx + cos * ry) / scale_factor;
            if qx < 0.0 || qy < 0.0 || qx >= size || qy >= size {
                continue;
            }
            if source[qy.floor() as usize * n + qx.floor() as usize] {
                if source[y * n + x] {
                    return Err(Error::Contract("copy-move overlaps its source".into()));
                }
                pixels.push((x, y, qx, qy));
            }
        }
    }
    Ok(Some(Paste { pixels, source }))
}

/// Pastes a resampled copy of the source object and returns the tampered image with
/// ground-truth masks. A clean spec returns the image unchanged.
pub fn apply_copy_move(spec: &SceneSpec, image: &Tensor, tamper: &TamperSpec) -> Result<(Tensor, MaskTriplet)> {
    let n = spec.size;
    let Some(p) = paste(spec, tamper)? else {
        return Ok((image.clone(), MaskTriplet::clean(n, n)));
    };
    let mut out = image.clone();
    let mut tampered = Tensor::zeros(&[n, n]);
    for &(x, y, qx, qy) in &p.pixels {
        for ch in 0..3 {
            let v = quantize(bilinear(image, qx - 0.5, qy - 0.5, ch));
            out.set(&[y, x, ch], v);
        }
        tampered.set(&[y, x], 1.0);
    }
    let source = Tensor::from_fn(&[n, n], |i| if p.source[i] { 1.0 } else { 0.0 });
    let background = Tensor::from_fn(&[n, n], |i| 1.0 - source.data()[i] - tampered.data()[i]);
    Ok((
        out,
        MaskTriplet {
            source,
            tampered,
            background,
        },
    ))
}

fn draw_rotation(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..20) {
        0..=7 => 0.0,
        8..=10 => 90.0,
        11..=13 => 180.0,
        14..=16 => 270.0,
        _ => rng.gen_range(15.0..=345.0),
    }
}

fn draw_scale(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..3) {
        0 => rng.gen_range(0.6..=0.85),
        1 => rng.gen_range(0.93..=1.07),
        _ => rng.gen_range(1.15..=1.5),
    }
}

/// Draws a legal copy-move for the scene, or `None` after 100 rejected destinations.
///
/// Destinations sit on pixel corners while object centres sit on pixel centres, so the
/// copy never lands on the original sampling grid and is always resampled.
pub fn sample_tamper(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<TamperSpec> {
    let n = spec.size;
    let source_object = rng.gen_range(0..spec.objects.len());
    let category = spec.objects[source_object].category;
    let rotation_deg = draw_rotation(rng);
    let scale_factor = draw_scale(rng);
    let zones = spec.zones.zone_map(n);
    let occupied = spec.occupancy();
    let candidates: Vec<usize> = (0..n * n).filter(|&i| category.allowed_on(zones[i])).collect();
    for _ in 0..100 {
        let &i = candidates.choose(rng)?;
        let tamper = TamperSpec::CopyMove {
            source_object,
            dest_center: [(i % n) as f64, (i / n) as f64],
            scale_factor,
            rotation_deg,
        };
        let Ok(Some(p)) = paste(spec, &tamper) else { continue };
        let legal = !p.pixels.is_empty()
            && p.pixels.iter().all(|&(x, y, _, _)| {
                let j = y * n + x;
                !occupied[j] && category.allowed_on(zones[j])
            });
        if legal {
            return Some(tamper);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_scene;
    use rand::SeedableRng;

    #[test]
    fn clean_spec_leaves_image_alone() {
        let (spec, img) = generate_scene(1, 64);
        let (out, masks) = apply_copy_move(&spec, &img, &TamperSpec::Clean).unwrap();
        assert!(out.bitwise_eq(&img));
        assert_eq!(masks.tampered.sum(), 0.0);
        assert_eq!(masks.source.sum(), 0.0);
        assert_eq!(masks.background.sum(), 64.0 * 64.0);
    }

    #[test]
    fn identity_transform_copies_exactly() {
        let (spec, img) = generate_scene(2, 64);
        let obj = spec.objects[0];
        let tamper = TamperSpec::CopyMove {
            source_object: 0,
            dest_center: obj.center_point(),
            scale_factor: 1.0,
            rotation_deg: 0.0,
        };
        // a copy onto itself overlaps its source, so check the sampling directly
        let p = paste(&spec, &tamper);
        assert!(p.is_err());
        for (x, y, _) in obj.footprint(64).unwrap() {
            let (qx, qy) = (x as f64 + 0.5, y as f64 + 0.5);
            for ch in 0..3 {
                let v = quantize(bilinear(&img, qx - 0.5, qy - 0.5, ch));
                assert_eq!(v.to_bits(), img.at(&[y, x, ch]).to_bits());
            }
        }
    }

    #[test]
    fn translation_by_whole_pixels_is_exact() {
        for seed in 0..40 {
            let (spec, img) = generate_scene(seed, 64);
            let obj = spec.objects[0];
            let [cx, cy] = obj.center_point();
            for (ox, oy) in [(20.0, 0.0), (-20.0, 0.0), (0.0, 20.0), (0.0, -20.0)] {
                let tamper = TamperSpec::CopyMove {
                    source_object: 0,
                    dest_center: [cx + ox, cy + oy],
                    scale_factor: 1.0,
                    rotation_deg: 0.0,
                };
                let Ok((out, masks)) = apply_copy_move(&spec, &img, &tamper) else {
                    continue;
                };
                for (x, y, _) in obj.footprint(64).unwrap() {
                    let (tx, ty) = ((x as f64 + ox) as usize, (y as f64 + oy) as usize);
                    assert_eq!(masks.tampered.at(&[ty, tx]), 1.0);
                    for ch in 0..3 {
                        assert_eq!(out.at(&[ty, tx, ch]).to_bits(), img.at(&[y, x, ch]).to_bits());
                    }
                }
                return;
            }
        }
        panic!("no in-bounds translation found");
    }

    #[test]
    fn doubling_scale_quadruples_area() {
        let mut checked = 0;
        for seed in 0..200 {
            let (spec, img) = generate_scene(seed, 64);
            for (k, obj) in spec.objects.iter().enumerate() {
                let [cx, cy] = obj.center_point();
                let dest = [if cx < 32.0 { cx + 24.0 } else { cx - 24.0 }, cy];
                let tamper = TamperSpec::CopyMove {
                    source_object: k,
                    dest_center: dest,
                    scale_factor: 2.0,
                    rotation_deg: 0.0,
                };
                if let Ok((_, m)) = apply_copy_move(&spec, &img, &tamper) {
                    let ratio = m.tampered.sum() / m.source.sum();
                    assert!((ratio / 4.0 - 1.0).abs() <= 0.1, "{ratio}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn sampled_tampers_are_legal_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut found = 0;
        for seed in 0..60 {
            let (spec, img) = generate_scene(seed, 64);
            let Some(t) = sample_tamper(&spec, &mut rng) else {
                continue;
            };
            let (_, m) = apply_copy_move(&spec, &img, &t).unwrap();
            assert!(m.tampered.sum() > 0.0);
            for i in 0..64 * 64 {
                let total = m.source.data()[i] + m.tampered.data()[i] + m.background.data()[i];
                assert_eq!(total, 1.0);
            }
            found += 1;
        }
        assert!(found > 40, "{found}");
    }

    #[test]
    fn quarter_turns_are_exact() {
        assert_eq!(cos_sin(90.0), (0.0, 1.0));
        assert_eq!(cos_sin(270.0), (0.0, -1.0));
    }
}
