//! Synthetic ultrasound-like nodule generator.
//!
//! Benign nodules are smooth-boundary ellipses over speckle; malignant ones
//! get a star-perturbed boundary and bright micro-speckle inside. Each
//! synthetic patient carries 1 to 6 images of a single class, so the
//! patient-grouping constraint in split planning stays meaningful.

use super::{label_from_score, DataError, DatasetManifest, Sample};
use crate::seed::derive;
use crate::texture::{write_pgm, GrayImage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Axis-aligned bounding box of a generated nodule, in pixels,
/// half-open on the right/bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoduleBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl NoduleBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Box rescaled to a different image resolution.
    pub fn scaled(&self, from: usize, to: usize) -> NoduleBox {
        let s = |v: usize| (v * to) / from;
        NoduleBox {
            x0: s(self.x0),
            y0: s(self.y0),
            x1: s(self.x1).max(s(self.x0) + 1).min(to),
            y1: s(self.y1).max(s(self.y0) + 1).min(to),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub count: usize,
    pub patients: usize,
    pub malignant_fraction: f64,
    /// Image side; must be even and at least 32.
    pub size: usize,
    pub seed: u64,
}

struct NoduleShape {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    /// (harmonic, amplitude, phase) boundary perturbations; empty = smooth.
    lobes: Vec<(f64, f64, f64)>,
    edge_softness: f64,
}

impl NoduleShape {
    /// Normalized radial coordinate of a pixel: <1 inside the boundary.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.rot.sin_cos();
        let u = (dx * cos + dy * sin) / self.rx;
        let v = (-dx * sin + dy * cos) / self.ry;
        let r = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let mut boundary = 1.0;
        for &(k, a, phase) in &self.lobes {
            boundary += a * (k * theta + phase).sin();
        }
        r / boundary.max(0.3)
    }
}

fn draw_nodule(
    rng: &mut ChaCha8Rng,
    size: usize,
    malignant: bool,
) -> (Vec<u8>, NoduleBox) {
    let s = size as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sample_normal = |rng: &mut ChaCha8Rng| normal.sample(rng);

    let shape = NoduleShape {
        cx: rng.random_range(0.32 * s..0.68 * s),
        cy: rng.random_range(0.32 * s..0.68 * s),
        rx: rng.random_range(0.14 * s..0.24 * s),
        ry: rng.random_range(0.14 * s..0.24 * s),
        rot: rng.random_range(0.0..std::f64::consts::PI),
        // Benign boundaries are gently lobulated too, so shape alone is a
        // graded cue rather than a giveaway.
        lobes: {
            let (n, amp_lo, amp_hi) = if malignant {
                (rng.random_range(2..=3), 0.05, 0.10)
            } else {
                (rng.random_range(1..=2), 0.012, 0.04)
            };
            (0..n)
                .map(|_| {
                    (
                        rng.random_range(4.0_f64..8.0).round(),
                        rng.random_range(amp_lo..amp_hi),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect()
        },
        edge_softness: if malignant { 0.10 } else { 0.16 },
    };

    // Echo levels: interiors overlap across classes on purpose, so raw
    // intensity alone is a weak cue and texture carries the signal.
    let bg_level = rng.random_range(88.0..112.0);
    let interior_level = rng.random_range(48.0..72.0);
    let grad_x = rng.random_range(-12.0..12.0);
    let grad_y = rng.random_range(-12.0..12.0);

    let mut pixels = vec![0u8; size * size];
    let (mut bx0, mut by0, mut bx1, mut by1) = (size, size, 0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / s;
            let fy = y as f64 / s;
            let rho = shape.rho(x as f64 + 0.5, y as f64 + 0.5);
            let inside = (1.0 - rho) / shape.edge_softness;
            let t = inside.clamp(0.0, 1.0);
            if rho < 1.0 {
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
            let base = bg_level * (1.0 - t) + interior_level * t + grad_x * fx + grad_y * fy;
            // Multiplicative speckle plus a little sensor noise.
            let speckle = 1.0 + 0.12 * sample_normal(rng);
            let value = base * f64::max(speckle, 0.15) + 2.0 * sample_normal(rng);
            pixels[y * size + x] = value.clamp(0.0, 255.0) as u8;
        }
    }

    // Salt-pepper pairs: the malignant texture cue. A dark pixel next to an
    // equally brightened neighbor cancels under area averaging (the raw
    // channel keeps its regional mean) but flips the local ordinal pattern,
    // so the LBP plane reads it loudly even after downsampling.
    let pairs = if malignant {
        rng.random_range(60..=110)
    } else {
        rng.random_range(0..=15)
    };
    let mut placed_pairs = 0;
    let mut pair_attempts = 0;
    while placed_pairs < pairs && pair_attempts < 1500 {
        pair_attempts += 1;
        let x = rng.random_range(bx0..bx1.max(bx0 + 1));
        let y = rng.random_range(by0..by1.max(by0 + 1));
        if x + 1 >= size || y + 1 >= size || shape.rho(x as f64 + 0.5, y as f64 + 0.5) >= 0.9 {
            continue;
        }
        let idx = y * size + x;
        let neighbor = if rng.random_bool(0.5) { idx + 1 } else { idx + size };
        let swing = rng.random_range(20.0..40.0);
        let dark = (pixels[idx] as f64 - swing).clamp(0.0, 255.0);
        let bright = (pixels[neighbor] as f64 + swing).clamp(0.0, 255.0);
        pixels[idx] = dark as u8;
        pixels[neighbor] = bright as u8;
        placed_pairs += 1;
    }

    // Echogenic clusters appear in both classes with the same count and the
    // same integrated brightness, but their shape differs: punctate (small,
    // intense) in malignant nodules vs diffuse (wide, dim) in benign ones.
    // Area-averaged raw intensity mostly blurs that distinction away; the
    // texture planes keep it.
    let clusters = rng.random_range(3..=6);
    let punctate_radius = s * rng.random_range(0.015..0.03);
    // The cluster style crosses over in 15% of images, so raw brightness
    // shape alone cannot fully separate the classes.
    let punctate_style = malignant == rng.random_bool(0.85);
    let (radius, peak_scale) = if punctate_style {
        (punctate_radius, 1.0)
    } else {
        let diffuse = s * rng.random_range(0.05..0.09);
        (diffuse, (punctate_radius / diffuse).powi(2))
    };
    let mut placed = 0;
    let mut attempts = 0;
    while placed < clusters && attempts < 200 {
        attempts += 1;
        let cx = rng.random_range(bx0..bx1.max(bx0 + 1)) as f64;
        let cy = rng.random_range(by0..by1.max(by0 + 1)) as f64;
        if shape.rho(cx + 0.5, cy + 0.5) < 0.8 {
            let bright = rng.random_range(160.0..220.0) * peak_scale;
            let r_px = (3.0 * radius).ceil() as isize;
            for dy in -r_px..=r_px {
                for dx in -r_px..=r_px {
                    let (px, py) = (cx as isize + dx, cy as isize + dy);
                    if px < 0 || py < 0 || px >= size as isize || py >= size as isize {
                        continue;
                    }
                    let dist2 = (dx * dx + dy * dy) as f64;
                    let falloff = (-dist2 / (2.0 * radius * radius)).exp();
                    if falloff > 0.02 {
                        let idx = py as usize * size + px as usize;
                        let lit = pixels[idx] as f64 + bright * falloff;
                        pixels[idx] = lit.min(255.0) as u8;
                    }
                }
            }
            placed += 1;
        }
    }

    let bbox = NoduleBox {
        x0: bx0.min(size - 1),
        y0: by0.min(size - 1),
        x1: bx1.max(bx0 + 1).min(size),
        y1: by1.max(by0 + 1).min(size),
    };
    (pixels, bbox)
}

/// Generates `spec.count` images under `out_dir/images/`, plus
/// `manifest.csv` and a `boxes.json` sidecar with the ground-truth nodule
/// bounding boxes. Byte-identical for identical specs.
pub fn generate_synthetic(
    out_dir: &Path,
    spec: &SynthSpec,
) -> Result<(DatasetManifest, BTreeMap<String, NoduleBox>), DataError> {
    if spec.size < 32 || spec.size % 2 != 0 {
        return Err(DataError::Infeasible(format!(
            "image size {} must be even and at least 32",
            spec.size
        )));
    }
    if spec.patients < 4 || spec.count < spec.patients || spec.count > 6 * spec.patients {
        return Err(DataError::Infeasible(format!(
            "{} images over {} patients violates 1..=6 images per patient (or fewer than 4 patients)",
            spec.count, spec.patients
        )));
    }
    if !(0.0..1.0).contains(&spec.malignant_fraction) || spec.malignant_fraction <= 0.0 {
        return Err(DataError::Infeasible(format!(
            "malignant fraction {} outside (0, 1)",
            spec.malignant_fraction
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[1]));
    // Distribute images over patients: start at 1 each, sprinkle the rest.
    let mut sizes = vec![1usize; spec.patients];
    let mut remaining = spec.count - spec.patients;
    while remaining > 0 {
        let i = rng.random_range(0..spec.patients);
        if sizes[i] < 6 {
            sizes[i] += 1;
            remaining -= 1;
        }
    }
    // Greedy class assignment toward the malignant sample target.
    let target = (spec.malignant_fraction * spec.count as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.patients).collect();
    order.shuffle(&mut rng);
    let mut malignant = vec![false; spec.patients];
    let mut mal_samples = 0usize;
    for &p in &order {
        if mal_samples + sizes[p] <= target {
            malignant[p] = true;
            mal_samples += sizes[p];
        }
    }
    // Keep at least two patients per class so splits stay feasible.
    for class in [true, false] {
        let mut have: Vec<usize> = (0..spec.patients).filter(|&p| malignant[p] == class).collect();
        let mut donors: Vec<usize> = (0..spec.patients).filter(|&p| malignant[p] != class).collect();
        donors.sort_by_key(|&p| sizes[p]);
        while have.len() < 2 {
            let p = donors.pop().expect("at least 4 patients");
            if donors.len() < 2 {
                break;
            }
            malignant[p] = class;
            have.push(p);
        }
    }

    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let mut samples = Vec::with_capacity(spec.count);
    let mut boxes = BTreeMap::new();
    // Seed-tagged ids keep patient sets from independently generated
    // datasets disjoint, as the D1/D2 protocol requires.
    let tag = derive(spec.seed, &[0x1d]) & 0xffff;
    for p in 0..spec.patients {
        let patient_id = format!("SP{tag:04x}-{p:04}");
        for i in 0..sizes[p] {
            let mut img_rng =
                ChaCha8Rng::seed_from_u64(derive(spec.seed, &[2, p as u64, i as u64]));
            let (pixels, bbox) = draw_nodule(&mut img_rng, spec.size, malignant[p]);
            let rel = format!("images/p{p:04}_i{i}.pgm");
            let img = GrayImage::new(spec.size, spec.size, pixels)
                .expect("generator sizes are valid");
            write_pgm(&out_dir.join(&rel), &img).map_err(|e| match e {
                crate::texture::TextureError::Io(io) => DataError::Io(io),
                other => DataError::BadImage {
                    path: out_dir.join(&rel),
                    source: other,
                },
            })?;
            let score = if malignant[p] {
                img_rng.random_range(3..=5)
            } else {
                img_rng.random_range(1..=2)
            };
            samples.push(Sample {
                image_path: out_dir.join(&rel),
                patient_id: patient_id.clone(),
                score,
                label: label_from_score(score),
            });
            boxes.insert(rel, bbox);
        }
    }

    let manifest = DatasetManifest {
        name: "synthetic".to_string(),
        samples,
    };
    super::write_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    std::fs::write(
        out_dir.join("boxes.json"),
        serde_json::to_string_pretty(&boxes).expect("boxes serialize"),
    )?;
    Ok((manifest, boxes))
}
