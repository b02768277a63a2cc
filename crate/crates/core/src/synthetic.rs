//! Procedural toy faces for desk-scale training and tests.
//!
//! Faces are smooth analytic shapes (head ellipse, eyes, mouth, hair,
//! optional occlusion bar) over a gradient background, drawn with soft
//! edges so pixel losses have useful gradients everywhere.

use crate::types::ImageTensor;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
struct FaceSpec {
    skin: [f64; 3],
    hair: [f64; 3],
    bg_top: [f64; 3],
    bg_bottom: [f64; 3],
    eye_color: [f64; 3],
    mouth_color: [f64; 3],
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    hairline: f64,
    occlusion: Option<(f64, f64, [f64; 3])>, // (center y, half height, color)
}

fn sample_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn sample_spec(rng: &mut ChaCha8Rng) -> FaceSpec {
    let skin_base = rng.gen_range(-0.1..0.6);
    FaceSpec {
        skin: [skin_base + 0.3, skin_base + 0.05, skin_base - 0.1],
        hair: sample_color(rng, -0.9, 0.1),
        bg_top: sample_color(rng, -0.8, 0.8),
        bg_bottom: sample_color(rng, -0.8, 0.8),
        eye_color: sample_color(rng, -0.9, -0.3),
        mouth_color: [rng.gen_range(0.0..0.7), rng.gen_range(-0.8..-0.3), rng.gen_range(-0.8..-0.3)],
        cx: rng.gen_range(0.42..0.58),
        cy: rng.gen_range(0.45..0.55),
        rx: rng.gen_range(0.22..0.32),
        ry: rng.gen_range(0.28..0.4),
        eye_dx: rng.gen_range(0.08..0.14),
        eye_y: rng.gen_range(-0.12..-0.04),
        eye_r: rng.gen_range(0.025..0.05),
        mouth_y: rng.gen_range(0.12..0.2),
        mouth_w: rng.gen_range(0.06..0.14),
        mouth_h: rng.gen_range(0.02..0.05),
        hairline: rng.gen_range(0.3..0.5),
        occlusion: if rng.gen_bool(0.25) {
            Some((rng.gen_range(0.3..0.7), rng.gen_range(0.04..0.09), sample_color(rng, -1.0, 1.0)))
        } else {
            None
        },
    }
}

/// Soft inside/outside indicator: 1 well inside, 0 well outside.
fn soft(d: f64, sharpness: f64) -> f64 {
    1.0 / (1.0 + (d * sharpness).exp())
}

fn mix(base: [f64; 3], over: [f64; 3], alpha: f64) -> [f64; 3] {
    [
        base[0] * (1.0 - alpha) + over[0] * alpha,
        base[1] * (1.0 - alpha) + over[1] * alpha,
        base[2] * (1.0 - alpha) + over[2] * alpha,
    ]
}

fn render(spec: &FaceSpec, size: usize) -> ImageTensor {
    let sharp = size as f64 * 0.5;
    let mut px = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            // background gradient
            let mut c = mix(spec.bg_top, spec.bg_bottom, v);
            // head ellipse
            let he = (((u - spec.cx) / spec.rx).powi(2) + ((v - spec.cy) / spec.ry).powi(2)).sqrt() - 1.0;
            let head_a = soft(he, sharp * 0.6);
            c = mix(c, spec.skin, head_a);
            // hair: upper part of the head
            let hair_d = (v - (spec.cy - spec.ry * spec.hairline)).max(he);
            let hair_a = soft(hair_d, sharp) * head_a;
            c = mix(c, spec.hair, hair_a);
            // eyes
            for side in [-1.0, 1.0] {
                let ex = spec.cx + side * spec.eye_dx;
                let ey = spec.cy + spec.eye_y;
                let de = (((u - ex) / spec.eye_r).powi(2) + ((v - ey) / (spec.eye_r * 0.7)).powi(2)).sqrt() - 1.0;
                let a = soft(de, sharp * 0.8) * head_a;
                c = mix(c, spec.eye_color, a);
            }
            // mouth
            let dm = (((u - spec.cx) / spec.mouth_w).powi(2)
                + ((v - (spec.cy + spec.mouth_y)) / spec.mouth_h).powi(2))
            .sqrt()
                - 1.0;
            let ma = soft(dm, sharp * 0.8) * head_a;
            c = mix(c, spec.mouth_color, ma);
            // occlusion bar across the image
            if let Some((oy, oh, color)) = spec.occlusion {
                let d = (v - oy).abs() - oh;
                let a = soft(d, sharp);
                c = mix(c, color, a * 0.9);
            }
            for ch in 0..3 {
                px[[y, x, ch]] = c[ch].clamp(-1.0, 1.0);
            }
        }
    }
    ImageTensor::new(px).expect("rendered face is valid")
}

/// Deterministic set of toy faces; face `i` is derived from `seed + i`.
pub fn synthetic_faces(count: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            render(&sample_spec(&mut rng), size)
        })
        .collect()
}
