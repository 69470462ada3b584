//! Texture kernels vs naive reference implementations written directly from
//! the definitions, independent of the production code paths.

use fusecad::texture::{dwt_image, dwt_inverse, lbp_image, GrayImage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    let pixels = (0..w * h).map(|_| rng.random::<u8>()).collect();
    GrayImage::new(w, h, pixels).unwrap()
}

/// Naive per-pixel double loop straight from the LBP definition: clamp the
/// eight neighbor coordinates, compare with >=, set bits clockwise from the
/// top-left neighbor with the most significant bit first.
fn lbp_reference(img: &GrayImage) -> Vec<u8> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let at = |x: isize, y: isize| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut out = vec![0u8; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let c = at(x, y);
            let neighbors = [
                at(x - 1, y - 1),
                at(x, y - 1),
                at(x + 1, y - 1),
                at(x + 1, y),
                at(x + 1, y + 1),
                at(x, y + 1),
                at(x - 1, y + 1),
                at(x - 1, y),
            ];
            let mut code = 0u8;
            for (i, &n) in neighbors.iter().enumerate() {
                if n >= c {
                    code |= 1 << (7 - i);
                }
            }
            out[(y * w + x) as usize] = code;
        }
    }
    out
}

/// Closed-form 2x2-block Haar oracle: for a block [[a, b], [c, d]],
/// LL = (a+b+c+d)/2 lands at (x/2, y/2), the row-detail at (w/2 + x/2, y/2),
/// the column-detail at (x/2, h/2 + y/2), and the diagonal detail in the
/// last quadrant.
fn dwt_block_reference(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    assert!(w % 2 == 0 && h % 2 == 0);
    let mut out = vec![0.0f64; w * h];
    for by in 0..h / 2 {
        for bx in 0..w / 2 {
            let a = img.get(2 * bx, 2 * by) as f64;
            let b = img.get(2 * bx + 1, 2 * by) as f64;
            let c = img.get(2 * bx, 2 * by + 1) as f64;
            let d = img.get(2 * bx + 1, 2 * by + 1) as f64;
            out[by * w + bx] = (a + b + c + d) / 2.0;
            out[by * w + w / 2 + bx] = (a - b + c - d) / 2.0;
            out[(h / 2 + by) * w + bx] = (a + b - c - d) / 2.0;
            out[(h / 2 + by) * w + w / 2 + bx] = (a - b - c + d) / 2.0;
        }
    }
    out
}

#[test]
fn lbp_matches_naive_reference_on_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..100 {
        let w = rng.random_range(8..=32);
        let h = rng.random_range(8..=32);
        let img = random_image(&mut rng, w, h);
        let fast = lbp_image(&img);
        let naive = lbp_reference(&img);
        assert_eq!(fast.pixels(), &naive[..], "trial {trial} ({w}x{h})");
    }
}

#[test]
fn dwt_matches_block_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for trial in 0..100 {
        let w = 2 * rng.random_range(4..=16);
        let h = 2 * rng.random_range(4..=16);
        let img = random_image(&mut rng, w, h);
        let plane = dwt_image(&img);
        let oracle = dwt_block_reference(&img);
        for (i, (&got, &want)) in plane.values.iter().zip(&oracle).enumerate() {
            assert!(
                (got - want).abs() < 1e-12,
                "trial {trial} index {i}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn dwt_energy_conservation_on_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..100 {
        let w = 2 * rng.random_range(4..=16);
        let h = 2 * rng.random_range(4..=16);
        let img = random_image(&mut rng, w, h);
        let plane = dwt_image(&img);
        let e_pixels: f64 = img.pixels().iter().map(|&p| (p as f64).powi(2)).sum();
        let e_coeffs: f64 = plane.values.iter().map(|v| v * v).sum();
        assert!(
            (e_pixels - e_coeffs).abs() <= 1e-9 * e_pixels.max(1.0),
            "energy drift: {e_pixels} vs {e_coeffs}"
        );
    }
}

#[test]
fn dwt_inverse_recovers_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..20 {
        let w = rng.random_range(8..=33);
        let h = rng.random_range(8..=33);
        let img = random_image(&mut rng, w, h);
        let plane = dwt_image(&img);
        let back = dwt_inverse(&plane);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let want = img.get(x, y) as f64;
                let got = back[y * plane.width + x];
                assert!((got - want).abs() < 1e-9);
            }
        }
    }
}
