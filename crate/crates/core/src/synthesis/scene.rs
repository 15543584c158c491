//! Procedural night scenes standing in for a captured clean/depth corpus.

use rand::Rng;

use crate::error::Result;
use crate::image::{DepthMap, Plane, RadianceImage};

struct Building {
    x0: usize,
    x1: usize,
    top: usize,
    color: [f64; 3],
    depth: f64,
    window: [f64; 3],
}

fn buildings<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Vec<Building> {
    let count = rng.random_range(2..=5);
    (0..count)
        .map(|_| {
            let bw = rng.random_range(width / 8..=width / 3).max(2);
            let x0 = rng.random_range(0..width - bw.min(width - 1));
            let top = rng.random_range(height / 6..height * 2 / 3);
            let g = rng.random_range(0.05..0.3);
            Building {
                x0,
                x1: (x0 + bw).min(width),
                top,
                color: [
                    g * rng.random_range(0.7..1.3),
                    g,
                    g * rng.random_range(0.7..1.3),
                ]
                .map(|c: f64| c.min(1.0)),
                depth: rng.random_range(0.25..0.8),
                window: [
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.5..0.9),
                    rng.random_range(0.2..0.6),
                ],
            }
        })
        .collect()
}

/// A clean night image and its normalized depth, drawn from the same scene
/// layout: a far sky at depth 1, a ground plane receding towards the horizon,
/// box-shaped buildings with lit windows, and a few ellipsoid foreground
/// objects.
pub fn procedural_pair<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
) -> Result<(RadianceImage, DepthMap)> {
    let horizon = rng.random_range(height / 3..height / 2).max(1);
    let sky_top = [
        rng.random_range(0.0..0.08),
        rng.random_range(0.0..0.1),
        rng.random_range(0.1..0.3),
    ];
    let ground = [
        rng.random_range(0.1..0.3),
        rng.random_range(0.1..0.3),
        rng.random_range(0.1..0.3),
    ];
    let blds = buildings(rng, height, width);
    let window_period = rng.random_range(3..6usize);
    let blobs: Vec<(f64, f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                rng.random_range(horizon as f64..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(height as f64 / 12.0..height as f64 / 5.0),
                rng.random_range(width as f64 / 12.0..width as f64 / 5.0),
                rng.random_range(0.05..0.3),
                [
                    rng.random_range(0.1..0.8),
                    rng.random_range(0.1..0.8),
                    rng.random_range(0.1..0.8),
                ],
            )
        })
        .collect();
    let noise: Vec<f64> = (0..height * width)
        .map(|_| rng.random_range(-0.02..0.02))
        .collect();

    let mut depth = Plane::filled(height, width, 1.0)?;
    let clean = RadianceImage::from_fn(height, width, |y, x| {
        let (mut c, mut d);
        if y < horizon {
            let f = y as f64 / horizon as f64;
            c = sky_top.map(|v| v * (0.5 + f));
            d = 1.0;
        } else {
            let f = (y - horizon) as f64 / (height - horizon).max(1) as f64;
            c = ground.map(|v| v * (0.6 + 0.4 * f));
            d = 0.95 * (1.0 - f) + 0.05;
        }
        for b in &blds {
            if x >= b.x0 && x < b.x1 && y >= b.top && b.depth < d {
                d = b.depth;
                let lit = (y - b.top) % window_period == 1 && (x - b.x0) % window_period == 1;
                c = if lit { b.window } else { b.color };
            }
        }
        for &(cy, cx, ry, rx, bd, col) in &blobs {
            let r2 = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
            if r2 < 1.0 {
                let dz = bd + 0.1 * r2;
                if dz < d {
                    d = dz;
                    let shade = 1.0 - 0.5 * r2;
                    c = col.map(|v| v * shade);
                }
            }
        }
        depth.set(y, x, d.clamp(0.0, 1.0));
        let n = noise[y * width + x];
        c.map(|v| (v + n).clamp(0.0, 1.0))
    })?;
    Ok((clean, DepthMap::new(depth)))
}

pub fn procedural_clean<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
) -> Result<RadianceImage> {
    procedural_pair(rng, height, width).map(|p| p.0)
}

/// Depth only: a vertical ramp (far at the top) with random ellipsoid bumps.
pub fn procedural_depth<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
) -> Result<DepthMap> {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=4))
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(2.0..(height as f64 / 3.0).max(3.0)),
                rng.random_range(0.1..0.5),
            )
        })
        .collect();
    let plane = Plane::from_fn(height, width, |y, x| {
        let mut d = 1.0 - y as f64 / (height - 1).max(1) as f64;
        for &(cy, cx, r, depth) in &bumps {
            let r2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (r * r);
            if r2 < 1.0 {
                d = d.min(depth + 0.1 * r2);
            }
        }
        d.clamp(0.0, 1.0)
    })?;
    Ok(DepthMap::new(plane))
}
