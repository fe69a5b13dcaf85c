//! Small synthetic images and scenes, generated procedurally so tests and
//! demos need no binary assets.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{write_image, Image, CHANNELS};
use crate::transforms::{BoundingBox, SceneSpec};

fn render(height: usize, width: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Image {
    let mut data = Vec::with_capacity(height * width * CHANNELS);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            data.extend(f(u, v).map(|c| c.clamp(0.0, 1.0)));
        }
    }
    Image::new(height, width, data).expect("clamped")
}

/// A flat-shaded still life: sky, a ground plane, a disc and a box.
pub fn toy_photo(height: usize, width: usize) -> Image {
    render(height, width, |u, v| {
        let disc = (u - 0.32).powi(2) + (v - 0.38).powi(2) < 0.18f64.powi(2);
        let block = (0.55..0.85).contains(&u) && (0.45..0.8).contains(&v);
        if disc {
            [0.85, 0.3, 0.2]
        } else if block {
            [0.2, 0.35, 0.75]
        } else if v > 0.7 {
            [0.35, 0.55, 0.25]
        } else {
            [0.65, 0.8, 0.95]
        }
    })
}

fn smoothstep(edge: f64, width: f64, d: f64) -> f64 {
    let t = ((edge - d) / width).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// A soft-edged standing figure on a plain backdrop, with its bounding box.
/// The figure is shaded close to the backdrop so that, to the surrogate, the
/// bare scene is nearly featureless.
fn figure_scene(height: usize, width: usize, backdrop: [f64; 3], figure: [f64; 3], cx: f64) -> (Image, BoundingBox) {
    let (bw, bh) = (0.42, 0.8);
    let img = render(height, width, |u, v| {
        // elliptical body from shoulders to feet plus a round head
        let body = ((u - cx) / 0.17).powi(2) + ((v - 0.58) / 0.34).powi(2);
        let head = ((u - cx) / 0.07).powi(2) + ((v - 0.19) / 0.08).powi(2);
        let t = smoothstep(1.0, 0.9, body.sqrt()).max(smoothstep(1.0, 0.9, head.sqrt()));
        let shade = 0.04 * v;
        std::array::from_fn(|d| backdrop[d] + t * (figure[d] - backdrop[d]) - shade)
    });
    let bx = BoundingBox::new(
        ((cx - bw / 2.0) * width as f64).floor(),
        (0.1 * height as f64).floor(),
        (bw * width as f64).round(),
        (bh * height as f64).round(),
    );
    (img, bx)
}

/// Two 96×96 desk scenes with one person box each.
pub fn desk_scenes() -> Vec<SceneSpec> {
    let a = figure_scene(96, 96, [0.72, 0.7, 0.66], [0.62, 0.52, 0.5], 0.5);
    let b = figure_scene(96, 96, [0.5, 0.58, 0.64], [0.6, 0.6, 0.5], 0.45);
    [a, b]
        .into_iter()
        .map(|(img, bx)| SceneSpec::new(img, vec![bx]).expect("boxes fit by construction"))
        .collect()
}

/// Writes scenes as `scene{i}.ppm` plus `scenes.csv` into `dir`.
pub fn write_scene_dir(dir: impl AsRef<Path>, scenes: &[SceneSpec]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("image_path,x,y,w,h\n");
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("scene{i}.ppm");
        write_image(&s.image, dir.join(&name))?;
        for b in &s.boxes {
            let _ = writeln!(csv, "{name},{},{},{},{}", b.x, b.y, b.w, b.h);
        }
    }
    let path = dir.join("scenes.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}
