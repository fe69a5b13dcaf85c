//! Randomized patch placement: rotation, scaling, brightness, contrast and
//! additive noise, bilinear warping into a scene, and the adjoint of the
//! whole chain back to patch pixels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{read_image, Gradient, Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn symmetric(half: f64) -> Self {
        Self { lo: -half, hi: half }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.gen::<f64>()
    }

    fn is_ordered(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EotParams {
    pub rotation_deg: Interval,
    pub scale: Interval,
    pub brightness: Interval,
    pub contrast: Interval,
    /// Half-width of the per-pixel uniform noise.
    pub noise: f64,
    pub samples_per_scene: usize,
    pub seed: u64,
    /// Nominal patch side as a fraction of `√(box area)`.
    pub patch_scale: f64,
}

impl Default for EotParams {
    fn default() -> Self {
        Self {
            rotation_deg: Interval::symmetric(20.0),
            scale: Interval::new(0.75, 1.25),
            brightness: Interval::symmetric(0.1),
            contrast: Interval::new(0.8, 1.2),
            noise: 0.1,
            samples_per_scene: 1,
            seed: 0,
            patch_scale: 0.3,
        }
    }
}

impl EotParams {
    /// All ranges collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Interval::point(0.0),
            scale: Interval::point(1.0),
            brightness: Interval::point(0.0),
            contrast: Interval::point(1.0),
            noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [
            ("rotation", self.rotation_deg),
            ("scale", self.scale),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
        ] {
            if !iv.is_ordered() {
                return Err(Error::InvalidConfig(format!(
                    "{name} range [{}, {}] is not ordered",
                    iv.lo, iv.hi
                )));
            }
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::InvalidConfig("scale range must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidConfig("noise amplitude must be nonnegative".into()));
        }
        if !(self.patch_scale > 0.0 && self.patch_scale.is_finite()) {
            return Err(Error::InvalidConfig("patch_scale must be positive".into()));
        }
        if self.samples_per_scene == 0 {
            return Err(Error::InvalidConfig("samples_per_scene must be at least 1".into()));
        }
        Ok(())
    }
}

/// One draw of the randomized transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformInstance {
    pub rotation_deg: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise: f64,
    /// Seeds the per-pixel noise field.
    pub noise_seed: u64,
}

impl TransformInstance {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.scale == 1.0
            && self.brightness == 0.0
            && self.contrast == 1.0
            && self.noise == 0.0
    }

    /// Uniform noise in `[-noise, noise]` for every scene pixel and channel.
    pub fn noise_field(&self, height: usize, width: usize) -> Vec<f64> {
        let n = height * width * CHANNELS;
        if self.noise == 0.0 {
            return vec![0.0; n];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        (0..n).map(|_| self.noise * (2.0 * rng.gen::<f64>() - 1.0)).collect()
    }
}

pub fn sample_transforms(params: &EotParams, count: usize, rng: &mut impl Rng) -> Vec<TransformInstance> {
    (0..count)
        .map(|_| TransformInstance {
            rotation_deg: params.rotation_deg.draw(rng),
            scale: params.scale.draw(rng),
            brightness: params.brightness.draw(rng),
            contrast: params.contrast.draw(rng),
            noise: params.noise,
            noise_seed: rng.gen(),
        })
        .collect()
}

/// Axis-aligned target region in scene pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Center in pixel-center coordinates (pixel `i` spans `[i − ½, i + ½]`).
    pub fn center(&self) -> (f64, f64) {
        (self.x + (self.w - 1.0) / 2.0, self.y + (self.h - 1.0) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
}

impl SceneSpec {
    pub fn new(image: Image, boxes: Vec<BoundingBox>) -> Result<Self> {
        let (h, w) = (image.height() as f64, image.width() as f64);
        for b in &boxes {
            let ok = b.w > 0.0 && b.h > 0.0 && b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= w && b.y + b.h <= h;
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "box {b:?} does not fit inside a {w}x{h} scene"
                )));
            }
        }
        Ok(Self { image, boxes })
    }
}

/// Reads `scenes.csv` (`image_path,x,y,w,h`) from a fixture directory. Rows
/// sharing an image path become one scene with several boxes; image paths
/// are relative to the directory.
pub fn load_scenes(dir: impl AsRef<Path>) -> Result<Vec<SceneSpec>> {
    let dir = dir.as_ref();
    let csv_path = dir.join("scenes.csv");
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "image_path,x,y,w,h" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header image_path,x,y,w,h".into(),
            })
        }
    }
    let mut grouped: Vec<(String, Vec<BoundingBox>)> = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let mut nums = [0.0; 4];
        for (v, f) in nums.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("not a number: {f:?}"),
            })?;
        }
        let b = BoundingBox::new(nums[0], nums[1], nums[2], nums[3]);
        match grouped.iter_mut().find(|(p, _)| p == fields[0]) {
            Some((_, boxes)) => boxes.push(b),
            None => grouped.push((fields[0].to_string(), vec![b])),
        }
    }
    if grouped.is_empty() {
        return Err(Error::InvalidConfig(format!("{} lists no scenes", csv_path.display())));
    }
    grouped
        .into_iter()
        .map(|(p, boxes)| SceneSpec::new(read_image(dir.join(p))?, boxes))
        .collect()
}

/// Where a warped patch landed and how to sample it.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGeometry {
    /// Patch → scene affine map `[a, b, c, d, e, f]`: `u = a·x + b·y + c`,
    /// `v = d·x + e·y + f`.
    pub affine: [f64; 6],
    inverse: [f64; 6],
    patch_dims: (usize, usize),
    scene_dims: (usize, usize),
    /// Scene pixel window `[x0, x1) × [y0, y1)` that can receive patch mass.
    window: (usize, usize, usize, usize),
}

impl WarpGeometry {
    fn new(patch_dims: (usize, usize), scene_dims: (usize, usize), t: &TransformInstance, bx: &BoundingBox, patch_scale: f64) -> Self {
        let (ph, pw) = patch_dims;
        let side = patch_scale * (bx.w * bx.h).sqrt() * t.scale;
        let zoom = side / ((pw * ph) as f64).sqrt();
        let (sin, cos) = exact_sin_cos(t.rotation_deg);
        let (cx, cy) = bx.center();
        let (pcx, pcy) = ((pw as f64 - 1.0) / 2.0, (ph as f64 - 1.0) / 2.0);
        let affine = [
            zoom * cos,
            -zoom * sin,
            cx - zoom * (cos * pcx - sin * pcy),
            zoom * sin,
            zoom * cos,
            cy - zoom * (sin * pcx + cos * pcy),
        ];
        let inverse = [
            cos / zoom,
            sin / zoom,
            pcx - (cos * cx + sin * cy) / zoom,
            -sin / zoom,
            cos / zoom,
            pcy - (-sin * cx + cos * cy) / zoom,
        ];

        // patch footprint including the half-pixel bilinear fringe
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in [(-1.0, -1.0), (pw as f64, -1.0), (-1.0, ph as f64), (pw as f64, ph as f64)] {
            let u = affine[0] * x + affine[1] * y + affine[2];
            let v = affine[3] * x + affine[4] * y + affine[5];
            lo_u = lo_u.min(u);
            hi_u = hi_u.max(u);
            lo_v = lo_v.min(v);
            hi_v = hi_v.max(v);
        }
        let (sh, sw) = scene_dims;
        let clip = |lo: f64, hi: f64, n: usize| {
            let a = lo.floor().max(0.0).min(n as f64) as usize;
            let b = (hi.ceil() + 1.0).max(0.0).min(n as f64) as usize;
            (a, b.max(a))
        };
        let (x0, x1) = clip(lo_u, hi_u, sw);
        let (y0, y1) = clip(lo_v, hi_v, sh);
        Self {
            affine,
            inverse,
            patch_dims,
            scene_dims,
            window: (x0, x1, y0, y1),
        }
    }

    /// Calls `f(scene_pixel, patch_pixel, weight)` for every bilinear tap that
    /// lands inside the patch.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        let (ph, pw) = self.patch_dims;
        let sw = self.scene_dims.1;
        let (x0, x1, y0, y1) = self.window;
        let m = &self.inverse;
        for v in y0..y1 {
            for u in x0..x1 {
                let (uf, vf) = (u as f64, v as f64);
                let px = m[0] * uf + m[1] * vf + m[2];
                let py = m[3] * uf + m[4] * vf + m[5];
                let (fx, fy) = (px.floor(), py.floor());
                let (ax, ay) = (px - fx, py - fy);
                let s = v * sw + u;
                for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                    let ty = fy as i64 + dy;
                    if ty < 0 || ty >= ph as i64 || wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                        let tx = fx as i64 + dx;
                        if tx < 0 || tx >= pw as i64 || wx == 0.0 {
                            continue;
                        }
                        f(s, ty as usize * pw + tx as usize, wx * wy);
                    }
                }
            }
        }
    }

    /// Adjoint of the bilinear resampling: scene-shaped 3-channel values back
    /// to patch pixels.
    pub fn adjoint(&self, upstream: &[f64]) -> Vec<f64> {
        let (ph, pw) = self.patch_dims;
        let mut out = vec![0.0; ph * pw * CHANNELS];
        self.for_each_tap(|s, p, w| {
            for d in 0..CHANNELS {
                out[p * CHANNELS + d] += w * upstream[s * CHANNELS + d];
            }
        });
        out
    }
}

fn exact_sin_cos(deg: f64) -> (f64, f64) {
    if deg.rem_euclid(90.0) == 0.0 {
        match (deg.rem_euclid(360.0) / 90.0) as u32 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// A patch resampled onto the scene grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPatch {
    pub geometry: WarpGeometry,
    /// Scene-sized, 3 channels, zero outside the support.
    pub values: Vec<f64>,
    /// Scene-sized, 1 channel: the resampled all-ones patch.
    pub mask: Vec<f64>,
}

/// Scales the patch to side `patch_scale · √(w·h) · scale`, rotates it about
/// its center and centers it on the box, sampling bilinearly with zeros
/// outside the patch.
pub fn warp_patch(
    patch: &Image,
    transform: &TransformInstance,
    bx: &BoundingBox,
    scene_dims: (usize, usize),
    patch_scale: f64,
) -> Result<WarpedPatch> {
    let geometry = WarpGeometry::new(patch.dims(), scene_dims, transform, bx, patch_scale);
    let n = scene_dims.0 * scene_dims.1;
    let mut values = vec![0.0; n * CHANNELS];
    let mut mask = vec![0.0; n];
    let p = patch.data();
    geometry.for_each_tap(|s, q, w| {
        mask[s] += w;
        for d in 0..CHANNELS {
            values[s * CHANNELS + d] += w * p[q * CHANNELS + d];
        }
    });
    if mask.iter().all(|&m| m == 0.0) {
        return Err(Error::PatchOutsideScene);
    }
    Ok(WarpedPatch {
        geometry,
        values,
        mask,
    })
}

/// Everything the backward pass needs about one composited box.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub transform: TransformInstance,
    pub geometry: WarpGeometry,
    pub mask: Vec<f64>,
    /// Whether the jittered value was inside `[0, 1]` (clamp passes gradient).
    gate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppliedPatch {
    pub composited: Image,
    /// In compositing order; later placements sit on top.
    pub placements: Vec<Placement>,
    pub patch_dims: (usize, usize),
}

/// `out = (1 − m)·scene + m·clamp(contrast·warped + brightness + noise)`.
pub fn composite(
    scene: &Image,
    warped: &WarpedPatch,
    transform: &TransformInstance,
    noise: &[f64],
) -> Result<AppliedPatch> {
    let (h, w) = scene.dims();
    if warped.geometry.scene_dims != (h, w) || noise.len() != h * w * CHANNELS {
        return Err(Error::shape((h, w), warped.geometry.scene_dims));
    }
    let s = scene.data();
    let mut out = Vec::with_capacity(s.len());
    let mut gate = Vec::with_capacity(s.len());
    for (k, &bg) in s.iter().enumerate() {
        let m = warped.mask[k / CHANNELS];
        let jittered = transform.contrast * warped.values[k] + transform.brightness + noise[k];
        gate.push((0.0..=1.0).contains(&jittered));
        out.push((1.0 - m) * bg + m * jittered.clamp(0.0, 1.0));
    }
    Ok(AppliedPatch {
        composited: Image::from_clamped(h, w, out)?,
        placements: vec![Placement {
            transform: *transform,
            geometry: warped.geometry.clone(),
            mask: warped.mask.clone(),
            gate,
        }],
        patch_dims: warped.geometry.patch_dims,
    })
}

/// Warps and composites the patch into every box of the scene, one
/// transform per box.
pub fn apply_patch(
    scene: &SceneSpec,
    patch: &Image,
    transforms: &[TransformInstance],
    patch_scale: f64,
) -> Result<AppliedPatch> {
    if transforms.len() != scene.boxes.len() {
        return Err(Error::InvalidConfig(format!(
            "{} transforms for {} boxes",
            transforms.len(),
            scene.boxes.len()
        )));
    }
    let dims = scene.image.dims();
    let mut current = scene.image.clone();
    let mut placements = Vec::with_capacity(transforms.len());
    for (bx, t) in scene.boxes.iter().zip(transforms) {
        let warped = warp_patch(patch, t, bx, dims, patch_scale)?;
        let applied = composite(&current, &warped, t, &t.noise_field(dims.0, dims.1))?;
        current = applied.composited;
        placements.extend(applied.placements);
    }
    Ok(AppliedPatch {
        composited: current,
        placements,
        patch_dims: patch.dims(),
    })
}

/// Routes a gradient on the composited scene back to patch pixels, through
/// every placement in reverse compositing order.
pub fn backward_to_patch(applied: &AppliedPatch, upstream: &Gradient) -> Result<Gradient> {
    if applied.placements.is_empty() {
        return Err(Error::MissingPlacement);
    }
    upstream.check_dims(applied.composited.dims())?;
    let (ph, pw) = applied.patch_dims;
    let mut patch_grad = vec![0.0; ph * pw * CHANNELS];
    let mut g = upstream.data().to_vec();
    let mut local = vec![0.0; g.len()];
    for p in applied.placements.iter().rev() {
        for (k, l) in local.iter_mut().enumerate() {
            let m = p.mask[k / CHANNELS];
            *l = if p.gate[k] { m * p.transform.contrast * g[k] } else { 0.0 };
            g[k] *= 1.0 - m;
        }
        for (acc, v) in patch_grad.iter_mut().zip(p.geometry.adjoint(&local)) {
            *acc += v;
        }
    }
    Gradient::new(ph, pw, patch_grad)
}
