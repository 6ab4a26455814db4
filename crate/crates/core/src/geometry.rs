//! Pinhole stereo geometry, differentiable warping and the synthetic scene
//! generator used for training and evaluation.

use crate::autodiff::{valid_sample_mask, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Intrinsics plus the rigid transform from the target to the source camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub intrinsics: Mat3,
    pub baseline: f64,
    /// Rotation part of `T_{t→t'}`.
    pub rotation: Mat3,
    /// Translation part of `T_{t→t'}`, meters.
    pub translation: [f64; 3],
}

impl CameraRig {
    /// Rectified pair, principal point at the image center. The source camera
    /// sits `baseline` meters to the right of the target camera.
    pub fn rectified(focal: f64, width: usize, height: usize, baseline: f64) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        Self {
            intrinsics: [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]],
            baseline,
            rotation: IDENTITY,
            translation: [-baseline, 0.0, 0.0],
        }
    }

    pub fn focal(&self) -> f64 {
        self.intrinsics[0][0]
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.intrinsics[0][2], self.intrinsics[1][2])
    }

    /// The same pair seen from the other camera (`T_{t'→t}`).
    pub fn reversed(&self) -> Self {
        let r = self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = mat_vec(&rt, self.translation);
        Self {
            intrinsics: self.intrinsics,
            baseline: self.baseline,
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    fn inverse_intrinsics(&self) -> Result<Mat3> {
        let k = &self.intrinsics;
        let (fx, fy, s) = (k[0][0], k[1][1], k[0][1]);
        if fx == 0.0 || fy == 0.0 || k[2] != [0.0, 0.0, 1.0] || k[1][0] != 0.0 {
            return Err(Error::Config(
                "intrinsics must be upper-triangular with nonzero focal".into(),
            ));
        }
        let (cx, cy) = (k[0][2], k[1][2]);
        Ok([
            [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ])
    }

    /// Disparity in pixels of a point at depth `z` for a rectified rig.
    pub fn disparity(&self, z: f64) -> f64 {
        self.focal() * self.baseline / z
    }
}

/// Sampling coordinates in the source image for every target pixel:
/// `p' = K · T_{t→t'} · D_t[p] · K⁻¹ · p`. Returns (columns, rows), each `H×W`.
pub fn project_coords(depth: &Var, rig: &CameraRig) -> Result<(Var, Var)> {
    let shape = depth.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "project_coords",
            shape: shape.to_vec(),
            reason: "expected an H×W depth map".into(),
        });
    }
    if depth.value().data().iter().any(|&z| !(z > 0.0)) {
        return Err(Error::Domain { op: "project_coords" });
    }
    let (h, w) = (shape[0], shape[1]);
    let k_inv = rig.inverse_intrinsics()?;
    // q = K (R (z K⁻¹ p) + t) = z · (K R K⁻¹ p) + K t
    let mut dirs = [Tensor::zeros(&[h, w]), Tensor::zeros(&[h, w]), Tensor::zeros(&[h, w])];
    for y in 0..h {
        for x in 0..w {
            let ray = mat_vec(&k_inv, [x as f64, y as f64, 1.0]);
            let q = mat_vec(&rig.intrinsics, mat_vec(&rig.rotation, ray));
            for (d, v) in dirs.iter_mut().zip(q) {
                d.set(&[y, x], v);
            }
        }
    }
    let offset = mat_vec(&rig.intrinsics, rig.translation);
    let homog: Vec<Var> = dirs
        .into_iter()
        .zip(offset)
        .map(|(d, o)| Ok(depth.mul(&depth.constant_like(d))?.add_scalar(o)))
        .collect::<Result<_>>()?;
    let cols = homog[0].div(&homog[2])?;
    let rows = homog[1].div(&homog[2])?;
    Ok((cols, rows))
}

/// Bilinear sampling of `src` (`C×H×W`) at the given pixel coordinates, with
/// border clamping. Also returns the mask of in-bounds samples.
pub fn bilinear_sample(src: &Var, cols: &Var, rows: &Var) -> Result<(Var, Tensor)> {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let out = src.grid_sample(cols, rows)?;
    let mask = valid_sample_mask(cols.value(), rows.value(), w, h);
    Ok((out, mask))
}

/// Reconstructs the target view from `source` using the target depth.
pub fn warp(source: &Var, target_depth: &Var, rig: &CameraRig) -> Result<(Var, Tensor)> {
    let (cols, rows) = project_coords(target_depth, rig)?;
    bilinear_sample(source, &cols, &rows)
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub baseline: f64,
    /// Depth range of scene content, meters.
    pub depth_near: f64,
    pub depth_far: f64,
    /// Depth range the scene must fit in (the model's output range).
    pub limits: (f64, f64),
    /// Background plus foreground rectangles.
    pub planes: usize,
    /// Texture lattice spacing in pixels at the plane's nominal depth.
    pub texture_cell: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 64.0,
            baseline: 0.54,
            depth_near: 3.0,
            depth_far: 20.0,
            limits: (1.0, 80.0),
            planes: 3,
            texture_cell: 12.0,
        }
    }
}

impl SceneConfig {
    pub fn rig(&self) -> CameraRig {
        CameraRig::rectified(self.focal, self.width, self.height, self.baseline)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.limits;
        if !(0.0 < lo && lo < hi) {
            return Err(Error::Config(format!("invalid depth limits ({lo}, {hi})")));
        }
        if !(self.depth_near < self.depth_far && self.depth_near > lo && self.depth_far < hi) {
            return Err(Error::Config(format!(
                "scene depth range [{}, {}] outside ({lo}, {hi})",
                self.depth_near, self.depth_far
            )));
        }
        if self.width < 2 || self.height < 2 || self.focal <= 0.0 || self.planes == 0 || self.texture_cell <= 0.0 {
            return Err(Error::Config(
                "scene size, focal, plane count and texture cell must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A textured plane `n·P = k`, optionally bounded to a rectangle in world X/Y.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
    /// `[x0, x1, y0, y1]` in world meters; `None` is unbounded.
    pub bounds: Option<[f64; 4]>,
    pub texture_seed: u64,
    /// Meters per texture lattice cell.
    pub texture_scale: f64,
    pub tint: [f64; 3],
}

impl Plane {
    pub fn fronto_parallel(z: f64, bounds: Option<[f64; 4]>, texture_seed: u64, texture_scale: f64) -> Self {
        Self {
            normal: [0.0, 0.0, 1.0],
            offset: z,
            bounds,
            texture_seed,
            texture_scale,
            tint: [0.5, 0.5, 0.5],
        }
    }

    /// Ray parameter (= depth, since ray directions have unit z) of the hit.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let n = self.normal;
        let denom = n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2];
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - n[0] * origin[0] - n[1] * origin[1] - n[2] * origin[2]) / denom;
        if t <= 1e-9 {
            return None;
        }
        let (x, y) = (origin[0] + t * dir[0], origin[1] + t * dir[1]);
        match self.bounds {
            Some([x0, x1, y0, y1]) if !(x0..=x1).contains(&x) || !(y0..=y1).contains(&y) => None,
            _ => Some(t),
        }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = (x / self.texture_scale, y / self.texture_scale);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let seed = self.texture_seed.wrapping_mul(31).wrapping_add(c as u64);
            let n = 0.7 * value_noise(u, v, seed) + 0.3 * value_noise(2.0 * u, 2.0 * v, seed ^ 0xA5A5);
            *o = (self.tint[c] + 0.8 * (n - 0.5)).clamp(0.0, 1.0);
        }
        out
    }
}

fn hash64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = hash64(seed ^ hash64((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ hash64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (ix, iy) = (fu as i64, fv as i64);
    let (tx, ty) = (quintic(u - fu), quintic(v - fv));
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// A rendered rectified stereo pair with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub rig: CameraRig,
    pub planes: Vec<Plane>,
    /// `3×H×W`, values in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// `H×W`, meters.
    pub depth_left: Tensor,
    pub depth_right: Tensor,
    /// `H×W`: 1 where the surface point is seen by the other camera.
    pub visible_left: Tensor,
    pub visible_right: Tensor,
}

fn nearest_hit(planes: &[Plane], origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize)> {
    planes
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| (t, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

struct View {
    image: Tensor,
    depth: Tensor,
    visible: Tensor,
}

fn render_view(
    planes: &[Plane],
    rig: &CameraRig,
    width: usize,
    height: usize,
    cam_x: f64,
    other_x: f64,
) -> Result<View> {
    let f = rig.focal();
    let (cx, cy) = rig.principal_point();
    let mut image = Tensor::zeros(&[3, height, width]);
    let mut depth = Tensor::zeros(&[height, width]);
    let mut visible = Tensor::zeros(&[height, width]);
    for y in 0..height {
        for x in 0..width {
            let dir = [(x as f64 - cx) / f, (y as f64 - cy) / f, 1.0];
            let origin = [cam_x, 0.0, 0.0];
            let Some((t, idx)) = nearest_hit(planes, origin, dir) else {
                return Err(Error::Config(format!("pixel ({x}, {y}) sees no surface")));
            };
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], t];
            let rgb = planes[idx].color(p[0], p[1]);
            for (c, v) in rgb.into_iter().enumerate() {
                image.set(&[c, y, x], v);
            }
            depth.set(&[y, x], t);
            // seen from the other camera?
            let u_other = f * (p[0] - other_x) / p[2] + cx;
            let in_frame = (0.0..=(width - 1) as f64).contains(&u_other);
            let other_dir = [(p[0] - other_x) / p[2], p[1] / p[2], 1.0];
            let unoccluded = nearest_hit(planes, [other_x, 0.0, 0.0], other_dir)
                .is_some_and(|(t2, _)| (t2 - p[2]).abs() <= 1e-9 * p[2].max(1.0));
            visible.set(&[y, x], if in_frame && unoccluded { 1.0 } else { 0.0 });
        }
    }
    Ok(View { image, depth, visible })
}

impl SyntheticScene {
    /// Pixels of the left view whose whole 3×3 neighborhood is seen by the
    /// right camera.
    pub fn interior_visible_left(&self) -> Tensor {
        erode3(&self.visible_left)
    }

    pub fn interior_visible_right(&self) -> Tensor {
        erode3(&self.visible_right)
    }
}

/// 3×3 minimum filter of an `H×W` mask, replicating the border.
pub fn erode3(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    m = m.min(mask.at(&[yy, xx]));
                }
            }
            out.set(&[y, x], m);
        }
    }
    out
}

/// Renders both views of `planes` with the rig implied by `cfg`.
pub fn render_scene(cfg: &SceneConfig, planes: Vec<Plane>) -> Result<SyntheticScene> {
    cfg.validate()?;
    let rig = cfg.rig();
    let left = render_view(&planes, &rig, cfg.width, cfg.height, 0.0, cfg.baseline)?;
    let right = render_view(&planes, &rig, cfg.width, cfg.height, cfg.baseline, 0.0)?;
    let (lo, hi) = cfg.limits;
    for d in left.depth.data().iter().chain(right.depth.data()) {
        if !(*d > lo && *d < hi) {
            return Err(Error::Config(format!("rendered depth {d} outside ({lo}, {hi})")));
        }
    }
    Ok(SyntheticScene {
        rig,
        planes,
        left: left.image,
        right: right.image,
        depth_left: left.depth.round_f32(),
        depth_right: right.depth.round_f32(),
        visible_left: left.visible,
        visible_right: right.visible,
    })
}

/// World meters per texture cell for a plane at nominal depth `z`.
pub fn texture_scale(cfg: &SceneConfig, z: f64) -> f64 {
    cfg.texture_cell * z / cfg.focal
}

/// Deterministic random scene: a far background plus `planes − 1` nearer
/// rectangles, some of them slanted.
pub fn make_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut state = hash64(seed ^ 0x5EED);
    let mut next = move || {
        state = hash64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let inv_near = 1.0 / cfg.depth_near;
    let inv_far = 1.0 / cfg.depth_far;
    // sample depths uniformly in inverse depth (uniform in disparity)
    let sample_depth = |lo: f64, hi: f64, r: f64| 1.0 / (inv_far + (inv_near - inv_far) * (lo + (hi - lo) * r));
    let z_bg = sample_depth(0.0, 0.35, next());
    let mut planes = vec![Plane {
        tint: [0.35 + 0.3 * next(), 0.35 + 0.3 * next(), 0.35 + 0.3 * next()],
        ..Plane::fronto_parallel(z_bg, None, hash64(seed), texture_scale(cfg, z_bg))
    }];
    let half_fov_x = (cfg.width as f64 / 2.0) / cfg.focal;
    let half_fov_y = (cfg.height as f64 / 2.0) / cfg.focal;
    for i in 1..cfg.planes {
        let z = sample_depth(0.4, 1.0, next());
        let (cxw, cyw) = (
            (next() * 1.6 - 0.8) * half_fov_x * z,
            (next() * 1.6 - 0.8) * half_fov_y * z,
        );
        let (hw, hh) = (
            (0.2 + 0.35 * next()) * half_fov_x * z,
            (0.2 + 0.35 * next()) * half_fov_y * z,
        );
        let slant = if next() < 0.5 { (next() - 0.5) * 0.8 } else { 0.0 };
        // Z = z + slant·(X − cxw)  ⇔  −slant·X + Z = z − slant·cxw
        let normal_x = -slant;
        let norm = (normal_x * normal_x + 1.0).sqrt();
        let bounds = [cxw - hw, cxw + hw, cyw - hh, cyw + hh];
        // keep slanted rectangles inside the scene depth range
        let z_min = z - slant.abs() * hw;
        let z_max = z + slant.abs() * hw;
        let slant = if z_min <= cfg.depth_near || z_max >= z_bg {
            0.0
        } else {
            slant
        };
        let (normal, offset) = if slant == 0.0 {
            ([0.0, 0.0, 1.0], z)
        } else {
            ([normal_x / norm, 0.0, 1.0 / norm], (z - slant * cxw) / norm)
        };
        planes.push(Plane {
            normal,
            offset,
            bounds: Some(bounds),
            texture_seed: hash64(seed.wrapping_add(i as u64 * 7919)),
            texture_scale: texture_scale(cfg, z),
            tint: [0.3 + 0.4 * next(), 0.3 + 0.4 * next(), 0.3 + 0.4 * next()],
        });
    }
    render_scene(cfg, planes)
}

/// A single fronto-parallel plane filling the view.
pub fn fronto_parallel_scene(seed: u64, cfg: &SceneConfig, z: f64) -> Result<SyntheticScene> {
    let plane = Plane {
        tint: [0.5, 0.45, 0.55],
        ..Plane::fronto_parallel(z, None, hash64(seed), texture_scale(cfg, z))
    };
    render_scene(cfg, vec![plane])
}

/// A near rectangle in front of a far background. The rectangle spans the
/// full height and starts at image column `edge_col` (in the left view),
/// extending past the right border.
pub fn two_plane_scene(seed: u64, cfg: &SceneConfig, z_near: f64, z_far: f64, edge_col: f64) -> Result<SyntheticScene> {
    let (cx, _) = cfg.rig().principal_point();
    let x_edge = (edge_col - cx) / cfg.focal * z_near;
    let big = 1e3;
    let near = Plane {
        tint: [0.6, 0.4, 0.45],
        ..Plane::fronto_parallel(
            z_near,
            Some([x_edge, big, -big, big]),
            hash64(seed ^ 1),
            texture_scale(cfg, z_near),
        )
    };
    let far = Plane {
        tint: [0.4, 0.55, 0.5],
        ..Plane::fronto_parallel(z_far, None, hash64(seed ^ 2), texture_scale(cfg, z_far))
    };
    render_scene(cfg, vec![far, near])
}
