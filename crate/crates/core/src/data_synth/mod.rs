//! Procedural try-on pairs: a flat in-shop garment and a simple articulated
//! person wearing it, plus every agnostic mask the conditioning needs.

pub mod dataset;
pub mod morph;
pub mod warp;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{self, tag, Rng};

pub use dataset::{read_dataset, write_dataset, DatasetManifest, ManifestEntry, Split};
pub use morph::{augment_mask, dilate, erode};
pub use warp::{pseudo_warp, WarpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Logo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub textures: Vec<Texture>,
    /// Outward arm angle from vertical, degrees.
    pub arm_angle_min: f64,
    pub arm_angle_max: f64,
    /// Horizontal shift of the waist relative to the shoulders, pixels at 48 px width.
    pub lean_max: f64,
    pub warp_strength: f64,
    pub warp: WarpParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            textures: vec![Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Logo],
            arm_angle_min: 8.0,
            arm_angle_max: 40.0,
            lean_max: 2.0,
            warp_strength: 1.0,
            warp: WarpParams::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image dims {}x{} must be divisible by 4",
                self.height, self.width
            )));
        }
        if self.textures.is_empty() {
            return Err(Error::Config("texture set is empty".into()));
        }
        if !(0.0..=90.0).contains(&self.arm_angle_min)
            || !(self.arm_angle_min..=90.0).contains(&self.arm_angle_max)
        {
            return Err(Error::Config("arm angle range must satisfy 0 <= min <= max <= 90".into()));
        }
        if self.warp_strength < 0.0 || self.lean_max < 0.0 {
            return Err(Error::Config("warp strength and lean must be non-negative".into()));
        }
        Ok(())
    }
}

/// One paired training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TryOnSample {
    pub person: Image,
    pub garment: Image,
    pub agnostic_image: Image,
    pub agnostic_mask: Mask,
    pub skin_mask: Mask,
    pub foreground_mask: Mask,
    pub warped_garment: Image,
    pub warped_mask: Mask,
    pub seed: u64,
}

impl TryOnSample {
    pub const FIELDS: [&'static str; 8] = [
        "person",
        "garment",
        "agnostic_image",
        "agnostic_mask",
        "skin_mask",
        "foreground_mask",
        "warped_garment",
        "warped_mask",
    ];

    pub fn field(&self, name: &str) -> Option<&Image> {
        Some(match name {
            "person" => &self.person,
            "garment" => &self.garment,
            "agnostic_image" => &self.agnostic_image,
            "agnostic_mask" => &self.agnostic_mask,
            "skin_mask" => &self.skin_mask,
            "foreground_mask" => &self.foreground_mask,
            "warped_garment" => &self.warped_garment,
            "warped_mask" => &self.warped_mask,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Rgb([f32; 3]);

impl Rgb {
    fn random(r: &mut Rng, lo: f32, hi: f32) -> Self {
        Rgb([r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)])
    }
}

#[derive(Debug, Clone)]
struct GarmentDesign {
    texture: Texture,
    base: Rgb,
    accent: Rgb,
    detail: Rgb,
    cells: f64,
    vertical: bool,
}

impl GarmentDesign {
    fn random(r: &mut Rng, textures: &[Texture]) -> Self {
        let texture = textures[r.random_range(0..textures.len())];
        let base = Rgb::random(r, 0.1, 0.9);
        // keep the accent visibly different from the base colour
        let accent = Rgb(base.0.map(|c| if c > 0.5 { c - r.random_range(0.35..0.5) } else { c + r.random_range(0.35..0.5) }));
        let detail = Rgb::random(r, 0.0, 1.0);
        Self {
            texture,
            base,
            accent,
            detail,
            cells: r.random_range(3..=6) as f64,
            vertical: r.random(),
        }
    }

    /// Colour at garment coordinates `(u, v) ∈ [0,1]²`.
    fn color(&self, u: f64, v: f64) -> Rgb {
        match self.texture {
            Texture::Solid => self.base,
            Texture::Stripes => {
                let t = if self.vertical { u } else { v };
                if ((t * self.cells * 2.0).floor() as i64) % 2 == 0 {
                    self.base
                } else {
                    self.accent
                }
            }
            Texture::Checker => {
                let a = (u * self.cells).floor() as i64 + (v * self.cells * 1.4).floor() as i64;
                if a % 2 == 0 {
                    self.base
                } else {
                    self.accent
                }
            }
            Texture::Logo => {
                let (du, dv) = ((u - 0.5).abs(), (v - 0.32).abs());
                if du < 0.08 && dv < 0.06 {
                    self.detail
                } else if du < 0.2 && dv < 0.14 {
                    self.accent
                } else {
                    self.base
                }
            }
        }
    }
}

/// Trapezoid with horizontal rows: `(u, v)` coordinates come from the row
/// fraction and the horizontal fraction between the row's edges.
#[derive(Debug, Clone, Copy)]
struct Trapezoid {
    top: f64,
    bottom: f64,
    center_top: f64,
    center_bottom: f64,
    half_top: f64,
    half_bottom: f64,
}

impl Trapezoid {
    fn uv(&self, y: f64, x: f64) -> Option<(f64, f64)> {
        if y < self.top || y > self.bottom {
            return None;
        }
        let v = (y - self.top) / (self.bottom - self.top);
        let c = self.center_top + v * (self.center_bottom - self.center_top);
        let hw = self.half_top + v * (self.half_bottom - self.half_top);
        let u = (x - (c - hw)) / (2.0 * hw);
        (0.0..=1.0).contains(&u).then_some((u, v))
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Capsule {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (ay, ax) = self.a;
        let (by, bx) = self.b;
        let (vy, vx) = (by - ay, bx - ax);
        let len2 = vy * vy + vx * vx;
        let t = (((y - ay) * vy + (x - ax) * vx) / len2).clamp(0.0, 1.0);
        let (py, px) = (ay + t * vy, ax + t * vx);
        (y - py).powi(2) + (x - px).powi(2) <= self.radius * self.radius
    }
}

#[derive(Debug, Clone)]
struct BodyLayout {
    torso: Trapezoid,
    head_center: (f64, f64),
    head_radius: f64,
    neck: (f64, f64, f64, f64),
    arms: [Capsule; 2],
    legs: [(f64, f64, f64, f64); 2],
    background: Rgb,
    skin: Rgb,
    pants: Rgb,
    shade_amp: f64,
    shade_period: f64,
    shade_angle: f64,
    shade_phase: f64,
}

impl BodyLayout {
    fn random(r: &mut Rng, cfg: &DataConfig) -> Self {
        let sy = cfg.height as f64 / 64.0;
        let sx = cfg.width as f64 / 48.0;
        let cx = r.random_range(22.5..25.5) * sx;
        let lean = r.random_range(-cfg.lean_max..=cfg.lean_max) * sx;
        let top = r.random_range(17.0..19.0) * sy;
        let bottom = r.random_range(44.0..47.0) * sy;
        let half_top = r.random_range(9.0..11.0) * sx;
        let half_bottom = r.random_range(7.5..9.5) * sx;
        let torso = Trapezoid {
            top,
            bottom,
            center_top: cx,
            center_bottom: cx + lean,
            half_top,
            half_bottom,
        };
        let head_radius = r.random_range(5.0..6.5) * sy.min(sx);
        let head_center = (top - head_radius - 1.5 * sy, cx + r.random_range(-1.0..1.0) * sx);
        let neck = (head_center.0, top, cx - 2.0 * sx, cx + 2.0 * sx);
        let mut arm = |side: f64| {
            let ang = r.random_range(cfg.arm_angle_min..=cfg.arm_angle_max).to_radians();
            let len = r.random_range(20.0..24.0) * sy;
            let a = (top + 2.5 * sy, cx + side * (half_top - 1.5 * sx));
            let b = (a.0 + len * ang.cos(), a.1 + side * len * ang.sin() * sx / sy);
            Capsule {
                a,
                b,
                radius: 2.6 * sx,
            }
        };
        let arms = [arm(-1.0), arm(1.0)];
        let hip = cx + lean;
        let legs = [
            (bottom - 1.0, cfg.height as f64, hip - 7.5 * sx, hip - 0.5 * sx),
            (bottom - 1.0, cfg.height as f64, hip + 0.5 * sx, hip + 7.5 * sx),
        ];
        let tone = r.random_range(0.0..1.0f32);
        let skin = Rgb([
            0.95 - 0.45 * tone,
            0.8 - 0.45 * tone,
            0.7 - 0.45 * tone,
        ]);
        Self {
            torso,
            head_center,
            head_radius,
            neck,
            arms,
            legs,
            background: Rgb::random(r, 0.25, 0.75),
            skin,
            pants: Rgb::random(r, 0.05, 0.5),
            shade_amp: r.random_range(0.12..0.28),
            shade_period: r.random_range(11.0..17.0) * sy,
            shade_angle: r.random_range(0.0..std::f64::consts::PI),
            shade_phase: r.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn shading(&self, y: f64, x: f64) -> f64 {
        let proj = x * self.shade_angle.cos() + y * self.shade_angle.sin();
        let s = 0.5 + 0.5 * (std::f64::consts::TAU * proj / self.shade_period + self.shade_phase).sin();
        1.0 - self.shade_amp * s * s
    }

    fn in_head(&self, y: f64, x: f64) -> bool {
        let (hy, hx) = self.head_center;
        let in_disk = (y - hy).powi(2) + (x - hx).powi(2) <= self.head_radius.powi(2);
        let (y0, y1, x0, x1) = self.neck;
        (in_disk && y < y1) || (y >= y0 && y < y1 && x >= x0 && x <= x1)
    }

    fn in_legs(&self, y: f64, x: f64) -> bool {
        self.legs
            .iter()
            .any(|&(y0, y1, x0, x1)| y >= y0 && y <= y1 && x >= x0 && x <= x1)
    }

    fn in_arms(&self, y: f64, x: f64) -> bool {
        self.arms.iter().any(|a| a.contains(y, x))
    }
}

fn layout_for(seed: u64, cfg: &DataConfig) -> (BodyLayout, GarmentDesign) {
    let mut r = rng::rng_from(seed, &[tag::SAMPLE]);
    let design = GarmentDesign::random(&mut r, &cfg.textures);
    let body = BodyLayout::random(&mut r, cfg);
    (body, design)
}

/// The garment-covered torso pixels of the person in sample `seed`.
pub fn garment_region(seed: u64, cfg: &DataConfig) -> Mask {
    let (body, _) = layout_for(seed, cfg);
    let mut m = Mask::mask(cfg.height, cfg.width);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            if body.torso.uv(fy, fx).is_some() && !body.in_arms(fy, fx) {
                m.set(y, x, 0, 1.0);
            }
        }
    }
    m
}

/// The person image restricted to the garment region.
pub fn garment_on_body(sample: &TryOnSample, cfg: &DataConfig) -> (Image, Mask) {
    let region = garment_region(sample.seed, cfg);
    (sample.person.masked(&region), region)
}

/// Generates one sample; a pure function of `(seed, cfg)`.
pub fn gen_sample(seed: u64, cfg: &DataConfig) -> Result<TryOnSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let (body, design) = layout_for(seed, cfg);

    let mut person = Image::zeros(h, w, 3);
    let mut agnostic_mask = Mask::mask(h, w);
    let mut skin_mask = Mask::mask(h, w);
    let mut foreground_mask = Mask::mask(h, w);
    let mut region = Mask::mask(h, w);

    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut color = body.background;
            let mut fg = false;
            if body.in_legs(fy, fx) {
                color = body.pants;
                fg = true;
            }
            if let Some((u, v)) = body.torso.uv(fy, fx) {
                let s = body.shading(fy, fx) as f32;
                color = Rgb(design.color(u, v).0.map(|c| c * s));
                fg = true;
                agnostic_mask.set(y, x, 0, 1.0);
                region.set(y, x, 0, 1.0);
            }
            if body.in_arms(fy, fx) {
                color = body.skin;
                fg = true;
                agnostic_mask.set(y, x, 0, 1.0);
                skin_mask.set(y, x, 0, 1.0);
                region.set(y, x, 0, 0.0);
            }
            if body.in_head(fy, fx) {
                color = body.skin;
                fg = true;
                skin_mask.set(y, x, 0, 1.0);
            }
            if fg {
                foreground_mask.set(y, x, 0, 1.0);
            }
            for c in 0..3 {
                person.set(y, x, c, color.0[c].clamp(0.0, 1.0));
            }
        }
    }

    let mut garment = Image::filled(h, w, 3, 1.0);
    let (sy, sx) = (h as f64 / 64.0, w as f64 / 48.0);
    let flat = Trapezoid {
        top: 6.0 * sy,
        bottom: 58.0 * sy,
        center_top: 24.0 * sx,
        center_bottom: 24.0 * sx,
        half_top: 17.0 * sx,
        half_bottom: 15.0 * sx,
    };
    for y in 0..h {
        for x in 0..w {
            if let Some((u, v)) = flat.uv(y as f64 + 0.5, x as f64 + 0.5) {
                let c = design.color(u, v);
                for ch in 0..3 {
                    garment.set(y, x, ch, c.0[ch]);
                }
            }
        }
    }

    let mut agnostic_image = person.clone();
    for (px, m) in agnostic_image.data.chunks_exact_mut(3).zip(&agnostic_mask.data) {
        if *m == 1.0 {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let on_body = person.masked(&region);
    let (warped_garment, warped_mask) = pseudo_warp(
        &on_body,
        &region,
        rng::derive_seed(seed, &[tag::WARP]),
        cfg.warp_strength,
        &cfg.warp,
    );

    Ok(TryOnSample {
        person,
        garment,
        agnostic_image,
        agnostic_mask,
        skin_mask,
        foreground_mask,
        warped_garment,
        warped_mask,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = DataConfig::default();
        assert_eq!(gen_sample(0, &cfg).unwrap(), gen_sample(0, &cfg).unwrap());
        assert_ne!(gen_sample(0, &cfg).unwrap(), gen_sample(1, &cfg).unwrap());
    }

    #[test]
    fn agnostic_image_is_empty_inside_the_try_on_area() {
        let cfg = DataConfig::default();
        for seed in 0..10 {
            let s = gen_sample(seed, &cfg).unwrap();
            for (px, m) in s.agnostic_image.data.chunks_exact(3).zip(&s.agnostic_mask.data) {
                for v in px {
                    assert_eq!(v * m, 0.0);
                }
            }
        }
    }

    #[test]
    fn bad_dims_are_a_config_error() {
        let cfg = DataConfig {
            height: 62,
            ..DataConfig::default()
        };
        assert!(matches!(gen_sample(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn region_helper_matches_the_generator() {
        let cfg = DataConfig {
            warp_strength: 0.0,
            ..DataConfig::default()
        };
        let s = gen_sample(5, &cfg).unwrap();
        assert_eq!(garment_region(5, &cfg), s.warped_mask);
    }
}
