//! Synthetic scenes: shaded elliptical nuclei on a noisy textured background,
//! with instance ground truth and bounding-box-center point annotations.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{label_regions, Connectivity};
use crate::io;
use crate::raster::{Grid, InstanceLabelMap, Point, PointSet, RasterImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_nuclei: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Background pixels required between any two nuclei (Chebyshev).
    pub min_gap: usize,
    pub nucleus_color: [u8; 3],
    /// Per-nucleus uniform color offset, per channel.
    pub nucleus_jitter: f64,
    pub background_color: [u8; 3],
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    /// Box blur radius applied after rendering (0 disables).
    pub blur_radius: usize,
    /// Biases placement toward sitting `min_gap` away from an existing nucleus.
    pub crowding: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            n_nuclei: 25,
            radius_min: 5.0,
            radius_max: 9.0,
            min_gap: 1,
            nucleus_color: [95, 50, 145],
            nucleus_jitter: 20.0,
            background_color: [225, 175, 205],
            noise: 12.0,
            blur_radius: 1,
            crowding: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!(
                "scene size {}x{} must be positive",
                self.height, self.width
            ));
        }
        if !(self.radius_min >= 1.0
            && self.radius_min <= self.radius_max
            && self.radius_max.is_finite())
        {
            return bad(format!(
                "radius range [{}, {}] must satisfy 1 <= radius_min <= radius_max",
                self.radius_min, self.radius_max
            ));
        }
        if !(self.nucleus_jitter >= 0.0 && self.noise >= 0.0) {
            return bad("nucleus_jitter and noise must be >= 0".into());
        }
        if self.nucleus_jitter > 255.0 || self.noise > 255.0 {
            return bad("nucleus_jitter and noise must be <= 255".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RasterImage,
    pub gt: InstanceLabelMap,
    pub points: PointSet,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cr: f64,
    cc: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized squared radius of a pixel center.
    fn rho2(&self, r: usize, c: usize) -> f64 {
        let dr = r as f64 - self.cr;
        let dc = c as f64 - self.cc;
        let (s, co) = self.theta.sin_cos();
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    /// Pixels inside, or `None` if the ellipse leaves the image interior.
    fn pixels(&self, h: usize, w: usize) -> Option<Vec<(usize, usize)>> {
        let reach = self.a.max(self.b).ceil() + 1.0;
        let (r0, r1) = (self.cr - reach, self.cr + reach);
        let (c0, c1) = (self.cc - reach, self.cc + reach);
        if r0 < 0.0 || c0 < 0.0 || r1 >= h as f64 || c1 >= w as f64 {
            return None;
        }
        let mut out = Vec::new();
        for r in r0 as usize..=r1 as usize {
            for c in c0 as usize..=c1 as usize {
                if self.rho2(r, c) <= 1.0 {
                    out.push((r, c));
                }
            }
        }
        (!out.is_empty()).then_some(out)
    }
}

struct Placer<'a> {
    spec: &'a SceneSpec,
    /// Pixels within `min_gap` (Chebyshev) of a placed nucleus.
    blocked: Grid<bool>,
    ids: Grid<u32>,
    shapes: Vec<Ellipse>,
}

impl Placer<'_> {
    fn fits(&self, pixels: &[(usize, usize)]) -> bool {
        pixels.iter().all(|&(r, c)| !*self.blocked.get(r, c))
    }

    fn is_connected(&self, pixels: &[(usize, usize)]) -> bool {
        let (r0, c0) = pixels
            .iter()
            .fold((usize::MAX, usize::MAX), |(a, b), &(r, c)| {
                (a.min(r), b.min(c))
            });
        let r1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
        let c1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
        let mut g = Grid::filled(r1 - r0 + 1, c1 - c0 + 1, 0u32);
        for &(r, c) in pixels {
            g.set(r - r0, c - c0, 1);
        }
        label_regions(&g, Connectivity::Eight).count() == 1
    }

    fn commit(&mut self, e: Ellipse, pixels: &[(usize, usize)]) {
        let id = self.shapes.len() as u32 + 1;
        let g = self.spec.min_gap;
        let (h, w) = self.blocked.shape();
        for &(r, c) in pixels {
            self.ids.set(r, c, id);
            for rr in r.saturating_sub(g)..=(r + g).min(h - 1) {
                for cc in c.saturating_sub(g)..=(c + g).min(w - 1) {
                    self.blocked.set(rr, cc, true);
                }
            }
        }
        self.shapes.push(e);
    }

    fn random_shape(&self, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
        let a = if self.spec.radius_max > self.spec.radius_min {
            rng.gen_range(self.spec.radius_min..=self.spec.radius_max)
        } else {
            self.spec.radius_min
        };
        let ratio = rng.gen_range(0.6..=1.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        (a, a * ratio, theta)
    }

    /// One placement try; returns whether a nucleus was added.
    fn attempt(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let (h, w) = self.blocked.shape();
        let (a, b, theta) = self.random_shape(rng);
        let crowd = self.spec.crowding && !self.shapes.is_empty() && rng.gen_bool(0.7);
        let candidate = if crowd {
            // Slide in from outside a neighbor until the gap rule would break.
            let n = self.shapes[rng.gen_range(0..self.shapes.len())];
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dr, dc) = (phi.sin(), phi.cos());
            let mut best = None;
            let mut dist = n.a + a + self.spec.min_gap as f64 + 3.0;
            while dist > 0.0 {
                let e = Ellipse {
                    cr: n.cr + dr * dist,
                    cc: n.cc + dc * dist,
                    a,
                    b,
                    theta,
                };
                match e.pixels(h, w) {
                    Some(px) if self.fits(&px) => best = Some((e, px)),
                    _ => break,
                }
                dist -= 1.0;
            }
            best
        } else {
            let e = Ellipse {
                cr: rng.gen_range(0.0..h as f64),
                cc: rng.gen_range(0.0..w as f64),
                a,
                b,
                theta,
            };
            e.pixels(h, w).filter(|px| self.fits(px)).map(|px| (e, px))
        };
        match candidate {
            Some((e, px)) if self.is_connected(&px) => {
                self.commit(e, &px);
                true
            }
            _ => false,
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn box_blur(img: &RasterImage, radius: usize) -> RasterImage {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = img.shape();
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for rr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                    let p = img.pixel(rr, cc);
                    for k in 0..3 {
                        sum[k] += u32::from(p[k]);
                    }
                    n += 1;
                }
            }
            out.set_pixel(r, c, sum.map(|s| ((s + n / 2) / n) as u8));
        }
    }
    out
}

/// Renders one scene. Errors with `SceneTooCrowded` after `max(10 * n^2, 1000)` failed
/// placement tries.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placer = Placer {
        spec,
        blocked: Grid::filled(h, w, false),
        ids: Grid::filled(h, w, 0),
        shapes: Vec::new(),
    };
    let budget = (10 * spec.n_nuclei * spec.n_nuclei).max(1000);
    let mut tries = 0;
    while placer.shapes.len() < spec.n_nuclei {
        if tries >= budget {
            return Err(Error::SceneTooCrowded {
                placed: placer.shapes.len(),
                requested: spec.n_nuclei,
            });
        }
        tries += 1;
        placer.attempt(&mut rng);
    }

    // Low-frequency stain variation plus per-pixel noise.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(2.0..6.0),
            )
        })
        .collect();
    let tints: Vec<[f64; 3]> = placer
        .shapes
        .iter()
        .map(|_| {
            let j = spec.nucleus_jitter;
            [0, 1, 2].map(|k| {
                f64::from(spec.nucleus_color[k]) + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }
            })
        })
        .collect();
    let mut image = RasterImage::filled(h, w, spec.background_color)?;
    for r in 0..h {
        for c in 0..w {
            let mut noise = [0.0; 3];
            if spec.noise > 0.0 {
                for n in &mut noise {
                    *n = rng.gen_range(-spec.noise..=spec.noise);
                }
            }
            let id = *placer.ids.get(r, c);
            let rgb = if id == 0 {
                let t: f64 = waves
                    .iter()
                    .map(|&(f, p, q, amp)| {
                        amp * ((r as f64 * f + p).sin() + (c as f64 * f + q).cos())
                    })
                    .sum();
                [0, 1, 2].map(|k| f64::from(spec.background_color[k]) + t + noise[k])
            } else {
                let e = placer.shapes[id as usize - 1];
                let shade = 0.85 + 0.15 * e.rho2(r, c);
                let tint = tints[id as usize - 1];
                [0, 1, 2].map(|k| tint[k] * shade + 0.5 * noise[k])
            };
            image.set_pixel(r, c, rgb.map(clamp_u8));
        }
    }
    let image = box_blur(&image, spec.blur_radius);

    let gt = InstanceLabelMap::from_raw(placer.ids);
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); gt.count()];
    for r in 0..h {
        for c in 0..w {
            let id = gt.get(r, c);
            if id > 0 {
                let b = &mut boxes[id as usize - 1];
                *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
            }
        }
    }
    let points = PointSet::new(
        boxes
            .iter()
            .map(|&(r0, c0, r1, c1)| Point::new((r0 + r1) / 2, (c0 + c1) / 2))
            .collect(),
    )?;
    Ok(Scene { image, gt, points })
}

/// Per-image seeds derived from a master seed.
pub fn corpus_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn generate_corpus(template: &SceneSpec, n_images: usize, seed: u64) -> Result<Vec<Scene>> {
    corpus_seeds(seed, n_images)
        .into_iter()
        .map(|s| {
            generate_scene(&SceneSpec {
                seed: s,
                ..template.clone()
            })
        })
        .collect()
}

/// File stem of the `index`-th corpus image.
pub fn scene_name(index: usize) -> String {
    format!("img_{index:03}")
}

/// Writes `images/`, `gt/` and `points/` under `dir`.
pub fn write_corpus(dir: &Path, scenes: &[Scene]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        let name = scene_name(i);
        io::save_image(&dir.join("images").join(format!("{name}.png")), &s.image)?;
        io::save_instances(&dir.join("gt").join(format!("{name}.png")), &s.gt)?;
        io::save_points(&dir.join("points").join(format!("{name}.csv")), &s.points)?;
    }
    Ok(())
}
