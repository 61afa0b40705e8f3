//! Rendering of one four-view phantom exam.
//!
//! Every breast is drawn in the canonical orientation (chest wall at x = 0,
//! breast extending rightward) and left views are mirrored at the end.
//! Lesions live in fractional breast coordinates `(u, v)`: `u` is the depth
//! from the chest wall as a fraction of the silhouette's horizontal
//! semi-axis and `v` the vertical offset as a fraction of the local half
//! height, so the same lesion lands at corresponding places in CC and MLO.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Density, Finding, Side, View, ViewKind};

const PLACEMENT_RETRIES: usize = 100;
/// Upper bound on the lesion support radius in units of its nominal radius.
const SUPPORT_REACH: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize) -> Self {
        Dims { height, width }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionKind {
    Mass,
    CalcificationCluster,
    Asymmetry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSpec {
    pub kind: LesionKind,
    pub finding: Finding,
    pub side: Side,
    /// Nominal radius in CC pixels.
    pub size: f64,
    pub irregularity: f64,
    /// Filled in by `render_exam`.
    pub center: Option<(f64, f64)>,
    /// Shape randomness shared by both projections.
    pub harmonics: Vec<(f64, f64)>,
    pub spikes: (f64, f64),
    pub specks: Vec<(f64, f64, f64)>,
    pub orientation: f64,
}

impl LesionSpec {
    /// Draw the shape parameters of a lesion. Malignant masses get margin
    /// irregularity in [0.55, 1), benign ones in [0, 0.4).
    pub fn random<R: Rng>(kind: LesionKind, finding: Finding, side: Side, size: f64, rng: &mut R) -> Self {
        let malignant = finding == Finding::Malignant;
        let irregularity = if malignant { rng.random_range(0.55..1.0) } else { rng.random_range(0.0..0.4) };
        let harmonics = (0..4).map(|_| (rng.random_range(0.0..0.5), rng.random_range(0.0..2.0 * PI))).collect();
        let spikes = (rng.random_range(7..13) as f64, rng.random_range(0.0..2.0 * PI));
        let n_specks = match (kind, malignant) {
            (LesionKind::CalcificationCluster, true) => rng.random_range(9..15),
            (LesionKind::CalcificationCluster, false) => rng.random_range(3..6),
            _ => 0,
        };
        let specks = (0..n_specks)
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                let d = rng.random_range(0.0f64..1.0).sqrt();
                let r = if malignant { 0.0 } else { rng.random_range(1.2..1.8) };
                (d * a.cos(), d * a.sin(), r)
            })
            .collect();
        LesionSpec {
            kind,
            finding,
            side,
            size,
            irregularity,
            center: None,
            harmonics,
            spikes,
            specks,
            orientation: rng.random_range(0.0..PI),
        }
    }

    /// Boundary radius (relative to nominal) in direction `theta`.
    fn boundary(&self, theta: f64) -> f64 {
        let t = self.irregularity;
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, (a, ph))| a * ((k as f64 + 2.0) * theta + ph).cos())
            .sum();
        let mut b = 1.0 + 0.25 * t * wobble;
        if t >= 0.5 {
            let s = ((self.spikes.0 * theta + self.spikes.1).cos()).max(0.0).powi(6);
            b *= 1.0 + 0.6 * t * s;
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExamSpec {
    pub density: Density,
    /// How strongly dense tissue lowers lesion contrast, in [0, 1].
    pub density_coupling: f64,
    /// Silhouette scale per side, indexed by `Side::index`.
    pub breast_scale: [f64; 2],
    pub lesions: Vec<LesionSpec>,
}

/// Four images indexed by `View::index`, plus per view a benign and a
/// malignant mask (`None` when empty).
#[derive(Clone, Debug)]
pub struct RenderedExam {
    pub images: [Image; 4],
    pub masks: [[Option<Image>; 2]; 4],
    pub lesions: Vec<LesionSpec>,
}

impl RenderedExam {
    pub fn mask(&self, view: View, finding: Finding) -> Option<&Image> {
        self.masks[view.index()][finding_index(finding)].as_ref()
    }
}

pub fn finding_index(f: Finding) -> usize {
    match f {
        Finding::Benign => 0,
        Finding::Malignant => 1,
    }
}

/// Breast outline of one view in canonical orientation.
#[derive(Clone, Copy, Debug)]
struct Silhouette {
    kind: ViewKind,
    dims: Dims,
    cy: f64,
    ay: f64,
    ax: f64,
}

impl Silhouette {
    fn new(kind: ViewKind, dims: Dims, scale: f64) -> Self {
        let (h, w) = (dims.height as f64, dims.width as f64);
        match kind {
            ViewKind::Cc => Silhouette { kind, dims, cy: 0.5 * h, ay: 0.46 * h * scale, ax: 0.80 * w * scale },
            ViewKind::Mlo => Silhouette { kind, dims, cy: 0.58 * h, ay: 0.41 * h * scale, ax: 0.78 * w * scale },
        }
    }

    /// Normalized elliptic radius; < 1 inside the breast body.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ay;
        let dx = x / self.ax;
        (dy * dy + dx * dx).sqrt()
    }

    fn in_pectoral(&self, y: f64, x: f64) -> bool {
        let (h, w) = (self.dims.height as f64, self.dims.width as f64);
        self.kind == ViewKind::Mlo && x / (0.40 * w) + y / (0.70 * h) <= 1.0
    }

    fn inside(&self, y: f64, x: f64) -> bool {
        x >= 0.0 && (self.rho(y, x) <= 1.0 || self.in_pectoral(y, x))
    }

    fn to_pixels(&self, u: f64, v: f64) -> (f64, f64) {
        let x = u * self.ax;
        let y = self.cy + v * self.ay * (1.0 - u * u).max(0.0).sqrt();
        (y, x)
    }

    /// Whether a disc lies in the breast body, away from the pectoral wedge
    /// and the image border.
    fn contains_disc(&self, y: f64, x: f64, r: f64) -> bool {
        let (h, w) = (self.dims.height as f64, self.dims.width as f64);
        if y - r < 1.0 || x - r < 1.0 || y + r > h - 1.0 || x + r > w - 1.0 {
            return false;
        }
        (0..32).all(|k| {
            let a = k as f64 * PI / 16.0;
            let (py, px) = (y + r * a.sin(), x + r * a.cos());
            self.rho(py, px) <= 0.97 && !self.in_pectoral(py, px)
        })
    }
}

/// Lesion radius in a given view, relative to the CC radius: the MLO view
/// rescales by the ratio of image diagonals and adds a small projection
/// jitter.
fn view_radius(size: f64, cc: Dims, view: Dims, jitter: f64) -> f64 {
    let diag = |d: Dims| ((d.height * d.height + d.width * d.width) as f64).sqrt();
    size * diag(view) / diag(cc) * jitter
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in [0, 1].
fn value_noise<R: Rng>(dims: Dims, rng: &mut R) -> Vec<f64> {
    let (h, w) = (dims.height, dims.width);
    let mut out = vec![0.0; h * w];
    let octaves = [(6.0, 0.5), (12.0, 0.3), (24.0, 0.2)];
    for (div, amp) in octaves {
        let cell = (h as f64 / div).max(2.0);
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for i in 0..h {
            let fy = i as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for j in 0..w {
                let fx = j as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let a = lattice[y0 * gw + x0];
                let b = lattice[y0 * gw + x0 + 1];
                let c = lattice[(y0 + 1) * gw + x0];
                let d = lattice[(y0 + 1) * gw + x0 + 1];
                let v = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
                out[i * w + j] += amp * v;
            }
        }
    }
    out
}

fn density_params(d: Density) -> (f64, f64, f64) {
    // (base intensity, texture amplitude, index for contrast coupling)
    match d {
        Density::Fatty => (0.30, 0.05, 0.0),
        Density::Scattered => (0.38, 0.09, 1.0),
        Density::Heterogeneous => (0.46, 0.13, 2.0),
        Density::Extreme => (0.54, 0.17, 3.0),
    }
}

/// Additive intensity of a lesion at a pixel centre, zero outside support.
fn lesion_delta(l: &LesionSpec, cy: f64, cx: f64, r: f64, y: f64, x: f64, contrast: f64) -> f64 {
    let (dy, dx) = (y - cy, x - cx);
    let rho = (dy * dy + dx * dx).sqrt();
    if rho > SUPPORT_REACH * r {
        return 0.0;
    }
    match l.kind {
        LesionKind::Mass => {
            let d = r * l.boundary(dy.atan2(dx));
            if rho < d {
                contrast * (0.7 + 0.3 * (1.0 - rho / d))
            } else {
                0.0
            }
        }
        LesionKind::Asymmetry => {
            let (s, c) = l.orientation.sin_cos();
            let (a, b) = (dx * c + dy * s, -dx * s + dy * c);
            let e = ((a / (1.2 * r)).powi(2) + (b / (0.8 * r)).powi(2)).sqrt();
            let d = l.boundary(b.atan2(a));
            if e < d {
                contrast * 0.6 * (1.0 - 0.5 * (e / d).powi(2))
            } else {
                0.0
            }
        }
        LesionKind::CalcificationCluster => {
            let mut v: f64 = 0.0;
            for &(ox, oy, sr) in &l.specks {
                let (sy, sx) = (cy + oy * r, cx + ox * r);
                let hit = if sr == 0.0 {
                    // Point speck: lights exactly the pixel containing it.
                    y.floor() == sy.floor() && x.floor() == sx.floor()
                } else {
                    (y - sy).powi(2) + (x - sx).powi(2) <= sr * sr
                };
                if hit {
                    v = v.max(contrast * 1.5);
                }
            }
            v
        }
    }
}

/// Render the four views of an exam. Lesion centres are drawn here, each
/// retried up to 100 times until its support fits inside the breast body in
/// both projections.
pub fn render_exam<R: Rng>(spec: &ExamSpec, cc: Dims, mlo: Dims, rng: &mut R) -> Result<RenderedExam> {
    let mut lesions = spec.lesions.clone();
    let sil = |side: Side, kind: ViewKind| {
        let d = if kind == ViewKind::Cc { cc } else { mlo };
        Silhouette::new(kind, d, spec.breast_scale[side.index()])
    };
    let mut jitter = Vec::with_capacity(lesions.len());
    for l in &mut lesions {
        let j = rng.random_range(0.96..1.04);
        jitter.push(j);
        if l.center.is_some() {
            continue;
        }
        let (s_cc, s_mlo) = (sil(l.side, ViewKind::Cc), sil(l.side, ViewKind::Mlo));
        let r_cc = l.size * SUPPORT_REACH;
        let r_mlo = view_radius(l.size, cc, mlo, j) * SUPPORT_REACH;
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let u = rng.random_range(0.15..0.75);
            let v = rng.random_range(-0.7..0.7);
            let (y, x) = s_cc.to_pixels(u, v);
            let (y2, x2) = s_mlo.to_pixels(u, v);
            if s_cc.contains_disc(y, x, r_cc) && s_mlo.contains_disc(y2, x2, r_mlo) {
                placed = Some((u, v));
                break;
            }
        }
        l.center = Some(placed.ok_or_else(|| {
            Error::Config(format!(
                "lesion of radius {:.1}px does not fit in the breast silhouette after {PLACEMENT_RETRIES} placements",
                l.size
            ))
        })?);
    }

    let (base, texture, dens_idx) = density_params(spec.density);
    let contrast = 0.22 * (1.0 - 0.5 * spec.density_coupling * dens_idx / 3.0);
    let mut images: Vec<Image> = Vec::with_capacity(4);
    let mut masks: Vec<[Option<Image>; 2]> = Vec::with_capacity(4);
    for view in View::ALL {
        let kind = view.kind();
        let dims = if kind == ViewKind::Cc { cc } else { mlo };
        let s = sil(view.side(), kind);
        let noise = value_noise(dims, rng);
        let mut img = Image::zeros(dims.height, dims.width);
        let mut planes = [None, None];
        let here: Vec<(&LesionSpec, f64, f64, f64)> = lesions
            .iter()
            .zip(&jitter)
            .filter(|(l, _)| l.side == view.side())
            .map(|(l, &j)| {
                let (u, v) = l.center.expect("placed above");
                let (y, x) = s.to_pixels(u, v);
                let r = if kind == ViewKind::Cc { l.size } else { view_radius(l.size, cc, mlo, j) };
                (l, y, x, r)
            })
            .collect();
        for i in 0..dims.height {
            let y = i as f64 + 0.5;
            for jx in 0..dims.width {
                let x = jx as f64 + 0.5;
                if !s.inside(y, x) {
                    continue;
                }
                let rho = s.rho(y, x).min(1.0);
                let falloff = 1.0 - 0.35 * rho.powi(6);
                let mut v = (base + texture * (noise[i * dims.width + jx] - 0.5) * 2.0) * falloff;
                if s.in_pectoral(y, x) {
                    v += 0.15;
                }
                for &(l, ly, lx, r) in &here {
                    let d = lesion_delta(l, ly, lx, r, y, x, contrast);
                    if d > 0.0 {
                        v += d;
                        let plane = planes[finding_index(l.finding)]
                            .get_or_insert_with(|| Image::zeros(dims.height, dims.width));
                        plane.set(i, jx, 1.0);
                    }
                }
                img.set(i, jx, v.clamp(1.0 / 65535.0, 1.0) as f32);
            }
        }
        if view.side() == Side::Left {
            img = img.flip_horizontal();
            planes = planes.map(|p| p.map(|m| m.flip_horizontal()));
        }
        images.push(img);
        masks.push(planes);
    }
    let images: [Image; 4] = images.try_into().expect("four views");
    let masks: [[Option<Image>; 2]; 4] = masks.try_into().expect("four views");
    Ok(RenderedExam { images, masks, lesions })
}
