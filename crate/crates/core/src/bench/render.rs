use std::f64::consts::PI;

use casam_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::spec::{BroadSpec, GeometryParams, ShapeFamily, TaskSpec, TextureParams, IMAGE_SIZE};

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoxPrompt {
    /// Tight box around the non-zero pixels of an `H×W` mask, or `None` when
    /// the mask is empty.
    pub fn tight(mask: &[f32], width: usize) -> Option<Self> {
        let mut b: Option<BoxPrompt> = None;
        for (i, &m) in mask.iter().enumerate() {
            if m <= 0.5 {
                continue;
            }
            let (x, y) = ((i % width) as u32, (i / width) as u32);
            b = Some(match b {
                None => BoxPrompt { x0: x, y0: y, x1: x, y1: y },
                Some(b) => BoxPrompt {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        b
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    /// Moves each edge by up to `fraction` of the box extent, keeping the box
    /// inside a `size×size` image and non-empty.
    pub fn jittered(&self, fraction: f64, size: usize, rng: &mut Rng) -> Self {
        if fraction <= 0.0 {
            return *self;
        }
        let max = size as i64 - 1;
        let mut edge = |v: u32, extent: u32| {
            let reach = (fraction * extent as f64).floor() as i64;
            let delta = if reach > 0 {
                rng.below(2 * reach as usize + 1) as i64 - reach
            } else {
                0
            };
            (v as i64 + delta).clamp(0, max)
        };
        let (w, h) = (self.width(), self.height());
        let x0 = edge(self.x0, w);
        let x1 = edge(self.x1, w);
        let y0 = edge(self.y0, h);
        let y1 = edge(self.y1, h);
        BoxPrompt {
            x0: x0.min(x1) as u32,
            x1: x0.max(x1) as u32,
            y0: y0.min(y1) as u32,
            y1: y0.max(y1) as u32,
        }
    }

    /// Binary `cells×cells` map marking the cells of a `size×size` image that
    /// overlap the box.
    pub fn to_grid(&self, size: usize, cells: usize) -> Vec<f32> {
        let step = size / cells;
        let mut out = vec![0.0; cells * cells];
        for cy in 0..cells {
            for cx in 0..cells {
                let (px0, py0) = ((cx * step) as u32, (cy * step) as u32);
                let (px1, py1) = (px0 + step as u32 - 1, py0 + step as u32 - 1);
                if px0 <= self.x1 && px1 >= self.x0 && py0 <= self.y1 && py1 >= self.y0 {
                    out[cy * cells + cx] = 1.0;
                }
            }
        }
        out
    }
}

/// One image with its ground-truth mask and tight box prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    /// `[1,H,W]`, values in `{0,1}`.
    pub mask: Tensor,
    pub bbox: BoxPrompt,
}

/// Per-image draw of the object's pose.
struct Pose {
    cx: f64,
    cy: f64,
    major: f64,
    minor: f64,
    angle: f64,
    phases: [f64; 2],
}

impl Pose {
    fn draw(geometry: &GeometryParams, rng: &mut Rng) -> Self {
        let major = rng.uniform_range(geometry.size.lo, geometry.size.hi);
        let e = rng.uniform_range(geometry.eccentricity.lo, geometry.eccentricity.hi);
        let minor = (major * (1.0 - e * e).sqrt()).max(2.0);
        let margin = major + 1.0;
        let span = IMAGE_SIZE as f64 - 2.0 * margin;
        Self {
            cx: margin + rng.uniform() * span,
            cy: margin + rng.uniform() * span,
            major,
            minor,
            angle: rng.uniform() * PI,
            phases: [rng.uniform() * 2.0 * PI, rng.uniform() * 2.0 * PI],
        }
    }

    fn contains(&self, family: ShapeFamily, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.major;
        let v = (-s * dx + c * dy) / self.minor;
        let rho = (u * u + v * v).sqrt();
        match family {
            ShapeFamily::Ellipse => rho <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeFamily::Blob => {
                let phi = v.atan2(u);
                let r = 0.8 + 0.15 * (3.0 * phi + self.phases[0]).sin() + 0.08 * (2.0 * phi + self.phases[1]).cos();
                rho <= r
            }
            ShapeFamily::Ring => (0.55..=1.0).contains(&rho),
            ShapeFamily::Stripe => {
                let half = (0.3 * self.minor).max(1.5) / self.minor;
                u.abs() <= 1.0 && v.abs() <= half
            }
        }
    }
}

/// Renders one sample. Retries with fresh poses in the rare case that the
/// mask comes out empty.
pub fn render(family: ShapeFamily, texture: &TextureParams, geometry: &GeometryParams, rng: &mut Rng) -> Sample {
    let n = IMAGE_SIZE;
    let mut mask = vec![0.0f32; n * n];
    for _ in 0..16 {
        let pose = Pose::draw(geometry, rng);
        for y in 0..n {
            for x in 0..n {
                let inside = pose.contains(family, x as f64 + 0.5, y as f64 + 0.5);
                mask[y * n + x] = if inside { 1.0 } else { 0.0 };
            }
        }
        if mask.iter().any(|&m| m > 0.0) {
            break;
        }
    }
    if mask.iter().all(|&m| m == 0.0) {
        mask[(n / 2) * n + n / 2] = 1.0;
    }

    let jitter: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-texture.jitter, texture.jitter));
    let grating_angle = rng.uniform() * PI;
    let grating_phase = rng.uniform() * 2.0 * PI;
    let (gs, gc) = grating_angle.sin_cos();
    let freq = 2.0 * PI * texture.grating_cycles / n as f64;

    let mut image = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let base = if mask[i] > 0.0 {
                &texture.foreground
            } else {
                &texture.background
            };
            let wave = texture.grating * (freq * (gc * x as f64 + gs * y as f64) + grating_phase).sin();
            for ch in 0..3 {
                let v = base[ch] + jitter[ch] + wave + texture.noise * rng.normal();
                image[ch * n * n + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let bbox = BoxPrompt::tight(&mask, n).expect("mask is non-empty");
    Sample {
        image: Tensor::new(vec![3, n, n], image).expect("image shape"),
        mask: Tensor::new(vec![1, n, n], mask).expect("mask shape"),
        bbox,
    }
}

pub fn render_task(spec: &TaskSpec, rng: &mut Rng) -> Sample {
    render(spec.shape_family, &spec.texture, &spec.geometry, rng)
}

/// Draws one sample from the pretraining mixture with a random family and
/// a random grey-ish bright-on-dark texture.
pub fn render_broad(spec: &BroadSpec, rng: &mut Rng) -> Sample {
    let family = spec.families[rng.below(spec.families.len())];
    let fg = rng.uniform_range(spec.foreground_level.lo, spec.foreground_level.hi);
    let bg = rng.uniform_range(spec.background_level.lo, spec.background_level.hi);
    let mut tinted = |level: f64| -> [f64; 3] {
        std::array::from_fn(|_| (level + rng.uniform_range(-spec.tint, spec.tint)).clamp(0.0, 1.0))
    };
    let foreground = tinted(fg);
    let background = tinted(bg);
    let texture = TextureParams {
        foreground,
        background,
        noise: rng.uniform_range(spec.noise.lo, spec.noise.hi),
        jitter: 0.0,
        grating: 0.0,
        grating_cycles: 4.0,
    };
    render(family, &texture, &spec.geometry, rng)
}
