use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Side length of every generated image.
pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Blob,
    Ring,
    Stripe,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Blob,
        ShapeFamily::Ring,
        ShapeFamily::Stripe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Blob => "blob",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Stripe => "stripe",
        }
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn lerp(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t
    }
}

/// Appearance of one task's images. Colours are RGB in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-image uniform colour jitter, added to both regions.
    pub jitter: f64,
    /// Amplitude of a sinusoidal grating laid over the whole image.
    pub grating: f64,
    /// Grating cycles across the image width.
    pub grating_cycles: f64,
}

impl TextureParams {
    /// Bright grey object on a dark grey background, the centre of the
    /// pretraining mixture.
    pub fn reference() -> Self {
        Self {
            foreground: [0.75, 0.75, 0.75],
            background: [0.22, 0.22, 0.22],
            noise: 0.03,
            jitter: 0.04,
            grating: 0.0,
            grating_cycles: 4.0,
        }
    }

    /// Moves `self` toward `target` by `amount` (0 keeps `self`, 1 gives `target`).
    pub fn blend(&self, target: &TextureParams, amount: f64) -> Self {
        let mix = |a: f64, b: f64| a + (b - a) * amount;
        let mix3 = |a: [f64; 3], b: [f64; 3]| [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])];
        Self {
            foreground: mix3(self.foreground, target.foreground),
            background: mix3(self.background, target.background),
            noise: mix(self.noise, target.noise),
            jitter: mix(self.jitter, target.jitter),
            grating: mix(self.grating, target.grating),
            grating_cycles: target.grating_cycles,
        }
    }

    fn validate(&self) -> Result<()> {
        let colours = self.foreground.iter().chain(&self.background);
        if colours.clone().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(CoreError::Config("texture colours must lie in [0,1]".into()));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("jitter", self.jitter),
            ("grating", self.grating),
            ("grating_cycles", self.grating_cycles),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!("texture {} must be finite and non-negative", name)));
            }
        }
        Ok(())
    }

    /// Key used to check that tasks in a stream look different.
    fn fingerprint(&self) -> Vec<u64> {
        let mut v: Vec<f64> = self.foreground.to_vec();
        v.extend_from_slice(&self.background);
        v.extend_from_slice(&[self.noise, self.jitter, self.grating, self.grating_cycles]);
        v.into_iter().map(f64::to_bits).collect()
    }
}

/// Object placement. `size` is the major semi-axis in pixels; eccentricity
/// shrinks the minor axis to `size * sqrt(1 - e^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub size: Span,
    pub eccentricity: Span,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            size: Span::new(9.0, 18.0),
            eccentricity: Span::new(0.0, 0.85),
        }
    }
}

impl GeometryParams {
    fn validate(&self) -> Result<()> {
        if !self.size.is_valid() || self.size.lo < 2.0 || self.size.hi > (IMAGE_SIZE as f64) / 2.0 - 3.0 {
            return Err(CoreError::Config(format!(
                "size range {:?} must be non-empty and within [2, {}]",
                self.size,
                IMAGE_SIZE / 2 - 3
            )));
        }
        if !self.eccentricity.is_valid() || self.eccentricity.lo < 0.0 || self.eccentricity.hi >= 1.0 {
            return Err(CoreError::Config("eccentricity range must be non-empty and within [0,1)".into()));
        }
        Ok(())
    }
}

/// One segmentation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub name: String,
    pub shape_family: ShapeFamily,
    pub texture: TextureParams,
    pub geometry: GeometryParams,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.texture.validate()?;
        self.geometry.validate()
    }

    /// Entry `index` of the built-in catalogue of shifted domains, blended
    /// from the reference texture by `shift` (1.0 is the full shift).
    pub fn preset(index: usize, shift: f64, seed: u64) -> Self {
        let (name, family, target) = PRESETS[index % PRESETS.len()];
        let round = index / PRESETS.len();
        let name = if round == 0 {
            name.to_string()
        } else {
            format!("{}-{}", name, round + 1)
        };
        let mut texture = TextureParams::reference().blend(&target(), shift);
        // later rounds of the catalogue get a small tint so textures stay distinct
        if round > 0 {
            let tint = 0.04 * round as f64;
            texture.background[2] = (texture.background[2] + tint).min(1.0);
        }
        Self {
            task_id: index as u32,
            name,
            shape_family: family,
            texture,
            geometry: GeometryParams::default(),
            seed,
        }
    }
}

type Preset = (&'static str, ShapeFamily, fn() -> TextureParams);

const PRESETS: [Preset; 9] = [
    ("inverted", ShapeFamily::Ellipse, || TextureParams {
        foreground: [0.14, 0.14, 0.18],
        background: [0.80, 0.78, 0.74],
        noise: 0.04,
        jitter: 0.04,
        grating: 0.0,
        grating_cycles: 4.0,
    }),
    ("teal-noise", ShapeFamily::Blob, || TextureParams {
        foreground: [0.20, 0.62, 0.58],
        background: [0.50, 0.26, 0.30],
        noise: 0.12,
        jitter: 0.04,
        grating: 0.0,
        grating_cycles: 4.0,
    }),
    ("grating", ShapeFamily::Rectangle, || TextureParams {
        foreground: [0.30, 0.22, 0.55],
        background: [0.66, 0.64, 0.30],
        noise: 0.03,
        jitter: 0.04,
        grating: 0.18,
        grating_cycles: 7.0,
    }),
    ("low-contrast", ShapeFamily::Ring, || TextureParams {
        foreground: [0.52, 0.46, 0.40],
        background: [0.40, 0.36, 0.34],
        noise: 0.05,
        jitter: 0.02,
        grating: 0.0,
        grating_cycles: 4.0,
    }),
    ("red-stripe", ShapeFamily::Stripe, || TextureParams {
        foreground: [0.85, 0.20, 0.15],
        background: [0.15, 0.30, 0.70],
        noise: 0.05,
        jitter: 0.04,
        grating: 0.0,
        grating_cycles: 4.0,
    }),
    ("dark-blob", ShapeFamily::Blob, || TextureParams {
        foreground: [0.05, 0.10, 0.05],
        background: [0.45, 0.60, 0.40],
        noise: 0.08,
        jitter: 0.04,
        grating: 0.08,
        grating_cycles: 3.0,
    }),
    ("washed", ShapeFamily::Ellipse, || TextureParams {
        foreground: [0.95, 0.92, 0.85],
        background: [0.75, 0.72, 0.70],
        noise: 0.06,
        jitter: 0.03,
        grating: 0.0,
        grating_cycles: 4.0,
    }),
    ("speckle", ShapeFamily::Rectangle, || TextureParams {
        foreground: [0.60, 0.60, 0.65],
        background: [0.30, 0.30, 0.35],
        noise: 0.22,
        jitter: 0.04,
        grating: 0.0,
        grating_cycles: 4.0,
    }),
    ("violet-ring", ShapeFamily::Ring, || TextureParams {
        foreground: [0.20, 0.05, 0.35],
        background: [0.70, 0.85, 0.75],
        noise: 0.04,
        jitter: 0.04,
        grating: 0.12,
        grating_cycles: 10.0,
    }),
];

/// Checks that every task is valid and that no two tasks share both their
/// shape family and texture.
pub fn validate_stream(specs: &[TaskSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        a.validate()?;
        for b in &specs[..i] {
            if a.task_id == b.task_id {
                return Err(CoreError::Config(format!("duplicate task id {}", a.task_id)));
            }
            if a.shape_family == b.shape_family && a.texture.fingerprint() == b.texture.fingerprint() {
                return Err(CoreError::Config(format!(
                    "tasks {} and {} share shape family and texture",
                    b.task_id, a.task_id
                )));
            }
        }
    }
    Ok(())
}

/// The mixture the backbone is pretrained on: every family, bright-on-dark
/// grey-ish textures with randomised levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BroadSpec {
    pub families: Vec<ShapeFamily>,
    pub foreground_level: Span,
    pub background_level: Span,
    /// Maximum per-channel deviation from grey.
    pub tint: f64,
    pub noise: Span,
    pub geometry: GeometryParams,
}

impl Default for BroadSpec {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            foreground_level: Span::new(0.55, 0.95),
            background_level: Span::new(0.05, 0.40),
            tint: 0.06,
            noise: Span::new(0.0, 0.06),
            geometry: GeometryParams::default(),
        }
    }
}

impl BroadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(CoreError::Config("broad distribution needs at least one shape family".into()));
        }
        for (name, s) in [
            ("foreground_level", self.foreground_level),
            ("background_level", self.background_level),
            ("noise", self.noise),
        ] {
            if !s.is_valid() || s.lo < 0.0 || s.hi > 1.0 {
                return Err(CoreError::Config(format!("{} must be a non-empty range in [0,1]", name)));
            }
        }
        if !(0.0..=0.5).contains(&self.tint) {
            return Err(CoreError::Config("tint must lie in [0,0.5]".into()));
        }
        self.geometry.validate()
    }
}
