//! The synthetic scene + subject image world.
//!
//! Every image is a scene template with one glyph tile pasted at one of a
//! few fixed positions. The data distribution is an equal-weight mixture of
//! isotropic Gaussians centred on all such compositions, which makes the
//! optimal denoiser available in closed form (see [`crate::denoiser::gmm`]).

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Raster;

/// Background template identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    HorizontalGradient,
    VerticalGradient,
    Checkerboard,
    FlatGray,
}

/// Subject glyph identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphKind {
    Cross,
    Square,
    Disk,
    Triangle,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::HorizontalGradient,
        SceneKind::VerticalGradient,
        SceneKind::Checkerboard,
        SceneKind::FlatGray,
    ];

    pub fn id(self) -> &'static str {
        match self {
            SceneKind::HorizontalGradient => "horizontal_gradient",
            SceneKind::VerticalGradient => "vertical_gradient",
            SceneKind::Checkerboard => "checkerboard",
            SceneKind::FlatGray => "flat_gray",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::invalid(format!("unknown scene id {id:?}")))
    }

    /// Template value at pixel `(y, x)` of an `h`×`w` image.
    pub fn value(self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let ramp = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        match self {
            SceneKind::HorizontalGradient => ramp(x, w),
            SceneKind::VerticalGradient => ramp(y, h),
            SceneKind::Checkerboard => {
                let cell = (h.min(w) / 4).max(1);
                if (y / cell + x / cell).is_multiple_of(2) {
                    0.25
                } else {
                    0.75
                }
            }
            SceneKind::FlatGray => 0.5,
        }
    }
}

impl GlyphKind {
    pub const ALL: [GlyphKind; 4] = [
        GlyphKind::Cross,
        GlyphKind::Square,
        GlyphKind::Disk,
        GlyphKind::Triangle,
    ];

    pub fn id(self) -> &'static str {
        match self {
            GlyphKind::Cross => "cross",
            GlyphKind::Square => "square",
            GlyphKind::Disk => "disk",
            GlyphKind::Triangle => "triangle",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.id() == id)
            .ok_or_else(|| Error::invalid(format!("unknown subject id {id:?}")))
    }

    /// Whether pixel `(y, x)` of a `size`×`size` box belongs to the glyph stroke.
    pub fn covers(self, y: usize, x: usize, size: usize) -> bool {
        let b = size as f64;
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        match self {
            GlyphKind::Cross => {
                let thick = (size / 5).max(1);
                let lo = (size - thick) / 2;
                let margin = size / 10;
                let on_bar = |i: usize| (lo..lo + thick).contains(&i);
                let in_span = |i: usize| (margin..size - margin).contains(&i);
                (on_bar(y) && in_span(x)) || (on_bar(x) && in_span(y))
            }
            GlyphKind::Square => {
                let m = size / 5;
                (m..size - m).contains(&y) && (m..size - m).contains(&x)
            }
            GlyphKind::Disk => {
                let c = b / 2.0;
                let r = 0.36 * b;
                (yf - c).powi(2) + (xf - c).powi(2) <= r * r + 1e-9
            }
            GlyphKind::Triangle => {
                let m = size / 10;
                if !(m..size - m).contains(&y) {
                    return false;
                }
                let rows = size - 2 * m;
                let half = if rows <= 1 {
                    b / 2.0
                } else {
                    0.5 + (y - m) as f64 * (b / 2.0 - m as f64 - 0.5) / (rows - 1) as f64
                };
                (xf - b / 2.0).abs() <= half
            }
        }
    }

    /// Tile intensity: stroke pixels are 1, the rest of the box is 0.
    pub fn value(self, y: usize, x: usize, size: usize) -> f64 {
        if self.covers(y, x, size) {
            GLYPH_INTENSITY
        } else {
            GLYPH_BACKING
        }
    }

    /// Single-channel `size`×`size` tile.
    pub fn tile(self, size: usize) -> Raster {
        Raster::from_fn(size, size, 1, |y, x, _| self.value(y, x, size))
    }
}

pub const GLYPH_INTENSITY: f64 = 1.0;
pub const GLYPH_BACKING: f64 = 0.0;

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl fmt::Display for GlyphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Top-left corner `(row, col)` of a pasted glyph box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn contains(&self, y: usize, x: usize, size: usize) -> bool {
        (self.row..self.row + size).contains(&y) && (self.col..self.col + size).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub scenes: Vec<SceneKind>,
    pub subjects: Vec<GlyphKind>,
    pub positions: Vec<Position>,
    pub glyph_size: usize,
    pub sigma0: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            scenes: SceneKind::ALL.to_vec(),
            subjects: GlyphKind::ALL.to_vec(),
            positions: vec![
                Position::new(3, 3),
                Position::new(3, 19),
                Position::new(19, 3),
                Position::new(19, 19),
            ],
            glyph_size: 10,
            sigma0: 0.05,
        }
    }
}

impl WorldConfig {
    /// One scene, one subject, one position: a single-component world.
    pub fn single(scene: SceneKind, subject: GlyphKind, height: usize, width: usize, glyph_size: usize) -> Self {
        Self {
            height,
            width,
            channels: 1,
            scenes: vec![scene],
            subjects: vec![subject],
            positions: vec![Position::new(0, 0)],
            glyph_size,
            sigma0: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.glyph_size == 0 {
            return Err(Error::invalid("world dimensions must be positive"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if self.scenes.is_empty() || self.subjects.is_empty() || self.positions.is_empty() {
            return Err(Error::invalid("world needs at least one scene, subject and position"));
        }
        for p in &self.positions {
            self.check_position(*p)?;
        }
        Ok(())
    }

    fn check_position(&self, p: Position) -> Result<()> {
        if p.row + self.glyph_size > self.height || p.col + self.glyph_size > self.width {
            return Err(Error::invalid(format!(
                "glyph box of size {} at ({}, {}) leaves the {}x{} image",
                self.glyph_size, p.row, p.col, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn check_condition(&self, cond: &Condition) -> Result<()> {
        if let Some(s) = cond.scene {
            if !self.scenes.contains(&s) {
                return Err(Error::invalid(format!("scene {s} is not part of this world")));
            }
        }
        if let Some(g) = cond.subject {
            if !self.subjects.contains(&g) {
                return Err(Error::invalid(format!("subject {g} is not part of this world")));
            }
        }
        Ok(())
    }

    pub fn scene_template(&self, scene: SceneKind) -> Raster {
        let (h, w) = (self.height, self.width);
        Raster::from_fn(h, w, self.channels, |y, x, _| scene.value(y, x, h, w))
    }

    /// Fraction of image pixels covered by one glyph box.
    pub fn box_fraction(&self) -> f64 {
        (self.glyph_size * self.glyph_size) as f64 / (self.height * self.width) as f64
    }
}

/// Scene template with the full glyph box pasted at `position`.
pub fn compose(cfg: &WorldConfig, scene: SceneKind, subject: GlyphKind, position: Position) -> Result<Raster> {
    cfg.check_position(position)?;
    let (h, w, g) = (cfg.height, cfg.width, cfg.glyph_size);
    Ok(Raster::from_fn(h, w, cfg.channels, |y, x, _| {
        if position.contains(y, x, g) {
            subject.value(y - position.row, x - position.col, g)
        } else {
            scene.value(y, x, h, w)
        }
    }))
}

/// Scene and subject identifiers; `None` is the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Condition {
    pub scene: Option<SceneKind>,
    pub subject: Option<GlyphKind>,
}

impl Condition {
    pub const NULL: Condition = Condition {
        scene: None,
        subject: None,
    };

    pub fn scene(scene: SceneKind) -> Self {
        Self {
            scene: Some(scene),
            subject: None,
        }
    }

    pub fn scene_subject(scene: SceneKind, subject: GlyphKind) -> Self {
        Self {
            scene: Some(scene),
            subject: Some(subject),
        }
    }

    pub fn subject(subject: GlyphKind) -> Self {
        Self {
            scene: None,
            subject: Some(subject),
        }
    }

    pub fn is_null(&self) -> bool {
        self.scene.is_none() && self.subject.is_none()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.scene.map_or("null", SceneKind::id);
        let g = self.subject.map_or("null", GlyphKind::id);
        write!(f, "({s}, {g})")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub scene: SceneKind,
    pub subject: GlyphKind,
    pub position: Position,
    pub mean: Arc<Raster>,
    pub weight: f64,
}

impl Component {
    pub fn matches(&self, cond: &Condition) -> bool {
        cond.scene.is_none_or(|s| s == self.scene) && cond.subject.is_none_or(|g| g == self.subject)
    }
}

/// Mixture of isotropic Gaussians `N(mean_k, σ0² I)` over rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    components: Vec<Component>,
    sigma0: f64,
}

impl GmmSpec {
    /// Builds a mixture, normalizing the weights. `sigma0 = 0` gives point masses.
    pub fn new(mut components: Vec<Component>, sigma0: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be nonnegative, got {sigma0}")));
        }
        let shape = components[0].mean.shape();
        if components.iter().any(|c| c.mean.shape() != shape) {
            return Err(Error::invalid("mixture means must share one shape"));
        }
        if components.iter().any(|c| !(c.weight > 0.0 && c.weight.is_finite())) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self { components, sigma0 })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.components[0].mean.shape()
    }
}

/// One equal-weight component per (scene, subject, position) triple.
pub fn build_gmm(cfg: &WorldConfig) -> Result<GmmSpec> {
    cfg.validate()?;
    let mut components = Vec::with_capacity(cfg.scenes.len() * cfg.subjects.len() * cfg.positions.len());
    for &scene in &cfg.scenes {
        for &subject in &cfg.subjects {
            for &position in &cfg.positions {
                components.push(Component {
                    scene,
                    subject,
                    position,
                    mean: Arc::new(compose(cfg, scene, subject, position)?),
                    weight: 1.0,
                });
            }
        }
    }
    GmmSpec::new(components, cfg.sigma0)
}

/// Keeps the components matching every non-null field of `cond`.
pub fn restrict(gmm: &GmmSpec, cond: &Condition) -> Result<GmmSpec> {
    let kept: Vec<Component> = gmm.components.iter().filter(|c| c.matches(cond)).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptyCondition(cond.to_string()));
    }
    GmmSpec::new(kept, gmm.sigma0)
}

/// Draws a component by weight and adds `N(0, σ0²)` noise to its mean.
pub fn sample_world<R: Rng + ?Sized>(gmm: &GmmSpec, rng: &mut R) -> (Raster, usize) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut index = gmm.components.len() - 1;
    for (i, c) in gmm.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            index = i;
            break;
        }
    }
    let mean = &gmm.components[index].mean;
    let sigma = gmm.sigma0;
    let mut sample = mean.as_ref().clone();
    for v in sample.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    (sample, index)
}
