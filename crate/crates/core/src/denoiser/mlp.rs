//! Fully connected ε-predictor with hand-written reverse-mode gradients.
//!
//! Input layout: flattened `x_t`, a one-hot scene block, a one-hot subject
//! block (slot 0 of each block is the null condition) and the time embedding
//! `[sin(πτ/2), cos(πτ/2)]` with `τ = t / T`. Hidden layers use `tanh`; the
//! output layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserRole};
use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::world::{Condition, GlyphKind, SceneKind};

const MAGIC: &[u8; 8] = b"SNFMLP\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `outputs × inputs`.
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound));
        Self { weights, bias }
    }

    fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    /// Flattened in [`MlpDenoiser::parameters`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Activations kept from a forward pass.
struct Tape {
    /// Input to each layer, then the output.
    activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    role: DenoiserRole,
    shape: (usize, usize, usize),
    train_steps: usize,
    scenes: Vec<SceneKind>,
    subjects: Vec<GlyphKind>,
    layers: Vec<Dense>,
    frozen: Vec<bool>,
}

impl MlpDenoiser {
    /// Random initialization, uniform in `±1/√fan_in`.
    pub fn new(
        role: DenoiserRole,
        shape: (usize, usize, usize),
        train_steps: usize,
        scenes: Vec<SceneKind>,
        subjects: Vec<GlyphKind>,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let (h, w, c) = shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if train_steps == 0 {
            return Err(Error::invalid("train_steps must be at least 1"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let subjects = if role == DenoiserRole::Scene {
            Vec::new()
        } else {
            subjects
        };
        let dim = h * w * c;
        let input = dim + (1 + scenes.len()) + (1 + subjects.len()) + 2;
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Dense> = widths.windows(2).map(|p| Dense::init(p[0], p[1], &mut rng)).collect();
        let frozen = vec![false; layers.len()];
        Ok(Self {
            role,
            shape,
            train_steps,
            scenes,
            subjects,
            layers,
            frozen,
        })
    }

    pub fn role(&self) -> DenoiserRole {
        self.role
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn scenes(&self) -> &[SceneKind] {
        &self.scenes
    }

    pub fn subjects(&self) -> &[GlyphKind] {
        &self.subjects
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) -> Result<()> {
        let slot = self
            .frozen
            .get_mut(layer)
            .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        *slot = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.frozen.get(layer).copied().unwrap_or(false)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Each layer's weights (row-major) followed by its bias.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn block_index<T: PartialEq>(vocab: &[T], value: Option<T>) -> Option<usize> {
        match value {
            None => Some(0),
            Some(v) => vocab.iter().position(|x| *x == v).map(|i| i + 1),
        }
    }

    /// Writes one input row for `(x_t, t, cond)` into `row`.
    fn encode_into(&self, x_t: &Raster, t: usize, cond: &Condition, row: &mut [f64]) -> Result<()> {
        if x_t.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                got: x_t.shape(),
            });
        }
        if t == 0 || t > self.train_steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.train_steps
            )));
        }
        if !self.role.accepts(cond) {
            return Err(Error::invalid(format!(
                "{:?} denoiser does not accept condition {cond}",
                self.role
            )));
        }
        let unknown = || Error::invalid(format!("condition {cond} outside the model vocabulary"));
        let scene = Self::block_index(&self.scenes, cond.scene).ok_or_else(unknown)?;
        let subject = Self::block_index(&self.subjects, cond.subject).ok_or_else(unknown)?;
        let dim = x_t.len();
        row.fill(0.0);
        row[..dim].copy_from_slice(x_t.as_slice());
        row[dim + scene] = 1.0;
        let sub_off = dim + 1 + self.scenes.len();
        row[sub_off + subject] = 1.0;
        let tau = t as f64 / self.train_steps as f64;
        let phase = std::f64::consts::FRAC_PI_2 * tau;
        let n = row.len();
        row[n - 2] = phase.sin();
        row[n - 1] = phase.cos();
        Ok(())
    }

    pub(crate) fn encode_batch<'a, I>(&self, items: I) -> Result<Array2<f64>>
    where
        I: ExactSizeIterator<Item = (&'a Raster, usize, &'a Condition)>,
    {
        let mut x = Array2::zeros((items.len(), self.layers[0].inputs()));
        for (mut row, (xt, t, c)) in x.axis_iter_mut(Axis(0)).zip(items) {
            self.encode_into(xt, t, c, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }

    fn forward(&self, input: Array2<f64>) -> Tape {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.apply(activations.last().expect("nonempty"));
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Tape { activations }
    }

    /// Predictions for a batch of encoded rows.
    pub(crate) fn forward_batch(&self, input: Array2<f64>) -> Array2<f64> {
        self.forward(input).activations.pop().expect("nonempty")
    }

    /// Back-propagates `d_out = ∂L/∂output` through a tape.
    fn backward(&self, tape: &Tape, d_out: Array2<f64>) -> Gradients {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let a_in = &tape.activations[i];
            let (gw, gb) = if self.frozen[i] {
                (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.raw_dim()))
            } else {
                (delta.t().dot(a_in), delta.sum_axis(Axis(0)))
            };
            grads.push((gw, gb));
            if i > 0 {
                let mut d_in = delta.dot(&l.weights);
                d_in.zip_mut_with(a_in, |d, a| *d *= 1.0 - a * a);
                delta = d_in;
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// Mean over rows of `‖output - target‖²` and its exact gradient.
    pub(crate) fn loss_and_gradients(&self, input: Array2<f64>, target: &Array2<f64>) -> Result<(f64, Gradients)> {
        let rows = input.nrows();
        if rows == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let tape = self.forward(input);
        let out = tape.activations.last().expect("nonempty");
        if out.dim() != target.dim() {
            return Err(Error::invalid("target shape does not match the output layer"));
        }
        let diff = out - target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / rows as f64;
        let d_out = diff * (2.0 / rows as f64);
        Ok((loss, self.backward(&tape, d_out)))
    }

    /// Gradient descent step `θ ← θ - lr·g`; frozen layers are left alone.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for ((l, (gw, gb)), frozen) in self.layers.iter_mut().zip(&grads.layers).zip(&self.frozen) {
            if *frozen {
                continue;
            }
            l.weights.scaled_add(-lr, gw);
            l.bias.scaled_add(-lr, gb);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Little-endian binary layout: magic, version, header fields, then every
    /// parameter as `f64` in [`parameters`](Self::parameters) order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let u32le = |w: &mut W, v: usize| w.write_all(&(v as u32).to_le_bytes());
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[match self.role {
            DenoiserRole::Scene => 0u8,
            DenoiserRole::SceneSubject => 1u8,
        }])?;
        u32le(w, self.shape.0)?;
        u32le(w, self.shape.1)?;
        u32le(w, self.shape.2)?;
        u32le(w, self.train_steps)?;
        u32le(w, self.scenes.len())?;
        for s in &self.scenes {
            let idx = SceneKind::ALL.iter().position(|k| k == s).expect("known kind");
            w.write_all(&[idx as u8])?;
        }
        u32le(w, self.subjects.len())?;
        for g in &self.subjects {
            let idx = GlyphKind::ALL.iter().position(|k| k == g).expect("known kind");
            w.write_all(&[idx as u8])?;
        }
        let widths = self.widths();
        u32le(w, widths.len())?;
        for v in widths {
            u32le(w, v)?;
        }
        for p in self.parameters() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated parameter file".into()))?;
            Ok(b)
        }
        fn word<R: Read>(r: &mut R) -> Result<usize> {
            Ok(u32::from_le_bytes(take::<R, 4>(r)?) as usize)
        }
        if &take::<R, 8>(r)? != MAGIC {
            return Err(Error::Format("not a parameter file".into()));
        }
        let version = word(r)?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let role = match take::<R, 1>(r)?[0] {
            0 => DenoiserRole::Scene,
            1 => DenoiserRole::SceneSubject,
            b => return Err(Error::Format(format!("unknown role tag {b}"))),
        };
        let shape = (word(r)?, word(r)?, word(r)?);
        let train_steps = word(r)?;
        let n = word(r)?;
        let scenes = (0..n)
            .map(|_| {
                let i = take::<R, 1>(r)?[0] as usize;
                SceneKind::ALL
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("unknown scene tag {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = word(r)?;
        let subjects = (0..n)
            .map(|_| {
                let i = take::<R, 1>(r)?[0] as usize;
                GlyphKind::ALL
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("unknown subject tag {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = word(r)?;
        if n < 2 {
            return Err(Error::Format("need at least input and output widths".into()));
        }
        let widths = (0..n).map(|_| word(r)).collect::<Result<Vec<_>>>()?;
        let mut model = Self::new(role, shape, train_steps, scenes, subjects, &widths[1..n - 1], 0)
            .map_err(|e| Error::Format(e.to_string()))?;
        if model.widths() != widths {
            return Err(Error::Format(format!(
                "layer widths {widths:?} disagree with header (expected {:?})",
                model.widths()
            )));
        }
        let values = (0..model.parameter_count())
            .map(|_| Ok(f64::from_le_bytes(take::<R, 8>(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::Format(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        model.set_parameters(&values)?;
        Ok(model)
    }
}

impl Denoiser for MlpDenoiser {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster> {
        let input = self.encode_batch(std::iter::once((x_t, t, cond)))?;
        let out = self.forward_batch(input);
        let (h, w, c) = self.shape;
        Ok(Raster::from_parts(h, w, c, out.into_raw_vec_and_offset().0))
    }
}
