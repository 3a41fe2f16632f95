//! Layered parameter vectors, L2 clipping and Gaussian noise.
//!
//! A [`ParamVector`] is an ordered list of named layers. It carries model
//! parameters, per-user updates and noise alike. Two vectors are compatible
//! only when their layer names, order and lengths agree exactly; arithmetic
//! on incompatible vectors is an error rather than a broadcast.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub values: Vec<f64>,
}

impl Layer {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Layer {
            name: name.into(),
            values,
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(sum_sq(&self.values))
    }
}

/// Layer names and lengths, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape(pub Vec<(String, usize)>);

impl Shape {
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = (S, usize)>) -> Self {
        Shape(layers.into_iter().map(|(n, l)| (n.into(), l)).collect())
    }

    pub fn num_layers(&self) -> usize {
        self.0.len()
    }

    pub fn num_params(&self) -> usize {
        self.0.iter().map(|(_, l)| l).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layers: Vec<Layer>,
}

fn sum_sq(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum()
}

impl ParamVector {
    /// Builds a vector from layers. Requires at least one layer and unique names.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("a parameter vector needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::shape(format!("duplicate layer name {:?}", layer.name)));
            }
        }
        Ok(ParamVector { layers })
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Vec<f64>)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(n, v)| Layer::new(n, v)).collect())
    }

    pub fn zeros(shape: &Shape) -> Self {
        ParamVector {
            layers: shape
                .0
                .iter()
                .map(|(name, len)| Layer::new(name.clone(), alloc::vec![0.0; *len]))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::new(l.name.clone(), alloc::vec![0.0; l.values.len()]))
                .collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape(
            self.layers
                .iter()
                .map(|l| (l.name.clone(), l.values.len()))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.values.iter_mut())
    }

    /// `sqrt(sum_j ||v(j)||^2)`, the norm of the concatenated layers.
    pub fn flat_norm(&self) -> f64 {
        libm::sqrt(self.layers.iter().map(|l| sum_sq(&l.values)).sum())
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers.iter().map(Layer::norm).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn is_compatible(&self, other: &ParamVector) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.values.len() == b.values.len())
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape().0,
                other.shape().0
            )))
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled_assign(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamVector) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        self.values_mut().for_each(|x| *x *= c);
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled_assign(other, -1.0)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale_assign(c);
        out
    }
}

fn check_bound(bound: f64) -> Result<()> {
    if bound > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("clip bound must be positive, got {bound}")))
    }
}

/// Scales `slices` by `min(1, bound / norm)`. The result is guaranteed to
/// have recomputed norm `<= bound`, so clipping is exactly idempotent.
/// Returns true when the values were rescaled.
fn project_slices(slices: &mut [&mut [f64]], bound: f64) -> bool {
    let norm_of = |s: &[&mut [f64]]| libm::sqrt(s.iter().map(|v| sum_sq(v)).sum());
    let norm = norm_of(slices);
    if norm <= bound {
        return false;
    }
    let mut factor = bound / norm;
    loop {
        for s in slices.iter_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
        if norm_of(slices) <= bound {
            return true;
        }
        // rounding left the norm a few ulps above the bound
        factor = 1.0 - 4.0 * f64::EPSILON;
    }
}

/// In-place L2 projection of the whole vector onto the ball of radius `bound`.
pub fn flat_clip_in_place(delta: &mut ParamVector, bound: f64) -> Result<bool> {
    check_bound(bound)?;
    delta.check_finite("update passed to clipping")?;
    let mut slices: Vec<&mut [f64]> = delta.layers.iter_mut().map(|l| &mut l.values[..]).collect();
    Ok(project_slices(&mut slices, bound))
}

/// In-place per-layer projection; layer `j` is clipped to `bounds[j]`.
pub fn per_layer_clip_in_place(delta: &mut ParamVector, bounds: &[f64]) -> Result<bool> {
    if bounds.len() != delta.num_layers() {
        return Err(Error::config(format!(
            "{} per-layer bounds for {} layers",
            bounds.len(),
            delta.num_layers()
        )));
    }
    bounds.iter().try_for_each(|&b| check_bound(b))?;
    delta.check_finite("update passed to clipping")?;
    let mut clipped = false;
    for (layer, &bound) in delta.layers.iter_mut().zip(bounds) {
        clipped |= project_slices(&mut [&mut layer.values[..]], bound);
    }
    Ok(clipped)
}

/// `delta * min(1, bound / ||delta||)`. The zero vector is returned unchanged.
pub fn flat_clip(delta: &ParamVector, bound: f64) -> Result<ParamVector> {
    let mut out = delta.clone();
    flat_clip_in_place(&mut out, bound)?;
    Ok(out)
}

pub fn per_layer_clip(delta: &ParamVector, bounds: &[f64]) -> Result<ParamVector> {
    let mut out = delta.clone();
    per_layer_clip_in_place(&mut out, bounds)?;
    Ok(out)
}

/// Adds an independent `N(0, sigma^2)` draw to every coordinate.
pub fn add_gaussian_noise<R: Rng + ?Sized>(v: &ParamVector, sigma: f64, rng: &mut R) -> Result<ParamVector> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = v.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for x in out.values_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *x += sigma * n;
    }
    Ok(out)
}

/// Clipping strategy applied to each user update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClipConfig {
    /// Project the concatenated update. `bound = inf` disables clipping.
    Flat {
        #[serde(with = "unbounded")]
        bound: f64,
    },
    /// Project each layer onto its own ball; the total bound is `sqrt(sum S_j^2)`.
    PerLayer {
        #[serde(with = "unbounded_each")]
        bounds: Vec<f64>,
    },
}

/// Infinite bounds travel as `null`, which text formats can represent.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &f64, s: S) -> Result<S::Ok, S::Error> {
        b.is_finite().then_some(*b).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod unbounded_each {
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &[f64], s: S) -> Result<S::Ok, S::Error> {
        b.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|b| b.unwrap_or(f64::INFINITY))
            .collect())
    }
}

impl ClipConfig {
    pub fn flat(bound: f64) -> Self {
        ClipConfig::Flat { bound }
    }

    pub fn disabled() -> Self {
        ClipConfig::Flat { bound: f64::INFINITY }
    }

    /// Splits a total budget evenly: `S_j = S / sqrt(m)`.
    pub fn per_layer_uniform(total: f64, num_layers: usize) -> Self {
        let each = total / libm::sqrt(num_layers as f64);
        ClipConfig::PerLayer {
            bounds: alloc::vec![each; num_layers],
        }
    }

    pub fn total_bound(&self) -> f64 {
        match self {
            ClipConfig::Flat { bound } => *bound,
            ClipConfig::PerLayer { bounds } => libm::sqrt(bounds.iter().map(|b| b * b).sum()),
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.total_bound().is_infinite()
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self {
            ClipConfig::Flat { bound } => check_bound(*bound),
            ClipConfig::PerLayer { bounds } => {
                if bounds.len() != num_layers {
                    return Err(Error::config(format!(
                        "{} per-layer bounds for a model with {num_layers} layers",
                        bounds.len()
                    )));
                }
                bounds.iter().try_for_each(|&b| check_bound(b))
            }
        }
    }

    /// Clips in place, returning whether any projection happened.
    pub fn apply_in_place(&self, delta: &mut ParamVector) -> Result<bool> {
        match self {
            ClipConfig::Flat { bound } => flat_clip_in_place(delta, *bound),
            ClipConfig::PerLayer { bounds } => per_layer_clip_in_place(delta, bounds),
        }
    }

    pub fn apply(&self, delta: &ParamVector) -> Result<ParamVector> {
        let mut out = delta.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }
}
