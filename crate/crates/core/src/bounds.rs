//! Sound output bounds for [`Mlp`]s over box-shaped input sets.
//!
//! Two methods are provided:
//!
//! - **IBP**: layerwise interval arithmetic. Cheap and sound, often loose.
//! - **CROWN**: backward propagation of linear bounds through ReLU
//!   relaxations. Intermediate pre-activation bounds are themselves computed
//!   with CROWN and intersected with IBP.
//!
//! Unstable ReLUs (`l < 0 < u`) use the chord `u/(u-l) · (z - l)` as the upper
//! line and a lower line of slope 1 when `u >= -l`, slope 0 otherwise.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Layer, Mlp};

/// Per-coordinate interval `[lower[i], upper[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidArgument(format!(
                "box coordinate {i} has lower {} above upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: &[f64]) -> Self {
        Self { lower: x.to_vec(), upper: x.to_vec() }
    }

    /// `[x - radius, x + radius]` intersected with `[lo, hi]` per coordinate.
    pub fn around_clipped(x: &[f64], radius: f64, lo: f64, hi: f64) -> Result<Self> {
        if radius < 0.0 || radius.is_nan() {
            return Err(Error::NegativeEpsilon(radius));
        }
        let lower = x.iter().map(|v| (v - radius).clamp(lo, hi)).collect();
        let upper = x.iter().map(|v| (v + radius).clamp(lo, hi)).collect();
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// True if `other` lies inside `self`.
    pub fn contains_box(&self, other: &BoxBounds) -> bool {
        other.len() == self.len()
            && (0..self.len()).all(|i| self.lower[i] <= other.lower[i] && other.upper[i] <= self.upper[i])
    }

    /// Coordinatewise intersection. Where rounding makes the two boxes
    /// disjoint in a coordinate, `self`'s interval is kept.
    pub fn intersect(&self, other: &BoxBounds) -> BoxBounds {
        let mut lower = Vec::with_capacity(self.len());
        let mut upper = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let lo = self.lower[i].max(other.lower[i]);
            let hi = self.upper[i].min(other.upper[i]);
            if lo <= hi {
                lower.push(lo);
                upper.push(hi);
            } else {
                lower.push(self.lower[i]);
                upper.push(self.upper[i]);
            }
        }
        BoxBounds { lower, upper }
    }
}

fn check_dims(mlp: &Mlp, input: &BoxBounds) -> Result<()> {
    if input.len() != mlp.input_dim() {
        return Err(Error::DimensionMismatch { expected: mlp.input_dim(), got: input.len() });
    }
    Ok(())
}

/// Interval image of one affine layer. Accumulation order matches
/// [`Layer::apply`] so degenerate boxes reproduce the forward pass exactly.
fn affine_interval(layer: &Layer, lower: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(layer.outputs);
    let mut hi = Vec::with_capacity(layer.outputs);
    for i in 0..layer.outputs {
        let (mut a, mut b) = (layer.biases[i], layer.biases[i]);
        for (j, &w) in layer.row(i).iter().enumerate() {
            if w >= 0.0 {
                a += w * lower[j];
                b += w * upper[j];
            } else {
                a += w * upper[j];
                b += w * lower[j];
            }
        }
        lo.push(a);
        hi.push(b);
    }
    (lo, hi)
}

/// Intermediate values of an IBP pass, kept for [`ibp_backward`].
#[derive(Debug, Clone)]
pub struct IbpTrace {
    /// Input bounds of each layer (`inputs[0]` is the network input box).
    pub inputs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Pre-activation bounds of each layer.
    pub pre: Vec<(Vec<f64>, Vec<f64>)>,
    pub output: BoxBounds,
}

pub fn ibp_trace(mlp: &Mlp, input: &BoxBounds) -> Result<IbpTrace> {
    check_dims(mlp, input)?;
    let last = mlp.layers().len() - 1;
    let mut inputs = vec![(input.lower.clone(), input.upper.clone())];
    let mut pre = Vec::with_capacity(mlp.layers().len());
    for (k, layer) in mlp.layers().iter().enumerate() {
        let (l, u) = inputs.last().expect("non-empty");
        let (zl, zu) = affine_interval(layer, l, u);
        let (al, au) = if k < last {
            (zl.iter().map(|v| v.max(0.0)).collect(), zu.iter().map(|v| v.max(0.0)).collect())
        } else {
            (zl.clone(), zu.clone())
        };
        pre.push((zl, zu));
        inputs.push((al, au));
    }
    let (l, u) = inputs.pop().expect("output bounds");
    Ok(IbpTrace { inputs, pre, output: BoxBounds { lower: l, upper: u } })
}

/// Interval bound propagation.
pub fn ibp_bounds(mlp: &Mlp, input: &BoxBounds) -> Result<BoxBounds> {
    Ok(ibp_trace(mlp, input)?.output)
}

/// Reverse-mode gradient of `d_lower · lower_out + d_upper · upper_out` for an
/// IBP pass. Parameter gradients are accumulated into `grads` (times
/// `scale`); the gradients with respect to the input box are returned.
pub fn ibp_backward(
    mlp: &Mlp,
    trace: &IbpTrace,
    d_lower: &[f64],
    d_upper: &[f64],
    grads: &mut Gradients,
    scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let out = mlp.output_dim();
    if d_lower.len() != out || d_upper.len() != out {
        return Err(Error::DimensionMismatch { expected: out, got: d_lower.len().min(d_upper.len()) });
    }
    let last = mlp.layers().len() - 1;
    let mut dl: Vec<f64> = d_lower.iter().map(|v| v * scale).collect();
    let mut du: Vec<f64> = d_upper.iter().map(|v| v * scale).collect();
    for k in (0..mlp.layers().len()).rev() {
        let layer = &mlp.layers()[k];
        if k < last {
            let (zl, zu) = &trace.pre[k];
            for i in 0..layer.outputs {
                if zl[i] <= 0.0 {
                    dl[i] = 0.0;
                }
                if zu[i] <= 0.0 {
                    du[i] = 0.0;
                }
            }
        }
        let (l, u) = &trace.inputs[k];
        let g = &mut grads.layers[k];
        let mut next_l = vec![0.0; layer.inputs];
        let mut next_u = vec![0.0; layer.inputs];
        for i in 0..layer.outputs {
            let (a, b) = (dl[i], du[i]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            g.biases[i] += a + b;
            let row = layer.row(i);
            let grow = &mut g.weights[i * layer.inputs..(i + 1) * layer.inputs];
            for j in 0..layer.inputs {
                let w = row[j];
                if w >= 0.0 {
                    grow[j] += a * l[j] + b * u[j];
                    next_l[j] += a * w;
                    next_u[j] += b * w;
                } else {
                    grow[j] += a * u[j] + b * l[j];
                    next_u[j] += a * w;
                    next_l[j] += b * w;
                }
            }
        }
        dl = next_l;
        du = next_u;
    }
    Ok((dl, du))
}

/// Linear relaxation `slope_lo · z <= relu(z) <= slope_hi · z + icpt_hi`.
#[derive(Debug, Clone, Copy)]
struct Relaxation {
    slope_lo: f64,
    slope_hi: f64,
    icpt_hi: f64,
}

fn relax(l: f64, u: f64) -> Relaxation {
    if l >= 0.0 {
        Relaxation { slope_lo: 1.0, slope_hi: 1.0, icpt_hi: 0.0 }
    } else if u <= 0.0 {
        Relaxation { slope_lo: 0.0, slope_hi: 0.0, icpt_hi: 0.0 }
    } else {
        let slope_hi = u / (u - l);
        // slope 1 leaves the smaller triangle when u >= -l; ties take slope 1
        let slope_lo = if u >= -l { 1.0 } else { 0.0 };
        Relaxation { slope_lo, slope_hi, icpt_hi: -l * slope_hi }
    }
}

/// Bounds the pre-activations of layer `target` by back-substituting its
/// affine map through the relaxed ReLUs of all earlier layers.
fn backsubstitute(
    mlp: &Mlp,
    target: usize,
    relaxations: &[Vec<Relaxation>],
    input: &BoxBounds,
) -> BoxBounds {
    let layer = &mlp.layers()[target];
    let rows = layer.outputs;
    let mut width = layer.inputs;
    let mut a_hi = layer.weights.clone();
    let mut a_lo = layer.weights.clone();
    let mut c_hi = layer.biases.clone();
    let mut c_lo = layer.biases.clone();
    for j in (0..target).rev() {
        let relax_j = &relaxations[j];
        for i in 0..rows {
            for n in 0..width {
                let r = relax_j[n];
                let idx = i * width + n;
                let lam = a_hi[idx];
                if lam >= 0.0 {
                    a_hi[idx] = lam * r.slope_hi;
                    c_hi[i] += lam * r.icpt_hi;
                } else {
                    a_hi[idx] = lam * r.slope_lo;
                }
                let lam = a_lo[idx];
                if lam >= 0.0 {
                    a_lo[idx] = lam * r.slope_lo;
                } else {
                    a_lo[idx] = lam * r.slope_hi;
                    c_lo[i] += lam * r.icpt_hi;
                }
            }
        }
        let prev = &mlp.layers()[j];
        let next_width = prev.inputs;
        let mut next_hi = vec![0.0; rows * next_width];
        let mut next_lo = vec![0.0; rows * next_width];
        for i in 0..rows {
            for n in 0..width {
                let (h, l) = (a_hi[i * width + n], a_lo[i * width + n]);
                if h != 0.0 {
                    c_hi[i] += h * prev.biases[n];
                    let dst = &mut next_hi[i * next_width..(i + 1) * next_width];
                    for (d, w) in dst.iter_mut().zip(prev.row(n)) {
                        *d += h * w;
                    }
                }
                if l != 0.0 {
                    c_lo[i] += l * prev.biases[n];
                    let dst = &mut next_lo[i * next_width..(i + 1) * next_width];
                    for (d, w) in dst.iter_mut().zip(prev.row(n)) {
                        *d += l * w;
                    }
                }
            }
        }
        a_hi = next_hi;
        a_lo = next_lo;
        width = next_width;
    }
    let mut lower = Vec::with_capacity(rows);
    let mut upper = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut hi = c_hi[i];
        let mut lo = c_lo[i];
        for j in 0..width {
            let h = a_hi[i * width + j];
            hi += if h >= 0.0 { h * input.upper[j] } else { h * input.lower[j] };
            let l = a_lo[i * width + j];
            lo += if l >= 0.0 { l * input.lower[j] } else { l * input.upper[j] };
        }
        lower.push(lo);
        upper.push(hi.max(lo));
    }
    BoxBounds { lower, upper }
}

/// CROWN output bounds (not intersected with IBP at the output layer).
pub fn crown_bounds(mlp: &Mlp, input: &BoxBounds) -> Result<BoxBounds> {
    check_dims(mlp, input)?;
    let n_layers = mlp.layers().len();
    let mut relaxations: Vec<Vec<Relaxation>> = Vec::with_capacity(n_layers - 1);
    let mut ibp_in = (input.lower.clone(), input.upper.clone());
    for k in 0..n_layers - 1 {
        let (zl, zu) = affine_interval(&mlp.layers()[k], &ibp_in.0, &ibp_in.1);
        let ibp_pre = BoxBounds { lower: zl, upper: zu };
        let pre = if k == 0 {
            ibp_pre
        } else {
            ibp_pre.intersect(&backsubstitute(mlp, k, &relaxations, input))
        };
        relaxations.push(pre.lower.iter().zip(&pre.upper).map(|(&l, &u)| relax(l, u)).collect());
        ibp_in = (
            pre.lower.iter().map(|v| v.max(0.0)).collect(),
            pre.upper.iter().map(|v| v.max(0.0)).collect(),
        );
    }
    Ok(backsubstitute(mlp, n_layers - 1, &relaxations, input))
}

/// CROWN bounds intersected with IBP bounds; never looser than either.
pub fn crown_ibp_bounds(mlp: &Mlp, input: &BoxBounds) -> Result<BoxBounds> {
    let ibp = ibp_bounds(mlp, input)?;
    Ok(ibp.intersect(&crown_bounds(mlp, input)?))
}

/// Feature bounds of `g` for every observation within l∞ distance `eps` of
/// `o`, with the perturbed observation clipped to the pixel range `[0, 1]`.
pub fn composite_feature_bounds(g: &Mlp, o: &[f64], eps: f64) -> Result<BoxBounds> {
    let input = BoxBounds::around_clipped(o, eps, 0.0, 1.0)?;
    crown_ibp_bounds(g, &input)
}
