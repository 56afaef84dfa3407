//! Mutual modulation fusion.
//!
//! Each branch's `n x n` neighborhood at a pixel is re-weighted by a softmax
//! over its similarity to the other branch's center vector there, then the
//! two modulated maps are merged and projected back to `c` channels.
//! Out-of-range neighbors replicate the nearest edge pixel.

use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Conv, Init, ParamStore};
use crate::tensor::{Element, Tensor};

/// How the two modulated maps are merged before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combine {
    /// Channel concatenation (`2c` channels) then a 1x1 projection to `c`.
    #[default]
    Concat,
    /// Elementwise sum then a 1x1 projection `c -> c`.
    Sum,
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Combine::Concat),
            "sum" => Ok(Combine::Sum),
            other => Err(Error::Config(format!("unknown fusion combine mode {other:?} (concat|sum)"))),
        }
    }
}

impl Combine {
    pub fn as_str(self) -> &'static str {
        match self {
            Combine::Concat => "concat",
            Combine::Sum => "sum",
        }
    }
}

pub(crate) fn check_window(n: usize) -> Result<()> {
    if n.is_multiple_of(2) {
        return Err(Error::Config(format!("modulation window must be odd, got {n}")));
    }
    Ok(())
}

fn clamp_offset(i: usize, d: isize, len: usize) -> usize {
    (i as isize + d).clamp(0, len as isize - 1) as usize
}

/// The `n x n` window of `f` (`c x h x w`) centered at `(i, j)`, as an
/// `n² x c` matrix in row-major window order.
pub fn extract_neighborhood<T: Element>(f: &Tensor<T>, i: usize, j: usize, n: usize) -> Result<Tensor<T>> {
    check_window(n)?;
    let [c, h, w] = chw(f.shape())?;
    if i >= h || j >= w {
        return Err(Error::dim(format!("pixel ({i}, {j}) outside {h} x {w} map")));
    }
    let r = (n / 2) as isize;
    let mut out = Vec::with_capacity(n * n * c);
    for di in -r..=r {
        for dj in -r..=r {
            let (y, x) = (clamp_offset(i, di, h), clamp_offset(j, dj, w));
            out.extend((0..c).map(|ch| f.data()[(ch * h + y) * w + x]));
        }
    }
    Tensor::new(vec![n * n, c], out)
}

/// Softmax over slots of `<center, neighborhood[slot]>`.
pub fn modulation_weights<T: Element>(center: &[T], neighborhood: &Tensor<T>) -> Result<Vec<T>> {
    let s = neighborhood.shape();
    if s.len() != 2 || s[1] != center.len() {
        return Err(Error::dim(format!(
            "center of length {} does not match neighborhood {:?}",
            center.len(),
            s
        )));
    }
    let scores: Vec<T> = neighborhood
        .data()
        .chunks(s[1])
        .map(|row| row.iter().zip(center).map(|(&a, &b)| a * b).sum())
        .collect();
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn chw(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::dim(format!("expected a c x h x w feature map, got {shape:?}"))),
    }
}

/// Gather indices unfolding a `c x h x w` map to `n² x c x h x w` windows.
fn unfold_index(c: usize, h: usize, w: usize, n: usize) -> Arc<[usize]> {
    let r = (n / 2) as isize;
    let mut idx = Vec::with_capacity(n * n * c * h * w);
    for di in -r..=r {
        for dj in -r..=r {
            let rows: Vec<usize> = (0..h).map(|i| clamp_offset(i, di, h)).collect();
            let cols: Vec<usize> = (0..w).map(|j| clamp_offset(j, dj, w)).collect();
            for ch in 0..c {
                for &y in &rows {
                    idx.extend(cols.iter().map(|&x| (ch * h + y) * w + x));
                }
            }
        }
    }
    idx.into()
}

/// Indices repeating a `len`-element tensor `times` times along a new leading axis.
fn repeat_index(len: usize, times: usize) -> Arc<[usize]> {
    (0..times).flat_map(|_| 0..len).collect::<Vec<_>>().into()
}

/// Indices broadcasting `n² x h x w` weights over a channel axis.
fn spread_index(slots: usize, c: usize, hw: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(slots * c * hw);
    for s in 0..slots {
        for _ in 0..c {
            idx.extend(s * hw..(s + 1) * hw);
        }
    }
    idx.into()
}

/// Modulated map and the weights that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Modulated {
    pub output: Var,
    /// `n² x h x w`; each pixel's column sums to one.
    pub weights: Var,
}

/// Re-weights the neighborhoods of `target` by similarity to the center
/// vectors of `guide`. Both are `c x h x w`; the output has the same shape.
pub fn cross_modulate<T: Element>(tape: &mut Tape<T>, target: Var, guide: Var, n: usize) -> Result<Modulated> {
    check_window(n)?;
    let [c, h, w] = chw(tape.shape(target))?;
    if tape.shape(guide) != tape.shape(target) {
        return Err(Error::dim(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            tape.shape(target),
            tape.shape(guide)
        )));
    }
    let slots = n * n;
    let full = [slots, c, h, w];
    let windows = tape.gather(target, unfold_index(c, h, w, n), &full)?;
    let centers = tape.gather(guide, repeat_index(c * h * w, slots), &full)?;
    let prod = tape.mul(windows, centers)?;
    let scores = tape.sum_axis(prod, 1)?;
    let weights = tape.softmax(scores, 0)?;
    let spread = tape.gather(weights, spread_index(slots, c, h * w), &full)?;
    let weighted = tape.mul(windows, spread)?;
    let output = tape.sum_axis(weighted, 0)?;
    Ok(Modulated { output, weights })
}

/// Merges two `c x h x w` maps and applies a 1x1 projection
/// (`c x 2c x 1 x 1` for concat, `c x c x 1 x 1` for sum).
pub fn fuse<T: Element>(
    tape: &mut Tape<T>,
    f_l: Var,
    f_g: Var,
    proj_w: Var,
    proj_b: Option<Var>,
    combine: Combine,
) -> Result<Var> {
    if tape.shape(f_l) != tape.shape(f_g) {
        return Err(Error::dim(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            tape.shape(f_l),
            tape.shape(f_g)
        )));
    }
    let merged = match combine {
        Combine::Concat => tape.concat(&[f_l, f_g], 0)?,
        Combine::Sum => tape.add(f_l, f_g)?,
    };
    tape.conv2d(merged, proj_w, proj_b, 1, 0)
}

fn eval_modulation<T: Element>(target: &Tensor<T>, guide: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let g = tape.constant(guide.clone());
    let m = cross_modulate(&mut tape, t, g, n)?;
    Ok(tape.tensor(m.output))
}

/// Local map updated from global centers.
pub fn local_to_global_fuse<T: Element>(f_l: &Tensor<T>, f_g: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    eval_modulation(f_l, f_g, n)
}

/// Global map updated from local centers.
pub fn global_to_local_fuse<T: Element>(f_g: &Tensor<T>, f_l: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    eval_modulation(f_g, f_l, n)
}

/// Which fusion block joins the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Two-route mutual modulation, then merge and project.
    Mmf,
    /// Plain merge and project of the raw branch maps.
    Plain,
}

/// Fusion block with its learned projection.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub kind: FusionKind,
    pub window: usize,
    pub combine: Combine,
    pub proj: Conv,
}

/// Intermediate maps from one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub local: Var,
    pub global: Var,
    pub fused: Var,
}

impl Fusion {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        channels: usize,
        kind: FusionKind,
        window: usize,
        combine: Combine,
    ) -> Result<Self> {
        check_window(window)?;
        let c_in = match combine {
            Combine::Concat => 2 * channels,
            Combine::Sum => channels,
        };
        let proj = Conv::new(store, init, "fusion.proj", c_in, channels, 1, 1, 0, true);
        Ok(Self { kind, window, combine, proj })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bindings, f_l: Var, f_g: Var) -> Result<FusionOutput> {
        let (local, global) = match self.kind {
            FusionKind::Mmf => {
                let l = cross_modulate(tape, f_l, f_g, self.window)?.output;
                let g = cross_modulate(tape, f_g, f_l, self.window)?.output;
                (l, g)
            }
            FusionKind::Plain => (f_l, f_g),
        };
        let fused = fuse(tape, local, global, p.var(self.proj.w), self.proj.b.map(|b| p.var(b)), self.combine)?;
        Ok(FusionOutput { local, global, fused })
    }
}
