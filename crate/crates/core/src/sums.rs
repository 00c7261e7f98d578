//! Kernel sums `Σ_i w_i k(t, s_i)` over point sets.
//!
//! Two backends share one interface:
//!
//! * [`Backend::Exact`] evaluates every pair directly, summing in a fixed
//!   row-major order.
//! * [`Backend::Grid`] spreads points onto a regular grid with multilinear
//!   (hat-function) weights `φ_a(x)` and evaluates the binned kernel
//!
//!   `k_b(x, y) = Σ_{a,b} φ_a(x) φ_b(y) k(g_a − g_b)`
//!
//!   by FFT convolution. `k_b` is itself a positive semi-definite kernel that
//!   converges to `k` as the grid spacing shrinks, so every statistic computed
//!   through this backend is an exact statistic for `k_b`. Spacing is
//!   `min bandwidth / resolution` per coordinate. Integer-valued coordinates
//!   with few levels (binary responses) get a unit lattice and are represented
//!   exactly. Points outside the grid box are clamped to its boundary; the box
//!   extends several bandwidths past the bulk of the reference data.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelMixture;

/// Kernel-sum evaluation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    /// Grid spacing is the smallest bandwidth divided by `resolution`.
    Grid { resolution: f64 },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Exact
    }
}

impl Backend {
    /// Grid resolution used for fitting runs.
    pub const FIT_RESOLUTION: f64 = 8.0;

    pub fn grid(resolution: f64) -> Self {
        Backend::Grid { resolution }
    }

    /// Grid used for fitting: finer in one coordinate, coarser in more.
    pub fn for_fitting(dim: usize) -> Self {
        if dim <= 1 {
            Backend::grid(Self::FIT_RESOLUTION)
        } else {
            Backend::grid(Self::FIT_RESOLUTION / 2.0)
        }
    }
}

const MAX_GRID_NODES: usize = 1 << 21;
const MAX_GRID_DIM: usize = 3;
const KERNEL_REACH: f64 = 6.0;
const BOX_PAD: f64 = 2.0;
const LATTICE_MAX_LEVELS: usize = 16;

/// Kernel sums for one kernel, with an optional grid.
pub struct KernelSums {
    kernel: KernelMixture,
    grid: Option<Grid>,
}

impl std::fmt::Debug for KernelSums {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSums")
            .field("kernel", &self.kernel)
            .field("grid_nodes", &self.grid.as_ref().map(|g| g.node_count))
            .finish()
    }
}

/// Precomputed `F(t) = Σ_i w_{i,c} k(t, s_i)` for `channels` weight columns.
#[derive(Debug, Clone)]
pub struct Field {
    channels: usize,
    inner: FieldInner,
}

#[derive(Debug, Clone)]
enum FieldInner {
    Exact { sources: Dataset, weights: Vec<f64> },
    Grid { nodes: Vec<f64> },
}

impl Field {
    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Leave-one-out kernel means within one sample.
#[derive(Debug, Clone)]
pub struct SelfSums {
    /// `(1/(M−1)) Σ_{l≠j} k(y_j, y_l)` for each `j`.
    pub loo_means: Vec<f64>,
    /// `(1/M²) Σ_j Σ_l k(y_j, y_l)`, diagonal included.
    pub mean_all: f64,
}

impl KernelSums {
    pub fn exact(kernel: KernelMixture) -> Self {
        Self { kernel, grid: None }
    }

    /// Grid backend whose box covers the `reference` samples.
    pub fn grid(kernel: KernelMixture, reference: &[&Dataset], resolution: f64) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::InvalidArgument {
                name: "resolution",
                reason: format!("must be positive, got {resolution}"),
            });
        }
        let grid = Grid::build(&kernel, reference, resolution)?;
        Ok(Self {
            kernel,
            grid: Some(grid),
        })
    }

    pub fn new(kernel: KernelMixture, backend: Backend, reference: &[&Dataset]) -> Result<Self> {
        match backend {
            Backend::Exact => Ok(Self::exact(kernel)),
            Backend::Grid { resolution } => Self::grid(kernel, reference, resolution),
        }
    }

    pub fn kernel(&self) -> &KernelMixture {
        &self.kernel
    }

    pub fn is_grid(&self) -> bool {
        self.grid.is_some()
    }

    fn check(&self, d: &Dataset) -> Result<()> {
        if d.dim() != self.kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.kernel.dim(),
                got: d.dim(),
            });
        }
        if d.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    /// Kernel value of a point with itself under this backend.
    pub fn diag(&self, p: &[f64]) -> f64 {
        match &self.grid {
            None => self.kernel.eval(p, p),
            Some(g) => g.self_value(p),
        }
    }

    /// `k(x, y)` under this backend.
    pub fn pair(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.grid {
            None => self.kernel.eval(x, y),
            Some(g) => g.pair_value(&self.kernel, x, y),
        }
    }

    /// Field with `channels` weight columns; `weights` is row-major `n × channels`.
    pub fn field(&self, sources: &Dataset, weights: &[f64], channels: usize) -> Result<Field> {
        self.check(sources)?;
        if channels == 0 || weights.len() != sources.len() * channels {
            return Err(Error::DimensionMismatch {
                expected: sources.len() * channels.max(1),
                got: weights.len(),
            });
        }
        let inner = match &self.grid {
            None => FieldInner::Exact {
                sources: sources.clone(),
                weights: weights.to_vec(),
            },
            Some(g) => {
                let mut mass = vec![0.0; g.node_count * channels];
                g.spread(sources, weights, channels, &mut mass);
                FieldInner::Grid {
                    nodes: g.convolve(&mass, channels),
                }
            }
        };
        Ok(Field { channels, inner })
    }

    /// Field with every source weighted by `w`.
    pub fn uniform_field(&self, sources: &Dataset, w: f64) -> Result<Field> {
        self.field(sources, &vec![w; sources.len()], 1)
    }

    /// Evaluates a field at each target; row-major `n_targets × channels`.
    pub fn eval(&self, field: &Field, targets: &Dataset) -> Result<Vec<f64>> {
        self.check(targets)?;
        let ch = field.channels;
        let mut out = vec![0.0; targets.len() * ch];
        match (&field.inner, &self.grid) {
            (FieldInner::Exact { sources, weights }, _) => {
                for (t, o) in targets.rows().zip(out.chunks_exact_mut(ch)) {
                    for (s, w) in sources.rows().zip(weights.chunks_exact(ch)) {
                        let k = self.kernel.eval(t, s);
                        for c in 0..ch {
                            o[c] += w[c] * k;
                        }
                    }
                }
            }
            (FieldInner::Grid { nodes }, Some(g)) => {
                for (t, o) in targets.rows().zip(out.chunks_exact_mut(ch)) {
                    g.interpolate(t, nodes, ch, o);
                }
            }
            (FieldInner::Grid { .. }, None) => unreachable!("grid field without grid"),
        }
        Ok(out)
    }

    /// `(1/(n_a n_b)) Σ_i Σ_j k(a_i, b_j)`.
    pub fn mean_cross(&self, a: &Dataset, b: &Dataset) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        let f = self.uniform_field(b, 1.0 / b.len() as f64)?;
        let v = self.eval(&f, a)?;
        Ok(v.iter().sum::<f64>() / a.len() as f64)
    }

    /// Mean kernel value within a sample, with or without the diagonal.
    pub fn mean_self(&self, a: &Dataset, include_diagonal: bool) -> Result<f64> {
        self.check(a)?;
        let n = a.len();
        let s = self.self_sums(a)?;
        if include_diagonal {
            Ok(s.mean_all)
        } else {
            if n < 2 {
                return Err(Error::TooFewSamples { need: 2, got: n });
            }
            Ok(s.loo_means.iter().sum::<f64>() / n as f64)
        }
    }

    /// Leave-one-out means and the all-pairs mean within `pts`.
    pub fn self_sums(&self, pts: &Dataset) -> Result<SelfSums> {
        self.check(pts)?;
        let m = pts.len();
        let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
        let mut loo = vec![0.0; m];
        let mut diag_total = 0.0;
        match &self.grid {
            None => {
                for i in 0..m {
                    let xi = pts.row(i);
                    diag_total += self.kernel.eval(xi, xi);
                    for j in (i + 1)..m {
                        let k = self.kernel.eval(xi, pts.row(j));
                        loo[i] += k;
                        loo[j] += k;
                    }
                }
            }
            Some(g) => {
                let mut mass = vec![0.0; g.node_count];
                g.spread(pts, &vec![1.0; m], 1, &mut mass);
                let nodes = g.convolve(&mass, 1);
                let mut v = [0.0];
                for (i, p) in pts.rows().enumerate() {
                    v[0] = 0.0;
                    g.interpolate(p, &nodes, 1, &mut v);
                    let d = g.self_value(p);
                    diag_total += d;
                    loo[i] = v[0] - d;
                }
            }
        }
        let off_total: f64 = loo.iter().sum();
        for v in &mut loo {
            *v /= denom;
        }
        Ok(SelfSums {
            loo_means: loo,
            mean_all: (off_total + diag_total) / (m * m) as f64,
        })
    }
}

#[derive(Debug, Clone)]
struct Axis {
    lo: f64,
    step: f64,
    count: usize,
    lattice: bool,
}

impl Axis {
    /// Lower node index and weight on the upper neighbour.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.count == 1 {
            return (0, 0.0);
        }
        let u = ((x - self.lo) / self.step).clamp(0.0, (self.count - 1) as f64);
        let i0 = (u.floor() as usize).min(self.count - 2);
        (i0, u - i0 as f64)
    }
}

struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    node_count: usize,
    padded: Vec<usize>,
    padded_strides: Vec<usize>,
    padded_total: usize,
    kernel_hat: Vec<Complex64>,
    plans: Vec<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
    // kernel at offsets in {-1, 0, 1}^d (in node units), base-3 index
    near: Vec<f64>,
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

/// Smallest integer ≥ n whose only prime factors are 2, 3 and 5.
fn good_fft_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl Grid {
    fn build(kernel: &KernelMixture, reference: &[&Dataset], resolution: f64) -> Result<Self> {
        let dim = kernel.dim();
        if dim > MAX_GRID_DIM {
            return Err(Error::InvalidArgument {
                name: "backend",
                reason: format!("grid backend supports at most {MAX_GRID_DIM} coordinates"),
            });
        }
        let mut axes = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut vals: Vec<f64> = Vec::new();
            for d in reference {
                if d.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: d.dim(),
                    });
                }
                vals.extend(d.rows().map(|r| r[j]));
            }
            if vals.is_empty() {
                return Err(Error::EmptyDataset);
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument {
                    name: "reference",
                    reason: "non-finite value".into(),
                });
            }
            vals.sort_by(f64::total_cmp);
            let (min, max) = (vals[0], vals[vals.len() - 1]);
            let integral = vals.iter().all(|v| v.fract() == 0.0);
            if integral && max - min < LATTICE_MAX_LEVELS as f64 {
                axes.push(Axis {
                    lo: min,
                    step: 1.0,
                    count: (max - min) as usize + 1,
                    lattice: true,
                });
                continue;
            }
            let q_lo = quantile_sorted(&vals, 0.001);
            let q_hi = quantile_sorted(&vals, 0.999);
            let spread = (q_hi - q_lo).max(kernel.max_bandwidth(j));
            let pad = BOX_PAD * kernel.max_bandwidth(j);
            let lo = min.max(q_lo - 3.0 * spread) - pad;
            let hi = max.min(q_hi + 3.0 * spread) + pad;
            let step = kernel.min_bandwidth(j) / resolution;
            let count = ((hi - lo) / step).ceil() as usize + 1;
            axes.push(Axis {
                lo,
                step,
                count,
                lattice: false,
            });
        }
        // coarsen continuous axes uniformly if the box is too large
        loop {
            let total: usize = axes.iter().map(|a| a.count).product();
            if total <= MAX_GRID_NODES || axes.iter().all(|a| a.lattice) {
                break;
            }
            for a in axes.iter_mut().filter(|a| !a.lattice) {
                let hi = a.lo + a.step * (a.count - 1) as f64;
                a.step *= 1.25;
                a.count = ((hi - a.lo) / a.step).ceil() as usize + 1;
            }
        }

        let mut strides = vec![1; dim];
        for j in (0..dim.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * axes[j + 1].count;
        }
        let node_count: usize = axes.iter().map(|a| a.count).product();

        let reach: Vec<usize> = axes
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let t = (KERNEL_REACH * kernel.max_bandwidth(j) / a.step).ceil() as usize;
                t.min(a.count.saturating_sub(1))
            })
            .collect();
        let padded: Vec<usize> = axes
            .iter()
            .zip(&reach)
            .map(|(a, &t)| good_fft_size(a.count + t))
            .collect();
        let mut padded_strides = vec![1; dim];
        for j in (0..dim.saturating_sub(1)).rev() {
            padded_strides[j] = padded_strides[j + 1] * padded[j + 1];
        }
        let padded_total: usize = padded.iter().product();

        let mut planner = FftPlanner::new();
        let plans: Vec<_> = padded
            .iter()
            .map(|&p| (planner.plan_fft_forward(p), planner.plan_fft_inverse(p)))
            .collect();

        // kernel sampled at signed node offsets, wrapped onto the padded torus
        let mut kern = vec![Complex64::new(0.0, 0.0); padded_total];
        let mut idx = vec![0usize; dim];
        let mut offset = vec![0.0; dim];
        'outer: for (flat, slot) in kern.iter_mut().enumerate() {
            let mut rem = flat;
            for j in 0..dim {
                idx[j] = rem / padded_strides[j];
                rem %= padded_strides[j];
            }
            for j in 0..dim {
                let p = padded[j];
                let o = if idx[j] <= reach[j] {
                    idx[j] as f64
                } else if idx[j] >= p - reach[j] {
                    idx[j] as f64 - p as f64
                } else {
                    continue 'outer;
                };
                offset[j] = o * axes[j].step;
            }
            *slot = Complex64::new(kernel.eval_offset(&offset), 0.0);
        }

        let mut near = vec![0.0; 3usize.pow(dim as u32)];
        for (code, slot) in near.iter_mut().enumerate() {
            let mut rem = code;
            for j in (0..dim).rev() {
                offset[j] = ((rem % 3) as f64 - 1.0) * axes[j].step;
                rem /= 3;
            }
            *slot = kernel.eval_offset(&offset);
        }

        let mut grid = Grid {
            axes,
            strides,
            node_count,
            padded,
            padded_strides,
            padded_total,
            kernel_hat: Vec::new(),
            plans,
            near,
        };
        grid.fft_all(&mut kern, false);
        let scale = 1.0 / padded_total as f64;
        for v in &mut kern {
            *v *= scale;
        }
        grid.kernel_hat = kern;
        Ok(grid)
    }

    /// Calls `f(flat_node_index, weight)` for every corner of the cell holding `x`.
    #[inline]
    fn for_corners(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        let dim = self.axes.len();
        let mut base = 0;
        let mut lower = [(0usize, 0.0f64); MAX_GRID_DIM];
        for j in 0..dim {
            let (i0, frac) = self.axes[j].locate(x[j]);
            base += i0 * self.strides[j];
            lower[j] = (i0, frac);
        }
        for mask in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = base;
            for (j, &(_, frac)) in lower.iter().enumerate().take(dim) {
                if mask >> j & 1 == 1 {
                    if frac == 0.0 {
                        w = 0.0;
                        break;
                    }
                    w *= frac;
                    idx += self.strides[j];
                } else {
                    w *= 1.0 - frac;
                }
            }
            if w != 0.0 {
                f(idx, w);
            }
        }
    }

    fn spread(&self, pts: &Dataset, weights: &[f64], ch: usize, mass: &mut [f64]) {
        for (p, w) in pts.rows().zip(weights.chunks_exact(ch)) {
            self.for_corners(p, |idx, phi| {
                let m = &mut mass[idx * ch..(idx + 1) * ch];
                for c in 0..ch {
                    m[c] += phi * w[c];
                }
            });
        }
    }

    fn interpolate(&self, p: &[f64], nodes: &[f64], ch: usize, out: &mut [f64]) {
        self.for_corners(p, |idx, phi| {
            let v = &nodes[idx * ch..(idx + 1) * ch];
            for c in 0..ch {
                out[c] += phi * v[c];
            }
        });
    }

    /// `k_b(p, p)`.
    fn self_value(&self, p: &[f64]) -> f64 {
        let dim = self.axes.len();
        let mut corners = [(0usize, 0.0f64); 1 << MAX_GRID_DIM];
        let mut n = 0;
        self.for_corners(p, |idx, phi| {
            corners[n] = (idx, phi);
            n += 1;
        });
        let mut total = 0.0;
        for a in &corners[..n] {
            for b in &corners[..n] {
                let mut code = 0;
                let (mut ra, mut rb) = (a.0, b.0);
                for j in 0..dim {
                    let ia = ra / self.strides[j];
                    let ib = rb / self.strides[j];
                    ra %= self.strides[j];
                    rb %= self.strides[j];
                    code = code * 3 + (ia as isize - ib as isize + 1) as usize;
                }
                total += a.1 * b.1 * self.near[code];
            }
        }
        total
    }

    /// `k_b(x, y)` for arbitrary points.
    fn pair_value(&self, kernel: &KernelMixture, x: &[f64], y: &[f64]) -> f64 {
        let dim = self.axes.len();
        let mut cx = [(0usize, 0.0f64); 1 << MAX_GRID_DIM];
        let mut cy = cx;
        let (mut nx, mut ny) = (0, 0);
        self.for_corners(x, |idx, phi| {
            cx[nx] = (idx, phi);
            nx += 1;
        });
        self.for_corners(y, |idx, phi| {
            cy[ny] = (idx, phi);
            ny += 1;
        });
        let mut offset = [0.0; MAX_GRID_DIM];
        let mut total = 0.0;
        for a in &cx[..nx] {
            for b in &cy[..ny] {
                let (mut ra, mut rb) = (a.0, b.0);
                for j in 0..dim {
                    let ia = ra / self.strides[j];
                    let ib = rb / self.strides[j];
                    ra %= self.strides[j];
                    rb %= self.strides[j];
                    offset[j] = (ia as f64 - ib as f64) * self.axes[j].step;
                }
                total += a.1 * b.1 * kernel.eval_offset(&offset[..dim]);
            }
        }
        total
    }

    fn fft_all(&self, buf: &mut [Complex64], inverse: bool) {
        let dim = self.axes.len();
        for j in 0..dim {
            let p = self.padded[j];
            let stride = self.padded_strides[j];
            let plan = if inverse {
                &self.plans[j].1
            } else {
                &self.plans[j].0
            };
            if stride == 1 {
                plan.process(buf);
                continue;
            }
            let mut line = vec![Complex64::new(0.0, 0.0); p];
            let block = stride * p;
            for outer in (0..self.padded_total).step_by(block) {
                for inner in 0..stride {
                    let start = outer + inner;
                    for (k, v) in line.iter_mut().enumerate() {
                        *v = buf[start + k * stride];
                    }
                    plan.process(&mut line);
                    for (k, v) in line.iter().enumerate() {
                        buf[start + k * stride] = *v;
                    }
                }
            }
        }
    }

    /// Discrete convolution of node masses with the kernel, per channel.
    fn convolve(&self, mass: &[f64], ch: usize) -> Vec<f64> {
        let dim = self.axes.len();
        let mut out = vec![0.0; self.node_count * ch];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.padded_total];
        let mut idx = vec![0usize; dim];
        for c in 0..ch {
            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for node in 0..self.node_count {
                let m = mass[node * ch + c];
                if m != 0.0 {
                    buf[self.padded_index(node, &mut idx)] = Complex64::new(m, 0.0);
                }
            }
            self.fft_all(&mut buf, false);
            for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
                *b *= k;
            }
            self.fft_all(&mut buf, true);
            for node in 0..self.node_count {
                out[node * ch + c] = buf[self.padded_index(node, &mut idx)].re;
            }
        }
        out
    }

    #[inline]
    fn padded_index(&self, node: usize, idx: &mut [usize]) -> usize {
        let mut rem = node;
        let mut flat = 0;
        for j in 0..self.axes.len() {
            idx[j] = rem / self.strides[j];
            rem %= self.strides[j];
            flat += idx[j] * self.padded_strides[j];
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_data(n: usize, dim: usize, scale: f64, shift: f64, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let v = (0..n * dim)
            .map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(dim, v).unwrap()
    }

    fn brute_mean_cross(k: &KernelMixture, a: &Dataset, b: &Dataset) -> f64 {
        let mut s = 0.0;
        for x in a.rows() {
            for y in b.rows() {
                s += k.eval(x, y);
            }
        }
        s / (a.len() * b.len()) as f64
    }

    #[test]
    fn exact_backend_matches_brute_force() {
        let k = KernelMixture::uniform(vec![vec![0.5, 1.0, 1.5]]).unwrap();
        let a = normal_data(40, 1, 1.0, 0.0, 1);
        let b = normal_data(30, 1, 2.0, 1.0, 2);
        let sums = KernelSums::exact(k.clone());
        assert_relative_eq!(
            sums.mean_cross(&a, &b).unwrap(),
            brute_mean_cross(&k, &a, &b),
            epsilon = 1e-14
        );
        let s = sums.self_sums(&a).unwrap();
        assert_relative_eq!(s.mean_all, brute_mean_cross(&k, &a, &a), epsilon = 1e-14);
        let loo0: f64 = (1..40).map(|l| k.eval(a.row(0), a.row(l))).sum::<f64>() / 39.0;
        assert_relative_eq!(s.loo_means[0], loo0, epsilon = 1e-14);
    }

    #[test]
    fn grid_backend_approximates_exact_sums() {
        for dim in [1, 2] {
            let bws: Vec<Vec<f64>> = (0..dim).map(|_| vec![0.5, 1.0, 1.5]).collect();
            let k = KernelMixture::uniform(bws).unwrap();
            let a = normal_data(300, dim, 1.0, 0.0, 3);
            let b = normal_data(200, dim, 1.5, 0.5, 4);
            let exact = KernelSums::exact(k.clone());
            let grid = KernelSums::grid(k, &[&a, &b], 20.0).unwrap();
            let e = exact.mean_cross(&a, &b).unwrap();
            let g = grid.mean_cross(&a, &b).unwrap();
            assert_relative_eq!(e, g, max_relative = 2e-3);
            let es = exact.self_sums(&a).unwrap();
            let gs = grid.self_sums(&a).unwrap();
            assert_relative_eq!(es.mean_all, gs.mean_all, max_relative = 2e-3);
            for (x, y) in es.loo_means.iter().zip(&gs.loo_means) {
                assert_relative_eq!(x, y, max_relative = 5e-3);
            }
        }
    }

    #[test]
    fn grid_field_is_consistent_with_pair_sums() {
        // Σ_i Σ_j k_b(a_i, b_j) computed from either side's field agrees
        let k = KernelMixture::uniform(vec![vec![0.7, 1.4]]).unwrap();
        let a = normal_data(100, 1, 1.0, 0.0, 5);
        let b = normal_data(80, 1, 1.0, 2.0, 6);
        let g = KernelSums::grid(k, &[&a, &b], 6.0).unwrap();
        let ab = g.mean_cross(&a, &b).unwrap();
        let ba = g.mean_cross(&b, &a).unwrap();
        assert_relative_eq!(ab, ba, max_relative = 1e-10);
    }

    #[test]
    fn lattice_axis_is_exact_for_binary_coordinates() {
        let k = KernelMixture::uniform(vec![vec![0.6], vec![0.8]]).unwrap();
        let mut rng = rng_from_seed(8);
        let mut rows = Vec::new();
        for _ in 0..150 {
            let x: f64 = rng.sample(StandardNormal);
            rows.push([x, if rng.random::<bool>() { 1.0 } else { 0.0 }]);
        }
        let a = Dataset::from_rows(&rows).unwrap();
        let g = KernelSums::grid(k.clone(), &[&a], 40.0).unwrap();
        let e = KernelSums::exact(k);
        assert_relative_eq!(
            g.mean_self(&a, false).unwrap(),
            e.mean_self(&a, false).unwrap(),
            max_relative = 1e-3
        );
    }

    #[test]
    fn grid_pair_matches_field_and_diag() {
        let k = KernelMixture::uniform(vec![vec![0.7, 1.4], vec![1.0, 2.0]]).unwrap();
        let a = normal_data(60, 2, 1.0, 0.0, 11);
        let g = KernelSums::grid(k.clone(), &[&a], 6.0).unwrap();
        let (x, y) = (a.row(0), a.row(1));
        let one = Dataset::from_rows(&[y]).unwrap();
        let f = g.uniform_field(&one, 1.0).unwrap();
        let v = g.eval(&f, &Dataset::from_rows(&[x]).unwrap()).unwrap()[0];
        assert_relative_eq!(g.pair(x, y), v, max_relative = 1e-9);
        assert_relative_eq!(g.pair(x, x), g.diag(x), epsilon = 1e-14);
        assert_relative_eq!(g.pair(x, y), k.eval(x, y), max_relative = 5e-3);
    }

    #[test]
    fn multichannel_field_matches_single_channels() {
        let k = KernelMixture::single(&[1.0]).unwrap();
        let src = normal_data(50, 1, 1.0, 0.0, 9);
        let tgt = normal_data(20, 1, 1.0, 0.3, 10);
        let w: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        for sums in [
            KernelSums::exact(k.clone()),
            KernelSums::grid(k.clone(), &[&src, &tgt], 10.0).unwrap(),
        ] {
            let both = sums.eval(&sums.field(&src, &w, 2).unwrap(), &tgt).unwrap();
            let w0: Vec<f64> = w.iter().step_by(2).cloned().collect();
            let first = sums.eval(&sums.field(&src, &w0, 1).unwrap(), &tgt).unwrap();
            for (i, v) in first.iter().enumerate() {
                assert_relative_eq!(both[2 * i], *v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn binned_kernel_is_psd() {
        // Gram of the binned kernel over points = Φ K_nodes Φᵀ; check via quadratic forms
        let k = KernelMixture::single(&[1.0]).unwrap();
        let pts = normal_data(12, 1, 1.0, 0.0, 11);
        let g = KernelSums::grid(k, &[&pts], 3.0).unwrap();
        let mut rng = rng_from_seed(12);
        for _ in 0..20 {
            let w: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let f = g.field(&pts, &w, 1).unwrap();
            let v = g.eval(&f, &pts).unwrap();
            let q: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!(q > -1e-10, "{q}");
        }
    }

    #[test]
    fn good_sizes() {
        assert_eq!(good_fft_size(7), 8);
        assert_eq!(good_fft_size(11), 12);
        assert_eq!(good_fft_size(121), 125);
    }
}
