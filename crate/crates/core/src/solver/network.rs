//! Convolutional current predictor with hand-written reverse pass.
//!
//! Layout per sample: three stages of `conv3x3 -> residual block -> leaky`,
//! then `flatten -> fc1 -> dropout -> leaky -> fc2`. Activations are stored
//! channel-major (`c x m x m`). Convolutions use im2col and a real GEMM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Network shape constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Output channels of the three convolutional stages.
    pub channels: [usize; 3],
    /// Width of the hidden fully connected layer.
    pub hidden: usize,
    /// Negative slope of every LeakyReLU.
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], hidden: 512, leaky_slope: 0.2 }
    }
}

impl ArchConfig {
    /// Reduced widths that keep a 64x64 reconstruction within minutes on one core.
    pub fn desk() -> Self {
        Self { channels: [4, 8, 8], hidden: 512, leaky_slope: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky slope must be non-negative".into()));
        }
        Ok(())
    }
}

pub const IN_CHANNELS: usize = 4;
pub const OUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn layout(m: usize, arch: &ArchConfig) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let b = Block { name, offset, shape };
        offset += b.len();
        blocks.push(b);
    };
    let mut c_prev = IN_CHANNELS;
    for (s, &c) in arch.channels.iter().enumerate() {
        push(format!("stage{s}.conv.weight"), vec![c, c_prev, 3, 3]);
        push(format!("stage{s}.conv.bias"), vec![c]);
        for r in 1..=2 {
            push(format!("stage{s}.res{r}.weight"), vec![c, c, 3, 3]);
            push(format!("stage{s}.res{r}.bias"), vec![c]);
        }
        c_prev = c;
    }
    let flat = c_prev * m * m;
    push("fc1.weight".into(), vec![arch.hidden, flat]);
    push("fc1.bias".into(), vec![arch.hidden]);
    push("fc2.weight".into(), vec![OUT_CHANNELS * m * m, arch.hidden]);
    push("fc2.bias".into(), vec![OUT_CHANNELS * m * m]);
    blocks
}

/// Number of trainable scalars for a grid side `m`, without allocating them.
pub fn parameter_count(m: usize, arch: &ArchConfig) -> usize {
    layout(m, arch).iter().map(Block::len).sum()
}

/// All trainable weights as one flat vector with named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Real = f64> {
    pub m: usize,
    pub arch: ArchConfig,
    pub blocks: Vec<Block>,
    pub data: Vec<T>,
}

/// Dropout behaviour for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a, T> {
    Eval,
    /// Multiplicative mask over the `n x hidden` FC1 outputs: 0 or `1/(1-p)`.
    Train { mask: &'a [T] },
}

struct StageTape<T> {
    input: Vec<T>,
    conv: Vec<T>,
    res1: Vec<T>,
    sum: Vec<T>,
}

/// Intermediate values kept for the reverse pass.
pub struct Tape<T: Real> {
    n: usize,
    stages: Vec<Vec<StageTape<T>>>,
    flat: Vec<T>,
    fc1: Vec<T>,
    mask: Option<Vec<T>>,
}

#[inline]
fn leaky<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

#[inline]
fn leaky_grad<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

fn im2col<T: Real>(x: &[T], c: usize, m: usize, col: &mut [T]) {
    let mm = m * m;
    for ci in 0..c {
        let src = &x[ci * mm..(ci + 1) * mm];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * mm..(ci * 9 + ky * 3 + kx + 1) * mm];
                for i in 0..m {
                    let si = i as isize + ky as isize - 1;
                    let dst = &mut row[i * m..(i + 1) * m];
                    if si < 0 || si >= m as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[si as usize * m..(si as usize + 1) * m];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&srow[..m - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..m - 1].copy_from_slice(&srow[1..]);
                            dst[m - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], c: usize, m: usize, dx: &mut [T]) {
    let mm = m * m;
    for ci in 0..c {
        let dst = &mut dx[ci * mm..(ci + 1) * mm];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * mm..(ci * 9 + ky * 3 + kx + 1) * mm];
                for i in 0..m {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= m as isize {
                        continue;
                    }
                    let src = &row[i * m..(i + 1) * m];
                    let drow = &mut dst[si as usize * m..(si as usize + 1) * m];
                    match kx {
                        0 => {
                            for j in 1..m {
                                drow[j - 1] += src[j];
                            }
                        }
                        1 => {
                            for j in 0..m {
                                drow[j] += src[j];
                            }
                        }
                        _ => {
                            for j in 0..m - 1 {
                                drow[j + 1] += src[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = W * im2col(x) + b`.
fn conv_forward<T: Real>(w: &[T], b: &[T], x: &[T], c_in: usize, c_out: usize, m: usize, col: &mut [T]) -> Vec<T> {
    let mm = m * m;
    im2col(x, c_in, m, col);
    let mut out = vec![T::zero(); c_out * mm];
    for (co, bias) in b.iter().enumerate() {
        out[co * mm..(co + 1) * mm].fill(*bias);
    }
    let k = c_in * 9;
    T::gemm(c_out, k, mm, T::one(), w, (k as isize, 1), &col[..k * mm], (mm as isize, 1), T::one(), &mut out, (mm as isize, 1));
    out
}

/// Accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    w: &[T],
    x: &[T],
    dout: &[T],
    c_in: usize,
    c_out: usize,
    m: usize,
    col: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let mm = m * m;
    let k = c_in * 9;
    im2col(x, c_in, m, col);
    for (co, g) in db.iter_mut().enumerate() {
        *g += dout[co * mm..(co + 1) * mm].iter().copied().sum::<T>();
    }
    T::gemm(c_out, mm, k, T::one(), dout, (mm as isize, 1), &col[..k * mm], (1, mm as isize), T::one(), dw, (k as isize, 1));
    if !need_dx {
        return Vec::new();
    }
    T::gemm(k, c_out, mm, T::one(), w, (1, k as isize), dout, (mm as isize, 1), T::zero(), &mut col[..k * mm], (mm as isize, 1));
    let mut dx = vec![T::zero(); c_in * mm];
    col2im_add(&col[..k * mm], c_in, m, &mut dx);
    dx
}

fn check_finite<T: Real>(v: &[T], what: impl FnOnce() -> String) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

impl<T: Real> NetworkParams<T> {
    /// All-zero parameters.
    pub fn zeros(m: usize, arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        if m < 2 {
            return Err(Error::Config("grid side must be at least 2".into()));
        }
        let blocks = layout(m, arch);
        let n = blocks.iter().map(Block::len).sum();
        Ok(Self { m, arch: arch.clone(), blocks, data: vec![T::zero(); n] })
    }

    /// Kaiming-uniform weights with fan-in scaling for the LeakyReLU slope,
    /// zero biases.
    pub fn init(m: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(m, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch.leaky_slope;
        let gain = (2.0 / (1.0 + a * a)).sqrt();
        for b in &p.blocks {
            if b.shape.len() < 2 {
                continue;
            }
            let fan_in: usize = b.shape[1..].iter().product();
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            for v in &mut p.data[b.range()] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[T]> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &self.data[b.range()])
    }

    fn idx(&self, name: &str) -> std::ops::Range<usize> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(Block::range)
            .expect("block exists by construction")
    }

    fn flat_len(&self) -> usize {
        self.arch.channels[2] * self.m * self.m
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            m: self.m,
            arch: self.arch.clone(),
            blocks: self.blocks.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    /// Maps an `n x 4 x m x m` input to `n x 2 x m x m`.
    pub fn forward(&self, input: &[T], n: usize, mode: Mode<'_, T>) -> Result<(Vec<T>, Tape<T>)> {
        let m = self.m;
        let mm = m * m;
        if input.len() != n * IN_CHANNELS * mm {
            return Err(Error::ShapeMismatch(format!(
                "network input has {} values, expected {n} x {IN_CHANNELS} x {m} x {m}",
                input.len()
            )));
        }
        check_finite(input, || "network input".into())?;
        let slope = T::of(self.arch.leaky_slope);
        let chans = self.arch.channels;
        let cmax = chans.iter().copied().max().unwrap().max(IN_CHANNELS);
        let per_sample: Vec<(Vec<StageTape<T>>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![T::zero(); cmax * 9 * mm],
                |col, s| -> Result<(Vec<StageTape<T>>, Vec<T>)> {
                    let mut x = input[s * IN_CHANNELS * mm..(s + 1) * IN_CHANNELS * mm].to_vec();
                    let mut c_prev = IN_CHANNELS;
                    let mut tapes = Vec::with_capacity(3);
                    for (st, &c) in chans.iter().enumerate() {
                        let w = &self.data[self.idx(&format!("stage{st}.conv.weight"))];
                        let b = &self.data[self.idx(&format!("stage{st}.conv.bias"))];
                        let conv = conv_forward(w, b, &x, c_prev, c, m, col);
                        check_finite(&conv, || format!("network layer {}", 3 * st))?;
                        let w1 = &self.data[self.idx(&format!("stage{st}.res1.weight"))];
                        let b1 = &self.data[self.idx(&format!("stage{st}.res1.bias"))];
                        let res1 = conv_forward(w1, b1, &conv, c, c, m, col);
                        check_finite(&res1, || format!("network layer {}", 3 * st + 1))?;
                        let act: Vec<T> = res1.iter().map(|&v| leaky(v, slope)).collect();
                        let w2 = &self.data[self.idx(&format!("stage{st}.res2.weight"))];
                        let b2 = &self.data[self.idx(&format!("stage{st}.res2.bias"))];
                        let mut sum = conv_forward(w2, b2, &act, c, c, m, col);
                        for (a, b) in sum.iter_mut().zip(&conv) {
                            *a += *b;
                        }
                        check_finite(&sum, || format!("network layer {}", 3 * st + 2))?;
                        let out: Vec<T> = sum.iter().map(|&v| leaky(v, slope)).collect();
                        tapes.push(StageTape { input: std::mem::replace(&mut x, out), conv, res1, sum });
                        c_prev = c;
                    }
                    Ok((tapes, x))
                },
            )
            .collect::<Result<_>>()?;
        let flat_len = self.flat_len();
        let mut stages = Vec::with_capacity(n);
        let mut flat = Vec::with_capacity(n * flat_len);
        for (t, x) in per_sample {
            stages.push(t);
            flat.extend(x);
        }
        let h = self.arch.hidden;
        let out_len = OUT_CHANNELS * mm;
        let w1 = &self.data[self.idx("fc1.weight")];
        let b1 = &self.data[self.idx("fc1.bias")];
        let mut fc1 = vec![T::zero(); n * h];
        for row in fc1.chunks_exact_mut(h) {
            row.copy_from_slice(b1);
        }
        T::gemm(n, flat_len, h, T::one(), &flat, (flat_len as isize, 1), w1, (1, flat_len as isize), T::one(), &mut fc1, (h as isize, 1));
        check_finite(&fc1, || "network layer 9".into())?;
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train { mask } => {
                if mask.len() != n * h {
                    return Err(Error::ShapeMismatch("dropout mask size".into()));
                }
                Some(mask.to_vec())
            }
        };
        let hidden: Vec<T> = fc1
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let a = leaky(v, slope);
                match &mask {
                    Some(mk) => a * mk[i],
                    None => a,
                }
            })
            .collect();
        let w2 = &self.data[self.idx("fc2.weight")];
        let b2 = &self.data[self.idx("fc2.bias")];
        let mut out = vec![T::zero(); n * out_len];
        for row in out.chunks_exact_mut(out_len) {
            row.copy_from_slice(b2);
        }
        T::gemm(n, h, out_len, T::one(), &hidden, (h as isize, 1), w2, (1, h as isize), T::one(), &mut out, (out_len as isize, 1));
        check_finite(&out, || "network layer 10".into())?;
        Ok((out, Tape { n, stages, flat, fc1, mask }))
    }

    /// Gradient of a scalar with respect to every parameter, given its
    /// gradient `d_out` with respect to the network output.
    pub fn backward(&self, tape: &Tape<T>, d_out: &[T]) -> Result<Vec<T>> {
        let n = tape.n;
        let m = self.m;
        let mm = m * m;
        let h = self.arch.hidden;
        let out_len = OUT_CHANNELS * mm;
        let flat_len = self.flat_len();
        if d_out.len() != n * out_len {
            return Err(Error::ShapeMismatch("output gradient size".into()));
        }
        let slope = T::of(self.arch.leaky_slope);
        let mut grad = vec![T::zero(); self.len()];

        // fc2
        let hidden: Vec<T> = tape
            .fc1
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let a = leaky(v, slope);
                match &tape.mask {
                    Some(mk) => a * mk[i],
                    None => a,
                }
            })
            .collect();
        {
            let r = self.idx("fc2.weight");
            T::gemm(out_len, n, h, T::one(), d_out, (1, out_len as isize), &hidden, (h as isize, 1), T::zero(), &mut grad[r], (h as isize, 1));
            let rb = self.idx("fc2.bias");
            for row in d_out.chunks_exact(out_len) {
                for (g, d) in grad[rb.clone()].iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        let mut d_hidden = vec![T::zero(); n * h];
        let w2 = &self.data[self.idx("fc2.weight")];
        T::gemm(n, out_len, h, T::one(), d_out, (out_len as isize, 1), w2, (h as isize, 1), T::zero(), &mut d_hidden, (h as isize, 1));
        for (i, d) in d_hidden.iter_mut().enumerate() {
            let mut g = *d * leaky_grad(tape.fc1[i], slope);
            if let Some(mk) = &tape.mask {
                g *= mk[i];
            }
            *d = g;
        }
        // fc1
        {
            let r = self.idx("fc1.weight");
            T::gemm(h, n, flat_len, T::one(), &d_hidden, (1, h as isize), &tape.flat, (flat_len as isize, 1), T::zero(), &mut grad[r], (flat_len as isize, 1));
            let rb = self.idx("fc1.bias");
            for row in d_hidden.chunks_exact(h) {
                for (g, d) in grad[rb.clone()].iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        let mut d_flat = vec![T::zero(); n * flat_len];
        let w1 = &self.data[self.idx("fc1.weight")];
        T::gemm(n, h, flat_len, T::one(), &d_hidden, (h as isize, 1), w1, (flat_len as isize, 1), T::zero(), &mut d_flat, (flat_len as isize, 1));

        // convolutional stages, one sample at a time
        let conv_end = self.idx("fc1.weight").start;
        let chans = self.arch.channels;
        let cmax = chans.iter().copied().max().unwrap().max(IN_CHANNELS);
        let per_sample: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![T::zero(); cmax * 9 * mm],
                |col, s| {
                    let mut g = vec![T::zero(); conv_end];
                    let mut dx = d_flat[s * flat_len..(s + 1) * flat_len].to_vec();
                    for st in (0..3).rev() {
                        let c = chans[st];
                        let c_in = if st == 0 { IN_CHANNELS } else { chans[st - 1] };
                        let tape_s = &tape.stages[s][st];
                        let d_sum: Vec<T> = dx.iter().zip(&tape_s.sum).map(|(d, &v)| *d * leaky_grad(v, slope)).collect();
                        let act: Vec<T> = tape_s.res1.iter().map(|&v| leaky(v, slope)).collect();
                        let r2 = self.idx(&format!("stage{st}.res2.weight"));
                        let rb2 = self.idx(&format!("stage{st}.res2.bias"));
                        let (gw, gb) = split_two(&mut g, r2.clone(), rb2);
                        let d_act = conv_backward(&self.data[r2], &act, &d_sum, c, c, m, col, gw, gb, true);
                        let d_res1: Vec<T> = d_act.iter().zip(&tape_s.res1).map(|(d, &v)| *d * leaky_grad(v, slope)).collect();
                        let r1 = self.idx(&format!("stage{st}.res1.weight"));
                        let rb1 = self.idx(&format!("stage{st}.res1.bias"));
                        let (gw, gb) = split_two(&mut g, r1.clone(), rb1);
                        let mut d_conv = conv_backward(&self.data[r1], &tape_s.conv, &d_res1, c, c, m, col, gw, gb, true);
                        for (a, b) in d_conv.iter_mut().zip(&d_sum) {
                            *a += *b;
                        }
                        let r0 = self.idx(&format!("stage{st}.conv.weight"));
                        let rb0 = self.idx(&format!("stage{st}.conv.bias"));
                        let (gw, gb) = split_two(&mut g, r0.clone(), rb0);
                        dx = conv_backward(&self.data[r0], &tape_s.input, &d_conv, c_in, c, m, col, gw, gb, st > 0);
                    }
                    g
                },
            )
            .collect();
        // fixed-order reduction keeps the sum independent of scheduling
        for g in per_sample {
            for (a, b) in grad[..conv_end].iter_mut().zip(&g) {
                *a += *b;
            }
        }
        for b in &self.blocks {
            check_finite(&grad[b.range()], || format!("gradient of block {}", b.name))?;
        }
        Ok(grad)
    }
}

/// Disjoint mutable views of a weight block and its bias block.
fn split_two<T>(g: &mut [T], w: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(w.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[w], &mut hi[..b.end - b.start])
}

/// Bernoulli keep-mask scaled by `1/(1-p)`.
pub fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<T> {
    if p <= 0.0 {
        return vec![T::one(); len];
    }
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}
