//! 1-D U-Net over the frequency axis with hand-written reverse mode.
//!
//! Every layer keeps its parameters in [`Tensor`]s that carry their own
//! gradient accumulator. Forward passes return a cache of activations; the
//! backward pass consumes the cache, accumulates parameter gradients and can
//! optionally return the gradient with respect to the network input (needed
//! because later tones are conditioned on spectra computed from earlier
//! outputs).

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// Glorot/Xavier uniform initialization.
    pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = rng.random_range(-limit..limit));
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// `c = a * b + beta * c` on strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
    }
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Strided 1-D cross-correlation with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `[cout, cin, kernel]`.
    pub weight: Tensor,
    /// `[cout]`.
    pub bias: Tensor,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::glorot_uniform(&[cout, cin, kernel], cin * kernel, cout * kernel, rng),
            bias: Tensor::zeros(&[cout]),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_len(&self, lin: usize) -> usize {
        (lin + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn check(&self, x: &[f64], lin: usize) -> Result<()> {
        if x.len() != self.cin * lin {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} x {lin} inputs, got {}",
                self.cin,
                x.len()
            )));
        }
        if lin + 2 * self.pad < self.kernel {
            return Err(Error::ShapeMismatch("input shorter than kernel".into()));
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, x: &[f64], lin: usize) -> Vec<f64> {
        let lout = self.out_len(lin);
        let mut col = vec![0.0; self.cin * self.kernel * lout];
        for ci in 0..self.cin {
            let row_x = &x[ci * lin..(ci + 1) * lin];
            for t in 0..self.kernel {
                let row = &mut col[(ci * self.kernel + t) * lout..(ci * self.kernel + t + 1) * lout];
                for (o, v) in row.iter_mut().enumerate() {
                    let i = (o * self.stride + t) as isize - self.pad as isize;
                    if i >= 0 && (i as usize) < lin {
                        *v = row_x[i as usize];
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], lin: usize) -> Vec<f64> {
        let lout = self.out_len(lin);
        let mut x = vec![0.0; self.cin * lin];
        for ci in 0..self.cin {
            for t in 0..self.kernel {
                let row = &col[(ci * self.kernel + t) * lout..(ci * self.kernel + t + 1) * lout];
                for (o, v) in row.iter().enumerate() {
                    let i = (o * self.stride + t) as isize - self.pad as isize;
                    if i >= 0 && (i as usize) < lin {
                        x[ci * lin + i as usize] += v;
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &[f64], lin: usize) -> Result<Vec<f64>> {
        self.check(x, lin)?;
        let lout = self.out_len(lin);
        let ck = self.cin * self.kernel;
        let mut out = vec![0.0; self.cout * lout];
        for (co, row) in out.chunks_mut(lout).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.data[co]);
        }
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            x
        } else {
            owned = self.im2col(x, lin);
            &owned
        };
        gemm(self.cout, ck, lout, &self.weight.data, (ck, 1), col, (lout, 1), 1.0, &mut out, (lout, 1));
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward(&mut self, x: &[f64], lin: usize, dy: &[f64], need_dx: bool) -> Option<Vec<f64>> {
        let lout = self.out_len(lin);
        let ck = self.cin * self.kernel;
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            x
        } else {
            owned = self.im2col(x, lin);
            &owned
        };
        {
            let gb = self.bias.grad_mut();
            for (co, row) in dy.chunks(lout).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        let gw = self.weight.grad_mut();
        gemm(self.cout, lout, ck, dy, (lout, 1), col, (1, lout), 1.0, gw, (ck, 1));
        if !need_dx {
            return None;
        }
        let mut dcol = vec![0.0; ck * lout];
        gemm(ck, self.cout, lout, &self.weight.data, (1, ck), dy, (lout, 1), 0.0, &mut dcol, (lout, 1));
        if self.is_pointwise() {
            Some(dcol)
        } else {
            Some(self.col2im(&dcol, lin))
        }
    }
}

/// Transposed convolution with kernel size equal to the stride (exact
/// `stride`-fold upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1d {
    /// `[cin, cout, stride]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::glorot_uniform(&[cin, cout, stride], cin * stride, cout * stride, rng),
            bias: Tensor::zeros(&[cout]),
            cin,
            cout,
            stride,
        }
    }

    pub fn forward(&self, x: &[f64], lin: usize) -> Result<Vec<f64>> {
        if x.len() != self.cin * lin {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv expects {} x {lin} inputs, got {}",
                self.cin,
                x.len()
            )));
        }
        let s = self.stride;
        let lout = lin * s;
        let mut out = vec![0.0; self.cout * lout];
        for (co, row) in out.chunks_mut(lout).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.data[co]);
        }
        for t in 0..s {
            gemm(
                self.cout,
                self.cin,
                lin,
                &self.weight.data[t..],
                (s, self.cout * s),
                x,
                (lin, 1),
                1.0,
                &mut out[t..],
                (lout, s),
            );
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &[f64], lin: usize, dy: &[f64], need_dx: bool) -> Option<Vec<f64>> {
        let s = self.stride;
        let lout = lin * s;
        {
            let gb = self.bias.grad_mut();
            for (co, row) in dy.chunks(lout).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        let cout = self.cout;
        let gw = self.weight.grad_mut();
        for t in 0..s {
            gemm(cout, lin, self.cin, &dy[t..], (lout, s), x, (1, lin), 1.0, &mut gw[t..], (s, cout * s));
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0; self.cin * lin];
        for t in 0..s {
            gemm(
                self.cin,
                cout,
                lin,
                &self.weight.data[t..],
                (cout * s, s),
                &dy[t..],
                (lout, s),
                1.0,
                &mut dx,
                (lin, 1),
            );
        }
        Some(dx)
    }
}

fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_mask(grad: &mut [f64], out: &[f64]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-position output groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Logit = 0,
    Amplitude = 1,
    Sigma = 2,
    NuTilde = 3,
    GammaShape = 4,
    GammaRate = 5,
    Sparsity = 6,
}

pub const SCALAR_HEADS: usize = 7;
pub const HEADS: [Head; SCALAR_HEADS] = [
    Head::Logit,
    Head::Amplitude,
    Head::Sigma,
    Head::NuTilde,
    Head::GammaShape,
    Head::GammaRate,
    Head::Sparsity,
];

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub head_kernels: Vec<usize>,
    pub head_channels: usize,
    pub n_ins: usize,
    /// CoordConv channel runs linearly from `coord_start` to `coord_end`.
    pub coord_start: f64,
    pub coord_end: f64,
}

impl UNetConfig {
    /// Seven stride-4/3/2 stages with 80..560 filters of width 5.
    pub fn paper(n_ins: usize) -> Self {
        Self {
            strides: vec![4, 4, 4, 4, 4, 3, 2],
            channels: vec![80, 160, 240, 320, 400, 480, 560],
            kernel: 5,
            head_kernels: vec![3, 1],
            head_channels: 80,
            n_ins,
            coord_start: 0.01,
            coord_end: 0.0,
        }
    }

    /// Residual and magnitude channels plus two complex spectra per
    /// previously extracted tone slot.
    pub fn input_channels(&self) -> usize {
        6 + 4 * self.n_ins.saturating_sub(1)
    }

    pub fn output_channels(&self) -> usize {
        (SCALAR_HEADS + 2) * self.n_ins
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.channels.len() {
            return Err(Error::InvalidConfig(
                "strides and channels must be non-empty and of equal length".into(),
            ));
        }
        if self.strides.contains(&0) || self.channels.contains(&0) || self.kernel == 0 {
            return Err(Error::InvalidConfig("strides, channels and kernel must be positive".into()));
        }
        if self.head_channels == 0 || self.head_kernels.contains(&0) {
            return Err(Error::InvalidConfig("head layers must be non-empty".into()));
        }
        if self.n_ins == 0 {
            return Err(Error::InvalidConfig("at least one instrument required".into()));
        }
        Ok(())
    }

    pub fn check_length(&self, len: usize) -> Result<()> {
        let p = self.stride_product();
        if len == 0 || len % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input length {len} is not divisible by the stride product {p}"
            )));
        }
        Ok(())
    }
}

/// Raw (scaled but unconstrained) network outputs, `[channels][len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub n_ins: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl HeadOutputs {
    pub fn channel(n_ins: usize, head: Head, eta: usize) -> usize {
        let _ = n_ins;
        eta * SCALAR_HEADS + head as usize
    }

    pub fn v_channels(n_ins: usize, eta: usize) -> (usize, usize) {
        let base = SCALAR_HEADS * n_ins + 2 * eta;
        (base, base + 1)
    }

    #[inline]
    pub fn get(&self, head: Head, nu: usize, eta: usize) -> f64 {
        self.data[Self::channel(self.n_ins, head, eta) * self.len + nu]
    }

    /// Artificial spectrum for instrument `eta`.
    pub fn v(&self, eta: usize) -> Vec<Complex64> {
        let (re, im) = Self::v_channels(self.n_ins, eta);
        let re = &self.data[re * self.len..(re + 1) * self.len];
        let im = &self.data[im * self.len..(im + 1) * self.len];
        re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            n_ins: self.n_ins,
            len: self.len,
            data: vec![0.0; self.data.len()],
        }
    }

    #[inline]
    pub fn at_mut(&mut self, head: Head, nu: usize, eta: usize) -> &mut f64 {
        &mut self.data[Self::channel(self.n_ins, head, eta) * self.len + nu]
    }

    pub fn add_v(&mut self, eta: usize, g: &[Complex64]) {
        let (re, im) = Self::v_channels(self.n_ins, eta);
        for (l, z) in g.iter().enumerate() {
            self.data[re * self.len + l] += z.re;
            self.data[im * self.len + l] += z.im;
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    enc: Vec<Conv1d>,
    up: Vec<ConvTranspose1d>,
    dec: Vec<Conv1d>,
    heads: Vec<Conv1d>,
    out: Conv1d,
    /// Trainable per-output-channel affine map applied last.
    pub scale: Tensor,
    pub shift: Tensor,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetCache {
    len: usize,
    /// Encoder activations; `enc[0]` is the input with the coordinate channel.
    enc: Vec<Vec<f64>>,
    up: Vec<Vec<f64>>,
    cat: Vec<Vec<f64>>,
    /// `dec[i]` is the decoder output at resolution `i`.
    dec: Vec<Vec<f64>>,
    heads: Vec<Vec<f64>>,
    linear: Vec<f64>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.strides.len();
        let cin0 = cfg.input_channels() + 1;
        let enc_ch = |i: usize| if i == 0 { cin0 } else { cfg.channels[i - 1] };
        let up_ch = |i: usize| cfg.channels[i.saturating_sub(1)];
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            enc.push(Conv1d::new(enc_ch(i), cfg.channels[i], cfg.kernel, cfg.strides[i], rng));
        }
        let mut up = Vec::with_capacity(depth);
        let mut dec = Vec::with_capacity(depth);
        for i in 0..depth {
            let from = if i + 1 == depth { cfg.channels[depth - 1] } else { up_ch(i + 1) };
            up.push(ConvTranspose1d::new(from, up_ch(i), cfg.strides[i], rng));
            dec.push(Conv1d::new(up_ch(i) + enc_ch(i), up_ch(i), cfg.kernel, 1, rng));
        }
        let mut heads = Vec::new();
        let mut prev = up_ch(0);
        for &k in &cfg.head_kernels {
            heads.push(Conv1d::new(prev, cfg.head_channels, k, 1, rng));
            prev = cfg.head_channels;
        }
        let out = Conv1d::new(prev, cfg.output_channels(), 1, 1, rng);
        let n_out = cfg.output_channels();
        Ok(Self {
            cfg,
            enc,
            up,
            dec,
            heads,
            out,
            scale: Tensor::filled(&[n_out], 1.0),
            shift: Tensor::zeros(&[n_out]),
        })
    }

    fn coord_channel(&self, len: usize) -> impl Iterator<Item = f64> + '_ {
        let (a, b) = (self.cfg.coord_start, self.cfg.coord_end);
        (0..len).map(move |l| {
            if len == 1 {
                a
            } else {
                a + (b - a) * l as f64 / (len - 1) as f64
            }
        })
    }

    /// Forward pass on `[input_channels][len]`.
    pub fn forward(&self, input: &[f64], len: usize) -> Result<(HeadOutputs, UNetCache)> {
        self.cfg.check_length(len)?;
        let cin = self.cfg.input_channels();
        if input.len() != cin * len {
            return Err(Error::ShapeMismatch(format!(
                "network expects {cin} x {len} inputs, got {}",
                input.len()
            )));
        }
        let depth = self.cfg.strides.len();
        let mut lens = vec![len];
        for s in &self.cfg.strides {
            lens.push(lens.last().unwrap() / s);
        }

        let mut x0 = input.to_vec();
        x0.extend(self.coord_channel(len));
        let mut enc = vec![x0];
        for i in 0..depth {
            let mut e = self.enc[i].forward(&enc[i], lens[i])?;
            relu_inplace(&mut e);
            enc.push(e);
        }
        let mut up = vec![Vec::new(); depth];
        let mut cat = vec![Vec::new(); depth];
        let mut dec = vec![Vec::new(); depth];
        for i in (0..depth).rev() {
            let below = if i + 1 == depth { &enc[depth] } else { &dec[i + 1] };
            let mut u = self.up[i].forward(below, lens[i + 1])?;
            relu_inplace(&mut u);
            let mut c = u.clone();
            c.extend_from_slice(&enc[i]);
            let mut d = self.dec[i].forward(&c, lens[i])?;
            relu_inplace(&mut d);
            up[i] = u;
            cat[i] = c;
            dec[i] = d;
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for (k, conv) in self.heads.iter().enumerate() {
            let src = if k == 0 { &dec[0] } else { &heads[k - 1] };
            let mut h = conv.forward(src, len)?;
            relu_inplace(&mut h);
            heads.push(h);
        }
        let linear = self.out.forward(heads.last().unwrap_or(&dec[0]), len)?;
        let mut data = linear.clone();
        for (c, row) in data.chunks_mut(len).enumerate() {
            let (s, t) = (self.scale.data[c], self.shift.data[c]);
            row.iter_mut().for_each(|v| *v = s * *v + t);
        }
        Ok((
            HeadOutputs {
                n_ins: self.cfg.n_ins,
                len,
                data,
            },
            UNetCache {
                len,
                enc,
                up,
                cat,
                dec,
                heads,
                linear,
            },
        ))
    }

    /// Backward pass for upstream gradients on the raw outputs. Returns the
    /// gradient with respect to the input channels when `need_input_grad`.
    pub fn backward(&mut self, cache: &UNetCache, d_out: &HeadOutputs, need_input_grad: bool) -> Option<Vec<f64>> {
        let len = cache.len;
        let depth = self.cfg.strides.len();
        let mut lens = vec![len];
        for s in &self.cfg.strides {
            lens.push(lens.last().unwrap() / s);
        }

        let mut d_lin = d_out.data.clone();
        {
            let gs = self.scale.grad_mut();
            for (c, (row, lin)) in d_lin.chunks(len).zip(cache.linear.chunks(len)).enumerate() {
                gs[c] += row.iter().zip(lin).map(|(g, x)| g * x).sum::<f64>();
            }
        }
        {
            let gt = self.shift.grad_mut();
            for (c, row) in d_lin.chunks(len).enumerate() {
                gt[c] += row.iter().sum::<f64>();
            }
        }
        for (c, row) in d_lin.chunks_mut(len).enumerate() {
            let s = self.scale.data[c];
            row.iter_mut().for_each(|g| *g *= s);
        }

        let head_in = cache.heads.last().unwrap_or(&cache.dec[0]);
        let mut g = self.out.backward(head_in, len, &d_lin, true).unwrap();
        for k in (0..self.heads.len()).rev() {
            relu_mask(&mut g, &cache.heads[k]);
            let src = if k == 0 { &cache.dec[0] } else { &cache.heads[k - 1] };
            g = self.heads[k].backward(src, len, &g, true).unwrap();
        }

        let mut d_enc: Vec<Vec<f64>> = cache.enc.iter().map(|e| vec![0.0; e.len()]).collect();
        for i in 0..depth {
            relu_mask(&mut g, &cache.dec[i]);
            let d_cat = self.dec[i].backward(&cache.cat[i], lens[i], &g, true).unwrap();
            let n_up = cache.up[i].len();
            let (d_up, d_skip) = d_cat.split_at(n_up);
            d_enc[i].iter_mut().zip(d_skip).for_each(|(a, b)| *a += b);
            let mut d_up = d_up.to_vec();
            relu_mask(&mut d_up, &cache.up[i]);
            let below = if i + 1 == depth { &cache.enc[depth] } else { &cache.dec[i + 1] };
            g = self.up[i].backward(below, lens[i + 1], &d_up, true).unwrap();
        }
        d_enc[depth].iter_mut().zip(&g).for_each(|(a, b)| *a += b);

        for i in (0..depth).rev() {
            let mut gi = std::mem::take(&mut d_enc[i + 1]);
            relu_mask(&mut gi, &cache.enc[i + 1]);
            let need = i > 0 || need_input_grad;
            if let Some(dx) = self.enc[i].backward(&cache.enc[i], lens[i], &gi, need) {
                d_enc[i].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
        }
        if need_input_grad {
            let mut dx = std::mem::take(&mut d_enc[0]);
            dx.truncate(self.cfg.input_channels() * len);
            Some(dx)
        } else {
            None
        }
    }

    /// All parameter tensors in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((format!("enc.{i}.weight"), &c.weight));
            out.push((format!("enc.{i}.bias"), &c.bias));
        }
        for (i, c) in self.up.iter().enumerate() {
            out.push((format!("up.{i}.weight"), &c.weight));
            out.push((format!("up.{i}.bias"), &c.bias));
        }
        for (i, c) in self.dec.iter().enumerate() {
            out.push((format!("dec.{i}.weight"), &c.weight));
            out.push((format!("dec.{i}.bias"), &c.bias));
        }
        for (i, c) in self.heads.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &c.weight));
            out.push((format!("head.{i}.bias"), &c.bias));
        }
        out.push(("out.weight".into(), &self.out.weight));
        out.push(("out.bias".into(), &self.out.bias));
        out.push(("out.scale".into(), &self.scale));
        out.push(("out.shift".into(), &self.shift));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in self.enc.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.up.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.dec.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in self.heads.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.out.weight);
        out.push(&mut self.out.bias);
        out.push(&mut self.scale);
        out.push(&mut self.shift);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.named_params().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Concatenated gradients (zeros for tensors that never received one).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| match &t.grad {
                Some(g) => g.clone(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Maps raw head values to constrained tone parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadMapping {
    /// Peak width produced by a raw value of 0, Hz.
    pub sigma_ref: f64,
    /// Lower clip for the peak width, Hz.
    pub sigma_min: f64,
    /// Bound of the continuous frequency offset, bins.
    pub nu_tilde_max: f64,
    /// Raw gamma parameters are clamped to this magnitude before `exp`.
    pub log_gamma_clamp: f64,
    /// Added to the raw gamma rate, so a raw value of 0 gives inharmonicity
    /// with mean `exp(-log_rate_offset)` rather than 1.
    pub log_rate_offset: f64,
}

impl HeadMapping {
    pub fn for_window(sigma_hz: f64) -> Self {
        Self {
            sigma_ref: sigma_hz,
            sigma_min: 0.25 * sigma_hz,
            nu_tilde_max: 5.0,
            log_gamma_clamp: 30.0,
            log_rate_offset: 0.0,
        }
    }
}

/// Constrained parameters read at one `(nu, eta)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappedHeads {
    pub a: f64,
    pub sigma: f64,
    pub nu_tilde: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub p_present: f64,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HeadMapping {
    pub fn amplitude(&self, raw: f64) -> f64 {
        raw.abs()
    }

    pub fn d_amplitude(&self, raw: f64) -> f64 {
        if raw > 0.0 {
            1.0
        } else if raw < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    /// `max(sigma_ref * softplus(raw) / ln 2, sigma_min)`.
    pub fn sigma(&self, raw: f64) -> f64 {
        (self.sigma_ref * softplus(raw) / std::f64::consts::LN_2).max(self.sigma_min)
    }

    pub fn d_sigma(&self, raw: f64) -> f64 {
        let s = self.sigma_ref * softplus(raw) / std::f64::consts::LN_2;
        if s <= self.sigma_min {
            0.0
        } else {
            self.sigma_ref * sigmoid(raw) / std::f64::consts::LN_2
        }
    }

    pub fn nu_tilde(&self, raw: f64) -> f64 {
        self.nu_tilde_max * raw.tanh()
    }

    pub fn d_nu_tilde(&self, raw: f64) -> f64 {
        let t = raw.tanh();
        self.nu_tilde_max * (1.0 - t * t)
    }

    pub fn gamma_param(&self, raw: f64) -> f64 {
        raw.clamp(-self.log_gamma_clamp, self.log_gamma_clamp).exp()
    }

    pub fn d_gamma_param(&self, raw: f64) -> f64 {
        if raw.abs() > self.log_gamma_clamp {
            0.0
        } else {
            raw.exp()
        }
    }

    pub fn gamma_rate(&self, raw: f64) -> f64 {
        self.gamma_param(raw + self.log_rate_offset)
    }

    pub fn d_gamma_rate(&self, raw: f64) -> f64 {
        self.d_gamma_param(raw + self.log_rate_offset)
    }

    pub fn map(&self, out: &HeadOutputs, nu: usize, eta: usize) -> MappedHeads {
        MappedHeads {
            a: self.amplitude(out.get(Head::Amplitude, nu, eta)),
            sigma: self.sigma(out.get(Head::Sigma, nu, eta)),
            nu_tilde: self.nu_tilde(out.get(Head::NuTilde, nu, eta)),
            gamma_shape: self.gamma_param(out.get(Head::GammaShape, nu, eta)),
            gamma_rate: self.gamma_rate(out.get(Head::GammaRate, nu, eta)),
            p_present: sigmoid(out.get(Head::Sparsity, nu, eta)),
        }
    }
}

/// Which `(nu, eta)` cells may be drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalMask {
    pub nu_min: usize,
    /// Inclusive.
    pub nu_max: usize,
    pub assigned: Vec<bool>,
}

impl CategoricalMask {
    pub fn allows(&self, nu: usize, eta: usize) -> bool {
        nu >= self.nu_min && nu <= self.nu_max && !self.assigned[eta]
    }
}

/// Log-softmax of the logit head over the unmasked cells, flat index
/// `nu * n_ins + eta`; masked cells get `-inf`.
pub fn masked_log_softmax(out: &HeadOutputs, mask: &CategoricalMask, temperature: f64) -> Vec<f64> {
    let n_ins = out.n_ins;
    let mut lp = vec![f64::NEG_INFINITY; out.len * n_ins];
    let mut max = f64::NEG_INFINITY;
    for nu in 0..out.len {
        for eta in 0..n_ins {
            if mask.allows(nu, eta) {
                let v = temperature * out.get(Head::Logit, nu, eta);
                lp[nu * n_ins + eta] = v;
                max = max.max(v);
            }
        }
    }
    if max == f64::NEG_INFINITY {
        return lp;
    }
    let sum: f64 = lp.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    lp.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v -= lse);
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut conv = Conv1d::new(1, 1, 1, 1, &mut rng());
        conv.weight.data[0] = 1.0;
        let x = vec![0.5, -1.0, 2.0, 3.5];
        assert_eq!(conv.forward(&x, 4).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_output_and_input_gradient() {
        let mut conv = Conv1d::new(2, 3, 5, 2, &mut rng());
        conv.weight.data.iter_mut().for_each(|w| *w = 0.0);
        let x = rand_vec(&mut rng(), 16);
        let y = conv.forward(&x, 8).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let dx = conv.backward(&x, 8, &vec![1.0; y.len()], true).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let conv = Conv1d::new(2, 3, 5, 2, &mut rng());
        assert!(matches!(conv.forward(&[0.0; 5], 8), Err(Error::ShapeMismatch(_))));
    }

    fn check_layer_grads(
        forward: &dyn Fn(&[f64], &[f64]) -> Vec<f64>,
        backward: &dyn Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
        x: Vec<f64>,
        w: Vec<f64>,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let y = forward(&x, &w);
        let dy = rand_vec(&mut r, y.len());
        let loss = |x: &[f64], w: &[f64]| -> f64 { forward(x, w).iter().zip(&dy).map(|(a, b)| a * b).sum() };
        let (dx, dw) = backward(&x, &w, &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "dx[{i}] {} vs {fd}", dx[i]);
        }
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "dw[{i}] {} vs {fd}", dw[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (cin, cout, k, s, lin) in [(3, 4, 5, 2, 12), (2, 3, 3, 1, 7), (4, 2, 1, 1, 5), (2, 2, 5, 4, 16)] {
            let proto = Conv1d::new(cin, cout, k, s, &mut rng());
            let mut r = ChaCha8Rng::seed_from_u64(8);
            let x = rand_vec(&mut r, cin * lin);
            let w = proto.weight.data.clone();
            let fwd = |x: &[f64], w: &[f64]| {
                let mut c = proto.clone();
                c.weight.data = w.to_vec();
                c.bias.data = vec![0.3; cout];
                c.forward(x, lin).unwrap()
            };
            let bwd = |x: &[f64], w: &[f64], dy: &[f64]| {
                let mut c = proto.clone();
                c.weight.data = w.to_vec();
                let dx = c.backward(x, lin, dy, true).unwrap();
                (dx, c.weight.grad.clone().unwrap())
            };
            check_layer_grads(&fwd, &bwd, x, w);
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        for (cin, cout, s, lin) in [(3, 2, 4, 3), (2, 5, 2, 4), (1, 1, 3, 2)] {
            let proto = ConvTranspose1d::new(cin, cout, s, &mut rng());
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let x = rand_vec(&mut r, cin * lin);
            let w = proto.weight.data.clone();
            let fwd = |x: &[f64], w: &[f64]| {
                let mut c = proto.clone();
                c.weight.data = w.to_vec();
                c.forward(x, lin).unwrap()
            };
            let bwd = |x: &[f64], w: &[f64], dy: &[f64]| {
                let mut c = proto.clone();
                c.weight.data = w.to_vec();
                let dx = c.backward(x, lin, dy, true).unwrap();
                (dx, c.weight.grad.clone().unwrap())
            };
            check_layer_grads(&fwd, &bwd, x, w);
        }
    }

    fn small_config(n_ins: usize) -> UNetConfig {
        UNetConfig {
            strides: vec![4, 2, 2],
            channels: vec![4, 6, 8],
            kernel: 5,
            head_kernels: vec![3, 1],
            head_channels: 5,
            n_ins,
            coord_start: 0.01,
            coord_end: 0.0,
        }
    }

    #[test]
    fn paper_stride_product_collapses_6144_to_one() {
        let cfg = UNetConfig::paper(2);
        assert_eq!(cfg.stride_product(), 6144);
        assert_eq!(6144 / cfg.stride_product(), 1);
        cfg.check_length(6144).unwrap();
        assert!(cfg.check_length(6000).is_err());
        assert_eq!(cfg.input_channels(), 10);
    }

    #[test]
    fn unet_rejects_bad_length() {
        let net = UNet::new(small_config(2), &mut rng()).unwrap();
        let cin = net.cfg.input_channels();
        assert!(net.forward(&vec![0.0; cin * 30], 30).is_err());
    }

    #[test]
    fn unet_output_is_finite_and_deterministic() {
        let net = UNet::new(small_config(2), &mut rng()).unwrap();
        let cin = net.cfg.input_channels();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..cin * 64).map(|_| 1e-6 * r.random_range(-1.0..1.0)).collect();
            let (out, _) = net.forward(&x, 64).unwrap();
            assert!(out.data.iter().all(|v| v.is_finite()));
            let (again, _) = net.forward(&x, 64).unwrap();
            assert_eq!(out, again);
        }
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let mut net = UNet::new(small_config(2), &mut rng()).unwrap();
        // non-trivial scaling so those gradients are exercised too
        let mut r = ChaCha8Rng::seed_from_u64(77);
        net.scale.data.iter_mut().for_each(|s| *s = r.random_range(0.5..1.5));
        net.shift.data.iter_mut().for_each(|s| *s = r.random_range(-0.1..0.1));
        let cin = net.cfg.input_channels();
        let len = 32;
        let x = rand_vec(&mut r, cin * len);
        let (out, cache) = net.forward(&x, len).unwrap();
        let dy = HeadOutputs {
            data: rand_vec(&mut r, out.data.len()),
            ..out.clone()
        };
        let loss = |net: &UNet, x: &[f64]| -> f64 {
            let (o, _) = net.forward(x, len).unwrap();
            o.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let dx = net.backward(&cache, &dy, true).unwrap();
        let grads = net.flat_grads();
        let params = net.flat_params();
        let h = 1e-6;
        for _ in 0..50 {
            let i = r.random_range(0..params.len());
            let mut p = params.clone();
            p[i] += h;
            net.set_flat_params(&p).unwrap();
            let up = loss(&net, &x);
            p[i] -= 2.0 * h;
            net.set_flat_params(&p).unwrap();
            let down = loss(&net, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grads[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "param {i}: {} vs {fd}", grads[i]);
        }
        net.set_flat_params(&params).unwrap();
        for _ in 0..20 {
            let i = r.random_range(0..x.len());
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "input {i}: {} vs {fd}", dx[i]);
        }
    }

    #[test]
    fn head_mapping_identities() {
        let m = HeadMapping::for_window(7.46);
        assert_eq!(m.nu_tilde(0.0), 0.0);
        assert_eq!(m.gamma_param(0.0), 1.0);
        assert!((m.sigma(0.0) - 7.46).abs() < 1e-12);
        assert_eq!(m.sigma(-50.0), m.sigma_min);
        assert_eq!(m.amplitude(-0.3), 0.3);
        assert!(m.nu_tilde(100.0) <= 5.0 && m.nu_tilde(-100.0) >= -5.0);
        assert!(m.nu_tilde(2.0) < 5.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_over_two_free_cells_is_uniform() {
        let out = HeadOutputs {
            n_ins: 2,
            len: 1,
            data: vec![0.0; 18],
        };
        let mask = CategoricalMask {
            nu_min: 0,
            nu_max: 0,
            assigned: vec![false, false],
        };
        let lp = masked_log_softmax(&out, &mask, 1.0);
        assert!((lp[0].exp() - 0.5).abs() < 1e-15);
        assert!((lp[1].exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn masked_instrument_has_zero_probability_and_no_influence() {
        let mut r = rng();
        let mut out = HeadOutputs {
            n_ins: 2,
            len: 8,
            data: rand_vec(&mut r, 18 * 8),
        };
        let mask = CategoricalMask {
            nu_min: 1,
            nu_max: 6,
            assigned: vec![true, false],
        };
        let before = masked_log_softmax(&out, &mask, 1.0);
        for nu in 0..8 {
            assert_eq!(before[nu * 2], f64::NEG_INFINITY);
            *out.at_mut(Head::Logit, nu, 0) = 100.0 * r.random_range(-1.0..1.0);
        }
        assert_eq!(before[0 * 2 + 1], f64::NEG_INFINITY);
        assert_eq!(before[7 * 2 + 1], f64::NEG_INFINITY);
        assert_eq!(before, masked_log_softmax(&out, &mask, 1.0));
        let total: f64 = before.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
