use super::gemm::sgemm;
use super::params::ParamRange;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn conv_out(&self, n: usize) -> Option<usize> {
        let span = n + 2 * self.pad;
        (span >= self.k).then(|| (span - self.k) / self.stride + 1)
    }
}

/// Unfold `x` (`[C][B][H][W]`) into a `(C*k*k) x (B*oh*ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, b: usize, h: usize, w: usize, g: Geometry, oh: usize, ow: usize) -> Vec<f32> {
    let n = b * oh * ow;
    let mut col = vec![0.0f32; c * g.k * g.k * n];
    for ci in 0..c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                for bi in 0..b {
                    let src = (ci * b + bi) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = src + iy as usize * w;
                        let dst = row + (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                col[dst + ox] = x[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dst`.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f32], c: usize, b: usize, h: usize, w: usize, g: Geometry, oh: usize, ow: usize, dst: &mut [f32]) {
    let n = b * oh * ow;
    for ci in 0..c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                for bi in 0..b {
                    let base = (ci * b + bi) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = base + iy as usize * w;
                        let src = row + (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[dst_row + ix as usize] += col[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut [f32], bias: &[f32], per_channel: usize) {
    for (c, chunk) in y.chunks_mut(per_channel).enumerate() {
        let bv = bias[c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn bias_grad(dy: &[f32], per_channel: usize, gb: &mut [f32]) {
    for (c, chunk) in dy.chunks(per_channel).enumerate() {
        gb[c] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
}

/// 2-D convolution, weight shape `(out, in*k*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Conv2d {
    fn geo(&self) -> Geometry {
        Geometry {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geo().conv_out(h)?, self.geo().conv_out(w)?))
    }

    fn forward(&self, p: &[f32], x: &Tensor) -> (Tensor, Vec<f32>) {
        let (oh, ow) = self.out_hw(x.h, x.w).expect("validated shape");
        let col = im2col(&x.data, x.c, x.b, x.h, x.w, self.geo(), oh, ow);
        let n = x.b * oh * ow;
        let kk = self.in_c * self.k * self.k;
        let mut y = Tensor::zeros(self.out_c, x.b, oh, ow);
        sgemm(self.out_c, kk, n, self.weight.of(p), false, &col, false, &mut y.data, 0.0);
        add_bias(&mut y.data, self.bias.of(p), n);
        (y, col)
    }

    fn backward(&self, p: &[f32], x: &Tensor, col: &[f32], dy: &Tensor, g: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let n = dy.b * dy.h * dy.w;
        let kk = self.in_c * self.k * self.k;
        sgemm(self.out_c, n, kk, &dy.data, false, col, true, self.weight.of_mut(g), 1.0);
        bias_grad(&dy.data, n, self.bias.of_mut(g));
        if !need_dx {
            return None;
        }
        let mut dcol = vec![0.0f32; kk * n];
        sgemm(kk, self.out_c, n, self.weight.of(p), true, &dy.data, false, &mut dcol, 0.0);
        let mut dx = Tensor::zeros(x.c, x.b, x.h, x.w);
        col2im(&dcol, x.c, x.b, x.h, x.w, self.geo(), dy.h, dy.w, &mut dx.data);
        Some(dx)
    }
}

/// Transposed convolution (fractionally strided), weight shape
/// `(in, out*k*k)`; output size `(n-1)*stride - 2*pad + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl ConvTranspose2d {
    fn geo(&self) -> Geometry {
        Geometry {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n: usize| ((n - 1) * self.stride + self.k).checked_sub(2 * self.pad).filter(|&v| v > 0);
        if h == 0 || w == 0 {
            return None;
        }
        Some((f(h)?, f(w)?))
    }

    fn forward(&self, p: &[f32], x: &Tensor) -> Tensor {
        let (oh, ow) = self.out_hw(x.h, x.w).expect("validated shape");
        let n = x.b * x.h * x.w;
        let kk = self.out_c * self.k * self.k;
        let mut col = vec![0.0f32; kk * n];
        sgemm(kk, self.in_c, n, self.weight.of(p), true, &x.data, false, &mut col, 0.0);
        let mut y = Tensor::zeros(self.out_c, x.b, oh, ow);
        col2im(&col, self.out_c, x.b, oh, ow, self.geo(), x.h, x.w, &mut y.data);
        add_bias(&mut y.data, self.bias.of(p), x.b * oh * ow);
        y
    }

    fn backward(&self, p: &[f32], x: &Tensor, dy: &Tensor, g: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let n = x.b * x.h * x.w;
        let kk = self.out_c * self.k * self.k;
        let col = im2col(&dy.data, dy.c, dy.b, dy.h, dy.w, self.geo(), x.h, x.w);
        sgemm(self.in_c, n, kk, &x.data, false, &col, true, self.weight.of_mut(g), 1.0);
        bias_grad(&dy.data, dy.b * dy.h * dy.w, self.bias.of_mut(g));
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.c, x.b, x.h, x.w);
        sgemm(self.in_c, kk, n, self.weight.of(p), false, &col, false, &mut dx.data, 0.0);
        Some(dx)
    }
}

/// Fully connected layer over `C x B` feature matrices, weight `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Linear {
    fn forward(&self, p: &[f32], x: &Tensor) -> Tensor {
        let mut y = Tensor::zeros(self.out_f, x.b, 1, 1);
        sgemm(self.out_f, self.in_f, x.b, self.weight.of(p), false, &x.data, false, &mut y.data, 0.0);
        add_bias(&mut y.data, self.bias.of(p), x.b);
        y
    }

    fn backward(&self, p: &[f32], x: &Tensor, dy: &Tensor, g: &mut [f32], need_dx: bool) -> Option<Tensor> {
        sgemm(self.out_f, x.b, self.in_f, &dy.data, false, &x.data, true, self.weight.of_mut(g), 1.0);
        bias_grad(&dy.data, x.b, self.bias.of_mut(g));
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(self.in_f, x.b, 1, 1);
        sgemm(self.in_f, self.out_f, x.b, self.weight.of(p), true, &dy.data, false, &mut dx.data, 0.0);
        Some(dx)
    }
}

/// Fixed bilinear upsampling by an integer factor (pixel-centre
/// alignment, edge replication).
#[derive(Debug, Clone, PartialEq)]
pub struct Upsample {
    pub factor: usize,
}

fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64).min(1.0) as f32)
        })
        .collect()
}

impl Upsample {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = (x.h * self.factor, x.w * self.factor);
        let tx = bilinear_taps(x.w, self.factor);
        let ty = bilinear_taps(x.h, self.factor);
        let mut y = Tensor::zeros(x.c, x.b, oh, ow);
        let mut tmp = vec![0.0f32; x.h * ow];
        for (src, dst) in x.data.chunks(x.h * x.w).zip(y.data.chunks_mut(oh * ow)) {
            for r in 0..x.h {
                for (o, &(i0, i1, t)) in tx.iter().enumerate() {
                    tmp[r * ow + o] = src[r * x.w + i0] * (1.0 - t) + src[r * x.w + i1] * t;
                }
            }
            for (o, &(i0, i1, t)) in ty.iter().enumerate() {
                for col in 0..ow {
                    dst[o * ow + col] = tmp[i0 * ow + col] * (1.0 - t) + tmp[i1 * ow + col] * t;
                }
            }
        }
        y
    }

    fn backward(&self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (oh, ow) = (dy.h, dy.w);
        let tx = bilinear_taps(x.w, self.factor);
        let ty = bilinear_taps(x.h, self.factor);
        let mut dx = Tensor::zeros(x.c, x.b, x.h, x.w);
        let mut tmp = vec![0.0f32; x.h * ow];
        for (g, dst) in dy.data.chunks(oh * ow).zip(dx.data.chunks_mut(x.h * x.w)) {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (o, &(i0, i1, t)) in ty.iter().enumerate() {
                for col in 0..ow {
                    let v = g[o * ow + col];
                    tmp[i0 * ow + col] += v * (1.0 - t);
                    tmp[i1 * ow + col] += v * t;
                }
            }
            for r in 0..x.h {
                for (o, &(i0, i1, t)) in tx.iter().enumerate() {
                    let v = tmp[r * ow + o];
                    dst[r * x.w + i0] += v * (1.0 - t);
                    dst[r * x.w + i1] += v * t;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Linear(Linear),
    LeakyRelu(f32),
    Sigmoid,
    GlobalAvgPool,
    Upsample(Upsample),
}

impl Layer {
    /// Output `(c, h, w)` for input `(c, h, w)`, or `None` if the input
    /// does not fit this layer.
    pub fn out_shape(&self, (c, h, w): (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(l) => (c == l.in_c).then(|| l.out_hw(h, w)).flatten().map(|(oh, ow)| (l.out_c, oh, ow)),
            Layer::Deconv(l) => (c == l.in_c).then(|| l.out_hw(h, w)).flatten().map(|(oh, ow)| (l.out_c, oh, ow)),
            Layer::Linear(l) => (c == l.in_f && h == 1 && w == 1).then_some((l.out_f, 1, 1)),
            Layer::LeakyRelu(_) | Layer::Sigmoid => Some((c, h, w)),
            Layer::GlobalAvgPool => Some((c, 1, 1)),
            Layer::Upsample(u) => Some((c, h * u.factor, w * u.factor)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Layer::Conv(l) => format!("conv{}s{}p{}:{}>{}", l.k, l.stride, l.pad, l.in_c, l.out_c),
            Layer::Deconv(l) => format!("deconv{}s{}p{}:{}>{}", l.k, l.stride, l.pad, l.in_c, l.out_c),
            Layer::Linear(l) => format!("linear:{}>{}", l.in_f, l.out_f),
            Layer::LeakyRelu(a) => format!("lrelu{a}"),
            Layer::Sigmoid => "sigmoid".into(),
            Layer::GlobalAvgPool => "gap".into(),
            Layer::Upsample(u) => format!("up{}", u.factor),
        }
    }

    pub(crate) fn forward(&self, p: &[f32], x: &Tensor) -> (Tensor, Option<Vec<f32>>) {
        match self {
            Layer::Conv(l) => {
                let (y, col) = l.forward(p, x);
                (y, Some(col))
            }
            Layer::Deconv(l) => (l.forward(p, x), None),
            Layer::Linear(l) => (l.forward(p, x), None),
            Layer::LeakyRelu(a) => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= a
                    }
                });
                (y, None)
            }
            Layer::Sigmoid => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                (y, None)
            }
            Layer::GlobalAvgPool => {
                let plane = x.plane();
                let data = x
                    .data
                    .chunks(plane)
                    .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
                    .collect();
                (Tensor::from_data(x.c, x.b, 1, 1, data), None)
            }
            Layer::Upsample(u) => (u.forward(x), None),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        p: &[f32],
        x: &Tensor,
        y: &Tensor,
        cache: Option<&[f32]>,
        dy: &Tensor,
        g: &mut [f32],
        need_dx: bool,
    ) -> Option<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(p, x, cache.expect("conv cache"), dy, g, need_dx),
            Layer::Deconv(l) => l.backward(p, x, dy, g, need_dx),
            Layer::Linear(l) => l.backward(p, x, dy, g, need_dx),
            _ if !need_dx => None,
            Layer::LeakyRelu(a) => {
                let mut dx = dy.clone();
                for (d, &xv) in dx.data.iter_mut().zip(&x.data) {
                    if xv <= 0.0 {
                        *d *= a;
                    }
                }
                Some(dx)
            }
            Layer::Sigmoid => {
                let mut dx = dy.clone();
                for (d, &s) in dx.data.iter_mut().zip(&y.data) {
                    *d *= s * (1.0 - s);
                }
                Some(dx)
            }
            Layer::GlobalAvgPool => {
                let plane = x.plane();
                let mut dx = Tensor::zeros(x.c, x.b, x.h, x.w);
                for (chunk, &gv) in dx.data.chunks_mut(plane).zip(&dy.data) {
                    let v = gv / plane as f32;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                Some(dx)
            }
            Layer::Upsample(u) => Some(u.backward(x, dy)),
        }
    }
}
