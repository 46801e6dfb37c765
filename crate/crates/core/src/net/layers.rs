//! Convolution stacks with hand-written backward passes.
//!
//! Every layer's `forward` returns its output together with whatever the
//! matching `backward` needs, so one layer can be applied to several inputs
//! (both frames of a pair) before any gradient flows back. Gradients
//! accumulate into [`Param::grad`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{gemm_t, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A named learnable array and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::ZERO; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::ZERO);
    }
}

/// Parameter traversal in a fixed order.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}

/// How a convolution's weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in normal with the given gain.
    Kaiming {
        gain: f64,
    },
    Zero,
}

impl Init {
    /// Gain for a layer followed by a leaky rectifier of slope `slope`.
    pub fn leaky(slope: f64) -> Self {
        Init::Kaiming {
            gain: (2.0 / (1.0 + slope * slope)).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

pub struct ConvCache<T> {
    col: Vec<T>,
    in_h: usize,
    in_w: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = match init {
            Init::Kaiming { gain } => {
                let std = gain / (fan_in as f64).sqrt();
                (0..cout * fan_in)
                    .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            }
            Init::Zero => vec![T::ZERO; cout * fan_in],
        };
        Self {
            weight: Param::new(format!("{name}.weight"), vec![cout, cin, k, k], weight),
            bias: Param::new(format!("{name}.bias"), vec![cout], vec![T::ZERO; cout]),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid_range(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let mut lo = 0isize;
        while lo < out as isize && lo * s + kk as isize - p < 0 {
            lo += 1;
        }
        let mut hi = out as isize;
        while hi > lo && (hi - 1) * s + kk as isize - p >= extent as isize {
            hi -= 1;
        }
        (lo as usize, hi as usize)
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let (h, w) = (x.height(), x.width());
        let n = oh * ow;
        let k = self.k;
        let mut col = vec![T::ZERO; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                let (ylo, yhi) = self.valid_range(ky, h, oh);
                for kx in 0..k {
                    let (xlo, xhi) = self.valid_range(kx, w, ow);
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if self.stride == 1 {
                            let ix0 = xlo + kx - self.pad;
                            out[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                out[ox] = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Tensor<T> {
        let n = oh * ow;
        let k = self.k;
        let mut dx = Tensor::zeros(self.cin, h, w);
        let data = dx.data_mut();
        for ci in 0..self.cin {
            let plane = &mut data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (ylo, yhi) = self.valid_range(ky, h, oh);
                for kx in 0..k {
                    let (xlo, xhi) = self.valid_range(kx, w, ow);
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for ox in xlo..xhi {
                            dst[ox * self.stride + kx - self.pad] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(
            x.channels(),
            self.cin,
            "{}: input channels",
            self.weight.name
        );
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.out_dims(h, w);
        let n = oh * ow;
        let col = self.im2col(x, oh, ow);
        let mut out = Tensor::zeros(self.cout, oh, ow);
        let kk = self.cin * self.k * self.k;
        gemm_t(
            false,
            false,
            self.cout,
            kk,
            n,
            T::ONE,
            &self.weight.value,
            &col,
            T::ZERO,
            out.data_mut(),
        );
        for (o, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let b = self.bias.value[o];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        (
            out,
            ConvCache {
                col,
                in_h: h,
                in_w: w,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = (dy.height(), dy.width());
        let n = oh * ow;
        let kk = self.cin * self.k * self.k;
        gemm_t(
            false,
            true,
            self.cout,
            n,
            kk,
            T::ONE,
            dy.data(),
            &cache.col,
            T::ONE,
            &mut self.weight.grad,
        );
        for (o, chunk) in dy.data().chunks(n).enumerate() {
            self.bias.grad[o] += chunk.iter().copied().sum::<T>();
        }
        let mut dcol = vec![T::ZERO; kk * n];
        gemm_t(
            true,
            false,
            kk,
            self.cout,
            n,
            T::ONE,
            &self.weight.value,
            dy.data(),
            T::ZERO,
            &mut dcol,
        );
        self.col2im(&dcol, cache.in_h, cache.in_w, oh, ow)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Pointwise activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Leaky(f64),
    Relu,
}

impl Act {
    fn slope<T: Real>(self) -> T {
        match self {
            Act::Leaky(s) => T::from_f64(s),
            Act::Relu => T::ZERO,
        }
    }

    pub fn forward<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.slope::<T>();
        x.map(|v| if v > T::ZERO { v } else { s * v })
    }

    /// Uses the output sign, which equals the input sign for slopes ≥ 0.
    pub fn backward<T: Real>(self, y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let s = self.slope::<T>();
        y.zip_map(dy, |y, g| if y > T::ZERO { g } else { s * g })
    }
}

/// Depth-to-space by 2: channel `4c + 2i + j` lands at offset `(i, j)` of
/// output channel `c`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    assert_eq!(c % 4, 0, "pixel shuffle needs a multiple of 4 channels");
    let mut out = Tensor::zeros(c / 4, 2 * h, 2 * w);
    for oc in 0..c / 4 {
        for i in 0..2 {
            for j in 0..2 {
                let src = x.plane(4 * oc + 2 * i + j);
                for y in 0..h {
                    for xx in 0..w {
                        *out.at_mut(oc, 2 * y + i, 2 * xx + j) = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`] (also its adjoint).
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = x.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(4 * c, h, w);
    for oc in 0..c {
        for i in 0..2 {
            for j in 0..2 {
                for y in 0..h {
                    for xx in 0..w {
                        *out.at_mut(4 * oc + 2 * i + j, y, xx) = x.at(oc, 2 * y + i, 2 * xx + j);
                    }
                }
            }
        }
    }
    out
}

/// `x + conv2(relu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

pub struct ResCache<T> {
    c1: ConvCache<T>,
    mid: Tensor<T>,
    c2: ConvCache<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                1,
                Init::leaky(0.0),
                rng,
            ),
            conv2: Conv2d::new(
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                1,
                Init::Kaiming { gain: 1.0 },
                rng,
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ResCache<T>) {
        let (a, c1) = self.conv1.forward(x);
        let mid = Act::Relu.forward(&a);
        let (mut y, c2) = self.conv2.forward(&mid);
        y.add_assign(x);
        (y, ResCache { c1, mid, c2 })
    }

    pub fn backward(&mut self, cache: &ResCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dmid = self.conv2.backward(&cache.c2, dy);
        let da = Act::Relu.backward(&cache.mid, &dmid);
        let mut dx = self.conv1.backward(&cache.c1, &da);
        dx.add_assign(dy);
        dx
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// One stage of a feed-forward [`Stack`].
#[derive(Clone, Debug)]
pub enum Op<T> {
    Conv(Conv2d<T>),
    Act(Act),
    Shuffle,
    Res(ResBlock<T>),
}

enum OpCache<T> {
    Conv(ConvCache<T>),
    Act(Tensor<T>),
    Shuffle,
    Res(ResCache<T>),
}

pub struct StackCache<T>(Vec<OpCache<T>>);

/// Sequential composition of [`Op`]s.
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub ops: Vec<Op<T>>,
}

impl<T: Real> Stack<T> {
    pub fn new(ops: Vec<Op<T>>) -> Self {
        Self { ops }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, StackCache<T>) {
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            let (next, cache) = match op {
                Op::Conv(c) => {
                    let (y, cc) = c.forward(&cur);
                    (y, OpCache::Conv(cc))
                }
                Op::Act(a) => {
                    let y = a.forward(&cur);
                    (y.clone(), OpCache::Act(y))
                }
                Op::Shuffle => (pixel_shuffle(&cur), OpCache::Shuffle),
                Op::Res(r) => {
                    let (y, rc) = r.forward(&cur);
                    (y, OpCache::Res(rc))
                }
            };
            caches.push(cache);
            cur = next;
        }
        (cur, StackCache(caches))
    }

    /// Forward pass that keeps no intermediate state.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for op in &self.ops {
            cur = match op {
                Op::Conv(c) => c.forward(&cur).0,
                Op::Act(a) => a.forward(&cur),
                Op::Shuffle => pixel_shuffle(&cur),
                Op::Res(r) => r.forward(&cur).0,
            };
        }
        cur
    }

    pub fn backward(&mut self, cache: &StackCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut grad = dy.clone();
        for (op, c) in self.ops.iter_mut().zip(&cache.0).rev() {
            grad = match (op, c) {
                (Op::Conv(conv), OpCache::Conv(cc)) => conv.backward(cc, &grad),
                (Op::Act(a), OpCache::Act(y)) => a.backward(y, &grad),
                (Op::Shuffle, OpCache::Shuffle) => pixel_unshuffle(&grad),
                (Op::Res(r), OpCache::Res(rc)) => r.backward(rc, &grad),
                _ => unreachable!("cache produced by this stack"),
            };
        }
        grad
    }

    /// The last convolution in the stack.
    pub fn last_conv_mut(&mut self) -> Option<&mut Conv2d<T>> {
        self.ops.iter_mut().rev().find_map(|op| match op {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }
}

impl<T: Real> Module<T> for Stack<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for op in &self.ops {
            match op {
                Op::Conv(c) => c.visit(f),
                Op::Res(r) => r.visit(f),
                Op::Act(_) | Op::Shuffle => {}
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for op in &mut self.ops {
            match op {
                Op::Conv(c) => c.visit_mut(f),
                Op::Res(r) => r.visit_mut(f),
                Op::Act(_) | Op::Shuffle => {}
            }
        }
    }
}

/// Convolution over a channel-concatenated pair whose weights are tied so
/// that exchanging the two inputs exchanges the two outputs:
/// `y1 = conv(x1 ⊕ x2)`, `y2 = conv(x2 ⊕ x1)`.
#[derive(Clone, Debug)]
pub struct PairConv<T> {
    pub conv: Conv2d<T>,
}

pub struct PairCache<T>(ConvCache<T>, ConvCache<T>);

impl<T: Real> PairConv<T> {
    pub fn new<R: Rng>(
        name: &str,
        half_in: usize,
        half_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(name, 2 * half_in, half_out, 3, 1, 1, init, rng),
        }
    }

    pub fn forward(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> (Tensor<T>, Tensor<T>, PairCache<T>) {
        let (y1, c1) = self.conv.forward(&Tensor::concat_channels(&[x1, x2]));
        let (y2, c2) = self.conv.forward(&Tensor::concat_channels(&[x2, x1]));
        (y1, y2, PairCache(c1, c2))
    }

    pub fn backward(
        &mut self,
        cache: &PairCache<T>,
        dy1: &Tensor<T>,
        dy2: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let half = self.conv.in_channels() / 2;
        let d12 = self.conv.backward(&cache.0, dy1);
        let d21 = self.conv.backward(&cache.1, dy2);
        let mut dx1 = d12.slice_channels(0, half);
        dx1.add_assign(&d21.slice_channels(half, half));
        let mut dx2 = d12.slice_channels(half, half);
        dx2.add_assign(&d21.slice_channels(0, half));
        (dx1, dx2)
    }
}

impl<T: Real> Module<T> for PairConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
    }
}
