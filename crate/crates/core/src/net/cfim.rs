//! Cross-frame interaction on the deepest features of a frame pair.
//!
//! Each frame attends to itself and to the other frame; the three terms are
//! summed per frame, then a tied pair convolution network fuses the two
//! 64-channel maps (equivalently, one 128-channel map) and splits them back.

use rand::Rng;

use super::attention::{attend, attend_backward};
use super::layers::{Act, Init, Module, PairCache, PairConv, Param};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Cfim<T> {
    pub res1: PairConv<T>,
    pub res2: PairConv<T>,
    pub out: PairConv<T>,
    channels: usize,
}

pub struct CfimCache<T> {
    f1: Tensor<T>,
    f2: Tensor<T>,
    p11: Vec<T>,
    p12: Vec<T>,
    p22: Vec<T>,
    p21: Vec<T>,
    r1: PairCache<T>,
    mid1: Tensor<T>,
    mid2: Tensor<T>,
    r2: PairCache<T>,
    o: PairCache<T>,
}

impl<T: Real> Cfim<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            res1: PairConv::new(
                &format!("{name}.res.conv1"),
                channels,
                channels,
                Init::leaky(0.0),
                rng,
            ),
            res2: PairConv::new(
                &format!("{name}.res.conv2"),
                channels,
                channels,
                Init::Kaiming { gain: 1.0 },
                rng,
            ),
            out: PairConv::new(
                &format!("{name}.out"),
                channels,
                channels,
                Init::Kaiming { gain: 1.0 },
                rng,
            ),
            channels,
        }
    }

    fn check(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<()> {
        f1.ensure_same_shape(f2, "cross-frame features")?;
        if f1.channels() != self.channels {
            return Err(Error::Shape(format!(
                "expected {} feature channels, got {}",
                self.channels,
                f1.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        f1: &Tensor<T>,
        f2: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, CfimCache<T>)> {
        self.check(f1, f2)?;
        let (d, n) = (self.channels, f1.plane_len());
        let (a11, p11) = attend(f1.data(), f1.data(), d, n, n);
        let (a12, p12) = attend(f1.data(), f2.data(), d, n, n);
        let (a22, p22) = attend(f2.data(), f2.data(), d, n, n);
        let (a21, p21) = attend(f2.data(), f1.data(), d, n, n);
        let sum = |f: &Tensor<T>, a: &[T], b: &[T]| {
            let mut s = f.clone();
            for ((v, &x), &y) in s.data_mut().iter_mut().zip(a).zip(b) {
                *v += x + y;
            }
            s
        };
        let s1 = sum(f1, &a11, &a12);
        let s2 = sum(f2, &a22, &a21);

        let (u1, u2, r1) = self.res1.forward(&s1, &s2);
        let mid1 = Act::Relu.forward(&u1);
        let mid2 = Act::Relu.forward(&u2);
        let (mut v1, mut v2, r2) = self.res2.forward(&mid1, &mid2);
        v1.add_assign(&s1);
        v2.add_assign(&s2);
        let (h1, h2, o) = self.out.forward(&v1, &v2);
        let cache = CfimCache {
            f1: f1.clone(),
            f2: f2.clone(),
            p11,
            p12,
            p22,
            p21,
            r1,
            mid1,
            mid2,
            r2,
            o,
        };
        Ok((h1, h2, cache))
    }

    pub fn infer(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.forward(f1, f2).map(|(a, b, _)| (a, b))
    }

    pub fn backward(
        &mut self,
        cache: &CfimCache<T>,
        dh1: &Tensor<T>,
        dh2: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let (dv1, dv2) = self.out.backward(&cache.o, dh1, dh2);
        let (dm1, dm2) = self.res2.backward(&cache.r2, &dv1, &dv2);
        let du1 = Act::Relu.backward(&cache.mid1, &dm1);
        let du2 = Act::Relu.backward(&cache.mid2, &dm2);
        let (mut ds1, mut ds2) = self.res1.backward(&cache.r1, &du1, &du2);
        ds1.add_assign(&dv1);
        ds2.add_assign(&dv2);

        let (d, n) = (self.channels, cache.f1.plane_len());
        let (f1, f2) = (cache.f1.data(), cache.f2.data());
        let mut df1 = ds1.clone();
        let mut df2 = ds2.clone();
        let mut tmp_q = vec![T::ZERO; d * n];
        let mut tmp_kv = vec![T::ZERO; d * n];
        let mut run =
            |q: &[T], kv: &[T], p: &[T], g: &[T], dq: &mut Tensor<T>, dkv: &mut Tensor<T>| {
                tmp_q.iter_mut().for_each(|v| *v = T::ZERO);
                tmp_kv.iter_mut().for_each(|v| *v = T::ZERO);
                attend_backward(q, kv, p, g, d, n, n, &mut tmp_q, &mut tmp_kv);
                dq.data_mut()
                    .iter_mut()
                    .zip(&tmp_q)
                    .for_each(|(a, &b)| *a += b);
                dkv.data_mut()
                    .iter_mut()
                    .zip(&tmp_kv)
                    .for_each(|(a, &b)| *a += b);
            };
        let mut df1_kv = Tensor::zeros_like(&df1);
        let mut df2_kv = Tensor::zeros_like(&df2);
        run(f1, f1, &cache.p11, ds1.data(), &mut df1, &mut df1_kv);
        run(f1, f2, &cache.p12, ds1.data(), &mut df1, &mut df2_kv);
        run(f2, f2, &cache.p22, ds2.data(), &mut df2, &mut df2_kv);
        run(f2, f1, &cache.p21, ds2.data(), &mut df2, &mut df1_kv);
        df1.add_assign(&df1_kv);
        df2.add_assign(&df2_kv);
        (df1, df2)
    }
}

impl<T: Real> Module<T> for Cfim<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.res1.visit(f);
        self.res2.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.res1.visit_mut(f);
        self.res2.visit_mut(f);
        self.out.visit_mut(f);
    }
}
