//! Refinement network predicting additive residuals for both map directions.

use rand::Rng;

use super::layers::{
    Act, Conv2d, Init, Module, Op, Param, ResBlock, Stack, StackCache, LEAKY_SLOPE,
};
use crate::corr::CorrespondenceMaps;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CRN_INPUT_CHANNELS: usize = 10;

#[derive(Clone, Debug)]
pub struct Crn<T> {
    pub stack: Stack<T>,
}

pub struct CrnCache<T>(StackCache<T>);

impl<T: Real> Crn<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let leaky = Init::leaky(LEAKY_SLOPE);
        let act = Op::Act(Act::Leaky(LEAKY_SLOPE));
        let conv = |name: &str, cin, cout, k, s, p, init, rng: &mut R| {
            Op::Conv(Conv2d::new(name, cin, cout, k, s, p, init, rng))
        };
        let ops = vec![
            conv("crn.conv1", CRN_INPUT_CHANNELS, 64, 3, 1, 1, leaky, rng),
            act.clone(),
            conv("crn.conv2", 64, 128, 4, 2, 1, leaky, rng),
            act.clone(),
            conv("crn.conv3", 128, 256, 4, 2, 1, leaky, rng),
            act.clone(),
            Op::Res(ResBlock::new("crn.res1", 256, rng)),
            conv("crn.conv4", 256, 512, 3, 1, 1, leaky, rng),
            act.clone(),
            Op::Shuffle,
            Op::Res(ResBlock::new("crn.res2", 128, rng)),
            conv("crn.conv5", 128, 256, 3, 1, 1, leaky, rng),
            act.clone(),
            Op::Shuffle,
            Op::Res(ResBlock::new("crn.res3", 64, rng)),
            conv("crn.conv6", 64, 64, 3, 1, 1, leaky, rng),
            act.clone(),
            Op::Res(ResBlock::new("crn.res4", 64, rng)),
            conv("crn.conv7", 64, 4, 3, 1, 1, Init::Zero, rng),
            act,
        ];
        Self {
            stack: Stack::new(ops),
        }
    }

    /// Stacks `frame_a ⊕ frame_b ⊕ map_fwd ⊕ map_bwd` into the 10-channel input.
    pub fn input(
        frame_a: &Tensor<T>,
        frame_b: &Tensor<T>,
        maps: &CorrespondenceMaps,
    ) -> Result<Tensor<T>> {
        frame_a.ensure_same_shape(frame_b, "refinement frames")?;
        if maps.height() != frame_a.height() || maps.width() != frame_a.width() {
            return Err(Error::Shape(
                "correspondence maps do not match the frame size".into(),
            ));
        }
        let x = Tensor::concat_channels(&[frame_a, frame_b, &maps.fwd.cast(), &maps.bwd.cast()]);
        if x.channels() != CRN_INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "refinement input needs {CRN_INPUT_CHANNELS} channels, got {}",
                x.channels()
            )));
        }
        Ok(x)
    }

    /// Returns the raw `4×H×W` residual and the backward cache.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CrnCache<T>)> {
        if x.channels() != CRN_INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "refinement input needs {CRN_INPUT_CHANNELS} channels, got {}",
                x.channels()
            )));
        }
        if x.height() % 4 != 0 || x.width() % 4 != 0 {
            return Err(Error::Shape(
                "refinement input dims must be multiples of 4".into(),
            ));
        }
        let (y, cache) = self.stack.forward(x);
        Ok((y, CrnCache(cache)))
    }

    pub fn backward(&mut self, cache: &CrnCache<T>, dy: &Tensor<T>) {
        self.stack.backward(&cache.0, dy);
    }
}

impl<T: Real> Module<T> for Crn<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stack.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stack.visit_mut(f);
    }
}

/// `clamp(maps + Δ, −1, 1)` on valid entries; invalid entries keep their value.
pub fn apply_residual(maps: &CorrespondenceMaps, delta: &Tensor<f32>) -> CorrespondenceMaps {
    let mut out = maps.clone();
    let n = maps.height() * maps.width();
    for (k, (map, valid)) in [
        (&mut out.fwd, &maps.valid_fwd),
        (&mut out.bwd, &maps.valid_bwd),
    ]
    .into_iter()
    .enumerate()
    {
        for c in 0..2 {
            let d = delta.plane(2 * k + c);
            let m = &mut map.data_mut()[c * n..(c + 1) * n];
            for i in (0..n).filter(|&i| valid[i]) {
                m[i] = (m[i] + d[i]).clamp(-1.0, 1.0);
            }
        }
    }
    out
}
