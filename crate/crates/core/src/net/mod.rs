//! Decomposition network (encoder, cross-frame interaction, L/R/B decoder
//! heads) and the correspondence refinement network.

mod attention;
mod cfim;
mod checkpoint;
mod crn;
mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use attention::attention;
pub use cfim::{Cfim, CfimCache};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_FORMAT_VERSION};
pub use crn::{apply_residual, Crn, CrnCache, CRN_INPUT_CHANNELS};
pub use layers::{
    pixel_shuffle, pixel_unshuffle, Act, Conv2d, Init, Module, Op, PairConv, Param, ResBlock,
    Stack, StackCache, LEAKY_SLOPE,
};

use crate::error::{Error, Result};
use crate::synth::rng_for;
use crate::tensor::{Real, Tensor};
use crate::videodata::DecompositionTriple;

pub const FEATURE_CHANNELS: usize = 64;

/// Model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two heads (L, R), no residual, no refinement network.
    Vllve,
    /// Three heads (L, R, B) plus the refinement network.
    Vllvepp,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vllve => "vllve",
            Variant::Vllvepp => "vllvepp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vllve" => Ok(Variant::Vllve),
            "vllvepp" => Ok(Variant::Vllvepp),
            other => Err(Error::Config(format!(
                "variant must be `vllve` or `vllvepp`, got `{other}`"
            ))),
        }
    }
}

const TAG_ENCODER: u64 = 1;
const TAG_CFIM: u64 = 2;
const TAG_HEAD_L: u64 = 3;
const TAG_HEAD_R: u64 = 4;
const TAG_HEAD_B: u64 = 5;
const TAG_CRN: u64 = 6;

fn conv_op<T: Real, R: rand::Rng>(
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    s: usize,
    init: Init,
    rng: &mut R,
) -> Op<T> {
    let pad = 1;
    Op::Conv(Conv2d::new(name, cin, cout, k, s, pad, init, rng))
}

fn encoder<T: Real, R: rand::Rng>(rng: &mut R) -> Stack<T> {
    let leaky = Init::leaky(LEAKY_SLOPE);
    let act = || Op::Act(Act::Leaky(LEAKY_SLOPE));
    Stack::new(vec![
        conv_op("encoder.conv1", 3, FEATURE_CHANNELS, 3, 1, leaky, rng),
        act(),
        conv_op(
            "encoder.conv2",
            FEATURE_CHANNELS,
            FEATURE_CHANNELS,
            4,
            2,
            leaky,
            rng,
        ),
        act(),
        conv_op(
            "encoder.conv3",
            FEATURE_CHANNELS,
            FEATURE_CHANNELS,
            4,
            2,
            leaky,
            rng,
        ),
        act(),
    ])
}

/// Initial bias of the L head's last layer. With zero biases both heads
/// shrink to zero under the smoothness and correspondence terms before
/// reconstruction can pull them up.
pub const L_HEAD_BIAS: f64 = 1.0;
/// Initial bias of the R head's last layer; `L⊗R` starts at mid-grey.
pub const R_HEAD_BIAS: f64 = 0.5;

/// `last_bias: None` zero-initializes the whole last layer.
fn decoder<T: Real, R: rand::Rng>(name: &str, last_bias: Option<f64>, rng: &mut R) -> Stack<T> {
    let leaky = Init::leaky(LEAKY_SLOPE);
    let act = || Op::Act(Act::Leaky(LEAKY_SLOPE));
    let c = FEATURE_CHANNELS;
    let mut ops = vec![
        conv_op(&format!("{name}.conv1"), c, 4 * c, 3, 1, leaky, rng),
        act(),
        Op::Shuffle,
        conv_op(&format!("{name}.conv2"), c, 4 * c, 3, 1, leaky, rng),
        act(),
        Op::Shuffle,
        conv_op(&format!("{name}.conv3"), c, c, 3, 1, leaky, rng),
        act(),
    ];
    let mut last = Conv2d::new(&format!("{name}.conv4"), c, 3, 3, 1, 1, Init::Zero, rng);
    if let Some(b) = last_bias {
        last.bias.value.fill(T::from_f64(b));
    }
    ops.extend([Op::Conv(last), act()]);
    Stack::new(ops)
}

/// Gradients flowing into one frame's decomposition outputs.
#[derive(Clone, Debug)]
pub struct TripleGrad<T> {
    pub l: Tensor<T>,
    pub r: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

impl<T: Real> TripleGrad<T> {
    pub fn zeros(c: usize, h: usize, w: usize, with_b: bool) -> Self {
        Self {
            l: Tensor::zeros(c, h, w),
            r: Tensor::zeros(c, h, w),
            b: with_b.then(|| Tensor::zeros(c, h, w)),
        }
    }
}

/// Backward state of [`Decomposer::forward_pair`].
pub struct PairCache<T> {
    enc: [StackCache<T>; 2],
    cfim: CfimCache<T>,
    l: [StackCache<T>; 2],
    r: [StackCache<T>; 2],
    b: Option<[StackCache<T>; 2]>,
}

/// The decomposition network: shared encoder, cross-frame interaction and
/// one decoder per output component.
#[derive(Clone, Debug)]
pub struct Decomposer<T> {
    pub encoder: Stack<T>,
    pub cfim: Cfim<T>,
    pub head_l: Stack<T>,
    pub head_r: Stack<T>,
    pub head_b: Option<Stack<T>>,
}

fn check_frame<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.channels() != 3 || x.height() % 4 != 0 || x.width() % 4 != 0 || x.is_empty() {
        return Err(Error::Shape(format!(
            "network input must be 3 channels with dims multiple of 4, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Decomposer<T> {
    fn new(variant: Variant, seed: u64) -> Self {
        Self {
            encoder: encoder(&mut rng_for(seed, &[TAG_ENCODER])),
            cfim: Cfim::new("cfim", FEATURE_CHANNELS, &mut rng_for(seed, &[TAG_CFIM])),
            head_l: decoder(
                "head_l",
                Some(L_HEAD_BIAS),
                &mut rng_for(seed, &[TAG_HEAD_L]),
            ),
            head_r: decoder(
                "head_r",
                Some(R_HEAD_BIAS),
                &mut rng_for(seed, &[TAG_HEAD_R]),
            ),
            head_b: (variant == Variant::Vllvepp)
                .then(|| decoder("head_b", None, &mut rng_for(seed, &[TAG_HEAD_B]))),
        }
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_frame(x)?;
        Ok(self.encoder.infer(x))
    }

    fn decode_all(&self, h: &Tensor<T>) -> Result<DecompositionTriple<T>> {
        let l = self.head_l.infer(h);
        let r = self.head_r.infer(h);
        let b = match &self.head_b {
            Some(head) => head.infer(h),
            None => Tensor::zeros_like(&l),
        };
        DecompositionTriple::new(l, r, b)
    }

    pub fn forward_pair(
        &self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<(DecompositionTriple<T>, DecompositionTriple<T>, PairCache<T>)> {
        check_frame(x1)?;
        x1.ensure_same_shape(x2, "frame pair")?;
        let (f1, e1) = self.encoder.forward(x1);
        let (f2, e2) = self.encoder.forward(x2);
        let (h1, h2, cfim) = self.cfim.forward(&f1, &f2)?;
        let (l1, cl1) = self.head_l.forward(&h1);
        let (l2, cl2) = self.head_l.forward(&h2);
        let (r1, cr1) = self.head_r.forward(&h1);
        let (r2, cr2) = self.head_r.forward(&h2);
        let (b1, b2, cb) = match &self.head_b {
            Some(head) => {
                let (b1, cb1) = head.forward(&h1);
                let (b2, cb2) = head.forward(&h2);
                (b1, b2, Some([cb1, cb2]))
            }
            None => (Tensor::zeros_like(&l1), Tensor::zeros_like(&l2), None),
        };
        let t1 = DecompositionTriple::new(l1, r1, b1)?;
        let t2 = DecompositionTriple::new(l2, r2, b2)?;
        Ok((
            t1,
            t2,
            PairCache {
                enc: [e1, e2],
                cfim,
                l: [cl1, cl2],
                r: [cr1, cr2],
                b: cb,
            },
        ))
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward_pair(&mut self, cache: &PairCache<T>, g1: &TripleGrad<T>, g2: &TripleGrad<T>) {
        let mut dh = [g1, g2].map(|_| None::<Tensor<T>>);
        for (i, g) in [g1, g2].into_iter().enumerate() {
            let mut d = self.head_l.backward(&cache.l[i], &g.l);
            d.add_assign(&self.head_r.backward(&cache.r[i], &g.r));
            if let (Some(head), Some(cb), Some(gb)) =
                (self.head_b.as_mut(), cache.b.as_ref(), g.b.as_ref())
            {
                d.add_assign(&head.backward(&cb[i], gb));
            }
            dh[i] = Some(d);
        }
        let [dh1, dh2] = dh.map(|d| d.expect("filled above"));
        let (df1, df2) = self.cfim.backward(&cache.cfim, &dh1, &dh2);
        self.encoder.backward(&cache.enc[0], &df1);
        self.encoder.backward(&cache.enc[1], &df2);
    }

    /// Decomposes `target` using `reference` as the cross-frame partner; only
    /// the target's triple is decoded.
    pub fn forward_single(
        &self,
        target: &Tensor<T>,
        reference: &Tensor<T>,
    ) -> Result<DecompositionTriple<T>> {
        check_frame(target)?;
        target.ensure_same_shape(reference, "frame pair")?;
        let f1 = self.encoder.infer(target);
        let f2 = self.encoder.infer(reference);
        let (h1, _) = self.cfim.infer(&f1, &f2)?;
        self.decode_all(&h1)
    }
}

impl<T: Real> Module<T> for Decomposer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.cfim.visit(f);
        self.head_l.visit(f);
        self.head_r.visit(f);
        if let Some(b) = &self.head_b {
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.cfim.visit_mut(f);
        self.head_l.visit_mut(f);
        self.head_r.visit_mut(f);
        if let Some(b) = &mut self.head_b {
            b.visit_mut(f);
        }
    }
}

/// All learnable state of one model.
#[derive(Clone, Debug)]
pub struct ModelState<T = f32> {
    variant: Variant,
    init_seed: u64,
    pub g: Decomposer<T>,
    pub crn: Option<Crn<T>>,
}

impl<T: Real> ModelState<T> {
    pub fn new(variant: Variant, init_seed: u64) -> Self {
        let crn =
            (variant == Variant::Vllvepp).then(|| Crn::new(&mut rng_for(init_seed, &[TAG_CRN])));
        Self {
            variant,
            init_seed,
            g: Decomposer::new(variant, init_seed),
            crn,
        }
    }

    /// Upgrades a trained two-head model: copies encoder, interaction and
    /// L/R heads, adds a B head whose final layer is zero and a fresh
    /// refinement network whose final layer is zero.
    pub fn vllvepp_from(pretrained: &ModelState<T>, seed: u64) -> Result<Self> {
        if pretrained.variant != Variant::Vllve {
            return Err(Error::Variant(format!(
                "expected a vllve model to extend, got {}",
                pretrained.variant
            )));
        }
        let mut g = pretrained.g.clone();
        g.head_b = Some(decoder("head_b", None, &mut rng_for(seed, &[TAG_HEAD_B])));
        Ok(Self {
            variant: Variant::Vllvepp,
            init_seed: seed,
            g,
            crn: Some(Crn::new(&mut rng_for(seed, &[TAG_CRN]))),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn crn(&self) -> Result<&Crn<T>> {
        self.crn
            .as_ref()
            .ok_or_else(|| Error::Variant("vllve models have no refinement network".into()))
    }

    pub fn crn_mut(&mut self) -> Result<&mut Crn<T>> {
        self.crn
            .as_mut()
            .ok_or_else(|| Error::Variant("vllve models have no refinement network".into()))
    }

    /// Fails when `B` is requested from a two-head model.
    pub fn require_residual(&self) -> Result<()> {
        match self.variant {
            Variant::Vllvepp => Ok(()),
            Variant::Vllve => Err(Error::Variant("vllve models have no residual head".into())),
        }
    }

    pub fn forward_pair(
        &self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<(DecompositionTriple<T>, DecompositionTriple<T>)> {
        self.g.forward_pair(x1, x2).map(|(a, b, _)| (a, b))
    }

    pub fn forward_single(
        &self,
        target: &Tensor<T>,
        reference: &Tensor<T>,
    ) -> Result<DecompositionTriple<T>> {
        self.g.forward_single(target, reference)
    }

    /// Raw refinement residuals `(Δfwd, Δbwd)`, each `2×H×W`.
    pub fn crn_forward(
        &self,
        frame_a: &Tensor<T>,
        frame_b: &Tensor<T>,
        maps: &crate::corr::CorrespondenceMaps,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = Crn::input(frame_a, frame_b, maps)?;
        let (y, _) = self.crn()?.forward(&x)?;
        Ok((y.slice_channels(0, 2), y.slice_channels(2, 2)))
    }

    pub fn visit_all(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.g.visit(f);
        if let Some(c) = &self.crn {
            c.visit(f);
        }
    }

    pub fn visit_all_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.g.visit_mut(f);
        if let Some(c) = &mut self.crn {
            c.visit_mut(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_all(&mut |p| n += p.len());
        n
    }

    /// Hash over variant and every parameter's name and shape.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.variant.to_string().as_bytes());
        self.visit_all(&mut |p| {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// SHA-256 of the decomposition network's parameter values.
    pub fn g_hash(&self) -> String {
        hash_params(&self.g)
    }

    /// SHA-256 of the refinement network's parameter values.
    pub fn crn_hash(&self) -> Result<String> {
        Ok(hash_params(self.crn()?))
    }
}

pub fn hash_params<T: Real>(m: &dyn Module<T>) -> String {
    let mut h = Sha256::new();
    m.visit(&mut |p| {
        h.update(p.name.as_bytes());
        for v in &p.value {
            h.update(v.to_f64().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
