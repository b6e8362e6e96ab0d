//! Mask reconstruction network and the masked-image branch encoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{FfnStack, Linear, ParamGroup, ParamId, ParamStore, PatchEmbed, Session};
use crate::tensor::{Tensor, Var};

/// Guard added under the square root when differentiating RMSE.
pub const RMSE_EPS: f64 = 1e-12;

/// Source, tampered and background masks over the pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTriplet<T = Tensor> {
    pub source: T,
    pub tampered: T,
    pub background: T,
}

impl MaskTriplet<Tensor> {
    /// Masks of an untouched `h×w` image.
    pub fn clean(h: usize, w: usize) -> Self {
        MaskTriplet {
            source: Tensor::zeros(&[h, w]),
            tampered: Tensor::zeros(&[h, w]),
            background: Tensor::ones(&[h, w]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 3] {
        [
            ("source", &self.source),
            ("tampered", &self.tampered),
            ("background", &self.background),
        ]
    }

    pub fn constants<'t>(&self, s: &Session<'t>) -> MaskTriplet<Var<'t>> {
        MaskTriplet {
            source: s.constant(self.source.clone()),
            tampered: s.constant(self.tampered.clone()),
            background: s.constant(self.background.clone()),
        }
    }
}

impl<'t> MaskTriplet<Var<'t>> {
    pub fn values(&self) -> MaskTriplet {
        MaskTriplet {
            source: self.source.value(),
            tampered: self.tampered.value(),
            background: self.background.value(),
        }
    }

    fn parts(&self) -> [Var<'t>; 3] {
        [self.source, self.tampered, self.background]
    }
}

/// Root mean squared error over every pixel of all three masks, pooled across the batch.
pub fn rmse_loss_batch<'t>(pairs: &[(&MaskTriplet<Var<'t>>, &MaskTriplet<Var<'t>>)]) -> Result<Var<'t>> {
    let mut terms = Vec::with_capacity(pairs.len() * 3);
    let mut count = 0;
    for (pred, gt) in pairs {
        for (p, g) in pred.parts().into_iter().zip(gt.parts()) {
            count += p.len();
            terms.push(p.sub(g)?.square().sum());
        }
    }
    let first = *terms
        .first()
        .ok_or_else(|| Error::Contract("rmse of an empty batch".into()))?;
    let total = terms[1..].iter().try_fold(first, |acc, t| acc.add(*t))?;
    Ok(total.scale(1.0 / count as f64).guarded_sqrt(RMSE_EPS))
}

pub fn rmse_loss<'t>(pred: &MaskTriplet<Var<'t>>, gt: &MaskTriplet<Var<'t>>) -> Result<Var<'t>> {
    rmse_loss_batch(&[(pred, gt)])
}

/// Intersection over union of two maps thresholded at 0.5. Two empty masks score 1.
pub fn iou(pred: &Tensor, gt: &Tensor) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Gain on the mean-removed part of each detector patch.
pub const CONTRAST_GAIN: f64 = 10.0;

/// Fixed `[p·p·c, p·p·c + c]` map from a flattened patch to its amplified deviations from
/// the per-channel patch mean, followed by that mean.
pub fn contrast_transform(patch: usize, channels: usize) -> Tensor {
    let pixels = patch * patch;
    let (rows, cols) = (pixels * channels, pixels * channels + channels);
    let inv = 1.0 / pixels as f64;
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, col) = (i / cols, i % cols);
        let ch = r % channels;
        if col < rows {
            let same = if r == col { 1.0 } else { 0.0 };
            let shared = if col % channels == ch { inv } else { 0.0 };
            CONTRAST_GAIN * (same - shared)
        } else if col - rows == ch {
            inv
        } else {
            0.0
        }
    })
}

/// Per-patch classifier: local-contrast patch features, FFN trunk, three mask logits
/// per patch, sigmoid, then nearest-neighbour upsampling back to pixels.
///
/// The contrast features make the 2×2 sensor pattern the dominant signal in each patch
/// without hiding its colour.
#[derive(Clone, Debug)]
pub struct Detector {
    contrast: Tensor,
    patch: usize,
    embed: Linear,
    trunk: FfnStack,
    head: Linear,
}

impl Detector {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        patch: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Detector;
        if patch == 0 || channels == 0 {
            return Err(Error::Config("detector patch and channels must be positive".into()));
        }
        let contrast = contrast_transform(patch, channels);
        let width = contrast.shape()[1];
        let embed = Linear::new(store, "detector.embed", g, width, hidden, rng)?;
        let trunk = FfnStack::new(store, "detector.trunk", g, &[hidden, hidden, hidden], rng)?;
        let head = Linear::new(store, "detector.head", g, hidden, 3, rng)?;
        Ok(Detector {
            contrast,
            patch,
            embed,
            trunk,
            head,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn forward<'t>(&self, s: &Session<'t>, image: Var<'t>) -> Result<MaskTriplet<Var<'t>>> {
        let shape = image.shape();
        let (h, w) = match *shape {
            [h, w, _] => (h, w),
            ref sh => return Err(Error::dim("detect", sh, &[0, 0, 0])),
        };
        let p = self.patch();
        let features = image.patchify(p)?.matmul(s.constant(self.contrast.clone()))?;
        let tokens = self.embed.forward(s, features)?.relu();
        let logits = self.head.forward(s, self.trunk.forward(s, tokens)?.relu())?;
        let map = |c: usize| -> Result<Var<'t>> {
            logits
                .narrow(1, c, 1)?
                .reshape(&[h / p, w / p])?
                .sigmoid()
                .upsample_nearest(p)
        };
        Ok(MaskTriplet {
            source: map(0)?,
            tampered: map(1)?,
            background: map(2)?,
        })
    }

    /// Inference on a plain tensor.
    pub fn detect(&self, store: &ParamStore, image: &Tensor) -> Result<MaskTriplet> {
        let tape = crate::tensor::Tape::new();
        let s = Session::inference(&tape, store);
        Ok(self.forward(&s, s.constant(image.clone()))?.values())
    }
}

/// The four branches of the hierarchical representation, each `[h', w', c_b]`.
#[derive(Clone, Copy, Debug)]
pub struct HierarchicalFeatures<'t> {
    pub original: Var<'t>,
    pub source: Var<'t>,
    pub background: Var<'t>,
    pub tamper: Var<'t>,
}

impl<'t> HierarchicalFeatures<'t> {
    /// Branches in fusion order: original, source, background, tamper.
    pub fn branches(&self) -> [Var<'t>; 4] {
        [self.original, self.source, self.background, self.tamper]
    }
}

/// Shared image encoder for all branches: patch embedding plus a learned position
/// embedding, then a two-layer FFN.
/// Initial bound of the learned position embedding, small next to patch features.
pub const POSITION_INIT: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct BranchEncoder {
    embed: PatchEmbed,
    position: ParamId,
    ffn: FfnStack,
    grid: (usize, usize),
}

impl BranchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        image_size: usize,
        channels: usize,
        patch: usize,
        hidden: usize,
        c_b: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        crate::tensor::patchify(&Tensor::zeros(&[image_size, image_size, 1]), patch)?;
        let g = ParamGroup::Rest;
        let grid = (image_size / patch, image_size / patch);
        let embed = PatchEmbed::new(store, "branch.embed", g, channels, patch, hidden, rng)?;
        let position = store.add_uniform("branch.position", g, &[grid.0 * grid.1, hidden], POSITION_INIT, rng)?;
        let ffn = FfnStack::new(store, "branch.ffn", g, &[hidden, hidden, c_b], rng)?;
        Ok(BranchEncoder {
            embed,
            position,
            ffn,
            grid,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn c_b(&self) -> usize {
        self.ffn.out_dim()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let tokens = self.embed.forward(s, image)?.add(s.param(self.position))?.relu();
        self.ffn
            .forward(s, tokens)?
            .reshape(&[self.grid.0, self.grid.1, self.c_b()])
    }
}

/// Encodes the image and its three masked versions with one shared encoder.
pub fn build_hierarchy<'t>(
    s: &Session<'t>,
    encoder: &BranchEncoder,
    image: Var<'t>,
    masks: &MaskTriplet<Var<'t>>,
) -> Result<HierarchicalFeatures<'t>> {
    let channels = match *image.shape() {
        [_, _, c] => c,
        ref sh => return Err(Error::dim("build_hierarchy", sh, &[0, 0, 0])),
    };
    let masked = |m: Var<'t>| -> Result<Var<'t>> { image.mul(m.expand_channels(channels)?) };
    Ok(HierarchicalFeatures {
        original: encoder.forward(s, image)?,
        source: encoder.forward(s, masked(masks.source)?)?,
        background: encoder.forward(s, masked(masks.background)?)?,
        tamper: encoder.forward(s, masked(masks.tampered)?)?,
    })
}
