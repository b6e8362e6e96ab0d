//! The assembled question-answering model and its batched forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{build_hierarchy, BranchEncoder, Detector, MaskTriplet};
use crate::error::{Error, Result};
use crate::mmoe::{AnswerHead, MoeConfig, MoeDims, MoeLayer, MoeOutput};
use crate::nn::{ParamStore, Session};
use crate::synth::{question_text, ANSWER_COUNT, QUESTION_COUNT};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{TextEncoder, Vocabulary};

/// Layer widths of every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub detector_patch: usize,
    pub detector_hidden: usize,
    pub branch_patch: usize,
    pub branch_hidden: usize,
    pub c_b: usize,
    pub fusion_hidden: usize,
    pub c: usize,
    pub d_text: usize,
    pub text_hidden: usize,
    pub d_att: usize,
    pub expert_hidden: usize,
    pub d_out: usize,
    pub answer_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            detector_patch: 2,
            detector_hidden: 16,
            branch_patch: 4,
            branch_hidden: 24,
            c_b: 12,
            fusion_hidden: 128,
            c: 96,
            d_text: 16,
            text_hidden: 16,
            d_att: 16,
            expert_hidden: 64,
            d_out: 64,
            answer_hidden: 128,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("detector_patch", self.detector_patch),
            ("detector_hidden", self.detector_hidden),
            ("branch_patch", self.branch_patch),
            ("branch_hidden", self.branch_hidden),
            ("c_b", self.c_b),
            ("fusion_hidden", self.fusion_hidden),
            ("c", self.c),
            ("d_text", self.d_text),
            ("text_hidden", self.text_hidden),
            ("d_att", self.d_att),
            ("expert_hidden", self.expert_hidden),
            ("d_out", self.d_out),
            ("answer_hidden", self.answer_hidden),
        ];
        match named.iter().find(|(_, v)| *v == 0) {
            Some((k, _)) => Err(Error::Config(format!("{k} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Question vocabulary over the fixed question templates.
pub fn question_vocabulary() -> Vocabulary {
    let corpus: Vec<&str> = (1..=QUESTION_COUNT)
        .map(|c| question_text(c).expect("template"))
        .collect();
    Vocabulary::build(&corpus).expect("templates are non-empty")
}

/// One image with the question categories asked about it.
#[derive(Clone, Copy, Debug)]
pub struct ImageInput<'a> {
    pub image: &'a Tensor,
    /// Ground-truth masks, used for the hierarchy instead of predictions when teacher
    /// forcing is on.
    pub masks: Option<&'a MaskTriplet>,
    /// Categories in `1..=14`.
    pub categories: &'a [usize],
}

/// Graph outputs for one image.
pub struct ImageOutput<'t> {
    pub masks: MaskTriplet<Var<'t>>,
    pub moe: MoeOutput<'t>,
    /// `[n_q, ANSWER_COUNT]`.
    pub logits: Var<'t>,
}

/// Detector, branch encoder, text encoder, mixture and answer head.
#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub image_size: usize,
    pub detector: Detector,
    pub encoder: BranchEncoder,
    pub text: TextEncoder,
    pub moe: MoeLayer,
    pub head: AnswerHead,
    vocab: Vocabulary,
}

impl Model {
    /// Builds a model and its freshly initialized parameters from `seed`.
    pub fn new(image_size: usize, dims: ModelDims, moe: MoeConfig, seed: u64) -> Result<(Self, ParamStore)> {
        dims.validate()?;
        moe.validate()?;
        if !image_size.is_multiple_of(dims.detector_patch) || !image_size.is_multiple_of(dims.branch_patch) {
            return Err(Error::Config(format!(
                "image size {image_size} is not a multiple of the patch sizes {} and {}",
                dims.detector_patch, dims.branch_patch
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab = question_vocabulary();
        let d = dims;
        let detector = Detector::new(&mut store, 3, d.detector_patch, d.detector_hidden, &mut rng)?;
        let encoder = BranchEncoder::new(
            &mut store,
            image_size,
            3,
            d.branch_patch,
            d.branch_hidden,
            d.c_b,
            &mut rng,
        )?;
        let text = TextEncoder::new(&mut store, vocab.len(), d.d_text, d.text_hidden, &mut rng)?;
        let moe_dims = MoeDims {
            c_b: d.c_b,
            fusion_hidden: d.fusion_hidden,
            c: d.c,
            d_text: d.d_text,
            d_att: d.d_att,
            expert_hidden: d.expert_hidden,
            d_out: d.d_out,
        };
        let moe = MoeLayer::new(&mut store, moe, moe_dims, &mut rng)?;
        let head = AnswerHead::new(&mut store, d.d_out, d.d_text, d.answer_hidden, ANSWER_COUNT, &mut rng)?;
        let model = Model {
            dims,
            image_size,
            detector,
            encoder,
            text,
            moe,
            head,
            vocab,
        };
        Ok((model, store))
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Pooled features of all question templates, `[14, d_text]`, row `c−1` for category `c`.
    pub fn question_table<'t>(&self, s: &Session<'t>) -> Result<Var<'t>> {
        let rows = (1..=QUESTION_COUNT)
            .map(|c| {
                let f = self.text.encode(s, &self.vocab, question_text(c)?)?;
                f.pooled.reshape(&[1, self.dims.d_text])
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&rows, 0)
    }

    /// Forward pass of one image given the question table.
    pub fn forward_image<'t>(
        &self,
        s: &Session<'t>,
        questions: Var<'t>,
        input: &ImageInput<'_>,
        fixed_routing: Option<&[Vec<usize>]>,
    ) -> Result<ImageOutput<'t>> {
        if input.categories.is_empty() {
            return Err(Error::Contract("an image needs at least one question".into()));
        }
        if let Some(&c) = input.categories.iter().find(|&&c| c == 0 || c > QUESTION_COUNT) {
            return Err(Error::Contract(format!("question category {c} outside 1..=14")));
        }
        let image = s.constant(input.image.clone());
        let masks = self.detector.forward(s, image)?;
        let routed = match input.masks {
            Some(gt) => gt.constants(s),
            None => masks.clone(),
        };
        let h = build_hierarchy(s, &self.encoder, image, &routed)?;
        let rows: Vec<usize> = input.categories.iter().map(|c| c - 1).collect();
        let text = questions.gather_rows(&rows)?;
        let moe = self.moe.forward(s, &h, text, fixed_routing)?;
        let logits = self.head.forward(s, moe.output, text)?;
        Ok(ImageOutput { masks, moe, logits })
    }

    /// Inference for one image: predicted masks, answer ids, and routing per question.
    pub fn predict(&self, store: &ParamStore, image: &Tensor, categories: &[usize]) -> Result<Prediction> {
        let tape = Tape::new();
        let s = Session::inference(&tape, store);
        let table = self.question_table(&s)?;
        let input = ImageInput {
            image,
            masks: None,
            categories,
        };
        let out = self.forward_image(&s, table, &input, None)?;
        let logits = out.logits.value();
        let answers = (0..categories.len()).map(|r| argmax(logits.row(r))).collect();
        Ok(Prediction {
            masks: out.masks.values(),
            answers,
            decisions: out.moe.decisions(),
        })
    }
}

/// Inference outputs of one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub masks: MaskTriplet,
    pub answers: Vec<usize>,
    pub decisions: Vec<crate::mmoe::GatingDecision>,
}

/// Index of the largest value, lowest index among ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes() {
        let (model, store) = Model::new(16, ModelDims::default(), MoeConfig::default(), 3).unwrap();
        let image = Tensor::from_fn(&[16, 16, 3], |i| (i % 7) as f64 / 7.0);
        let p = model.predict(&store, &image, &[1, 5, 14]).unwrap();
        assert_eq!(p.answers.len(), 3);
        assert_eq!(p.decisions.len(), 3);
        assert_eq!(p.masks.tampered.shape(), &[16, 16]);
        assert!(p.answers.iter().all(|&a| a < ANSWER_COUNT));
    }

    #[test]
    fn rejects_bad_category() {
        let (model, store) = Model::new(16, ModelDims::default(), MoeConfig::default(), 3).unwrap();
        let image = Tensor::zeros(&[16, 16, 3]);
        assert!(model.predict(&store, &image, &[15]).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
