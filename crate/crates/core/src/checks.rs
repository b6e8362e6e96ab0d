//! Finite-difference gradient suite over every differentiable operation, every layer,
//! the losses, and the composed mixture graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{rmse_loss, BranchEncoder, Detector, HierarchicalFeatures, MaskTriplet};
use crate::error::{Error, Result};
use crate::mmoe::{
    balance_loss, importance_stats, top_k_softmax, AnswerHead, GatingModality, MoeConfig, MoeDims, MoeLayer, Structure,
};
use crate::model::{ImageInput, Model, ModelDims};
use crate::nn::{
    grad_check_params, CrossAttention, FfnStack, Linear, ParamCheck, ParamGroup, ParamStore, PatchEmbed, Session,
};
use crate::tensor::{grad_check_many, Tensor, Var};
use crate::text::TextEncoder;
use crate::train::total_loss;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one registered check over its random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Draws discarded because they lay within a step of a kink.
    pub redrawn: usize,
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }
}

/// One random instance: the worst relative error, or `None` when the instance lies within
/// a finite-difference step of a kink and must be redrawn.
type Check = fn(&mut ChaCha8Rng) -> Result<Option<f64>>;

/// Upper bound on redraws per accepted instance.
const MAX_DRAWS_PER_INSTANCE: usize = 5;

fn smooth(check: ParamCheck) -> Option<f64> {
    (check.kinks == 0).then_some(check.max_error)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1]` and random sign: clear of kinks at zero.
fn away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Checks `Σ f(inputs) ⊙ R` for a random weighting `R` of the output.
fn op_check<F>(inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, out_shape: &[usize], f: F) -> Result<Option<f64>>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let r = uniform(rng, out_shape, -1.0, 1.0);
    let error = grad_check_many(
        |v| {
            let y = f(v)?;
            let w = v[0].tape().constant(r.clone());
            Ok(y.mul(w)?.sum())
        },
        &inputs,
        STEP,
    )?;
    Ok(Some(error))
}

fn seeded(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.gen())
}

/// Random weighted sum of a layer output, for parameter checks.
fn weighted<'t>(s: &Session<'t>, y: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(s.constant(r.clone().reshape(&y.shape())?))?.sum())
}

fn registry() -> Vec<(&'static str, Check)> {
    vec![
        ("add", |r| {
            let i = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
            op_check(i, r, &[3, 4], |v| v[0].add(v[1]))
        }),
        ("sub", |r| {
            let i = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
            op_check(i, r, &[3, 4], |v| v[0].sub(v[1]))
        }),
        ("mul", |r| {
            let i = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
            op_check(i, r, &[3, 4], |v| v[0].mul(v[1]))
        }),
        ("div", |r| {
            let i = vec![uniform(r, &[3, 4], -1.0, 1.0), away(r, &[3, 4])];
            op_check(i, r, &[3, 4], |v| v[0].div(v[1]))
        }),
        ("scale", |r| {
            op_check(vec![uniform(r, &[5], -1.0, 1.0)], r, &[5], |v| Ok(v[0].scale(1.7)))
        }),
        ("add_scalar", |r| {
            op_check(vec![uniform(r, &[5], -1.0, 1.0)], r, &[5], |v| Ok(v[0].add_scalar(0.3)))
        }),
        ("neg", |r| {
            op_check(vec![uniform(r, &[5], -1.0, 1.0)], r, &[5], |v| Ok(v[0].neg()))
        }),
        ("square", |r| {
            op_check(vec![uniform(r, &[5], -1.0, 1.0)], r, &[5], |v| Ok(v[0].square()))
        }),
        ("relu", |r| {
            op_check(vec![away(r, &[3, 4])], r, &[3, 4], |v| Ok(v[0].relu()))
        }),
        ("sigmoid", |r| {
            op_check(vec![uniform(r, &[3, 4], -3.0, 3.0)], r, &[3, 4], |v| Ok(v[0].sigmoid()))
        }),
        ("exp", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[3, 4], |v| Ok(v[0].exp()))
        }),
        ("sqrt", |r| {
            op_check(vec![uniform(r, &[3, 4], 0.5, 2.0)], r, &[3, 4], |v| Ok(v[0].sqrt()))
        }),
        ("guarded_sqrt", |r| {
            op_check(vec![uniform(r, &[3, 4], 0.5, 2.0)], r, &[3, 4], |v| {
                Ok(v[0].guarded_sqrt(1e-12))
            })
        }),
        ("clamp_min", |r| {
            op_check(vec![away(r, &[3, 4])], r, &[3, 4], |v| Ok(v[0].clamp_min(0.0)))
        }),
        ("matmul", |r| {
            let i = vec![uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5, 3], -1.0, 1.0)];
            op_check(i, r, &[4, 3], |v| v[0].matmul(v[1]))
        }),
        ("transpose", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[4, 3], |v| v[0].transpose())
        }),
        ("add_bias", |r| {
            let i = vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
            op_check(i, r, &[2, 3, 4], |v| v[0].add_bias(v[1]))
        }),
        ("scale_by", |r| {
            let i = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)];
            op_check(i, r, &[3, 4], |v| v[0].scale_by(v[1]))
        }),
        ("softmax_rows", |r| {
            op_check(vec![uniform(r, &[3, 4], -2.0, 2.0)], r, &[3, 4], |v| v[0].softmax(1))
        }),
        ("softmax_columns", |r| {
            op_check(vec![uniform(r, &[3, 4], -2.0, 2.0)], r, &[3, 4], |v| v[0].softmax(0))
        }),
        ("mask_fill_softmax", |r| {
            let keep = [true, false, true, true, false, false, true, false, false, true];
            op_check(vec![uniform(r, &[2, 5], -2.0, 2.0)], r, &[2, 5], move |v| {
                v[0].mask_fill(&keep)?.softmax(1)
            })
        }),
        ("concat", |r| {
            let i = vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 5], -1.0, 1.0)];
            op_check(i, r, &[2, 8], |v| Var::concat(&[v[0], v[1]], 1))
        }),
        ("narrow", |r| {
            op_check(vec![uniform(r, &[3, 6], -1.0, 1.0)], r, &[3, 3], |v| {
                v[0].narrow(1, 2, 3)
            })
        }),
        ("split", |r| {
            op_check(vec![uniform(r, &[5, 2], -1.0, 1.0)], r, &[3, 2], |v| {
                Ok(v[0].split(0, &[2, 3])?[1])
            })
        }),
        ("reshape", |r| {
            op_check(vec![uniform(r, &[2, 6], -1.0, 1.0)], r, &[3, 4], |v| {
                v[0].reshape(&[3, 4])
            })
        }),
        ("sum", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[], |v| Ok(v[0].sum()))
        }),
        ("mean", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[], |v| Ok(v[0].mean()))
        }),
        ("sum_axis", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[3], |v| v[0].sum_axis(1))
        }),
        ("mean_axis", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[4], |v| v[0].mean_axis(0))
        }),
        ("expand", |r| {
            op_check(vec![uniform(r, &[1], -1.0, 1.0)], r, &[3, 4], |v| v[0].expand(&[3, 4]))
        }),
        ("index", |r| {
            op_check(vec![uniform(r, &[3, 4], -1.0, 1.0)], r, &[], |v| v[0].index(5))
        }),
        ("gather_rows", |r| {
            op_check(vec![uniform(r, &[5, 3], -1.0, 1.0)], r, &[4, 3], |v| {
                v[0].gather_rows(&[4, 0, 4, 2])
            })
        }),
        ("upsample_nearest", |r| {
            op_check(vec![uniform(r, &[2, 3], -1.0, 1.0)], r, &[4, 6], |v| {
                v[0].upsample_nearest(2)
            })
        }),
        ("patchify", |r| {
            op_check(vec![uniform(r, &[4, 4, 2], -1.0, 1.0)], r, &[4, 8], |v| {
                v[0].patchify(2)
            })
        }),
        ("expand_channels", |r| {
            op_check(vec![uniform(r, &[3, 3], -1.0, 1.0)], r, &[3, 3, 2], |v| {
                v[0].expand_channels(2)
            })
        }),
        ("cross_entropy", |r| {
            let labels = [0, 5, 2, 2];
            grad_check_many(|v| v[0].cross_entropy(&labels), &[uniform(r, &[4, 6], -2.0, 2.0)], STEP).map(Some)
        }),
        ("rmse_loss", |r| {
            let i: Vec<Tensor> = (0..6).map(|_| uniform(r, &[4, 4], 0.0, 1.0)).collect();
            grad_check_many(
                |v| {
                    let p = MaskTriplet {
                        source: v[0],
                        tampered: v[1],
                        background: v[2],
                    };
                    let g = MaskTriplet {
                        source: v[3],
                        tampered: v[4],
                        background: v[5],
                    };
                    rmse_loss(&p, &g)
                },
                &i,
                STEP,
            )
            .map(Some)
        }),
        ("balance_loss", |r| {
            let i = vec![uniform(r, &[3, 6], 0.05, 1.0), uniform(r, &[6], 0.05, 1.0)];
            grad_check_many(|v| Ok(balance_loss(&[v[0], v[1]])?.loss), &i, STEP).map(Some)
        }),
        ("balance_cv", |r| {
            grad_check_many(|v| Ok(importance_stats(v[0])?.cv), &[uniform(r, &[6], 0.05, 1.0)], STEP).map(Some)
        }),
        ("top_k_softmax_fixed", |r| {
            let logits = uniform(r, &[3, 6], -2.0, 2.0);
            let fixed = vec![vec![0, 2, 3, 5], vec![1, 2, 4, 5], vec![0, 1, 2, 3]];
            op_check(vec![logits], r, &[3, 6], move |v| {
                Ok(top_k_softmax(v[0], 4, Some(&fixed))?.0)
            })
        }),
        ("total_loss", |r| {
            let i = vec![
                uniform(r, &[1], 0.0, 1.0),
                uniform(r, &[1], 0.0, 4.0),
                uniform(r, &[1], 0.0, 1.0),
            ];
            grad_check_many(|v| Ok(total_loss(v[0], v[1], v[2], 0.3)?.sum()), &i, STEP).map(Some)
        }),
        ("linear", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let layer = Linear::new(&mut store, "l", ParamGroup::Rest, 5, 3, &mut rng)?;
            randomize(&mut store, &mut rng);
            let (x, w) = (uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0));
            grad_check_params(
                &store,
                |s| weighted(s, layer.forward(s, s.constant(x.clone()))?, &w),
                STEP,
            )
            .map(smooth)
        }),
        ("ffn_stack", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let ffn = FfnStack::new(&mut store, "f", ParamGroup::Rest, &[6, 5, 5, 4], &mut rng)?;
            randomize(&mut store, &mut rng);
            let (x, w) = (uniform(r, &[3, 6], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0));
            grad_check_params(
                &store,
                |s| weighted(s, ffn.forward(s, s.constant(x.clone()))?, &w),
                STEP,
            )
            .map(smooth)
        }),
        ("ffn_softmax_cross_entropy", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let ffn = FfnStack::new(&mut store, "f", ParamGroup::Rest, &[6, 8, 8, 5], &mut rng)?;
            randomize(&mut store, &mut rng);
            let x = uniform(r, &[4, 6], -1.0, 1.0);
            grad_check_params(
                &store,
                |s| ffn.forward(s, s.constant(x.clone()))?.cross_entropy(&[1, 4, 0, 1]),
                STEP,
            )
            .map(smooth)
        }),
        ("cross_attention", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let att = CrossAttention::new(&mut store, "a", ParamGroup::Rest, 4, 6, 3, 5, &mut rng)?;
            let (q, kv) = (uniform(r, &[2, 4], -1.0, 1.0), uniform(r, &[7, 6], -1.0, 1.0));
            let w = uniform(r, &[2, 5], -1.0, 1.0);
            grad_check_params(
                &store,
                |s| weighted(s, att.forward(s, s.constant(q.clone()), s.constant(kv.clone()))?, &w),
                STEP,
            )
            .map(smooth)
        }),
        ("patch_embed", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let pe = PatchEmbed::new(&mut store, "p", ParamGroup::Rest, 2, 2, 3, &mut rng)?;
            randomize(&mut store, &mut rng);
            let (x, w) = (uniform(r, &[4, 4, 2], 0.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0));
            grad_check_params(&store, |s| weighted(s, pe.forward(s, s.constant(x.clone()))?, &w), STEP).map(smooth)
        }),
        ("text_encoder", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let enc = TextEncoder::new(&mut store, 9, 4, 5, &mut rng)?;
            randomize(&mut store, &mut rng);
            let w = uniform(r, &[4], -1.0, 1.0);
            grad_check_params(
                &store,
                |s| weighted(s, enc.encode_ids(s, &[3, 0, 7, 3, 2])?.pooled, &w),
                STEP,
            )
            .map(smooth)
        }),
        ("detector", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let det = Detector::new(&mut store, 3, 2, 4, &mut rng)?;
            randomize(&mut store, &mut rng);
            let x = uniform(r, &[4, 4, 3], 0.0, 1.0);
            let gt = random_masks(r, 4);
            grad_check_params(
                &store,
                |s| rmse_loss(&det.forward(s, s.constant(x.clone()))?, &gt.constants(s)),
                STEP,
            )
            .map(smooth)
        }),
        ("branch_encoder", |r| {
            let mut rng = seeded(r);
            let mut store = ParamStore::new();
            let enc = BranchEncoder::new(&mut store, 4, 3, 2, 4, 3, &mut rng)?;
            randomize(&mut store, &mut rng);
            let (x, w) = (uniform(r, &[4, 4, 3], 0.0, 1.0), uniform(r, &[2, 2, 3], -1.0, 1.0));
            grad_check_params(
                &store,
                |s| weighted(s, enc.forward(s, s.constant(x.clone()))?, &w),
                STEP,
            )
            .map(smooth)
        }),
        ("mixture_multi_level", |r| {
            mixture_check(r, Structure::MultiLevel, GatingModality::Multimodal)
        }),
        ("mixture_multi_view", |r| {
            mixture_check(r, Structure::MultiView, GatingModality::Multimodal)
        }),
        ("mixture_visual_gate", |r| {
            mixture_check(r, Structure::MultiLevel, GatingModality::VisualOnly)
        }),
        ("mixture_text_gate", |r| {
            mixture_check(r, Structure::MultiLevel, GatingModality::TextOnly)
        }),
        ("full_model", full_model_check),
    ]
}

/// Replaces every parameter (biases included) with fresh uniform values, so checks do
/// not run at the all-zero bias initialization.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

fn random_masks(rng: &mut ChaCha8Rng, size: usize) -> MaskTriplet {
    MaskTriplet {
        source: uniform(rng, &[size, size], 0.0, 1.0),
        tampered: uniform(rng, &[size, size], 0.0, 1.0),
        background: uniform(rng, &[size, size], 0.0, 1.0),
    }
}

/// Pins the higher-ranked signature of a loss closure that also reports its routing.
fn routed<F>(f: F) -> F
where
    F: for<'t> Fn(&Session<'t>, Option<&[Vec<usize>]>) -> Result<(Var<'t>, Vec<Vec<usize>>)>,
{
    f
}

/// Fusion, gating, expert combination, answer head, cross-entropy and balance loss with
/// routing frozen at the selection of the unperturbed parameters.
fn mixture_check(r: &mut ChaCha8Rng, structure: Structure, gating_modality: GatingModality) -> Result<Option<f64>> {
    let mut rng = seeded(r);
    let cfg = MoeConfig {
        n_experts: 6,
        top_k: 3,
        expert_depth: 3,
        structure,
        gating_modality,
        view_arity: 2,
    };
    let dims = MoeDims {
        c_b: 2,
        fusion_hidden: 4,
        c: 3,
        d_text: 3,
        d_att: 3,
        expert_hidden: 3,
        d_out: 3,
    };
    let mut store = ParamStore::new();
    let moe = MoeLayer::new(&mut store, cfg, dims, &mut rng)?;
    let head = AnswerHead::new(&mut store, dims.d_out, dims.d_text, 4, 5, &mut rng)?;
    randomize(&mut store, &mut rng);
    let branches: Vec<Tensor> = (0..4).map(|_| uniform(r, &[2, 2, dims.c_b], -1.0, 1.0)).collect();
    let text = uniform(r, &[2, dims.d_text], -1.0, 1.0);
    let labels = [r.gen_range(0..5), r.gen_range(0..5)];
    let forward = routed(|s, fixed| {
        let c = |i: usize| s.constant(branches[i].clone());
        let h = HierarchicalFeatures {
            original: c(0),
            source: c(1),
            background: c(2),
            tamper: c(3),
        };
        let t = s.constant(text.clone());
        let out = moe.forward(s, &h, t, fixed)?;
        let ce = head.forward(s, out.output, t)?.cross_entropy(&labels)?;
        let balance = balance_loss(&[out.weights])?.loss;
        Ok((ce.add(balance)?, out.selected))
    });
    let selected = {
        let tape = crate::tensor::Tape::new();
        forward(&Session::inference(&tape, &store), None)?.1
    };
    grad_check_params(&store, |s| Ok(forward(s, Some(&selected))?.0), STEP).map(smooth)
}

/// Every parameter of a miniature model under the training loss, routing frozen.
fn full_model_check(r: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let dims = ModelDims {
        detector_patch: 2,
        detector_hidden: 3,
        branch_patch: 2,
        branch_hidden: 3,
        c_b: 2,
        fusion_hidden: 3,
        c: 3,
        d_text: 2,
        text_hidden: 2,
        d_att: 2,
        expert_hidden: 2,
        d_out: 2,
        answer_hidden: 3,
    };
    let moe = MoeConfig {
        n_experts: 4,
        top_k: 2,
        ..MoeConfig::default()
    };
    let (model, mut store) = Model::new(4, dims, moe, r.gen())?;
    randomize(&mut store, &mut seeded(r));
    let image = uniform(r, &[4, 4, 3], 0.0, 1.0);
    let gt = random_masks(r, 4);
    let categories = [1, 7, 12];
    let labels = [r.gen_range(0..50), r.gen_range(0..50), r.gen_range(0..50)];
    let input = ImageInput {
        image: &image,
        masks: None,
        categories: &categories,
    };
    let forward = routed(|s, fixed| {
        let table = model.question_table(s)?;
        let out = model.forward_image(s, table, &input, fixed)?;
        let rmse = rmse_loss(&out.masks, &gt.constants(s))?;
        let ce = out.logits.cross_entropy(&labels)?;
        let balance = balance_loss(&[out.moe.weights])?.loss;
        Ok((total_loss(rmse, ce, balance, 0.3)?, out.moe.selected))
    });
    let selected = {
        let tape = crate::tensor::Tape::new();
        forward(&Session::inference(&tape, &store), None)?.1
    };
    grad_check_params(&store, |s| Ok(forward(s, Some(&selected))?.0), STEP).map(smooth)
}

/// Names of all registered checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

/// Runs every registered check on `instances` random instances drawn from `seed`.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    registry()
        .into_iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut worst = 0.0f64;
            let (mut accepted, mut redrawn) = (0, 0);
            while accepted < instances {
                match check(&mut rng)? {
                    Some(error) => {
                        worst = worst.max(error);
                        accepted += 1;
                    }
                    None if redrawn < MAX_DRAWS_PER_INSTANCE * instances => redrawn += 1,
                    None => {
                        return Err(Error::Contract(format!(
                            "gradient check {name}: every draw lands within a step of a kink"
                        )))
                    }
                }
            }
            Ok(CheckOutcome {
                name,
                instances,
                redrawn,
                max_error: worst,
            })
        })
        .collect()
}
