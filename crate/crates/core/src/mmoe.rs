//! Multimodal gated mixture of experts: hierarchical fusion, cross-attention gating with
//! top-K routing, weighted expert combination, and the importance balance loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::HierarchicalFeatures;
use crate::error::{Error, Result};
use crate::nn::{init_bound, CrossAttention, FfnStack, Linear, ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Floor on the mean importance in the coefficient of variation.
pub const CV_MEAN_FLOOR: f64 = 1e-8;
const BRANCHES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// Every expert reads the pooled fused feature.
    MultiLevel,
    /// Each expert reads its own combination of branches.
    MultiView,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingModality {
    Multimodal,
    VisualOnly,
    TextOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_depth: usize,
    pub structure: Structure,
    pub gating_modality: GatingModality,
    /// Branches per expert in the multi-view structure.
    pub view_arity: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            n_experts: 6,
            top_k: 4,
            expert_depth: 3,
            structure: Structure::MultiLevel,
            gating_modality: GatingModality::Multimodal,
            view_arity: 2,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// All `arity`-element subsets of the four branches in lexicographic order.
pub fn branch_combinations(arity: usize) -> Vec<Vec<usize>> {
    fn walk(start: usize, arity: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == arity {
            out.push(cur.clone());
            return;
        }
        for b in start..BRANCHES {
            cur.push(b);
            walk(b + 1, arity, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    walk(0, arity, &mut Vec::new(), &mut out);
    out
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= K <= N, got K={} N={}",
                self.top_k, self.n_experts
            )));
        }
        if self.expert_depth == 0 {
            return Err(Error::Config("expert_depth must be at least 1".into()));
        }
        if self.structure == Structure::MultiView {
            let expected = binomial(BRANCHES, self.view_arity);
            if self.view_arity == 0 || self.view_arity > BRANCHES || self.n_experts != expected {
                return Err(Error::Config(format!(
                    "multi-view with arity {} needs {} experts, got {}",
                    self.view_arity, expected, self.n_experts
                )));
            }
        }
        Ok(())
    }
}

/// Routing of one question: raw logits, chosen experts, and sparse normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingDecision {
    pub raw_scores: Tensor,
    /// Ascending expert indices.
    pub selected: Vec<usize>,
    pub weights: Tensor,
}

/// Indices of the `k` largest logits, lowest index first among ties, returned ascending.
pub fn select_top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut chosen = order[..k.min(order.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Keeps the selected logits of each row of `[rows, N]`, sends the rest to −∞, and
/// applies a row softmax. `fixed` replaces the top-K choice when given.
pub fn top_k_softmax<'t>(
    logits: Var<'t>,
    k: usize,
    fixed: Option<&[Vec<usize>]>,
) -> Result<(Var<'t>, Vec<Vec<usize>>)> {
    let shape = logits.shape();
    let (rows, n) = match *shape {
        [r, n] => (r, n),
        ref s => return Err(Error::dim("top_k_softmax", s, &[0, 0])),
    };
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k {k} outside 1..={n}")));
    }
    let values = logits.value();
    let selected: Vec<Vec<usize>> = match fixed {
        Some(sel) => {
            if sel.len() != rows || sel.iter().any(|s| s.iter().any(|&i| i >= n) || s.is_empty()) {
                return Err(Error::Contract("fixed routing does not match the logits".into()));
            }
            sel.to_vec()
        }
        None => (0..rows).map(|r| select_top_k(values.row(r), k)).collect(),
    };
    let mut keep = vec![false; rows * n];
    for (r, sel) in selected.iter().enumerate() {
        for &i in sel {
            keep[r * n + i] = true;
        }
    }
    Ok((logits.mask_fill(&keep)?.softmax(1)?, selected))
}

/// Gate scores from attention of the question over the visual tokens.
#[derive(Clone, Debug)]
pub struct GatingNetwork {
    att: Option<CrossAttention>,
    pub w_m: ParamId,
    modality: GatingModality,
}

impl GatingNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        modality: GatingModality,
        d_text: usize,
        c: usize,
        d_att: usize,
        n_experts: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Rest;
        let (att, d_in) = match modality {
            GatingModality::TextOnly => (None, d_text),
            _ => (
                Some(CrossAttention::new(store, "gate.att", g, d_text, c, d_att, d_att, rng)?),
                d_att,
            ),
        };
        let w_m = store.add_uniform("gate.w_m", g, &[d_in, n_experts], init_bound(d_in), rng)?;
        Ok(GatingNetwork { att, w_m, modality })
    }

    /// Expert logits `[n_q, N]` for `[n_q, d_text]` question rows against `[n, C]` tokens.
    pub fn logits<'t>(&self, s: &Session<'t>, fv: Var<'t>, text: Var<'t>) -> Result<Var<'t>> {
        let n_q = text.shape()[0];
        let features = match (self.modality, &self.att) {
            (GatingModality::Multimodal, Some(att)) => {
                let (k, v) = att.project_kv(s, fv)?;
                att.attend(s, text, k, v)?
            }
            (GatingModality::VisualOnly, Some(att)) => {
                // uniform attention: the mean value row, the same for every question
                let (_, v) = att.project_kv(s, fv)?;
                let d = att.d_v();
                let mean = v.mean_axis(0)?.reshape(&[1, d])?;
                Var::concat(&vec![mean; n_q], 0)?
            }
            _ => text,
        };
        features.matmul(s.param(self.w_m))
    }
}

/// Per-image outputs of the mixture.
pub struct MoeOutput<'t> {
    /// `[n_q, N]` raw gate scores.
    pub logits: Var<'t>,
    /// `[n_q, N]` sparse gate weights.
    pub weights: Var<'t>,
    pub selected: Vec<Vec<usize>>,
    /// `[n_q, d_out]` combined expert outputs.
    pub output: Var<'t>,
}

impl MoeOutput<'_> {
    pub fn decisions(&self) -> Vec<GatingDecision> {
        let (raw, w) = (self.logits.value(), self.weights.value());
        self.selected
            .iter()
            .enumerate()
            .map(|(r, sel)| GatingDecision {
                raw_scores: Tensor::vector(raw.row(r).to_vec()),
                selected: sel.clone(),
                weights: Tensor::vector(w.row(r).to_vec()),
            })
            .collect()
    }
}

/// Fusion FFN, gate and experts.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    cfg: MoeConfig,
    fusion: FfnStack,
    gate: GatingNetwork,
    experts: Vec<FfnStack>,
    views: Vec<Vec<usize>>,
}

/// Layer widths of the mixture.
#[derive(Clone, Copy, Debug)]
pub struct MoeDims {
    pub c_b: usize,
    pub fusion_hidden: usize,
    pub c: usize,
    pub d_text: usize,
    pub d_att: usize,
    pub expert_hidden: usize,
    pub d_out: usize,
}

impl MoeLayer {
    pub fn new(store: &mut ParamStore, cfg: MoeConfig, dims: MoeDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Rest;
        let fusion = FfnStack::new(
            store,
            "fusion",
            g,
            &[BRANCHES * dims.c_b, dims.fusion_hidden, dims.c],
            rng,
        )?;
        let gate = GatingNetwork::new(
            store,
            cfg.gating_modality,
            dims.d_text,
            dims.c,
            dims.d_att,
            cfg.n_experts,
            rng,
        )?;
        let (views, d_in) = match cfg.structure {
            Structure::MultiLevel => (Vec::new(), dims.c),
            Structure::MultiView => (branch_combinations(cfg.view_arity), cfg.view_arity * dims.c_b),
        };
        let mut expert_dims = vec![d_in];
        expert_dims.extend(std::iter::repeat_n(dims.expert_hidden, cfg.expert_depth - 1));
        expert_dims.push(dims.d_out);
        let experts = (0..cfg.n_experts)
            .map(|i| FfnStack::new(store, &format!("expert.{i}"), g, &expert_dims, rng))
            .collect::<Result<_>>()?;
        Ok(MoeLayer {
            cfg,
            fusion,
            gate,
            experts,
            views,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    pub fn experts(&self) -> &[FfnStack] {
        &self.experts
    }

    pub fn views(&self) -> &[Vec<usize>] {
        &self.views
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].out_dim()
    }

    /// Channel concatenation of the four branches, flattened to tokens and passed through
    /// the fusion FFN: `[h'·w', C]`.
    pub fn fuse<'t>(&self, s: &Session<'t>, h: &HierarchicalFeatures<'t>) -> Result<Var<'t>> {
        let shape = h.original.shape();
        for b in h.branches() {
            if b.shape() != shape {
                return Err(Error::dim("fuse", &shape, &b.shape()));
            }
        }
        let cat = Var::concat(&h.branches(), 2)?;
        let tokens = shape[0] * shape[1];
        self.fusion.forward(s, cat.reshape(&[tokens, BRANCHES * shape[2]])?)
    }

    /// `[1, d_in]` input of each expert: the pooled fused feature, or pooled branches.
    pub fn expert_inputs<'t>(&self, fv: Var<'t>, h: &HierarchicalFeatures<'t>) -> Result<Vec<Var<'t>>> {
        match self.cfg.structure {
            Structure::MultiLevel => {
                let c = fv.shape()[1];
                let pooled = fv.mean_axis(0)?.reshape(&[1, c])?;
                Ok(vec![pooled; self.cfg.n_experts])
            }
            Structure::MultiView => {
                let pooled = h
                    .branches()
                    .iter()
                    .map(|b| {
                        let s = b.shape();
                        b.reshape(&[s[0] * s[1], s[2]])?.mean_axis(0)?.reshape(&[1, s[2]])
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.views
                    .iter()
                    .map(|combo| {
                        let parts: Vec<Var> = combo.iter().map(|&b| pooled[b]).collect();
                        Var::concat(&parts, 1)
                    })
                    .collect()
            }
        }
    }

    /// Σ over selected experts of weight · expert output, per question row.
    ///
    /// Each expert runs at most once per call and only if some row selected it; the sum
    /// for each row runs over ascending expert index.
    pub fn run_experts<'t>(
        &self,
        s: &Session<'t>,
        inputs: &[Var<'t>],
        weights: Var<'t>,
        selected: &[Vec<usize>],
    ) -> Result<Var<'t>> {
        let n = self.cfg.n_experts;
        if inputs.len() != n || weights.shape().get(1) != Some(&n) {
            return Err(Error::Config(format!(
                "{} expert inputs and weights {:?} for {n} experts",
                inputs.len(),
                weights.shape()
            )));
        }
        let mut outputs: Vec<Option<Var<'t>>> = vec![None; n];
        let mut rows = Vec::with_capacity(selected.len());
        for (r, sel) in selected.iter().enumerate() {
            let mut acc: Option<Var<'t>> = None;
            for &i in sel {
                let out = match outputs[i] {
                    Some(o) => o,
                    None => {
                        let o = self.experts[i].forward(s, inputs[i])?;
                        outputs[i] = Some(o);
                        o
                    }
                };
                let term = out.scale_by(weights.index(r * n + i)?)?;
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            rows.push(acc.ok_or_else(|| Error::Contract("a question selected no expert".into()))?);
        }
        Var::concat(&rows, 0)
    }

    /// Fusion, gating and expert combination for one image and its questions.
    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        h: &HierarchicalFeatures<'t>,
        text: Var<'t>,
        fixed_routing: Option<&[Vec<usize>]>,
    ) -> Result<MoeOutput<'t>> {
        let fv = self.fuse(s, h)?;
        let logits = self.gate.logits(s, fv, text)?;
        let (weights, selected) = top_k_softmax(logits, self.cfg.top_k, fixed_routing)?;
        let inputs = self.expert_inputs(fv, h)?;
        let output = self.run_experts(s, &inputs, weights, &selected)?;
        Ok(MoeOutput {
            logits,
            weights,
            selected,
            output,
        })
    }
}

/// Importance, coefficient of variation and balance loss of a batch of routings.
pub struct BalanceStats<'t> {
    pub importance: Var<'t>,
    pub cv: Var<'t>,
    pub loss: Var<'t>,
}

/// `importance_i = Σ` gate weight of expert `i` over every routed row;
/// `loss = (population std / max(mean, floor))²`.
pub fn balance_loss<'t>(weights: &[Var<'t>]) -> Result<BalanceStats<'t>> {
    let mut importance: Option<Var<'t>> = None;
    for w in weights {
        let per = if w.shape().len() == 2 { w.sum_axis(0)? } else { *w };
        importance = Some(match importance {
            Some(acc) => acc.add(per)?,
            None => per,
        });
    }
    let importance = importance.ok_or_else(|| Error::Contract("balance loss of an empty batch".into()))?;
    importance_stats(importance)
}

/// Balance statistics of a given importance vector.
pub fn importance_stats(importance: Var<'_>) -> Result<BalanceStats<'_>> {
    let n = importance.len();
    let mean = importance.mean();
    let centered = importance.sub(mean.expand(&[n])?)?;
    let variance = centered.square().mean();
    let denom = mean.clamp_min(CV_MEAN_FLOOR);
    let loss = variance.div(denom.square())?;
    let cv = variance.sqrt().div(denom)?;
    Ok(BalanceStats { importance, cv, loss })
}

/// Question-conditioned answer classifier: the mixture output and the pooled question pass
/// through a shared hidden layer, then a linear map onto the answer set.
#[derive(Clone, Debug)]
pub struct AnswerHead {
    condition: Linear,
    pub head: Linear,
}

impl AnswerHead {
    pub fn new(
        store: &mut ParamStore,
        d_out: usize,
        d_text: usize,
        hidden: usize,
        n_answers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Rest;
        Ok(AnswerHead {
            condition: Linear::new(store, "answer.condition", g, d_out + d_text, hidden, rng)?,
            head: Linear::new(store, "answer.head", g, hidden, n_answers, rng)?,
        })
    }

    /// Logits `[n_q, n_answers]`.
    pub fn forward<'t>(&self, s: &Session<'t>, moe_out: Var<'t>, text: Var<'t>) -> Result<Var<'t>> {
        let joint = Var::concat(&[moe_out, text], 1)?;
        let hidden = self.condition.forward(s, joint)?.relu();
        self.head.forward(s, hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn combinations() {
        assert_eq!(branch_combinations(2).len(), 6);
        assert_eq!(branch_combinations(2)[0], vec![0, 1]);
        assert_eq!(branch_combinations(2)[5], vec![2, 3]);
        assert_eq!(branch_combinations(1).len(), 4);
        assert_eq!(binomial(4, 2), 6);
    }

    #[test]
    fn config_validation() {
        assert!(MoeConfig::default().validate().is_ok());
        let bad_k = MoeConfig {
            top_k: 7,
            ..MoeConfig::default()
        };
        assert!(matches!(bad_k.validate(), Err(Error::Config(_))));
        let mv = MoeConfig {
            structure: Structure::MultiView,
            ..MoeConfig::default()
        };
        assert!(mv.validate().is_ok());
        let mv4 = MoeConfig {
            n_experts: 4,
            top_k: 2,
            ..mv
        };
        assert!(mv4.validate().is_err());
        assert!(MoeConfig { view_arity: 1, ..mv4 }.validate().is_ok());
    }

    #[test]
    fn top_k_examples() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![1, 6], vec![3.0, 1.0, 2.0, 0.0, -1.0, -2.0]).unwrap());
        let (w, sel) = top_k_softmax(l, 2, None).unwrap();
        assert_eq!(sel, vec![vec![0, 2]]);
        let w = w.value();
        let oracle = 3f64.exp() / (3f64.exp() + 2f64.exp());
        assert!((w.data()[0] - oracle).abs() < 1e-15);
        assert!((w.data()[2] - (1.0 - oracle)).abs() < 1e-15);
        assert_eq!(w.data().iter().filter(|&&x| x > 0.0).count(), 2);

        let eq = tape.constant(Tensor::zeros(&[1, 6]));
        let (w, sel) = top_k_softmax(eq, 4, None).unwrap();
        assert_eq!(sel, vec![vec![0, 1, 2, 3]]);
        assert_eq!(&w.value().data()[..4], &[0.25; 4]);
        assert!(top_k_softmax(eq, 7, None).is_err());
    }

    #[test]
    fn balance_examples() {
        let tape = Tape::new();
        let stats = |v: Vec<f64>| {
            let s = importance_stats(tape.constant(Tensor::vector(v))).unwrap();
            (s.cv.item(), s.loss.item())
        };
        assert_eq!(stats(vec![1.0; 4]), (0.0, 0.0));
        let (cv, loss) = stats(vec![2.0, 0.0, 0.0, 0.0]);
        assert!((cv - 3f64.sqrt()).abs() < 1e-12);
        assert!((loss - 3.0).abs() < 1e-9);
        let (_, a) = stats(vec![0.3, 1.2, 0.7, 2.0]);
        let (_, b) = stats(vec![0.3 * 5.5, 1.2 * 5.5, 0.7 * 5.5, 2.0 * 5.5]);
        assert!((a - b).abs() < 1e-12);
    }
}
