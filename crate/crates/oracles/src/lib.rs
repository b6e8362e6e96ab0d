//! Independent reference implementations used to check the `cmvqa` library: scalar-loop
//! losses and softmax, a brute-force expert mixture, and dataset integrity checks.

// Oracles are written as plain index loops on purpose.
#![allow(clippy::needless_range_loop)]

use cmvqa::detector::HierarchicalFeatures;
use cmvqa::detector::{rmse_loss_batch, MaskTriplet};
use cmvqa::mmoe::balance_loss;
use cmvqa::mmoe::CV_MEAN_FLOOR;
use cmvqa::mmoe::{branch_combinations, GatingModality, MoeConfig, MoeDims, MoeLayer, Structure};
use cmvqa::nn::ParamStore;
use cmvqa::nn::Session;
use cmvqa::synth::{answer_oracle, generate_sample, Dataset, SampleRecord, TamperSpec};
use cmvqa::Tape;
use cmvqa::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sqrt(Σ (p − g)² / count)` over every pixel of every mask pair.
pub fn rmse_oracle(pairs: &[(&[f64], &[f64])]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, g) in pairs {
        for i in 0..p.len() {
            let d = p[i] - g[i];
            sum += d * d;
            count += 1;
        }
    }
    (sum / count as f64).sqrt()
}

/// Mean over rows of `log Σ exp(x) − x[label]`, stabilized by the row maximum.
pub fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        total += m + z.ln() - row[label];
    }
    total / logits.len() as f64
}

/// Squared coefficient of variation of the column sums of `rows` (population std).
pub fn balance_oracle(rows: &[Vec<f64>]) -> f64 {
    let n = rows[0].len();
    let mut importance = vec![0.0; n];
    for row in rows {
        for (acc, &w) in importance.iter_mut().zip(row) {
            *acc += w;
        }
    }
    importance_oracle(&importance)
}

pub fn importance_oracle(importance: &[f64]) -> f64 {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    let var = importance.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = mean.max(CV_MEAN_FLOOR);
    var / (denom * denom)
}

pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `x·W + b` with a ReLU before every layer but the first, read straight from `store`.
pub fn ffn_oracle(store: &ParamStore, name: &str, depth: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in 0..depth {
        if layer > 0 {
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let w = store.value(store.find(&format!("{name}.{layer}.weight")).expect("weight"));
        let b = store.value(store.find(&format!("{name}.{layer}.bias")).expect("bias"));
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(rows, h.len());
        let mut out = b.data().to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            for (i, hv) in h.iter().enumerate() {
                *o += hv * w.data()[i * cols + j];
            }
        }
        h = out;
    }
    h
}

/// Result of one random expert-combination configuration.
pub struct ExpertCase {
    /// Largest absolute difference between `run_experts` and the brute-force sum.
    pub max_diff: f64,
    /// Parameters of experts no question selected that got a nonzero gradient.
    pub leaked_grads: usize,
    /// Parameters of selected experts that got no gradient at all.
    pub missing_grads: usize,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Builds a random mixture, runs it, and compares against `Σ_i w_i · E_i(x_i)` summed over
/// every expert with scalar loops.
pub fn expert_case(seed: u64, structure: Structure) -> ExpertCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_experts, view_arity) = match structure {
        Structure::MultiLevel => (rng.gen_range(2..9), 2),
        Structure::MultiView => {
            let arity = rng.gen_range(1..4);
            (binomial(4, arity), arity)
        }
    };
    let cfg = MoeConfig {
        n_experts,
        top_k: rng.gen_range(1..=n_experts),
        expert_depth: rng.gen_range(1..4),
        structure,
        gating_modality: GatingModality::Multimodal,
        view_arity,
    };
    let dims = MoeDims {
        c_b: rng.gen_range(2..5),
        fusion_hidden: rng.gen_range(2..6),
        c: rng.gen_range(2..6),
        d_text: rng.gen_range(2..5),
        d_att: rng.gen_range(2..5),
        expert_hidden: rng.gen_range(2..6),
        d_out: rng.gen_range(1..5),
    };
    let mut store = ParamStore::new();
    let moe = MoeLayer::new(&mut store, cfg, dims, &mut rng).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let g = rng.gen_range(1..4);
    let branches: Vec<Tensor> = (0..4)
        .map(|_| uniform(&mut rng, &[g, g, dims.c_b], -1.0, 1.0))
        .collect();
    let n_q = rng.gen_range(1..5);
    let text = uniform(&mut rng, &[n_q, dims.d_text], -1.0, 1.0);

    let tape = Tape::new();
    let s = Session::new(&tape, &store);
    let h = HierarchicalFeatures {
        original: s.constant(branches[0].clone()),
        source: s.constant(branches[1].clone()),
        background: s.constant(branches[2].clone()),
        tamper: s.constant(branches[3].clone()),
    };
    let out = moe.forward(&s, &h, s.constant(text), None).unwrap();
    let fv = moe.fuse(&s, &h).unwrap().value();

    let pooled = |rows: &[f64], width: usize| -> Vec<f64> {
        let n = rows.len() / width;
        (0..width)
            .map(|j| (0..n).map(|r| rows[r * width + j]).sum::<f64>() / n as f64)
            .collect()
    };
    let inputs: Vec<Vec<f64>> = match structure {
        Structure::MultiLevel => vec![pooled(fv.data(), dims.c); n_experts],
        Structure::MultiView => {
            let per: Vec<Vec<f64>> = branches.iter().map(|b| pooled(b.data(), dims.c_b)).collect();
            branch_combinations(view_arity)
                .iter()
                .map(|combo| combo.iter().flat_map(|&b| per[b].clone()).collect())
                .collect()
        }
    };
    let expert_out: Vec<Vec<f64>> = (0..n_experts)
        .map(|i| ffn_oracle(&store, &format!("expert.{i}"), cfg.expert_depth, &inputs[i]))
        .collect();
    let weights = out.weights.value();
    let got = out.output.value();
    let mut max_diff = 0.0f64;
    for r in 0..n_q {
        for j in 0..dims.d_out {
            let want: f64 = (0..n_experts)
                .map(|i| weights.data()[r * n_experts + i] * expert_out[i][j])
                .sum();
            max_diff = max_diff.max((got.data()[r * dims.d_out + j] - want).abs());
        }
    }

    let r = uniform(&mut rng, &[n_q, dims.d_out], 0.5, 1.5);
    let loss = out.output.mul(s.constant(r)).unwrap().sum();
    tape.backward(loss).unwrap();
    let grads = s.grads();
    let used: Vec<bool> = (0..n_experts)
        .map(|i| out.selected.iter().any(|sel| sel.contains(&i)))
        .collect();
    let (mut leaked_grads, mut missing_grads) = (0, 0);
    for (id, param) in store.iter() {
        let Some(rest) = param.name.strip_prefix("expert.") else {
            continue;
        };
        let expert: usize = rest.split('.').next().unwrap().parse().unwrap();
        let grad = &grads[id.index()];
        let nonzero = grad.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        if used[expert] {
            missing_grads += usize::from(grad.is_none());
        } else {
            leaked_grads += usize::from(nonzero);
        }
    }
    ExpertCase {
        max_diff,
        leaked_grads,
        missing_grads,
    }
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Every integrity violation of one sample, as readable messages.
pub fn sample_violations(s: &SampleRecord) -> Vec<String> {
    let mut out = Vec::new();
    let size = s.scene.size;
    let m = &s.masks;
    for i in 0..size * size {
        let parts = [m.source.data()[i], m.tampered.data()[i], m.background.data()[i]];
        if parts.iter().any(|&v| v != 0.0 && v != 1.0) || parts.iter().sum::<f64>() != 1.0 {
            out.push(format!("sample {}: masks do not partition pixel {i}", s.id));
            break;
        }
    }
    for q in &s.qa {
        match answer_oracle(&s.scene, &s.tamper, q.category) {
            Ok(a) if a == q.answer_id => {}
            other => out.push(format!(
                "sample {} Q{}: stored {} oracle {other:?}",
                s.id, q.category, q.answer_id
            )),
        }
    }
    let zone_at = |x: usize, y: usize| s.scene.zones.zone_at(x, y, size);
    for (k, o) in s.scene.objects.iter().enumerate() {
        if zone_at(o.center[0], o.center[1]) != o.zone || !o.category.allowed_on(o.zone) {
            out.push(format!("sample {} object {k}: illegal zone", s.id));
        }
        match o.footprint(size) {
            Some(fp) if fp.iter().all(|&(x, y, _)| o.category.allowed_on(zone_at(x, y))) => {}
            _ => out.push(format!("sample {} object {k}: footprint leaves its legal zones", s.id)),
        }
    }
    if let TamperSpec::CopyMove { source_object, .. } = s.tamper {
        let category = s.scene.objects[source_object].category;
        for i in 0..size * size {
            if m.tampered.data()[i] == 1.0 && !category.allowed_on(zone_at(i % size, i / size)) {
                out.push(format!(
                    "sample {}: pasted {} on an illegal zone",
                    s.id,
                    category.name()
                ));
                break;
            }
        }
    }
    out
}

/// Whether regenerating every sample from its manifest seed reproduces it bit for bit.
pub fn regeneration_mismatches(d: &Dataset) -> Vec<usize> {
    d.manifest
        .samples
        .iter()
        .filter(|e| {
            let fresh = generate_sample(e.id, e.seed, e.tampered, d.manifest.image_size).unwrap();
            let s = &d.samples[e.id];
            !(same_bits(&fresh.image, &s.image)
                && same_bits(&fresh.masks.source, &s.masks.source)
                && same_bits(&fresh.masks.tampered, &s.masks.tampered)
                && same_bits(&fresh.masks.background, &s.masks.background)
                && fresh.scene == s.scene
                && fresh.tamper == s.tamper
                && fresh.qa == s.qa)
        })
        .map(|e| e.id)
        .collect()
}

pub fn triplet(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskTriplet {
    MaskTriplet {
        source: uniform(rng, &[h, w], 0.0, 1.0),
        tampered: uniform(rng, &[h, w], 0.0, 1.0),
        background: uniform(rng, &[h, w], 0.0, 1.0),
    }
}

pub fn on<'t>(tape: &'t Tape, m: &MaskTriplet) -> MaskTriplet<cmvqa::Var<'t>> {
    MaskTriplet {
        source: tape.constant(m.source.clone()),
        tampered: tape.constant(m.tampered.clone()),
        background: tape.constant(m.background.clone()),
    }
}

fn parts(m: &MaskTriplet) -> [&[f64]; 3] {
    [m.source.data(), m.tampered.data(), m.background.data()]
}

/// `(library, oracle)` mask RMSE of a random batch of random size.
pub fn rmse_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
    let batch = rng.gen_range(1..4);
    let preds: Vec<MaskTriplet> = (0..batch).map(|_| triplet(rng, h, w)).collect();
    let gts: Vec<MaskTriplet> = (0..batch).map(|_| triplet(rng, h, w)).collect();
    let tape = Tape::new();
    let pv: Vec<_> = preds.iter().map(|m| on(&tape, m)).collect();
    let gv: Vec<_> = gts.iter().map(|m| on(&tape, m)).collect();
    let pairs: Vec<_> = pv.iter().zip(&gv).collect();
    let got = rmse_loss_batch(&pairs).unwrap().item();
    let flat: Vec<(&[f64], &[f64])> = preds
        .iter()
        .zip(&gts)
        .flat_map(|(p, g)| parts(p).into_iter().zip(parts(g)))
        .collect();
    (got, rmse_oracle(&flat))
}

/// `(library, oracle)` cross-entropy of random logits over 50 answers.
pub fn ce_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let rows = rng.gen_range(1..6);
    let logits: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..50).map(|_| rng.gen_range(-10.0..10.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..50)).collect();
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![rows, 50], logits.concat()).unwrap());
    (x.cross_entropy(&labels).unwrap().item(), ce_oracle(&logits, &labels))
}

/// `(library, oracle)` balance loss of random gate weights over several images.
pub fn balance_case(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = rng.gen_range(2..9);
    let images = rng.gen_range(1..4);
    let mats: Vec<Vec<Vec<f64>>> = (0..images)
        .map(|_| {
            (0..rng.gen_range(1..5))
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect()
        })
        .collect();
    let tape = Tape::new();
    let vars: Vec<_> = mats
        .iter()
        .map(|m| tape.constant(Tensor::new(vec![m.len(), n], m.concat()).unwrap()))
        .collect();
    (balance_loss(&vars).unwrap().loss.item(), balance_oracle(&mats.concat()))
}
