//! Parameters, layers, optimizers and checkpoints.

mod checkpoint;
mod layers;
mod optim;

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{CrossAttention, FfnStack, Linear, PatchEmbed};
pub use optim::{sgd_step, CosineSchedule, Optimizer, OptimizerKind, SgdConfig};

/// Parameters are split into two groups that get separate learning rates and can be
/// frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Detector,
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, group, value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// FNV-1a over names and value bits of one group, for cheap change detection.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.group == group) {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Replaces every value from named records; names, order and shapes must match exactly.
    pub fn load_values(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(records) {
            if p.name != name {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} found where {} was expected",
                    p.name
                )));
            }
            if p.value.shape() != value.shape() {
                return Err(Error::dim("load checkpoint", p.value.shape(), value.shape()));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Binds parameters to one tape for one forward/backward pass.
///
/// Parameters enter the tape lazily on first use. Members of frozen groups enter as
/// constants, so no gradient is ever computed for them.
pub struct Session<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    frozen: Vec<ParamGroup>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_frozen(tape, store, &[])
    }

    pub fn with_frozen(tape: &'t Tape, store: &'t ParamStore, frozen: &[ParamGroup]) -> Self {
        Session {
            tape,
            store,
            frozen: frozen.to_vec(),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Every parameter constant: for evaluation.
    pub fn inference(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_frozen(tape, store, &[ParamGroup::Detector, ParamGroup::Rest])
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.frozen.contains(&p.group) {
            self.tape.constant(p.value.clone())
        } else {
            self.tape.leaf(p.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradient of every parameter after `backward`; `None` for parameters that were
    /// unused, frozen, or received no gradient.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.bound.borrow().iter().map(|b| b.and_then(|v| v.grad())).collect()
    }
}

/// Symmetric uniform bound `sqrt(6 / fan_in)` for weights feeding a ReLU: keeps the
/// activation scale roughly constant through deep stacks.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Outcome of a parameter gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCheck {
    /// Worst relative error over coordinates where the function is smooth at the step scale.
    pub max_error: f64,
    /// Coordinates whose central differences at `h` and `h / 2` disagree, i.e. a ReLU
    /// or top-K kink lies within one step of the point.
    pub kinks: usize,
}

/// Compares tape gradients of every parameter in `store` against central differences.
///
/// Where a coordinate disagrees with its analytic gradient, the difference is repeated at
/// half the step; if the two estimates disagree with each other the function is not
/// smooth there and the coordinate is reported as a kink instead of an error.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<ParamCheck>
where
    F: for<'t> Fn(&Session<'t>) -> Result<Var<'t>>,
{
    let grads = {
        let tape = Tape::new();
        let s = Session::new(&tape, store);
        let out = f(&s)?;
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        tape.backward(out)?;
        s.grads()
    };
    let eval = |point: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let s = Session::inference(&tape, point);
        Ok(f(&s)?.item())
    };
    let mut point = store.clone();
    let mut central = |id: ParamId, i: usize, step: f64| -> Result<f64> {
        let original = point.value(id).data()[i];
        point.value_mut(id).data_mut()[i] = original + step;
        let plus = eval(&point)?;
        point.value_mut(id).data_mut()[i] = original - step;
        let minus = eval(&point)?;
        point.value_mut(id).data_mut()[i] = original;
        Ok((plus - minus) / (2.0 * step))
    };
    let mut check = ParamCheck {
        max_error: 0.0,
        kinks: 0,
    };
    for (id, param) in store.iter() {
        for i in 0..param.value.len() {
            let analytic = grads[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            let numeric = central(id, i, h)?;
            let error = crate::tensor::relative_error(analytic, numeric);
            if error > KINK_PROBE && crate::tensor::relative_error(numeric, central(id, i, h / 2.0)?) > KINK_PROBE {
                check.kinks += 1;
            } else {
                check.max_error = check.max_error.max(error);
            }
        }
    }
    Ok(check)
}

/// Relative disagreement above which a coordinate is probed for a kink.
const KINK_PROBE: f64 = 1e-3;
