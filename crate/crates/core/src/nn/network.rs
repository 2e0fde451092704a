use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::StandardNormal;

use super::spec::{conv_geometry, Activation, Layer, NetworkSpec, Part};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, NoGrad, Ops, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub part: Part,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Learned parameters of a network, in the spec's binding order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> NetworkState<T> {
    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn set_part_frozen(&mut self, part: Part, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.part == part) {
            p.frozen = frozen;
        }
    }

    /// Hash of every parameter's name and exact bit pattern.
    pub fn fingerprint(&self) -> u64 {
        self.part_fingerprint(None)
    }

    pub fn part_fingerprint(&self, part: Option<Part>) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().filter(|p| part.is_none_or(|q| q == p.part)) {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Binds every parameter into `ops`; unfrozen ones become leaves.
    pub fn bind<O: Ops<T>>(&self, ops: &mut O) -> Bound<O::Value> {
        Bound {
            values: self.params.iter().map(|p| ops.param(&p.value, !p.frozen)).collect(),
        }
    }

    /// Binds every parameter as a constant, whatever its frozen flag.
    pub fn bind_constants<O: Ops<T>>(&self, ops: &mut O) -> Bound<O::Value> {
        Bound {
            values: self.params.iter().map(|p| ops.param(&p.value, false)).collect(),
        }
    }

    /// Gradients of every unfrozen parameter after a backward pass over a
    /// tape this state was bound to.
    pub fn param_grads(&self, bound: &Bound<Var>, grads: &Gradients<T>) -> ParamGrads<T> {
        self.params
            .iter()
            .zip(&bound.values)
            .filter(|(p, _)| !p.frozen)
            .filter_map(|(p, v)| grads.get(*v).map(|g| (p.name.clone(), g.clone())))
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.frozen == b.frozen && a.value.bit_eq(&b.value))
    }
}

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// Parameters bound into an executor, parallel to `NetworkState::params`.
#[derive(Clone, Debug)]
pub struct Bound<V> {
    values: Vec<V>,
}

impl<V> Bound<V> {
    pub fn values(&self) -> &[V] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub state: NetworkState<T>,
}

impl<T: Real> Network<T> {
    /// Fan-in scaled Gaussian weights and zero biases, deterministic in
    /// `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let slots = spec.param_slots()?;
        let mut rng = rng::seeded(seed);
        let params = slots
            .into_iter()
            .map(|slot| init_param(slot.name, slot.part, slot.shape, slot.fan_in, slot.is_bias, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            spec,
            state: NetworkState { params },
        })
    }

    /// Pairs a spec with existing parameters, checking names and shapes.
    pub fn from_parts(spec: NetworkSpec, state: NetworkState<T>) -> Result<Self> {
        let slots = spec.param_slots()?;
        if slots.len() != state.params.len() {
            return Err(Error::Spec(format!(
                "{} expects {} parameter tensors, state has {}",
                spec.name,
                slots.len(),
                state.params.len()
            )));
        }
        for (slot, p) in slots.iter().zip(&state.params) {
            if slot.name != p.name || slot.shape != p.value.shape() || slot.part != p.part {
                return Err(Error::Spec(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        Ok(Network { spec, state })
    }

    pub fn bind<O: Ops<T>>(&self, ops: &mut O) -> Bound<O::Value> {
        self.state.bind(ops)
    }

    fn generator_param_count(&self) -> usize {
        2 * self.spec.generator.iter().filter(|l| l.has_params()).count()
    }

    /// Runs the convolutional part; the result is the feature map.
    pub fn forward_generator<O: Ops<T>>(
        &self,
        ops: &mut O,
        bound: &Bound<O::Value>,
        x: &O::Value,
    ) -> Result<O::Value> {
        let shape = ops.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::shape(
                "forward_generator",
                format!("{} expects [N, {:?}], got {shape:?}", self.spec.name, self.spec.input),
            ));
        }
        let split = self.generator_param_count();
        run_layers(ops, &self.spec.generator, &bound.values[..split], x)
    }

    /// Runs the classifier on a feature map, producing `[N, K]` logits.
    pub fn forward_classifier<O: Ops<T>>(
        &self,
        ops: &mut O,
        bound: &Bound<O::Value>,
        feature_map: &O::Value,
    ) -> Result<O::Value> {
        let expected = self.spec.feature_map_shape()?;
        let shape = ops.value(feature_map).shape();
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(
                "forward_classifier",
                format!("{} expects maps [N, {expected:?}], got {shape:?}", self.spec.name),
            ));
        }
        let split = self.generator_param_count();
        run_layers(ops, &self.spec.classifier, &bound.values[split..], feature_map)
    }

    pub fn feature_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ops = NoGrad::unchecked();
        let bound = self.bind(&mut ops);
        self.forward_generator(&mut ops, &bound, x)
    }

    pub fn classify_map(&self, feature_map: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ops = NoGrad::unchecked();
        let bound = self.bind(&mut ops);
        self.forward_classifier(&mut ops, &bound, feature_map)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.classify_map(&self.feature_map(x)?)
    }

    /// Collects gradients for every trainable parameter after a backward
    /// pass over a tape this network was bound to.
    pub fn param_grads(&self, bound: &Bound<Var>, grads: &Gradients<T>) -> ParamGrads<T> {
        self.state.param_grads(bound, grads)
    }

    pub fn param_count(&self) -> usize {
        self.state.numel()
    }
}

/// Fan-in scaled Gaussian weights (variance `2 / fan_in`) or zero biases.
pub fn init_param<T: Real>(
    name: String,
    part: Part,
    shape: Vec<usize>,
    fan_in: usize,
    is_bias: bool,
    rng: &mut rng::Rng,
) -> Result<Param<T>> {
    let n: usize = shape.iter().product();
    let data = if is_bias {
        vec![T::zero(); n]
    } else {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64_lossy(z * std)
            })
            .collect()
    };
    Ok(Param {
        name,
        part,
        value: Tensor::from_vec(shape, data)?,
        frozen: false,
    })
}

pub fn activate<T: Real, O: Ops<T>>(ops: &mut O, x: O::Value, act: Activation) -> Result<O::Value> {
    match act {
        Activation::None => Ok(x),
        Activation::Relu => ops.relu(&x),
    }
}

fn run_layers<T: Real, O: Ops<T>>(
    ops: &mut O,
    layers: &[Layer],
    params: &[O::Value],
    x: &O::Value,
) -> Result<O::Value> {
    let mut cur = x.clone();
    let mut p = params.iter();
    for layer in layers {
        cur = match layer {
            Layer::Conv { activation, .. } => {
                let c = ops.value(&cur).shape()[1];
                let geom = conv_geometry(c, layer).unwrap();
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                let y = ops.conv2d(&cur, w, b, geom)?;
                activate(ops, y, *activation)?
            }
            Layer::MaxPool { window, stride } => ops.max_pool2d(&cur, *window, *stride)?,
            Layer::Relu => ops.relu(&cur)?,
            Layer::Flatten => ops.flatten(&cur)?,
            Layer::Dense { activation, .. } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                let y = ops.dense(&cur, w, b)?;
                activate(ops, y, *activation)?
            }
        };
    }
    Ok(cur)
}

/// Runs the whole network on a tape with every unfrozen parameter as a
/// leaf. Returns the bound parameters, feature map and logits.
pub fn record_forward<T: Real>(
    net: &Network<T>,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
) -> Result<(Bound<Var>, Var, Var)> {
    let bound = net.bind(tape);
    let input = tape.constant(x.clone());
    let map = net.forward_generator(tape, &bound, &input)?;
    let logits = net.forward_classifier(tape, &bound, &map)?;
    Ok((bound, map, logits))
}
