//! State encoder, policy head, per-instance value nets and action decoders,
//! transition module and instance classifier.
//!
//! All parameters of a [`ModelBundle`] live in one flat store addressed by
//! [`ParamId`]; the typed module structs only hold ids. A forward pass runs on
//! a [`Graph`], which binds each parameter onto its tape at most once and
//! decides per parameter whether it is trainable.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{DomainKind, InstanceSpec, State};
use crate::numerics::{clip_global_norm, gcn_layer, normalize_adjacency, Gradients, NumericsError, RmsProp, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Feature maps of the two GCN layers.
pub const GCN_WIDTHS: [usize; 2] = [3, 7];
pub const DEFAULT_EMBED: usize = 20;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no {what} for instance `{id}`")]
    UnknownInstance { what: &'static str, id: String },
    #[error("instance `{id}` does not fit the model: {detail}")]
    DimensionMismatch { id: String, detail: String },
    #[error("instance `{0}` already has a {1}")]
    DuplicateInstance(String, &'static str),
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("signature mismatch: {0}")]
    SignatureMismatch(String),
}

/// Network sizes shared by every instance of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub num_vars: usize,
    /// Per-node input channels: the state bit plus static features.
    pub input_channels: usize,
    /// Per-node output channels of the encoder (D_O).
    pub node_embed: usize,
    /// State-action embedding width (E).
    pub embed: usize,
    pub hidden: usize,
    pub num_actions: usize,
    /// Instance classifier classes (N).
    pub num_classes: usize,
}

impl Dims {
    pub fn for_instance(spec: &InstanceSpec, num_classes: usize) -> Self {
        Self {
            num_vars: spec.num_vars,
            input_channels: 1 + spec.feature_channels,
            node_embed: GCN_WIDTHS[1],
            embed: DEFAULT_EMBED,
            hidden: DEFAULT_HIDDEN,
            num_actions: spec.num_actions(),
            num_classes,
        }
    }

    pub fn state_embedding(&self) -> usize {
        self.num_vars * self.node_embed
    }

    pub fn check(&self, spec: &InstanceSpec) -> Result<(), NetworkError> {
        let bad = |detail: String| {
            Err(NetworkError::DimensionMismatch {
                id: spec.instance_id.clone(),
                detail,
            })
        };
        if spec.num_vars != self.num_vars {
            return bad(format!("{} variables, model expects {}", spec.num_vars, self.num_vars));
        }
        if 1 + spec.feature_channels != self.input_channels {
            return bad(format!(
                "{} node channels, model expects {}",
                1 + spec.feature_channels,
                self.input_channels
            ));
        }
        if spec.num_actions() != self.num_actions {
            return bad(format!("{} actions, model expects {}", spec.num_actions(), self.num_actions));
        }
        Ok(())
    }
}

/// Instance plus its normalized adjacency, computed once.
#[derive(Clone, Debug)]
pub struct PreparedInstance {
    pub spec: InstanceSpec,
    pub adjacency_norm: Tensor,
}

impl PreparedInstance {
    pub fn new(spec: InstanceSpec) -> Result<Self, NumericsError> {
        let n = spec.num_vars;
        let adj = Tensor::new(&[n, n], spec.adjacency.iter().map(|&b| b as f64).collect())?;
        Ok(Self {
            adjacency_norm: normalize_adjacency(&adj)?,
            spec,
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.instance_id
    }

    /// n×(1+F_s) node inputs: `[state bit | static channels]`.
    pub fn node_inputs(&self, s: &State) -> Tensor {
        let spec = &self.spec;
        let c = 1 + spec.feature_channels;
        let mut data = Vec::with_capacity(spec.num_vars * c);
        for i in 0..spec.num_vars {
            data.push(s.bits()[i] as f64);
            data.extend_from_slice(&spec.node_features[i * spec.feature_channels..(i + 1) * spec.feature_channels]);
        }
        Tensor::new(&[spec.num_vars, c], data).expect("node input shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Two fully connected layers, ELU on the hidden layer, linear output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnStack {
    pub layers: [ParamId; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueNet {
    /// `None` when the value net reuses the shared state encoder.
    pub encoder: Option<GcnStack>,
    pub head: Mlp,
}

/// Everything a checkpoint must agree on before parameters are read.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub domain: DomainKind,
    pub dims: Dims,
    pub share_value_encoder: bool,
    /// Source instances, in classifier class order.
    pub classes: Vec<String>,
    /// Instances with an action decoder, in creation order.
    pub decoders: Vec<String>,
    /// Instances with a value net, in creation order.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    accum: Tensor,
}

/// All network parameters of an experiment plus RMSProp state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub domain: DomainKind,
    pub dims: Dims,
    pub share_value_encoder: bool,
    pub optimizer: RmsProp,
    params: Vec<Param>,
    pub encoder: GcnStack,
    pub policy: Mlp,
    pub transition: Mlp,
    pub classifier: Mlp,
    classes: Vec<String>,
    decoders: Vec<(String, Mlp)>,
    values: Vec<(String, ValueNet)>,
}

fn glorot(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::new(&[rows, cols], data).expect("glorot shape")
}

/// Creates parameters; `seed == None` leaves them zero (used when loading).
struct Builder<'a> {
    params: &'a mut Vec<Param>,
    seed: Option<u64>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let value = match self.seed {
            Some(seed) => glorot(&mut RngStream::new(seed).split_named(&name), rows, cols),
            None => Tensor::zeros(&[rows, cols]),
        };
        self.push(name, value)
    }

    fn bias(&mut self, name: String, cols: usize) -> ParamId {
        self.push(name, Tensor::zeros(&[1, cols]))
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        let accum = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, accum });
        ParamId(self.params.len() - 1)
    }

    fn dense(&mut self, prefix: &str, inp: usize, out: usize) -> Dense {
        Dense {
            weight: self.weight(format!("{prefix}.w"), inp, out),
            bias: self.bias(format!("{prefix}.b"), out),
        }
    }

    fn mlp(&mut self, prefix: &str, inp: usize, hidden: usize, out: usize) -> Mlp {
        Mlp {
            hidden: self.dense(&format!("{prefix}.fc0"), inp, hidden),
            output: self.dense(&format!("{prefix}.fc1"), hidden, out),
        }
    }

    fn gcn(&mut self, prefix: &str, inp: usize) -> GcnStack {
        GcnStack {
            layers: [
                self.weight(format!("{prefix}.gcn0.w"), inp, GCN_WIDTHS[0]),
                self.weight(format!("{prefix}.gcn1.w"), GCN_WIDTHS[0], GCN_WIDTHS[1]),
            ],
        }
    }
}

impl ModelBundle {
    /// Fresh bundle with a decoder and value net per source. Each parameter
    /// is drawn from its own stream keyed by `(seed, name)`, so adding or
    /// removing a module never changes the initial values of the others.
    pub fn new(
        domain: DomainKind,
        dims: Dims,
        sources: &[String],
        share_value_encoder: bool,
        optimizer: RmsProp,
        seed: u64,
    ) -> Self {
        let sig = Signature {
            domain,
            dims,
            share_value_encoder,
            classes: sources.to_vec(),
            decoders: sources.to_vec(),
            values: sources.to_vec(),
        };
        Self::build(&sig, optimizer, Some(seed))
    }

    /// Zero-valued bundle with the layout of `sig`, to be filled by a loader.
    pub fn from_signature(sig: &Signature, optimizer: RmsProp) -> Self {
        Self::build(sig, optimizer, None)
    }

    fn build(sig: &Signature, optimizer: RmsProp, seed: Option<u64>) -> Self {
        let d = sig.dims;
        let mut params = Vec::new();
        let mut b = Builder {
            params: &mut params,
            seed,
        };
        let encoder = b.gcn("encoder", d.input_channels);
        let policy = b.mlp("policy", d.state_embedding(), d.hidden, d.embed);
        let transition = b.mlp("transition", 2 * d.state_embedding(), d.hidden, d.embed);
        let classifier = b.mlp("classifier", d.embed, d.hidden, d.num_classes.max(1));
        let mut bundle = Self {
            domain: sig.domain,
            dims: d,
            share_value_encoder: sig.share_value_encoder,
            optimizer,
            params,
            encoder,
            policy,
            transition,
            classifier,
            classes: sig.classes.clone(),
            decoders: Vec::new(),
            values: Vec::new(),
        };
        for id in &sig.decoders {
            bundle.push_decoder(id, seed);
        }
        for id in &sig.values {
            bundle.push_value_net(id, seed);
        }
        bundle
    }

    fn push_decoder(&mut self, id: &str, seed: Option<u64>) -> Mlp {
        let d = self.dims;
        let mut b = Builder {
            params: &mut self.params,
            seed,
        };
        let mlp = b.mlp(&format!("decoder[{id}]"), d.num_vars + d.embed, d.hidden, d.num_actions);
        self.decoders.push((id.to_string(), mlp));
        mlp
    }

    fn push_value_net(&mut self, id: &str, seed: Option<u64>) -> ValueNet {
        let d = self.dims;
        let share = self.share_value_encoder;
        let mut b = Builder {
            params: &mut self.params,
            seed,
        };
        let prefix = format!("value[{id}]");
        let encoder = (!share).then(|| b.gcn(&prefix, d.input_channels));
        let head = b.mlp(&prefix, d.state_embedding(), d.hidden, 1);
        let net = ValueNet { encoder, head };
        self.values.push((id.to_string(), net));
        net
    }

    /// Adds a freshly initialized action decoder for a new instance.
    pub fn add_decoder(&mut self, id: &str, seed: u64) -> Result<Mlp, NetworkError> {
        if self.decoder(id).is_ok() {
            return Err(NetworkError::DuplicateInstance(id.to_string(), "decoder"));
        }
        Ok(self.push_decoder(id, Some(seed)))
    }

    /// Adds a freshly initialized value net for a new instance.
    pub fn add_value_net(&mut self, id: &str, seed: u64) -> Result<ValueNet, NetworkError> {
        if self.value_net(id).is_ok() {
            return Err(NetworkError::DuplicateInstance(id.to_string(), "value net"));
        }
        Ok(self.push_value_net(id, Some(seed)))
    }

    pub fn signature(&self) -> Signature {
        Signature {
            domain: self.domain,
            dims: self.dims,
            share_value_encoder: self.share_value_encoder,
            classes: self.classes.clone(),
            decoders: self.decoders.iter().map(|(k, _)| k.clone()).collect(),
            values: self.values.iter().map(|(k, _)| k.clone()).collect(),
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == id)
    }

    pub fn decoder(&self, id: &str) -> Result<Mlp, NetworkError> {
        self.decoders
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, m)| *m)
            .ok_or_else(|| NetworkError::UnknownInstance {
                what: "action decoder",
                id: id.to_string(),
            })
    }

    pub fn value_net(&self, id: &str) -> Result<ValueNet, NetworkError> {
        self.values
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, m)| *m)
            .ok_or_else(|| NetworkError::UnknownInstance {
                what: "value net",
                id: id.to_string(),
            })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// `(name, value, rmsprop accumulator)` in creation order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value, &p.accum))
    }

    /// Overwrites a parameter and its accumulator by name, checking shapes.
    pub fn set_entry(&mut self, name: &str, value: Tensor, accum: Tensor) -> Result<(), NetworkError> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| NetworkError::MissingParam(name.to_string()))?;
        for t in [&value, &accum] {
            if t.shape() != p.value.shape() {
                return Err(NetworkError::ParamShape {
                    name: name.to_string(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        p.value = value;
        p.accum = accum;
        Ok(())
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with(prefix))
            .map(ParamId)
            .collect()
    }

    pub fn decoder_params(&self, id: &str) -> Vec<ParamId> {
        self.params_with_prefix(&format!("decoder[{id}]."))
    }

    /// Clips the buffer's global norm (if `clip` is set) and applies one
    /// RMSProp step to each parameter that received a gradient. Returns the
    /// pre-clip norm.
    pub fn apply_gradients(&mut self, grads: &mut GradBuffer, clip: Option<f64>) -> f64 {
        let rule = self.optimizer;
        self.apply_gradients_with(grads, clip, rule)
    }

    /// [`Self::apply_gradients`] with an explicit update rule.
    pub fn apply_gradients_with(&mut self, grads: &mut GradBuffer, clip: Option<f64>, rule: RmsProp) -> f64 {
        let norm = match clip {
            Some(max) => clip_global_norm(grads.grads.iter_mut().flatten().map(|g| g.as_mut_slice()), max),
            None => libm::sqrt(grads.grads.iter().flatten().flatten().map(|x| x * x).sum::<f64>()),
        };
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                rule.step(p.value.data_mut(), g, p.accum.data_mut());
            }
        }
        norm
    }

    /// Action distribution of the transferred policy for `inst`, evaluated
    /// without recording gradients.
    pub fn action_probs(&self, inst: &PreparedInstance, s: &State) -> Result<Vec<f64>, NetworkError> {
        let mut g = Graph::frozen(self);
        let e = g.encode_state(inst, s)?;
        let z = g.policy(e)?;
        let p = g.decode(inst.id(), s, z)?;
        Ok(g.tape.value(p).data().to_vec())
    }

    pub fn state_value(&self, inst: &PreparedInstance, s: &State) -> Result<f64, NetworkError> {
        let mut g = Graph::frozen(self);
        let v = g.value(inst, s)?;
        Ok(g.tape.value(v).item())
    }

    /// Checks that this bundle can serve an experiment with the given
    /// sources (class order included) and instance layout.
    pub fn check_signature(&self, expected: &Signature) -> Result<(), NetworkError> {
        let mine = self.signature();
        let fail = |what: &str| Err(NetworkError::SignatureMismatch(what.to_string()));
        if mine.domain != expected.domain {
            return fail(&format!("domain {} vs {}", mine.domain, expected.domain));
        }
        if mine.dims != expected.dims {
            return fail(&format!("dimensions {:?} vs {:?}", mine.dims, expected.dims));
        }
        if mine.classes != expected.classes {
            return fail("source instances differ");
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator aligned with a bundle's store.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(bundle: &ModelBundle) -> Self {
        Self {
            grads: vec![None; bundle.num_params()],
        }
    }

    /// Adds the tagged gradients of one backward sweep.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (tag, g) in grads.tagged() {
            match &mut self.grads[tag] {
                Some(acc) => {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|x| x.is_finite())
    }

    /// Ids that received a gradient.
    pub fn touched(&self) -> Vec<ParamId> {
        (0..self.grads.len()).filter(|&i| self.grads[i].is_some()).map(ParamId).collect()
    }
}

/// A tape bound to a bundle.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m ModelBundle,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
    adjacency: Vec<(String, Var)>,
}

impl<'m> Graph<'m> {
    /// Every parameter trainable.
    pub fn new(model: &'m ModelBundle) -> Self {
        Self::with_mask(model, vec![true; model.num_params()])
    }

    /// No parameter trainable.
    pub fn frozen(model: &'m ModelBundle) -> Self {
        Self::with_mask(model, vec![false; model.num_params()])
    }

    /// Only the listed parameters trainable.
    pub fn only(model: &'m ModelBundle, trainable: &[ParamId]) -> Self {
        let mut mask = vec![false; model.num_params()];
        for id in trainable {
            mask[id.0] = true;
        }
        Self::with_mask(model, mask)
    }

    fn with_mask(model: &'m ModelBundle, trainable: Vec<bool>) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: vec![None; trainable.len()],
            trainable,
            adjacency: Vec::new(),
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn model(&self) -> &'m ModelBundle {
        self.model
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.model.param(id).clone();
        let v = if self.trainable[id.0] {
            self.tape.tagged(value, id.0)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    fn adjacency_var(&mut self, inst: &PreparedInstance) -> Var {
        if let Some((_, v)) = self.adjacency.iter().find(|(k, _)| k == inst.id()) {
            return *v;
        }
        let v = self.tape.constant(inst.adjacency_norm.clone());
        self.adjacency.push((inst.id().to_string(), v));
        v
    }

    pub fn dense(&mut self, layer: Dense, x: Var) -> Result<Var, NetworkError> {
        let w = self.param(layer.weight);
        let b = self.param(layer.bias);
        let xw = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row_bias(xw, b)?)
    }

    pub fn mlp(&mut self, mlp: Mlp, x: Var) -> Result<Var, NetworkError> {
        let h = self.dense(mlp.hidden, x)?;
        let h = self.tape.elu(h)?;
        self.dense(mlp.output, h)
    }

    fn gcn_stack(&mut self, stack: GcnStack, inst: &PreparedInstance, s: &State) -> Result<Var, NetworkError> {
        self.model.dims.check(&inst.spec)?;
        if s.len() != inst.spec.num_vars {
            return Err(NetworkError::DimensionMismatch {
                id: inst.id().to_string(),
                detail: format!("state has {} bits", s.len()),
            });
        }
        let a = self.adjacency_var(inst);
        let mut f = self.tape.constant(inst.node_inputs(s));
        for w in stack.layers {
            let w = self.param(w);
            f = gcn_layer(&mut self.tape, f, a, w)?;
        }
        Ok(self.tape.flatten(f)?)
    }

    /// Shared state encoder: 1×(n·D_O) node embeddings, node-major.
    pub fn encode_state(&mut self, inst: &PreparedInstance, s: &State) -> Result<Var, NetworkError> {
        self.gcn_stack(self.model.encoder, inst, s)
    }

    /// Shared policy head: state embedding → state-action embedding.
    pub fn policy(&mut self, e: Var) -> Result<Var, NetworkError> {
        self.mlp(self.model.policy, e)
    }

    /// Per-instance decoder: softmax over actions from `[s | z]`.
    pub fn decode(&mut self, instance_id: &str, s: &State, z: Var) -> Result<Var, NetworkError> {
        let bits = self.tape.constant(Tensor::row(s.as_f64()));
        let x = self.tape.concat_cols(&[bits, z])?;
        self.decode_rows(instance_id, x)
    }

    /// Decoder applied row-wise to a batch of `[s | z]` inputs.
    pub fn decode_rows(&mut self, instance_id: &str, x: Var) -> Result<Var, NetworkError> {
        let mlp = self.model.decoder(instance_id)?;
        let logits = self.mlp(mlp, x)?;
        Ok(self.tape.softmax(logits)?)
    }

    /// Shared transition module: `[e(s) | e(s')]` → soft-action embedding.
    pub fn transition(&mut self, e_s: Var, e_next: Var) -> Result<Var, NetworkError> {
        let (a, b) = (self.tape.value(e_s).shape().to_vec(), self.tape.value(e_next).shape().to_vec());
        if a != b {
            return Err(NumericsError::ShapeMismatch {
                op: "transition",
                left: a,
                right: b,
            }
            .into());
        }
        let x = self.tape.concat_cols(&[e_s, e_next])?;
        self.mlp(self.model.transition, x)
    }

    /// Instance classifier behind a gradient-reversal layer.
    pub fn classify(&mut self, z: Var, lambda: f64) -> Result<Var, NetworkError> {
        let r = self.tape.grad_reverse(z, lambda)?;
        let logits = self.mlp(self.model.classifier, r)?;
        Ok(self.tape.softmax(logits)?)
    }

    /// Per-instance value net on the original state.
    pub fn value(&mut self, inst: &PreparedInstance, s: &State) -> Result<Var, NetworkError> {
        let net = self.model.value_net(inst.id())?;
        let e = self.gcn_stack(net.encoder.unwrap_or(self.model.encoder), inst, s)?;
        self.mlp(net.head, e)
    }
}
