//! BiLSTM student: embeddings, a bidirectional LSTM with temporal max
//! pooling, and three heads (classifier, logit regressor, representation
//! projector).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Encoded;

/// Range of the uniform initializer, `U(-INIT_RANGE, INIT_RANGE)`.
pub const INIT_RANGE: f64 = 0.1;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden units per direction.
    pub lstm_hidden: usize,
    pub num_classes: usize,
    pub teacher_hidden: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
}

impl StudentConfig {
    /// Reference sizes for the given vocabulary and label space.
    pub fn with_defaults(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 300,
            lstm_hidden: 600,
            num_classes,
            teacher_hidden: 768,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            dropout_rate: 0.4,
            recurrent_dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("num_classes", self.num_classes),
            ("teacher_hidden", self.teacher_hidden),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::contract(format!("student {name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::contract("student needs at least 2 classes"));
        }
        if self.max_len < 2 {
            return Err(Error::contract("max_len must be at least 2"));
        }
        for (name, r) in [
            ("dropout_rate", self.dropout_rate),
            ("recurrent_dropout_rate", self.recurrent_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::contract(format!("{name} {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Width of the pooled encoding, `2 × lstm_hidden`.
    pub fn encoding_dim(&self) -> usize {
        2 * self.lstm_hidden
    }
}

/// Freeze groups, ordered bottom to top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Embeddings,
    Bilstm,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Embeddings, ParamGroup::Bilstm, ParamGroup::Heads];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

const GATES: [&str; 4] = ["input", "forget", "output", "cell"];
const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

/// All trainable student tensors plus per-group freeze flags.
///
/// Head matrices are stored input-major (`[2L × out]`) so that a batch of
/// encodings multiplies them directly.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams {
    config: StudentConfig,
    params: Vec<Param>,
    frozen: [bool; 3],
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl StudentParams {
    /// Seeded `U(-0.1, 0.1)` initialization; forget-gate biases start at 1.
    pub fn init(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, l, c, h) = (
            config.embed_dim,
            config.lstm_hidden,
            config.num_classes,
            config.teacher_hidden,
        );
        let mut params = Vec::new();
        let mut push = |name: String, group, value| params.push(Param { name, group, value });

        push(
            "embedding".into(),
            ParamGroup::Embeddings,
            uniform(&[config.vocab_size, k], &mut rng),
        );
        for dir in DIRECTIONS {
            for gate in GATES {
                push(
                    format!("{dir}.{gate}.w"),
                    ParamGroup::Bilstm,
                    uniform(&[k, l], &mut rng),
                );
                push(
                    format!("{dir}.{gate}.u"),
                    ParamGroup::Bilstm,
                    uniform(&[l, l], &mut rng),
                );
                let bias = if gate == "forget" {
                    Tensor::filled(&[l], FORGET_BIAS_INIT)
                } else {
                    uniform(&[l], &mut rng)
                };
                push(format!("{dir}.{gate}.b"), ParamGroup::Bilstm, bias);
            }
        }
        push("classifier.w".into(), ParamGroup::Heads, uniform(&[2 * l, c], &mut rng));
        push("regressor.w".into(), ParamGroup::Heads, uniform(&[2 * l, c], &mut rng));
        push("regressor.b".into(), ParamGroup::Heads, uniform(&[c], &mut rng));
        push("projector.w".into(), ParamGroup::Heads, uniform(&[2 * l, h], &mut rng));
        push("projector.b".into(), ParamGroup::Heads, uniform(&[h], &mut rng));

        Ok(Self {
            config,
            params,
            frozen: [false; 3],
        })
    }

    /// Rebuild from named tensors, checking names, order and shapes against
    /// a fresh layout for `config`.
    pub fn from_parts(config: StudentConfig, tensors: Vec<(String, Tensor)>, frozen: [bool; 3]) -> Result<Self> {
        let mut layout = Self::init(config, 0)?;
        if layout.params.len() != tensors.len() {
            return Err(Error::data(format!(
                "expected {} parameter tensors, found {}",
                layout.params.len(),
                tensors.len()
            )));
        }
        for (slot, (name, value)) in layout.params.iter_mut().zip(tensors) {
            if slot.name != name {
                return Err(Error::data(format!("expected tensor {}, found {name}", slot.name)));
            }
            if slot.value.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: slot.value.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            slot.value = value;
        }
        layout.frozen = frozen;
        Ok(layout)
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen[group.index()]
    }

    pub fn frozen_flags(&self) -> [bool; 3] {
        self.frozen
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.frozen = [true; 3];
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen = [false; 3];
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        !self.is_frozen(self.params[index].group)
    }

    /// Overwrite all rows of the embedding table whose token has a
    /// pretrained vector. Vectors must be `embed_dim` long.
    pub fn load_pretrained_embeddings<'a>(
        &mut self,
        vectors: impl IntoIterator<Item = (usize, &'a [f64])>,
    ) -> Result<usize> {
        let k = self.config.embed_dim;
        let v = self.config.vocab_size;
        let table = self.get_mut("embedding").expect("embedding exists");
        let mut loaded = 0;
        for (id, vec) in vectors {
            if id >= v || vec.len() != k {
                return Err(Error::Shape {
                    op: "pretrained embedding",
                    left: vec![v, k],
                    right: vec![id, vec.len()],
                });
            }
            table.data_mut()[id * k..(id + 1) * k].copy_from_slice(vec);
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Add every parameter to `graph`; frozen groups enter as constants.
    pub fn bind(&self, graph: &mut Graph) -> Result<BoundStudent> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let trainable = !self.is_frozen(p.group);
            vars.push(graph.leaf(p.value.clone(), trainable)?);
        }
        Ok(BoundStudent::from_vars(vars))
    }

    /// Add every parameter as a constant (inference only).
    pub fn bind_constant(&self, graph: &mut Graph) -> Result<BoundStudent> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.constant(p.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundStudent::from_vars(vars))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input: GateVars,
    pub forget: GateVars,
    pub output: GateVars,
    pub cell: GateVars,
}

/// Graph handles for one bound copy of [`StudentParams`].
#[derive(Clone, Debug)]
pub struct BoundStudent {
    pub embedding: Var,
    pub forward: LstmVars,
    pub backward: LstmVars,
    pub classifier_w: Var,
    pub regressor_w: Var,
    pub regressor_b: Var,
    pub projector_w: Var,
    pub projector_b: Var,
    /// Same order as [`StudentParams::params`].
    pub all: Vec<Var>,
}

impl BoundStudent {
    fn from_vars(all: Vec<Var>) -> Self {
        let gate = |base: usize| GateVars {
            w: all[base],
            u: all[base + 1],
            b: all[base + 2],
        };
        let lstm = |base: usize| LstmVars {
            input: gate(base),
            forget: gate(base + 3),
            output: gate(base + 6),
            cell: gate(base + 9),
        };
        Self {
            embedding: all[0],
            forward: lstm(1),
            backward: lstm(13),
            classifier_w: all[25],
            regressor_w: all[26],
            regressor_b: all[27],
            projector_w: all[28],
            projector_b: all[29],
            all,
        }
    }

    /// Gradients for each parameter after [`Graph::backward`], in parameter
    /// order. Frozen or unreached tensors yield `None`.
    pub fn grads(&self, graph: &Graph) -> Vec<Option<Tensor>> {
        self.all.iter().map(|&v| graph.grad(v)).collect()
    }
}

/// Options for one forward pass.
pub struct ForwardCtx<'a, R: Rng> {
    pub training: bool,
    pub rng: &'a mut R,
}

fn gate_preact(graph: &mut Graph, x: Var, h: Var, g: &GateVars) -> Result<Var> {
    let xw = graph.matmul(x, g.w)?;
    let hu = graph.matmul(h, g.u)?;
    let s = graph.add(xw, hu)?;
    graph.add_row(s, g.b)
}

/// Run one LSTM direction over `steps[t]` (each `[B×K]`), returning every
/// hidden state.
fn run_lstm<R: Rng>(
    graph: &mut Graph,
    lstm: &LstmVars,
    steps: &[Var],
    batch: usize,
    hidden: usize,
    recurrent_dropout: f64,
    ctx: &mut ForwardCtx<'_, R>,
) -> Result<Vec<Var>> {
    let mut h = graph.constant(Tensor::zeros(&[batch, hidden]))?;
    let mut c = graph.constant(Tensor::zeros(&[batch, hidden]))?;
    // One variational mask per sequence, reused at every step.
    let mask = if ctx.training && recurrent_dropout > 0.0 {
        let m = crate::autodiff::dropout_mask(&[batch, hidden], recurrent_dropout, ctx.rng);
        Some(graph.constant(m)?)
    } else {
        None
    };
    let mut outputs = Vec::with_capacity(steps.len());
    for &x in steps {
        let h_in = match mask {
            Some(m) => graph.mul(h, m)?,
            None => h,
        };
        let i_pre = gate_preact(graph, x, h_in, &lstm.input)?;
        let i = graph.sigmoid(i_pre)?;
        let f_pre = gate_preact(graph, x, h_in, &lstm.forget)?;
        let f = graph.sigmoid(f_pre)?;
        let o_pre = gate_preact(graph, x, h_in, &lstm.output)?;
        let o = graph.sigmoid(o_pre)?;
        let g_pre = gate_preact(graph, x, h_in, &lstm.cell)?;
        let g = graph.tanh(g_pre)?;
        let fc = graph.mul(f, c)?;
        let ig = graph.mul(i, g)?;
        c = graph.add(fc, ig)?;
        let tc = graph.tanh(c)?;
        h = graph.mul(o, tc)?;
        outputs.push(h);
    }
    Ok(outputs)
}

/// Pooled BiLSTM encoding `[B × 2L]` of a batch.
///
/// The backward direction reads each sequence reversed within its own
/// valid length. Max pooling is order-independent, so pooling the reversed
/// run over valid steps equals pooling the right-to-left states.
pub fn encode<R: Rng>(
    graph: &mut Graph,
    bound: &BoundStudent,
    config: &StudentConfig,
    batch: &[&Encoded],
    ctx: &mut ForwardCtx<'_, R>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("encode needs a non-empty batch"));
    }
    let lengths: Vec<usize> = batch.iter().map(|e| e.length).collect();
    if let Some(e) = batch.iter().find(|e| e.length < 1 || e.length > e.ids.len()) {
        return Err(Error::contract(format!(
            "sequence length {} invalid for {} ids",
            e.length,
            e.ids.len()
        )));
    }
    if let Some(&bad) = batch
        .iter()
        .flat_map(|e| e.valid_ids())
        .find(|&&id| id >= config.vocab_size)
    {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let steps = *lengths.iter().max().expect("non-empty");
    let b = batch.len();
    // Positions past a sequence's length feed id 0; those steps are masked
    // out of the pool and never influence valid states.
    let forward_ids =
        |t: usize| -> Vec<usize> { batch.iter().map(|e| if t < e.length { e.ids[t] } else { 0 }).collect() };
    let reverse_ids = |t: usize| -> Vec<usize> {
        batch
            .iter()
            .map(|e| if t < e.length { e.ids[e.length - 1 - t] } else { 0 })
            .collect()
    };

    let mut fwd_inputs = Vec::with_capacity(steps);
    let mut bwd_inputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = graph.gather_rows(bound.embedding, &forward_ids(t))?;
        fwd_inputs.push(graph.dropout(x, config.dropout_rate, ctx.training, ctx.rng)?);
        let x = graph.gather_rows(bound.embedding, &reverse_ids(t))?;
        bwd_inputs.push(graph.dropout(x, config.dropout_rate, ctx.training, ctx.rng)?);
    }
    let l = config.lstm_hidden;
    let rd = config.recurrent_dropout_rate;
    let fwd_states = run_lstm(graph, &bound.forward, &fwd_inputs, b, l, rd, ctx)?;
    let bwd_states = run_lstm(graph, &bound.backward, &bwd_inputs, b, l, rd, ctx)?;
    let fwd_pool = graph.masked_max(&fwd_states, &lengths)?;
    let bwd_pool = graph.masked_max(&bwd_states, &lengths)?;
    let z = graph.concat_cols(fwd_pool, bwd_pool)?;
    graph.dropout(z, config.dropout_rate, ctx.training, ctx.rng)
}

/// Class probabilities `softmax(z · W_s)`.
pub fn classify(graph: &mut Graph, bound: &BoundStudent, z: Var) -> Result<Var> {
    let scores = graph.matmul(z, bound.classifier_w)?;
    graph.softmax(scores)
}

/// Unconstrained class scores `z · W_r + b_r`.
pub fn regress_logits(graph: &mut Graph, bound: &BoundStudent, z: Var) -> Result<Var> {
    let s = graph.matmul(z, bound.regressor_w)?;
    graph.add_row(s, bound.regressor_b)
}

/// Teacher-sized representation `gelu(z · W_f + b_f)`.
pub fn project(graph: &mut Graph, bound: &BoundStudent, z: Var) -> Result<Var> {
    let s = graph.matmul(z, bound.projector_w)?;
    let a = graph.add_row(s, bound.projector_b)?;
    graph.gelu(a)
}

/// Eval-mode class probabilities for many instances, computed in chunks.
pub fn predict_probs(params: &StudentParams, encoded: &[&Encoded], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(encoded.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for part in encoded.chunks(chunk.max(1)) {
        let mut graph = Graph::new();
        let bound = params.bind_constant(&mut graph)?;
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let z = encode(&mut graph, &bound, params.config(), part, &mut ctx)?;
        let p = classify(&mut graph, &bound, z)?;
        let c = params.config().num_classes;
        out.extend(graph.value(p).data().chunks(c).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Argmax with lowest-index tie-break.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_labels(params: &StudentParams, encoded: &[&Encoded]) -> Result<Vec<usize>> {
    Ok(predict_probs(params, encoded, 256)?.iter().map(|p| argmax(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> StudentConfig {
        StudentConfig {
            vocab_size: 20,
            embed_dim: 4,
            lstm_hidden: 3,
            num_classes: 3,
            teacher_hidden: 6,
            max_len: 7,
            dropout_rate: 0.4,
            recurrent_dropout_rate: 0.2,
        }
    }

    fn seq(ids: &[usize], max_len: usize) -> Encoded {
        let mut padded = ids.to_vec();
        padded.resize(max_len, 0);
        Encoded {
            ids: padded,
            length: ids.len(),
            max_len,
        }
    }

    fn eval_encode(params: &StudentParams, batch: &[&Encoded]) -> Vec<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let z = encode(&mut g, &bound, params.config(), batch, &mut ctx).unwrap();
        g.value(z).data().to_vec()
    }

    #[test]
    fn layout_and_groups() {
        let p = StudentParams::init(micro(), 1).unwrap();
        assert_eq!(p.params().len(), 30);
        assert_eq!(p.get("embedding").unwrap().shape(), &[20, 4]);
        assert_eq!(p.get("fwd.input.u").unwrap().shape(), &[3, 3]);
        assert_eq!(p.get("bwd.forget.b").unwrap().data(), &[1.0; 3]);
        assert_eq!(p.get("projector.w").unwrap().shape(), &[6, 6]);
        let mut g = Graph::new();
        let b = p.bind(&mut g).unwrap();
        assert_eq!(g.shape(b.backward.cell.b), &[3]);
        assert_eq!(g.shape(b.regressor_b), &[3]);
        for param in p.params() {
            assert!(param.value.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = StudentParams::init(micro(), 9).unwrap();
        let b = StudentParams::init(micro(), 9).unwrap();
        let c = StudentParams::init(micro(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn padding_does_not_change_encoding() {
        let p = StudentParams::init(micro(), 2).unwrap();
        let short = seq(&[2, 5, 7, 3], 4);
        let long = seq(&[2, 5, 7, 3], 12);
        let other = seq(&[2, 1, 1, 1, 1, 1, 3], 12);
        let alone = eval_encode(&p, &[&short]);
        let batched = eval_encode(&p, &[&long, &other]);
        assert_eq!(alone, batched[..6].to_vec());
    }

    #[test]
    fn single_step_pool_is_the_state() {
        let cfg = micro();
        let p = StudentParams::init(cfg.clone(), 4).unwrap();
        let s = seq(&[7], 3);
        let mut g = Graph::new();
        let bound = p.bind(&mut g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let z = encode(&mut g, &bound, &cfg, &[&s], &mut ctx).unwrap();
        // With one step both directions see the same input.
        let x = g.gather_rows(bound.embedding, &[7]).unwrap();
        let h0 = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let lstm = bound.forward;
        let gi = gate_preact(&mut g, x, h0, &lstm.input).unwrap();
        let i = g.sigmoid(gi).unwrap();
        let go = gate_preact(&mut g, x, h0, &lstm.output).unwrap();
        let o = g.sigmoid(go).unwrap();
        let gc = gate_preact(&mut g, x, h0, &lstm.cell).unwrap();
        let cand = g.tanh(gc).unwrap();
        let c = g.mul(i, cand).unwrap();
        let tc = g.tanh(c).unwrap();
        let h = g.mul(o, tc).unwrap();
        assert_eq!(&g.value(z).data()[..3], g.value(h).data());
    }

    #[test]
    fn heads_with_zeroed_weights() {
        let cfg = micro();
        let mut p = StudentParams::init(cfg.clone(), 5).unwrap();
        p.get_mut("classifier.w").unwrap().data_mut().fill(0.0);
        p.get_mut("regressor.w").unwrap().data_mut().fill(0.0);
        p.get_mut("regressor.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, -1.0, 0.5]);
        p.get_mut("projector.w").unwrap().data_mut().fill(0.0);
        p.get_mut("projector.b").unwrap().data_mut().fill(0.0);
        let s = seq(&[2, 8, 9, 3], 6);
        let mut g = Graph::new();
        let bound = p.bind(&mut g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        let z = encode(&mut g, &bound, &cfg, &[&s, &s], &mut ctx).unwrap();
        let probs = classify(&mut g, &bound, z).unwrap();
        for &v in g.value(probs).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let r = regress_logits(&mut g, &bound, z).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
        let f = project(&mut g, &bound, z).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 6]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regressor_is_affine() {
        let cfg = micro();
        let p = StudentParams::init(cfg, 6).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g).unwrap();
        let z = g
            .constant(Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.9, 0.1, 0.0, -0.7]).unwrap())
            .unwrap();
        let z2 = g.scale(z, 2.0).unwrap();
        let r1 = regress_logits(&mut g, &bound, z).unwrap();
        let r2 = regress_logits(&mut g, &bound, z2).unwrap();
        let wz = g.matmul(z, bound.regressor_w).unwrap();
        for ((a, b), c) in g
            .value(r2)
            .data()
            .iter()
            .zip(g.value(r1).data())
            .zip(g.value(wz).data())
        {
            assert!((a - b - c).abs() < 1e-15);
        }
    }

    #[test]
    fn training_mode_uses_dropout() {
        let cfg = micro();
        let p = StudentParams::init(cfg.clone(), 7).unwrap();
        let s = seq(&[2, 4, 6, 8, 3], 5);
        let run = |training: bool, seed: u64| {
            let mut g = Graph::new();
            let bound = p.bind(&mut g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = ForwardCtx {
                training,
                rng: &mut rng,
            };
            let z = encode(&mut g, &bound, &cfg, &[&s], &mut ctx).unwrap();
            g.value(z).data().to_vec()
        };
        assert_eq!(run(true, 1), run(true, 1));
        assert_ne!(run(true, 1), run(false, 1));
        assert_eq!(run(false, 1), run(false, 2));
    }

    #[test]
    fn rejects_out_of_vocab_ids() {
        let cfg = micro();
        let p = StudentParams::init(cfg.clone(), 7).unwrap();
        let s = seq(&[2, 40, 3], 4);
        let mut g = Graph::new();
        let bound = p.bind(&mut g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx {
            training: false,
            rng: &mut rng,
        };
        assert!(encode(&mut g, &bound, &cfg, &[&s], &mut ctx).is_err());
        assert!(encode(&mut g, &bound, &cfg, &[], &mut ctx).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = micro();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = micro();
        c.num_classes = 1;
        assert!(StudentParams::init(c, 0).is_err());
    }
}
