//! Feed-forward multi-label evidential classifier.
//!
//! The network is a ReLU trunk followed by dropout and a single linear head
//! that emits two logits per class, laid out `(pos, neg)` per class, so the
//! flat output row of a sample is the row-major `K × 2` logit matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"EVIDALCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {0} has zero width")]
    ZeroSizedLayer(String),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("EMA decay {0} outside [0, 1]")]
    InvalidDecay(f64),
    #[error("parameter sets are not shape-congruent")]
    Incongruent,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl ClassifierSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        dropout_rate: f64,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::ZeroSizedLayer("input".into()));
        }
        if self.num_classes == 0 {
            return Err(ModelError::ZeroSizedLayer("head".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(ModelError::ZeroSizedLayer(format!("hidden{i}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidDropout(self.dropout_rate));
        }
        Ok(())
    }

    /// Number of logits per sample (`2K`).
    pub fn output_dim(&self) -> usize {
        2 * self.num_classes
    }

    /// `(fan_in, fan_out, name)` for every linear layer, trunk first.
    fn layers(&self) -> Vec<(usize, usize, String)> {
        let mut layers = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for (i, &width) in self.hidden_dims.iter().enumerate() {
            layers.push((fan_in, width, format!("hidden{i}")));
            fan_in = width;
        }
        layers.push((fan_in, self.output_dim(), "head".to_string()));
        layers
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// All values concatenated in order, as an `N × 1` column.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self
            .tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::matrix(n, 1, data).expect("parameter sets are non-empty")
    }

    /// Inverse of [`ParamSet::flatten`] using this set's names and shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet, ModelError> {
        if flat.len() != self.num_values() {
            return Err(ModelError::Incongruent);
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            tensors.push(Tensor::new(
                t.shape().to_vec(),
                flat[offset..offset + t.len()].to_vec(),
            )?);
            offset += t.len();
        }
        Ok(ParamSet {
            names: self.names.clone(),
            tensors,
        })
    }

    /// Splits a flattened column on the tape back into per-tensor variables,
    /// so a single leaf can drive the whole network.
    pub fn split_on_tape(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>, ModelError> {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let part = tape.rows(flat, offset, t.len())?;
            vars.push(tape.reshape(part, t.shape())?);
            offset += t.len();
        }
        Ok(vars)
    }

    /// Places every tensor on the tape, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Dropout behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode; the seed fixes the dropout mask.
    Train {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ClassifierSpec,
    pub params: ParamSet,
    pub ema_params: ParamSet,
    pub init_snapshot: ParamSet,
    pub rng_seed: u64,
}

/// Deterministic initialization: uniform(±1/√fan_in) weights and biases.
pub fn init(spec: &ClassifierSpec, seed: u64) -> Result<ModelState, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (fan_in, fan_out, name) in spec.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        names.push(format!("{name}.weight"));
        tensors.push(Tensor::matrix(fan_in, fan_out, weight)?);
        names.push(format!("{name}.bias"));
        tensors.push(Tensor::new(vec![fan_out], bias)?);
    }
    let params = ParamSet { names, tensors };
    Ok(ModelState {
        spec: spec.clone(),
        ema_params: params.clone(),
        init_snapshot: params.clone(),
        params,
        rng_seed: seed,
    })
}

/// Records the network on `tape`; `weights` are the registered parameter
/// variables in [`ParamSet`] order. Returns `batch × 2K` logits.
pub fn forward_on_tape(
    tape: &mut Tape,
    spec: &ClassifierSpec,
    weights: &[Var],
    x: Var,
    mode: Mode,
) -> Result<Var, ModelError> {
    let width = tape.value(x).dims2().1;
    if width != spec.input_dim {
        return Err(ModelError::InputWidth {
            expected: spec.input_dim,
            got: width,
        });
    }
    let depth = spec.hidden_dims.len();
    let mut h = x;
    for layer in 0..depth {
        h = tape.matmul(h, weights[2 * layer])?;
        h = tape.add_row(h, weights[2 * layer + 1])?;
        h = tape.relu(h)?;
    }
    if let Mode::Train { seed } = mode {
        if spec.dropout_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            h = tape.dropout(h, 1.0 - spec.dropout_rate, &mut rng)?;
        }
    }
    let out = tape.matmul(h, weights[2 * depth])?;
    Ok(tape.add_row(out, weights[2 * depth + 1])?)
}

/// Logits of `params` on `x` as a `batch × K × 2` tensor, without gradients.
pub fn forward(
    spec: &ClassifierSpec,
    params: &ParamSet,
    x: &Tensor,
    mode: Mode,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let weights = params.register(&mut tape, false);
    let input = tape.constant(x.clone());
    let logits = forward_on_tape(&mut tape, spec, &weights, input, mode)?;
    let (batch, _) = tape.value(logits).dims2();
    let data = tape.value(logits).data().to_vec();
    Ok(Tensor::new(vec![batch, spec.num_classes, 2], data)?)
}

/// `ema ← d · ema + (1 − d) · params`, elementwise.
pub fn ema_blend(ema: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(ModelError::InvalidDecay(decay));
    }
    if !ema.is_congruent(params) {
        return Err(ModelError::Incongruent);
    }
    for (e, p) in ema.tensors.iter_mut().zip(&params.tensors) {
        for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

impl ModelState {
    pub fn ema_update(&mut self, decay: f64) -> Result<(), ModelError> {
        ema_blend(&mut self.ema_params, &self.params, decay)
    }

    /// Restores params and EMA to the initial snapshot. Optimizer state is
    /// not owned here and must be rebuilt by the caller.
    pub fn reset_to_snapshot(&mut self) {
        self.params = self.init_snapshot.clone();
        self.ema_params = self.init_snapshot.clone();
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let groups = [
            ("params", &self.params),
            ("ema_params", &self.ema_params),
            ("init_snapshot", &self.init_snapshot),
        ];
        let entries: Vec<CheckpointEntry> = groups
            .iter()
            .flat_map(|(group, set)| {
                set.names
                    .iter()
                    .zip(&set.tensors)
                    .map(|(name, t)| CheckpointEntry {
                        group: group.to_string(),
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                    })
            })
            .collect();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            seed: self.rng_seed,
            tensors: entries,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;

        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for (_, set) in groups {
            for t in &set.tensors {
                for v in t.data() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| ModelError::Format(e.to_string()))?;
        header.spec.validate()?;

        let mut sets: [ParamSet; 3] = std::array::from_fn(|_| ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        });
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            let slot = match entry.group.as_str() {
                "params" => 0,
                "ema_params" => 1,
                "init_snapshot" => 2,
                other => return Err(ModelError::Format(format!("unknown group {other}"))),
            };
            let count: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            sets[slot].names.push(entry.name);
            sets[slot].tensors.push(Tensor::new(entry.shape, data)?);
        }
        if input.read(&mut buf)? != 0 {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        let [params, ema_params, init_snapshot] = sets;
        let reference = init(&header.spec, 0)?.params;
        for set in [&params, &ema_params, &init_snapshot] {
            if !set.is_congruent(&reference) {
                return Err(ModelError::Incongruent);
            }
        }
        Ok(ModelState {
            spec: header.spec,
            params,
            ema_params,
            init_snapshot,
            rng_seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    spec: ClassifierSpec,
    seed: u64,
    tensors: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dropout: f64) -> ClassifierSpec {
        ClassifierSpec::new(5, vec![8, 6], 3, dropout)
    }

    fn batch(rows: usize, cols: usize, offset: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|i| ((i as f64) * 0.37 + offset).sin())
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init(&spec(0.5), 7).unwrap();
        let b = init(&spec(0.5), 7).unwrap();
        let c = init(&spec(0.5), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params, a.init_snapshot);
        assert_eq!(a.params, a.ema_params);
    }

    #[test]
    fn degenerate_depth_is_single_linear_map() {
        let s = ClassifierSpec::new(4, vec![], 2, 0.0);
        let m = init(&s, 1).unwrap();
        assert_eq!(m.params.names(), &["head.weight", "head.bias"]);
        assert_eq!(m.params.get("head.weight").unwrap().shape(), &[4, 4]);
        let x = batch(3, 4, 0.0);
        let out = forward(&s, &m.params, &x, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
    }

    #[test]
    fn init_rejects_bad_specs() {
        assert!(matches!(
            init(&ClassifierSpec::new(4, vec![3, 0], 2, 0.1), 0),
            Err(ModelError::ZeroSizedLayer(_))
        ));
        assert!(init(&ClassifierSpec::new(0, vec![], 2, 0.1), 0).is_err());
        assert!(init(&ClassifierSpec::new(4, vec![], 2, 1.0), 0).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_invariant() {
        let s = spec(0.5);
        let m = init(&s, 3).unwrap();
        let x = batch(8, 5, 0.2);
        let a = forward(&s, &m.params, &x, Mode::Eval).unwrap();
        let b = forward(&s, &m.params, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        for r in 0..8 {
            let single = Tensor::matrix(1, 5, x.row(r).to_vec()).unwrap();
            let one = forward(&s, &m.params, &single, Mode::Eval).unwrap();
            let width = s.output_dim();
            assert_eq!(one.data(), &a.data()[r * width..(r + 1) * width]);
        }
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let s = spec(0.0);
        let m = init(&s, 3).unwrap();
        let x = batch(4, 5, 1.0);
        let train = forward(&s, &m.params, &x, Mode::Train { seed: 99 }).unwrap();
        let eval = forward(&s, &m.params, &x, Mode::Eval).unwrap();
        assert_eq!(train, eval);
        let s = spec(0.5);
        let m = init(&s, 3).unwrap();
        let t1 = forward(&s, &m.params, &x, Mode::Train { seed: 1 }).unwrap();
        let t2 = forward(&s, &m.params, &x, Mode::Train { seed: 1 }).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn input_width_is_checked() {
        let s = spec(0.0);
        let m = init(&s, 3).unwrap();
        assert!(matches!(
            forward(&s, &m.params, &batch(2, 4, 0.0), Mode::Eval),
            Err(ModelError::InputWidth {
                expected: 5,
                got: 4
            })
        ));
    }

    #[test]
    fn ema_update_rules() {
        let s = ClassifierSpec::new(1, vec![], 1, 0.0);
        let mut m = init(&s, 0).unwrap();
        for t in m.ema_params.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        for t in m.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        m.ema_update(0.9).unwrap();
        assert!(m
            .ema_params
            .tensors()
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.9)));
        let before = m.ema_params.clone();
        m.ema_update(1.0).unwrap();
        assert_eq!(m.ema_params, before);
        m.ema_update(0.0).unwrap();
        assert_eq!(m.ema_params, m.params);
        assert!(matches!(
            m.ema_update(1.5),
            Err(ModelError::InvalidDecay(_))
        ));
    }

    #[test]
    fn ema_is_a_contraction_toward_params() {
        let s = spec(0.0);
        let mut m = init(&s, 1).unwrap();
        let other = init(&s, 2).unwrap();
        m.params = other.params;
        let before = m.ema_params.clone();
        m.ema_update(0.7).unwrap();
        for ((e0, e1), p) in before
            .tensors()
            .iter()
            .zip(m.ema_params.tensors())
            .zip(m.params.tensors())
        {
            for ((a, b), c) in e0.data().iter().zip(e1.data()).zip(p.data()) {
                assert!(((b - c).abs() - 0.7 * (a - c).abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reset_restores_snapshot_and_replays_forward() {
        let s = spec(0.2);
        let mut m = init(&s, 4).unwrap();
        let x = batch(3, 5, 0.5);
        let round0 = forward(&s, &m.params, &x, Mode::Eval).unwrap();
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3);
        }
        m.ema_update(0.5).unwrap();
        m.reset_to_snapshot();
        assert_eq!(m.params, m.init_snapshot);
        assert_eq!(m.ema_params, m.init_snapshot);
        let once = m.clone();
        m.reset_to_snapshot();
        assert_eq!(m, once);
        assert_eq!(forward(&s, &m.params, &x, Mode::Eval).unwrap(), round0);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = init(&spec(0.3), 11).unwrap();
        m.params.tensors_mut()[0].data_mut()[0] = 0.123_456_789_012_345_67;
        m.ema_update(0.5).unwrap();
        m.save_checkpoint(&path).unwrap();
        let loaded = ModelState::load_checkpoint(&path).unwrap();
        assert_eq!(loaded, m);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&path),
            Err(ModelError::Format(_))
        ));
    }
}
