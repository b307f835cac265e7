//! LSTM cell, unidirectional and bidirectional sequence encoders, and the
//! binary conversion head.
//!
//! The cell follows the standard gate equations over the concatenation
//! `[h_{t−1}, x_t]` (hidden state first):
//!
//! ```text
//! f_t = σ(W_f [h_{t−1}, x_t] + b_f)
//! i_t = σ(W_i [h_{t−1}, x_t] + b_i)
//! c̃_t = tanh(W_c [h_{t−1}, x_t] + b_c)
//! c_t = f_t ⊙ c_{t−1} + i_t ⊙ c̃_t
//! o_t = σ(W_o [h_{t−1}, x_t] + b_o)
//! h_t = o_t ⊙ tanh(c_t)
//! ```
//!
//! All tape functions operate on batches: inputs are `B×I` per timestep and
//! states are `B×H`.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Gate weights `H×(H+I)` and biases `H` of one LSTM direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub input: usize,
    pub hidden: usize,
    /// Forget, input, candidate, output.
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
}

const GATES: [&str; 4] = ["forget", "input", "candidate", "output"];

impl LstmCellParams {
    /// Gaussian weights (std `0.1`), zero biases except the forget gate at
    /// `+1`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::config("LSTM input and hidden widths must be at least 1"));
        }
        let weights = GATES.map(|g| {
            store.add(
                format!("{name}.{g}.weight"),
                Tensor::randn(&[hidden, hidden + input], 0.1, rng),
                true,
            )
        });
        let biases = GATES.map(|g| {
            let init = if g == "forget" { 1.0 } else { 0.0 };
            store.add(format!("{name}.{g}.bias"), Tensor::full(&[hidden], init), true)
        });
        Ok(Self {
            input,
            hidden,
            weights,
            biases,
        })
    }

    pub fn bind(&self, params: &Bound) -> CellVars {
        CellVars {
            weights: self.weights.map(|id| params[id]),
            biases: self.biases.map(|id| params[id]),
        }
    }

    pub fn param_count(&self) -> usize {
        4 * (self.hidden * (self.hidden + self.input) + self.hidden)
    }
}

/// Tape handles of one cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

/// Intermediate gate activations of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    pub forget: Var,
    pub input: Var,
    pub candidate: Var,
    pub output: Var,
}

/// One LSTM step. Returns `(h_t, c_t)`.
pub fn lstm_cell_step(tape: &mut Tape, cell: &CellVars, x_t: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    lstm_cell_traced(tape, cell, x_t, h_prev, c_prev).map(|(h, c, _)| (h, c))
}

pub fn lstm_cell_traced(
    tape: &mut Tape,
    cell: &CellVars,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var, GateTrace)> {
    let (hx_rows, _) = tape.value(h_prev).dims2()?;
    if tape.value(h_prev).shape() != tape.value(c_prev).shape() || tape.value(x_t).dims2()?.0 != hx_rows {
        return Err(Error::Dimension {
            op: "lstm_cell_step",
            lhs: tape.value(h_prev).shape().to_vec(),
            rhs: tape.value(x_t).shape().to_vec(),
        });
    }
    let axis = if tape.value(h_prev).ndim() == 1 { 0 } else { 1 };
    let hx = tape.concat(&[h_prev, x_t], axis)?;
    let gate = |tape: &mut Tape, k: usize| -> Result<Var> {
        let z = tape.linear(hx, cell.weights[k])?;
        tape.add_row(z, cell.biases[k])
    };
    let f = gate(tape, 0)?;
    let f = tape.sigmoid(f);
    let i = gate(tape, 1)?;
    let i = tape.sigmoid(i);
    let cand = gate(tape, 2)?;
    let cand = tape.tanh(cand);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let o = gate(tape, 3)?;
    let o = tape.sigmoid(o);
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((
        h,
        c,
        GateTrace {
            forget: f,
            input: i,
            candidate: cand,
            output: o,
        },
    ))
}

/// Runs the cell left to right over `steps` (each `B×I`) from the given
/// state, or from zeros. Returns every hidden state.
pub fn lstm_forward(
    tape: &mut Tape,
    cell: &CellVars,
    steps: &[Var],
    initial: Option<(Var, Var)>,
) -> Result<Vec<Var>> {
    let first = *steps.first().ok_or_else(|| Error::input("empty sequence"))?;
    let (h0, c0) = match initial {
        Some(state) => state,
        None => {
            let batch = tape.value(first).dims2()?.0;
            let hidden = tape.value(cell.biases[0]).len();
            let shape = if tape.value(first).ndim() == 1 {
                vec![hidden]
            } else {
                vec![batch, hidden]
            };
            let h = tape.constant(Tensor::zeros(&shape));
            let c = tape.constant(Tensor::zeros(&shape));
            (h, c)
        }
    };
    let mut state = (h0, c0);
    let mut hidden = Vec::with_capacity(steps.len());
    for &x in steps {
        state = lstm_cell_step(tape, cell, x, state.0, state.1)?;
        hidden.push(state.0);
    }
    Ok(hidden)
}

/// Forward pass over `steps`, backward pass over the reversed steps, with
/// the backward outputs re-reversed so position `t` holds `[h_fwd(t) ;
/// h_bwd(t)]`.
pub fn bilstm_forward(tape: &mut Tape, fwd: &CellVars, bwd: &CellVars, steps: &[Var]) -> Result<Vec<Var>> {
    let (forward, backward) = bilstm_streams(tape, fwd, bwd, steps)?;
    let axis = tape.value(forward[0]).ndim() - 1;
    forward
        .iter()
        .zip(&backward)
        .map(|(&f, &b)| tape.concat(&[f, b], axis))
        .collect()
}

/// The two direction streams, both indexed by original position.
pub fn bilstm_streams(tape: &mut Tape, fwd: &CellVars, bwd: &CellVars, steps: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
    let forward = lstm_forward(tape, fwd, steps, None)?;
    let reversed: Vec<Var> = steps.iter().rev().copied().collect();
    let mut backward = lstm_forward(tape, bwd, &reversed, None)?;
    backward.reverse();
    Ok((forward, backward))
}

/// Splits a `T×I` matrix into `T` row vectors for the sequence functions.
pub fn sequence_steps(tape: &mut Tape, seq: Var) -> Result<Vec<Var>> {
    let (t, _) = tape.value(seq).dims2()?;
    if tape.value(seq).ndim() != 2 || t == 0 {
        return Err(Error::input("sequence must be a non-empty T×I matrix"));
    }
    (0..t).map(|r| tape.row(seq, r)).collect()
}

/// How the head summarizes the encoder outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Forward state at the last step and backward state at the first.
    #[default]
    Final,
    /// Mean of the per-step concatenated states.
    Mean,
}

/// Form of the head's output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One logit; `σ(logit)` is the probability of conversion.
    #[default]
    SingleLogit,
    /// Two logits under a softmax.
    TwoClass,
}

impl OutputMode {
    pub fn width(self) -> usize {
        match self {
            Self::SingleLogit => 1,
            Self::TwoClass => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiLstmConfig {
    pub input: usize,
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "yes")]
    pub bidirectional: bool,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub output: OutputMode,
}

fn default_dropout() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

impl BiLstmConfig {
    /// 273 inputs, 256 hidden units per direction.
    pub fn paper() -> Self {
        Self {
            input: 273,
            hidden: 256,
            dropout: 0.5,
            bidirectional: true,
            readout: Readout::Final,
            output: OutputMode::SingleLogit,
        }
    }

    /// Same input, fewer hidden units.
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            ..Self::paper()
        }
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 {
            return Err(Error::config("LSTM input and hidden widths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Closed-form recurrent parameter count: `4·(H·(H+I)+H)` per direction,
/// plus the dense head when `include_head` is set.
pub fn count_recurrent_params(cfg: &BiLstmConfig, include_head: bool) -> Result<usize> {
    cfg.validate()?;
    let (h, i) = (cfg.hidden, cfg.input);
    let per_direction = 4 * (h * (h + i) + h);
    let head = if include_head {
        let width = cfg.directions() * h;
        cfg.output.width() * (width + 1)
    } else {
        0
    };
    Ok(cfg.directions() * per_direction + head)
}

/// Sequence encoder (one or two directions) with a dropout + dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub cfg: BiLstmConfig,
    pub store: ParamStore,
    pub forward_cell: LstmCellParams,
    pub backward_cell: Option<LstmCellParams>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(cfg: &BiLstmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let forward_cell = LstmCellParams::new(&mut store, "lstm.forward", cfg.input, cfg.hidden, rng)?;
        let backward_cell = if cfg.bidirectional {
            Some(LstmCellParams::new(&mut store, "lstm.backward", cfg.input, cfg.hidden, rng)?)
        } else {
            None
        };
        let width = cfg.directions() * cfg.hidden;
        let out = cfg.output.width();
        let head_weight = store.add(
            "head.weight",
            Tensor::randn(&[out, width], (1.0 / width as f64).sqrt(), rng),
            true,
        );
        let head_bias = store.add("head.bias", Tensor::zeros(&[out]), true);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            forward_cell,
            backward_cell,
            head_weight,
            head_bias,
        })
    }

    /// Encoder outputs per step: `B×2H` when bidirectional, else `B×H`.
    pub fn encode(&self, tape: &mut Tape, params: &Bound, steps: &[Var]) -> Result<Vec<Var>> {
        let fwd = self.forward_cell.bind(params);
        match &self.backward_cell {
            Some(bwd) => bilstm_forward(tape, &fwd, &bwd.bind(params), steps),
            None => lstm_forward(tape, &fwd, steps, None),
        }
    }

    /// Logits (`B×1` or `B×2`) for a batch given as per-step `B×I` inputs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &Bound,
        steps: &[Var],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let outputs = self.encode(tape, params, steps)?;
        predictor_head(
            tape,
            &outputs,
            self.cfg.hidden,
            self.cfg.bidirectional,
            self.cfg.readout,
            HeadVars {
                weight: params[self.head_weight],
                bias: params[self.head_bias],
            },
            self.cfg.dropout,
            training,
            rng,
        )
    }

    /// Inference-mode logits for a batch of `T×I` sequences.
    pub fn predict(&self, sequences: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let steps = batch_steps(&mut tape, sequences)?;
        // Dropout is off, so the generator is never drawn from.
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(&mut tape, &params, &steps, false, &mut unused)?;
        Ok(tape.value(logits).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Summarizes encoder outputs, applies dropout, and projects to logits.
#[allow(clippy::too_many_arguments)]
pub fn predictor_head<R: Rng + ?Sized>(
    tape: &mut Tape,
    outputs: &[Var],
    hidden: usize,
    bidirectional: bool,
    readout: Readout,
    head: HeadVars,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let last = *outputs.last().ok_or_else(|| Error::input("empty sequence"))?;
    let axis = tape.value(last).ndim() - 1;
    let summary = match (readout, bidirectional) {
        (Readout::Final, true) => {
            let fwd = tape.slice(last, axis, 0, hidden)?;
            let bwd = tape.slice(outputs[0], axis, hidden, hidden)?;
            tape.concat(&[fwd, bwd], axis)?
        }
        (Readout::Final, false) => last,
        (Readout::Mean, _) => {
            let total = outputs[1..]
                .iter()
                .try_fold(outputs[0], |acc, &o| tape.add(acc, o))?;
            tape.scale(total, 1.0 / outputs.len() as f64)
        }
    };
    let dropped = tape.dropout(summary, dropout, training, rng)?;
    let logits = tape.linear(dropped, head.weight)?;
    tape.add_row(logits, head.bias)
}

/// Stacks a batch of `T×I` sequences into `T` constants of shape `B×I`.
pub fn batch_steps(tape: &mut Tape, sequences: &[&Tensor]) -> Result<Vec<Var>> {
    let first = sequences.first().ok_or_else(|| Error::input("empty batch"))?;
    let (t, i) = first.dims2()?;
    if t == 0 {
        return Err(Error::input("empty sequence"));
    }
    if let Some(bad) = sequences.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::Dimension {
            op: "batch_steps",
            lhs: first.shape().to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    (0..t)
        .map(|step| {
            let mut data = Vec::with_capacity(sequences.len() * i);
            for s in sequences {
                data.extend_from_slice(s.row(step));
            }
            Ok(tape.constant(Tensor::new(&[sequences.len(), i], data)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> (ParamStore, LstmCellParams) {
        let mut store = ParamStore::new();
        let cell = LstmCellParams::new(&mut store, "c", input, hidden, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in cell.weights.iter().chain(&cell.biases) {
            let shape = store.value(*id).shape().to_vec();
            store.get_mut(*id).value = Tensor::zeros(&shape);
        }
        (store, cell)
    }

    #[test]
    fn zero_cell_closed_forms() {
        let (store, cell) = zero_cell(3, 2);
        for c_prev in [0.0, 1.7, -0.4] {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            let vars = cell.bind(&params);
            let x = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
            let h = tape.constant(Tensor::zeros(&[2]));
            let c = tape.constant(Tensor::full(&[2], c_prev));
            let (h1, c1, gates) = lstm_cell_traced(&mut tape, &vars, x, h, c).unwrap();
            assert!(tape.value(gates.forget).data().iter().all(|&v| v == 0.5));
            assert!(tape.value(gates.candidate).data().iter().all(|&v| v == 0.0));
            for (&cv, &hv) in tape.value(c1).data().iter().zip(tape.value(h1).data()) {
                assert_eq!(cv, 0.5 * c_prev);
                assert_eq!(hv, 0.5 * (0.5 * c_prev).tanh());
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let (store, cell) = zero_cell(1, 1);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let vars = cell.bind(&params);
        assert!(matches!(lstm_forward(&mut tape, &vars, &[], None), Err(Error::Input(_))));
        assert!(bilstm_forward(&mut tape, &vars, &vars, &[]).is_err());
    }

    #[test]
    fn parameter_counts() {
        let uni = BiLstmConfig {
            bidirectional: false,
            ..BiLstmConfig::paper()
        };
        assert_eq!(count_recurrent_params(&uni, false).unwrap(), 542_720);
        assert_eq!(count_recurrent_params(&BiLstmConfig::paper(), false).unwrap(), 1_085_440);
        let tiny = BiLstmConfig {
            input: 1,
            hidden: 1,
            bidirectional: false,
            ..BiLstmConfig::paper()
        };
        assert_eq!(count_recurrent_params(&tiny, false).unwrap(), 12);
        let zero = BiLstmConfig { input: 0, ..tiny };
        assert!(count_recurrent_params(&zero, false).is_err());
    }

    #[test]
    fn model_count_matches_closed_form() {
        let cfg = BiLstmConfig {
            input: 7,
            hidden: 5,
            ..BiLstmConfig::paper()
        };
        let model = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(model.store.trainable_count(), count_recurrent_params(&cfg, true).unwrap());
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let cfg = BiLstmConfig {
            input: 4,
            hidden: 3,
            ..BiLstmConfig::paper()
        };
        let mut model = Predictor::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        model.store.get_mut(model.head_weight).value = Tensor::zeros(&[1, 6]);
        let seq = Tensor::randn(&[4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let logits = model.predict(&[&seq]).unwrap();
        assert_eq!(logits.data(), &[0.0]);
    }
}
