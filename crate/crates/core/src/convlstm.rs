//! Peephole-free ConvLSTM cell.
//!
//! ```text
//! i  = σ(W_i∗x + U_i∗h + b_i)      f = σ(W_f∗x + U_f∗h + b_f)
//! o  = σ(W_o∗x + U_o∗h + b_o)      g = tanh(W_g∗x + U_g∗h + b_g)
//! c' = f⊙c + i⊙g                   h' = o⊙tanh(c')
//! ```
//!
//! All convolutions use stride 1 and "same" padding `(k-1)/2`. Gate order in
//! every serialized form is i, f, o, g.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Tape, Tensor, Var};

/// Nodes one [`TapeConvLstm::step`] appends to a tape.
pub const TAPE_NODES_PER_STEP: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    /// `[F, C, k, k]`
    pub input_kernel: Tensor,
    /// `[F, F, k, k]`
    pub hidden_kernel: Tensor,
    /// `[F]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmWeights {
    pub input: GateWeights,
    pub forget: GateWeights,
    pub output: GateWeights,
    pub candidate: GateWeights,
}

impl ConvLstmWeights {
    pub fn new(
        input: GateWeights,
        forget: GateWeights,
        output: GateWeights,
        candidate: GateWeights,
    ) -> Result<Self> {
        let w = Self {
            input,
            forget,
            output,
            candidate,
        };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        let shape = self.input.input_kernel.shape();
        let (f, c, k) = match shape[..] {
            [f, c, k, k2] if k == k2 => (f, c, k),
            _ => {
                return Err(Error::shape(format!(
                    "ConvLSTM input kernel must be [F,C,k,k], got {shape:?}"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::contract(format!("ConvLSTM kernel size {k} is not odd")));
        }
        if f != c {
            return Err(Error::shape(format!(
                "ConvLSTM filter count {f} must equal the encoded channel count {c}"
            )));
        }
        for g in self.gates() {
            if g.input_kernel.shape() != [f, c, k, k]
                || g.hidden_kernel.shape() != [f, f, k, k]
                || g.bias.shape() != [f]
            {
                return Err(Error::shape(format!(
                    "inconsistent ConvLSTM gate shapes {:?} / {:?} / {:?}",
                    g.input_kernel.shape(),
                    g.hidden_kernel.shape(),
                    g.bias.shape()
                )));
            }
        }
        Ok(())
    }

    /// Forget bias +1, everything else uniform in `±1/sqrt(fan_in)` where
    /// `fan_in = (C + F)·k²`.
    pub fn init<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (((2 * channels) * kernel * kernel) as f64).sqrt();
        let mut gate = |forget: bool| GateWeights {
            input_kernel: Tensor::uniform(&[channels, channels, kernel, kernel], bound, rng),
            hidden_kernel: Tensor::uniform(&[channels, channels, kernel, kernel], bound, rng),
            bias: if forget {
                Tensor::full(&[channels], 1.0)
            } else {
                Tensor::uniform(&[channels], bound, rng)
            },
        };
        let input = gate(false);
        let forget = gate(true);
        let output = gate(false);
        let candidate = gate(false);
        Self::new(input, forget, output, candidate)
    }

    pub fn zeros(channels: usize, kernel: usize) -> Result<Self> {
        let gate = || GateWeights {
            input_kernel: Tensor::zeros(&[channels, channels, kernel, kernel]),
            hidden_kernel: Tensor::zeros(&[channels, channels, kernel, kernel]),
            bias: Tensor::zeros(&[channels]),
        };
        Self::new(gate(), gate(), gate(), gate())
    }

    pub fn gates(&self) -> [&GateWeights; 4] {
        [&self.input, &self.forget, &self.output, &self.candidate]
    }

    pub fn filters(&self) -> usize {
        self.input.input_kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.input.input_kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.input.input_kernel.shape()[2]
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    /// The twelve tensors in serialization order: per gate (i, f, o, g) the
    /// input kernel, hidden kernel and bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.gates()
            .into_iter()
            .flat_map(|g| [&g.input_kernel, &g.hidden_kernel, &g.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.output,
            &mut self.candidate,
        ]
        .into_iter()
        .flat_map(|g| [&mut g.input_kernel, &mut g.hidden_kernel, &mut g.bias])
        .collect()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 12 {
            return Err(Error::contract(format!(
                "ConvLSTM needs 12 tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut gate = || GateWeights {
            input_kernel: it.next().unwrap(),
            hidden_kernel: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let (i, f, o, g) = (gate(), gate(), gate(), gate());
        Self::new(i, f, o, g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(filters: usize, height: usize, width: usize) -> Self {
        Self {
            h: Tensor::zeros(&[filters, height, width]),
            c: Tensor::zeros(&[filters, height, width]),
        }
    }
}

fn gate_preactivation(x: &Tensor, h: &Tensor, g: &GateWeights, pad: usize) -> Result<Tensor> {
    let a = ops::conv2d(x, &g.input_kernel, 1, pad)?;
    let b = ops::conv2d(h, &g.hidden_kernel, 1, pad)?;
    ops::add_channel_bias(&ops::add(&a, &b)?, &g.bias)
}

/// One recurrence step.
pub fn convlstm_step(x: &Tensor, state: &ConvLstmState, w: &ConvLstmWeights) -> Result<ConvLstmState> {
    let (c, h, wd) = x.chw()?;
    if c != w.in_channels() {
        return Err(Error::shape(format!(
            "frame has {c} channels, ConvLSTM expects {}",
            w.in_channels()
        )));
    }
    if state.h.shape() != [w.filters(), h, wd] || state.c.shape() != state.h.shape() {
        return Err(Error::shape(format!(
            "state {:?} does not match input {:?}",
            state.h.shape(),
            x.shape()
        )));
    }
    let pad = w.padding();
    let i = ops::sigmoid(&gate_preactivation(x, &state.h, &w.input, pad)?);
    let f = ops::sigmoid(&gate_preactivation(x, &state.h, &w.forget, pad)?);
    let o = ops::sigmoid(&gate_preactivation(x, &state.h, &w.output, pad)?);
    let g = ops::tanh(&gate_preactivation(x, &state.h, &w.candidate, pad)?);
    let c_next = ops::add(&ops::mul(&f, &state.c)?, &ops::mul(&i, &g)?)?;
    let h_next = ops::mul(&o, &ops::tanh(&c_next))?;
    Ok(ConvLstmState {
        h: h_next,
        c: c_next,
    })
}

/// Folds [`convlstm_step`] over `features` starting from the zero state.
/// `spatial` is the `(H, W)` of the state and is what an empty history
/// returns zeros for.
pub fn encode_history(
    features: &[Tensor],
    w: &ConvLstmWeights,
    spatial: (usize, usize),
) -> Result<ConvLstmState> {
    let mut state = ConvLstmState::zeros(w.filters(), spatial.0, spatial.1);
    for (t, x) in features.iter().enumerate() {
        let (_, h, wd) = x.chw()?;
        if (h, wd) != spatial {
            return Err(Error::shape(format!(
                "history frame {t} is {h}x{wd}, expected {}x{}",
                spatial.0, spatial.1
            )));
        }
        state = convlstm_step(x, &state, w)?;
    }
    Ok(state)
}

/// ConvLSTM weights registered on a tape.
#[derive(Clone, Debug)]
pub struct TapeConvLstm {
    /// Per gate (i, f, o, g): input kernel, hidden kernel, bias.
    pub gates: [[Var; 3]; 4],
    padding: usize,
    filters: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub h: Var,
    pub c: Var,
}

impl TapeConvLstm {
    pub fn register(tape: &mut Tape, w: &ConvLstmWeights, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut gates = Vec::with_capacity(4);
        for g in w.gates() {
            gates.push([leaf(&g.input_kernel), leaf(&g.hidden_kernel), leaf(&g.bias)]);
        }
        Self {
            gates: gates.try_into().unwrap(),
            padding: w.padding(),
            filters: w.filters(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.gates.iter().flatten().copied()
    }

    pub fn zero_state(&self, tape: &mut Tape, height: usize, width: usize) -> TapeState {
        let z = ConvLstmState::zeros(self.filters, height, width);
        TapeState {
            h: tape.constant(z.h),
            c: tape.constant(z.c),
        }
    }

    fn gate(&self, tape: &mut Tape, idx: usize, x: Var, h: Var) -> Result<Var> {
        let [wx, wh, b] = self.gates[idx];
        let a = tape.conv2d(x, wx, 1, self.padding)?;
        let c = tape.conv2d(h, wh, 1, self.padding)?;
        let s = tape.add(a, c)?;
        tape.add_bias(s, b)
    }

    /// Records one recurrence step; appends exactly
    /// [`TAPE_NODES_PER_STEP`] nodes.
    pub fn step(&self, tape: &mut Tape, x: Var, state: TapeState) -> Result<TapeState> {
        let pi = self.gate(tape, 0, x, state.h)?;
        let i = tape.sigmoid(pi);
        let pf = self.gate(tape, 1, x, state.h)?;
        let f = tape.sigmoid(pf);
        let po = self.gate(tape, 2, x, state.h)?;
        let o = tape.sigmoid(po);
        let pg = self.gate(tape, 3, x, state.h)?;
        let g = tape.tanh(pg);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(TapeState { h, c })
    }
}
