//! Parameterized layers on top of the tensor core: embedding tables,
//! LSTM cells, masked bidirectional encoding, and affine maps.

use rand::Rng;

use crate::tensor::{uniform_values, Tape, Tensor};
use crate::{Error, Result};

/// Lookup table mapping ids to dense rows. Row 0 is reserved for PAD and
/// stays a zero vector: its gradient is discarded before every optimizer
/// step and the row is re-zeroed after.
pub struct EmbeddingTable {
    pub table: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Uniform init in `[-bound, bound]` with the PAD row zeroed.
    pub fn init<R: Rng>(
        rng: &mut R,
        vocab_size: usize,
        dim: usize,
        bound: f64,
        trainable: bool,
    ) -> EmbeddingTable {
        let values = uniform_values(rng, vocab_size * dim, bound);
        EmbeddingTable::from_values(vocab_size, dim, values, trainable)
    }

    /// Table from explicit row values (pre-trained vectors); the PAD row is
    /// zeroed regardless of what was passed for it.
    pub fn from_values(
        vocab_size: usize,
        dim: usize,
        values: Vec<f64>,
        trainable: bool,
    ) -> EmbeddingTable {
        let table = if trainable {
            Tensor::param(vocab_size, dim, values)
        } else {
            Tensor::new(vocab_size, dim, values)
        };
        table.zero_values_row(0);
        EmbeddingTable { table, trainable }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Embed a token-id sequence: output row j = table row `ids[j]`.
    pub fn embed(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        tape.gather_rows(&self.table, ids)
    }

    /// Drop whatever gradient accumulated on the PAD row.
    pub fn discard_pad_gradient(&self) {
        self.table.zero_grad_row(0);
    }

    /// Force the PAD row back to the zero vector.
    pub fn reset_pad_row(&self) {
        self.table.zero_values_row(0);
    }
}

/// One direction of an LSTM: per-gate input weights `w_*` (input_dim x H),
/// recurrent weights `u_*` (H x H), and biases `b_*` (1 x H).
pub struct LstmParams {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub b_g: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    /// Uniform init in `[-1/sqrt(H), 1/sqrt(H)]`, except the forget-gate
    /// bias which starts at 1.0 so early training does not forget.
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, hidden_dim: usize) -> LstmParams {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let w = |r: &mut R, rows: usize, cols: usize| {
            Tensor::param(rows, cols, uniform_values(r, rows * cols, bound))
        };
        LstmParams {
            w_i: w(rng, input_dim, hidden_dim),
            u_i: w(rng, hidden_dim, hidden_dim),
            b_i: w(rng, 1, hidden_dim),
            w_f: w(rng, input_dim, hidden_dim),
            u_f: w(rng, hidden_dim, hidden_dim),
            b_f: Tensor::param(1, hidden_dim, vec![1.0; hidden_dim]),
            w_g: w(rng, input_dim, hidden_dim),
            u_g: w(rng, hidden_dim, hidden_dim),
            b_g: w(rng, 1, hidden_dim),
            w_o: w(rng, input_dim, hidden_dim),
            u_o: w(rng, hidden_dim, hidden_dim),
            b_o: w(rng, 1, hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_i.cols()
    }

    /// One recurrence step:
    /// `i,f,o = sigmoid(x w + h u + b)`, `g = tanh(x w + h u + b)`,
    /// `c' = f*c + i*g`, `h' = o*tanh(c')`. Returns `(h', c')`.
    pub fn cell(
        &self,
        tape: &Tape,
        x: &Tensor,
        h_prev: &Tensor,
        c_prev: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor| -> Result<Tensor> {
            let zx = tape.matmul(x, w)?;
            let zh = tape.matmul(h_prev, u)?;
            tape.add(&tape.add(&zx, &zh)?, b)
        };
        let i = tape.sigmoid(&gate(&self.w_i, &self.u_i, &self.b_i)?)?;
        let f = tape.sigmoid(&gate(&self.w_f, &self.u_f, &self.b_f)?)?;
        let g = tape.tanh(&gate(&self.w_g, &self.u_g, &self.b_g)?)?;
        let o = tape.sigmoid(&gate(&self.w_o, &self.u_o, &self.b_o)?)?;
        let c = tape.add(&tape.mul(&f, c_prev)?, &tape.mul(&i, &g)?)?;
        let h = tape.mul(&o, &tape.tanh(&c)?)?;
        Ok((h, c))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_i, &self.u_i, &self.b_i, &self.w_f, &self.u_f, &self.b_f,
            &self.w_g, &self.u_g, &self.b_g, &self.w_o, &self.u_o, &self.b_o,
        ]
    }
}

/// Two independent LSTM directions over the same input sequence.
pub struct BiLstm {
    pub forward_cell: LstmParams,
    pub backward_cell: LstmParams,
}

impl BiLstm {
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, hidden_dim: usize) -> BiLstm {
        BiLstm {
            forward_cell: LstmParams::init(rng, input_dim, hidden_dim),
            backward_cell: LstmParams::init(rng, input_dim, hidden_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward_cell.hidden_dim()
    }

    /// Encode `x` (len x input_dim) into len x 2H contextual states.
    /// Output row t is `[backward_h_t ; forward_h_t]`. Recurrent state is
    /// carried unchanged through masked (PAD) positions and their output
    /// rows are exactly zero.
    pub fn encode(&self, tape: &Tape, x: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let len = x.rows();
        if mask.len() != len {
            return Err(Error::Contract(format!(
                "sequence mask length {} does not match {} positions",
                mask.len(),
                len
            )));
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::DegenerateInput(
                "sequence with every position masked".into(),
            ));
        }
        let h = self.hidden_dim();
        let scan = |cell: &LstmParams, order: &mut dyn Iterator<Item = usize>| {
            let mut states: Vec<Option<Tensor>> = vec![None; len];
            let mut hidden = Tensor::zeros(1, h);
            let mut carry = Tensor::zeros(1, h);
            for t in order {
                if mask[t] {
                    let row = tape.gather_rows(x, &[t])?;
                    let (nh, nc) = cell.cell(tape, &row, &hidden, &carry)?;
                    hidden = nh;
                    carry = nc;
                    states[t] = Some(hidden.clone());
                }
            }
            Ok::<_, Error>(states)
        };
        let fwd = scan(&self.forward_cell, &mut (0..len))?;
        let bwd = scan(&self.backward_cell, &mut (0..len).rev())?;
        let zero_row = Tensor::zeros(1, 2 * h);
        let mut rows = Vec::with_capacity(len);
        for t in 0..len {
            match (&bwd[t], &fwd[t]) {
                (Some(b), Some(f)) => rows.push(tape.concat_cols(b, f)?),
                _ => rows.push(zero_row.clone()),
            }
        }
        tape.stack_rows(&rows)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.forward_cell.tensors();
        v.extend(self.backward_cell.tensors());
        v
    }
}

/// `x (r x p) * w (p x q) + b`, the bias broadcast over rows when present.
pub fn linear(tape: &Tape, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(&y, b),
        None => Ok(y),
    }
}
