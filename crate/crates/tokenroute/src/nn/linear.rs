//! Small layer builders over the tape: affine maps, two-layer GeLU MLPs,
//! layer-norm parameter pairs. Weight init is Gaussian std 0.02 unless a
//! caller overrides; biases start at zero, norm gains at one.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::param::{ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), Tensor::randn(&[d_in, d_out], INIT_STD, rng))?;
        let b = if bias {
            Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row_vec(y, b)
            }
            None => Ok(y),
        }
    }
}

/// linear → GeLU → linear.
#[derive(Debug, Clone, Copy)]
pub struct GeluMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl GeluMlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(GeluMlp {
            l1: Linear::new(store, &format!("{prefix}.fc1"), d_in, hidden, true, rng)?,
            l2: Linear::new(store, &format!("{prefix}.fc2"), hidden, d_out, true, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.l1.apply(tape, store, x)?;
        let h = tape.gelu(h);
        self.l2.apply(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[1, d], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, d]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}
