use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// Weights of one GRU direction. Input matrices are `c' x c`, recurrent
/// matrices `c' x c'`, biases `c' x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_update: DMatrix<f64>,
    pub w_reset: DMatrix<f64>,
    pub w_cand: DMatrix<f64>,
    pub u_update: DMatrix<f64>,
    pub u_reset: DMatrix<f64>,
    pub u_cand: DMatrix<f64>,
    pub b_update: DMatrix<f64>,
    pub b_reset: DMatrix<f64>,
    pub b_cand: DMatrix<f64>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || DMatrix::zeros(hidden, input);
        let u = || DMatrix::zeros(hidden, hidden);
        let b = || DMatrix::zeros(hidden, 1);
        Self {
            w_update: w(),
            w_reset: w(),
            w_cand: w(),
            u_update: u(),
            u_reset: u(),
            u_cand: u(),
            b_update: b(),
            b_reset: b(),
            b_cand: b(),
        }
    }

    fn random(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bw = 1.0 / (input as f64).sqrt();
        let bu = 1.0 / (hidden as f64).sqrt();
        let mut m = |rows, cols, bound: f64| {
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
        };
        Self {
            w_update: m(hidden, input, bw),
            w_reset: m(hidden, input, bw),
            w_cand: m(hidden, input, bw),
            u_update: m(hidden, hidden, bu),
            u_reset: m(hidden, hidden, bu),
            u_cand: m(hidden, hidden, bu),
            b_update: m(hidden, 1, bu),
            b_reset: m(hidden, 1, bu),
            b_cand: m(hidden, 1, bu),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_update.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_update.nrows()
    }

    fn tensors(&self) -> [(&'static str, &DMatrix<f64>); 9] {
        [
            ("w_update", &self.w_update),
            ("w_reset", &self.w_reset),
            ("w_cand", &self.w_cand),
            ("u_update", &self.u_update),
            ("u_reset", &self.u_reset),
            ("u_cand", &self.u_cand),
            ("b_update", &self.b_update),
            ("b_reset", &self.b_reset),
            ("b_cand", &self.b_cand),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 9] {
        [
            &mut self.w_update,
            &mut self.w_reset,
            &mut self.w_cand,
            &mut self.u_update,
            &mut self.u_reset,
            &mut self.u_cand,
            &mut self.b_update,
            &mut self.b_reset,
            &mut self.b_cand,
        ]
    }
}

/// Full length-model parameters: input projection, one or two GRU
/// directions and the bias-free regression head.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthModelParams {
    /// `c x 2J`
    pub w_proj: DMatrix<f64>,
    /// `c x 1`
    pub b_proj: DMatrix<f64>,
    pub forward: GruParams,
    /// Present for the bidirectional model.
    pub backward: Option<GruParams>,
    /// `(J-1) x h_dim`, `h_dim = 2c'` (bidirectional) or `c'`.
    pub w_head: DMatrix<f64>,
}

/// Dimensions fixing the shape of every tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub joints: usize,
    pub c: usize,
    pub c_prime: usize,
    pub bidirectional: bool,
}

impl ModelDims {
    pub fn input_dim(&self) -> usize {
        2 * self.joints
    }

    pub fn bones(&self) -> usize {
        self.joints - 1
    }

    pub fn head_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.c_prime
        } else {
            self.c_prime
        }
    }

    fn validate(&self) -> Result<()> {
        if self.joints < 2 || self.c == 0 || self.c_prime == 0 {
            return Err(Error::InvalidValue(format!(
                "model dims must be positive with at least two joints: {self:?}"
            )));
        }
        Ok(())
    }
}

impl LengthModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            w_proj: DMatrix::zeros(dims.c, dims.input_dim()),
            b_proj: DMatrix::zeros(dims.c, 1),
            forward: GruParams::zeros(dims.c, dims.c_prime),
            backward: dims
                .bidirectional
                .then(|| GruParams::zeros(dims.c, dims.c_prime)),
            w_head: DMatrix::zeros(dims.bones(), dims.head_dim()),
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let bp = 1.0 / (dims.input_dim() as f64).sqrt();
        let w_proj =
            DMatrix::from_fn(dims.c, dims.input_dim(), |_, _| rng.random_range(-bp..=bp));
        let b_proj = DMatrix::from_fn(dims.c, 1, |_, _| rng.random_range(-bp..=bp));
        let forward = GruParams::random(dims.c, dims.c_prime, rng);
        let backward = dims
            .bidirectional
            .then(|| GruParams::random(dims.c, dims.c_prime, rng));
        let bh = 1.0 / (dims.head_dim() as f64).sqrt();
        let w_head =
            DMatrix::from_fn(dims.bones(), dims.head_dim(), |_, _| rng.random_range(-bh..=bh));
        Ok(Self {
            w_proj,
            b_proj,
            forward,
            backward,
            w_head,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            joints: self.w_proj.ncols() / 2,
            c: self.w_proj.nrows(),
            c_prime: self.forward.hidden_dim(),
            bidirectional: self.backward.is_some(),
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims()).expect("dims of an existing model are valid")
    }

    /// Every tensor with its checkpoint name, in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = vec![
            ("proj.w".to_string(), &self.w_proj),
            ("proj.b".to_string(), &self.b_proj),
        ];
        for (name, t) in self.forward.tensors() {
            out.push((format!("fwd.{name}"), t));
        }
        if let Some(bwd) = &self.backward {
            for (name, t) in bwd.tensors() {
                out.push((format!("bwd.{name}"), t));
            }
        }
        out.push(("head.w".to_string(), &self.w_head));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = vec![&mut self.w_proj, &mut self.b_proj];
        out.extend(self.forward.tensors_mut());
        if let Some(bwd) = &mut self.backward {
            out.extend(bwd.tensors_mut());
        }
        out.push(&mut self.w_head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let others = other.named_tensors();
        for (mine, (_, theirs)) in self.tensors_mut().into_iter().zip(others) {
            *mine += theirs * scale;
        }
    }
}
