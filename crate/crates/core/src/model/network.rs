//! Forward and reverse passes of the length model.
//!
//! Everything runs on column batches: a timestep is a `2J x B` matrix whose
//! columns are independent sequences advanced in lockstep. Single-sequence
//! entry points use `B = 1` and go through exactly the same arithmetic, so
//! the online stepper and the batch pass agree bit for bit.

use nalgebra::{DMatrix, DVector};

use super::params::{GruParams, LengthModelParams};
use crate::error::{Error, Result};
use crate::skeleton::BoneLengths;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(m: &mut DMatrix<f64>, bias: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += bias.column(0);
    }
}

/// Activations of one GRU step kept for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    xp: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    update: DMatrix<f64>,
    reset: DMatrix<f64>,
    cand: DMatrix<f64>,
}

pub(crate) fn project_batch(params: &LengthModelParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut xp = &params.w_proj * x;
    add_bias(&mut xp, &params.b_proj);
    xp
}

/// One GRU step on a batch:
///
/// ```text
/// z = sigmoid(W_z x + U_z h + b_z)
/// r = sigmoid(W_r x + U_r h + b_r)
/// c = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * c
/// ```
pub(crate) fn gru_step(
    gru: &GruParams,
    xp: &DMatrix<f64>,
    h_prev: &DMatrix<f64>,
) -> (DMatrix<f64>, StepCache) {
    let mut a_z = &gru.w_update * xp + &gru.u_update * h_prev;
    add_bias(&mut a_z, &gru.b_update);
    let update = a_z.map(sigmoid);

    let mut a_r = &gru.w_reset * xp + &gru.u_reset * h_prev;
    add_bias(&mut a_r, &gru.b_reset);
    let reset = a_r.map(sigmoid);

    let gated = reset.component_mul(h_prev);
    let mut a_c = &gru.w_cand * xp + &gru.u_cand * &gated;
    add_bias(&mut a_c, &gru.b_cand);
    let cand = a_c.map(f64::tanh);

    let h = h_prev.zip_zip_map(&update, &cand, |h, z, c| (1.0 - z) * h + z * c);
    let cache = StepCache {
        xp: xp.clone(),
        h_prev: h_prev.clone(),
        update,
        reset,
        cand,
    };
    (h, cache)
}

/// Reverse pass of [`gru_step`]. Accumulates weight gradients into `grads`
/// and returns `(dL/dh_prev, dL/dx')`.
pub(crate) fn gru_step_backward(
    gru: &GruParams,
    cache: &StepCache,
    dh: &DMatrix<f64>,
    grads: &mut GruParams,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let StepCache {
        xp,
        h_prev,
        update,
        reset,
        cand,
    } = cache;
    let d_cand = dh.component_mul(update);
    let d_update = dh.zip_zip_map(cand, h_prev, |d, c, h| d * (c - h));
    let mut dh_prev = dh.zip_map(update, |d, z| d * (1.0 - z));

    let da_c = d_cand.zip_map(cand, |d, c| d * (1.0 - c * c));
    let gated = reset.component_mul(h_prev);
    grads.w_cand += &da_c * xp.transpose();
    grads.u_cand += &da_c * gated.transpose();
    grads.b_cand += da_c.column_sum();
    let d_gated = gru.u_cand.tr_mul(&da_c);
    let d_reset = d_gated.component_mul(h_prev);
    dh_prev += d_gated.component_mul(reset);

    let da_r = d_reset.zip_map(reset, |d, r| d * r * (1.0 - r));
    grads.w_reset += &da_r * xp.transpose();
    grads.u_reset += &da_r * h_prev.transpose();
    grads.b_reset += da_r.column_sum();
    dh_prev += gru.u_reset.tr_mul(&da_r);

    let da_z = d_update.zip_map(update, |d, z| d * z * (1.0 - z));
    grads.w_update += &da_z * xp.transpose();
    grads.u_update += &da_z * h_prev.transpose();
    grads.b_update += da_z.column_sum();
    dh_prev += gru.u_update.tr_mul(&da_z);

    let dxp = gru.w_update.tr_mul(&da_z) + gru.w_reset.tr_mul(&da_r) + gru.w_cand.tr_mul(&da_c);
    (dh_prev, dxp)
}

/// Affine input projection of one flattened keypoint frame.
pub fn project_input(x: &[f64], params: &LengthModelParams) -> Result<DVector<f64>> {
    let dims = params.dims();
    if x.len() != dims.input_dim() {
        return Err(Error::dims("keypoint frame", dims.input_dim(), x.len()));
    }
    let xp = project_batch(params, &DMatrix::from_column_slice(x.len(), 1, x));
    Ok(DVector::from_column_slice(xp.as_slice()))
}

/// Single GRU step on one projected frame.
pub fn gru_cell(xp: &DVector<f64>, h_prev: &DVector<f64>, gru: &GruParams) -> Result<DVector<f64>> {
    if xp.len() != gru.input_dim() {
        return Err(Error::dims("GRU input", gru.input_dim(), xp.len()));
    }
    if h_prev.len() != gru.hidden_dim() {
        return Err(Error::dims("GRU hidden state", gru.hidden_dim(), h_prev.len()));
    }
    let xp = DMatrix::from_column_slice(xp.len(), 1, xp.as_slice());
    let h = DMatrix::from_column_slice(h_prev.len(), 1, h_prev.as_slice());
    let (h, _) = gru_step(gru, &xp, &h);
    Ok(DVector::from_column_slice(h.as_slice()))
}

/// Everything the reverse pass needs from a batched forward pass.
pub(crate) struct ForwardTrace {
    pub(crate) forward: Vec<StepCache>,
    /// `backward[k]` consumed frame `T - 1 - k`.
    pub(crate) backward: Vec<StepCache>,
    pub(crate) hidden: DMatrix<f64>,
    pub(crate) output: DMatrix<f64>,
}

fn run_direction<'a>(
    gru: &GruParams,
    projected: impl Iterator<Item = &'a DMatrix<f64>>,
    batch: usize,
    keep: bool,
) -> (DMatrix<f64>, Vec<StepCache>) {
    let mut h = DMatrix::zeros(gru.hidden_dim(), batch);
    let mut caches = Vec::new();
    for xp in projected {
        let (next, cache) = gru_step(gru, xp, &h);
        if keep {
            caches.push(cache);
        }
        h = next;
    }
    (h, caches)
}

/// Batched forward pass over `T` timesteps of `2J x B` inputs.
pub(crate) fn forward_batch(
    params: &LengthModelParams,
    frames: &[DMatrix<f64>],
    keep: bool,
) -> ForwardTrace {
    let batch = frames[0].ncols();
    let projected: Vec<DMatrix<f64>> = frames.iter().map(|x| project_batch(params, x)).collect();
    let (h_fwd, fwd_caches) = run_direction(&params.forward, projected.iter(), batch, keep);
    let (hidden, bwd_caches) = match &params.backward {
        Some(bwd) => {
            let (h_bwd, caches) = run_direction(bwd, projected.iter().rev(), batch, keep);
            let c_prime = h_fwd.nrows();
            let mut hidden = DMatrix::zeros(2 * c_prime, batch);
            hidden.rows_mut(0, c_prime).copy_from(&h_fwd);
            hidden.rows_mut(c_prime, c_prime).copy_from(&h_bwd);
            (hidden, caches)
        }
        None => (h_fwd, Vec::new()),
    };
    let output = &params.w_head * &hidden;
    ForwardTrace {
        forward: fwd_caches,
        backward: bwd_caches,
        hidden,
        output,
    }
}

fn sequence_frames(x: &[Vec<f64>], params: &LengthModelParams) -> Result<Vec<DMatrix<f64>>> {
    if x.is_empty() {
        return Err(Error::InvalidValue("input sequence has no frames".into()));
    }
    let dim = params.dims().input_dim();
    x.iter()
        .map(|f| {
            if f.len() != dim {
                Err(Error::dims("keypoint frame", dim, f.len()))
            } else {
                Ok(DMatrix::from_column_slice(dim, 1, f))
            }
        })
        .collect()
}

/// Bidirectional prediction: both directions start from zero state, their
/// final hidden states are concatenated and mapped by the head.
pub fn forward_bigru(x: &[Vec<f64>], params: &LengthModelParams) -> Result<BoneLengths> {
    if !params.is_bidirectional() {
        return Err(Error::dims("GRU directions", 2, 1));
    }
    predict(x, params)
}

/// Unidirectional pass over the whole sequence; the result equals the online
/// stepper's output after the last frame.
pub fn forward_unidirectional(x: &[Vec<f64>], params: &LengthModelParams) -> Result<BoneLengths> {
    if params.is_bidirectional() {
        return Err(Error::dims("GRU directions", 1, 2));
    }
    predict(x, params)
}

/// Lengths for one sequence of flattened, normalized keypoint frames with
/// whichever recurrence `params` carries.
pub fn predict(x: &[Vec<f64>], params: &LengthModelParams) -> Result<BoneLengths> {
    let frames = sequence_frames(x, params)?;
    let trace = forward_batch(params, &frames, false);
    Ok(BoneLengths::from_raw(trace.output.as_slice().to_vec()))
}

/// Hidden state carried between frames by the online model.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineState {
    pub hidden: DVector<f64>,
    pub frames_seen: u64,
}

impl OnlineState {
    pub fn new(params: &LengthModelParams) -> Self {
        Self {
            hidden: DVector::zeros(params.forward.hidden_dim()),
            frames_seen: 0,
        }
    }

    /// Little-endian `u64` frame count followed by the `f64` hidden vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.hidden.len());
        out.extend_from_slice(&self.frames_seen.to_le_bytes());
        for v in self.hidden.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || (bytes.len() - 8) % 8 != 0 {
            return Err(Error::InvalidValue(format!(
                "online state must be 8 + 8k bytes, got {}",
                bytes.len()
            )));
        }
        let word = |i: usize| <[u8; 8]>::try_from(&bytes[i..i + 8]).expect("8 bytes");
        let frames_seen = u64::from_le_bytes(word(0));
        let hidden: Vec<f64> = (8..bytes.len())
            .step_by(8)
            .map(|i| f64::from_le_bytes(word(i)))
            .collect();
        if !hidden.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("online state is not finite".into()));
        }
        Ok(Self {
            hidden: DVector::from_vec(hidden),
            frames_seen,
        })
    }
}

/// Advances the online model by one frame and emits its current estimate.
pub fn forward_online(
    state: &OnlineState,
    x: &[f64],
    params: &LengthModelParams,
) -> Result<(OnlineState, BoneLengths)> {
    if params.is_bidirectional() {
        return Err(Error::dims("GRU directions", 1, 2));
    }
    let dims = params.dims();
    if x.len() != dims.input_dim() {
        return Err(Error::dims("keypoint frame", dims.input_dim(), x.len()));
    }
    if state.hidden.len() != dims.c_prime {
        return Err(Error::dims("online hidden state", dims.c_prime, state.hidden.len()));
    }
    let xp = project_batch(params, &DMatrix::from_column_slice(x.len(), 1, x));
    let h = DMatrix::from_column_slice(dims.c_prime, 1, state.hidden.as_slice());
    let (h, _) = gru_step(&params.forward, &xp, &h);
    let out = &params.w_head * &h;
    Ok((
        OnlineState {
            hidden: DVector::from_column_slice(h.as_slice()),
            frames_seen: state.frames_seen + 1,
        },
        BoneLengths::from_raw(out.as_slice().to_vec()),
    ))
}

/// Mean absolute bone-length error.
pub fn length_loss(pred: &BoneLengths, truth: &BoneLengths) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dims("bone lengths", truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidValue("no bones to compare".into()));
    }
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Subgradient of `|x|` with the value 0 at 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean batch loss and its exact gradient with respect to every parameter.
///
/// `frames[t]` is `2J x B`; `targets` is `(J-1) x B`. The loss is the mean
/// over the batch of the per-sample mean absolute error.
pub fn loss_and_gradients(
    params: &LengthModelParams,
    frames: &[DMatrix<f64>],
    targets: &DMatrix<f64>,
) -> Result<(f64, LengthModelParams)> {
    let dims = params.dims();
    let Some(first) = frames.first() else {
        return Err(Error::InvalidValue("batch has no timesteps".into()));
    };
    let batch = first.ncols();
    for x in frames {
        if x.nrows() != dims.input_dim() {
            return Err(Error::dims("keypoint frame", dims.input_dim(), x.nrows()));
        }
        if x.ncols() != batch {
            return Err(Error::dims("batch width", batch, x.ncols()));
        }
    }
    if targets.shape() != (dims.bones(), batch) {
        return Err(Error::dims("targets", dims.bones() * batch, targets.len()));
    }

    let trace = forward_batch(params, frames, true);
    let scale = 1.0 / (dims.bones() * batch) as f64;
    let residual = &trace.output - targets;
    let loss = residual.iter().map(|r| r.abs()).sum::<f64>() * scale;

    let mut grads = params.zeros_like();
    let d_out = residual.map(|r| sign(r) * scale);
    grads.w_head = &d_out * trace.hidden.transpose();
    let d_hidden = params.w_head.tr_mul(&d_out);

    let steps = frames.len();
    let mut d_proj: Vec<DMatrix<f64>> = vec![DMatrix::zeros(dims.c, batch); steps];
    let mut dh = d_hidden.rows(0, dims.c_prime).into_owned();
    for t in (0..steps).rev() {
        let (prev, dxp) = gru_step_backward(&params.forward, &trace.forward[t], &dh, &mut grads.forward);
        d_proj[t] += dxp;
        dh = prev;
    }
    if let (Some(bwd), Some(bwd_grads)) = (&params.backward, grads.backward.as_mut()) {
        let mut dh = d_hidden.rows(dims.c_prime, dims.c_prime).into_owned();
        for k in (0..steps).rev() {
            let (prev, dxp) = gru_step_backward(bwd, &trace.backward[k], &dh, bwd_grads);
            d_proj[steps - 1 - k] += dxp;
            dh = prev;
        }
    }
    for (dxp, x) in d_proj.iter().zip(frames) {
        grads.w_proj += dxp * x.transpose();
        grads.b_proj += dxp.column_sum();
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelDims;
    use crate::rng;

    fn dims(bidirectional: bool) -> ModelDims {
        ModelDims {
            joints: 3,
            c: 3,
            c_prime: 2,
            bidirectional,
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let p = LengthModelParams::zeros(dims(true)).unwrap();
        let x = vec![vec![0.3, -0.1, 0.2, 0.5, -0.4, 0.9]; 5];
        assert_eq!(forward_bigru(&x, &p).unwrap().as_slice(), &[0.0, 0.0]);
        let h = gru_cell(&DVector::zeros(3), &DVector::zeros(2), &p.forward).unwrap();
        assert_eq!(h, DVector::zeros(2));
    }

    #[test]
    fn projection_with_identity_weights() {
        let d = ModelDims {
            joints: 2,
            c: 4,
            c_prime: 1,
            bidirectional: false,
        };
        let mut p = LengthModelParams::zeros(d).unwrap();
        p.w_proj = DMatrix::identity(4, 4);
        let x = [0.5, -1.0, 2.0, 3.5];
        assert_eq!(project_input(&x, &p).unwrap().as_slice(), &x);
        assert!(project_input(&x[..3], &p).is_err());
    }

    #[test]
    fn saturated_update_gate_passes_candidate() {
        let mut gru = GruParams::zeros(1, 1);
        gru.b_update[(0, 0)] = 50.0;
        gru.b_cand[(0, 0)] = 0.7;
        let h = gru_cell(&DVector::from_element(1, 0.3), &DVector::from_element(1, -0.4), &gru).unwrap();
        assert!((h[0] - 0.7f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let a = BoneLengths::from_raw(vec![1.0, 2.0]);
        let b = BoneLengths::from_raw(vec![1.0, 3.0]);
        assert_eq!(length_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(length_loss(&a, &b).unwrap(), 0.5);
        assert!(length_loss(&a, &BoneLengths::from_raw(vec![1.0])).is_err());
    }

    #[test]
    fn online_rejects_bidirectional_model() {
        let p = LengthModelParams::zeros(dims(true)).unwrap();
        let state = OnlineState::new(&p);
        assert!(forward_online(&state, &[0.0; 6], &p).is_err());
    }

    #[test]
    fn online_state_bytes_round_trip() {
        let p = LengthModelParams::init(dims(false), &mut rng::seeded(4)).unwrap();
        let mut state = OnlineState::new(&p);
        for t in 0..3 {
            let x = vec![0.1 * t as f64; 6];
            state = forward_online(&state, &x, &p).unwrap().0;
        }
        let back = OnlineState::from_bytes(&state.to_bytes()).unwrap();
        assert_eq!(back, state);
        let x = [0.2; 6];
        assert_eq!(
            forward_online(&back, &x, &p).unwrap().1,
            forward_online(&state, &x, &p).unwrap().1
        );
        assert!(OnlineState::from_bytes(&[0u8; 5]).is_err());
    }

    #[test]
    fn gradient_of_head_at_zero_residual_is_zero() {
        let p = LengthModelParams::init(dims(true), &mut rng::seeded(9)).unwrap();
        let frames = vec![DMatrix::from_element(6, 1, 0.2); 3];
        let out = forward_batch(&p, &frames, false).output;
        let (loss, grads) = loss_and_gradients(&p, &frames, &out).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.w_head.iter().all(|g| *g == 0.0));
    }
}
