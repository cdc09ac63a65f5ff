//! The recurrent cell: gate computation from top-down context, the
//! CTR-layer update/summarize step with Hawkes decay, the CVR-layer
//! update/copy step, hidden-state emission, and sigmoid readout heads.
//!
//! Each layer keeps two tracks per step: a behavioral cell state that
//! absorbs context and user behavior, and an inherent state that carries
//! only what the item is worth on its own. In the CTR layer the
//! behavioral state relaxes toward the inherent one between items at a
//! learned, strictly positive decay rate; the inherent state never
//! decays. The CVR layer updates only when a click hands it a summary
//! and copies itself bit-exactly otherwise.

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{Binding, DiffError, ParamId, ParamSet, Tape, Tensor, Var};

/// Softplus scale for the decay head.
pub const DEFAULT_GAMMA: f64 = 5.0;

/// Width of the behavior embedding fed to the optional decay head:
/// one slot for "clicked", one for "converted".
pub const BEHAVIOR_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Ctr,
    Cvr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Behavioral,
    Inherent,
}

/// Errors raised by cell operations and the session rollout built on them.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("hawkes_decay: dt must be nonnegative, got {dt}")]
    NegativeDt { dt: f64 },
    #[error("emit_hidden: CVR copy step requires the previous hidden pair")]
    MissingPrevHidden,
    #[error("forward_session: session must contain at least one item")]
    EmptySession,
    #[error("item features have length {got}, model expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("predictions require a forward pass in {expected:?} mode, got {got:?}")]
    ModeMismatch {
        expected: crate::network::Mode,
        got: crate::network::Mode,
    },
    #[error("length mismatch: {lhs} predictions vs {rhs} labels")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("pdf_loss requires an event index; use the cdf losses instead")]
    MissingEvent,
    #[error("{0}")]
    Invalid(String),
}

/// Model dimensions fixed at parameter-construction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub hidden: usize,
    pub feature: usize,
    /// Number of one-hot position slots; later positions clamp to the last slot.
    pub max_positions: usize,
}

impl Dims {
    /// Width of the gate input `[top_down || features || position]`.
    pub fn gate_input(&self) -> usize {
        self.hidden + self.feature + self.max_positions
    }
}

/// Affine transforms for one gate set (forget, input, output, proposal).
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w_forget: ParamId,
    pub b_forget: ParamId,
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_output: ParamId,
    pub b_output: ParamId,
    pub w_proposal: ParamId,
    pub b_proposal: ParamId,
}

/// Square transforms assembling the top-down states of one track.
#[derive(Clone, Copy, Debug)]
pub struct TopDownParams {
    /// CTR from its own previous hidden (no click at the previous item).
    pub ctr_self: ParamId,
    /// CTR from the previous CVR hidden (click at the previous item).
    pub ctr_from_cvr: ParamId,
    /// CVR from its own previous hidden.
    pub cvr_self: ParamId,
    /// CVR from the current CTR hidden (click at the current item).
    pub cvr_from_ctr: ParamId,
}

/// Two-layer perceptron producing pre-softplus decay rates.
#[derive(Clone, Copy, Debug)]
pub struct DecayHeadParams {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

/// Affine-plus-sigmoid map from a hidden vector to a scalar probability.
#[derive(Clone, Copy, Debug)]
pub struct ReadoutParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Ids of every trainable tensor of the two-layer model inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct HeroesParams {
    pub dims: Dims,
    gates: [GateParams; 4],
    top_down: [TopDownParams; 2],
    /// Decay head reading the CTR hidden alone.
    pub decay_plain: DecayHeadParams,
    /// Decay head reading `[behavior || CTR hidden]`.
    pub decay_behavior: DecayHeadParams,
    readouts: [ReadoutParams; 4],
}

fn slot(layer: Layer, track: Track) -> usize {
    let l = match layer {
        Layer::Ctr => 0,
        Layer::Cvr => 1,
    };
    let t = match track {
        Track::Behavioral => 0,
        Track::Inherent => 1,
    };
    l * 2 + t
}

impl HeroesParams {
    pub fn gates(&self, layer: Layer, track: Track) -> &GateParams {
        &self.gates[slot(layer, track)]
    }

    pub fn top_down(&self, track: Track) -> &TopDownParams {
        &self.top_down[match track {
            Track::Behavioral => 0,
            Track::Inherent => 1,
        }]
    }

    pub fn readout(&self, layer: Layer, track: Track) -> &ReadoutParams {
        &self.readouts[slot(layer, track)]
    }

    /// Builds the full parameter layout with uniform `(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in))` weights and zero biases. Draw order is fixed, so a
    /// seeded generator gives bit-reproducible initializations.
    pub fn init(dims: Dims, rng: &mut impl Rng) -> (ParamSet, HeroesParams) {
        let mut set = ParamSet::new();
        let h = dims.hidden;
        let gin = dims.gate_input();

        let mut matrix = |set: &mut ParamSet, name: String, rows: usize, cols: usize| {
            let r = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
            set.add(name, Tensor::matrix(rows, cols, data))
        };

        let mut gate_group = |set: &mut ParamSet, prefix: &str| GateParams {
            w_forget: matrix(set, format!("{prefix}.forget.w"), h, gin),
            b_forget: set.add(format!("{prefix}.forget.b"), Tensor::zeros(&[h])),
            w_input: matrix(set, format!("{prefix}.input.w"), h, gin),
            b_input: set.add(format!("{prefix}.input.b"), Tensor::zeros(&[h])),
            w_output: matrix(set, format!("{prefix}.output.w"), h, gin),
            b_output: set.add(format!("{prefix}.output.b"), Tensor::zeros(&[h])),
            w_proposal: matrix(set, format!("{prefix}.proposal.w"), h, gin),
            b_proposal: set.add(format!("{prefix}.proposal.b"), Tensor::zeros(&[h])),
        };

        let gates = [
            gate_group(&mut set, "ctr.behavioral"),
            gate_group(&mut set, "ctr.inherent"),
            gate_group(&mut set, "cvr.behavioral"),
            gate_group(&mut set, "cvr.inherent"),
        ];

        let mut top_down_group = |set: &mut ParamSet, prefix: &str| TopDownParams {
            ctr_self: matrix(set, format!("{prefix}.ctr_self"), h, h),
            ctr_from_cvr: matrix(set, format!("{prefix}.ctr_from_cvr"), h, h),
            cvr_self: matrix(set, format!("{prefix}.cvr_self"), h, h),
            cvr_from_ctr: matrix(set, format!("{prefix}.cvr_from_ctr"), h, h),
        };
        let top_down = [
            top_down_group(&mut set, "top_down.behavioral"),
            top_down_group(&mut set, "top_down.inherent"),
        ];

        let mut decay_head = |set: &mut ParamSet, prefix: &str, input: usize| DecayHeadParams {
            w_hidden: matrix(set, format!("{prefix}.hidden.w"), h, input),
            b_hidden: set.add(format!("{prefix}.hidden.b"), Tensor::zeros(&[h])),
            w_out: matrix(set, format!("{prefix}.out.w"), h, h),
            b_out: set.add(format!("{prefix}.out.b"), Tensor::zeros(&[h])),
        };
        let decay_plain = decay_head(&mut set, "decay.plain", h);
        let decay_behavior = decay_head(&mut set, "decay.behavior", h + BEHAVIOR_DIM);

        let mut readout_head = |set: &mut ParamSet, prefix: &str| {
            let r = 1.0 / (h as f64).sqrt();
            let data = (0..h).map(|_| rng.random_range(-r..r)).collect();
            ReadoutParams {
                weight: set.add(format!("{prefix}.w"), Tensor::vector(data)),
                bias: set.add(format!("{prefix}.b"), Tensor::zeros(&[1])),
            }
        };
        let readouts = [
            readout_head(&mut set, "readout.ctr.behavioral"),
            readout_head(&mut set, "readout.ctr.inherent"),
            readout_head(&mut set, "readout.cvr.behavioral"),
            readout_head(&mut set, "readout.cvr.inherent"),
        ];

        (
            set,
            HeroesParams {
                dims,
                gates,
                top_down,
                decay_plain,
                decay_behavior,
                readouts,
            },
        )
    }
}

/// The behavioral and inherent cell states of one layer at one step.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub behavioral: Var,
    pub inherent: Var,
}

impl LayerState {
    pub fn zeros(tape: &Tape, hidden: usize) -> Self {
        LayerState {
            behavioral: tape.leaf(Tensor::zeros(&[hidden])),
            inherent: tape.leaf(Tensor::zeros(&[hidden])),
        }
    }
}

/// Forget/input/output gates in (0,1) plus a proposal vector in (-1,1).
#[derive(Clone, Copy, Debug)]
pub struct GateSet {
    pub forget: Var,
    pub input: Var,
    pub output: Var,
    pub proposal: Var,
}

/// One gate set per track.
#[derive(Clone, Copy, Debug)]
pub struct GateSetPair {
    pub behavioral: GateSet,
    pub inherent: GateSet,
}

/// Builds the clamped one-hot position vector for a 0-based position.
pub fn position_onehot(position: usize, max_positions: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_positions]);
    t.data_mut()[position.min(max_positions - 1)] = 1.0;
    t
}

/// CTR-layer top-down state: routed from the layer's own previous hidden
/// when the previous item was not clicked, and from the previous CVR
/// hidden when it was. Exactly one branch contributes.
pub fn top_down_ctr(
    tape: &Tape,
    binding: &Binding,
    td: &TopDownParams,
    clicked_prev: bool,
    hidden_ctr_prev: Var,
    hidden_cvr_prev: Var,
) -> Result<Var, ModelError> {
    let out = if clicked_prev {
        tape.matvec(binding.var(td.ctr_from_cvr), hidden_cvr_prev)?
    } else {
        tape.matvec(binding.var(td.ctr_self), hidden_ctr_prev)?
    };
    Ok(out)
}

/// CVR-layer top-down state: always carries the layer's own previous
/// hidden, plus the current CTR hidden when the current item is clicked.
pub fn top_down_cvr(
    tape: &Tape,
    binding: &Binding,
    td: &TopDownParams,
    clicked_cur: bool,
    hidden_cvr_prev: Var,
    hidden_ctr_cur: Var,
) -> Result<Var, ModelError> {
    let own = tape.matvec(binding.var(td.cvr_self), hidden_cvr_prev)?;
    if clicked_cur {
        let cross = tape.matvec(binding.var(td.cvr_from_ctr), hidden_ctr_cur)?;
        Ok(tape.add(own, cross)?)
    } else {
        Ok(own)
    }
}

/// Computes one gate set from `[top_down || features || position]`.
pub fn compute_gates(
    tape: &Tape,
    binding: &Binding,
    gp: &GateParams,
    top_down: Var,
    step_context: Var,
) -> Result<GateSet, ModelError> {
    let z = tape.concat(&[top_down, step_context])?;
    let pre_f = tape.affine(binding.var(gp.w_forget), z, binding.var(gp.b_forget))?;
    let pre_i = tape.affine(binding.var(gp.w_input), z, binding.var(gp.b_input))?;
    let pre_o = tape.affine(binding.var(gp.w_output), z, binding.var(gp.b_output))?;
    let pre_g = tape.affine(binding.var(gp.w_proposal), z, binding.var(gp.b_proposal))?;
    Ok(GateSet {
        forget: tape.sigmoid(pre_f),
        input: tape.sigmoid(pre_i),
        output: tape.sigmoid(pre_o),
        proposal: tape.tanh(pre_g),
    })
}

/// Strictly positive per-coordinate decay rates from the CTR hidden,
/// optionally conditioned on the user-behavior embedding. The two inputs
/// use separate heads so the behavior-free path stays available.
pub fn decay_rate(
    tape: &Tape,
    binding: &Binding,
    plain: &DecayHeadParams,
    with_behavior: &DecayHeadParams,
    hidden_ctr: Var,
    behavior: Option<Var>,
    gamma: f64,
) -> Result<Var, ModelError> {
    let (head, input) = match behavior {
        Some(y) => (with_behavior, tape.concat(&[y, hidden_ctr])?),
        None => (plain, hidden_ctr),
    };
    let mid = tape.affine(binding.var(head.w_hidden), input, binding.var(head.b_hidden))?;
    let mid = tape.tanh(mid);
    let pre = tape.affine(binding.var(head.w_out), mid, binding.var(head.b_out))?;
    Ok(tape.scaled_softplus(pre, gamma)?)
}

/// Relaxes the behavioral state toward the inherent one:
/// `inherent + (behavioral - inherent) * exp(-delta * dt)`.
///
/// Per coordinate the result is a convex combination of the two states,
/// monotone in `dt` toward the inherent state.
pub fn hawkes_decay(
    tape: &Tape,
    state: &LayerState,
    delta: Var,
    dt: f64,
) -> Result<Var, ModelError> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(ModelError::NegativeDt { dt });
    }
    let diff = tape.sub(state.behavioral, state.inherent)?;
    let factor = tape.exp(tape.scale(delta, -dt));
    let moved = tape.mul(diff, factor)?;
    Ok(tape.add(state.inherent, moved)?)
}

/// CTR-layer state transition.
///
/// No click at the previous item (update): the behavioral track blends the
/// Hawkes-decayed carry, the inherent track its own undecayed previous
/// state. Click at the previous item (summarize): both tracks restart from
/// `input . proposal`, discarding history.
pub fn ctr_step(
    tape: &Tape,
    prev: &LayerState,
    decayed_behavioral: Var,
    gates: &GateSetPair,
    clicked_prev: bool,
) -> Result<LayerState, ModelError> {
    let fresh = |g: &GateSet| tape.mul(g.input, g.proposal);
    if clicked_prev {
        Ok(LayerState {
            behavioral: fresh(&gates.behavioral)?,
            inherent: fresh(&gates.inherent)?,
        })
    } else {
        let keep_b = tape.mul(gates.behavioral.forget, decayed_behavioral)?;
        let behavioral = tape.add(keep_b, fresh(&gates.behavioral)?)?;
        let keep_i = tape.mul(gates.inherent.forget, prev.inherent)?;
        let inherent = tape.add(keep_i, fresh(&gates.inherent)?)?;
        Ok(LayerState {
            behavioral,
            inherent,
        })
    }
}

/// CVR-layer state transition: update on click, bit-exact copy otherwise.
pub fn cvr_step(
    tape: &Tape,
    prev: &LayerState,
    gates: &GateSetPair,
    clicked_cur: bool,
) -> Result<LayerState, ModelError> {
    if clicked_cur {
        let step = |g: &GateSet, prev_state: Var| -> Result<Var, ModelError> {
            let kept = tape.mul(g.forget, prev_state)?;
            let fresh = tape.mul(g.input, g.proposal)?;
            Ok(tape.add(kept, fresh)?)
        };
        Ok(LayerState {
            behavioral: step(&gates.behavioral, prev.behavioral)?,
            inherent: step(&gates.inherent, prev.inherent)?,
        })
    } else {
        Ok(*prev)
    }
}

/// Emits the hidden pair `(behavioral, inherent)` for a layer.
///
/// The CTR hidden is always recomputed as `output . tanh(state)`. The CVR
/// layer does the same on a click, and on a copy step returns the previous
/// hidden pair untouched.
pub fn emit_hidden(
    tape: &Tape,
    layer: Layer,
    state: &LayerState,
    output_gates: (Var, Var),
    clicked_cur: bool,
    prev_hidden: Option<(Var, Var)>,
) -> Result<(Var, Var), ModelError> {
    if layer == Layer::Cvr && !clicked_cur {
        return prev_hidden.ok_or(ModelError::MissingPrevHidden);
    }
    let behavioral = tape.mul(output_gates.0, tape.tanh(state.behavioral))?;
    let inherent = tape.mul(output_gates.1, tape.tanh(state.inherent))?;
    Ok((behavioral, inherent))
}

/// Scalar probability readout `sigmoid(w . h + b)`, strictly inside (0,1).
pub fn readout(
    tape: &Tape,
    binding: &Binding,
    head: &ReadoutParams,
    hidden: Var,
) -> Result<Var, ModelError> {
    let wh = tape.dot(binding.var(head.weight), hidden)?;
    let pre = tape.add(wh, binding.var(head.bias))?;
    Ok(tape.sigmoid(pre))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_dims() -> Dims {
        Dims {
            hidden: 2,
            feature: 2,
            max_positions: 3,
        }
    }

    fn seeded_params(seed: u64) -> (ParamSet, HeroesParams) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        HeroesParams::init(tiny_dims(), &mut rng)
    }

    fn vecvar(tape: &Tape, data: &[f64]) -> Var {
        tape.leaf(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn top_down_ctr_selects_exactly_one_branch() {
        let (mut set, params) = seeded_params(7);
        // ctr_self = identity, ctr_from_cvr = 2*identity so the branches differ.
        let td = *params.top_down(Track::Behavioral);
        set.get_mut(td.ctr_self).value = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        set.get_mut(td.ctr_from_cvr).value = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]);

        let tape = Tape::new();
        let binding = tape.bind(&set);
        let h_ctr = vecvar(&tape, &[0.3, -0.1]);
        let h_cvr = vecvar(&tape, &[5.0, 5.0]);

        let no_click = top_down_ctr(&tape, &binding, &td, false, h_ctr, h_cvr).unwrap();
        assert_eq!(tape.value(no_click).data(), &[0.3, -0.1]);

        let clicked = top_down_ctr(&tape, &binding, &td, true, h_ctr, h_cvr).unwrap();
        assert_eq!(tape.value(clicked).data(), &[10.0, 10.0]);
    }

    #[test]
    fn top_down_cvr_matches_direct_recomputation() {
        let (set, params) = seeded_params(11);
        let td = *params.top_down(Track::Behavioral);
        let tape = Tape::new();
        let binding = tape.bind(&set);
        let h_cvr_prev = vecvar(&tape, &[0.4, -0.2]);
        let h_ctr_cur = vecvar(&tape, &[-0.3, 0.7]);

        // No click: own term only.
        let no_click =
            top_down_cvr(&tape, &binding, &td, false, h_cvr_prev, h_ctr_cur).unwrap();
        let own = tape
            .matvec(binding.var(td.cvr_self), h_cvr_prev)
            .unwrap();
        assert_eq!(tape.value(no_click).data(), tape.value(own).data());

        // Click: straight-line recomputation of both terms.
        let clicked = top_down_cvr(&tape, &binding, &td, true, h_cvr_prev, h_ctr_cur).unwrap();
        let u = set.get(td.cvr_self).value.clone();
        let w = set.get(td.cvr_from_ctr).value.clone();
        let expect: Vec<f64> = (0..2)
            .map(|r| {
                let ud = &u.data()[r * 2..r * 2 + 2];
                let wd = &w.data()[r * 2..r * 2 + 2];
                ud[0] * 0.4 + ud[1] * -0.2 + wd[0] * -0.3 + wd[1] * 0.7
            })
            .collect();
        for (got, want) in tape.value(clicked).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_gates_hit_their_fixed_points() {
        let (mut set, params) = seeded_params(3);
        for p in set.iter_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::new();
        let binding = tape.bind(&set);
        let td = vecvar(&tape, &[0.0, 0.0]);
        let ctx = vecvar(&tape, &[1.0, -1.0, 1.0, 0.0, 0.0]);
        let gates = compute_gates(
            &tape,
            &binding,
            params.gates(Layer::Ctr, Track::Behavioral),
            td,
            ctx,
        )
        .unwrap();
        assert_eq!(tape.value(gates.forget).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(gates.input).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(gates.output).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(gates.proposal).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gate_ranges_hold_for_random_inputs() {
        let (set, params) = seeded_params(13);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..50 {
            let tape = Tape::new();
            let binding = tape.bind(&set);
            let td = vecvar(
                &tape,
                &[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            );
            let ctx: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ctx = vecvar(&tape, &ctx);
            let gates = compute_gates(
                &tape,
                &binding,
                params.gates(Layer::Cvr, Track::Inherent),
                td,
                ctx,
            )
            .unwrap();
            for v in tape.value(gates.forget).data() {
                assert!(*v > 0.0 && *v < 1.0);
            }
            for v in tape.value(gates.proposal).data() {
                assert!(*v > -1.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn decay_rate_zero_head_gives_gamma_ln2() {
        let (mut set, params) = seeded_params(5);
        for p in set.iter_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::new();
        let binding = tape.bind(&set);
        let h = vecvar(&tape, &[0.7, -0.4]);
        let delta = decay_rate(
            &tape,
            &binding,
            &params.decay_plain,
            &params.decay_behavior,
            h,
            None,
            5.0,
        )
        .unwrap();
        for v in tape.value(delta).data() {
            assert!((v - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_rate_is_positive_and_behavior_head_differs() {
        let (set, params) = seeded_params(17);
        let tape = Tape::new();
        let binding = tape.bind(&set);
        let h = vecvar(&tape, &[0.9, -1.2]);
        let plain = decay_rate(
            &tape,
            &binding,
            &params.decay_plain,
            &params.decay_behavior,
            h,
            None,
            5.0,
        )
        .unwrap();
        let y = vecvar(&tape, &[1.0, 0.0]);
        let with_y = decay_rate(
            &tape,
            &binding,
            &params.decay_plain,
            &params.decay_behavior,
            h,
            Some(y),
            5.0,
        )
        .unwrap();
        for v in tape.value(plain).data() {
            assert!(*v > 0.0);
        }
        let p = tape.value(plain);
        let q = tape.value(with_y);
        assert_ne!(p.data(), q.data(), "separate heads should disagree under random weights");
    }

    #[test]
    fn hawkes_halflife_midpoint() {
        let tape = Tape::new();
        let state = LayerState {
            behavioral: vecvar(&tape, &[1.0, 1.0]),
            inherent: vecvar(&tape, &[0.0, 0.0]),
        };
        let delta = vecvar(&tape, &[std::f64::consts::LN_2, std::f64::consts::LN_2]);
        let out = hawkes_decay(&tape, &state, delta, 1.0).unwrap();
        for v in tape.value(out).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hawkes_dt_zero_returns_behavioral_exactly() {
        let tape = Tape::new();
        let state = LayerState {
            behavioral: vecvar(&tape, &[0.3, -0.8]),
            inherent: vecvar(&tape, &[0.1, 0.2]),
        };
        let delta = vecvar(&tape, &[2.0, 3.0]);
        let out = hawkes_decay(&tape, &state, delta, 0.0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -0.8]);
    }

    #[test]
    fn hawkes_long_horizon_lands_on_inherent() {
        let tape = Tape::new();
        let state = LayerState {
            behavioral: vecvar(&tape, &[5.0]),
            inherent: vecvar(&tape, &[-1.0]),
        };
        let delta = vecvar(&tape, &[1.0]);
        let out = hawkes_decay(&tape, &state, delta, 1000.0).unwrap();
        assert!((tape.value(out).data()[0] - -1.0).abs() < 1e-9);
    }

    #[test]
    fn hawkes_rejects_negative_dt() {
        let tape = Tape::new();
        let state = LayerState {
            behavioral: vecvar(&tape, &[1.0]),
            inherent: vecvar(&tape, &[0.0]),
        };
        let delta = vecvar(&tape, &[1.0]);
        assert!(hawkes_decay(&tape, &state, delta, -0.5).is_err());
    }

    #[test]
    fn ctr_summarize_discards_history() {
        let tape = Tape::new();
        let gates = GateSetPair {
            behavioral: GateSet {
                forget: vecvar(&tape, &[0.9, 0.9]),
                input: vecvar(&tape, &[1.0, 1.0]),
                output: vecvar(&tape, &[1.0, 1.0]),
                proposal: vecvar(&tape, &[0.25, -0.5]),
            },
            inherent: GateSet {
                forget: vecvar(&tape, &[0.9, 0.9]),
                input: vecvar(&tape, &[1.0, 1.0]),
                output: vecvar(&tape, &[1.0, 1.0]),
                proposal: vecvar(&tape, &[0.1, 0.2]),
            },
        };
        for junk in [[0.0, 0.0], [100.0, -100.0]] {
            let prev = LayerState {
                behavioral: vecvar(&tape, &junk),
                inherent: vecvar(&tape, &junk),
            };
            let decayed = vecvar(&tape, &junk);
            let next = ctr_step(&tape, &prev, decayed, &gates, true).unwrap();
            assert_eq!(tape.value(next.behavioral).data(), &[0.25, -0.5]);
            assert_eq!(tape.value(next.inherent).data(), &[0.1, 0.2]);
        }
    }

    #[test]
    fn ctr_update_keeps_decayed_state_when_gates_saturate() {
        // forget = 1, input = 0: state passes through unchanged.
        let tape = Tape::new();
        let ones = vecvar(&tape, &[1.0, 1.0]);
        let zeros = vecvar(&tape, &[0.0, 0.0]);
        let gates = GateSetPair {
            behavioral: GateSet {
                forget: ones,
                input: zeros,
                output: ones,
                proposal: vecvar(&tape, &[0.3, 0.3]),
            },
            inherent: GateSet {
                forget: ones,
                input: zeros,
                output: ones,
                proposal: zeros,
            },
        };
        let prev = LayerState {
            behavioral: vecvar(&tape, &[9.0, 9.0]),
            inherent: vecvar(&tape, &[-2.0, 4.0]),
        };
        let decayed = vecvar(&tape, &[0.6, -0.7]);
        let next = ctr_step(&tape, &prev, decayed, &gates, false).unwrap();
        assert_eq!(tape.value(next.behavioral).data(), &[0.6, -0.7]);
        // Inherent track ignores the decayed carry and keeps its own state.
        assert_eq!(tape.value(next.inherent).data(), &[-2.0, 4.0]);
    }

    #[test]
    fn cvr_copy_is_bit_exact_and_update_matches_recomputation() {
        let tape = Tape::new();
        let prev = LayerState {
            behavioral: vecvar(&tape, &[0.123456789, -0.5]),
            inherent: vecvar(&tape, &[1.5, 2.5]),
        };
        let gates = GateSetPair {
            behavioral: GateSet {
                forget: vecvar(&tape, &[0.2, 0.4]),
                input: vecvar(&tape, &[0.6, 0.8]),
                output: vecvar(&tape, &[0.5, 0.5]),
                proposal: vecvar(&tape, &[-0.9, 0.9]),
            },
            inherent: GateSet {
                forget: vecvar(&tape, &[0.1, 0.3]),
                input: vecvar(&tape, &[0.5, 0.7]),
                output: vecvar(&tape, &[0.5, 0.5]),
                proposal: vecvar(&tape, &[0.4, -0.4]),
            },
        };

        let copied = cvr_step(&tape, &prev, &gates, false).unwrap();
        assert_eq!(copied.behavioral, prev.behavioral);
        assert_eq!(copied.inherent, prev.inherent);

        let updated = cvr_step(&tape, &prev, &gates, true).unwrap();
        let want_b = [0.2 * 0.123456789 + 0.6 * -0.9, 0.4 * -0.5 + 0.8 * 0.9];
        for (got, want) in tape.value(updated.behavioral).data().iter().zip(&want_b) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cvr_update_with_zero_forget_is_fresh_proposal() {
        let tape = Tape::new();
        let zeros = vecvar(&tape, &[0.0, 0.0]);
        let gates = GateSetPair {
            behavioral: GateSet {
                forget: zeros,
                input: vecvar(&tape, &[0.5, 1.0]),
                output: zeros,
                proposal: vecvar(&tape, &[0.8, -0.8]),
            },
            inherent: GateSet {
                forget: zeros,
                input: zeros,
                output: zeros,
                proposal: zeros,
            },
        };
        let prev = LayerState {
            behavioral: vecvar(&tape, &[7.0, 7.0]),
            inherent: zeros,
        };
        let next = cvr_step(&tape, &prev, &gates, true).unwrap();
        assert_eq!(tape.value(next.behavioral).data(), &[0.4, -0.8]);
    }

    #[test]
    fn emit_hidden_basics() {
        let tape = Tape::new();
        let ones = vecvar(&tape, &[1.0, 1.0]);
        let state = LayerState {
            behavioral: vecvar(&tape, &[0.0, 0.0]),
            inherent: vecvar(&tape, &[0.0, 0.0]),
        };
        // o = 1, s = 0 -> h = 0
        let (h, h_inh) = emit_hidden(&tape, Layer::Ctr, &state, (ones, ones), false, None).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(h_inh).data(), &[0.0, 0.0]);

        // CVR copy branch returns the previous hidden pair var-identically.
        let prev = (vecvar(&tape, &[0.5, 0.5]), vecvar(&tape, &[0.25, 0.25]));
        let (h, h_inh) =
            emit_hidden(&tape, Layer::Cvr, &state, (ones, ones), false, Some(prev)).unwrap();
        assert_eq!(h, prev.0);
        assert_eq!(h_inh, prev.1);

        // Copy branch without a previous hidden is an error.
        assert!(emit_hidden(&tape, Layer::Cvr, &state, (ones, ones), false, None).is_err());
    }

    #[test]
    fn hidden_magnitude_below_one() {
        let tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let o: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let state = LayerState {
                behavioral: vecvar(&tape, &s),
                inherent: vecvar(&tape, &s),
            };
            let og = vecvar(&tape, &o);
            let (h, _) = emit_hidden(&tape, Layer::Ctr, &state, (og, og), true, None).unwrap();
            for v in tape.value(h).data() {
                assert!(v.abs() < 1.0);
            }
        }
    }

    #[test]
    fn readout_zero_weights_is_half_and_range_holds() {
        let (mut set, params) = seeded_params(23);
        let head = *params.readout(Layer::Ctr, Track::Behavioral);
        for v in set.get_mut(head.weight).value.data_mut() {
            *v = 0.0;
        }
        let tape = Tape::new();
        let binding = tape.bind(&set);
        let h = vecvar(&tape, &[3.0, -3.0]);
        let p = readout(&tape, &binding, &head, h).unwrap();
        assert_eq!(tape.item(p), 0.5);
    }

    #[test]
    fn readout_matches_affine_sigmoid_recomputation() {
        let (set, params) = seeded_params(29);
        let head = *params.readout(Layer::Cvr, Track::Inherent);
        let tape = Tape::new();
        let binding = tape.bind(&set);
        let h = vecvar(&tape, &[0.4, -1.1]);
        let p = readout(&tape, &binding, &head, h).unwrap();

        let w = set.get(head.weight).value.clone();
        let b = set.get(head.bias).value.item();
        let pre = w.data()[0] * 0.4 + w.data()[1] * -1.1 + b;
        let want = 1.0 / (1.0 + (-pre).exp());
        assert!((tape.item(p) - want).abs() < 1e-15);
        assert!(tape.item(p) > 0.0 && tape.item(p) < 1.0);
    }

    #[test]
    fn position_onehot_clamps_to_last_slot() {
        let t = position_onehot(1, 4);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0]);
        let t = position_onehot(99, 4);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
