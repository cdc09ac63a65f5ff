//! Session-level orchestration: the hierarchical rollout over an item
//! list, boundary-gate resolution, per-item probability estimates for
//! every training mode, and ranking.
//!
//! The rollout is pure given a parameter binding, so frozen parameters
//! can serve any number of concurrent evaluations, each on its own tape.
//! Training forwards write gradients and are single-writer per tape.

use crate::diffcore::{Binding, Tape, Tensor, Var};
use crate::record::QuerySession;
use crate::unit::{
    self, compute_gates, cvr_step, decay_rate, emit_hidden, hawkes_decay, position_onehot,
    readout, top_down_ctr, top_down_cvr, GateSetPair, HeroesParams, Layer, LayerState,
    ModelError, Track,
};

/// Training objective family the forward pass serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain cross-entropy on clicks and conversions.
    Biased,
    /// Survival objective with the Hawkes carry replaced by the raw
    /// previous state.
    UnbiasedPlain,
    /// Survival objective on top of the unmodified Hawkes unit.
    UnbiasedComb,
}

impl Mode {
    pub fn is_unbiased(self) -> bool {
        matches!(self, Mode::UnbiasedPlain | Mode::UnbiasedComb)
    }
}

/// Where the boundary gate comes from: observed click labels during
/// training (teacher forcing) or thresholded click readouts at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSource {
    Labels,
    Predicted,
}

/// Structural ablations of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Per-item feedforward: no state or hidden carries over between
    /// items, which removes all within-layer sequence modelling.
    IntraOff,
    /// Cross-layer top-down terms zeroed; the two layers train without
    /// parameter coupling.
    InterOff,
    /// Plain LSTM cells inside the same hierarchy: no Hawkes decay, no
    /// summarize/copy branching.
    UnitOff,
}

/// Everything the rollout needs beyond the parameters themselves.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub gate_source: GateSource,
    /// Softplus scale of the decay head.
    pub gamma: f64,
    /// Time between consecutive items; positions stand in for timestamps.
    pub dt: f64,
    /// Feed the user-behavior embedding into the decay head.
    pub use_behavior_embedding: bool,
    pub variant: Variant,
}

impl ForwardOptions {
    pub fn new(mode: Mode, gate_source: GateSource) -> Self {
        ForwardOptions {
            mode,
            gate_source,
            gamma: unit::DEFAULT_GAMMA,
            dt: 1.0,
            use_behavior_embedding: false,
            variant: Variant::Full,
        }
    }
}

/// The four hidden vectors and their scalar probability readouts for one item.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub hidden_ctr: Var,
    pub hidden_ctr_inherent: Var,
    pub hidden_cvr: Var,
    pub hidden_cvr_inherent: Var,
    pub p_ctr: Var,
    pub p_ctr_inherent: Var,
    pub p_cvr: Var,
    pub p_cvr_inherent: Var,
}

impl StepOutput {
    pub fn prob(&self, layer: Layer, track: Track) -> Var {
        match (layer, track) {
            (Layer::Ctr, Track::Behavioral) => self.p_ctr,
            (Layer::Ctr, Track::Inherent) => self.p_ctr_inherent,
            (Layer::Cvr, Track::Behavioral) => self.p_cvr,
            (Layer::Cvr, Track::Inherent) => self.p_cvr_inherent,
        }
    }
}

/// Output of one session rollout.
pub struct SessionForward {
    pub steps: Vec<StepOutput>,
    /// Resolved boundary bit per item.
    pub boundaries: Vec<bool>,
    pub mode: Mode,
}

/// Boundary detector: fires only strictly above one half.
pub fn boundary(p_click: f64) -> bool {
    p_click > 0.5
}

/// Rolls the two-layer model over a session, producing one [`StepOutput`]
/// per item.
///
/// Initial states and hiddens are zero vectors and the step before the
/// list counts as unclicked. In `UnbiasedPlain` mode the CTR update
/// consumes the raw previous behavioral state instead of the decayed one.
pub fn forward_session(
    tape: &Tape,
    binding: &Binding,
    params: &HeroesParams,
    session: &QuerySession,
    opts: &ForwardOptions,
) -> Result<SessionForward, ModelError> {
    if session.items.is_empty() {
        return Err(ModelError::EmptySession);
    }
    let dims = params.dims;
    for item in &session.items {
        if item.features.len() != dims.feature {
            return Err(ModelError::FeatureDim {
                expected: dims.feature,
                got: item.features.len(),
            });
        }
    }

    let zero_hidden = tape.leaf(Tensor::zeros(&[dims.hidden]));
    let mut state_ctr = LayerState::zeros(tape, dims.hidden);
    let mut state_cvr = LayerState::zeros(tape, dims.hidden);
    let mut hidden_ctr = (zero_hidden, zero_hidden);
    let mut hidden_cvr = (zero_hidden, zero_hidden);
    // Hawkes-decayed behavioral CTR state carried into the next update.
    let mut decayed_carry = tape.leaf(Tensor::zeros(&[dims.hidden]));
    let mut clicked_prev = false;

    let mut steps = Vec::with_capacity(session.items.len());
    let mut boundaries = Vec::with_capacity(session.items.len());

    for (i, item) in session.items.iter().enumerate() {
        let features = tape.leaf(Tensor::vector(item.features.clone()));
        let pos = tape.leaf(position_onehot(i, dims.max_positions));
        let ctx = tape.concat(&[features, pos])?;

        // The IntraOff ablation severs every step-to-step carry.
        let feedforward = opts.variant == Variant::IntraOff;

        // CTR top-down state per track.
        let zero = || tape.leaf(Tensor::zeros(&[dims.hidden]));
        let (td_ctr_b, td_ctr_i) = match opts.variant {
            Variant::IntraOff => (zero(), zero()),
            Variant::InterOff => {
                // Cross-layer term zeroed: only the own-hidden branch survives.
                let own = |track, h| {
                    let td = params.top_down(track);
                    if clicked_prev {
                        Ok::<Var, ModelError>(zero())
                    } else {
                        Ok(tape.matvec(binding.var(td.ctr_self), h)?)
                    }
                };
                (
                    own(Track::Behavioral, hidden_ctr.0)?,
                    own(Track::Inherent, hidden_ctr.1)?,
                )
            }
            _ => (
                top_down_ctr(
                    tape,
                    binding,
                    params.top_down(Track::Behavioral),
                    clicked_prev,
                    hidden_ctr.0,
                    hidden_cvr.0,
                )?,
                top_down_ctr(
                    tape,
                    binding,
                    params.top_down(Track::Inherent),
                    clicked_prev,
                    hidden_ctr.1,
                    hidden_cvr.1,
                )?,
            ),
        };

        let gates_ctr = GateSetPair {
            behavioral: compute_gates(
                tape,
                binding,
                params.gates(Layer::Ctr, Track::Behavioral),
                td_ctr_b,
                ctx,
            )?,
            inherent: compute_gates(
                tape,
                binding,
                params.gates(Layer::Ctr, Track::Inherent),
                td_ctr_i,
                ctx,
            )?,
        };

        state_ctr = match opts.variant {
            Variant::IntraOff => {
                // Fresh proposal only; nothing survives from the past.
                let fresh = |g: &unit::GateSet| tape.mul(g.input, g.proposal);
                LayerState {
                    behavioral: fresh(&gates_ctr.behavioral)?,
                    inherent: fresh(&gates_ctr.inherent)?,
                }
            }
            Variant::UnitOff => {
                // Standard LSTM update, raw previous state, no branching.
                let step = |g: &unit::GateSet, prev: Var| -> Result<Var, ModelError> {
                    let kept = tape.mul(g.forget, prev)?;
                    let fresh = tape.mul(g.input, g.proposal)?;
                    Ok(tape.add(kept, fresh)?)
                };
                LayerState {
                    behavioral: step(&gates_ctr.behavioral, state_ctr.behavioral)?,
                    inherent: step(&gates_ctr.inherent, state_ctr.inherent)?,
                }
            }
            _ => {
                let decayed = match opts.mode {
                    Mode::UnbiasedPlain => state_ctr.behavioral,
                    _ => decayed_carry,
                };
                unit::ctr_step(tape, &state_ctr, decayed, &gates_ctr, clicked_prev)?
            }
        };

        hidden_ctr = emit_hidden(
            tape,
            Layer::Ctr,
            &state_ctr,
            (gates_ctr.behavioral.output, gates_ctr.inherent.output),
            true,
            None,
        )?;

        let p_ctr = readout(
            tape,
            binding,
            params.readout(Layer::Ctr, Track::Behavioral),
            hidden_ctr.0,
        )?;
        let p_ctr_inherent = readout(
            tape,
            binding,
            params.readout(Layer::Ctr, Track::Inherent),
            hidden_ctr.1,
        )?;

        let clicked_cur = match opts.gate_source {
            GateSource::Labels => item.click,
            GateSource::Predicted => boundary(tape.item(p_ctr)),
        };

        // CVR top-down state per track.
        let (td_cvr_b, td_cvr_i) = match opts.variant {
            Variant::IntraOff => {
                // Same-item cross-layer hop is not a sequence dependency.
                let cross = |track, h| -> Result<Var, ModelError> {
                    let td = params.top_down(track);
                    if clicked_cur {
                        Ok(tape.matvec(binding.var(td.cvr_from_ctr), h)?)
                    } else {
                        Ok(zero())
                    }
                };
                (
                    cross(Track::Behavioral, hidden_ctr.0)?,
                    cross(Track::Inherent, hidden_ctr.1)?,
                )
            }
            Variant::InterOff => (
                tape.matvec(
                    binding.var(params.top_down(Track::Behavioral).cvr_self),
                    hidden_cvr.0,
                )?,
                tape.matvec(
                    binding.var(params.top_down(Track::Inherent).cvr_self),
                    hidden_cvr.1,
                )?,
            ),
            _ => (
                top_down_cvr(
                    tape,
                    binding,
                    params.top_down(Track::Behavioral),
                    clicked_cur,
                    hidden_cvr.0,
                    hidden_ctr.0,
                )?,
                top_down_cvr(
                    tape,
                    binding,
                    params.top_down(Track::Inherent),
                    clicked_cur,
                    hidden_cvr.1,
                    hidden_ctr.1,
                )?,
            ),
        };

        let gates_cvr = GateSetPair {
            behavioral: compute_gates(
                tape,
                binding,
                params.gates(Layer::Cvr, Track::Behavioral),
                td_cvr_b,
                ctx,
            )?,
            inherent: compute_gates(
                tape,
                binding,
                params.gates(Layer::Cvr, Track::Inherent),
                td_cvr_i,
                ctx,
            )?,
        };

        let (new_state_cvr, new_hidden_cvr) = match opts.variant {
            Variant::IntraOff => {
                let fresh = |g: &unit::GateSet| tape.mul(g.input, g.proposal);
                let state = LayerState {
                    behavioral: fresh(&gates_cvr.behavioral)?,
                    inherent: fresh(&gates_cvr.inherent)?,
                };
                let hidden = emit_hidden(
                    tape,
                    Layer::Cvr,
                    &state,
                    (gates_cvr.behavioral.output, gates_cvr.inherent.output),
                    true,
                    None,
                )?;
                (state, hidden)
            }
            Variant::UnitOff => {
                let step = |g: &unit::GateSet, prev: Var| -> Result<Var, ModelError> {
                    let kept = tape.mul(g.forget, prev)?;
                    let fresh = tape.mul(g.input, g.proposal)?;
                    Ok(tape.add(kept, fresh)?)
                };
                let state = LayerState {
                    behavioral: step(&gates_cvr.behavioral, state_cvr.behavioral)?,
                    inherent: step(&gates_cvr.inherent, state_cvr.inherent)?,
                };
                let hidden = emit_hidden(
                    tape,
                    Layer::Cvr,
                    &state,
                    (gates_cvr.behavioral.output, gates_cvr.inherent.output),
                    true,
                    None,
                )?;
                (state, hidden)
            }
            _ => {
                let state = cvr_step(tape, &state_cvr, &gates_cvr, clicked_cur)?;
                let hidden = emit_hidden(
                    tape,
                    Layer::Cvr,
                    &state,
                    (gates_cvr.behavioral.output, gates_cvr.inherent.output),
                    clicked_cur,
                    Some(hidden_cvr),
                )?;
                (state, hidden)
            }
        };
        state_cvr = new_state_cvr;
        hidden_cvr = new_hidden_cvr;

        let p_cvr = readout(
            tape,
            binding,
            params.readout(Layer::Cvr, Track::Behavioral),
            hidden_cvr.0,
        )?;
        let p_cvr_inherent = readout(
            tape,
            binding,
            params.readout(Layer::Cvr, Track::Inherent),
            hidden_cvr.1,
        )?;

        // Decay carry consumed by the next update step. Only the paths
        // that keep the Hawkes mechanism need it.
        if matches!(opts.mode, Mode::Biased | Mode::UnbiasedComb)
            && matches!(opts.variant, Variant::Full | Variant::InterOff)
            && !feedforward
        {
            let behavior = if opts.use_behavior_embedding {
                let (clicked, converted) = match opts.gate_source {
                    GateSource::Labels => (item.click, item.conversion),
                    // True behaviors are unobserved at inference time.
                    GateSource::Predicted => (clicked_cur, false),
                };
                Some(tape.leaf(Tensor::vector(vec![
                    clicked as u8 as f64,
                    converted as u8 as f64,
                ])))
            } else {
                None
            };
            let delta = decay_rate(
                tape,
                binding,
                &params.decay_plain,
                &params.decay_behavior,
                hidden_ctr.0,
                behavior,
                opts.gamma,
            )?;
            decayed_carry = hawkes_decay(tape, &state_ctr, delta, opts.dt)?;
        }

        steps.push(StepOutput {
            hidden_ctr: hidden_ctr.0,
            hidden_ctr_inherent: hidden_ctr.1,
            hidden_cvr: hidden_cvr.0,
            hidden_cvr_inherent: hidden_cvr.1,
            p_ctr,
            p_ctr_inherent,
            p_cvr,
            p_cvr_inherent,
        });
        boundaries.push(clicked_cur);
        clicked_prev = clicked_cur;
    }

    Ok(SessionForward {
        steps,
        boundaries,
        mode: opts.mode,
    })
}

/// Per-item probability estimates for one track.
///
/// `click_event`/`conv_event` estimate the observable events (used for
/// log-loss); `click_score`/`conv_score` are the relevance scores used
/// for ranking. In biased mode the two coincide.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub track: Track,
    pub click_event: Vec<f64>,
    pub conv_event: Vec<f64>,
    pub click_score: Vec<f64>,
    pub conv_score: Vec<f64>,
}

/// Biased-mode estimates: `P(click) = p_ctr` and `P(conversion) =
/// p_ctr * p_cvr`, per track.
pub fn predict_biased(
    tape: &Tape,
    fwd: &SessionForward,
    track: Track,
) -> Result<Predictions, ModelError> {
    if fwd.mode != Mode::Biased {
        return Err(ModelError::ModeMismatch {
            expected: Mode::Biased,
            got: fwd.mode,
        });
    }
    let click: Vec<f64> = fwd
        .steps
        .iter()
        .map(|s| tape.item(s.prob(Layer::Ctr, track)))
        .collect();
    let conv: Vec<f64> = fwd
        .steps
        .iter()
        .zip(&click)
        .map(|(s, pc)| pc * tape.item(s.prob(Layer::Cvr, track)))
        .collect();
    Ok(Predictions {
        track,
        click_event: click.clone(),
        conv_event: conv.clone(),
        click_score: click,
        conv_score: conv,
    })
}

/// Unrolls hazards through the probability chain rule: event probability
/// `h_i * prod_{t<i}(1 - h_t)` per item, plus the leftover mass of the
/// event never firing.
pub fn chain_unroll(hazards: &[f64]) -> (Vec<f64>, f64) {
    let mut survive = 1.0;
    let mut events = Vec::with_capacity(hazards.len());
    for &h in hazards {
        events.push(h * survive);
        survive *= 1.0 - h;
    }
    (events, survive)
}

/// Unbiased-mode estimates. Event probabilities come from the chain rule
/// over the track's hazards; ranking scores are the hazards themselves
/// (the debiased relevance estimates) and their product for conversions.
pub fn predict_unbiased(
    tape: &Tape,
    fwd: &SessionForward,
    track: Track,
) -> Result<Predictions, ModelError> {
    if !fwd.mode.is_unbiased() {
        return Err(ModelError::ModeMismatch {
            expected: Mode::UnbiasedPlain,
            got: fwd.mode,
        });
    }
    let hazards_c: Vec<f64> = fwd
        .steps
        .iter()
        .map(|s| tape.item(s.prob(Layer::Ctr, track)))
        .collect();
    let hazards_v: Vec<f64> = fwd
        .steps
        .iter()
        .map(|s| tape.item(s.prob(Layer::Cvr, track)))
        .collect();
    let (click_event, _) = chain_unroll(&hazards_c);
    let (conv_event, _) = chain_unroll(&hazards_v);
    let conv_score: Vec<f64> = hazards_c
        .iter()
        .zip(&hazards_v)
        .map(|(c, v)| c * v)
        .collect();
    Ok(Predictions {
        track,
        click_event,
        conv_event,
        click_score: hazards_c,
        conv_score,
    })
}

/// Ranking objective for [`rank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ctr,
    Cvr,
}

/// Items in descending score order; equal scores keep their original
/// relative order. Returns the permutation `rank -> original index`.
pub fn rank(predictions: &Predictions, objective: Objective) -> Vec<usize> {
    let scores = match objective {
        Objective::Ctr => &predictions.click_score,
        Objective::Cvr => &predictions.conv_score,
    };
    rank_by_scores(scores)
}

/// Stable descending argsort.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}
