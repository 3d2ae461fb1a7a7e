//! Routing-by-agreement from token features to perspective capsules.
//!
//! Every token votes for every perspective through a per-perspective
//! linear map shared across tokens. [`dynamic_route`] then iterates:
//! assignment weights are a softmax over perspectives of the accumulated
//! agreement logits, each capsule is the squashed weighted sum of its
//! votes, and each logit grows by the dot product between vote and capsule.
//! The iterations stay on the tape, so gradients flow through all of them.
//!
//! Three ways of routing a sentence pair are provided:
//! * vanilla: premise and hypothesis are routed independently and each
//!   perspective concatenates the two capsules;
//! * snoop: both sides are routed jointly, and each side's logit update
//!   also counts agreement with the other side's capsule, gated by a
//!   learned coefficient;
//! * injection: premise information is mixed into the hypothesis tokens by
//!   bilinear attention and only the hypothesis is routed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::EncodedPair;
use crate::error::{Error, Result};
use crate::label::Perspective;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingVariant {
    Vanilla,
    Snoop,
    Injection,
}

impl RoutingVariant {
    pub fn name(self) -> &'static str {
        match self {
            RoutingVariant::Vanilla => "vanilla",
            RoutingVariant::Snoop => "snoop",
            RoutingVariant::Injection => "injection",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub variant: RoutingVariant,
    pub d_high: usize,
    pub orphan: bool,
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("routing iterations must be at least 1".into()));
        }
        if self.d_high == 0 {
            return Err(Error::Config("capsule dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn perspectives(&self) -> Vec<Perspective> {
        Perspective::routed(self.orphan)
    }
}

/// Row-wise `squash(v) = ‖v‖² / (1 + ‖v‖²) · v / ‖v‖`, with `squash(0) = 0`.
pub fn squash<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let norm = v.l2_norm(1)?;
    let factor = norm.div(norm.square()?.affine(1.0, 1.0)?)?;
    v.mul_col(factor)
}

/// Votes `u[l] = s · W_l`, one `[t × d_high]` matrix per perspective.
#[derive(Clone, Debug)]
pub struct VoteTensor<'g> {
    pub perspectives: Vec<Perspective>,
    pub votes: Vec<Var<'g>>,
}

impl<'g> VoteTensor<'g> {
    pub fn tokens(&self) -> usize {
        self.votes[0].shape()[0]
    }

    /// Dense `[t × |L| × d_high]` copy.
    pub fn to_tensor(&self) -> Tensor {
        let vals: Vec<_> = self.votes.iter().map(|v| v.value()).collect();
        let (t, d) = (vals[0].rows(), vals[0].cols());
        let mut data = Vec::with_capacity(t * vals.len() * d);
        for i in 0..t {
            for v in &vals {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        Tensor::raw(vec![t, vals.len(), d], data)
    }
}

pub fn vote<'g>(g: &'g Graph, store: &ParamStore, s: Var<'g>, transforms: &[(Perspective, ParamId)]) -> Result<VoteTensor<'g>> {
    let mut votes = Vec::with_capacity(transforms.len());
    for &(_, w) in transforms {
        votes.push(s.matmul(g.param(store, w))?);
    }
    Ok(VoteTensor {
        perspectives: transforms.iter().map(|&(p, _)| p).collect(),
        votes,
    })
}

/// Per-iteration record of one routed sentence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub variant: Option<RoutingVariant>,
    /// "premise" or "hypothesis".
    pub side: String,
    pub iterations: usize,
    pub perspectives: Vec<Perspective>,
    pub tokens: Vec<String>,
    /// `b` before each iteration's softmax, `[r][t][|L|]`; the first is all zeros.
    pub logits: Vec<Vec<Vec<f64>>>,
    /// `c = softmax_l(b)` at each iteration, `[r][t][|L|]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Increment added to `b` at the end of each iteration, `[r][t][|L|]`.
    pub agreements: Vec<Vec<Vec<f64>>>,
    /// Capsules after each iteration, `[r][|L|][d_high]`.
    pub capsules: Vec<Vec<Vec<f64>>>,
    /// `‖v_l‖` after each iteration, `[r][|L|]`.
    pub capsule_norms: Vec<Vec<f64>>,
    /// Snoop coefficients per iteration and perspective, snoop routing only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alphas: Option<Vec<Vec<f64>>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

impl RoutingTrace {
    fn new(side: &str, perspectives: &[Perspective]) -> Self {
        RoutingTrace {
            side: side.to_string(),
            perspectives: perspectives.to_vec(),
            ..Default::default()
        }
    }

    /// Final-iteration weight of token `i` for perspective `p`.
    pub fn final_weight(&self, i: usize, p: Perspective) -> Option<f64> {
        let l = self.perspectives.iter().position(|&q| q == p)?;
        self.weights.last()?.get(i)?.get(l).copied()
    }
}

/// State of one side during joint routing.
struct Side<'g> {
    logits: Var<'g>,
    trace: RoutingTrace,
}

impl<'g> Side<'g> {
    fn start(g: &'g Graph, votes: &VoteTensor<'g>, name: &str) -> Self {
        Side {
            logits: g.constant(Tensor::zeros(&[votes.tokens(), votes.votes.len()])),
            trace: RoutingTrace::new(name, &votes.perspectives),
        }
    }

    /// softmax → weighted sum → squash; records logits, weights and capsules.
    fn capsules(&mut self, votes: &VoteTensor<'g>) -> Result<Vec<Var<'g>>> {
        let weights = self.logits.softmax(1)?;
        let mut caps = Vec::with_capacity(votes.votes.len());
        for (l, &u) in votes.votes.iter().enumerate() {
            let pre = weights.col(l)?.transpose()?.matmul(u)?;
            caps.push(squash(pre)?);
        }
        self.trace.logits.push(rows_of(&self.logits.value()));
        self.trace.weights.push(rows_of(&weights.value()));
        self.trace
            .capsules
            .push(caps.iter().map(|c| c.value().data().to_vec()).collect());
        self.trace
            .capsule_norms
            .push(caps.iter().map(|c| c.value().l2_norm(1).map(|n| n.data()[0])).collect::<Result<_>>()?);
        Ok(caps)
    }

    fn update(&mut self, increments: Vec<Var<'g>>) -> Result<()> {
        let g = self.logits.graph();
        let inc = g.concat_cols(&increments)?;
        self.trace.agreements.push(rows_of(&inc.value()));
        self.logits = self.logits.add(inc)?;
        self.trace.iterations += 1;
        Ok(())
    }
}

fn agreement<'g>(u: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    u.matmul(v.transpose()?)
}

/// Routes one sentence's votes for `iterations` rounds.
/// Returns the final capsules (`[1 × d_high]` each) and the trace.
pub fn dynamic_route<'g>(votes: &VoteTensor<'g>, iterations: usize) -> Result<(Vec<Var<'g>>, RoutingTrace)> {
    dynamic_route_side(votes, iterations, "hypothesis")
}

fn dynamic_route_side<'g>(votes: &VoteTensor<'g>, iterations: usize, side: &str) -> Result<(Vec<Var<'g>>, RoutingTrace)> {
    if iterations == 0 {
        return Err(Error::Config("routing iterations must be at least 1".into()));
    }
    let g = votes.votes[0].graph();
    let mut state = Side::start(g, votes, side);
    let mut caps = Vec::new();
    for _ in 0..iterations {
        caps = state.capsules(votes)?;
        let inc = votes
            .votes
            .iter()
            .zip(&caps)
            .map(|(&u, &v)| agreement(u, v))
            .collect::<Result<Vec<_>>>()?;
        state.update(inc)?;
    }
    Ok((caps, state.trace))
}

/// Snoop gate `α = σ(Linear([v_own; v_other]))`.
#[derive(Clone, Debug)]
pub struct SnoopGate {
    pub linear: Linear,
}

impl SnoopGate {
    pub fn alpha<'g>(&self, g: &'g Graph, store: &ParamStore, own: Var<'g>, other: Var<'g>) -> Result<Var<'g>> {
        self.linear.forward(g, store, g.concat_cols(&[own, other])?)?.sigmoid()
    }
}

/// Joint routing of both sides. With `gate == None` no cross term is added
/// and the result is identical to routing each side on its own.
pub fn snoop_route<'g>(
    g: &'g Graph,
    store: &ParamStore,
    votes_p: &VoteTensor<'g>,
    votes_h: &VoteTensor<'g>,
    iterations: usize,
    gate: Option<&SnoopGate>,
) -> Result<(Vec<Var<'g>>, Vec<Var<'g>>, RoutingTrace, RoutingTrace)> {
    if iterations == 0 {
        return Err(Error::Config("routing iterations must be at least 1".into()));
    }
    let mut p = Side::start(g, votes_p, "premise");
    let mut h = Side::start(g, votes_h, "hypothesis");
    if gate.is_some() {
        p.trace.alphas = Some(Vec::new());
        h.trace.alphas = Some(Vec::new());
    }
    let (mut caps_p, mut caps_h) = (Vec::new(), Vec::new());
    for _ in 0..iterations {
        caps_p = p.capsules(votes_p)?;
        caps_h = h.capsules(votes_h)?;
        let mut inc_p = Vec::with_capacity(caps_p.len());
        let mut inc_h = Vec::with_capacity(caps_h.len());
        let mut alpha_p = Vec::new();
        let mut alpha_h = Vec::new();
        for l in 0..caps_p.len() {
            let (up, uh) = (votes_p.votes[l], votes_h.votes[l]);
            let (vp, vh) = (caps_p[l], caps_h[l]);
            let mut ap = agreement(up, vp)?;
            let mut ah = agreement(uh, vh)?;
            if let Some(gate) = gate {
                let a_p = gate.alpha(g, store, vp, vh)?;
                let a_h = gate.alpha(g, store, vh, vp)?;
                ap = ap.add(agreement(up, vh)?.scale_by(a_p)?)?;
                ah = ah.add(agreement(uh, vp)?.scale_by(a_h)?)?;
                alpha_p.push(a_p.item());
                alpha_h.push(a_h.item());
            }
            inc_p.push(ap);
            inc_h.push(ah);
        }
        if let Some(a) = p.trace.alphas.as_mut() {
            a.push(alpha_p);
        }
        if let Some(a) = h.trace.alphas.as_mut() {
            a.push(alpha_h);
        }
        p.update(inc_p)?;
        h.update(inc_h)?;
    }
    Ok((caps_p, caps_h, p.trace, h.trace))
}

/// Bilinear injection: `α_ij = s_p_i W s_h_jᵀ`, softmax over premise
/// positions, then `[s_h_j ; Σ_i softmax_i(α_ij) s_p_i]`. Returns `[n × 2d]`.
pub fn inject<'g>(s_p: Var<'g>, s_h: Var<'g>, w: Var<'g>) -> Result<Var<'g>> {
    let g = s_p.graph();
    let scores = s_p.matmul(w)?.matmul(s_h.transpose()?)?;
    let attention = scores.transpose()?.softmax(1)?;
    let summary = attention.matmul(s_p)?;
    g.concat_cols(&[s_h, summary])
}

/// Perspective representations feeding the prediction head.
#[derive(Clone, Debug)]
pub struct PerspectiveSet<'g> {
    pub variant: RoutingVariant,
    /// Relation perspectives in EN, NE, CON order; the orphan is excluded.
    pub vectors: Vec<(Perspective, Var<'g>)>,
    /// Existence score per relation perspective, `[1 × 1]` each, in `[0, 1)`.
    pub norms: Vec<Var<'g>>,
}

impl<'g> PerspectiveSet<'g> {
    pub fn get(&self, p: Perspective) -> Option<Var<'g>> {
        self.vectors.iter().find(|(q, _)| *q == p).map(|&(_, v)| v)
    }

    pub fn norm_values(&self) -> Vec<f64> {
        self.norms.iter().map(Var::item).collect()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].1.shape()[1]
    }

    /// Builds the set from routed capsules. A perspective made of two
    /// concatenated capsules reports the root-mean-square of their norms,
    /// which keeps the existence score inside `[0, 1)`.
    fn from_capsules(variant: RoutingVariant, perspectives: &[Perspective], parts: &[Vec<Var<'g>>]) -> Result<Self> {
        let g = parts[0][0].graph();
        let mut vectors = Vec::new();
        let mut norms = Vec::new();
        for (l, &p) in perspectives.iter().enumerate() {
            if p == Perspective::Orphan {
                continue;
            }
            let pieces: Vec<Var<'g>> = parts.iter().map(|side| side[l]).collect();
            let v = if pieces.len() == 1 { pieces[0] } else { g.concat_cols(&pieces)? };
            let mut norm = v.l2_norm(1)?;
            if pieces.len() > 1 {
                norm = norm.scale(1.0 / (pieces.len() as f64).sqrt())?;
            }
            vectors.push((p, v));
            norms.push(norm);
        }
        Ok(PerspectiveSet {
            variant,
            vectors,
            norms,
        })
    }
}

/// Routing output: perspectives plus one trace per routed side.
#[derive(Clone, Debug)]
pub struct Routed<'g> {
    pub perspectives: PerspectiveSet<'g>,
    pub traces: Vec<RoutingTrace>,
}

/// Routing parameters for one variant.
#[derive(Clone, Debug)]
pub struct Router {
    pub config: RoutingConfig,
    pub transforms: Vec<(Perspective, ParamId)>,
    pub snoop: Option<SnoopGate>,
    pub bilinear: Option<ParamId>,
}

impl Router {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, config: RoutingConfig, d_low: usize) -> Result<Self> {
        config.validate()?;
        let vote_in = match config.variant {
            RoutingVariant::Injection => 2 * d_low,
            _ => d_low,
        };
        let mut transforms = Vec::new();
        for p in config.perspectives() {
            let w = store.add(format!("routing.W_{}", p.tag()), rng.xavier(vote_in, config.d_high))?;
            transforms.push((p, w));
        }
        let snoop = match config.variant {
            RoutingVariant::Snoop => Some(SnoopGate {
                linear: Linear::new(store, rng, "routing.snoop", 2 * config.d_high, 1)?,
            }),
            _ => None,
        };
        let bilinear = match config.variant {
            RoutingVariant::Injection => Some(store.add("routing.W_bilinear", rng.xavier(d_low, d_low))?),
            _ => None,
        };
        Ok(Router {
            config,
            transforms,
            snoop,
            bilinear,
        })
    }

    pub fn perspective_dim(&self) -> usize {
        match self.config.variant {
            RoutingVariant::Injection => self.config.d_high,
            _ => 2 * self.config.d_high,
        }
    }

    pub fn route<'g>(&self, g: &'g Graph, store: &ParamStore, enc: &EncodedPair<'g>) -> Result<Routed<'g>> {
        match self.config.variant {
            RoutingVariant::Vanilla => self.route_vanilla(g, store, enc),
            RoutingVariant::Snoop => self.route_snoop(g, store, enc, true),
            RoutingVariant::Injection => self.route_injection(g, store, enc),
        }
    }

    pub fn route_vanilla<'g>(&self, g: &'g Graph, store: &ParamStore, enc: &EncodedPair<'g>) -> Result<Routed<'g>> {
        let r = self.config.iterations;
        let votes_p = vote(g, store, enc.s_p, &self.transforms)?;
        let votes_h = vote(g, store, enc.s_h, &self.transforms)?;
        let (caps_p, mut trace_p) = dynamic_route_side(&votes_p, r, "premise")?;
        let (caps_h, mut trace_h) = dynamic_route_side(&votes_h, r, "hypothesis")?;
        trace_p.variant = Some(RoutingVariant::Vanilla);
        trace_h.variant = Some(RoutingVariant::Vanilla);
        Ok(Routed {
            perspectives: PerspectiveSet::from_capsules(
                RoutingVariant::Vanilla,
                &votes_p.perspectives,
                &[caps_p, caps_h],
            )?,
            traces: vec![trace_p, trace_h],
        })
    }

    /// Snoop routing; `snoop = false` drops the cross term entirely.
    pub fn route_snoop<'g>(&self, g: &'g Graph, store: &ParamStore, enc: &EncodedPair<'g>, snoop: bool) -> Result<Routed<'g>> {
        let gate = if snoop {
            Some(self.snoop.as_ref().ok_or_else(|| Error::Config("router has no snoop gate".into()))?)
        } else {
            None
        };
        let votes_p = vote(g, store, enc.s_p, &self.transforms)?;
        let votes_h = vote(g, store, enc.s_h, &self.transforms)?;
        let (caps_p, caps_h, mut trace_p, mut trace_h) =
            snoop_route(g, store, &votes_p, &votes_h, self.config.iterations, gate)?;
        let variant = if snoop { RoutingVariant::Snoop } else { RoutingVariant::Vanilla };
        trace_p.variant = Some(variant);
        trace_h.variant = Some(variant);
        Ok(Routed {
            perspectives: PerspectiveSet::from_capsules(variant, &votes_p.perspectives, &[caps_p, caps_h])?,
            traces: vec![trace_p, trace_h],
        })
    }

    pub fn route_injection<'g>(&self, g: &'g Graph, store: &ParamStore, enc: &EncodedPair<'g>) -> Result<Routed<'g>> {
        let w = self
            .bilinear
            .ok_or_else(|| Error::Config("router has no bilinear injection weight".into()))?;
        let injected = inject(enc.s_p, enc.s_h, g.param(store, w))?;
        let votes = vote(g, store, injected, &self.transforms)?;
        let (caps, mut trace) = dynamic_route_side(&votes, self.config.iterations, "hypothesis")?;
        trace.variant = Some(RoutingVariant::Injection);
        Ok(Routed {
            perspectives: PerspectiveSet::from_capsules(RoutingVariant::Injection, &votes.perspectives, &[caps])?,
            traces: vec![trace],
        })
    }
}
