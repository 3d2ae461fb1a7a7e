//! Prediction heads and training losses over perspective capsules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::label::{Label, Perspective};
use crate::nn::FeedForward;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::routing::PerspectiveSet;

/// Which perspectives the margin loss treats as present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Only the gold label's perspective is present; the others are pushed
    /// below `m_minus` with weight `lambda`.
    GoldPresent,
    /// Every perspective is pushed above `m_plus`.
    AllPresent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub margin_mode: MarginMode,
    pub use_ce: bool,
    pub use_margin: bool,
    /// Treat capsule norms in the weighted cross-entropy as constants.
    pub detach_norms: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 1.0,
            m_plus: 0.9,
            m_minus: 0.4,
            lambda: 0.5,
            margin_mode: MarginMode::GoldPresent,
            use_ce: true,
            use_margin: true,
            detach_norms: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1 (got m_minus={}, m_plus={})",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative (got {})", self.beta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative (got {})", self.lambda)));
        }
        Ok(())
    }
}

/// Holistic path `f1`, per-perspective path `f2` and shared label embeddings.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub holistic: FeedForward,
    pub perspective: FeedForward,
    /// Label embeddings as columns, `[hidden × 3]`.
    pub labels: ParamId,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, perspective_dim: usize, hidden: usize) -> Result<Self> {
        Ok(PredictionHead {
            holistic: FeedForward::new(store, rng, "head.f1", 3 * perspective_dim, hidden, hidden)?,
            perspective: FeedForward::new(store, rng, "head.f2", perspective_dim, hidden, hidden)?,
            labels: store.add("head.label_embedding", rng.xavier(hidden, 3))?,
        })
    }

    /// Logits from `f1([v_EN; v_NE; v_CON])`, shape `[1 × 3]`.
    pub fn holistic_logits<'g>(&self, g: &'g Graph, store: &ParamStore, ps: &PerspectiveSet<'g>, dropout: f64) -> Result<Var<'g>> {
        let parts = Perspective::RELATIONS
            .iter()
            .map(|&p| {
                ps.get(p)
                    .ok_or_else(|| Error::Config(format!("perspective {p} missing from the set")))
            })
            .collect::<Result<Vec<_>>>()?;
        let v = self.holistic.forward(g, store, g.concat_cols(&parts)?, dropout)?;
        v.matmul(g.param(store, self.labels))
    }

    /// Logits of `p(· | v_l)` from `f2(v_l)`, shape `[1 × 3]`.
    pub fn perspective_logits<'g>(&self, g: &'g Graph, store: &ParamStore, v: Var<'g>, dropout: f64) -> Result<Var<'g>> {
        let t = self.perspective.forward(g, store, v, dropout)?;
        t.matmul(g.param(store, self.labels))
    }
}

/// `−log p[gold]` computed through log-softmax of the logits.
pub fn main_loss<'g>(logits: Var<'g>, gold: Label) -> Result<Var<'g>> {
    logits.log_softmax(1)?.pick(0, gold.index())?.scale(-1.0)
}

/// `−Σ_l ‖v_l‖ · log p(l | v_l)`.
pub fn aux_ce_loss<'g>(
    g: &'g Graph,
    store: &ParamStore,
    ps: &PerspectiveSet<'g>,
    head: &PredictionHead,
    detach_norms: bool,
    dropout: f64,
) -> Result<Var<'g>> {
    let mut terms = Vec::with_capacity(3);
    for (&(p, v), &norm) in ps.vectors.iter().zip(&ps.norms) {
        let label = p.label().ok_or_else(|| Error::Config("orphan capsule in prediction set".into()))?;
        let nll = main_loss(head.perspective_logits(g, store, v, dropout)?, label)?;
        let weight = if detach_norms { g.constant((*norm.value()).clone()) } else { norm };
        terms.push(nll.mul(weight)?);
    }
    g.concat_cols(&terms)?.sum()
}

/// Squared-hinge margin loss on perspective norms.
pub fn margin_loss<'g>(ps: &PerspectiveSet<'g>, gold: Label, cfg: &ObjectiveConfig) -> Result<Var<'g>> {
    cfg.validate()?;
    let g = ps.norms[0].graph();
    let mut terms = Vec::with_capacity(3);
    for (&(p, _), &norm) in ps.vectors.iter().zip(&ps.norms) {
        let present = match cfg.margin_mode {
            MarginMode::GoldPresent => p == gold.perspective(),
            MarginMode::AllPresent => true,
        };
        let term = if present {
            norm.affine(-1.0, cfg.m_plus)?.relu()?.square()?
        } else {
            norm.affine(1.0, -cfg.m_minus)?.relu()?.square()?.scale(cfg.lambda)?
        };
        terms.push(term);
    }
    g.concat_cols(&terms)?.sum()
}

/// Scalar loss values of one example or the mean over a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux_ce: f64,
    pub aux_margin: f64,
    pub total: f64,
    pub beta: f64,
    /// Mean existence score per relation perspective (EN, NE, CON).
    pub norms: [f64; 3],
}

impl LossBreakdown {
    /// Running mean helper: adds `other / n`.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: usize) {
        let w = 1.0 / n as f64;
        self.main += other.main * w;
        self.aux_ce += other.aux_ce * w;
        self.aux_margin += other.aux_margin * w;
        self.total += other.total * w;
        self.beta = other.beta;
        for (a, b) in self.norms.iter_mut().zip(other.norms) {
            *a += b * w;
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.main, self.aux_ce, self.aux_margin, self.total].iter().all(|x| x.is_finite())
    }
}

/// `ℓ* = ℓ + β (ℓ_ce + ℓ_margin)`; missing auxiliary terms count as zero.
pub fn total_loss<'g>(
    main: Var<'g>,
    aux_ce: Option<Var<'g>>,
    aux_margin: Option<Var<'g>>,
    beta: f64,
) -> Result<(Var<'g>, LossBreakdown)> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative (got {beta})")));
    }
    let mut breakdown = LossBreakdown {
        main: main.item(),
        beta,
        ..Default::default()
    };
    let aux = match (aux_ce, aux_margin) {
        (Some(c), Some(m)) => {
            breakdown.aux_ce = c.item();
            breakdown.aux_margin = m.item();
            Some(c.add(m)?)
        }
        (Some(c), None) => {
            breakdown.aux_ce = c.item();
            Some(c)
        }
        (None, Some(m)) => {
            breakdown.aux_margin = m.item();
            Some(m)
        }
        (None, None) => None,
    };
    let total = match aux {
        Some(a) => main.add(a.scale(beta)?)?,
        None => main,
    };
    breakdown.total = total.item();
    Ok((total, breakdown))
}

/// Number of relation perspectives whose own head predicts their label.
pub fn aux_correct<'g>(g: &'g Graph, store: &ParamStore, ps: &PerspectiveSet<'g>, head: &PredictionHead) -> Result<usize> {
    let mut correct = 0;
    for &(p, v) in &ps.vectors {
        let logits = head.perspective_logits(g, store, v, 0.0)?.value();
        if Some(logits.argmax()) == p.label().map(Label::index) {
            correct += 1;
        }
    }
    Ok(correct)
}
