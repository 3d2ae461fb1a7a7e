//! Full model: encoder plus either the pooling baseline or routing with the
//! holistic prediction head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{BaselineHead, EncodedPair, Encoder, EncoderConfig, SentencePair};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::objective::{self, LossBreakdown, ObjectiveConfig, PredictionHead};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::routing::{Routed, Router, RoutingConfig, RoutingVariant};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Vanilla,
    Snoop,
    Injection,
}

impl Variant {
    pub fn routing(self) -> Option<RoutingVariant> {
        match self {
            Variant::Baseline => None,
            Variant::Vanilla => Some(RoutingVariant::Vanilla),
            Variant::Snoop => Some(RoutingVariant::Snoop),
            Variant::Injection => Some(RoutingVariant::Injection),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Vanilla => "vanilla",
            Variant::Snoop => "snoop",
            Variant::Injection => "injection",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "vanilla" => Ok(Variant::Vanilla),
            "snoop" => Ok(Variant::Snoop),
            "injection" => Ok(Variant::Injection),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub d_high: usize,
    pub iterations: usize,
    pub orphan: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.embedding_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("vocabulary, embedding and hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.variant != Variant::Baseline {
            self.routing().expect("routing variant").validate()?;
        }
        Ok(())
    }

    pub fn routing(&self) -> Option<RoutingConfig> {
        self.variant.routing().map(|variant| RoutingConfig {
            iterations: self.iterations,
            variant,
            d_high: self.d_high,
            orphan: self.orphan,
        })
    }
}

#[derive(Clone, Debug)]
enum Head {
    Baseline(BaselineHead),
    Mpi { router: Router, head: PredictionHead },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    head: Head,
}

/// Outputs of one forward pass.
pub struct Forward<'g> {
    pub encoded: EncodedPair<'g>,
    /// `[1 × 3]` label logits.
    pub logits: Var<'g>,
    pub routed: Option<Routed<'g>>,
}

/// Result of scoring one example against its gold label.
pub struct Scored<'g> {
    pub forward: Forward<'g>,
    pub loss: Var<'g>,
    pub breakdown: LossBreakdown,
}

impl Model {
    /// Fresh model with Xavier-initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(
            &mut params,
            &mut rng,
            &EncoderConfig {
                vocab_size: config.vocab_size,
                embedding_dim: config.embedding_dim,
                hidden: config.hidden,
                dropout: config.dropout,
            },
        )?;
        let d_low = encoder.output_dim();
        let head = match config.routing() {
            None => Head::Baseline(BaselineHead::new(&mut params, &mut rng, d_low, config.hidden)?),
            Some(rc) => {
                let router = Router::new(&mut params, &mut rng, rc, d_low)?;
                let head = PredictionHead::new(&mut params, &mut rng, router.perspective_dim(), config.hidden)?;
                Head::Mpi { router, head }
            }
        };
        Ok(Model {
            config,
            params,
            encoder,
            head,
        })
    }

    pub fn router(&self) -> Option<&Router> {
        match &self.head {
            Head::Mpi { router, .. } => Some(router),
            Head::Baseline(_) => None,
        }
    }

    pub fn prediction_head(&self) -> Option<&PredictionHead> {
        match &self.head {
            Head::Mpi { head, .. } => Some(head),
            Head::Baseline(_) => None,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, pair: &SentencePair) -> Result<Forward<'g>> {
        self.forward_with(g, &self.params, pair)
    }

    /// Forward pass reading weights from `params` (same layout as `self.params`).
    pub fn forward_with<'g>(&self, g: &'g Graph, params: &ParamStore, pair: &SentencePair) -> Result<Forward<'g>> {
        let encoded = self.encoder.encode_pair(g, params, pair)?;
        let dropout = self.config.dropout;
        match &self.head {
            Head::Baseline(b) => Ok(Forward {
                encoded,
                logits: b.logits(g, params, &encoded, dropout)?,
                routed: None,
            }),
            Head::Mpi { router, head } => {
                let routed = router.route(g, params, &encoded)?;
                let logits = head.holistic_logits(g, params, &routed.perspectives, dropout)?;
                Ok(Forward {
                    encoded,
                    logits,
                    routed: Some(routed),
                })
            }
        }
    }

    /// Forward pass plus `ℓ*` for one example.
    pub fn score<'g>(
        &self,
        g: &'g Graph,
        params: &ParamStore,
        pair: &SentencePair,
        gold: Label,
        obj: &ObjectiveConfig,
    ) -> Result<Scored<'g>> {
        let forward = self.forward_with(g, params, pair)?;
        let main = objective::main_loss(forward.logits, gold)?;
        let (aux_ce, aux_margin, norms) = match (&forward.routed, &self.head) {
            (Some(routed), Head::Mpi { head, .. }) => {
                let ps = &routed.perspectives;
                let ce = if obj.use_ce {
                    Some(objective::aux_ce_loss(g, params, ps, head, obj.detach_norms, self.config.dropout)?)
                } else {
                    None
                };
                let margin = if obj.use_margin {
                    Some(objective::margin_loss(ps, gold, obj)?)
                } else {
                    None
                };
                let n = ps.norm_values();
                (ce, margin, [n[0], n[1], n[2]])
            }
            _ => (None, None, [0.0; 3]),
        };
        let (loss, mut breakdown) = objective::total_loss(main, aux_ce, aux_margin, obj.beta)?;
        breakdown.norms = norms;
        Ok(Scored {
            forward,
            loss,
            breakdown,
        })
    }

    /// Evaluation-mode label probabilities.
    pub fn predict(&self, pair: &SentencePair) -> Result<Tensor> {
        let g = Graph::new();
        let f = self.forward(&g, pair)?;
        let p = f.logits.value().softmax(1)?;
        Ok(p)
    }

    /// Evaluation-mode count of perspectives that predict their own label.
    pub fn aux_correct(&self, pair: &SentencePair) -> Result<Option<usize>> {
        let Head::Mpi { head, .. } = &self.head else { return Ok(None) };
        let g = Graph::new();
        let f = self.forward(&g, pair)?;
        let routed = f.routed.expect("routing output for MPI variants");
        objective::aux_correct(&g, &self.params, &routed.perspectives, head).map(Some)
    }
}
