//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::encoder::SentencePair;
use crate::label::Label;
use crate::model::{Model, ModelConfig, Variant};
use crate::objective::ObjectiveConfig;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    if g.used_randomness() {
        return Err(Error::NonDeterministic("a stochastic layer was recorded".into()));
    }
    Ok(loss.item())
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every entry of every trainable parameter.
pub fn finite_diff_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let g = Graph::new();
    let loss = f(&g, store)?;
    if g.used_randomness() {
        return Err(Error::NonDeterministic("a stochastic layer was recorded".into()));
    }
    let base = loss.item();
    let analytic = g.backward(loss)?.params(store);
    let again = eval(store, &f)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(&work, &f)?;
            work.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(&work, &f)?;
            work.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// Finite-difference step and tolerance used by the built-in suites.
pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// One named gradient check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOLERANCE
    }
}

/// `Σ x ⊙ w` with a fixed random `w`, so every output entry gets a
/// distinct upstream gradient.
fn weighted<'g>(x: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let shape = x.shape();
    let w = RngStream::new(seed).uniform_tensor(&shape, -1.0, 1.0);
    x.mul(x.graph().constant(w))?.sum()
}

/// Checks every differentiable tape operation on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = RngStream::new(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", rng.uniform_tensor(&[3, 4], -2.0, 2.0))?;
    let b = store.add("b", rng.uniform_tensor(&[3, 4], 0.5, 2.0))?;
    let c = store.add("c", rng.uniform_tensor(&[4, 2], -1.0, 1.0))?;
    let row = store.add("row", rng.uniform_tensor(&[1, 4], -1.0, 1.0))?;
    let col = store.add("col", rng.uniform_tensor(&[3, 1], -1.0, 1.0))?;
    let s = store.add("s", rng.uniform_tensor(&[1, 1], 0.5, 1.5))?;
    let u = store.add("u", rng.uniform_tensor(&[2, 8], -0.8, 0.8))?;
    let xp = store.add("xp", rng.uniform_tensor(&[3, 8], -1.0, 1.0))?;

    type F = for<'g> fn(&'g Graph, &ParamStore, [ParamId; 8]) -> Result<Var<'g>>;
    let cases: Vec<(&str, F)> = vec![
        ("matmul", |g, st, [a, _, c, ..]| weighted(g.param(st, a).matmul(g.param(st, c))?, 1)),
        ("add", |g, st, [a, b, ..]| weighted(g.param(st, a).add(g.param(st, b))?, 2)),
        ("sub", |g, st, [a, b, ..]| weighted(g.param(st, a).sub(g.param(st, b))?, 3)),
        ("mul", |g, st, [a, b, ..]| weighted(g.param(st, a).mul(g.param(st, b))?, 4)),
        ("div", |g, st, [a, b, ..]| weighted(g.param(st, a).div(g.param(st, b))?, 5)),
        ("add_row", |g, st, [a, _, _, row, ..]| weighted(g.param(st, a).add_row(g.param(st, row))?, 6)),
        ("mul_col", |g, st, [a, _, _, _, col, ..]| weighted(g.param(st, a).mul_col(g.param(st, col))?, 7)),
        ("scale_by", |g, st, [a, _, _, _, _, s, ..]| weighted(g.param(st, a).scale_by(g.param(st, s))?, 8)),
        ("affine", |g, st, [a, ..]| weighted(g.param(st, a).affine(-0.7, 0.3)?, 9)),
        ("sigmoid", |g, st, [a, ..]| weighted(g.param(st, a).sigmoid()?, 10)),
        ("tanh", |g, st, [a, ..]| weighted(g.param(st, a).tanh()?, 11)),
        ("relu", |g, st, [a, ..]| weighted(g.param(st, a).relu()?, 12)),
        ("softmax_rows", |g, st, [a, ..]| weighted(g.param(st, a).softmax(1)?, 13)),
        ("softmax_cols", |g, st, [a, ..]| weighted(g.param(st, a).softmax(0)?, 14)),
        ("log_softmax", |g, st, [a, ..]| weighted(g.param(st, a).log_softmax(1)?, 15)),
        ("transpose", |g, st, [a, ..]| weighted(g.param(st, a).transpose()?, 16)),
        ("concat_cols", |g, st, [a, b, ..]| weighted(g.concat_cols(&[g.param(st, a), g.param(st, b)])?, 17)),
        ("concat_rows", |g, st, [a, _, _, row, ..]| weighted(g.concat_rows(&[g.param(st, a), g.param(st, row)])?, 18)),
        ("slice_cols", |g, st, [a, ..]| weighted(g.param(st, a).slice_cols(1, 2)?, 19)),
        ("slice_rows", |g, st, [a, ..]| weighted(g.param(st, a).slice_rows(1, 2)?, 20)),
        ("sum", |g, st, [a, ..]| g.param(st, a).square()?.sum()),
        ("mean_rows", |g, st, [a, ..]| weighted(g.param(st, a).mean_rows()?, 21)),
        ("max_rows", |g, st, [a, ..]| weighted(g.param(st, a).max_rows()?, 22)),
        ("l2_norm", |g, st, [a, ..]| weighted(g.param(st, a).l2_norm(1)?, 23)),
        ("gather", |g, st, [a, ..]| weighted(g.gather(g.param(st, a), &[Some(2), None, Some(0), Some(2)])?, 24)),
        ("pick", |g, st, [a, ..]| g.param(st, a).tanh()?.pick(1, 3)),
        ("reverse_rows", |g, st, [a, ..]| weighted(g.param(st, a).reverse_rows()?, 25)),
        ("lstm", |g, st, [.., u, xp]| weighted(g.param(st, xp).lstm(g.param(st, u))?, 26)),
        ("squash", |g, st, [a, ..]| weighted(crate::routing::squash(g.param(st, a))?, 27)),
    ];
    let ids = [a, b, c, row, col, s, u, xp];
    cases
        .into_iter()
        .map(|(name, f)| {
            let report = finite_diff_check(&store, SUITE_STEP, |g, st| f(g, st, ids))?;
            Ok(SuiteEntry {
                name: name.to_string(),
                report,
            })
        })
        .collect()
}

/// Tiny model configuration used by [`model_suite`].
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: 8,
        embedding_dim: 4,
        hidden: 4,
        d_high: 2,
        iterations: 2,
        orphan: false,
        dropout: 0.0,
    }
}

/// Adds uniform noise in `[-scale, scale]` to every parameter. Zero biases
/// feeding ReLUs can leave activations exactly on the kink, where central
/// differences and the subgradient legitimately disagree.
pub fn jitter(store: &mut ParamStore, rng: &mut RngStream, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).value.data_mut() {
            *x += rng.uniform(-scale, scale);
        }
    }
}

/// Checks the full training objective, averaged over a two-example batch,
/// for every model variant at tiny dimensions and a jittered initialization.
pub fn model_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let batch = [
        (SentencePair::new(vec![2, 3, 4], vec![3, 5], 8)?, Label::Entailment),
        (SentencePair::new(vec![6, 7], vec![2, 7, 1], 8)?, Label::Contradiction),
    ];
    let obj = ObjectiveConfig::default();
    let mut out = Vec::new();
    for variant in [Variant::Baseline, Variant::Vanilla, Variant::Snoop, Variant::Injection] {
        let mut model = Model::new(tiny_config(variant), seed)?;
        jitter(&mut model.params, &mut RngStream::new(seed).fork(1), 0.2);
        let report = finite_diff_check(&model.params, SUITE_STEP, |g, st| {
            let mut losses = Vec::with_capacity(batch.len());
            for (pair, gold) in &batch {
                losses.push(model.score(g, st, pair, *gold, &obj)?.loss);
            }
            g.concat_cols(&losses)?.scale(1.0 / batch.len() as f64)?.sum()
        })?;
        out.push(SuiteEntry {
            name: format!("objective/{variant}"),
            report,
        });
    }
    Ok(out)
}
