use super::{AttributeModel, AttributeTarget, SteerError, SteeringParams};
use crate::textmodel::tensor::log_softmax;
use crate::textmodel::{Graph, LanguageModel, LayerKv, ModelInput, PastState, Scalar, Tensor, Var};

/// Floor applied to the unmodified distribution inside the KL term.
const P_FLOOR: f64 = 1e-12;
/// Gradient norms at or below this are treated as zero.
const NORM_EPS: f64 = 1e-10;

/// Hidden states already pooled for a discriminator: the sum of the
/// unperturbed final hidden states of previously generated tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolContext {
    pub acc: Vec<f64>,
    pub count: usize,
    /// Whether the token being fed belongs to the pooled segment.
    pub include_last: bool,
}

impl PoolContext {
    pub fn empty(d_model: usize) -> Self {
        PoolContext { acc: vec![0.0; d_model], count: 0, include_last: false }
    }

    pub fn push(&mut self, hidden: &[f64]) {
        self.acc.iter_mut().zip(hidden).for_each(|(a, h)| *a += h);
        self.count += 1;
    }
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome<T> {
    pub delta: PastState<T>,
    /// Attribute loss at every iterate (`m + 1` values).
    pub iteration_losses: Vec<f64>,
    /// KL(p̃‖p) at the final ΔH.
    pub kl: f64,
    /// Next-token logits from the perturbed past.
    pub logits: Vec<T>,
    /// Perturbed past extended with the fed token's keys and values.
    pub present: PastState<T>,
}

struct Eval<T> {
    attr: f64,
    kl: f64,
    total: f64,
    grads: Option<PastState<T>>,
    logits: Vec<T>,
    present: PastState<T>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate<T: Scalar>(
    lm: &LanguageModel<T>,
    past: &PastState<T>,
    delta: &PastState<T>,
    last: usize,
    target: AttributeTarget<'_>,
    params: &SteeringParams,
    log_p: &[f64],
    pool: &PoolContext,
    want_grad: bool,
) -> Result<Eval<T>, SteerError> {
    let cfg = &lm.config;
    let past_len = past.len();
    let mut g: Graph<'_, T> = Graph::new();
    let p = lm.bind(&mut g, false);
    let mut leaves: Vec<(Var, Var)> = Vec::with_capacity(cfg.layers);
    let mut kv = Vec::with_capacity(cfg.layers);
    let mut base = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let dk = g.input(delta.keys[l].clone(), want_grad);
        let dv = g.input(delta.values[l].clone(), want_grad);
        let pk = g.borrowed(&past.keys[l], false);
        let pv = g.borrowed(&past.values[l], false);
        kv.push(LayerKv { k: g.add(pk, dk), v: g.add(pv, dv) });
        base.push(LayerKv { k: pk, v: pv });
        leaves.push((dk, dv));
    }
    let out = lm.forward_graph(&mut g, &p, ModelInput::Tokens(&[last]), Some(&kv), past_len)?;
    let log_q = g.log_softmax(out.logits);
    let q = g.softmax(out.logits);

    let attr = match target.model {
        AttributeModel::Bow(bow) => {
            let mass = g.select_cols_sum(q, &bow.ids);
            let l = g.log(mass);
            g.scale(l, -T::one())
        }
        AttributeModel::Head(head) => {
            let room = cfg.context.saturating_sub(past_len + 1);
            let horizon = params.horizon.min(room);
            // The discriminator reads hidden states computed without ΔH, so the
            // perturbation reaches it only through the next-token distribution
            // and cannot satisfy it by shifting internal states alone.
            let clean = lm.forward_graph(&mut g, &p, ModelInput::Tokens(&[last]), Some(&base), past_len)?;
            let mut terms: Vec<Var> = Vec::new();
            if pool.include_last {
                terms.push(clean.hidden);
            }
            let mut probs = q;
            let mut present = clean.present;
            let mut plen = past_len + 1;
            for _ in 0..horizon {
                // expected next-token embedding under the current distribution
                let e = g.matmul(probs, p[0]);
                let o = lm.forward_graph(&mut g, &p, ModelInput::Embeddings(e), Some(&present), plen)?;
                terms.push(o.hidden);
                probs = g.softmax(o.logits);
                present = o.present;
                plen += 1;
            }
            if terms.is_empty() {
                terms.push(clean.hidden);
            }
            let count = pool.count + terms.len();
            let acc = Tensor::from_vec(1, pool.acc.len(), pool.acc.iter().map(|&x| T::from_f(x)).collect());
            let mut sum = g.input(acc, false);
            for t in terms {
                sum = g.add(sum, t);
            }
            let pooled = g.scale(sum, T::from_f(1.0 / count as f64));
            let lp = head.log_prob_graph(&mut g, pooled, target.class);
            g.scale(lp, -T::one())
        }
    };

    let lp_const = g.input(Tensor::from_vec(1, log_p.len(), log_p.iter().map(|&x| T::from_f(x)).collect()), false);
    let diff = g.sub(log_q, lp_const);
    let weighted = g.mul(q, diff);
    let kl = g.sum(weighted);
    let kl_term = g.scale(kl, T::from_f(params.kl_scale));
    let total = g.add(attr, kl_term);

    let grads = if want_grad {
        let mut gr = g.backward(total);
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        for (l, (dk, dv)) in leaves.into_iter().enumerate() {
            let (r, c) = delta.keys[l].shape();
            keys.push(gr.take(dk).unwrap_or_else(|| Tensor::zeros(r, c)));
            values.push(gr.take(dv).unwrap_or_else(|| Tensor::zeros(r, c)));
        }
        Some(PastState { keys, values })
    } else {
        None
    };
    let present = PastState {
        keys: out.present.iter().map(|x| g.value(x.k).clone()).collect(),
        values: out.present.iter().map(|x| g.value(x.v).clone()).collect(),
    };
    Ok(Eval {
        attr: g.scalar(attr).f(),
        kl: g.scalar(kl).f(),
        total: g.scalar(total).f(),
        grads,
        logits: g.value(out.logits).data.clone(),
        present,
    })
}

/// `log p` of the unmodified distribution, floored. Computed in `T` exactly
/// as the graph computes `log p̃`, so the KL term and its gradient vanish
/// at ΔH = 0.
fn log_floor<T: Scalar>(reference_logits: &[T]) -> Vec<f64> {
    let floor = P_FLOOR.ln();
    log_softmax(reference_logits).iter().map(|x| x.f().max(floor)).collect()
}

/// The steering objective `−log p(a|·) + λ_KL·KL(p̃‖p)` at `past + delta`
/// and its gradient with respect to `delta`.
#[allow(clippy::too_many_arguments)]
pub fn steering_loss<T: Scalar>(
    lm: &LanguageModel<T>,
    past: &PastState<T>,
    delta: &PastState<T>,
    last: usize,
    target: AttributeTarget<'_>,
    params: &SteeringParams,
    reference_logits: &[T],
    pool: &PoolContext,
) -> Result<(f64, PastState<T>), SteerError> {
    target.validate(lm.config.d_model, lm.config.vocab_size)?;
    let ev = evaluate(lm, past, delta, last, target, params, &log_floor(reference_logits), pool, true)?;
    Ok((ev.total, ev.grads.expect("gradients requested")))
}

/// Run `num_iterations` normalized gradient steps on ΔH, starting from zero.
///
/// `reference_logits` are the unperturbed model's next-token logits; their
/// distribution is the KL reference.
pub fn perturb_past<T: Scalar>(
    lm: &LanguageModel<T>,
    past: &PastState<T>,
    last: usize,
    target: AttributeTarget<'_>,
    params: &SteeringParams,
    reference_logits: &[T],
    pool: &PoolContext,
) -> Result<PerturbOutcome<T>, SteerError> {
    params.validate()?;
    target.validate(lm.config.d_model, lm.config.vocab_size)?;
    if !past.all_finite() {
        return Err(SteerError::InvalidParams("past state is not finite".into()));
    }
    let log_p = log_floor(reference_logits);
    let mut delta = past.zeros_like();
    let mut losses = Vec::with_capacity(params.num_iterations + 1);
    for _ in 0..params.num_iterations {
        let ev = evaluate(lm, past, &delta, last, target, params, &log_p, pool, true)?;
        losses.push(ev.attr);
        let grads = ev.grads.expect("gradients requested");
        if !grads.all_finite() || !ev.total.is_finite() {
            return Err(SteerError::NonFiniteGradient);
        }
        if params.alpha == 0.0 {
            continue;
        }
        let kinds = delta.keys.iter_mut().zip(&grads.keys).chain(delta.values.iter_mut().zip(&grads.values));
        for (d, gr) in kinds {
            let norm = gr.norm().f();
            if norm <= NORM_EPS {
                // below the floor the direction is rounding noise
                continue;
            }
            let step = params.alpha / norm.powf(params.gamma);
            let s = T::from_f(step);
            d.data.iter_mut().zip(&gr.data).for_each(|(x, &gv)| *x -= s * gv);
        }
    }
    let fin = evaluate(lm, past, &delta, last, target, params, &log_p, pool, false)?;
    losses.push(fin.attr);
    Ok(PerturbOutcome { delta, iteration_losses: losses, kl: fin.kl, logits: fin.logits, present: fin.present })
}
