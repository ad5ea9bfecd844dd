use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::colearning::{forward_objective, step_rng, PlanSource, StepPlan, TrainConfig};
use crate::data::{gen_dataset, Batch};
use crate::encoders::{Forward, ModelParams};
use crate::error::{bail, Result};
use crate::numerics::{relative_error, Tape, Tensor};
use crate::objectives::total_loss;

/// Result for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    /// Coordinates probed one at a time, plus one random direction.
    pub probes: usize,
    pub max_abs_grad: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

fn objective(params: &ModelParams, batch: &Batch, cfg: &TrainConfig, plan: &StepPlan) -> Result<f64> {
    let tape = Tape::new();
    let fw = Forward::new(&tape, params, false);
    let out = forward_objective::<ChaCha8Rng>(&fw, batch, cfg, PlanSource::Fixed(plan), false)?;
    Ok(out.parts.values()?.total(&cfg.weights))
}

/// Tape gradients of the full objective on a two-pair batch against central
/// differences. Masks and the stop-gradient targets are drawn once and
/// frozen, and the reversal node is left out so the tape computes the plain
/// gradient. Every tensor gets one random-direction probe, its
/// largest-gradient coordinate and up to `coords` further random coordinates.
pub fn model_gradcheck(config: &TrainConfig, seed: u64, h: f64, coords: usize) -> Result<ModelGradCheck> {
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Config, "finite-difference step {h} outside [1e-7, 1e-3]");
    }
    let cfg = TrainConfig { seed, batch_size: 2, ..config.clone() };
    cfg.validate()?;
    let data = gen_dataset(2, seed, &cfg.encoder)?;
    let batch = data.all()?;
    let params = ModelParams::init(&cfg.encoder, seed)?;

    let tape = Tape::new();
    let fw = Forward::new(&tape, &params, true);
    let mut rng = step_rng(seed, 0);
    let out = forward_objective(&fw, &batch, &cfg, PlanSource::Sample(&mut rng), false)?;
    let plan = StepPlan { targets: Some(out.targets.clone()), ..out.plan.clone() };
    let loss_var = total_loss(&out.parts, &cfg.weights)?;
    let loss = loss_var.item()?;
    let grads = fw.param_grads(&tape.backward(loss_var)?);
    drop(fw);

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_d1ff);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    let ids: Vec<_> = params.store.ids().collect();
    for (id, g) in ids.into_iter().zip(&grads) {
        let base = params.store.get(id).clone();
        let n = base.numel();
        let name = params.store.entries()[id.index()].name.clone();
        let mut eval_at = |x: Tensor| -> Result<f64> {
            work.store.set(id, x)?;
            objective(&work, &batch, &cfg, &plan)
        };
        let mut max_rel: f64 = 0.0;

        // random unit direction
        let mut d: Vec<f64> = (0..n).map(|_| probe_rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        d.iter_mut().for_each(|v| *v /= norm);
        let shifted = |s: f64| -> Result<Tensor> {
            Tensor::new(base.shape().to_vec(), base.data().iter().zip(&d).map(|(a, b)| a + s * h * b).collect())
        };
        let numeric = (eval_at(shifted(1.0)?)? - eval_at(shifted(-1.0)?)?) / (2.0 * h);
        let analytic: f64 = g.data().iter().zip(&d).map(|(a, b)| a * b).sum();
        max_rel = max_rel.max(relative_error(numeric, analytic));

        let argmax = (0..n).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap_or(0);
        let mut picks = vec![argmax];
        picks.extend(sample(&mut probe_rng, n, coords.min(n)).into_iter().filter(|&i| i != argmax));
        for &i in &picks {
            let mut x = base.clone();
            x.data_mut()[i] = base.data()[i] + h;
            let plus = eval_at(x.clone())?;
            x.data_mut()[i] = base.data()[i] - h;
            let minus = eval_at(x)?;
            max_rel = max_rel.max(relative_error((plus - minus) / (2.0 * h), g.data()[i]));
        }
        work.store.set(id, base)?;
        log::debug!("{name}: max rel err {max_rel:.3e}");
        tensors.push(TensorCheck {
            name,
            numel: n,
            probes: picks.len() + 1,
            max_abs_grad: g.data()[argmax].abs(),
            max_rel_err: max_rel,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(ModelGradCheck { loss, tensors, max_rel_err })
}
