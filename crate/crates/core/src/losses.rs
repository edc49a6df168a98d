//! Temporal-difference losses for the DQN and IQN heads.

use da3_tensor::{Graph, NodeId, ParamNodes, Params, Tensor};

use crate::model::Pass;
use crate::replay::Batch;
use crate::{CoreError, HeadKind, Model, Result, TargetRule};

/// Huber threshold of the DQN loss.
pub const HUBER_DELTA: f64 = 1.0;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean over the quantile axis of `[B, N, A]`, giving `[B][A]`.
pub fn mean_over_taus(q: &Tensor) -> Vec<Vec<f64>> {
    let s = q.shape();
    let (b, n, a) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            let mut m = vec![0.0; a];
            for row in q.data()[i * n * a..(i + 1) * n * a].chunks(a) {
                for (acc, v) in m.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            m.iter_mut().for_each(|v| *v /= n as f64);
            m
        })
        .collect()
}

fn check_batch(batch: &Batch, gamma: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(CoreError::Config("empty batch".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(CoreError::Config(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

fn check_head(model: &Model, head: HeadKind) -> Result<()> {
    if model.config().head != head {
        return Err(CoreError::Config(format!("loss expects a {head:?} head")));
    }
    Ok(())
}

/// Bootstrapped DQN targets `y = r + gamma * Q_target(s', a*)` (`y = r` on
/// terminal transitions). `a*` comes from the online network under
/// [`TargetRule::Double`] and from the target network under
/// [`TargetRule::Max`].
pub fn dqn_targets(model: &Model, target: &Params, batch: &Batch, gamma: f64, rule: TargetRule) -> Result<Vec<f64>> {
    check_batch(batch, gamma)?;
    let q_target = model.q_values_with(target, &batch.next_obs, None)?;
    let a = q_target.cols();
    let selector = match rule {
        TargetRule::Double => model.q_values(&batch.next_obs, None)?,
        TargetRule::Max => q_target.clone(),
    };
    Ok((0..batch.len())
        .map(|i| {
            if batch.done[i] {
                return batch.rewards[i];
            }
            let best = argmax(&selector.data()[i * a..(i + 1) * a]);
            batch.rewards[i] + gamma * q_target.data()[i * a + best]
        })
        .collect())
}

/// Mean Huber loss between `Q_online(s, a)` and the DQN targets. `online`
/// must be `model`'s parameters bound into `g`.
pub fn dqn_loss(
    g: &mut Graph,
    model: &Model,
    online: &ParamNodes,
    target: &Params,
    batch: &Batch,
    gamma: f64,
    rule: TargetRule,
) -> Result<NodeId> {
    check_head(model, HeadKind::Dqn)?;
    let y = dqn_targets(model, target, batch, gamma, rule)?;
    let obs = g.constant(batch.obs.clone());
    let q = model.forward(g, online, obs, None, Pass::Pruned)?.q;
    let qa = g.gather(q, &batch.actions)?;
    let y = g.constant(Tensor::new(vec![y.len()], y)?);
    let diff = g.sub(qa, y)?;
    let h = g.huber(diff, HUBER_DELTA);
    Ok(g.mean(h))
}

/// Target quantile samples `[B, N']`: `r + gamma * Z_target(s', tau', a*)`,
/// with `a*` maximizing the mean over `taus_select` of the online (double)
/// or target (max) network.
pub fn iqn_targets(
    model: &Model,
    target: &Params,
    batch: &Batch,
    gamma: f64,
    taus_target: &Tensor,
    taus_select: &Tensor,
    rule: TargetRule,
) -> Result<Tensor> {
    check_batch(batch, gamma)?;
    let selector = match rule {
        TargetRule::Double => model.q_values(&batch.next_obs, Some(taus_select))?,
        TargetRule::Max => model.q_values_with(target, &batch.next_obs, Some(taus_select))?,
    };
    let best: Vec<usize> = mean_over_taus(&selector).iter().map(|m| argmax(m)).collect();
    let z = model.q_values_with(target, &batch.next_obs, Some(taus_target))?;
    let (n, a) = (z.shape()[1], z.shape()[2]);
    let mut out = Vec::with_capacity(batch.len() * n);
    for i in 0..batch.len() {
        for j in 0..n {
            let boot = if batch.done[i] {
                0.0
            } else {
                gamma * z.data()[(i * n + j) * a + best[i]]
            };
            out.push(batch.rewards[i] + boot);
        }
    }
    Ok(Tensor::new(vec![batch.len(), n], out)?)
}

/// Pairwise quantile Huber loss between online estimates at `taus [B, N]`
/// for the taken actions and the target samples at `taus_target [B, N']`.
#[allow(clippy::too_many_arguments)]
pub fn iqn_loss(
    g: &mut Graph,
    model: &Model,
    online: &ParamNodes,
    target: &Params,
    batch: &Batch,
    gamma: f64,
    taus: &Tensor,
    taus_target: &Tensor,
    taus_select: &Tensor,
    rule: TargetRule,
    kappa: f64,
) -> Result<NodeId> {
    check_head(model, HeadKind::Iqn)?;
    let y = iqn_targets(model, target, batch, gamma, taus_target, taus_select, rule)?;
    let obs = g.constant(batch.obs.clone());
    let q = model.forward(g, online, obs, Some(taus), Pass::Pruned)?.q;
    let (b, n, a) = (batch.len(), taus.shape()[1], g.shape(q)[2]);
    let flat = g.reshape(q, &[b * n, a])?;
    let index: Vec<usize> = batch
        .actions
        .iter()
        .flat_map(|&act| std::iter::repeat(act).take(n))
        .collect();
    let picked = g.gather(flat, &index)?;
    let pred = g.reshape(picked, &[b, n])?;
    Ok(g.quantile_huber(pred, &y, taus, kappa)?)
}
