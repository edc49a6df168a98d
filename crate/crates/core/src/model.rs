//! Q-networks: the saliency-token transformer and the baseline trunks,
//! each topped by a DQN or IQN head.

use std::f64::consts::PI;

use da3_gridworld::{Action, Observation};
use da3_tensor::init::{normal, xavier_uniform};
use da3_tensor::{Graph, NodeId, ParamNodes, Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{scaled_dot_attention, AttentionRecord};
use crate::{CoreError, HeadKind, LoopMode, NetConfig, Result, Trunk};

const CONV1: usize = 16;
const CONV2: usize = 32;

/// Which encoder path to build. Both give identical head outputs; `Pruned`
/// only evaluates what token 0 needs in the final iteration and records the
/// last attention matrices as their saliency row only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Full,
    Pruned,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, A]` for DQN heads, `[B, N, A]` for IQN heads.
    pub q: NodeId,
    /// Head input `[B, D]`.
    pub features: NodeId,
    /// Per loop iteration, `[B, h, T+1, T+1]` (or `[B, h, 1, T+1]` for the
    /// pruned final iteration).
    pub attention: Vec<NodeId>,
    /// Final encoder tokens `[B, T+1, C]` on the full path.
    pub tokens: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    params: Params,
}

/// Stacks observations into a `[B, N_C, R, R]` tensor.
pub fn obs_batch<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut batch = 0;
    for o in obs {
        let d = [o.channels(), o.size()];
        if *dims.get_or_insert(d) != d {
            return Err(CoreError::InputMismatch {
                expected: dims.unwrap(),
                got: d,
            });
        }
        data.extend(o.data().iter().map(|&v| f64::from(v)));
        batch += 1;
    }
    let [c, r] = dims.ok_or_else(|| CoreError::Config("empty observation batch".into()))?;
    Ok(Tensor::new(vec![batch, c, r, r], data)?)
}

/// `cos(pi * j * tau)` for `j = 0..basis`, one row per entry of `taus`.
pub fn cosine_embedding(taus: &Tensor, basis: usize) -> Tensor {
    let mut data = Vec::with_capacity(taus.numel() * basis);
    for &t in taus.data() {
        data.extend((0..basis).map(|j| (PI * j as f64 * t).cos()));
    }
    Tensor::new(vec![taus.numel(), basis], data).expect("non-empty")
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Params::new();
        let c = config.width;
        let a = Action::COUNT;
        match config.trunk {
            Trunk::Da3 => {
                let (nc, pp) = (config.channels, config.patch);
                p.push("embed.kernels", xavier_uniform(&[c, nc, pp, pp], nc * pp * pp, c, rng));
                p.push("embed.bias", Tensor::zeros(&[c]));
                p.push("saliency", normal(&[c], config.embed_std, rng));
                p.push("pos", normal(&[config.tokens() + 1, c], config.embed_std, rng));
                let blocks = match config.loop_mode {
                    LoopMode::Shared => 1,
                    LoopMode::Stacked => config.loops,
                };
                for b in 0..blocks {
                    let f = config.ff_width;
                    p.push(format!("block{b}.ln1.gain"), Tensor::full(&[c], 1.0));
                    p.push(format!("block{b}.ln1.bias"), Tensor::zeros(&[c]));
                    for w in ["wq", "wk", "wv", "wo"] {
                        p.push(format!("block{b}.attn.{w}"), xavier_uniform(&[c, c], c, c, rng));
                    }
                    p.push(format!("block{b}.ln2.gain"), Tensor::full(&[c], 1.0));
                    p.push(format!("block{b}.ln2.bias"), Tensor::zeros(&[c]));
                    p.push(format!("block{b}.ff.w1"), xavier_uniform(&[c, f], c, f, rng));
                    p.push(format!("block{b}.ff.b1"), Tensor::zeros(&[f]));
                    p.push(format!("block{b}.ff.w2"), xavier_uniform(&[f, c], f, c, rng));
                    p.push(format!("block{b}.ff.b2"), Tensor::zeros(&[c]));
                }
                p.push("norm.gain", Tensor::full(&[c], 1.0));
                p.push("norm.bias", Tensor::zeros(&[c]));
            }
            Trunk::Conv => {
                let nc = config.channels;
                p.push(
                    "conv1.kernels",
                    xavier_uniform(&[CONV1, nc, 3, 3], nc * 9, CONV1 * 9, rng),
                );
                p.push("conv1.bias", Tensor::zeros(&[CONV1]));
                p.push(
                    "conv2.kernels",
                    xavier_uniform(&[CONV2, CONV1, 3, 3], CONV1 * 9, CONV2 * 9, rng),
                );
                p.push("conv2.bias", Tensor::zeros(&[CONV2]));
                let side = config.size / 2 / 2;
                let flat = CONV2 * side * side;
                let d = config.conv_features;
                p.push("fc.w", xavier_uniform(&[flat, d], flat, d, rng));
                p.push("fc.b", Tensor::zeros(&[d]));
            }
            Trunk::Flat => {}
        }
        let d = config.feature_width();
        let h = config.head_hidden;
        let mut dense = |p: &mut Params, name: &str, fan_in: usize, fan_out: usize| {
            p.push(
                format!("{name}.w"),
                xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng),
            );
            p.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };
        match config.head {
            HeadKind::Dqn => {
                if h == 0 {
                    dense(&mut p, "head.out", d, a);
                } else {
                    dense(&mut p, "head.fc", d, h);
                    dense(&mut p, "head.out", h, a);
                }
            }
            HeadKind::Iqn => {
                dense(&mut p, "head.tau", config.cos_basis, d);
                if h == 0 {
                    dense(&mut p, "head.value", d, 1);
                    dense(&mut p, "head.adv", d, a);
                } else {
                    dense(&mut p, "head.value_fc", d, h);
                    dense(&mut p, "head.value", h, 1);
                    dense(&mut p, "head.adv_fc", d, h);
                    dense(&mut p, "head.adv", h, a);
                }
            }
        }
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model around stored parameters; names and shapes must
    /// match what `config` produces.
    pub fn from_params(config: NetConfig, params: Params) -> Result<Self> {
        let fresh = Self::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        fresh.params.check_layout(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    /// Scalar parameter counts per top-level group, in layout order.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            match out.last_mut() {
                Some((g, n)) if *g == group => *n += t.numel(),
                _ => out.push((group, t.numel())),
            }
        }
        out
    }

    fn node(&self, nodes: &ParamNodes, name: &str) -> NodeId {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"));
        nodes[i]
    }

    fn check_input(&self, g: &Graph, obs: NodeId) -> Result<()> {
        let s = g.shape(obs);
        let expected = [self.config.channels, self.config.size];
        if s.len() != 4 || s[1] != expected[0] || s[2] != expected[1] || s[3] != expected[1] {
            let got = if s.len() == 4 { [s[1], s[2]] } else { [0, 0] };
            return Err(CoreError::InputMismatch { expected, got });
        }
        Ok(())
    }

    /// Patch tokens with the saliency token prepended and position
    /// embeddings added: `[B, T+1, C]`.
    pub fn embed(&self, g: &mut Graph, nodes: &ParamNodes, obs: NodeId) -> Result<NodeId> {
        self.check_input(g, obs)?;
        let x = g.conv2d_patch(
            obs,
            self.node(nodes, "embed.kernels"),
            Some(self.node(nodes, "embed.bias")),
        )?;
        let x = g.channels_to_tokens(x)?;
        let x = g.prepend_token(x, self.node(nodes, "saliency"))?;
        Ok(g.add_broadcast(x, self.node(nodes, "pos"))?)
    }

    fn block_prefix(&self, iteration: usize) -> String {
        match self.config.loop_mode {
            LoopMode::Shared => "block0".to_string(),
            LoopMode::Stacked => format!("block{iteration}"),
        }
    }

    /// One pre-norm encoder block. With `only_first` the output is token 0
    /// alone, `[B, C]`; otherwise `[B, T+1, C]`.
    fn block(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        prefix: &str,
        x: NodeId,
        only_first: bool,
    ) -> Result<(NodeId, NodeId)> {
        let n = |s: &str| self.node(nodes, &format!("{prefix}.{s}"));
        let heads = self.config.heads;
        let width = self.config.width;
        let y = g.layer_norm(x, n("ln1.gain"), n("ln1.bias"))?;
        let query_in = if only_first {
            let y0 = g.select_token(y, 0)?;
            let batch = g.shape(y0)[0];
            g.reshape(y0, &[batch, 1, width])?
        } else {
            y
        };
        let q = g.linear(query_in, n("attn.wq"), None)?;
        let k = g.linear(y, n("attn.wk"), None)?;
        let v = g.linear(y, n("attn.wv"), None)?;
        let (q, k, v) = (
            g.split_heads(q, heads)?,
            g.split_heads(k, heads)?,
            g.split_heads(v, heads)?,
        );
        let (att, weights) = scaled_dot_attention(g, q, k, v)?;
        let att = g.merge_heads(att)?;
        let att = g.linear(att, n("attn.wo"), None)?;
        let (x, att) = if only_first {
            let batch = g.shape(att)[0];
            (g.select_token(x, 0)?, g.reshape(att, &[batch, width])?)
        } else {
            (x, att)
        };
        let x = g.add(x, att)?;
        let z = g.layer_norm(x, n("ln2.gain"), n("ln2.bias"))?;
        let z = g.linear(z, n("ff.w1"), Some(n("ff.b1")))?;
        let z = g.gelu(z);
        let z = g.linear(z, n("ff.w2"), Some(n("ff.b2")))?;
        Ok((g.add(x, z)?, weights))
    }

    /// Runs the encoder loop over `tokens [B, T+1, C]`. Returns the final
    /// tokens (`[B, T+1, C]` on the full path, the saliency output `[B, C]`
    /// on the pruned path) and each iteration's attention weights.
    pub fn encode(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        tokens: NodeId,
        pass: Pass,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.config.loops);
        for it in 0..self.config.loops {
            let last = it + 1 == self.config.loops;
            let prefix = self.block_prefix(it);
            let (y, w) = self.block(g, nodes, &prefix, x, last && pass == Pass::Pruned)?;
            x = y;
            attention.push(w);
        }
        Ok((x, attention))
    }

    /// Trunk output `[B, D]` plus attention and full tokens where available.
    pub fn trunk(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        obs: NodeId,
        pass: Pass,
    ) -> Result<(NodeId, Vec<NodeId>, Option<NodeId>)> {
        self.check_input(g, obs)?;
        let batch = g.shape(obs)[0];
        match self.config.trunk {
            Trunk::Da3 => {
                let tokens = self.embed(g, nodes, obs)?;
                let (out, attention) = self.encode(g, nodes, tokens, pass)?;
                let (first, full) = match pass {
                    Pass::Full => (g.select_token(out, 0)?, Some(out)),
                    Pass::Pruned => (out, None),
                };
                let f = g.layer_norm(first, self.node(nodes, "norm.gain"), self.node(nodes, "norm.bias"))?;
                Ok((f, attention, full))
            }
            Trunk::Conv => {
                let n = |s: &str| self.node(nodes, s);
                let x = g.conv2d(obs, n("conv1.kernels"), Some(n("conv1.bias")), 1, 1)?;
                let x = g.relu(x);
                let x = g.max_pool2d(x)?;
                let x = g.conv2d(x, n("conv2.kernels"), Some(n("conv2.bias")), 1, 1)?;
                let x = g.relu(x);
                let x = g.max_pool2d(x)?;
                let flat = g.value(x).numel() / batch;
                let x = g.reshape(x, &[batch, flat])?;
                let x = g.linear(x, n("fc.w"), Some(n("fc.b")))?;
                Ok((g.relu(x), vec![], None))
            }
            Trunk::Flat => {
                let flat = g.value(obs).numel() / batch;
                Ok((g.reshape(obs, &[batch, flat])?, vec![], None))
            }
        }
    }

    fn dense(&self, g: &mut Graph, nodes: &ParamNodes, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.node(nodes, &format!("{name}.w"));
        let b = self.node(nodes, &format!("{name}.b"));
        Ok(g.linear(x, w, Some(b))?)
    }

    fn mlp(&self, g: &mut Graph, nodes: &ParamNodes, hidden: &str, out: &str, x: NodeId) -> Result<NodeId> {
        let x = if self.config.head_hidden > 0 {
            let h = self.dense(g, nodes, hidden, x)?;
            g.gelu(h)
        } else {
            x
        };
        self.dense(g, nodes, out, x)
    }

    /// Head over `features [B, D]`. IQN heads need `taus [B, N]`.
    pub fn head_forward(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        features: NodeId,
        taus: Option<&Tensor>,
    ) -> Result<NodeId> {
        match self.config.head {
            HeadKind::Dqn => self.mlp(g, nodes, "head.fc", "head.out", features),
            HeadKind::Iqn => {
                let taus = taus.ok_or(CoreError::MissingQuantiles)?;
                let batch = g.shape(features)[0];
                if taus.shape().len() != 2 || taus.shape()[0] != batch {
                    return Err(CoreError::Config(format!(
                        "quantile levels {:?} do not match batch {batch}",
                        taus.shape()
                    )));
                }
                if let Some(&t) = taus.data().iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                    return Err(CoreError::BadQuantile(t));
                }
                let n = taus.shape()[1];
                let phi = g.constant(cosine_embedding(taus, self.config.cos_basis));
                let phi = self.dense(g, nodes, "head.tau", phi)?;
                let phi = g.relu(phi);
                let rep = g.repeat_rows(features, n)?;
                let h = g.mul(rep, phi)?;
                let value = self.mlp(g, nodes, "head.value_fc", "head.value", h)?;
                let adv = self.mlp(g, nodes, "head.adv_fc", "head.adv", h)?;
                let q = g.dueling(value, adv)?;
                Ok(g.reshape(q, &[batch, n, Action::COUNT])?)
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        obs: NodeId,
        taus: Option<&Tensor>,
        pass: Pass,
    ) -> Result<Forward> {
        if self.config.head == HeadKind::Iqn && taus.is_none() {
            return Err(CoreError::MissingQuantiles);
        }
        let (features, attention, tokens) = self.trunk(g, nodes, obs, pass)?;
        let q = self.head_forward(g, nodes, features, taus)?;
        Ok(Forward {
            q,
            features,
            attention,
            tokens,
        })
    }

    /// Head output for a batch under arbitrary parameters of this layout,
    /// evaluated without gradient bookkeeping.
    pub fn q_values_with(&self, params: &Params, obs: &Tensor, taus: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = params.bind(&mut g, false);
        let x = g.constant(obs.clone());
        let out = self.forward(&mut g, &nodes, x, taus, Pass::Pruned)?;
        Ok(g.value(out.q).clone())
    }

    pub fn q_values(&self, obs: &Tensor, taus: Option<&Tensor>) -> Result<Tensor> {
        self.q_values_with(&self.params, obs, taus)
    }

    /// Full forward pass on one observation with every attention matrix
    /// captured. Returns the head output for batch row 0.
    pub fn attend(&self, obs: &Observation, taus: Option<&[f64]>) -> Result<(Tensor, AttentionRecord)> {
        if self.config.trunk != Trunk::Da3 {
            return Err(CoreError::Config("only the transformer trunk records attention".into()));
        }
        let mut g = Graph::new();
        let nodes = self.params.bind(&mut g, false);
        let x = g.constant(obs_batch([obs])?);
        let taus = taus.map(|t| Tensor::new(vec![1, t.len()], t.to_vec())).transpose()?;
        let out = self.forward(&mut g, &nodes, x, taus.as_ref(), Pass::Full)?;
        let record = AttentionRecord::from_weights(out.attention.iter().map(|&w| g.value(w)), self.config.grid())?;
        let q = g.value(out.q).clone();
        let shape: Vec<usize> = q.shape()[1..].to_vec();
        Ok((q.reshape(&shape)?, record))
    }
}
