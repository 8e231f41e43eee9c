//! Intent modulation of token embeddings.
//!
//! AdaLN uses the residual-scale form `(1 + γ(c)) ⊙ norm(x) + δ(c)` with
//! zero-initialized `γ`, `δ`, so a fresh module is plain layer normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{DenseArray, Graph, NodeId, ParamSet};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// `f_i = e_i`; the context-unaware baseline.
    ContentOnly,
    /// `f_i = e_i + P h_i`.
    Additive,
    /// `f_i = AdaLN(e_i, h_i)`.
    VanillaAdaln,
    /// `f_i = AdaLN(e_i, z_i)`.
    VibAdaln,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::ContentOnly,
        FusionStrategy::Additive,
        FusionStrategy::VanillaAdaln,
        FusionStrategy::VibAdaln,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::ContentOnly => "content-only",
            FusionStrategy::Additive => "additive",
            FusionStrategy::VanillaAdaln => "vanilla-adaln",
            FusionStrategy::VibAdaln => "vib-adaln",
        }
    }

    pub fn needs_hidden(self) -> bool {
        matches!(
            self,
            FusionStrategy::Additive | FusionStrategy::VanillaAdaln
        )
    }

    pub fn needs_intent(self) -> bool {
        self == FusionStrategy::VibAdaln
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown fusion strategy {s:?}")))
    }
}

/// Affine maps `γ, δ : R^{d_c} -> R^{d_e}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnParams {
    pub gamma_w: DenseArray,
    pub gamma_b: DenseArray,
    pub delta_w: DenseArray,
    pub delta_b: DenseArray,
}

impl AdaLnParams {
    pub fn zeros(d_c: usize, d_e: usize) -> Self {
        AdaLnParams {
            gamma_w: DenseArray::zeros(&[d_c, d_e]),
            gamma_b: DenseArray::zeros(&[d_e]),
            delta_w: DenseArray::zeros(&[d_c, d_e]),
            delta_b: DenseArray::zeros(&[d_e]),
        }
    }

    fn names(prefix: &str) -> [String; 4] {
        [
            format!("{prefix}.gamma_w"),
            format!("{prefix}.gamma_b"),
            format!("{prefix}.delta_w"),
            format!("{prefix}.delta_b"),
        ]
    }

    pub fn insert_into(&self, params: &mut ParamSet, prefix: &str) {
        let [gw, gb, dw, db] = Self::names(prefix);
        params.insert(gw, self.gamma_w.clone());
        params.insert(gb, self.gamma_b.clone());
        params.insert(dw, self.delta_w.clone());
        params.insert(db, self.delta_b.clone());
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self> {
        let [gw, gb, dw, db] = Self::names(prefix);
        let get = |n: &str| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::contract(format!("missing parameter {n}")))
        };
        Ok(AdaLnParams {
            gamma_w: get(&gw)?,
            gamma_b: get(&gb)?,
            delta_w: get(&dw)?,
            delta_b: get(&db)?,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.gamma_w.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.gamma_w.cols()
    }
}

/// Names of the trainable fusion parameters for a strategy.
pub fn param_names(strategy: FusionStrategy) -> Vec<String> {
    match strategy {
        FusionStrategy::ContentOnly => vec![],
        FusionStrategy::Additive => vec![ADD_PROJ.to_string()],
        FusionStrategy::VanillaAdaln | FusionStrategy::VibAdaln => {
            AdaLnParams::names(ADALN_PREFIX).to_vec()
        }
    }
}

pub const ADALN_PREFIX: &str = "fusion.adaln";
pub const ADD_PROJ: &str = "fusion.add_proj";

/// Inserts fusion parameters. AdaLN maps start at zero; the additive
/// projection starts random so `h` reaches the head from step one.
pub fn init(
    params: &mut ParamSet,
    strategy: FusionStrategy,
    d_e: usize,
    d_h: usize,
    d_z: usize,
    rng: &mut StreamRng,
) {
    match strategy {
        FusionStrategy::ContentOnly => {}
        FusionStrategy::Additive => {
            params.insert(
                ADD_PROJ.into(),
                DenseArray::randn(&[d_h, d_e], (1.0 / d_h as f64).sqrt(), rng),
            );
        }
        FusionStrategy::VanillaAdaln => {
            AdaLnParams::zeros(d_h, d_e).insert_into(params, ADALN_PREFIX)
        }
        FusionStrategy::VibAdaln => AdaLnParams::zeros(d_z, d_e).insert_into(params, ADALN_PREFIX),
    }
}

/// In-graph AdaLN over rows: `x` is `[n, d_e]`, `c` is `[n, d_c]`.
pub fn adaln_graph(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    x: NodeId,
    c: NodeId,
) -> Result<NodeId> {
    let [gw, gb, dw, db] = AdaLnParams::names(prefix);
    let lookup = |n: &str| {
        params
            .get(n)
            .ok_or_else(|| Error::contract(format!("missing parameter {n}")))
    };
    let (gw_v, gb_v, dw_v, db_v) = (lookup(&gw)?, lookup(&gb)?, lookup(&dw)?, lookup(&db)?);
    let (vx, vc) = (g.value(x), g.value(c));
    if vc.cols() != gw_v.rows() || vx.cols() != gw_v.cols() || vx.rows() != vc.rows() {
        return Err(Error::contract(format!(
            "adaln: input {:?} / conditioner {:?} do not match maps {:?}",
            vx.shape(),
            vc.shape(),
            gw_v.shape()
        )));
    }
    let gw_n = g.param(&gw, gw_v);
    let gb_n = g.param(&gb, gb_v);
    let dw_n = g.param(&dw, dw_v);
    let db_n = g.param(&db, db_v);
    let normed = g.layer_norm(x)?;
    let gamma = g.matmul(c, gw_n)?;
    let gamma = g.add(gamma, gb_n)?;
    let scale = g.offset(gamma, 1.0)?;
    let delta = g.matmul(c, dw_n)?;
    let delta = g.add(delta, db_n)?;
    let scaled = g.mul(scale, normed)?;
    g.add(scaled, delta)
}

/// Single-vector AdaLN.
pub fn adaln(x: &[f64], c: &[f64], params: &AdaLnParams) -> Result<Vec<f64>> {
    if x.len() != params.embed_dim() || c.len() != params.cond_dim() {
        return Err(Error::contract(format!(
            "adaln: x has {} dims and c has {}, maps expect {} and {}",
            x.len(),
            c.len(),
            params.embed_dim(),
            params.cond_dim()
        )));
    }
    let mut ps = ParamSet::new();
    params.insert_into(&mut ps, "a");
    let mut g = Graph::new();
    let xn = g.constant(DenseArray::vector(x.to_vec()));
    let cn = g.constant(DenseArray::vector(c.to_vec()));
    let out = adaln_graph(&mut g, &ps, "a", xn, cn)?;
    Ok(g.value(out).data().to_vec())
}

/// In-graph fusion of stacked rows.
pub fn fuse_graph(
    g: &mut Graph,
    params: &ParamSet,
    strategy: FusionStrategy,
    e: NodeId,
    h: Option<NodeId>,
    z: Option<NodeId>,
) -> Result<NodeId> {
    let need = |x: Option<NodeId>, what: &str| {
        x.ok_or_else(|| Error::contract(format!("fusion {strategy} requires the {what} sequence")))
    };
    match strategy {
        FusionStrategy::ContentOnly => Ok(e),
        FusionStrategy::Additive => {
            let h = need(h, "hidden")?;
            let p = params
                .get(ADD_PROJ)
                .ok_or_else(|| Error::contract(format!("missing parameter {ADD_PROJ}")))?;
            let p = g.param(ADD_PROJ, p);
            let ph = g.matmul(h, p)?;
            g.add(e, ph)
        }
        FusionStrategy::VanillaAdaln => {
            let h = need(h, "hidden")?;
            adaln_graph(g, params, ADALN_PREFIX, e, h)
        }
        FusionStrategy::VibAdaln => {
            let z = need(z, "intent")?;
            adaln_graph(g, params, ADALN_PREFIX, e, z)
        }
    }
}

/// Fuses per-step sequences and returns `F_Y`.
pub fn fuse(
    e_seq: &[Vec<f64>],
    h_seq: Option<&[Vec<f64>]>,
    z_seq: Option<&[Vec<f64>]>,
    strategy: FusionStrategy,
    params: &ParamSet,
) -> Result<Vec<Vec<f64>>> {
    if e_seq.is_empty() {
        return Err(Error::contract("fuse: empty embedding sequence"));
    }
    for (name, s) in [("hidden", h_seq), ("intent", z_seq)] {
        if let Some(s) = s {
            if s.len() != e_seq.len() {
                return Err(Error::contract(format!(
                    "fuse: {name} sequence has {} steps, embeddings have {}",
                    s.len(),
                    e_seq.len()
                )));
            }
        }
    }
    let mut g = Graph::new();
    let e = g.constant(DenseArray::from_rows(e_seq)?);
    let h = h_seq
        .map(DenseArray::from_rows)
        .transpose()?
        .map(|a| g.constant(a));
    let z = z_seq
        .map(DenseArray::from_rows)
        .transpose()?
        .map(|a| g.constant(a));
    let f = fuse_graph(&mut g, params, strategy, e, h, z)?;
    let v = g.value(f);
    Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
}
