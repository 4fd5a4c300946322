use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uni,
    Bi,
}

/// Per-layer attention direction: layers `1..=t` are causal, `t+1..=n` are
/// bi-directional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionPlan {
    n: usize,
    turning_point: usize,
}

impl DirectionPlan {
    pub fn new(n: usize, turning_point: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("plan needs at least one layer".into()));
        }
        if turning_point > n {
            return Err(Error::Config(format!(
                "turning point {turning_point} beyond {n} layers"
            )));
        }
        Ok(DirectionPlan { n, turning_point })
    }

    /// Only the last layer is bi-directional.
    pub fn last_bi(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("plan needs at least one layer".into()));
        }
        Self::new(n, n - 1)
    }

    pub fn all_uni(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn all_bi(n: usize) -> Result<Self> {
        Self::new(n, 0)
    }

    pub fn n_layers(&self) -> usize {
        self.n
    }

    pub fn turning_point(&self) -> usize {
        self.turning_point
    }

    /// Direction of the zero-based layer `layer`.
    pub fn mode(&self, layer: usize) -> Direction {
        if layer < self.turning_point {
            Direction::Uni
        } else {
            Direction::Bi
        }
    }

    pub fn modes(&self) -> Vec<Direction> {
        (0..self.n).map(|l| self.mode(l)).collect()
    }

    pub fn has_bi_tail(&self) -> bool {
        self.turning_point < self.n
    }
}

/// How a bi-directional layer is introduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Drop the causal mask of the existing last layer.
    Modification,
    /// Append a new bi-directional layer after the existing causal stack.
    Addition,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Modification => "modification",
            Strategy::Addition => "addition",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modification" => Ok(Strategy::Modification),
            "addition" => Ok(Strategy::Addition),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl ModelParams {
    /// Applies a bi-directional strategy; `seed` initialises the appended
    /// layer for [`Strategy::Addition`].
    pub fn apply_strategy(&self, strategy: Strategy, seed: u64) -> Result<(ModelParams, DirectionPlan)> {
        let n = self.n_layers();
        if n < 2 {
            return Err(Error::Config(format!(
                "{} needs at least 2 layers, model has {n}",
                strategy.label()
            )));
        }
        match strategy {
            Strategy::Modification => Ok((self.clone(), DirectionPlan::last_bi(n)?)),
            Strategy::Addition => {
                let mut out = self.clone();
                out.push_layer(seed)?;
                if out.lora.is_some() {
                    // the appended block is new, so it trains in full
                    let added = out.layout.layers.last().expect("just pushed").clone();
                    for id in layer_ids(&added) {
                        out.store.get_mut(id).set_requires_grad(true);
                    }
                }
                Ok((out, DirectionPlan::new(n + 1, n)?))
            }
        }
    }
}

fn layer_ids(l: &super::LayerParams) -> Vec<crate::numerics::ParamId> {
    let mut ids = vec![l.wo, l.bo, l.attn_norm, l.ffn_norm, l.w1, l.b1, l.w2, l.b2];
    for h in &l.heads {
        ids.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv]);
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn default_plan_has_one_bi_layer() {
        let p = DirectionPlan::last_bi(4).unwrap();
        assert_eq!(
            p.modes(),
            vec![Direction::Uni, Direction::Uni, Direction::Uni, Direction::Bi]
        );
        assert!(DirectionPlan::new(3, 4).is_err());
        assert!(!DirectionPlan::all_uni(3).unwrap().has_bi_tail());
        assert_eq!(DirectionPlan::all_bi(2).unwrap().modes(), vec![Direction::Bi; 2]);
    }

    #[test]
    fn strategies_match_ablation_layouts() {
        let m = ModelParams::init(ModelConfig::default(), 0).unwrap();
        let (same, plan) = m.apply_strategy(Strategy::Modification, 1).unwrap();
        assert_eq!(same.n_layers(), 4);
        assert_eq!(same.num_params(), m.num_params());
        assert_eq!(plan.modes().last(), Some(&Direction::Bi));
        assert_eq!(plan.turning_point(), 3);

        let (grown, plan) = m.apply_strategy(Strategy::Addition, 1).unwrap();
        assert_eq!(grown.n_layers(), 5);
        assert_eq!(plan.modes(), vec![Direction::Uni, Direction::Uni, Direction::Uni, Direction::Uni, Direction::Bi]);
        assert_eq!(grown.num_params() - m.num_params(), m.config.layer_param_count());
    }

    #[test]
    fn strategy_needs_two_layers() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let m = ModelParams::init(cfg, 0).unwrap();
        assert!(m.apply_strategy(Strategy::Modification, 0).is_err());
    }
}
