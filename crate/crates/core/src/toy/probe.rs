//! Linear style probes on frozen per-utterance representations.

use serde::{Deserialize, Serialize};

use super::model::{argmax, ToyModel};
use super::task::{holdout_split, Utterance};
use crate::error::{Error, Result};
use crate::grad::{DenseArray, Graph, ParamSet};
use crate::vib::encode_posterior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Token embeddings.
    E,
    /// Backbone hidden states.
    H,
    /// Intent posterior means.
    Z,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Representation::E, Representation::H, Representation::Z];

    pub fn as_str(self) -> &'static str {
        match self {
            Representation::E => "e",
            Representation::H => "h",
            Representation::Z => "z",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Representation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown representation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Per-utterance mean of a representation.
pub fn utterance_features(
    model: &ToyModel,
    utt: &Utterance,
    rep: Representation,
) -> Result<Vec<f64>> {
    let rows = match rep {
        Representation::E => model.embeddings(&utt.content),
        Representation::H => model.hidden_states(utt)?,
        Representation::Z => {
            if !model.strategy.needs_intent() {
                return Err(Error::contract(format!(
                    "{} model has no intent pathway",
                    model.strategy
                )));
            }
            encode_posterior(&model.params, &model.hidden_states(utt)?)?.mu
        }
    };
    Ok(mean_rows(&rows))
}

/// Accuracy of a standardized multinomial logistic regression, trained on
/// 80% of the examples and tested on the remaining 20%.
pub fn probe_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 5 {
        return Err(Error::contract(format!(
            "probe: need >= 5 labelled examples, got {} features / {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::contract(format!(
            "probe: label {bad} >= {n_classes} classes"
        )));
    }
    let d = features[0].len();
    let (train, test) = holdout_split(features.len(), cfg.seed);
    let mut mean = vec![0.0; d];
    for &i in &train {
        mean.iter_mut()
            .zip(&features[i])
            .for_each(|(m, x)| *m += x / train.len() as f64);
    }
    let mut sd = vec![0.0; d];
    for &i in &train {
        sd.iter_mut()
            .zip(features[i].iter().zip(&mean))
            .for_each(|(s, (x, m))| *s += (x - m) * (x - m) / train.len() as f64);
    }
    let sd: Vec<f64> = sd
        .iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let standardize = |idx: &[usize]| -> Result<DenseArray> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(
                features[i]
                    .iter()
                    .zip(&mean)
                    .zip(&sd)
                    .map(|((x, m), s)| (x - m) / s),
            );
        }
        DenseArray::matrix(idx.len(), d, data)
    };
    let x_train = standardize(&train)?;
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut params = ParamSet::new();
    params.insert("w".into(), DenseArray::zeros(&[d, n_classes]));
    params.insert("b".into(), DenseArray::zeros(&[n_classes]));
    for _ in 0..cfg.iterations {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let w = g.param("w", &params["w"]);
        let b = g.param("b", &params["b"]);
        let logits = g.matmul(x, w)?;
        let logits = g.add(logits, b)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick(lp, &y_train)?;
        let m = g.mean(picked)?;
        let loss = g.neg(m)?;
        let grads = g.backward(loss)?;
        for (n, gr) in grads {
            let p = params.get_mut(&n).expect("probe parameter");
            p.data_mut()
                .iter_mut()
                .zip(gr.data())
                .for_each(|(p, g)| *p -= cfg.lr * g);
        }
    }

    let x_test = standardize(&test)?;
    let logits = x_test.matmul(&params["w"])?;
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| {
            let row: Vec<f64> = logits
                .row(*r)
                .iter()
                .zip(params["b"].data())
                .map(|(a, b)| a + b)
                .collect();
            argmax(&row) == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Style probe on one representation of `model` over `data`.
pub fn probe_styles(
    model: &ToyModel,
    rep: Representation,
    data: &[Utterance],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let feats = data
        .iter()
        .map(|u| utterance_features(model, u, rep))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|u| u.style).collect();
    probe_accuracy(&feats, &labels, model.task.n_styles, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn planted_one_hot_is_separable() {
        let mut r = StreamRng::new(0, "p");
        let labels: Vec<usize> = (0..400).map(|_| r.below(4)).collect();
        let feats: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..4).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(
            probe_accuracy(&feats, &labels, 4, &ProbeConfig::default()).unwrap(),
            1.0
        );
    }

    #[test]
    fn random_labels_are_chance() {
        let mut r = StreamRng::new(1, "p");
        let n = 2000;
        let labels: Vec<usize> = (0..n).map(|_| r.below(4)).collect();
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..8).map(|_| r.normal()).collect())
            .collect();
        let acc = probe_accuracy(&feats, &labels, 4, &ProbeConfig::default()).unwrap();
        // 400 test points: 3 sd of a 0.25 binomial rate is about 0.065.
        assert!((acc - 0.25).abs() < 0.065, "{acc}");
    }

    #[test]
    fn bad_inputs_rejected() {
        let f = vec![vec![0.0]; 10];
        assert!(probe_accuracy(&f, &[0; 9], 2, &ProbeConfig::default()).is_err());
        assert!(probe_accuracy(&f, &[3; 10], 2, &ProbeConfig::default()).is_err());
    }
}
