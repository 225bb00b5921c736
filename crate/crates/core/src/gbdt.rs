//! Gradient-boosted regression trees under logistic loss.
//!
//! Each round fits a depth-limited least-squares tree to the residuals
//! `y - p` (the negative gradient of the log-loss) with exact split search,
//! and leaves predict the mean residual of their samples.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbcParams {
    pub learning_rate: f64,
    pub num_estimators: usize,
    pub max_depth: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbcParams {
    fn default() -> Self {
        GbcParams {
            learning_rate: 0.1,
            num_estimators: 300,
            max_depth: 5,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.num_estimators == 0 || self.max_depth == 0 {
            return Err(Error::ConfigInvalid(
                "num_estimators and max_depth must be positive".into(),
            ));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "subsample must be in (0, 1], got {}",
                self.subsample
            )));
        }
        Ok(())
    }
}

/// Internal nodes carry `feature/threshold/left/right`; leaves carry `leaf_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: Option<usize>,
    pub threshold: Option<f64>,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub leaf_value: Option<f64>,
}

impl Node {
    fn leaf(value: f64) -> Self {
        Node {
            feature: None,
            threshold: None,
            left: None,
            right: None,
            leaf_value: Some(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut i = 0;
        for _ in 0..=self.nodes.len() {
            let node = self.nodes.get(i).ok_or_else(|| corrupt(i))?;
            if let Some(v) = node.leaf_value {
                return Ok(v);
            }
            let (Some(f), Some(t), Some(l), Some(r)) = (node.feature, node.threshold, node.left, node.right)
            else {
                return Err(corrupt(i));
            };
            let v = *x.get(f).ok_or(Error::DimensionMismatch {
                expected: f + 1,
                found: x.len(),
            })?;
            i = if v <= t { l } else { r };
        }
        Err(corrupt(i))
    }
}

fn corrupt(node: usize) -> Error {
    Error::ModelMismatch(format!("malformed tree at node {node}"))
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn log_loss(y: &[bool], p: &[f64]) -> f64 {
    let eps = 1e-15;
    let total: f64 = y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| {
            let pi = pi.clamp(eps, 1.0 - eps);
            if yi {
                -pi.ln()
            } else {
                -(1.0 - pi).ln()
            }
        })
        .sum();
    total / y.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub n_features: usize,
    pub learning_rate: f64,
    pub initial_score: f64,
    pub trees: Vec<Tree>,
}

impl Ensemble {
    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        let mut z = self.initial_score;
        for t in &self.trees {
            z += self.learning_rate * t.predict(x)?;
        }
        Ok(z)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.raw_score(x)?))
    }

    pub fn fit(x: &[Vec<f64>], y: &[bool], params: &GbcParams) -> Result<Self> {
        Ok(Self::fit_traced(x, y, params)?.0)
    }

    /// Trains and also returns the training log-loss after each round.
    pub fn fit_traced(x: &[Vec<f64>], y: &[bool], params: &GbcParams) -> Result<(Self, Vec<f64>)> {
        params.validate()?;
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                found: x.len(),
            });
        }
        let positives = y.iter().filter(|&&v| v).count();
        if positives == 0 || positives == y.len() {
            return Err(Error::DegenerateLabels);
        }
        let d = x[0].len();
        if let Some(row) = x.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: row.len(),
            });
        }
        let n = x.len();
        let p0 = positives as f64 / n as f64;
        let initial_score = (p0 / (1.0 - p0)).ln();
        let sorted = presort(x, d);
        let target: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();

        let mut scores = vec![initial_score; n];
        let mut trees = Vec::with_capacity(params.num_estimators);
        let mut losses = Vec::with_capacity(params.num_estimators);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let n_sub = ((n as f64 * params.subsample).round() as usize).clamp(1, n);
        for _ in 0..params.num_estimators {
            let residual: Vec<f64> = target
                .iter()
                .zip(&scores)
                .map(|(t, &s)| t - sigmoid(s))
                .collect();
            let mut in_tree = vec![n_sub == n; n];
            if n_sub < n {
                let mut picked = sample(&mut rng, n, n_sub).into_vec();
                picked.sort_unstable();
                for i in picked {
                    in_tree[i] = true;
                }
            }
            let tree = grow_tree(x, &sorted, &residual, &in_tree, params.max_depth);
            for (s, row) in scores.iter_mut().zip(x) {
                *s += params.learning_rate * tree.predict(row)?;
            }
            let probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
            losses.push(log_loss(y, &probs));
            trees.push(tree);
        }
        Ok((
            Ensemble {
                n_features: d,
                learning_rate: params.learning_rate,
                initial_score,
                trees,
            },
            losses,
        ))
    }
}

/// Row indices sorted by value for every non-constant feature.
fn presort(x: &[Vec<f64>], d: usize) -> Vec<(usize, Vec<usize>)> {
    (0..d)
        .into_par_iter()
        .filter_map(|f| {
            let first = x[0][f];
            if x.iter().all(|r| r[f] == first) {
                return None;
            }
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            Some((f, idx))
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn better(candidate: &Split, current: &Option<Split>) -> bool {
    match current {
        None => true,
        Some(c) => {
            candidate.gain > c.gain || (candidate.gain == c.gain && candidate.feature < c.feature)
        }
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

/// Best split per open node for a single feature, scanning rows in sorted order.
fn scan_feature(
    x: &[Vec<f64>],
    feature: usize,
    order: &[usize],
    residual: &[f64],
    node_of: &[Option<usize>],
    totals: &[(f64, usize)],
) -> Vec<Option<Split>> {
    let k = totals.len();
    let mut left: Vec<(f64, usize)> = vec![(0.0, 0); k];
    let mut last: Vec<Option<f64>> = vec![None; k];
    let mut best: Vec<Option<Split>> = vec![None; k];
    for &i in order {
        let Some(node) = node_of[i] else { continue };
        let v = x[i][feature];
        if let Some(prev) = last[node] {
            if v > prev {
                let (sl, nl) = left[node];
                let (s, n) = totals[node];
                let (sr, nr) = (s - sl, n - nl);
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - s * s / n as f64;
                let cand = Split {
                    gain,
                    feature,
                    threshold: midpoint(prev, v),
                };
                if best[node].is_none_or(|b| gain > b.gain) {
                    best[node] = Some(cand);
                }
            }
        }
        left[node].0 += residual[i];
        left[node].1 += 1;
        last[node] = Some(v);
    }
    best
}

fn grow_tree(
    x: &[Vec<f64>],
    sorted: &[(usize, Vec<usize>)],
    residual: &[f64],
    in_tree: &[bool],
    max_depth: usize,
) -> Tree {
    const MIN_GAIN: f64 = 1e-12;
    let n = x.len();
    let mut nodes: Vec<Node> = vec![Node::leaf(0.0)];
    // tree node of each training row, None for rows outside the subsample
    let mut position: Vec<Option<usize>> = (0..n).map(|i| in_tree[i].then_some(0)).collect();
    let mut open: Vec<usize> = vec![0];

    let stats = |position: &[Option<usize>], node: usize| -> (f64, usize) {
        position
            .iter()
            .zip(residual)
            .filter(|(p, _)| **p == Some(node))
            .fold((0.0, 0), |(s, c), (_, r)| (s + r, c + 1))
    };

    for _depth in 0..max_depth {
        if open.is_empty() {
            break;
        }
        // local indices for open nodes
        let slot: std::collections::HashMap<usize, usize> =
            open.iter().enumerate().map(|(s, &node)| (node, s)).collect();
        let node_of: Vec<Option<usize>> = position
            .iter()
            .map(|p| p.and_then(|node| slot.get(&node).copied()))
            .collect();
        let mut totals = vec![(0.0, 0usize); open.len()];
        for (i, s) in node_of.iter().enumerate() {
            if let Some(s) = s {
                totals[*s].0 += residual[i];
                totals[*s].1 += 1;
            }
        }
        let per_feature: Vec<Vec<Option<Split>>> = sorted
            .par_iter()
            .map(|(f, order)| scan_feature(x, *f, order, residual, &node_of, &totals))
            .collect();
        let mut best: Vec<Option<Split>> = vec![None; open.len()];
        for splits in &per_feature {
            for (b, cand) in best.iter_mut().zip(splits) {
                if let Some(c) = cand {
                    if better(c, b) {
                        *b = Some(*c);
                    }
                }
            }
        }

        let mut next_open = Vec::new();
        for (s, &node) in open.iter().enumerate() {
            let Some(split) = best[s].filter(|b| b.gain > MIN_GAIN) else { continue };
            let l = nodes.len();
            let r = l + 1;
            nodes.push(Node::leaf(0.0));
            nodes.push(Node::leaf(0.0));
            nodes[node] = Node {
                feature: Some(split.feature),
                threshold: Some(split.threshold),
                left: Some(l),
                right: Some(r),
                leaf_value: None,
            };
            for (i, p) in position.iter_mut().enumerate() {
                if *p == Some(node) {
                    *p = Some(if x[i][split.feature] <= split.threshold { l } else { r });
                }
            }
            next_open.push(l);
            next_open.push(r);
        }
        open = next_open;
    }

    for node in 0..nodes.len() {
        if nodes[node].leaf_value.is_some() {
            let (s, c) = stats(&position, node);
            nodes[node].leaf_value = Some(if c > 0 { s / c as f64 } else { 0.0 });
        }
    }
    Tree { nodes }
}
