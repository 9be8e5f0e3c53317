//! Linear ranking model over schedule features, trained with a pairwise
//! hinge loss on measured runtimes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LayoutKind;
use crate::schedule::ScheduleConfig;
use crate::sim::Measurement;
use crate::workload::Workload;

pub const FEATURE_NAMES: [&str; 16] = [
    "log2_blk_row_warps",
    "log2_blk_col_warps",
    "log2_warp_row_tiles",
    "log2_warp_col_tiles",
    "log2_chunk",
    "reorder_inner",
    "duplicate_aware",
    "register_packing",
    "nhwcnc",
    "warps_per_block",
    "block_tile_m",
    "block_tile_n",
    "smem_per_block",
    "blocks_per_sm",
    "tiles_per_warp",
    "k_chunks",
];

pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

pub type FeatureVector = [f64; NUM_FEATURES];

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Feature vector of a valid schedule.
pub fn featurize(workload: &Workload, sched: &ScheduleConfig) -> Result<FeatureVector> {
    let v = workload.violations(sched);
    if !v.is_empty() {
        return Err(Error::Schedule(v));
    }
    Ok(featurize_unchecked(workload, sched))
}

pub(crate) fn featurize_unchecked(workload: &Workload, s: &ScheduleConfig) -> FeatureVector {
    let g = workload.geometry(s);
    let lg = |v: u32| (v as f64).log2();
    [
        lg(s.blk_row_warps),
        lg(s.blk_col_warps),
        lg(s.warp_row_tiles),
        lg(s.warp_col_tiles),
        lg(s.chunk),
        flag(s.reorder_inner),
        flag(s.duplicate_aware),
        flag(s.register_packing),
        flag(s.layout == LayoutKind::Nhwcnc),
        s.warps_per_block() as f64,
        g.bm as f64,
        g.bn as f64,
        workload.smem(s).total() as f64,
        workload.blocks_per_sm(s) as f64,
        (s.warp_row_tiles * s.warp_col_tiles) as f64,
        g.stages as f64,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    /// Up to this many records every ordered pair is used.
    #[serde(default = "default_all_pairs")]
    pub all_pairs_limit: usize,
    /// Above the limit, this many random pairs per record per epoch.
    #[serde(default = "default_pairs_per_record")]
    pub pairs_per_record: usize,
}

fn default_lr() -> f64 {
    0.05
}
fn default_epochs() -> u32 {
    30
}
fn default_all_pairs() -> usize {
    256
}
fn default_pairs_per_record() -> usize {
    64
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            all_pairs_limit: default_all_pairs(),
            pairs_per_record: default_pairs_per_record(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.pairs_per_record == 0 {
            return Err(Error::Config(
                "epochs and pairs per record must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Higher score means predicted faster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingCostModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Standardization applied to raw features before the dot product.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub config: FitConfig,
    /// Mean hinge loss on the training pairs before and after the last fit.
    #[serde(default)]
    pub initial_loss: f64,
    #[serde(default)]
    pub final_loss: f64,
}

impl Default for RankingCostModel {
    fn default() -> Self {
        Self::new(FitConfig::default())
    }
}

impl RankingCostModel {
    /// An untrained model that scores every schedule 0.
    pub fn new(config: FitConfig) -> Self {
        Self {
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.0; NUM_FEATURES],
            bias: 0.0,
            mean: vec![0.0; NUM_FEATURES],
            scale: vec![1.0; NUM_FEATURES],
            config,
            initial_loss: 0.0,
            final_loss: 0.0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let mut s = self.bias;
        for (k, v) in x.iter().enumerate() {
            s += self.weights[k] * (v - self.mean[k]) / self.scale[k];
        }
        s
    }

    pub fn predict(&self, workload: &Workload, scheds: &[ScheduleConfig]) -> Result<Vec<f64>> {
        scheds
            .iter()
            .map(|s| featurize(workload, s).map(|x| self.score(&x)))
            .collect()
    }

    /// Fits a fresh model on `records`; `self` only supplies hyperparameters.
    pub fn fit<R: Rng + ?Sized>(
        &self,
        workload: &Workload,
        records: &[Measurement],
        rng: &mut R,
    ) -> Result<Self> {
        let xs = records
            .iter()
            .map(|m| featurize(workload, &m.schedule))
            .collect::<Result<Vec<_>>>()?;
        let ys: Vec<f64> = records.iter().map(|m| m.runtime).collect();
        self.fit_features(&xs, &ys, rng)
    }

    /// Pairwise hinge-loss training on raw feature rows and runtimes.
    pub fn fit_features<R: Rng + ?Sized>(
        &self,
        xs: &[FeatureVector],
        runtimes: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        self.config.validate()?;
        if xs.len() != runtimes.len() {
            return Err(Error::Argument(format!(
                "{} feature rows for {} runtimes",
                xs.len(),
                runtimes.len()
            )));
        }
        if runtimes.iter().any(|r| !r.is_finite()) {
            return Err(Error::Argument("runtimes must be finite".into()));
        }
        let distinct = runtimes.windows(2).any(|w| w[0] != w[1]);
        if xs.len() < 2 || !distinct {
            return Err(Error::DegenerateData(format!(
                "need at least two records with distinct runtimes, got {}",
                xs.len()
            )));
        }

        let n = xs.len();
        let mut mean = vec![0.0; NUM_FEATURES];
        let mut scale = vec![0.0; NUM_FEATURES];
        for x in xs {
            for k in 0..NUM_FEATURES {
                mean[k] += x[k] / n as f64;
            }
        }
        for x in xs {
            for k in 0..NUM_FEATURES {
                scale[k] += (x[k] - mean[k]).powi(2) / n as f64;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<FeatureVector> = xs
            .iter()
            .map(|x| std::array::from_fn(|k| (x[k] - mean[k]) / scale[k]))
            .collect();

        // (faster, slower) pairs
        let ordered = |i: usize, j: usize| -> Option<(usize, usize)> {
            if runtimes[i] < runtimes[j] {
                Some((i, j))
            } else if runtimes[j] < runtimes[i] {
                Some((j, i))
            } else {
                None
            }
        };
        let sample = |rng: &mut R| -> Vec<(usize, usize)> {
            let want = self.config.pairs_per_record * n;
            let mut out = Vec::with_capacity(want);
            let mut tries = 0;
            while out.len() < want && tries < want * 8 {
                tries += 1;
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if let Some(p) = ordered(i, j) {
                    out.push(p);
                }
            }
            out
        };
        let all_pairs = n <= self.config.all_pairs_limit;
        let mut pairs: Vec<(usize, usize)> = if all_pairs {
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter_map(|(i, j)| ordered(i, j))
                .collect()
        } else {
            sample(rng)
        };
        let eval_pairs = pairs.clone();

        let mut w = [0.0f64; NUM_FEATURES];
        let loss = |w: &[f64; NUM_FEATURES]| -> f64 {
            let total: f64 = eval_pairs
                .iter()
                .map(|&(i, j)| (1.0 - dot(w, &z[i]) + dot(w, &z[j])).max(0.0))
                .sum();
            total / eval_pairs.len() as f64
        };
        let initial_loss = loss(&w);
        let mut best = (initial_loss, w);
        let lr = self.config.learning_rate;
        for _ in 0..self.config.epochs {
            if all_pairs {
                pairs.shuffle(rng);
            } else {
                pairs = sample(rng);
            }
            for &(i, j) in &pairs {
                if dot(&w, &z[i]) - dot(&w, &z[j]) < 1.0 {
                    for k in 0..NUM_FEATURES {
                        w[k] += lr * (z[i][k] - z[j][k]);
                    }
                }
            }
            let l = loss(&w);
            if l < best.0 {
                best = (l, w);
            }
        }

        Ok(Self {
            feature_names: self.feature_names.clone(),
            weights: best.1.to_vec(),
            bias: 0.0,
            mean,
            scale,
            config: self.config,
            initial_loss,
            final_loss: best.0,
        })
    }

    /// Fraction of pairs with distinct runtimes that the model orders
    /// correctly.
    pub fn ranking_accuracy(&self, xs: &[FeatureVector], runtimes: &[f64]) -> f64 {
        let scores: Vec<f64> = xs.iter().map(|x| self.score(x)).collect();
        let (mut right, mut total) = (0u64, 0u64);
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                if runtimes[i] == runtimes[j] {
                    continue;
                }
                total += 1;
                if (runtimes[i] < runtimes[j]) == (scores[i] > scores[j]) {
                    right += 1;
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            right as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Json {
            path: "<model>".into(),
            source: e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            path: "<model>".into(),
            source: e,
        })?;
        let names: HashSet<&str> = FEATURE_NAMES.into_iter().collect();
        let ok = m.feature_names.len() == NUM_FEATURES
            && m.feature_names.iter().all(|n| names.contains(n.as_str()))
            && m.weights.len() == NUM_FEATURES
            && m.mean.len() == NUM_FEATURES
            && m.scale.len() == NUM_FEATURES;
        if !ok {
            return Err(Error::Config(
                "model checkpoint does not match the feature set".into(),
            ));
        }
        Ok(m)
    }
}

fn dot(w: &[f64; NUM_FEATURES], z: &FeatureVector) -> f64 {
    w.iter().zip(z).map(|(a, b)| a * b).sum()
}
