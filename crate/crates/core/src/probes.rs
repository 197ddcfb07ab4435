//! Forgetting and drift diagnostics: embedding substitution, Frobenius drift
//! of widened feed-forward blocks, and per-token Fisher information.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{self, parse_layer_name, Batch, Bound, Example, Mode, Stack};
use crate::surgery::{Group, SurgeryReport};
use crate::tensor::Tensor;
use crate::train::{GammaSchedule, ParamGroup, ParamGroups};
use crate::vocab::{VocabMapping, PAD_ID};

/// The seed checkpoint with its overlapping embedding rows taken from `grown`.
pub fn substitute_embeddings(
    seed: &Checkpoint,
    grown: &Checkpoint,
    mapping: &VocabMapping,
) -> Result<Checkpoint> {
    if seed.config.model_dim != grown.config.model_dim {
        return Err(Error::shape(
            "substitute_embeddings",
            &[seed.config.model_dim],
            &[grown.config.model_dim],
        ));
    }
    mapping.validate(seed.vocab.len(), grown.vocab.len())?;
    let mut out = seed.clone();
    for table in model::vocab_tables(&seed.config) {
        let src = grown.params.require(table)?;
        let dst = out
            .params
            .get_mut(table)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{table}`")))?;
        for &(o, n) in &mapping.pairs {
            dst.row_mut(o).copy_from_slice(src.row(n));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionDrop {
    pub direction: String,
    pub tier: String,
    pub seed_bleu: f64,
    pub substituted_bleu: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub directions: Vec<DirectionDrop>,
    /// Mean drop per tier.
    pub tiers: BTreeMap<String, f64>,
    pub mean_drop: f64,
}

/// `seed_bleu − substituted_bleu` for every direction scored in both reports.
pub fn forgetting_drop(seed: &EvalReport, substituted: &EvalReport) -> Result<ForgettingReport> {
    let mut directions = Vec::new();
    for s in &seed.directions {
        let Some(t) = substituted.direction(&s.direction) else {
            continue;
        };
        directions.push(DirectionDrop {
            direction: s.direction.clone(),
            tier: s.tier.as_str().to_string(),
            seed_bleu: s.bleu,
            substituted_bleu: t.bleu,
            drop: s.bleu - t.bleu,
        });
    }
    if directions.is_empty() {
        return Err(Error::invalid("the two reports share no direction"));
    }
    let mut by_tier: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for d in &directions {
        let e = by_tier.entry(d.tier.clone()).or_default();
        e.0 += d.drop;
        e.1 += 1;
    }
    let mean_drop = directions.iter().map(|d| d.drop).sum::<f64>() / directions.len() as f64;
    Ok(ForgettingReport {
        directions,
        tiers: by_tier
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        mean_drop,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub stack: Stack,
    pub layer: usize,
    pub matrix: String,
    pub d_m1_m: f64,
    pub d_m2_m: f64,
    pub d_m1_m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormDriftReport {
    pub rows: Vec<DriftRow>,
}

impl NormDriftReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stack,layer,matrix,d_M1_M,d_M2_M,d_M1_M2\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.stack.prefix(),
                r.layer,
                r.matrix,
                r.d_m1_m,
                r.d_m2_m,
                r.d_m1_m2
            );
        }
        out
    }

    pub fn mean_d_m1_m(&self) -> f64 {
        self.rows.iter().map(|r| r.d_m1_m).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_d_m2_m(&self) -> f64 {
        self.rows.iter().map(|r| r.d_m2_m).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_d_m1_m2(&self) -> f64 {
        self.rows.iter().map(|r| r.d_m1_m2).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(‖M1−M‖, ‖M2−M‖, ‖M1−M2‖)`; with several new blocks the last two are
/// root-mean-square over blocks.
pub fn drift_distances(m: &[f64], m1: &[f64], m2_blocks: &[&[f64]]) -> (f64, f64, f64) {
    let k = m2_blocks.len().max(1) as f64;
    let rms = |f: &dyn Fn(&[f64]) -> f64| {
        (m2_blocks.iter().map(|b| f(b).powi(2)).sum::<f64>() / k).sqrt()
    };
    (
        dist(m1, m),
        rms(&|b| dist(b, m)),
        rms(&|b| dist(m1, b)),
    )
}

/// Elements of `t` at positions `idx` along `axis`, row-major.
fn gather(t: &Tensor, axis: usize, idx: &[usize]) -> Vec<f64> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let base = (o * dim + i) * inner;
            out.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    out
}

/// Drift of every widened `w1`/`w2` from its seed matrix. `M` is the seed
/// matrix times the recorded post-surgery scale, so all three distances
/// describe the blocks of one matrix on a common footing.
pub fn norm_drift(
    seed: &Checkpoint,
    grown: &Checkpoint,
    report: &SurgeryReport,
) -> Result<NormDriftReport> {
    let mut rows = Vec::new();
    for (name, p) in &report.tensors {
        let Some((stack, layer, tail)) = parse_layer_name(name) else {
            continue;
        };
        let matrix = match tail {
            "ffn.w1" => "w1",
            "ffn.w2" => "w2",
            _ => continue,
        };
        let labels = p.axis_labels();
        let old: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].1 == Group::Old).collect();
        let new: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].1 == Group::New).collect();
        if old.is_empty() || new.is_empty() {
            continue;
        }
        let source = p.source.as_deref().ok_or_else(|| {
            Error::ProvenanceMismatch(format!("`{name}` has no seed source"))
        })?;
        let base = seed.params.require(source)?;
        let g = grown.params.require(name)?;
        if g.shape() != p.shape.as_slice() {
            return Err(Error::ProvenanceMismatch(format!(
                "`{name}` is {:?} but the report describes {:?}",
                g.shape(),
                p.shape
            )));
        }
        let base_dim = base.shape()[p.axis];
        if old.len() != base_dim || new.len() % base_dim != 0 {
            return Err(Error::ProvenanceMismatch(format!(
                "`{name}`: {} old and {} new indices are not whole copies of {base_dim}",
                old.len(),
                new.len()
            )));
        }
        let m: Vec<f64> = base.data().iter().map(|x| x * p.scale).collect();
        let m1 = gather(g, p.axis, &old);
        let blocks: Vec<Vec<f64>> = new.chunks(base_dim).map(|c| gather(g, p.axis, c)).collect();
        let refs: Vec<&[f64]> = blocks.iter().map(Vec::as_slice).collect();
        let (d_m1_m, d_m2_m, d_m1_m2) = drift_distances(&m, &m1, &refs);
        rows.push(DriftRow {
            stack,
            layer,
            matrix: matrix.to_string(),
            d_m1_m,
            d_m2_m,
            d_m1_m2,
        });
    }
    if rows.is_empty() {
        return Err(Error::ProvenanceMismatch(
            "report has no widened feed-forward partition".into(),
        ));
    }
    rows.sort_by(|a, b| (a.stack, a.layer, &a.matrix).cmp(&(b.stack, b.layer, &b.matrix)));
    Ok(NormDriftReport { rows })
}

/// Mean squared per-token log-likelihood gradient of every parameter element.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMap {
    pub values: BTreeMap<String, Tensor>,
    pub tokens: usize,
}

impl FisherMap {
    pub fn max(&self) -> f64 {
        self.values
            .values()
            .flat_map(|t| t.data().iter().copied())
            .fold(0.0, f64::max)
    }

    /// Rows of `name,index,value` for every element.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,index,fisher\n");
        for (name, t) in &self.values {
            for (i, v) in t.data().iter().enumerate() {
                let _ = writeln!(out, "{name},{i},{v}");
            }
        }
        out
    }

    pub fn summary(&self) -> BTreeMap<String, FisherSummary> {
        self.values
            .iter()
            .map(|(n, t)| {
                let d = t.data();
                (
                    n.clone(),
                    FisherSummary {
                        mean: d.iter().sum::<f64>() / d.len() as f64,
                        max: d.iter().copied().fold(0.0, f64::max),
                        zeros: d.iter().filter(|&&x| x == 0.0).count(),
                        numel: d.len(),
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherSummary {
    pub mean: f64,
    pub max: f64,
    pub zeros: usize,
    pub numel: usize,
}

/// Per-token Fisher information over dev batches, without label smoothing.
pub fn fisher(ckpt: &Checkpoint, dev_batches: &[Vec<Example>]) -> Result<FisherMap> {
    let mut acc: BTreeMap<String, Vec<f64>> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
        .collect();
    let mut tokens = 0;
    for examples in dev_batches.iter().filter(|b| !b.is_empty()) {
        let batch = Batch::from_examples(examples);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &ckpt.params);
        let logits = model::build_logits(&mut tape, &bound, &ckpt.config, &batch, &mut Mode::Eval)?;
        for (row, &target) in batch.tgt_out.ids.iter().enumerate() {
            if target == PAD_ID {
                continue;
            }
            let picked = tape.embedding(logits, &[row])?;
            let (nll, _) = tape.label_smoothed_nll(picked, &[target], 0.0, PAD_ID)?;
            let grads = tape.backward(nll);
            for (name, &v) in bound.iter() {
                if let Some(g) = grads.get(v) {
                    for (a, x) in acc.get_mut(name).expect("same names").iter_mut().zip(g) {
                        *a += x * x;
                    }
                }
            }
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::invalid("Fisher information needs at least one target token"));
    }
    let values = acc
        .into_iter()
        .map(|(n, v)| {
            let shape = ckpt.params.get(&n).expect("same names").shape().to_vec();
            let data = v.into_iter().map(|x| x / tokens as f64).collect();
            (n, Tensor::new(shape, data).expect("shape matches"))
        })
        .collect();
    Ok(FisherMap { values, tokens })
}

/// Elements with Fisher above `threshold` learn at `γ_old`; all others at 1.
pub fn fisher_groups(fisher: &FisherMap, threshold: f64, gamma_old: f64) -> Result<ParamGroups> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!("Fisher threshold {threshold} must be >= 0")));
    }
    let masks: BTreeMap<String, Vec<bool>> = fisher
        .values
        .iter()
        .map(|(n, t)| (n.clone(), t.data().iter().map(|&f| f > threshold).collect()))
        .collect();
    Ok(ParamGroups::from_masks(
        [
            ParamGroup {
                name: "unscaled".into(),
                gamma: GammaSchedule::constant(1.0),
            },
            ParamGroup {
                name: "important".into(),
                gamma: GammaSchedule::constant(gamma_old),
            },
        ],
        &masks,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_drift_example() {
        let (a, b, c) = drift_distances(&[0.0], &[3.0], &[&[7.0]]);
        assert_eq!((a, b, c), (3.0, 7.0, 4.0));
    }

    #[test]
    fn gather_columns() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(gather(&t, 1, &[0, 2]), [1., 3., 4., 6.]);
        assert_eq!(gather(&t, 0, &[1]), [4., 5., 6.]);
    }
}
