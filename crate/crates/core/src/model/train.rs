use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossMode, Model};
use crate::error::{Error, Result};
use crate::ingest::TimeWindow;
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::rng::{stream_rng, Stream};

/// Samples per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the number of threads.
const GRAD_CHUNK: usize = 8;

/// Mean per-window loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub task: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Distinct codebook entries selected during the epoch.
    pub codes_used: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,total,task,codebook,commitment,codes_used";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.total, self.task, self.codebook, self.commitment, self.codes_used
        )
    }
}

#[derive(Default)]
struct BatchSums {
    grads: Vec<Tensor>,
    terms: [f64; 4],
    codes: BTreeSet<usize>,
}

impl BatchSums {
    fn merge(&mut self, other: BatchSums) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
        for (a, b) in self.terms.iter_mut().zip(other.terms) {
            *a += b;
        }
        self.codes.extend(other.codes);
    }
}

impl Model {
    /// Minibatch Adam on the three-term objective. Each batch minimizes the
    /// mean per-window loss. Aborts with a training error on any non-finite
    /// loss or gradient.
    pub fn fit(&mut self, windows: &[TimeWindow], mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::Training("no training windows".into()));
        }
        let inputs = windows
            .iter()
            .map(|w| self.window_tensor(&w.values))
            .collect::<Result<Vec<_>>>()?;
        let adam_cfg = AdamConfig {
            learning_rate: self.config.learning_rate,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&self.params, adam_cfg);
        let mut shuffle = stream_rng(self.config.seed, Stream::Shuffle);
        let mut order: Vec<usize> = (0..windows.len()).collect();

        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut shuffle);
            let mut epoch_terms = [0.0; 4];
            let mut codes = BTreeSet::new();
            for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                let mut sums = self
                    .batch_gradients(batch, &inputs, windows)
                    .map_err(|e| Error::Training(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
                let n = batch.len() as f64;
                for g in &mut sums.grads {
                    g.scale_assign(1.0 / n);
                }
                adam_step(&mut self.params, &sums.grads, &mut adam)
                    .map_err(|e| Error::Training(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
                for (a, t) in epoch_terms.iter_mut().zip(sums.terms) {
                    *a += t;
                }
                codes.extend(sums.codes);
            }
            let n = windows.len() as f64;
            let log = EpochLog {
                epoch,
                total: epoch_terms[0] / n,
                task: epoch_terms[1] / n,
                codebook: epoch_terms[2] / n,
                commitment: epoch_terms[3] / n,
                codes_used: codes.len(),
            };
            on_epoch(&log);
            self.training_log.push(log);
        }
        Ok(())
    }

    fn batch_gradients(&self, batch: &[usize], inputs: &[Tensor], windows: &[TimeWindow]) -> Result<BatchSums> {
        let partials: Vec<BatchSums> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut sums = BatchSums {
                    grads: self.params.zeros_like(),
                    ..BatchSums::default()
                };
                for &i in chunk {
                    let mut g = Graph::new(&self.params);
                    let x = g.constant(inputs[i].clone());
                    let lg = self.loss_graph_from_node(&mut g, x, windows[i].rul_target, LossMode::Live)?;
                    let n = &lg.nodes;
                    let terms = [n.total, n.task, n.codebook, n.commitment].map(|id| g.value(id).values()[0]);
                    if terms.iter().any(|t| !t.is_finite()) {
                        return Err(Error::Training(format!(
                            "non-finite loss on window {}/{}",
                            windows[i].unit_id, windows[i].window_id
                        )));
                    }
                    g.backward(n.total)?.accumulate_into(&mut sums.grads);
                    for (a, t) in sums.terms.iter_mut().zip(terms) {
                        *a += t;
                    }
                    sums.codes.extend(lg.indices);
                }
                Ok(sums)
            })
            .collect::<Result<_>>()?;
        let mut iter = partials.into_iter();
        let mut total = iter.next().expect("batch is non-empty");
        for p in iter {
            total.merge(p);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_model;
    use super::*;

    fn windows(n: usize) -> Vec<TimeWindow> {
        (0..n)
            .map(|i| {
                let level = i as f64 / n as f64;
                TimeWindow {
                    unit_id: 1,
                    window_id: i as u32 + 1,
                    values: (0..4).map(|t| vec![level, level * 0.5 + 0.01 * t as f64, 1.0 - level]).collect(),
                    rul_target: 125.0 * (1.0 - level),
                }
            })
            .collect()
    }

    #[test]
    fn loss_decreases_and_log_is_complete() {
        let mut m = tiny_model(4);
        m.config.epochs = 30;
        m.config.batch_size = 8;
        m.config.learning_rate = 2e-3;
        let mut seen = 0;
        m.fit(&windows(32), |_| seen += 1).unwrap();
        assert_eq!(seen, 30);
        let log = &m.training_log;
        assert_eq!(log.len(), 30);
        assert!(log.last().unwrap().task < log[0].task);
        for e in log {
            let sum = e.task + e.codebook + e.commitment;
            assert!((e.total - sum).abs() < 1e-9 * e.total.max(1.0));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = tiny_model(5);
            m.config.epochs = 3;
            m.config.batch_size = 5;
            m.fit(&windows(17), |_| {}).unwrap();
            m
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params(), b.params());
        assert_eq!(a.training_log, b.training_log);
    }

    #[test]
    fn nan_input_aborts() {
        let mut m = tiny_model(6);
        m.config.epochs = 1;
        let mut w = windows(4);
        w[2].values[1][0] = f64::NAN;
        let before = m.params().clone();
        let err = m.fit(&w, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn empty_training_set() {
        let mut m = tiny_model(6);
        assert!(matches!(m.fit(&[], |_| {}), Err(Error::Training(_))));
    }
}
