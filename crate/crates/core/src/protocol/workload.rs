//! What the engines train: a real MLP over a partitioned dataset, or a
//! synthetic stand-in with arbitrary layer sizes for timing studies.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::learner::{
    evaluate, forward_backward, init_params_with, sgd_delta, shuffle_epoch, Dataset, LearnerError,
    LrSchedule, MlpSpec,
};
use crate::param::{GradVector, LayerPartition, ParamVector};
use crate::seed::{self, Purpose};

pub trait Workload {
    fn partition(&self) -> &Arc<LayerPartition>;
    fn initial_params(&self) -> ParamVector;
    fn workers(&self) -> usize;
    /// Share of the training data each worker holds; sums to 1.
    fn subset_weights(&self) -> Vec<f64>;
    fn iterations_per_epoch(&self) -> u64;
    fn samples_per_iteration(&self) -> u64;
    /// `(loss, delta)` of one local step on `params`.
    fn compute(
        &mut self,
        worker: usize,
        iteration: u64,
        params: &ParamVector,
    ) -> Result<(f64, GradVector), LearnerError>;
    /// Held-out accuracy, if the workload has a notion of it.
    fn evaluate(&self, params: &ParamVector) -> Result<Option<f64>, LearnerError>;
}

/// Sizes of an even split of `n` items over `parts`: they differ by at most 1.
pub fn even_split(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|k| n / parts + usize::from(k < n % parts))
        .collect()
}

pub struct MlpWorkload {
    spec: MlpSpec,
    partition: Arc<LayerPartition>,
    initial: ParamVector,
    train: Dataset,
    test: Dataset,
    subsets: Vec<Vec<usize>>,
    batch: usize,
    lr: LrSchedule,
    seed: u64,
    iterations_per_epoch: u64,
    // (epoch, permutation) per worker
    perms: Vec<Option<(u64, Vec<usize>)>>,
}

impl MlpWorkload {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: MlpSpec,
        train: Dataset,
        test: Dataset,
        workers: usize,
        batch: usize,
        lr: LrSchedule,
        seed: u64,
        bytes_per_element: u64,
    ) -> Result<Self, LearnerError> {
        spec.validate()?;
        if workers == 0 || batch == 0 {
            return Err(LearnerError::InvalidData("workers and batch must be positive".into()));
        }
        if train.len() < workers {
            return Err(LearnerError::InvalidData(format!(
                "{} training samples for {workers} workers",
                train.len()
            )));
        }
        if train.dim() != spec.input_width() {
            return Err(LearnerError::InvalidData(format!(
                "data has {} features, network expects {}",
                train.dim(),
                spec.input_width()
            )));
        }
        let initial = init_params_with(&spec, seed, bytes_per_element)?;
        let partition = initial.partition().clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(seed, Purpose::Partition, &[]));
        let mut subsets = Vec::with_capacity(workers);
        let mut rest = order.as_slice();
        for size in even_split(train.len(), workers) {
            let (head, tail) = rest.split_at(size);
            subsets.push(head.to_vec());
            rest = tail;
        }
        let largest = subsets.iter().map(Vec::len).max().unwrap_or(1);
        let iterations_per_epoch = largest.div_ceil(batch) as u64;
        Ok(Self {
            spec,
            partition,
            initial,
            train,
            test,
            perms: vec![None; subsets.len()],
            subsets,
            batch,
            lr,
            seed,
            iterations_per_epoch,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    /// Training rows of `worker`'s batch for `iteration`. Each epoch walks a
    /// fresh per-worker permutation of its subset, wrapping around when the
    /// subset is smaller than an epoch's worth of batches.
    pub fn batch_rows(&mut self, worker: usize, iteration: u64) -> Vec<usize> {
        let epoch = iteration / self.iterations_per_epoch;
        let step = (iteration % self.iterations_per_epoch) as usize;
        let subset = &self.subsets[worker];
        let cached = matches!(&self.perms[worker], Some((e, _)) if *e == epoch);
        if !cached {
            self.perms[worker] = Some((epoch, shuffle_epoch(subset.len(), self.seed, epoch, worker as u64)));
        }
        let perm = &self.perms[worker].as_ref().expect("just filled").1;
        let n = subset.len();
        (0..self.batch.min(n))
            .map(|j| subset[perm[(step * self.batch + j) % n]])
            .collect()
    }
}

impl Workload for MlpWorkload {
    fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    fn initial_params(&self) -> ParamVector {
        self.initial.clone()
    }

    fn workers(&self) -> usize {
        self.subsets.len()
    }

    fn subset_weights(&self) -> Vec<f64> {
        let total = self.train.len() as f64;
        self.subsets.iter().map(|s| s.len() as f64 / total).collect()
    }

    fn iterations_per_epoch(&self) -> u64 {
        self.iterations_per_epoch
    }

    fn samples_per_iteration(&self) -> u64 {
        self.subsets
            .iter()
            .map(|s| s.len().min(self.batch) as u64)
            .sum()
    }

    fn compute(
        &mut self,
        worker: usize,
        iteration: u64,
        params: &ParamVector,
    ) -> Result<(f64, GradVector), LearnerError> {
        let rows = self.batch_rows(worker, iteration);
        let (loss, grad) = forward_backward(&self.spec, params, &self.train, &rows)?;
        let epoch = iteration / self.iterations_per_epoch;
        Ok((loss, sgd_delta(&grad, self.lr.rate(epoch))))
    }

    fn evaluate(&self, params: &ParamVector) -> Result<Option<f64>, LearnerError> {
        if self.test.is_empty() {
            return Ok(None);
        }
        evaluate(&self.spec, params, &self.test).map(Some)
    }
}

/// Layers of a fixed byte size whose deltas are seeded noise. The loss is a
/// deterministic decreasing curve so budget tuning has something to follow.
pub struct SyntheticWorkload {
    partition: Arc<LayerPartition>,
    workers: usize,
    iterations_per_epoch: u64,
    batch: usize,
    seed: u64,
}

impl SyntheticWorkload {
    /// `model_bytes` split evenly over `layers`; each layer is represented
    /// by at most 1024 values, each standing for `bytes_per_element` bytes.
    pub fn new(
        model_bytes: u64,
        layers: usize,
        workers: usize,
        iterations_per_epoch: u64,
        batch: usize,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        if layers == 0 || workers == 0 || iterations_per_epoch == 0 {
            return Err(LearnerError::InvalidSpec(
                "layers, workers and iterations per epoch must be positive".into(),
            ));
        }
        if model_bytes == 0 || !model_bytes.is_multiple_of(layers as u64) {
            return Err(LearnerError::InvalidSpec(format!(
                "{model_bytes} bytes do not split evenly over {layers} layers"
            )));
        }
        let layer_bytes = model_bytes / layers as u64;
        let elements = (1..=1024u64.min(layer_bytes))
            .rev()
            .find(|e| layer_bytes.is_multiple_of(*e))
            .expect("1 divides everything");
        let partition = LayerPartition::new(&vec![elements as usize; layers], layer_bytes / elements)?;
        Ok(Self {
            partition: Arc::new(partition),
            workers,
            iterations_per_epoch,
            batch,
            seed,
        })
    }
}

impl Workload for SyntheticWorkload {
    fn partition(&self) -> &Arc<LayerPartition> {
        &self.partition
    }

    fn initial_params(&self) -> ParamVector {
        let mut rng = seed::rng(self.seed, Purpose::Init, &[]);
        let values = (0..self.partition.total_count())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        ParamVector::new(values, self.partition.clone()).expect("finite normals")
    }

    fn workers(&self) -> usize {
        self.workers
    }

    fn subset_weights(&self) -> Vec<f64> {
        vec![1.0 / self.workers as f64; self.workers]
    }

    fn iterations_per_epoch(&self) -> u64 {
        self.iterations_per_epoch
    }

    fn samples_per_iteration(&self) -> u64 {
        (self.workers * self.batch) as u64
    }

    fn compute(
        &mut self,
        worker: usize,
        iteration: u64,
        _params: &ParamVector,
    ) -> Result<(f64, GradVector), LearnerError> {
        let mut rng = seed::rng(self.seed, Purpose::Synthetic, &[worker as u64, iteration]);
        let values = (0..self.partition.total_count())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1e-3 * z
            })
            .collect();
        let epoch = iteration / self.iterations_per_epoch;
        let loss = 2.0 / (1.0 + 0.5 * epoch as f64);
        Ok((loss, GradVector::new(values, self.partition.clone())?))
    }

    fn evaluate(&self, _params: &ParamVector) -> Result<Option<f64>, LearnerError> {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{synth_dataset, Activation, LossKind};

    #[test]
    fn split_sizes_differ_by_at_most_one() {
        assert_eq!(even_split(10, 3), vec![4, 3, 3]);
        assert_eq!(even_split(8, 8), vec![1; 8]);
        for n in 1..50 {
            for p in 1..=n.min(9) {
                let s = even_split(n, p);
                assert_eq!(s.iter().sum::<usize>(), n);
                assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn mlp_workload_partitions_and_batches() {
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let data = synth_dataset(3, 103, 2, 2, 3.0).unwrap();
        let (train, test) = data.split(0.2, 3);
        let mut w = MlpWorkload::new(spec, train.clone(), test, 4, 8, LrSchedule::default(), 5, 4).unwrap();
        let weights = w.subset_weights();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut all: Vec<usize> = w.subsets().iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..train.len()).collect::<Vec<_>>());
        let ipe = w.iterations_per_epoch();
        assert_eq!(ipe, (w.subsets()[0].len() as u64).div_ceil(8));
        // one epoch covers the whole subset
        let mut seen: Vec<usize> = (0..ipe).flat_map(|i| w.batch_rows(1, i)).collect();
        seen.sort_unstable();
        seen.dedup();
        let mut subset = w.subsets()[1].clone();
        subset.sort_unstable();
        assert_eq!(seen, subset);
        assert_ne!(w.batch_rows(1, 0), w.batch_rows(1, ipe));
        let p = w.initial_params();
        let (loss, delta) = w.compute(0, 0, &p).unwrap();
        assert!(loss > 0.0);
        assert_eq!(delta.values().len(), p.values().len());
        assert!(w.evaluate(&p).unwrap().is_some());
    }

    #[test]
    fn synthetic_sizes_are_exact() {
        let w = SyntheticWorkload::new(25_000_000, 10, 8, 5, 32, 1).unwrap();
        assert_eq!(w.partition().model_bytes(), 25_000_000);
        assert_eq!(w.partition().layer_count(), 10);
        assert!(SyntheticWorkload::new(10, 3, 1, 1, 1, 1).is_err());
        let mut w = w;
        let p = w.initial_params();
        let a = w.compute(2, 7, &p).unwrap();
        assert_eq!(a, w.compute(2, 7, &p).unwrap());
        assert_ne!(a.1, w.compute(3, 7, &p).unwrap().1);
    }
}
