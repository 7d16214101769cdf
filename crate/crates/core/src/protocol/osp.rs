//! Two-stage synchronization: important layers at a routine barrier, the rest
//! streamed to the server while workers compute the next iteration.
//!
//! Workers step deferred layers with their own local delta right after the
//! barrier and replace it with the aggregated value once that arrives. The
//! server ranks layers by importance after each fully aggregated iteration
//! and tells workers which layers to defer next.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::importance::{build_gib, pgp_layer_importance, rank_layers, Gib, LayerImportance};
use crate::param::{GradVector, LayerPartition, LayerPayload, LayerSet, ParamVector};
use crate::tuning::{compute_umax, tune_sgu, NetworkParams, SguSchedule};

use super::{aggregate, Body, Message, MessageKind, ProtocolError};

/// The bitmap every worker starts from: nothing deferred.
pub fn first_iteration_bootstrap() -> Gib {
    Gib::empty(0)
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub worker_id: usize,
    pub params: ParamVector,
    pub iteration: u64,
    pub current_gib: Gib,
    /// Deferred layers, least important first.
    pub ics_order: Vec<usize>,
    /// Local deltas stepped into `params` and awaiting the aggregated value.
    pub pending_local_ics: LayerPayload,
    /// Values of the pending layers before the local step.
    pending_base: LayerPayload,
    pub subset_weight: f64,
    pub rng_seed: u64,
}

impl WorkerState {
    pub fn new(worker_id: usize, params: ParamVector, subset_weight: f64, rng_seed: u64) -> Self {
        Self {
            worker_id,
            params,
            iteration: 0,
            current_gib: first_iteration_bootstrap(),
            ics_order: Vec::new(),
            pending_local_ics: LayerPayload::new(),
            pending_base: LayerPayload::new(),
            subset_weight,
            rng_seed,
        }
    }

    fn partition(&self) -> &Arc<LayerPartition> {
        self.params.partition()
    }

    /// True once every deferred layer of the last barrier was corrected.
    pub fn drained(&self) -> bool {
        self.pending_local_ics.is_empty()
    }

    /// Adopts a newer bitmap; older or equal tags are ignored.
    pub fn receive_gib(&mut self, gib: Gib, ics_order: Vec<usize>) {
        if gib.iteration_tag >= self.current_gib.iteration_tag {
            self.current_gib = gib;
            self.ics_order = ics_order;
        }
    }

    /// Deferred layers of the current bitmap, least important first. Layers
    /// missing from the order list follow in id order.
    fn ordered_ics(&self) -> Vec<usize> {
        let ics = &self.current_gib.ics_set;
        let mut seen = LayerSet::new();
        let mut out = Vec::with_capacity(ics.len());
        for &l in &self.ics_order {
            if ics.contains(l) && !seen.contains(l) {
                seen.insert(l);
                out.push(l);
            }
        }
        out.extend(ics.iter().filter(|&l| !seen.contains(l)));
        out
    }

    /// Splits this iteration's delta by the current bitmap: the routine
    /// message carries every other layer, and the deferred layers are cut
    /// into at most `chunks` byte-balanced messages in ascending importance.
    pub fn osp_worker_iteration(
        &self,
        delta: &GradVector,
        chunks: usize,
    ) -> Result<(Message, Vec<Message>), ProtocolError> {
        let part = self.partition().clone();
        let rs = self.current_gib.rs_set(part.layer_count());
        let rs_msg = Message::layers(
            MessageKind::PushImportant,
            self.iteration,
            delta.slice_layers(&rs)?,
            &part,
        );
        let order = self.ordered_ics();
        let mut ics_msgs = Vec::new();
        for group in chunk_layers(&order, &part, chunks) {
            let set: LayerSet = group.into_iter().collect();
            ics_msgs.push(Message::layers(
                MessageKind::PushIcsChunk,
                self.iteration,
                delta.slice_layers(&set)?,
                &part,
            ));
        }
        Ok((rs_msg, ics_msgs))
    }

    /// End of the routine stage: aggregated values on the routine layers, the
    /// worker's own delta on the deferred ones.
    pub fn lgp_partial(
        &mut self,
        global_rs_delta: &LayerPayload,
        local_ics_delta: &LayerPayload,
    ) -> Result<(), ProtocolError> {
        let overlap = global_rs_delta
            .layer_set()
            .intersection(&local_ics_delta.layer_set());
        if !overlap.is_empty() {
            return Err(ProtocolError::Overlap(overlap));
        }
        let part = self.partition().clone();
        global_rs_delta.validate(&part)?;
        local_ics_delta.validate(&part)?;
        if let Some(l) = local_ics_delta.layer_ids().find(|&l| self.pending_local_ics.get(l).is_some()) {
            return Err(ProtocolError::UnexpectedMessage(format!(
                "layer {l} already awaits a correction"
            )));
        }
        self.params.apply_payload(global_rs_delta, 1.0)?;
        for (l, local) in local_ics_delta.iter() {
            self.pending_base.insert(l, self.params.layer_values(l).to_vec());
            self.pending_local_ics.insert(l, local.to_vec());
        }
        self.params.apply_payload(local_ics_delta, 1.0)?;
        Ok(())
    }

    /// Replaces the local step on each arrived layer with the aggregated one.
    /// The result is `base + global`, which is `params - local + global`
    /// without the rounding of undoing the local step.
    pub fn lgp_correct(&mut self, global_chunk: &LayerPayload) -> Result<(), ProtocolError> {
        global_chunk.validate(self.partition())?;
        if let Some(l) = global_chunk.layer_ids().find(|&l| self.pending_local_ics.get(l).is_none()) {
            return Err(ProtocolError::NotPending(l));
        }
        for (l, global) in global_chunk.iter() {
            let base = self.pending_base.remove(l).expect("base kept with local delta");
            self.pending_local_ics.remove(l);
            for ((p, b), g) in self.params.layer_values_mut(l).iter_mut().zip(&base).zip(global) {
                *p = b + g;
            }
        }
        Ok(())
    }
}

/// Greedy byte-balanced grouping: a layer joins chunk
/// `floor(bytes_before * chunks / total)`. Empty chunks are dropped.
pub fn chunk_layers(order: &[usize], part: &LayerPartition, chunks: usize) -> Vec<Vec<usize>> {
    let chunks = chunks.max(1);
    let total: u64 = order.iter().map(|&l| part.layer_size_bytes(l)).sum();
    let mut groups = vec![Vec::new(); chunks];
    let mut before = 0u64;
    for &l in order {
        let idx = if total == 0 {
            0
        } else {
            ((before as u128 * chunks as u128) / total as u128) as usize
        };
        groups[idx.min(chunks - 1)].push(l);
        before += part.layer_size_bytes(l);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Where the deferred-byte budget comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetPolicy {
    /// Grown each epoch from the training-loss reduction.
    Tuned,
    /// Constant after the first bitmap.
    Fixed(u64),
}

/// Source of the compute time that bounds the budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComputeTimeSource {
    /// Known compute time in seconds.
    Configured(f64),
    /// Mean compute time observed over the previous epoch.
    Measured,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub weights: Vec<f64>,
    pub iterations_per_epoch: u64,
    pub budget: BudgetPolicy,
    pub network: NetworkParams,
    pub compute_time: ComputeTimeSource,
    pub eq5_literal: bool,
    pub gib_push_negligible: bool,
}

#[derive(Debug, Clone)]
struct IterationBuffer {
    /// Routine layers each worker pushed.
    rs_sets: Vec<Option<LayerSet>>,
    /// layer -> per-worker contribution
    contributions: BTreeMap<usize, Vec<Option<Vec<f64>>>>,
    rs_done: bool,
    aggregated: LayerSet,
    /// Aggregated delta of every finished layer, for ranking.
    agg_delta: LayerPayload,
    losses: Vec<Option<f64>>,
    budget: u64,
}

impl IterationBuffer {
    fn new(workers: usize) -> Self {
        Self {
            rs_sets: vec![None; workers],
            contributions: BTreeMap::new(),
            rs_done: false,
            aggregated: LayerSet::new(),
            agg_delta: LayerPayload::new(),
            losses: vec![None; workers],
            budget: 0,
        }
    }
}

/// What a push caused at the server.
#[derive(Debug, Clone, Default)]
pub struct ServerOutput {
    /// Routine-stage reply for every worker.
    pub pull_important: Option<Message>,
    /// Newly completed deferred layers for every worker.
    pub ics_global: Option<Message>,
    /// Next bitmap for every worker, once an iteration is fully aggregated.
    pub gib_update: Option<Message>,
    pub completed_iteration: Option<u64>,
}

/// Summary of a fully aggregated iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedIteration {
    pub iteration: u64,
    pub mean_loss: f64,
    pub budget: u64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_params: ParamVector,
    cfg: ServerConfig,
    buffers: BTreeMap<u64, IterationBuffer>,
    current: u64,
    pub sched: SguSchedule,
    budget: u64,
    pub next_gib: Gib,
    next_order: Vec<usize>,
    pub importance_accum: LayerImportance,
    epoch_losses: Vec<f64>,
    epoch_compute: (f64, u64),
    completed: Vec<CompletedIteration>,
    applied_log: Option<Vec<(u64, LayerPayload)>>,
}

impl ServerState {
    pub fn new(initial: ParamVector, cfg: ServerConfig) -> Result<Self, ProtocolError> {
        if cfg.weights.is_empty() || cfg.iterations_per_epoch == 0 {
            return Err(ProtocolError::Config("no workers or empty epoch".into()));
        }
        let part = initial.partition().clone();
        let model = part.model_bytes();
        let u_max = match cfg.compute_time {
            ComputeTimeSource::Configured(t) => {
                compute_umax(&cfg.network, t, cfg.weights.len(), model, cfg.eq5_literal)
            }
            // refined once the first epoch has been timed
            ComputeTimeSource::Measured => 0,
        };
        Ok(Self {
            global_params: initial,
            buffers: BTreeMap::new(),
            current: 0,
            sched: SguSchedule::new(u_max, model),
            budget: 0,
            next_gib: first_iteration_bootstrap(),
            next_order: Vec::new(),
            importance_accum: LayerImportance::zeros(part.layer_count()),
            epoch_losses: Vec::new(),
            epoch_compute: (0.0, 0),
            completed: Vec::new(),
            applied_log: None,
            cfg,
        })
    }

    pub fn workers(&self) -> usize {
        self.cfg.weights.len()
    }

    /// Keeps every aggregated delta in application order.
    pub fn record_applied(&mut self) {
        self.applied_log.get_or_insert_with(Vec::new);
    }

    pub fn applied(&self) -> &[(u64, LayerPayload)] {
        self.applied_log.as_deref().unwrap_or(&[])
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn completed(&self) -> &[CompletedIteration] {
        &self.completed
    }

    /// Feeds one compute-phase duration for the measured compute-time mode.
    pub fn observe_compute_time(&mut self, seconds: f64) {
        self.epoch_compute.0 += seconds;
        self.epoch_compute.1 += 1;
    }

    fn partition(&self) -> Arc<LayerPartition> {
        self.global_params.partition().clone()
    }

    fn buffer(&mut self, iteration: u64) -> &mut IterationBuffer {
        let n = self.workers();
        self.buffers.entry(iteration).or_insert_with(|| IterationBuffer::new(n))
    }

    fn check_stale(&self, iteration: u64) -> Result<(), ProtocolError> {
        if iteration + 1 < self.current {
            return Err(ProtocolError::Stale {
                iteration,
                current: self.current,
            });
        }
        Ok(())
    }

    pub fn record_loss(&mut self, worker: usize, iteration: u64, loss: f64) -> Result<(), ProtocolError> {
        self.check_stale(iteration)?;
        self.buffer(iteration).losses[worker] = Some(loss);
        Ok(())
    }

    /// Handles a routine or deferred-layer push from `worker`.
    pub fn osp_server_on_push(&mut self, worker: usize, msg: Message) -> Result<ServerOutput, ProtocolError> {
        if worker >= self.workers() {
            return Err(ProtocolError::UnexpectedMessage(format!("unknown worker {worker}")));
        }
        self.check_stale(msg.iteration)?;
        let iteration = msg.iteration;
        self.current = self.current.max(iteration);
        let kind = msg.kind;
        let payload = msg.into_payload()?;
        payload.validate(&self.partition())?;
        let mut out = ServerOutput::default();
        match kind {
            MessageKind::PushImportant => {
                let buf = self.buffer(iteration);
                if buf.rs_sets[worker].is_some() {
                    return Err(ProtocolError::UnexpectedMessage(format!(
                        "second routine push from worker {worker} for iteration {iteration}"
                    )));
                }
                buf.rs_sets[worker] = Some(payload.layer_set());
                for (l, v) in payload.iter() {
                    Self::store(buf, worker, l, v)?;
                }
                if buf.rs_sets.iter().all(Option::is_some) {
                    out.pull_important = Some(self.routine_barrier(iteration)?);
                }
            }
            MessageKind::PushIcsChunk => {
                let rs_done = self.buffer(iteration).rs_done;
                if !rs_done {
                    return Err(ProtocolError::UnexpectedMessage(format!(
                        "deferred layers of iteration {iteration} before its barrier"
                    )));
                }
                let buf = self.buffer(iteration);
                for (l, v) in payload.iter() {
                    Self::store(buf, worker, l, v)?;
                }
                let ready: Vec<usize> = payload
                    .layer_ids()
                    .filter(|l| buf.contributions[l].iter().all(Option::is_some))
                    .collect();
                if !ready.is_empty() {
                    let set: LayerSet = ready.into_iter().collect();
                    let agg = self.aggregate_layers(iteration, &set)?;
                    out.ics_global = Some(Message::layers(
                        MessageKind::IcsGlobalChunk,
                        iteration,
                        agg,
                        &self.partition(),
                    ));
                }
            }
            other => {
                return Err(ProtocolError::UnexpectedMessage(format!(
                    "{} sent to the server",
                    other.name()
                )))
            }
        }
        let layers = self.partition().layer_count();
        if self.buffers[&iteration].aggregated.len() == layers {
            out.gib_update = Some(self.finish_iteration(iteration)?);
            out.completed_iteration = Some(iteration);
        }
        Ok(out)
    }

    fn store(buf: &mut IterationBuffer, worker: usize, layer: usize, values: &[f64]) -> Result<(), ProtocolError> {
        let n = buf.rs_sets.len();
        let slot = &mut buf.contributions.entry(layer).or_insert_with(|| vec![None; n])[worker];
        if slot.is_some() || buf.aggregated.contains(layer) {
            return Err(ProtocolError::UnexpectedMessage(format!(
                "layer {layer} pushed twice by worker {worker}"
            )));
        }
        *slot = Some(values.to_vec());
        Ok(())
    }

    /// Layers every worker sent at the barrier are aggregated now; layers
    /// only some workers sent (bitmaps can differ when an update arrived
    /// late) wait for the stragglers' deferred pushes.
    fn routine_barrier(&mut self, iteration: u64) -> Result<Message, ProtocolError> {
        let budget = self.budget;
        let buf = self.buffer(iteration);
        buf.rs_done = true;
        buf.budget = budget;
        let common = buf
            .rs_sets
            .iter()
            .map(|s| s.clone().expect("all routine pushes present"))
            .reduce(|a, b| a.intersection(&b))
            .unwrap_or_default();
        let agg = self.aggregate_layers(iteration, &common)?;
        Ok(Message::layers(
            MessageKind::PullImportant,
            iteration,
            agg,
            &self.partition(),
        ))
    }

    fn aggregate_layers(&mut self, iteration: u64, set: &LayerSet) -> Result<LayerPayload, ProtocolError> {
        let weights = self.cfg.weights.clone();
        let buf = self.buffers.get_mut(&iteration).expect("buffer exists");
        let n = weights.len();
        let mut per_worker = vec![LayerPayload::new(); n];
        for l in set.iter() {
            let contribs = buf.contributions.remove(&l).ok_or_else(|| {
                ProtocolError::UnexpectedMessage(format!("layer {l} has no contributions"))
            })?;
            for (w, c) in contribs.into_iter().enumerate() {
                let c = c.ok_or_else(|| {
                    ProtocolError::UnexpectedMessage(format!("layer {l} missing worker {w}"))
                })?;
                per_worker[w].insert(l, c);
            }
        }
        let refs: Vec<&LayerPayload> = per_worker.iter().collect();
        let agg = aggregate(&refs, &weights)?;
        self.global_params.apply_payload(&agg, 1.0)?;
        let buf = self.buffers.get_mut(&iteration).expect("buffer exists");
        for (l, v) in agg.iter() {
            buf.aggregated.insert(l);
            buf.agg_delta.insert(l, v.to_vec());
        }
        if let Some(log) = self.applied_log.as_mut() {
            if !agg.is_empty() {
                log.push((iteration, agg.clone()));
            }
        }
        Ok(agg)
    }

    /// Ranks layers on the finished iteration, retunes the budget at epoch
    /// ends, and builds the bitmap for the next split.
    fn finish_iteration(&mut self, iteration: u64) -> Result<Message, ProtocolError> {
        let buf = self.buffers.remove(&iteration).expect("buffer exists");
        let part = self.partition();
        let losses: Vec<f64> = buf.losses.iter().flatten().copied().collect();
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        self.completed.push(CompletedIteration {
            iteration,
            mean_loss,
            budget: buf.budget,
        });
        self.epoch_losses.push(mean_loss);

        let ipe = self.cfg.iterations_per_epoch;
        if (iteration + 1).is_multiple_of(ipe) {
            let epoch = (iteration + 1) / ipe;
            if let ComputeTimeSource::Measured = self.cfg.compute_time {
                if self.epoch_compute.1 > 0 {
                    let t_c = self.epoch_compute.0 / self.epoch_compute.1 as f64;
                    let u = compute_umax(
                        &self.cfg.network,
                        t_c,
                        self.workers(),
                        part.model_bytes(),
                        self.cfg.eq5_literal,
                    );
                    self.sched.set_u_max(u, part.model_bytes());
                }
                self.epoch_compute = (0.0, 0);
            }
            let epoch_loss = self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64;
            self.epoch_losses.clear();
            let tuned = tune_sgu(&mut self.sched, epoch, epoch_loss.max(0.0))?;
            if self.cfg.budget == BudgetPolicy::Tuned {
                self.budget = tuned;
            }
        }
        if let BudgetPolicy::Fixed(b) = self.cfg.budget {
            self.budget = b;
        }

        let delta = GradVector::new(
            (0..part.layer_count())
                .flat_map(|l| buf.agg_delta.get(l).expect("all layers aggregated").to_vec())
                .collect(),
            part.clone(),
        )?;
        let importance = pgp_layer_importance(&self.global_params, &delta)?;
        self.importance_accum = importance.clone();
        let tag = u32::try_from(iteration + 1).unwrap_or(u32::MAX);
        let gib = build_gib(&importance, &part, self.budget, tag);
        let order: Vec<usize> = rank_layers(&importance)
            .into_iter()
            .filter(|&l| gib.ics_set.contains(l))
            .collect();
        self.next_gib = gib.clone();
        self.next_order = order.clone();
        Ok(Message::gib(
            iteration + 1,
            gib,
            order,
            part.layer_count(),
            self.cfg.gib_push_negligible,
        ))
    }
}

/// Unpacks a bitmap update.
pub fn gib_of(msg: &Message) -> Option<(Gib, Vec<usize>)> {
    match &msg.body {
        Body::Gib { gib, ics_order } => Some((gib.clone(), ics_order.clone())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(counts: &[usize]) -> Arc<LayerPartition> {
        Arc::new(LayerPartition::new(counts, 4).unwrap())
    }

    fn worker(values: Vec<f64>, p: &Arc<LayerPartition>) -> WorkerState {
        WorkerState::new(0, ParamVector::new(values, p.clone()).unwrap(), 1.0, 0)
    }

    fn payload(entries: &[(usize, &[f64])]) -> LayerPayload {
        let mut p = LayerPayload::new();
        for (l, v) in entries {
            p.insert(*l, v.to_vec());
        }
        p
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn partial_and_correct_examples() {
        let p = part(&[1, 1, 1, 1]);
        let mut ws = worker(vec![1.0; 4], &p);
        ws.lgp_partial(
            &payload(&[(0, &[0.1]), (1, &[-0.2])]),
            &payload(&[(2, &[0.05]), (3, &[0.05])]),
        )
        .unwrap();
        assert!(close(ws.params.values(), &[1.1, 0.8, 1.05, 1.05]));
        ws.lgp_correct(&payload(&[(2, &[0.02]), (3, &[-0.01])])).unwrap();
        assert!(close(ws.params.values(), &[1.1, 0.8, 1.02, 0.99]));
        assert!(ws.drained());
    }

    #[test]
    fn two_element_layer_correction() {
        let p = part(&[2, 2]);
        let mut ws = worker(vec![1.0; 4], &p);
        ws.lgp_partial(&payload(&[(0, &[0.1, -0.2])]), &payload(&[(1, &[0.05, 0.05])]))
            .unwrap();
        assert!(close(ws.params.values(), &[1.1, 0.8, 1.05, 1.05]));
        ws.lgp_correct(&payload(&[(1, &[0.02, -0.01])])).unwrap();
        assert!(close(ws.params.values(), &[1.1, 0.8, 1.02, 0.99]));
    }

    #[test]
    fn correction_with_own_delta_is_identity() {
        let p = part(&[2, 2]);
        let mut ws = worker(vec![0.3, 0.7, -0.2, 0.9], &p);
        ws.lgp_partial(&LayerPayload::new(), &payload(&[(1, &[0.125, -0.5])])).unwrap();
        let after_partial = ws.params.clone();
        ws.lgp_correct(&payload(&[(1, &[0.125, -0.5])])).unwrap();
        assert_eq!(ws.params, after_partial);
    }

    #[test]
    fn zero_and_empty_updates() {
        let p = part(&[2, 2]);
        let mut ws = worker(vec![0.3, 0.7, -0.2, 0.9], &p);
        let before = ws.params.clone();
        ws.lgp_partial(&payload(&[(0, &[0.0, 0.0])]), &payload(&[(1, &[0.0, 0.0])])).unwrap();
        assert_eq!(ws.params, before);

        let mut bsp = worker(vec![0.3, 0.7, -0.2, 0.9], &p);
        let mut osp = bsp.clone();
        let global = payload(&[(0, &[0.1, 0.2]), (1, &[0.3, -0.4])]);
        bsp.params.apply_payload(&global, 1.0).unwrap();
        osp.lgp_partial(&global, &LayerPayload::new()).unwrap();
        assert_eq!(bsp.params, osp.params);
        assert!(osp.drained());
    }

    #[test]
    fn partial_and_correct_errors() {
        let p = part(&[1, 1]);
        let mut ws = worker(vec![1.0; 2], &p);
        assert!(matches!(
            ws.lgp_partial(&payload(&[(0, &[0.1])]), &payload(&[(0, &[0.1])])),
            Err(ProtocolError::Overlap(_))
        ));
        assert_eq!(
            ws.lgp_correct(&payload(&[(1, &[0.1])])),
            Err(ProtocolError::NotPending(1))
        );
    }

    #[test]
    fn split_follows_bitmap() {
        let p = part(&[2, 2, 2, 2]);
        let mut ws = worker(vec![0.0; 8], &p);
        let delta = GradVector::new((0..8).map(f64::from).collect(), p.clone()).unwrap();

        let (rs, ics) = ws.osp_worker_iteration(&delta, 4).unwrap();
        assert_eq!(rs.payload().unwrap().len(), 4);
        assert!(ics.is_empty());

        ws.receive_gib(Gib { ics_set: LayerSet::full(4), iteration_tag: 1 }, vec![3, 1, 0, 2]);
        let (rs, ics) = ws.osp_worker_iteration(&delta, 4).unwrap();
        assert!(rs.payload().unwrap().is_empty());
        let order: Vec<usize> = ics.iter().flat_map(|m| m.payload().unwrap().layer_ids()).collect();
        assert_eq!(order, vec![3, 1, 0, 2]);

        // layer 3 less important than layer 2
        ws.receive_gib(Gib { ics_set: [2, 3].into_iter().collect(), iteration_tag: 2 }, vec![3, 2]);
        let (rs, ics) = ws.osp_worker_iteration(&delta, 2).unwrap();
        assert_eq!(rs.payload().unwrap().layer_set(), [0, 1].into_iter().collect());
        assert_eq!(ics.len(), 2);
        assert_eq!(ics[0].payload().unwrap().layer_set(), [3].into_iter().collect());
        assert_eq!(ics[1].payload().unwrap().layer_set(), [2].into_iter().collect());
        assert_eq!(ics[0].payload().unwrap().get(3).unwrap(), &[6.0, 7.0]);

        // stale tags are ignored
        ws.receive_gib(Gib::empty(1), Vec::new());
        assert_eq!(ws.current_gib.iteration_tag, 2);
    }

    #[test]
    fn chunking_balances_bytes() {
        let p = LayerPartition::new(&[10, 10, 10, 10, 40], 4).unwrap();
        let groups = chunk_layers(&[0, 1, 2, 3, 4], &p, 2);
        assert_eq!(groups, vec![vec![0, 1, 2, 3], vec![4]]);
        let groups = chunk_layers(&[4, 0, 1, 2, 3], &p, 4);
        assert_eq!(groups, vec![vec![4], vec![0, 1], vec![2, 3]]);
        assert!(chunk_layers(&[], &p, 3).is_empty());
        assert_eq!(chunk_layers(&[1, 0], &p, 8), vec![vec![1], vec![0]]);
    }

    fn server(p: &Arc<LayerPartition>, n: usize, budget: BudgetPolicy) -> ServerState {
        ServerState::new(
            ParamVector::zeros(p.clone()),
            ServerConfig {
                weights: vec![1.0 / n as f64; n],
                iterations_per_epoch: 2,
                budget,
                network: NetworkParams::new(1e9, 0.0, 0.0).unwrap(),
                compute_time: ComputeTimeSource::Configured(1.0),
                eq5_literal: false,
                gib_push_negligible: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn server_barrier_then_deferred_layers() {
        let p = part(&[1, 1, 1]);
        let mut ss = server(&p, 2, BudgetPolicy::Fixed(8));
        let push = |it, l: &[(usize, &[f64])], kind| Message::layers(kind, it, payload(l), &p);

        let out = ss
            .osp_server_on_push(0, push(0, &[(0, &[1.0]), (1, &[2.0]), (2, &[3.0])], MessageKind::PushImportant))
            .unwrap();
        assert!(out.pull_important.is_none());
        let out = ss
            .osp_server_on_push(1, push(0, &[(0, &[3.0]), (1, &[4.0]), (2, &[5.0])], MessageKind::PushImportant))
            .unwrap();
        let pull = out.pull_important.unwrap();
        assert_eq!(pull.payload().unwrap(), &payload(&[(0, &[2.0]), (1, &[3.0]), (2, &[4.0])]));
        assert_eq!(out.completed_iteration, Some(0));
        let (gib, order) = gib_of(&out.gib_update.unwrap()).unwrap();
        assert_eq!(gib.iteration_tag, 1);
        // scores |p * d| after the update: 4, 9, 16; two 4-byte layers fit
        assert_eq!(gib.ics_set, [0, 1].into_iter().collect());
        assert_eq!(order, vec![0, 1]);

        // iteration 1 with layers 0 and 1 deferred
        ss.osp_server_on_push(0, push(1, &[(2, &[1.0])], MessageKind::PushImportant)).unwrap();
        let out = ss.osp_server_on_push(1, push(1, &[(2, &[1.0])], MessageKind::PushImportant)).unwrap();
        assert_eq!(out.pull_important.unwrap().payload().unwrap().layer_set(), [2].into_iter().collect());
        let out = ss.osp_server_on_push(0, push(1, &[(0, &[1.0])], MessageKind::PushIcsChunk)).unwrap();
        assert!(out.ics_global.is_none());
        let out = ss.osp_server_on_push(1, push(1, &[(0, &[0.0])], MessageKind::PushIcsChunk)).unwrap();
        assert_eq!(out.ics_global.unwrap().payload().unwrap(), &payload(&[(0, &[0.5])]));
        assert!(out.completed_iteration.is_none());
        ss.osp_server_on_push(0, push(1, &[(1, &[1.0])], MessageKind::PushIcsChunk)).unwrap();
        let out = ss.osp_server_on_push(1, push(1, &[(1, &[1.0])], MessageKind::PushIcsChunk)).unwrap();
        assert_eq!(out.completed_iteration, Some(1));
        assert_eq!(ss.global_params.values(), &[2.5, 4.0, 5.0]);

        // far behind the server clock
        ss.osp_server_on_push(0, push(3, &[(2, &[1.0])], MessageKind::PushImportant)).unwrap();
        assert!(matches!(
            ss.osp_server_on_push(0, push(1, &[(2, &[1.0])], MessageKind::PushImportant)),
            Err(ProtocolError::Stale { .. })
        ));
    }

    #[test]
    fn mixed_bitmaps_wait_for_deferred_pushes() {
        let p = part(&[1, 1]);
        let mut ss = server(&p, 2, BudgetPolicy::Fixed(0));
        let push = |l: &[(usize, &[f64])], kind| Message::layers(kind, 0, payload(l), &p);
        ss.osp_server_on_push(0, push(&[(0, &[1.0]), (1, &[1.0])], MessageKind::PushImportant)).unwrap();
        let out = ss.osp_server_on_push(1, push(&[(0, &[3.0])], MessageKind::PushImportant)).unwrap();
        assert_eq!(out.pull_important.unwrap().payload().unwrap().layer_set(), [0].into_iter().collect());
        let out = ss.osp_server_on_push(1, push(&[(1, &[3.0])], MessageKind::PushIcsChunk)).unwrap();
        assert_eq!(out.ics_global.unwrap().payload().unwrap(), &payload(&[(1, &[2.0])]));
        assert_eq!(out.completed_iteration, Some(0));
    }

    #[test]
    fn tuned_budget_starts_at_zero() {
        let p = part(&[1, 1]);
        let mut ss = server(&p, 1, BudgetPolicy::Tuned);
        for it in 0..6u64 {
            ss.record_loss(0, it, 1.0 / (it + 1) as f64).unwrap();
            let out = ss
                .osp_server_on_push(0, Message::layers(MessageKind::PushImportant, it, payload(&[(0, &[0.1]), (1, &[0.2])]), &p))
                .unwrap();
            assert_eq!(out.completed_iteration, Some(it));
        }
        let budgets: Vec<u64> = ss.completed().iter().map(|c| c.budget).collect();
        // epochs of two iterations: the first two epochs run without deferral
        assert_eq!(&budgets[..4], &[0, 0, 0, 0]);
        assert!(ss.budget() <= ss.sched.u_max());
        assert!(ss.sched.u_max() <= 6);
    }
}
