//! Two-stage contrastive optimization.
//!
//! Stage 1 trains both view encoders on (street frame, small aerial) pairs;
//! stage 2 freezes them and trains only the adapters on (video, large aerial)
//! pairs. Both stages share the same batch-symmetric soft-margin triplet
//! objective: within a batch, every non-matching cross-view item is a
//! negative, in both retrieval directions.

use std::collections::HashMap;
use std::io::Write;

use crate::adapter::{embed_video, prepare_frames, tile_large, UnifiedModel};
use crate::encoder::{patchify, ParamMode, ParamNodes, ViewEncoder};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, NodeId, Tape, Tensor};

/// Soft-margin triplet term: log(1 + exp(alpha * (d_pos - d_neg))).
pub fn soft_margin_triplet(tape: &mut Tape<'_>, d_pos: NodeId, d_neg: NodeId, alpha: f32) -> NodeId {
    let diff = tape.sub(d_pos, d_neg);
    let scaled = tape.scale(diff, alpha);
    tape.softplus(scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    Image,
    Adapter,
    Retriever,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Stage::Image),
            "adapter" => Ok(Stage::Adapter),
            "retriever" => Ok(Stage::Retriever),
            other => Err(Error::InvalidArgument(format!("unknown stage {other}"))),
        }
    }
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub alpha: f32,
    pub seed: u64,
    pub frame_stride: usize,
}

impl TrainSchedule {
    pub fn desk_default(stage: Stage) -> Self {
        let (epochs, batch) = match stage {
            Stage::Image => (30, 16),
            Stage::Adapter => (30, 4),
            Stage::Retriever => (500, 1),
        };
        Self { stage, epochs, batch, lr: 1e-4, alpha: 10.0, seed: 0, frame_stride: 1 }
    }

    pub fn encoders_frozen(&self) -> bool {
        self.stage == Stage::Adapter
    }
}

/// Validated batch plan: matched pairs whose within-batch negatives are all
/// the other cross-view items.
#[derive(Debug, Clone)]
pub struct TripletBatchPlan {
    pub pair_ids: Vec<String>,
}

impl TripletBatchPlan {
    pub fn new(pair_ids: Vec<String>) -> Result<Self> {
        if pair_ids.len() < 2 {
            return Err(Error::InvalidArgument(
                "triplet batch needs at least 2 pairs (one negative)".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &pair_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!(
                    "pair {id} repeated in batch: an anchor would be its own negative"
                )));
            }
        }
        Ok(Self { pair_ids })
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// One optimization step's observables.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub grad_norm: f64,
    pub lr: f32,
}

/// JSON-lines metrics writer.
pub struct MetricsSink<W: Write> {
    out: W,
}

impl<W: Write> MetricsSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, stats: &StepStats) -> Result<()> {
        serde_json::to_writer(&mut self.out, stats)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

/// Batch loss over unit embeddings plus its gradient on every embedding.
///
/// Runs on its own small tape, so the gradient comes from the same autodiff
/// machinery as everything else. Loss averages the soft-margin terms of both
/// retrieval directions over all (anchor, negative) combinations.
fn symmetric_triplet_loss(
    street: &[Vec<f32>],
    aerial: &[Vec<f32>],
    alpha: f32,
) -> (f32, Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let b = street.len();
    assert_eq!(b, aerial.len());
    assert!(b >= 2);
    let d = street[0].len();
    let mut tape = Tape::new();
    let s_ids: Vec<NodeId> = street
        .iter()
        .map(|v| tape.param_owned(Tensor::new(&[d], v.clone()).unwrap()))
        .collect();
    let a_ids: Vec<NodeId> = aerial
        .iter()
        .map(|v| tape.param_owned(Tensor::new(&[d], v.clone()).unwrap()))
        .collect();

    let mut dist = vec![vec![NodeId::default(); b]; b];
    for i in 0..b {
        for j in 0..b {
            dist[i][j] = tape.l2_distance(s_ids[i], a_ids[j], 1e-12);
        }
    }
    let mut terms = Vec::with_capacity(2 * b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            // street anchor i against aerial negative j
            terms.push(soft_margin_triplet(&mut tape, dist[i][i], dist[i][j], alpha));
            // aerial anchor i against street negative j
            terms.push(soft_margin_triplet(&mut tape, dist[i][i], dist[j][i], alpha));
        }
    }
    let loss = tape.mean_scalars(&terms);
    let loss_val = tape.value(loss).data()[0];
    tape.backward(loss);
    let ds = s_ids.iter().map(|&id| tape.grad(id).unwrap_or(&[]).to_vec()).collect();
    let da = a_ids.iter().map(|&id| tape.grad(id).unwrap_or(&[]).to_vec()).collect();
    (loss_val, ds, da)
}

fn accumulate_grad_norm(grads: &HashMap<String, Vec<f32>>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>()
}

fn apply_adam(adam: &mut AdamState, model_visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)), grads: &HashMap<String, Vec<f32>>) {
    model_visit(&mut |name, tensor| {
        if let Some(g) = grads.get(name) {
            adam.update(name, tensor, g);
        }
    });
}

/// Shuffle pair indices into batches with pairwise-distinct target ids, so no
/// anchor meets its own positive as a within-batch negative. Remainders that
/// cannot form a valid triplet batch (fewer than 2 pairs) are dropped.
pub fn plan_pair_batches<R: rand::Rng>(
    target_ids: &[String],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "triplet batches need at least 2 pairs");
    let mut queue: Vec<usize> = (0..target_ids.len()).collect();
    for i in (1..queue.len()).rev() {
        let j = rng.random_range(0..=i);
        queue.swap(i, j);
    }
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut batch: Vec<usize> = Vec::with_capacity(batch_size);
        let mut used = std::collections::HashSet::new();
        let mut rest = Vec::new();
        for idx in queue.drain(..) {
            if batch.len() < batch_size && used.insert(target_ids[idx].as_str()) {
                batch.push(idx);
            } else {
                rest.push(idx);
            }
        }
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
        queue = rest;
    }
    batches
}

/// Stage-1 trainer: both encoders learn on image pairs.
pub struct Stage1Trainer {
    pub street: ViewEncoder,
    pub aerial: ViewEncoder,
    pub alpha: f32,
    adam_street: AdamState,
    adam_aerial: AdamState,
    steps: u64,
}

impl Stage1Trainer {
    pub fn new(street: ViewEncoder, aerial: ViewEncoder, lr: f32, alpha: f32) -> Self {
        Self {
            street,
            aerial,
            alpha,
            adam_street: AdamState::new(lr),
            adam_aerial: AdamState::new(lr),
            steps: 0,
        }
    }

    /// One optimizer step on a batch of (street frame, small aerial) images.
    pub fn step(&mut self, batch: &[(Tensor, Tensor)], plan: &TripletBatchPlan) -> Result<StepStats> {
        if batch.len() != plan.len() {
            return Err(Error::InvalidArgument("batch/plan size mismatch".into()));
        }
        let alpha = self.alpha;
        let (loss, street_grads, aerial_grads) = {
            let mut tapes = Vec::with_capacity(batch.len());
            let mut street_vals = Vec::with_capacity(batch.len());
            let mut aerial_vals = Vec::with_capacity(batch.len());
            for (street_img, aerial_img) in batch {
                let s_patches = patchify(street_img, self.street.config.patch_size)?;
                let a_patches = patchify(aerial_img, self.aerial.config.patch_size)?;
                let mut tape = Tape::new();
                let mut reg_s = ParamNodes::default();
                let mut reg_a = ParamNodes::default();
                let bs = self.street.bind(&mut tape, ParamMode::Trainable, &mut reg_s);
                let ba = self.aerial.bind(&mut tape, ParamMode::Trainable, &mut reg_a);
                let es = bs.embed_image(&mut tape, &s_patches);
                let ea = ba.embed_image(&mut tape, &a_patches);
                street_vals.push(tape.value(es).data().to_vec());
                aerial_vals.push(tape.value(ea).data().to_vec());
                tapes.push((tape, reg_s, reg_a, es, ea));
            }

            let (loss, ds, da) = symmetric_triplet_loss(&street_vals, &aerial_vals, alpha);

            let mut street_grads: HashMap<String, Vec<f32>> = HashMap::new();
            let mut aerial_grads: HashMap<String, Vec<f32>> = HashMap::new();
            for ((tape, reg_s, reg_a, es, ea), (gs, ga)) in
                tapes.iter_mut().zip(ds.into_iter().zip(da))
            {
                tape.backward_multi(&[(*es, gs), (*ea, ga)]);
                reg_s.grads_into(tape, &mut street_grads);
                reg_a.grads_into(tape, &mut aerial_grads);
            }
            (loss, street_grads, aerial_grads)
        };

        let grad_norm =
            (accumulate_grad_norm(&street_grads) + accumulate_grad_norm(&aerial_grads)).sqrt();
        self.adam_street.begin_step();
        apply_adam(&mut self.adam_street, &mut |f| self.street.visit_params_mut(f), &street_grads);
        self.adam_aerial.begin_step();
        apply_adam(&mut self.adam_aerial, &mut |f| self.aerial.visit_params_mut(f), &aerial_grads);
        self.steps += 1;
        Ok(StepStats { step: self.steps, loss, grad_norm, lr: self.adam_street.lr })
    }
}

/// Stage-2 trainer: encoders frozen, adapters learn on video pairs.
pub struct Stage2Trainer {
    pub street: UnifiedModel,
    pub aerial: UnifiedModel,
    pub alpha: f32,
    pub encoders_frozen: bool,
    adam_street: AdamState,
    adam_aerial: AdamState,
    steps: u64,
}

impl Stage2Trainer {
    pub fn new(street: UnifiedModel, aerial: UnifiedModel, schedule: &TrainSchedule) -> Self {
        Self {
            street,
            aerial,
            alpha: schedule.alpha,
            encoders_frozen: schedule.encoders_frozen(),
            adam_street: AdamState::new(schedule.lr),
            adam_aerial: AdamState::new(schedule.lr),
            steps: 0,
        }
    }

    /// One optimizer step on a batch of (video frames, large aerial) pairs.
    pub fn step(
        &mut self,
        batch: &[(Vec<Tensor>, Tensor)],
        plan: &TripletBatchPlan,
    ) -> Result<StepStats> {
        if !self.encoders_frozen {
            return Err(Error::Protocol(
                "stage-2 step with unfrozen encoders: refusing to train".into(),
            ));
        }
        if batch.len() != plan.len() {
            return Err(Error::InvalidArgument("batch/plan size mismatch".into()));
        }
        let alpha = self.alpha;
        let (loss, street_grads, aerial_grads) = {
            let mut tapes = Vec::with_capacity(batch.len());
            let mut street_vals = Vec::with_capacity(batch.len());
            let mut aerial_vals = Vec::with_capacity(batch.len());
            for (frames, large) in batch {
                let frame_patches = prepare_frames(&self.street.encoder, frames)?;
                let tiles = tile_large(large, self.aerial.encoder.config.image_size)?;
                let tile_patches = prepare_frames(&self.aerial.encoder, &tiles)?;

                let mut tape = Tape::new();
                let mut reg_s = ParamNodes::default();
                let mut reg_a = ParamNodes::default();
                let mut enc_reg = ParamNodes::default();
                let bes = self.street.encoder.bind(&mut tape, ParamMode::Frozen, &mut enc_reg);
                let bas = self.street.adapter.bind(&mut tape, ParamMode::Trainable, &mut reg_s);
                let bea = self.aerial.encoder.bind(&mut tape, ParamMode::Frozen, &mut enc_reg);
                let baa = self.aerial.adapter.bind(&mut tape, ParamMode::Trainable, &mut reg_a);
                let ev = embed_video(&mut tape, &bes, &bas, &frame_patches)?;
                let el = embed_video(&mut tape, &bea, &baa, &tile_patches)?;
                street_vals.push(tape.value(ev).data().to_vec());
                aerial_vals.push(tape.value(el).data().to_vec());
                tapes.push((tape, reg_s, reg_a, ev, el));
            }

            let (loss, ds, da) = symmetric_triplet_loss(&street_vals, &aerial_vals, alpha);

            let mut street_grads: HashMap<String, Vec<f32>> = HashMap::new();
            let mut aerial_grads: HashMap<String, Vec<f32>> = HashMap::new();
            for ((tape, reg_s, reg_a, ev, el), (gs, ga)) in
                tapes.iter_mut().zip(ds.into_iter().zip(da))
            {
                tape.backward_multi(&[(*ev, gs), (*el, ga)]);
                reg_s.grads_into(tape, &mut street_grads);
                reg_a.grads_into(tape, &mut aerial_grads);
            }
            (loss, street_grads, aerial_grads)
        };

        let grad_norm =
            (accumulate_grad_norm(&street_grads) + accumulate_grad_norm(&aerial_grads)).sqrt();
        self.adam_street.begin_step();
        apply_adam(
            &mut self.adam_street,
            &mut |f| self.street.adapter.visit_params_mut(f),
            &street_grads,
        );
        self.adam_aerial.begin_step();
        apply_adam(
            &mut self.adam_aerial,
            &mut |f| self.aerial.adapter.visit_params_mut(f),
            &aerial_grads,
        );
        self.steps += 1;
        Ok(StepStats { step: self.steps, loss, grad_norm, lr: self.adam_street.lr })
    }
}
