//! Round loops for FedMap, dense FedAvg and the federated-pruning baseline.
//!
//! Clients run in parallel but every reduction walks clients in id order, so
//! a run is a pure function of its config. The server and all clients hold
//! their own copy of the global model and mask. Every round each client
//! checks that its reconstruction matches the server's bit for bit.

use rayon::prelude::*;

use crate::aggregation::{fedavg_aggregate, sample_size_weights, ClientUpdate};
use crate::codec::{
    decode_frame, encode_frame, rfm, rwz, ByteLedger, Direction, FrameHeader, RoundBytes,
    SparsePayload, SERVER_ID,
};
use crate::config::{ExperimentConfig, Method};
use crate::data::{partition, synth_blobs};
use crate::error::{FedMapError, Result};
use crate::feddr::{apply_hybrid_config, reflect, FedDrClientState, FedDrSettings, RoundMode};
use crate::pruning::{apply_mask, prune, prune_within, PruneMask};
use crate::rng;
use crate::scalar::Scalar;
use crate::schedule::ScheduleSpec;
use crate::tensor_nn::{
    evaluate, train_local, Dataset, LayerValues, LocalTraining, Model, Proximal,
};

/// One row of the per-round metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub mean_client_accuracy: f64,
    pub remaining_params: usize,
    pub remaining_fraction: f64,
    pub uplink_bytes_per_client: u64,
    pub downlink_bytes: u64,
    pub cumulative_bytes: u64,
    pub prune_event: bool,
}

pub const METRICS_HEADER: &str = "round,global_test_accuracy,mean_client_accuracy,remaining_params,remaining_fraction,uplink_bytes_per_client,downlink_bytes,cumulative_bytes,prune_event";

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.global_test_accuracy,
            self.mean_client_accuracy,
            self.remaining_params,
            self.remaining_fraction,
            self.uplink_bytes_per_client,
            self.downlink_bytes,
            self.cumulative_bytes,
            u8::from(self.prune_event)
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "round": self.round,
            "global_test_accuracy": self.global_test_accuracy,
            "mean_client_accuracy": self.mean_client_accuracy,
            "remaining_params": self.remaining_params,
            "remaining_fraction": self.remaining_fraction,
            "uplink_bytes_per_client": self.uplink_bytes_per_client,
            "downlink_bytes": self.downlink_bytes,
            "cumulative_bytes": self.cumulative_bytes,
            "prune_event": self.prune_event,
        })
    }
}

/// Mask adopted at a prune event.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEvent {
    pub round: usize,
    pub mask: PruneMask,
    /// Whether the mask is contained in the one it replaced.
    pub subset_of_previous: bool,
    /// Positions kept now that the previous mask had removed.
    pub reactivated: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub metrics: Vec<RoundMetrics>,
    pub mask_chain: Vec<MaskEvent>,
    pub final_model: Model<T>,
    pub final_mask: PruneMask,
    pub bytes: Vec<RoundBytes>,
}

impl<T> RunOutput<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.global_test_accuracy)
    }
}

/// Everything derived from the seed before round 1.
#[derive(Debug, Clone)]
pub struct Environment<T> {
    pub parts: Vec<Dataset<T>>,
    pub test: Dataset<T>,
    pub init: Model<T>,
}

impl<T: Scalar> Environment<T> {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let split = synth_blobs::<T>(
            cfg.data.classes,
            cfg.data.dim,
            cfg.data.samples,
            cfg.data.spread,
            cfg.seed,
        )?;
        let parts = partition(&split.train, &cfg.partition_spec())?;
        let init = Model::mlp(
            &cfg.widths(),
            cfg.model.bias,
            &mut rng::stream(cfg.seed, "init"),
        )?;
        Ok(Self {
            parts,
            test: split.test,
            init,
        })
    }
}

/// Dispatches on `cfg.method`.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput<T>> {
    match cfg.method {
        Method::FedMap => run_fedmap(cfg),
        Method::FedAvgDense => run_fedavg_dense(cfg),
        Method::FederatedPruning => run_federated_pruning(cfg),
    }
}

/// FedMap: nested LAMP masks shared by every client, sparse payloads both ways.
/// With FedDR enabled the client update follows the configured hybrid; the
/// plain `FedDR` configuration disables pruning.
pub fn run_fedmap<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput<T>> {
    let env = Environment::build(cfg)?;
    let pruning = !cfg.feddr_enabled || cfg.feddr.config.uses_pruning();
    let feddr = cfg.feddr_enabled.then(|| cfg.feddr.clone());
    mask_sharing_loop(cfg, env, pruning, feddr)
}

/// Dense FedAvg: every weight travels every round.
pub fn run_fedavg_dense<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput<T>> {
    let env = Environment::build(cfg)?;
    mask_sharing_loop(cfg, env, false, None)
}

fn hyper(cfg: &ExperimentConfig) -> LocalTraining {
    LocalTraining {
        epochs: cfg.local_epochs,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
    }
}

fn round_u32(t: usize) -> Result<u32> {
    u32::try_from(t).map_err(|_| FedMapError::structural("round index exceeds u32"))
}

fn client_u32(id: usize) -> Result<u32> {
    u32::try_from(id)
        .ok()
        .filter(|&c| c != SERVER_ID)
        .ok_or_else(|| FedMapError::structural("client id out of range"))
}

/// Weight frame plus an optional dense bias frame.
#[derive(Debug, Clone)]
struct Message {
    weights: Vec<u8>,
    biases: Option<Vec<u8>>,
}

impl Message {
    fn encode<T: Scalar>(
        header: FrameHeader,
        weights: &[T],
        biases: &[T],
        bits: u32,
    ) -> Result<Self> {
        Ok(Self {
            weights: encode_frame(header, weights, bits)?,
            biases: if biases.is_empty() {
                None
            } else {
                Some(encode_frame(header, biases, bits)?)
            },
        })
    }

    /// Decodes both frames and checks their headers and lengths.
    fn decode<T: Scalar>(
        &self,
        expect: FrameHeader,
        k: usize,
        num_biases: usize,
        bits: u32,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let (h, w) = decode_frame::<T>(&self.weights, bits)?;
        check_header(h, expect, w.len(), k)?;
        let b = match &self.biases {
            Some(bytes) => {
                let (h, b) = decode_frame::<T>(bytes, bits)?;
                check_header(h, expect, b.len(), num_biases)?;
                b
            }
            None if num_biases == 0 => Vec::new(),
            None => return Err(FedMapError::Format("bias frame missing".into())),
        };
        Ok((w, b))
    }
}

fn check_header(got: FrameHeader, expect: FrameHeader, len: usize, want: usize) -> Result<()> {
    if got != expect {
        return Err(FedMapError::Format(format!(
            "frame header {got:?}, expected {expect:?}"
        )));
    }
    if len != want {
        return Err(FedMapError::Format(format!(
            "frame carries {len} values, expected {want}"
        )));
    }
    Ok(())
}

/// `model -= RFM(broadcast)`, biases densely.
fn apply_broadcast<T: Scalar>(
    model: &mut Model<T>,
    mask: &PruneMask,
    msg: &Message,
    round: u32,
    bits: u32,
) -> Result<()> {
    let expect = FrameHeader {
        round,
        client: SERVER_ID,
    };
    let (w, b) = msg.decode::<T>(expect, mask.count(), model.num_biases(), bits)?;
    model.sub_weights(&rfm(&SparsePayload::new(w), mask)?)?;
    if !b.is_empty() {
        model.sub_biases(&b)?;
    }
    if !model.all_finite() {
        return Err(FedMapError::Numeric {
            layer: 0,
            msg: "global model became non-finite".into(),
        });
    }
    Ok(())
}

struct ClientNode<T> {
    id: usize,
    data: Dataset<T>,
    global: Model<T>,
    mask: PruneMask,
    feddr: Option<FedDrClientState<T>>,
}

struct Reply {
    message: Message,
    num_samples: usize,
    accuracy: f64,
    mode: RoundMode,
}

struct RoundContext<'a, T> {
    round: usize,
    k: usize,
    events_so_far: usize,
    broadcast: Option<&'a Message>,
    server_global: &'a Model<T>,
    server_mask: &'a PruneMask,
    test: &'a Dataset<T>,
    hyper: &'a LocalTraining,
    feddr: Option<&'a FedDrSettings>,
    seed: u64,
    bits: u32,
}

impl<T: Scalar> ClientNode<T> {
    fn step(&mut self, ctx: &RoundContext<'_, T>) -> Result<Reply> {
        if let Some(b) = ctx.broadcast {
            apply_broadcast(
                &mut self.global,
                &self.mask,
                b,
                round_u32(ctx.round - 1)?,
                ctx.bits,
            )?;
        }
        if self.global != *ctx.server_global {
            return Err(FedMapError::structural(format!(
                "client {} reconstructed a global model that differs from the server's in round {}",
                self.id, ctx.round
            )));
        }
        if ctx.k < self.mask.count() {
            let (pruned, mask) = prune_within(&self.global, ctx.k, &self.mask)?;
            self.global = pruned;
            self.mask = mask;
        }
        if self.mask != *ctx.server_mask {
            return Err(FedMapError::structural(format!(
                "client {} derived a different mask in round {}",
                self.id, ctx.round
            )));
        }

        let mode = match (&mut self.feddr, ctx.feddr) {
            (Some(state), Some(settings)) => {
                apply_hybrid_config(settings, ctx.events_so_far, state)
            }
            _ => RoundMode::FedAvg,
        };
        let mut rng = rng::shuffle_stream(ctx.seed, self.id, ctx.round);
        let (local, delta) = match mode {
            RoundMode::FedAvg => {
                let local = train_local(
                    &self.global,
                    &self.mask,
                    &self.data,
                    ctx.hyper,
                    None,
                    &mut rng,
                )?;
                let delta = self.global.zip_map(&local, |g, l| g - l)?;
                (local, delta)
            }
            RoundMode::FedDr { .. } => {
                let state = self
                    .feddr
                    .as_mut()
                    .expect("FedDR mode implies client state");
                let y = state.update_intermediate(&self.global, &self.mask)?.clone();
                let prox = Proximal {
                    center: &y,
                    eta: state.eta,
                };
                let local =
                    train_local(&y, &self.mask, &self.data, ctx.hyper, Some(prox), &mut rng)?;
                state.record_local(&local);
                let x = reflect(&local, &y)?;
                let dx = state.feddr_delta(&x, &self.mask)?;
                // sent negated so the server's subtraction adds it
                (local, dx.map(|v| -v))
            }
        };
        let accuracy = evaluate(&local, ctx.test)?.accuracy;
        let payload = rwz(&delta.weight_values(), &self.mask)?;
        let header = FrameHeader {
            round: round_u32(ctx.round)?,
            client: client_u32(self.id)?,
        };
        let message = Message::encode(header, payload.values(), &delta.bias_values(), ctx.bits)?;
        Ok(Reply {
            message,
            num_samples: self.data.len(),
            accuracy,
            mode,
        })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Decodes client replies and averages weights and biases separately.
fn aggregate_replies<T: Scalar>(
    replies: &[Reply],
    round: usize,
    k: usize,
    num_biases: usize,
    weighted: bool,
    bits: u32,
) -> Result<(SparsePayload<T>, Option<SparsePayload<T>>)> {
    let mut weight_updates = Vec::with_capacity(replies.len());
    let mut bias_updates = Vec::with_capacity(replies.len());
    for (id, reply) in replies.iter().enumerate() {
        let expect = FrameHeader {
            round: round_u32(round)?,
            client: client_u32(id)?,
        };
        let (w, b) = reply.message.decode::<T>(expect, k, num_biases, bits)?;
        weight_updates.push(ClientUpdate {
            client_id: id,
            payload: SparsePayload::new(w),
            mask_id: round as u64,
            num_samples: reply.num_samples,
        });
        bias_updates.push(ClientUpdate {
            client_id: id,
            payload: SparsePayload::new(b),
            mask_id: round as u64,
            num_samples: reply.num_samples,
        });
    }
    let weights = if weighted {
        Some(sample_size_weights(&weight_updates)?)
    } else {
        None
    };
    let w = fedavg_aggregate(&weight_updates, weights.as_deref())?;
    let b = if num_biases > 0 {
        Some(fedavg_aggregate(&bias_updates, weights.as_deref())?)
    } else {
        None
    };
    Ok((w, b))
}

fn mask_event(round: usize, new: &PruneMask, old: &PruneMask) -> Result<MaskEvent> {
    let reactivated = new.support().filter(|&(l, i)| !old.get(l, i)).count();
    Ok(MaskEvent {
        round,
        mask: new.clone(),
        subset_of_previous: new.is_subset(old)?,
        reactivated,
    })
}

fn remaining(spec: &ScheduleSpec, pruning: bool, t: usize) -> usize {
    if pruning {
        spec.remaining_params(t)
    } else {
        spec.total_params
    }
}

fn mask_sharing_loop<T: Scalar>(
    cfg: &ExperimentConfig,
    env: Environment<T>,
    pruning: bool,
    feddr: Option<FedDrSettings>,
) -> Result<RunOutput<T>> {
    let bits = cfg.bits_per_param;
    let spec = cfg.schedule_spec();
    let hyper = hyper(cfg);
    let d = env.init.num_weights();
    let num_biases = env.init.num_biases();
    let sizes = env.init.layer_sizes();

    let mut nodes = env
        .parts
        .into_iter()
        .enumerate()
        .map(|(id, data)| {
            let state = feddr
                .as_ref()
                .map(|s| FedDrClientState::new(&env.init, s.alpha, s.eta))
                .transpose()?;
            Ok(ClientNode {
                id,
                data,
                global: env.init.clone(),
                mask: PruneMask::ones(&sizes),
                feddr: state,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut global = env.init.clone();
    let mut mask = PruneMask::ones(&sizes);
    let mut broadcast: Option<Message> = None;
    let mut ledger = ByteLedger::new(bits);
    let mut events = 0usize;
    let mut chain = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let k = remaining(&spec, pruning, t);
        // clients compare their reconstruction before pruning
        let reference = global.clone();
        let prune_event = k < mask.count();
        if prune_event {
            events += 1;
            let (pruned, next) = prune_within(&global, k, &mask)?;
            chain.push(mask_event(t, &next, &mask)?);
            global = pruned;
            mask = next;
        }

        let ctx = RoundContext {
            round: t,
            k,
            events_so_far: events,
            broadcast: broadcast.as_ref(),
            server_global: &reference,
            server_mask: &mask,
            test: &env.test,
            hyper: &hyper,
            feddr: feddr.as_ref(),
            seed: cfg.seed,
            bits,
        };
        let replies = nodes
            .par_iter_mut()
            .map(|n| n.step(&ctx))
            .collect::<Result<Vec<_>>>()?;

        let mode = replies[0].mode;
        if replies.iter().any(|r| r.mode != mode) {
            return Err(FedMapError::structural(
                "clients disagree on the round mode",
            ));
        }
        let weighted = matches!(mode, RoundMode::FedDr { weighted: true });
        let (w, b) = aggregate_replies::<T>(&replies, t, k, num_biases, weighted, bits)?;
        let header = FrameHeader {
            round: round_u32(t)?,
            client: SERVER_ID,
        };
        let empty: Vec<T> = Vec::new();
        let msg = Message::encode(
            header,
            w.values(),
            b.as_ref().map_or(&empty[..], |p| p.values()),
            bits,
        )?;
        apply_broadcast(&mut global, &mask, &msg, header.round, bits)?;
        broadcast = Some(msg);

        for _ in 0..cfg.clients {
            ledger.account(k + num_biases, Direction::Up, false, d);
        }
        for _ in 0..cfg.clients {
            ledger.account(k + num_biases, Direction::Down, false, d);
        }
        let bytes = ledger.close_round();
        metrics.push(RoundMetrics {
            round: t,
            global_test_accuracy: evaluate(&global, &env.test)?.accuracy,
            mean_client_accuracy: mean(replies.iter().map(|r| r.accuracy)),
            remaining_params: k,
            remaining_fraction: k as f64 / d as f64,
            uplink_bytes_per_client: bytes.uplink_per_client,
            downlink_bytes: bytes.downlink,
            cumulative_bytes: bytes.cumulative,
            prune_event,
        });
    }

    Ok(RunOutput {
        metrics,
        mask_chain: chain,
        final_model: global,
        final_mask: mask,
        bytes: ledger.history().to_vec(),
    })
}

/// Copy of `template` holding the given weights and biases.
fn with_values<T: Scalar>(template: &Model<T>, weights: &LayerValues<T>, biases: &[T]) -> Model<T> {
    let mut model = template.clone();
    let mut bias = biases.iter();
    for (layer, w) in model.layers_mut().iter_mut().zip(weights.layers()) {
        layer.weight.values_mut().copy_from_slice(w);
        if let Some(b) = layer.bias.as_mut() {
            for (v, &x) in b.values_mut().iter_mut().zip(&mut bias) {
                *v = x;
            }
        }
    }
    model
}

/// Baseline: the server keeps a dense shadow model, re-ranks every position
/// with LAMP each `s` rounds or whenever `K` changes, and ships the masked
/// model plus a bitmap. Previously pruned positions keep their stale values
/// and can come back.
pub fn run_federated_pruning<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput<T>> {
    let env = Environment::<T>::build(cfg)?;
    let bits = cfg.bits_per_param;
    let spec = cfg.schedule_spec();
    let hyper = hyper(cfg);
    let d = env.init.num_weights();
    let num_biases = env.init.num_biases();
    let sizes = env.init.layer_sizes();

    let mut shadow = env.init.clone();
    let mut mask = PruneMask::ones(&sizes);
    let mut ledger = ByteLedger::new(bits);
    let mut chain = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let k = spec.remaining_params(t);
        let rerank = k != mask.count() || t % cfg.schedule.interval == 0;
        if rerank {
            let (_, next) = prune(&shadow, k)?;
            chain.push(mask_event(t, &next, &mask)?);
            mask = next;
        }
        let deployed = apply_mask(&shadow, &mask)?;
        let header = FrameHeader {
            round: round_u32(t)?,
            client: SERVER_ID,
        };
        let down = Message::encode(
            header,
            rwz(&deployed.weight_values(), &mask)?.values(),
            &deployed.bias_values(),
            bits,
        )?;
        let mask_wire = mask.to_bytes();

        let replies = env
            .parts
            .par_iter()
            .enumerate()
            .map(|(id, data)| -> Result<Reply> {
                let received = PruneMask::from_reader(&mask_wire[..])?;
                let (w, b) = down.decode::<T>(header, received.count(), num_biases, bits)?;
                let model = with_values(&env.init, &rfm(&SparsePayload::new(w), &received)?, &b);
                let mut rng = rng::shuffle_stream(cfg.seed, id, t);
                let local = train_local(&model, &received, data, &hyper, None, &mut rng)?;
                let delta = model.zip_map(&local, |g, l| g - l)?;
                let up = FrameHeader {
                    round: header.round,
                    client: client_u32(id)?,
                };
                Ok(Reply {
                    message: Message::encode(
                        up,
                        rwz(&delta.weight_values(), &received)?.values(),
                        &delta.bias_values(),
                        bits,
                    )?,
                    num_samples: data.len(),
                    accuracy: evaluate(&local, &env.test)?.accuracy,
                    mode: RoundMode::FedAvg,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let (w, b) = aggregate_replies::<T>(&replies, t, k, num_biases, false, bits)?;
        shadow.sub_weights(&rfm(&w, &mask)?)?;
        if let Some(b) = b {
            shadow.sub_biases(b.values())?;
        }

        for _ in 0..cfg.clients {
            ledger.account(k + num_biases, Direction::Up, false, d);
        }
        for _ in 0..cfg.clients {
            ledger.account(k + num_biases, Direction::Down, true, d);
        }
        let bytes = ledger.close_round();
        metrics.push(RoundMetrics {
            round: t,
            global_test_accuracy: evaluate(&apply_mask(&shadow, &mask)?, &env.test)?.accuracy,
            mean_client_accuracy: mean(replies.iter().map(|r| r.accuracy)),
            remaining_params: k,
            remaining_fraction: k as f64 / d as f64,
            uplink_bytes_per_client: bytes.uplink_per_client,
            downlink_bytes: bytes.downlink,
            cumulative_bytes: bytes.cumulative,
            prune_event: rerank,
        });
    }

    Ok(RunOutput {
        metrics,
        mask_chain: chain,
        final_model: apply_mask(&shadow, &mask)?,
        final_mask: mask,
        bytes: ledger.history().to_vec(),
    })
}
