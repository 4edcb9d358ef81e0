//! Training loops: flow pretraining, adversarial defrontalization training
//! and augmented embedding training.

mod defront;
mod embed;
mod flows;
mod metrics;
mod optim;
mod samples;

pub use defront::{
    epoch_checkpoint_path, train_defront, DefrontTrainConfig, DefrontTrainReport, DefrontTrainer,
    DISC_SECTION,
};
pub use embed::{
    accumulated_gradients, train_embeddings, EmbedModel, EmbedTrainConfig, EmbedTrainResult,
    EpochSummary, BACKBONE_SECTION, HEAD_SECTION,
};
pub use flows::{
    flow_losses, mean_photometric, pretrain_flows, smoothness_penalty, FlowLosses, FlowPair,
    FlowPretrainConfig, FlowPretrainReport, BWD_SECTION, FWD_SECTION,
};
pub use metrics::{MetricsLog, StepMetrics};
pub use optim::{accumulate, collect_grads, Adam, AdamConfig, Grads, Sgd, SgdConfig};
pub use samples::{
    assert_disjoint, epoch_order, pair_batch, pair_half_side, prepare_face, prepare_faces,
    prepare_pair, prepare_pairs, pyramid, FaceSample, PairBatch, PairSample, MASK_LEVEL,
};

/// `lr0 · (1 - step / total_steps)^power`, clamped to `[0, lr0]`.
pub fn poly_lr(lr0: f64, step: u64, total_steps: u64, power: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    lr0 * (1.0 - frac).powf(power)
}
