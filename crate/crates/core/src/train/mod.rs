//! Optimization and the training/evaluation harness.
//!
//! A run directory holds `config.txt` (model and training keys),
//! `report.csv` (one row per finished epoch) and checkpoint pairs
//! `model_eNNNN.bin` / `optim_eNNNN.bin`.

mod checkpoint;
mod data;
mod optim;
mod report;
mod schedule;
mod trainer;

pub use checkpoint::{
    load_checkpoint, load_optimizer, save_checkpoint, save_optimizer, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use data::{DataConfig, Sample, Split};
pub use optim::{AdamW, AdamWConfig};
pub use report::{EpochRecord, TrainReport, REPORT_HEADER};
pub use schedule::{cosine_lr, warmup_factor};
pub use trainer::{
    eval_plan, evaluate, evaluate_checkpoint, load_run_config, resume, sample_plan, train,
    EvalReport, EvalSample, TrainConfig, Trainer,
};
