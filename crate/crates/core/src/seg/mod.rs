//! Segmentation side of the pipeline: mask sources, the alternating
//! segmentation/refinement loop, and copy-move-merge augmentation.

mod cmm;
mod degrade;
mod icp;
mod source;

pub use cmm::{
    apply_geometric, apply_photometric, cmm_compose, cmm_compose_permuted, write_cmm_batch, CmmConfig, CmmItem, CmmRecord, Geometric,
    Photometric,
};
pub use degrade::{degrade_mask, DegradeParams, Degraded, IOU_TOLERANCE};
pub use icp::{prior_renders, sdr_icp, IcpOutcome, IcpPhase, IcpSchedule};
pub use source::{external_path, sample_prior_perturbation, PerturbSampler, PriorResponse, SegmentationSource};
