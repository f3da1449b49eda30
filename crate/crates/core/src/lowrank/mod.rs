//! LoRA and intrinsic-dimension fine-tuning, their kernels, and Monte-Carlo
//! checks of Johnson–Lindenstrauss inner-product preservation.
//!
//! LoRA follows the `B = 0`, Gaussian `A` convention, under which the
//! gradient with respect to `A` vanishes at attachment and the kernel over the
//! adapter coordinates is `dHdHᵀ ⊙ (XAᵀAXᵀ)`.

mod intrinsic;
mod jl;
mod lora;

pub use intrinsic::{
    id_gram, intrinsic_attach, orthonormal_columns, IntrinsicNetwork, ProjectionConfig,
};
pub use jl::{
    jl_bound, jl_preservation_stats, jl_rank, jl_union_bound, random_unit_pairs, JlStats,
};
pub use lora::{
    block_gram, layer_factors, lora_attach, lora_gram, lora_kernel_comparison, lora_kernel_formula,
    measure_c, write_lora_csv, AInit, Adapter, LoraComparison, LoraConfig, LoraNetwork,
    LORA_CSV_HEADER,
};
