"""Volumetric cross-modality synthesis with a 2.5D conditional diffusion model.

Slice-by-slice axial sampling builds an initial volume; a short re-noise /
denoise pass over the coronal and sagittal planes repairs cross-slice
artifacts; the three plane estimates are fused by voxelwise averaging.
"""

from .denoiser import (
    AnalyticGaussianDenoiser,
    Denoiser,
    DenoiserParams,
    GaussianTargetModel,
    LearnedDenoiser,
    NetworkConfig,
    TrainingConfig,
    build_slice_dataset,
    init_params,
    load_checkpoint,
    network_forward,
    normalize_condition,
    save_checkpoint,
    train,
    training_loss,
)
from .diffusion_core import (
    NoiseSchedule,
    build_linear_schedule,
    forward_diffuse,
    posterior_std,
    reverse_step,
    transition_step,
)
from .errors import DivergenceError, NonFiniteSampleError
from .metrics import plane_metrics, psnr, ssim, threshold_mask
from .phantom import (
    EchoDecayMeanMap,
    EchoTrain,
    TissueField,
    fit_echo_decay,
    generate_pair,
    inject_slice_artifacts,
    make_tissue_field,
    render_condition,
    render_target,
    split_dataset,
)
from .pipeline import (
    PipelineConfig,
    SynthesisResult,
    initial_synthesis,
    refine_plane,
    synthesize_volume,
)
from .volume import (
    PlaneAxis,
    PlaneSlice,
    Volume,
    assemble,
    extract_slice,
    fuse,
    load_volume,
    pad_offsets,
    pad_to_cube,
    save_volume,
)

__version__ = "0.1.0"
