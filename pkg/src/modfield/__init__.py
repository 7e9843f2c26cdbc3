"""Tiled neural fields with amplitude-modulated sine networks.

A synthesis MLP with sine activations maps local tile coordinates to signal
values; a ReLU modulation MLP maps a per-tile latent code to the amplitude
of every sine layer.  Signals are covered by overlapping tiles whose
predictions blend n-linearly, and everything trains by hand-derived
backpropagation over Adam.
"""

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    ModfieldError,
    NumericalError,
)
from .nn import (
    Activation,
    AdamState,
    DenseLayer,
    RngStream,
    activate,
    activate_backward,
    adam_step,
    finite_difference_grad,
    init_relu_layer,
    init_siren_first,
    init_siren_hidden,
    linear_forward,
)
from .model import (
    ModelConfig,
    ModelGrads,
    ModelParams,
    ModulationSignals,
    concat_first_layer_preact,
    fourier_encode,
    init_model,
    model_backward,
    model_forward,
    model_forward_tape,
    modulator_forward,
    synthesizer_forward,
)
from .tiling import (
    Codebook,
    TileGrid,
    TileRef,
    blend_weights,
    blended_decode,
    decode_points,
    tiles_containing,
    to_local,
)
from .signals import (
    Box,
    PerlinSpec,
    SampledSignal,
    Sphere,
    Torus,
    Union,
    bilinear_resample,
    chamfer_distance,
    chamfer_distance_brute,
    from_dense,
    load_image,
    perlin_grid,
    pixel_center_grid,
    sample_sdf_points,
    save_image,
    sdf_eval,
    sdf_grid_metrics,
    sdf_signal,
)
from .training import (
    EncoderConfig,
    TileEncoderParams,
    TrainConfig,
    TrainReport,
    encode_signal,
    infer_latents,
    init_latents,
    psnr,
    reconstruction_loss,
    train_autodecoder,
    train_autoencoder,
)

__version__ = "0.1.0"
