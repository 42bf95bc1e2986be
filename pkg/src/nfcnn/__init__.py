"""nfcnn: a two-branch, multi-stage convolutional image denoiser.

Each stage predicts both the clean image and the residual noise from its
input; between stages a fusion block mixes the original noisy image with
the two predictions into the next stage's input. Everything runs on a
small numpy autodiff engine whose convolution kernels are numba-compiled
when available (``NFCNN_BACKEND=numpy`` forces the pure-numpy path).
"""

__version__ = "0.1.0"

from .backend import backend_name, set_backend
from .blocks import ConvStackSpec, FusionBlockParams
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    NoiseSpec,
    SamplePair,
    add_awgn,
    augment_blur,
    augment_flip,
    batch_iter,
    load_image,
    random_crop,
    save_image,
)
from .inference import denoise_array, evaluate_dataset
from .metrics import MetricReport, mse, psnr
from .model import (
    ModelConfig,
    Parameters,
    StageOutput,
    count_parameters,
    model_forward,
    model_init,
    stage_forward,
)
from .tensor import (
    Tensor,
    add,
    backward,
    batch_norm2d,
    concat_channels,
    conv2d,
    dropout,
    leaky_relu,
    mean_of_abs,
    mean_of_squares,
    replication_pad2d,
    scale,
    sub,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    fit,
    loss_clean,
    loss_noise,
    lr_at_step,
    run_grad_check_suite,
    total_loss,
    train_step,
)
