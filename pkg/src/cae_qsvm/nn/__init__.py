"""Hand-differentiated layers, Adam and a finite-difference checker."""

from .functional import (
    activation_backward,
    activation_forward,
    adaptive_avgpool2d_backward,
    adaptive_avgpool2d_forward,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    conv_transpose2d_backward,
    conv_transpose2d_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    mse_loss,
)
from .gradcheck import finite_diff_check
from .layers import (
    Activation,
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Layer,
    MaxPool2d,
    Sequential,
)
from .optim import OptimizerState, adam_update
