from .tensor import (
    Tensor, add, mul, div, matmul, exp, log, sqrt, sin, cos, softplus,
    sigmoid, relu, softmax, reshape, concat, take, tsum, tmean, square,
    grid_sample_2d, grid_sample_3d, transpose_2d, scatter_rows, no_grad,
)
from .convs import (
    conv2d, conv3d, downsample2x_2d, upsample2x_nearest_2d,
    upsample2x_trilinear_3d, identity_conv_weight,
)
from .nn import Mlp, glorot_uniform
from .optim import Adam
from .gradcheck import grad_check, grad_check_mlp
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError
