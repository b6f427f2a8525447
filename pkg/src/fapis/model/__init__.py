from .network import ModelConfig, init_params, forward_dense, backward_dense, param_shapes
from .ops import (
    channelwise_modulate,
    masked_average_pool,
    pam_fuse,
    simnet_forward,
)
from .pipeline import (
    DensePredictions,
    InstancePrediction,
    forward,
    importance_fraction,
    loss_and_grads,
    train_step,
)
