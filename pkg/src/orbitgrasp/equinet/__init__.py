"""SE(3)-equivariant point UNet and its training loop."""
from .irreps import IrrepsSpec, cg_coefficients
from .layers import EquivariantLinear, TPConv, gate, sh_edge_attrs
from .training import (Checkpoint, TrainConfig, adam_step, bce_loss, cosine_lr, load_checkpoint,
                       load_training_data, save_checkpoint, train)
from .unet import EquiUNet, NetworkConfig, forward, fps_pool, prepare_neighborhood, unpool
