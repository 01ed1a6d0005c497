"""Kalman-smoothed linear deformable convolution and cross attention in UNet++."""

from .attention import CrossAttention, ca_forward
from .backbone import BackboneConfig, UNetPlusPlus
from .ld import LDBlock, LDConfig, ld_forward
from .losses import LossWeights, cl_dice, training_loss
from .sampling import KernelSpec, OffsetField, kalman_accumulate, kalman_gain_sequence
from .tiling import extract_patches, make_weight_map, stitch
from .topology import PersistenceDiagram, compute_diagram, modified_hausdorff, topo_loss

__version__ = "0.1.0"
