from .config import MODES, EncoderConfig, LossWeights, MafaConfig, NetConfig, desk_config, load_net_config
from .losses import loss_3dmm, loss_consistency, loss_landmark, loss_landmark_geometry, loss_total
from .model import ForwardResult, SynergyNet, synergy_forward

__all__ = [
    "MODES", "EncoderConfig", "ForwardResult", "LossWeights", "MafaConfig", "NetConfig", "SynergyNet",
    "load_net_config", "loss_3dmm", "loss_consistency", "loss_landmark", "loss_landmark_geometry",
    "loss_total", "synergy_forward",
]
