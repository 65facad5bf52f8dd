import torch

from mnclglf.nets import ModelConfig, build_online
from mnclglf.seeding import generator

TINY = ModelConfig(backbone="toy-cnn", toy_widths=(4, 6, 8), proj_hidden=8, proj_dim=8, pred_hidden=4)


def tiny_online(seed=0, dtype=torch.float64, cfg=TINY):
    return build_online(cfg, generator(seed, "init"), 3, dtype)


def count_params(module):
    return sum(p.numel() for p in module.parameters())
