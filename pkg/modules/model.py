"""
TAGS network: multi-scale encoder, per-scale heads, consistency projections
"""

import math
from collections import OrderedDict
from typing import Dict, List, Tuple

import torch
import torch.nn as nn

from core.config import EncoderConfig
from modules.encoder import MultiScaleEncoder, PoolingConfig, scale_length
from modules.heads import ClassificationHead, MaskHead, ScaleOutputs, _as_channels, _conv

DTYPE = torch.float64


class ConsistencyProjections(nn.Module):
    """E -> (E_p, E_m): two 1-D conv projections to a common width"""

    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.clf = _conv(width, out_dim)
        self.mask = _conv(width, out_dim)

    def forward(self, embedding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = _as_channels(embedding)
        return self.clf(x).squeeze(0).t(), self.mask(x).squeeze(0).t()


class TagsModel(nn.Module):
    """Complete detector for videos of T snippets with feature dimension in_dim"""

    def __init__(self, in_dim: int, num_classes: int, T: int, config: EncoderConfig = None):
        super().__init__()
        config = config or EncoderConfig()
        config.validate()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.T = T
        self.scales = tuple(config.scales)
        width = config.resolved_width(in_dim)
        pooling = {int(s): PoolingConfig(*cfg) for s, cfg in config.pooling.items()}
        self.mask_design = config.mask_design
        self.encoder = MultiScaleEncoder(in_dim, width, config.num_heads, self.scales, pooling, config.positional)
        self.cls_heads = nn.ModuleDict({f"s{s}": ClassificationHead(width, num_classes) for s in self.scales})
        self.mask_heads = nn.ModuleDict({
            f"s{s}": MaskHead(width, scale_length(T, s), actionness=self.actionness) for s in self.scales
        })
        self.projections = ConsistencyProjections(width, config.consistency_dim or width)
        self.to(DTYPE)

    def forward(self, features: torch.Tensor) -> List[ScaleOutputs]:
        if features.shape != (self.T, self.in_dim):
            raise ValueError(f"features {tuple(features.shape)} do not match model ({self.T}, {self.in_dim})")
        embeddings = self.encoder(features.to(DTYPE))
        outputs = []
        for s in self.scales:
            E = embeddings[s]
            P, R = self.cls_heads[f"s{s}"](E)
            M = self.mask_heads[f"s{s}"](E)
            outputs.append(ScaleOutputs(s, P, R, M, E))
        return outputs

    def named_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        """ModelParams: every learnable tensor under a stable unique name"""
        return OrderedDict(self.named_parameters())

    @property
    def actionness(self) -> bool:
        return self.mask_design == "actionness"


def init_parameters(model: nn.Module, generator: torch.Generator) -> nn.Module:
    """Glorot-uniform weights, zero biases, unit layer-norm gains"""
    with torch.no_grad():
        for name, param in model.named_parameters():
            owner = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
            leaf = name.rsplit(".", 1)[-1]
            if isinstance(owner, nn.LayerNorm):
                param.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                param.zero_()
            else:
                fan_in, fan_out = _fans(param)
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                param.copy_(torch.rand(param.shape, generator=generator, dtype=param.dtype) * 2 * bound - bound)
    return model


def _fans(param: torch.Tensor) -> Tuple[int, int]:
    if param.dim() == 2:
        # Linear weights are out x in; attention projections are in x out
        return param.shape[1], param.shape[0]
    if param.dim() == 3:
        receptive = param.shape[2]
        return param.shape[1] * receptive, param.shape[0] * receptive
    return param.numel(), param.numel()


def build_model(in_dim: int, num_classes: int, T: int, config: EncoderConfig, seed: int) -> TagsModel:
    """Construct and deterministically initialise a model"""
    generator = torch.Generator().manual_seed(seed)
    return init_parameters(TagsModel(in_dim, num_classes, T, config), generator)


def forward_numpy(model: TagsModel, values) -> Dict[int, Dict[str, "object"]]:
    """Detached numpy P, M, E per scale"""
    with torch.no_grad():
        outputs = model(torch.as_tensor(values, dtype=DTYPE))
    return {o.scale: {"P": o.P.numpy(), "M": o.M.numpy(), "E": o.E.numpy()} for o in outputs}
