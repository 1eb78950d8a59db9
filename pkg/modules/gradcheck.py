"""
Finite-difference verification of the TAGS gradients

Every loss term and the total are differentiated analytically and compared
with 64-bit central differences along random directions and single
coordinates of a small randomly initialised model. The L_pp quality
weights stay at their values for the unshifted parameters.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from core.config import EncoderConfig
from core.status_bar import StatusBar
from modules.labels import assign_all_scales
from modules.losses import TERMS, LossWeights, Quality, total_loss
from modules.model import DTYPE, TagsModel, build_model
from modules.synthetic import SyntheticSpec, generate_synthetic
from modules.training import backward

logger = logging.getLogger(f"tags.{__name__}")

CHECKED = TERMS + ("total",)
KINK_TOLERANCE = 1e-8


@dataclass
class GradCheckSettings:
    """Problem size and finite-difference parameters"""
    configs: int = 20
    T: int = 16
    K: int = 3
    scales: Tuple[int, ...] = (1, 2)
    dim: int = 8
    num_heads: int = 2
    videos: int = 2
    directions: int = 2
    coordinates: int = 2
    step: float = 1e-5
    tolerance: float = 1e-4
    floor: float = 1e-6
    retries: int = 5
    topk: int = 6
    positional: bool = False
    mask_design: str = "global"


@dataclass
class TermResult:
    term: str
    max_rel_error: float = 0.0
    checks: int = 0
    skipped: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.checks > 0 and self.max_rel_error <= tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _batch_terms(model: TagsModel, features: Sequence[torch.Tensor], targets, weights: LossWeights,
                 quality: Optional[List[Quality]] = None) -> Tuple[Dict[str, torch.Tensor], List[Quality]]:
    """Each term summed over scales and averaged over the batch, plus the L_pp weights used"""
    sums: Dict[str, torch.Tensor] = {}
    used: List[Quality] = []
    for i, (x, tgt) in enumerate(zip(features, targets)):
        br = total_loss(model(x), tgt, weights, model.projections, None if quality is None else quality[i])
        used.append(br.quality)
        for name in TERMS:
            term = sum(scale_terms[name] for scale_terms in br.per_scale.values())
            sums[name] = term if name not in sums else sums[name] + term
        sums["total"] = br.total if "total" not in sums else sums["total"] + br.total
    return {k: v / len(features) for k, v in sums.items()}, used


class _Shifted:
    """Evaluates every term at parameters shifted along a direction"""

    def __init__(self, model: TagsModel, evaluate: Callable[[], Dict[str, torch.Tensor]]):
        self.params = model.named_tensors()
        self.base = {n: p.detach().clone() for n, p in self.params.items()}
        self.evaluate = evaluate

    def at(self, direction: Dict[str, torch.Tensor], h: float) -> Dict[str, float]:
        with torch.no_grad():
            for name, d in direction.items():
                self.params[name].copy_(self.base[name] + h * d)
            values = {k: float(v) for k, v in self.evaluate().items()}
            for name, p in self.params.items():
                p.copy_(self.base[name])
        return values


def _random_direction(params, rng: np.random.Generator) -> Dict[str, torch.Tensor]:
    raw = {n: torch.from_numpy(rng.standard_normal(tuple(p.shape))) for n, p in params.items()}
    norm = float(torch.sqrt(sum((d * d).sum() for d in raw.values())))
    return {n: d / norm for n, d in raw.items()}


def _coordinate(params, rng: np.random.Generator) -> Dict[str, torch.Tensor]:
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    flat = int(rng.integers(0, sizes.sum()))
    owner = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
    offset = flat - int(np.concatenate([[0], np.cumsum(sizes)])[owner])
    d = torch.zeros(params[names[owner]].numel(), dtype=DTYPE)
    d[offset] = 1.0
    return {names[owner]: d.reshape(params[names[owner]].shape)}


def _check_config(index: int, settings: GradCheckSettings, seed: int,
                  results: Dict[str, TermResult], rng: np.random.Generator):
    spec = SyntheticSpec(num_videos=settings.videos, K=settings.K, T=settings.T, dim=settings.dim,
                         min_len=2, max_len=5, max_instances=2, min_gap=1, seed=seed + index)
    sequences, annotations = generate_synthetic(spec)
    classes = annotations.classes
    encoder = EncoderConfig(scales=settings.scales, num_heads=settings.num_heads,
                            positional=settings.positional, mask_design=settings.mask_design)
    model = build_model(settings.dim, settings.K, settings.T, encoder, seed + index)
    weights = replace(LossWeights(), topk=settings.topk)
    features = [torch.as_tensor(s.values, dtype=DTYPE) for s in sequences]
    targets = [assign_all_scales(annotations.videos[s.video_id], settings.T, model.scales, classes,
                                 settings.mask_design) for s in sequences]

    terms, quality = _batch_terms(model, features, targets, weights)

    def evaluate():
        return _batch_terms(model, features, targets, weights, quality)[0]

    params = model.named_tensors()
    grads = {name: backward(terms[name], params, retain_graph=True) for name in CHECKED}
    centre = {k: float(v) for k, v in terms.items()}
    shifted = _Shifted(model, evaluate)
    h = settings.step

    plans = [("direction", _random_direction)] * settings.directions + \
            [("coordinate", _coordinate)] * settings.coordinates
    for kind, draw in plans:
        for _ in range(settings.retries):
            d = draw(params, rng)
            plus, minus = shifted.at(d, h), shifted.at(d, -h)
            # Second differences far above h^2 scale mean the step crossed a kink or a jump
            kinks = [k for k in CHECKED
                     if abs(plus[k] - 2.0 * centre[k] + minus[k]) > KINK_TOLERANCE * max(1.0, abs(centre[k]))]
            if not kinks:
                break
            for k in kinks:
                results[k].skipped += 1
            logger.debug("config %d: %s crosses a kink in %s, redrawing", index, kind, kinks)
        else:
            continue
        for k in CHECKED:
            numeric = (plus[k] - minus[k]) / (2 * h)
            analytic = float(sum((grads[k][n] * v).sum() for n, v in d.items()))
            err = relative_error(analytic, numeric, settings.floor)
            res = results[k]
            res.checks += 1
            res.max_rel_error = max(res.max_rel_error, err)


def gradient_check(seed: int = 7, settings: Optional[GradCheckSettings] = None,
                   status: Optional[StatusBar] = None) -> Dict[str, TermResult]:
    """Max relative error per term over settings.configs random problems"""
    settings = settings or GradCheckSettings()
    status = status or StatusBar("GRADCHECK")
    rng = np.random.default_rng(seed)
    results = {k: TermResult(k) for k in CHECKED}
    for i in range(settings.configs):
        _check_config(i, settings, seed, results, rng)
        status.set_progress((i + 1) / settings.configs, "gradient check")
    for k, res in results.items():
        status.debug(f"{k}: max rel err {res.max_rel_error:.3e} over {res.checks} checks "
                     f"({res.skipped} redrawn)")
    return results


def all_passed(results: Dict[str, TermResult], tolerance: float = 1e-4) -> bool:
    return all(r.passed(tolerance) for r in results.values())
