"""Pretrained anchors, zero-shot heads and single finetuning runs."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import analysis, net
from .data import SplitBundle, class_priors, probe_set
from .net import LossKind, NetworkSpec, ParamSet
from .param import MethodKind
from .tensor import stream
from .trainer import FinetuneConfig, TrainResult, train


@dataclass(frozen=True)
class PretrainConfig:
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 32
    activation: str = "tanh"
    temperature: float = 0.07
    iterations: int = 1500
    lr: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 64
    probe_per_class: int = 5


def network_specs(bundle: SplitBundle, cfg: PretrainConfig) -> tuple[NetworkSpec, NetworkSpec]:
    """(pretraining spec, downstream spec); they differ only in the class count."""
    d = bundle.id_train.x.shape[1]
    common = dict(input_dim=d, hidden_dims=cfg.hidden_dims, feature_dim=cfg.feature_dim,
                  activation=cfg.activation, temperature=cfg.temperature)
    return (NetworkSpec(n_classes=max(bundle.pretrain_classes, bundle.n_classes), **common),
            NetworkSpec(n_classes=bundle.n_classes, **common))


def pretrain(bundle: SplitBundle, cfg: PretrainConfig, seed: int) -> ParamSet:
    """Full training from scratch on the pretraining split."""
    pre_spec, _ = network_specs(bundle, cfg)
    init = net.init_params(pre_spec, stream(seed, "init", "pretrain"))
    ft = FinetuneConfig(MethodKind("full"), iterations=cfg.iterations, lr=cfg.lr,
                        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                        warmup_fraction=0.05, seed=seed)
    return train(ft, init, bundle.pretrain.x, bundle.pretrain.y).params


def zero_shot(pretrained: ParamSet, bundle: SplitBundle, cfg: PretrainConfig, seed: int) -> ParamSet:
    """Pretrained extractor with prototypes set to class-mean features of a small probe."""
    _, spec = network_specs(bundle, cfg)
    px, py = probe_set(bundle, cfg.probe_per_class, seed)
    return net.with_head(pretrained, spec, net.class_mean_prototypes(pretrained, px, py, spec.n_classes))


def finetune(anchor: ParamSet, bundle: SplitBundle, config: FinetuneConfig,
             logit_adjusted: bool = False) -> TrainResult:
    if logit_adjusted:
        priors = class_priors(bundle.id_train, bundle.n_classes)
        config = replace(config, loss=LossKind.logit_adjusted(priors))
    return train(config, anchor, bundle.id_train.x, bundle.id_train.y)


def model_soup(anchor: ParamSet, bundle: SplitBundle, config: FinetuneConfig,
               n_models: int = 5, logit_adjusted: bool = False) -> tuple[ParamSet, list[TrainResult]]:
    """Average of ``n_models`` full finetunes that differ only in data order."""
    runs = []
    for j in range(n_models):
        cfg = replace(config, method=MethodKind("full"), seed=config.seed * 1000 + j)
        runs.append(finetune(anchor, bundle, cfg, logit_adjusted))
    return analysis.soup([r.params for r in runs]), runs


def seed_means(rows: list[dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows]))
