"""Build a trained toy system (data, frozen backbone, heads) from a RunConfig."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from . import data, model
from .attacks import derive_seed
from .config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class System:
    dataset: data.Dataset
    train: data.Dataset
    test: data.Dataset
    bundle: model.ModelBundle
    pretrain_log: list[float]

    @property
    def train_ids(self) -> set[int]:
        return {s.slide_id for s in self.train}


def model_dims(cfg: RunConfig) -> model.ModelDims:
    m = cfg.model
    return model.ModelDims(
        patch_shape=tuple(cfg.data.patch_shape),
        enc_hidden=m.enc_hidden,
        feature_dim=m.feature_dim,
        attn_hidden=m.attn_hidden,
        rep_dim=m.rep_dim,
        head_hidden=m.head_hidden,
    )


def pretrain_backbone(cfg: RunConfig, train: data.Dataset) -> model.TrainResult:
    m = cfg.model
    bundle = model.init_bundle(model_dims(cfg), train.task_classes, cfg.master_seed)
    return model.pretrain(
        bundle, train.slides, list(m.pretrain_tasks), m.pretrain_epochs, m.lr, cfg.master_seed, m.batch_size
    )


def fit_heads(cfg: RunConfig, bundle: model.ModelBundle, train: data.Dataset) -> model.ModelBundle:
    """Replace every evaluated task head by one trained on frozen representations."""
    m = cfg.model
    reps = model.slide_representations(bundle, train.slides)
    heads = dict(bundle.heads)
    for i, task in enumerate(sorted(cfg.eval.tasks)):
        heads[task] = model.train_head(
            bundle,
            train.slides,
            task,
            m.head_epochs,
            m.lr,
            derive_seed(cfg.master_seed, 1, i),
            m.batch_size,
            n_classes=train.task_classes[task],
            reps=reps,
        )
    out = model.ModelBundle(bundle.encoder, bundle.aggregator, heads, bundle.patch_shape, frozen=True)
    return out


def build_system(cfg: RunConfig) -> System:
    dataset = data.generate_dataset(cfg.gen_config())
    train, test = data.split(dataset, cfg.model.train_fraction, cfg.master_seed)
    result = pretrain_backbone(cfg, train)
    logger.info("pretrain final loss %.5f", result.loss_log[-1] if result.loss_log else float("nan"))
    bundle = fit_heads(cfg, result.bundle, train)
    return System(dataset, train, test, bundle, result.loss_log)
