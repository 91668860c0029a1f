"""scikit-learn style front end: fit on visual sentences, predict their targets."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dit import ModelConfig, SentenceDiT
from .lora import LoRAConfig, inject
from .metrics import rmse
from .sampling import SampleConfig, sample
from .sentence import VisualSentence, compose
from .training import REGIMES, SentencePool, TrainConfig, run_training
from .worlds import TaskSample

logger = logging.getLogger(__name__)

__all__ = ["check_sentences", "check_base_model", "InContextFlowModel", "pretrain_base"]


def check_sentences(X, context=None) -> list[VisualSentence]:
    """Coerce ``X`` into a non-empty list of 4-shot-or-longer visual sentences.

    ``TaskSample`` items are composed as 4-shot sentences under ``context``
    (their modality plan must match it).
    """
    if isinstance(X, (VisualSentence, TaskSample)):
        X = [X]
    try:
        items = list(X)
    except TypeError as exc:
        raise TypeError(f"expected a sequence of visual sentences, got {type(X).__name__}") from exc
    if not items:
        raise ValueError("found 0 sentences; at least one is required")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, TaskSample):
            if context is None:
                raise ValueError("task samples need a context type to be composed")
            item = compose([item], context, 4)
        if not isinstance(item, VisualSentence):
            raise TypeError(f"item {i} is {type(item).__name__}, not a VisualSentence")
        out.append(item)
    resolutions = {s.resolution for s in out}
    if len(resolutions) != 1:
        raise ValueError(f"sentences mix resolutions {sorted(resolutions)}")
    return out


def check_base_model(base, config: ModelConfig | None = None) -> SentenceDiT:
    if base is None:
        return SentenceDiT(config or ModelConfig())
    if isinstance(base, SentenceDiT):
        return base
    from .checkpoint import load_checkpoint

    model, _ = load_checkpoint(Path(base))
    return model


def pretrain_base(config: ModelConfig | None = None, iterations: int = 12_000, lr: float = 3e-4,
                  seed: int = 0, video_frames: int = 5, callback=None) -> SentenceDiT:
    """Train every base parameter on continuous synthetic video.

    The target clip is simply the continuation of the video in the context, so
    no task annotations are ever seen.
    """
    model = SentenceDiT(config or ModelConfig(seed=seed))
    epochs = max(1, iterations // 500)
    train = TrainConfig(regime="pretrain-natural", epochs=epochs,
                        iters_per_epoch=iterations // epochs, lr=lr, seed=seed,
                        num_samples=1_000_000, data_seed=seed, video_frames=video_frames)
    run_training(model, train, on_epoch_end=callback)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class InContextFlowModel(BaseEstimator):
    """LoRA fine-tuning of a sentence diffusion transformer, sklearn style.

    ``fit(X)`` takes visual sentences whose final clip is the training target;
    ``predict(X)`` returns one generated ``Clip`` per sentence (whatever target
    ``X`` carries is ignored). ``base`` is a ``SentenceDiT``, a checkpoint
    path, or ``None`` for a freshly initialised backbone.
    """

    def __init__(self, base=None, regime="per-task-per-context", lora_rank=16, lora_alpha=None,
                 lr=1e-4, batch_size=1, iters_per_epoch=200, epochs=20, text_mode="detailed",
                 sample_steps=50, timestep_sampling="uniform", random_state=0):
        self.base = base
        self.regime = regime
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lr = lr
        self.batch_size = batch_size
        self.iters_per_epoch = iters_per_epoch
        self.epochs = epochs
        self.text_mode = text_mode
        self.sample_steps = sample_steps
        self.timestep_sampling = timestep_sampling
        self.random_state = random_state

    def _train_config(self, sentences) -> TrainConfig:
        if self.regime not in REGIMES or self.regime == "pretrain-natural":
            raise ValueError(f"regime {self.regime!r} is not a fine-tuning regime")
        contexts = {s.context_type for s in sentences}
        regime = self.regime
        if regime == "per-task-per-context" and len(contexts) > 1:
            raise ValueError("per-task-per-context training needs sentences of a single context")
        return TrainConfig(
            regime=regime,
            tasks=tuple(sorted({s.kind.task.value for s in sentences})),
            context=next(iter(contexts)).value,
            shots=sentences[0].shots,
            lr=self.lr,
            batch_size=self.batch_size,
            iters_per_epoch=self.iters_per_epoch,
            epochs=self.epochs,
            seed=self.random_state,
            num_samples=len(sentences),
            timestep_sampling=self.timestep_sampling,
            text_mode=self.text_mode,
            resolution=sentences[0].resolution,
        )

    def fit(self, X, y=None):
        sentences = check_sentences(X)
        base = check_base_model(self.base)
        config = self._train_config(sentences)
        lora = LoRAConfig(rank=self.lora_rank, alpha=self.lora_alpha, seed=self.random_state)
        model, _ = inject(base, lora)
        result = run_training(model, config, pool=SentencePool(sentences))
        self.model_ = result.model
        self.train_config_ = config
        self.loss_curve_ = [r["loss"] for r in result.losses]
        self.n_iter_ = len(self.loss_curve_)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        sentences = check_sentences(X)
        out = []
        for i, s in enumerate(sentences):
            cfg = SampleConfig(steps=self.sample_steps, seed=self.random_state * 100_003 + i,
                               text_mode=self.text_mode)
            out.append(sample(s, self.model_, cfg).clip)
        return out

    def score(self, X, y=None):
        """Negative mean pixel RMSE (0-255 scale) against the sentences' own targets."""
        sentences = check_sentences(X)
        preds = self.predict(sentences)
        return -float(np.mean([rmse(p, s.target) for p, s in zip(preds, sentences)]))
