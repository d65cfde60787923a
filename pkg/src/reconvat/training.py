"""Three-term objective, training loop, checkpoints and continual learning."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from . import audio
from .audio import InvalidInputError
from .datasets import Batch, BatchSampler, BatchSpec, Clip
from .labels import binarize, rolls_to_notes, window_rolls
from .metrics import ScoreTriple, clip_scores, note_metrics
from .model import ModelOutput, Reconstructor, Transcriber, TranscriberConfig, build_models
from .vat import VatConfig, binary_cross_entropy, lds

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "reconvat-checkpoint/1"
# keys that only set how long or how verbosely a run goes; they may change on resume
RUNTIME_KEYS = {"epochs", "checkpoint_every", "validate_every"}


class ConfigError(ValueError):
    pass


class ConfigMismatchError(ConfigError):
    def __init__(self, diff: dict[str, tuple[Any, Any]]):
        self.diff = diff
        lines = [f"  {k}: checkpoint={a!r} current={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("configuration differs from checkpoint:\n" + "\n".join(lines))


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, snapshot: dict[str, Any]):
        self.snapshot = snapshot
        super().__init__(f"non-finite loss: {snapshot}")


@dataclass
class TrainingConfig:
    # objective
    alpha: float = 1.0
    use_reconstruction: bool = True
    use_vat: bool = True
    use_onset: bool = True
    recon_loss: str = "bce"
    # adversarial perturbation
    epsilon: float = 1.0
    xi: float = 1e-2
    power_iterations: int = 1
    # optimisation
    learning_rate: float = 1e-3
    lr_decay: float = 0.98
    decay_every: int = 1000
    iterations_per_epoch: int = 10
    epochs: int = 100
    n_labelled: int = 8
    n_unlabelled: int = 8
    seed: int = 0
    # data
    segment_samples: int = audio.SEGMENT_SAMPLES
    n_mels: int = audio.N_MELS
    onset_width: int = 2
    threshold: float = 0.5
    # model
    depth: int = 4
    base_channels: int = 16
    attention_window: int = 31
    recon_depth: int = 2
    # bookkeeping
    checkpoint_every: int = 0
    validate_every: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.recon_loss not in ("bce", "mse"):
            raise ConfigError(f"recon_loss must be 'bce' or 'mse', got {self.recon_loss!r}")
        if self.segment_samples < audio.N_FFT:
            raise ConfigError("segment_samples must cover at least one analysis window")

    def transcriber_config(self) -> TranscriberConfig:
        return TranscriberConfig(depth=self.depth, base_channels=self.base_channels,
                                 attention_window=self.attention_window, two_channel=self.use_onset,
                                 n_mels=self.n_mels, recon_depth=self.recon_depth)

    def vat_config(self) -> VatConfig:
        return VatConfig(self.epsilon, self.xi, self.power_iterations, include_onset=self.use_onset)

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.n_labelled, self.n_unlabelled)

    @property
    def segment_frames(self) -> int:
        return audio.n_frames(self.segment_samples)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value.strip()


def parse_config_text(text: str, base: Optional[TrainingConfig] = None) -> TrainingConfig:
    """Parse flat ``key = value`` lines (``#`` comments) over ``base``; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainingConfig)}
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _coerce(value, types[key])
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from None
    return dataclasses.replace(base or TrainingConfig(), **changes)


def load_config(path: str | Path, base: Optional[TrainingConfig] = None) -> TrainingConfig:
    return parse_config_text(Path(path).read_text(), base)


def dump_config(config: TrainingConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


# -- losses -----------------------------------------------------------------------------

def learning_rate(iteration: int, base: float = 1e-3, decay: float = 0.98, every: int = 1000) -> float:
    """Step decay: ``base * decay ** (iteration // every)``."""
    return base * decay ** (iteration // every)


def label_targets(batch: Batch, use_onset: bool, device=None) -> dict[str, torch.Tensor]:
    if batch.frame is None:
        raise ConfigError("labelled batch has no frame labels")
    targets = {"post": torch.as_tensor(batch.frame, device=device)}
    if use_onset:
        if batch.onset is None:
            raise ConfigError("use_onset is set but the batch has no onset labels")
        targets["onset"] = torch.as_tensor(batch.onset, device=device)
    return targets


def supervised_loss(first: ModelOutput, second: Optional[ModelOutput], labels: dict[str, torch.Tensor],
                    use_onset: bool) -> torch.Tensor:
    """Sum of BCE against the labels over heads, for the clean pass and (if present) the re-transcribed pass."""
    if use_onset and "onset" not in labels:
        raise ConfigError("use_onset is set but no onset labels were given")
    total = 0.0
    for out in (first, second):
        if out is None:
            continue
        heads = out.probabilities(use_onset)
        for name, prob in heads.items():
            total = total + binary_cross_entropy(labels[name].to(prob.dtype), prob)
    return total


def unsupervised_loss(lds_l: torch.Tensor | float, lds_ul: Optional[torch.Tensor | float]) -> torch.Tensor | float:
    """Mean of the labelled and unlabelled LDS; with no unlabelled batch it is the labelled LDS alone."""
    if lds_ul is None:
        return lds_l
    return (lds_l + lds_ul) / 2


def reconstruction_loss(recon: torch.Tensor, spec: torch.Tensor, kind: str = "bce") -> torch.Tensor:
    if kind == "bce":
        return binary_cross_entropy(spec.to(recon.dtype), recon)
    if kind == "mse":
        return torch.mean((recon - spec) ** 2)
    raise ConfigError(f"unknown reconstruction loss {kind!r}")


# -- inference --------------------------------------------------------------------------

@dataclass
class Transcription:
    post: np.ndarray  # (T, 88)
    onset: Optional[np.ndarray]
    frame_roll: np.ndarray
    onset_roll: Optional[np.ndarray]
    notes: list

    @property
    def frame_rate(self) -> float:
        return audio.SAMPLE_RATE / audio.HOP_LENGTH


@torch.no_grad()
def transcribe_clip(transcriber: Transcriber, clip: audio.AudioClip, segment_samples: int,
                    threshold: float = 0.5, use_onset: bool = True, batch_size: int = 8) -> Transcription:
    """Transcribe a whole clip in abutting windows of ``segment_samples``; the tail window is zero-padded.

    Each window is normalised on its own, as during training. All-zero
    windows carry no information and yield an all-zero posteriorgram.
    """
    if clip.sample_rate != audio.SAMPLE_RATE:
        clip = audio.resample(clip, audio.SAMPLE_RATE)
    total = audio.n_frames(len(clip))
    n_windows = max(1, math.ceil(len(clip) / segment_samples))
    seg_frames = audio.n_frames(segment_samples)
    n_mels = transcriber.config.n_mels
    feats, silent = [], []
    for w in range(n_windows):
        piece = audio._slice_padded(clip.samples, w * segment_samples, segment_samples)
        silent.append(not piece.any())
        feats.append(audio.features(audio.AudioClip(piece, clip.sample_rate), n_mels))
    feats = np.stack(feats)
    dtype = next(transcriber.parameters()).dtype
    posts, onsets = [], []
    was_training = transcriber.training
    transcriber.eval()
    try:
        for i in range(0, n_windows, batch_size):
            out = transcriber(torch.as_tensor(feats[i:i + batch_size], dtype=dtype))
            posts.append(out.post.double().numpy())
            if out.onset is not None:
                onsets.append(out.onset.double().numpy())
    finally:
        transcriber.train(was_training)
    post = np.concatenate(posts)
    onset = np.concatenate(onsets) if onsets else None
    for w, is_silent in enumerate(silent):
        if is_silent:
            post[w] = 0.0
            if onset is not None:
                onset[w] = 0.0
    post = post.reshape(-1, post.shape[-1])[:total]
    if onset is not None:
        onset = onset.reshape(-1, onset.shape[-1])[:total]
    assert post.shape[0] == total and n_windows * seg_frames >= total
    frame_roll = binarize(post, threshold)
    onset_roll = binarize(onset, threshold) if (use_onset and onset is not None) else None
    notes = rolls_to_notes(frame_roll, onset_roll, audio.SAMPLE_RATE / audio.HOP_LENGTH)
    return Transcription(post, onset, frame_roll, onset_roll, notes)


def evaluate_clips(transcriber: Transcriber, clips: Sequence[Clip], config: TrainingConfig) -> list[dict]:
    """Per-clip frame/note/note-with-offset scores on labelled clips."""
    results = []
    for clip in clips:
        tr = transcribe_clip(transcriber, clip.audio, config.segment_samples, config.threshold, config.use_onset)
        ref = window_rolls(clip.notes, 0.0, tr.frame_roll.shape[0], tr.frame_rate, config.onset_width)
        results.append(clip_scores(tr.notes, clip.notes, tr.frame_roll, ref.frame))
    return results


def mean_note_f1(transcriber: Transcriber, clips: Sequence[Clip], config: TrainingConfig) -> float:
    scores = []
    for clip in clips:
        tr = transcribe_clip(transcriber, clip.audio, config.segment_samples, config.threshold, config.use_onset)
        scores.append(note_metrics(tr.notes, clip.notes).f1)
    return float(np.mean(scores))


# -- training loop ----------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "iteration", "L", "L_l", "L_ul", "L_recon", "val_P", "val_R", "val_F1")


class Trainer:
    """Owns the transcriber, reconstructor, optimiser, RNG state and data pools.

    One iteration runs the supervised branch on the labelled batch (clean pass,
    reconstruction and re-transcription) and, with VAT on, one LDS computation
    for the labelled batch and one for the unlabelled batch.
    """

    def __init__(self, config: TrainingConfig, labelled: Sequence[Clip], unlabelled: Sequence[Clip] = (),
                 validation: Sequence[Clip] = (), allow_test: bool = False):
        self.config = config
        self.transcriber, self.reconstructor = build_models(config.transcriber_config(), config.seed)
        self.optimizer = torch.optim.Adam(
            list(self.transcriber.parameters()) + list(self.reconstructor.parameters()), lr=config.learning_rate)
        self.torch_rng = torch.Generator().manual_seed(config.seed)
        self.validation = list(validation)
        n_unlabelled = config.n_unlabelled if config.use_vat else 0
        self.sampler = BatchSampler(labelled, unlabelled, BatchSpec(config.n_labelled, n_unlabelled),
                                    config.segment_samples, np.random.default_rng(config.seed), config.n_mels,
                                    config.onset_width, allow_test=allow_test)
        self.iteration = 0
        self.history: list[dict] = []
        self.epoch_log: list[dict] = []
        self.metadata: dict[str, Any] = {}

    @property
    def epoch(self) -> int:
        return self.iteration // self.config.iterations_per_epoch

    @property
    def labelled(self) -> list[Clip]:
        return self.sampler.labelled

    @property
    def unlabelled(self) -> list[Clip]:
        return self.sampler.unlabelled

    def current_lr(self) -> float:
        c = self.config
        return learning_rate(self.iteration, c.learning_rate, c.lr_decay, c.decay_every)

    def compute_losses(self, labelled: Batch, unlabelled: Optional[Batch]) -> dict[str, Any]:
        """Loss terms as tensors plus the list of branch passes that were run."""
        c = self.config
        dtype = next(self.transcriber.parameters()).dtype
        x_l = torch.as_tensor(labelled.spec, dtype=dtype)
        targets = label_targets(labelled, c.use_onset)
        passes = ["supervised"]
        first = self.transcriber(x_l)
        second, l_recon = None, torch.zeros((), dtype=dtype)
        if c.use_reconstruction:
            recon = self.reconstructor(first.post)
            second = self.transcriber.second_pass(recon)
            l_recon = reconstruction_loss(recon, x_l, c.recon_loss)
        l_l = supervised_loss(first, second, targets, c.use_onset)
        lds_l = lds_ul = None
        l_ul = torch.zeros((), dtype=dtype)
        if c.use_vat:
            vat_cfg = c.vat_config()
            lds_l = lds(self.transcriber, x_l, vat_cfg, self.torch_rng)
            passes.append("lds_l")
            if unlabelled is not None and len(unlabelled) > 0:
                x_ul = torch.as_tensor(unlabelled.spec, dtype=dtype)
                lds_ul = lds(self.transcriber, x_ul, vat_cfg, self.torch_rng)
                passes.append("lds_ul")
            l_ul = unsupervised_loss(lds_l, lds_ul)
        total = l_l + c.alpha * l_ul + l_recon
        return {"L": total, "L_l": l_l, "L_ul": l_ul, "L_recon": l_recon, "LDS_l": lds_l, "LDS_ul": lds_ul,
                "passes": passes}

    def train_step(self, labelled: Batch, unlabelled: Optional[Batch] = None) -> dict[str, Any]:
        lr = self.current_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        try:
            terms = self.compute_losses(labelled, unlabelled)
        except InvalidInputError as err:
            # a diverged network hands non-finite activations to the next module
            bad = sorted(name for name, p in self._named_params() if not torch.isfinite(p).all())
            if not bad and "non-finite" not in str(err):
                raise
            raise NonFiniteLossError({"iteration": self.iteration, "L": None, "L_l": None, "L_ul": None,
                                      "L_recon": None, "error": str(err), "nonfinite_params": bad,
                                      "nonfinite_grads": {}}) from err
        terms["L"].backward()
        record = {k: (None if v is None else float(v.detach()) if torch.is_tensor(v) else float(v))
                  for k, v in terms.items() if k != "passes"}
        record.update(iteration=self.iteration, lr=lr, passes=terms["passes"])
        grad_norms = {name: float(p.grad.norm()) for name, p in self._named_params() if p.grad is not None}
        if not math.isfinite(record["L"]) or not all(math.isfinite(g) for g in grad_norms.values()):
            bad = {k: v for k, v in grad_norms.items() if not math.isfinite(v)}
            raise NonFiniteLossError({**{k: record[k] for k in ("iteration", "L", "L_l", "L_ul", "L_recon")},
                                      "nonfinite_grads": bad,
                                      "max_grad_norm": max(grad_norms.values(), default=0.0)})
        self.optimizer.step()
        self.iteration += 1
        self.history.append(record)
        return record

    def _named_params(self):
        for prefix, module in (("transcriber", self.transcriber), ("reconstructor", self.reconstructor)):
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def validate(self) -> Optional[ScoreTriple]:
        if not self.validation:
            return None
        scores = []
        for clip in self.validation:
            tr = transcribe_clip(self.transcriber, clip.audio, self.config.segment_samples, self.config.threshold,
                                 self.config.use_onset)
            scores.append(note_metrics(tr.notes, clip.notes).as_tuple())
        return ScoreTriple(*np.mean(scores, axis=0).tolist())

    def fit(self, iterations: Optional[int] = None, log_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None) -> list[dict]:
        """Run ``iterations`` steps (default: ``epochs`` worth), logging one line per completed epoch."""
        c = self.config
        if iterations is None:
            iterations = c.epochs * c.iterations_per_epoch
        epoch_records = []
        for _ in range(iterations):
            labelled, unlabelled = self.sampler.next_batches()
            epoch_records.append(self.train_step(labelled, unlabelled))
            if self.iteration % c.iterations_per_epoch == 0:
                row = self._epoch_row(epoch_records)
                epoch_records = []
                self.epoch_log.append(row)
                if log_path is not None:
                    append_log(log_path, row)
                if checkpoint_dir is not None and c.checkpoint_every and self.epoch % c.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"epoch{self.epoch:05d}.pt")
        return self.history

    def _epoch_row(self, records: list[dict]) -> dict:
        row = {"epoch": self.epoch, "iteration": self.iteration}
        for key in ("L", "L_l", "L_ul", "L_recon"):
            row[key] = float(np.mean([r[key] for r in records]))
        val = None
        if self.validation and self.config.validate_every and self.epoch % self.config.validate_every == 0:
            val = self.validate()
        row["val_P"], row["val_R"], row["val_F1"] = val.as_tuple() if val else (None, None, None)
        return row

    # -- persistence --

    def state_dict(self) -> dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "transcriber": self.transcriber.state_dict(),
            "reconstructor": self.reconstructor.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "iteration": self.iteration,
            "torch_rng": self.torch_rng.get_state(),
            "numpy_rng": self.sampler.rng.bit_generator.state,
            "history": self.history,
            "epoch_log": self.epoch_log,
            "metadata": self.metadata,
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self.transcriber.load_state_dict(state["transcriber"])
        self.reconstructor.load_state_dict(state["reconstructor"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.iteration = int(state["iteration"])
        self.torch_rng.set_state(state["torch_rng"])
        self.sampler.rng.bit_generator.state = state["numpy_rng"]
        self.history = list(state.get("history", []))
        self.epoch_log = list(state.get("epoch_log", []))
        self.metadata = dict(state.get("metadata", {}))

    def save(self, path: str | Path) -> Path:
        """Atomic write: the checkpoint appears under ``path`` only once fully written."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        os.close(fd)
        try:
            torch.save(self.state_dict(), tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)
        return path

    @classmethod
    def from_checkpoint(cls, path: str | Path, labelled: Sequence[Clip], unlabelled: Sequence[Clip] = (),
                        validation: Sequence[Clip] = (), config: Optional[TrainingConfig] = None,
                        allow_test: bool = False) -> "Trainer":
        state = read_checkpoint(path)
        stored = TrainingConfig(**state["config"])
        if config is not None:
            diff = config_diff(stored, config)
            if diff:
                raise ConfigMismatchError(diff)
            stored = stored.replace(**{k: getattr(config, k) for k in RUNTIME_KEYS})
        trainer = cls(stored, labelled, unlabelled, validation, allow_test=allow_test)
        trainer.load_state_dict(state)
        return trainer


def config_diff(a: TrainingConfig, b: TrainingConfig) -> dict[str, tuple[Any, Any]]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if k not in RUNTIME_KEYS and da[k] != db[k]}


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        state = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises several unrelated types for bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    missing = {"config", "transcriber", "reconstructor", "optimizer", "iteration"} - set(state)
    if missing:
        raise CheckpointError(f"{path} is missing {sorted(missing)}")
    return state


def load_transcriber(path: str | Path) -> tuple[Transcriber, TrainingConfig]:
    state = read_checkpoint(path)
    config = TrainingConfig(**state["config"])
    transcriber = Transcriber(config.transcriber_config())
    try:
        transcriber.load_state_dict(state["transcriber"])
    except RuntimeError as err:
        raise CheckpointError(f"{path}: weights do not fit the stored configuration: {err}") from err
    transcriber.eval()
    return transcriber, config


def append_log(path: str | Path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        fh.write("\t".join(_fmt(row.get(k)) for k in LOG_COLUMNS) + "\n")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def split_train_validation(items: Sequence, fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded clip-level split; the validation share is rounded down."""
    items = list(items)
    if not items:
        raise ValueError("cannot split an empty corpus")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_val = int(math.floor(len(items) * (1 - fraction) + 1e-9))
    order = np.random.default_rng(seed).permutation(len(items))
    val_idx = set(order[:n_val].tolist())
    train = [x for i, x in enumerate(items) if i not in val_idx]
    val = [x for i, x in enumerate(items) if i in val_idx]
    if not val:
        warnings.warn(f"validation split of {len(items)} clip(s) at fraction {fraction} is empty", stacklevel=2)
    return train, val


def continual_train(checkpoint: str | Path, labelled: Sequence[Clip], unlabelled: Sequence[Clip],
                    new_unlabelled: Sequence[Clip], extra_epochs: int, config: Optional[TrainingConfig] = None,
                    validation: Sequence[Clip] = (), log_path: str | Path | None = None) -> Trainer:
    """Resume from ``checkpoint`` with ``new_unlabelled`` added to the unlabelled pool.

    New clips may come from a test split: adding them as unlabelled data is
    the point of continual learning, so the leakage guard is lifted for them.
    """
    if not new_unlabelled:
        raise ValueError("continual training needs new unlabelled clips")
    known = {c.path for c in unlabelled if c.path is not None}
    pool = list(unlabelled) + [c for c in new_unlabelled if c.path is None or c.path not in known]
    pool = [Clip(c.audio, None, c.path, c.split) for c in pool]
    trainer = Trainer.from_checkpoint(checkpoint, labelled, pool, validation, config, allow_test=True)
    if extra_epochs > 0:
        trainer.fit(extra_epochs * trainer.config.iterations_per_epoch, log_path=log_path)
    return trainer
