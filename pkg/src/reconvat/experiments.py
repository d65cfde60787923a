"""Desk-scale experiments on synthetic corpora.

The toy configuration keeps the real front-end (16 kHz, 2048/512 STFT, 229
Mel bins) but uses 1 s crops and a two-level U-net so that a run of a
thousand iterations fits in minutes on one CPU core.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .datasets import Clip, SyntheticSpec, generate_synthetic_corpus, load_clips
from .training import Trainer, TrainingConfig, continual_train, mean_note_f1

log = logging.getLogger(__name__)

TOY_CONFIG = TrainingConfig(
    segment_samples=32 * 512,
    depth=2,
    base_channels=8,
    attention_window=9,
    recon_depth=1,
    n_labelled=2,
    n_unlabelled=2,
    use_onset=False,
    epsilon=2.0,
    validate_every=0,
)

TOY_SYNTH = SyntheticSpec(n_clips=30, notes_per_clip=(6, 10), pitch_range=(60, 72), duration=4.0, polyphony=2)


@dataclass
class Fixture:
    labelled: list[Clip]
    unlabelled: list[Clip]
    test: list[Clip]
    root: Path | None = None


def build_fixture(root: str | Path, n_labelled: int = 2, n_unlabelled: int = 20, n_test: int = 8,
                  seed: int = 0, synth: SyntheticSpec = TOY_SYNTH) -> Fixture:
    """Synthesise a corpus and split it into labelled, unlabelled and held-out test clips."""
    root = Path(root)
    n = n_labelled + n_unlabelled + n_test
    spec = SyntheticSpec(**{**synth.__dict__, "n_clips": n, "seed": seed})
    manifest = generate_synthetic_corpus(spec, root)
    clips, _ = load_clips(manifest)
    labelled = clips[:n_labelled]
    unlabelled = [Clip(c.audio, None, c.path, "train") for c in clips[n_labelled:n_labelled + n_unlabelled]]
    test = [Clip(c.audio, c.notes, c.path, "test") for c in clips[n_labelled + n_unlabelled:]]
    return Fixture(labelled, unlabelled, test, root)


def train_variant(fixture: Fixture, config: TrainingConfig, iterations: int) -> Trainer:
    torch.set_num_threads(1)
    unlabelled = fixture.unlabelled if config.use_vat else []
    trainer = Trainer(config, fixture.labelled, unlabelled)
    trainer.fit(iterations)
    return trainer


@dataclass
class Comparison:
    baseline: list[float] = field(default_factory=list)
    treatment: list[float] = field(default_factory=list)

    @property
    def baseline_median(self) -> float:
        return statistics.median(self.baseline)

    @property
    def treatment_median(self) -> float:
        return statistics.median(self.treatment)


def compare_vat(fixture: Fixture, seeds: Sequence[int] = (0, 1, 2), iterations: int = 1000,
                base: TrainingConfig = TOY_CONFIG, checkpoint_dir: str | Path | None = None) -> Comparison:
    """Held-out note F1 of U-net-R with and without VAT under the same iteration budget."""
    result = Comparison()
    for seed in seeds:
        for use_vat, scores in ((False, result.baseline), (True, result.treatment)):
            cfg = base.replace(seed=seed, use_vat=use_vat, use_reconstruction=True)
            trainer = train_variant(fixture, cfg, iterations)
            f1 = mean_note_f1(trainer.transcriber, fixture.test, cfg)
            scores.append(f1)
            log.info("seed %d vat=%s note F1 %.4f", seed, use_vat, f1)
            if checkpoint_dir is not None:
                trainer.save(Path(checkpoint_dir) / f"seed{seed}_{'vat' if use_vat else 'sup'}.pt")
    return result


def continual_effect(fixture: Fixture, checkpoint: str | Path, extra_iterations: int) -> tuple[float, float]:
    """Held-out note F1 before and after resuming with the held-out clips added as unlabelled data."""
    trainer = Trainer.from_checkpoint(checkpoint, fixture.labelled, fixture.unlabelled)
    cfg = trainer.config
    before = mean_note_f1(trainer.transcriber, fixture.test, cfg)
    new = [Clip(c.audio, None, c.path, "test") for c in fixture.test]
    epochs = extra_iterations // cfg.iterations_per_epoch
    resumed = continual_train(checkpoint, fixture.labelled, fixture.unlabelled, new, epochs)
    after = mean_note_f1(resumed.transcriber, fixture.test, cfg)
    return before, after
