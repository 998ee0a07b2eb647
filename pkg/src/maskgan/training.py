"""Losses, replay buffer and the per-epoch adversarial training schedule.

One epoch at a glance (``segments`` = the I utterances sampled this epoch):

1. predictor trained per segment against true normalized scores of the
   clean/clean, enhanced/clean and noisy/clean pairs (plus the
   degenerated/clean pair in "degen" mode); replay candidates collected;
2. predictor trained over one full shuffled pass of the replay buffer
   (stored score targets from past epochs; empty on epoch 1);
3. step 1's per-segment predictor training repeated on the same segments;
4. in "degen" mode the degenerator trained per segment to make the
   predictor emit its target score;
5. the enhancer trained per segment to make the predictor emit 1;
6. floor(history_portion * I) candidates per origin appended to the buffer.

While the predictor trains the mask networks are frozen and vice versa, so
the enhanced audio scored in steps 1-3 is the previous epoch's enhancer
output.  Score targets are always computed on resynthesized time-domain
audio (noisy phase), never on features.  One utterance per optimization
step, no padding or batching.  The whole loop is single-threaded and
bit-reproducible under the config seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .data import PairManifest, load_pair, sample_segments
from .errors import MetricUnavailableError, TrainingDivergedError
from .models import (
    MaskNet,
    MaskNetConfig,
    MetricPredictor,
    PredictorConfig,
    config_hash,
    init_params,
    save_checkpoint,
)
from .signal import AudioSignal, FrameParams, compute_features, resynthesize

MODES = ("standard", "degen")


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``mode`` selects between the two-network schedule ("standard") and the
    three-network schedule with a degenerator ("degen").  ``degen_target``
    is the normalized score the degenerator aims for; 1.0 is accepted with a
    warning (the degenerator then shares the enhancer's objective).
    ``learnable_amplitude`` makes the *degenerator's* sigmoid amplitude a
    trained parameter; the enhancer's stays fixed.
    """

    mode: str = "standard"
    objective: str = "stoi"
    degen_target: float = 0.5        # the degenerator's score target
    history_portion: float = 0.2     # fraction of each epoch kept for replay
    segments_per_epoch: int = 100
    epochs: int = 100
    learning_rate: float = 0.0005
    mask_floor: float = 0.05
    mask_ceiling: float | None = None  # optional upper clamp (the 1.0 bound)
    degen_init_spread: float = 2.0     # structured starting masks for the degenerator
    seed: int = 0
    learnable_amplitude: bool = False
    spectral_norm: bool = True
    checkpoint_every: int = 0        # 0 = final checkpoint only
    pesq_command: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        metrics.metric_info(self.objective)
        if not 0.0 < self.degen_target <= 1.0:
            raise ValueError(f"degen_target must be in (0, 1], got {self.degen_target}")
        if self.degen_target == 1.0:
            warnings.warn(
                "degen_target = 1 gives the degenerator the enhancer's objective",
                stacklevel=2,
            )
        if not 0.0 <= self.history_portion <= 1.0:
            raise ValueError("history_portion must be in [0, 1]")
        if self.segments_per_epoch < 1:
            raise ValueError("segments_per_epoch must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_unit_interval(name, value):
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {v}")


def loss_discriminator(
    pred_clean,
    pred_enh,
    pred_noisy,
    q_enh,
    q_noisy,
    pred_degen=None,
    q_degen=None,
):
    """Sum of squared prediction errors against (1, q_enh, q_noisy) for the
    clean/enhanced/noisy pairs, plus the degenerated term when present.
    With the degenerated term absent this reduces exactly to the
    two-network loss."""
    _check_unit_interval("q_enh", q_enh)
    _check_unit_interval("q_noisy", q_noisy)
    if (pred_degen is None) != (q_degen is None):
        raise ValueError("pred_degen and q_degen must be supplied together")
    loss = (pred_clean - 1.0) ** 2 + (pred_enh - q_enh) ** 2 + (pred_noisy - q_noisy) ** 2
    if pred_degen is not None:
        _check_unit_interval("q_degen", q_degen)
        loss = loss + (pred_degen - q_degen) ** 2
    return loss


def loss_generator(pred_enh):
    """(prediction - 1)^2: the enhancer chases a perfect normalized score."""
    return (pred_enh - 1.0) ** 2


def loss_degenerator(pred_degen, target):
    """(prediction - target)^2: the degenerator chases a set imperfect score."""
    return (pred_degen - target) ** 2


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

@dataclass
class ReplayEntry:
    processed_features: np.ndarray  # enhanced or degenerated features
    clean_features: np.ndarray
    true_score: float               # normalized score of processed vs clean
    origin: str                     # "enhanced" | "de_enhanced"

    def __post_init__(self):
        if self.processed_features.shape != self.clean_features.shape:
            raise ValueError("feature shapes disagree")
        _check_unit_interval("true_score", self.true_score)
        if self.origin not in ("enhanced", "de_enhanced"):
            raise ValueError(f"unknown origin {self.origin!r}")


def buffer_update(buffer, epoch_items, history_portion, segments_per_epoch, rng):
    """Permanently append floor(history_portion * I) uniformly sampled items
    per origin group; the buffer only grows.  A quota that rounds to zero
    appends nothing and emits a warning."""
    quota = int(np.floor(history_portion * segments_per_epoch))
    if quota < 1:
        warnings.warn(
            f"history_portion * segments_per_epoch = "
            f"{history_portion * segments_per_epoch:.3g} < 1; replay buffer not grown",
            stacklevel=2,
        )
        return buffer
    for origin in ("enhanced", "de_enhanced"):
        group = [e for e in epoch_items if e.origin == origin]
        if not group:
            continue
        idx = rng.choice(len(group), size=min(quota, len(group)), replace=False)
        buffer.extend(group[i] for i in sorted(idx))
    return buffer


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class _Segment:
    """Per-epoch cache of one utterance's tensors and frozen-step outputs."""

    __slots__ = (
        "id", "clean", "noisy", "clean_feats", "noisy_feats", "noisy_mag",
        "noisy_phase", "q_noisy", "enh_feats", "q_enh", "degen_feats", "q_degen",
    )

    def __init__(self, entry_id, clean, noisy, q_noisy, frame_params):
        self.id = entry_id
        self.clean = clean
        self.noisy = noisy
        self.q_noisy = q_noisy
        clean_f, _ = compute_features(clean, frame_params)
        noisy_f, frames = compute_features(noisy, frame_params)
        self.clean_feats = torch.as_tensor(clean_f, dtype=torch.float32)
        self.noisy_feats = torch.as_tensor(noisy_f, dtype=torch.float32)
        self.noisy_mag = torch.as_tensor(frames.magnitude, dtype=torch.float32)
        self.noisy_phase = frames.phase
        self.enh_feats = None
        self.q_enh = None
        self.degen_feats = None
        self.q_degen = None


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        manifest: PairManifest,
        frame_params: FrameParams | None = None,
        out_dir=None,
        external_evaluator: metrics.ExternalEvaluator | None = None,
    ):
        torch.set_num_threads(1)  # deterministic single-threaded numeric path
        self.config = config
        self.manifest = manifest
        self.frame_params = frame_params or FrameParams()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if external_evaluator is None and config.pesq_command:
            external_evaluator = metrics.ExternalEvaluator(config.pesq_command)
        self.external = external_evaluator

        seeds = np.random.SeedSequence(config.seed).generate_state(6)
        mask_cfg = MaskNetConfig(
            mask_floor=config.mask_floor, mask_ceiling=config.mask_ceiling
        )
        self.generator: MaskNet = init_params("mask_net", int(seeds[0]), mask_cfg)
        self.degenerator: MaskNet | None = None
        if config.mode == "degen":
            # the degenerator exists to widen the score range the predictor
            # observes; a structured (non-flat) starting mask gives the
            # predictor score variance from the first epoch
            degen_cfg = MaskNetConfig(
                mask_floor=config.mask_floor,
                mask_ceiling=config.mask_ceiling,
                learnable_amplitude=config.learnable_amplitude,
                init_spread=config.degen_init_spread,
            )
            self.degenerator = init_params("mask_net", int(seeds[1]), degen_cfg)
        self.predictor: MetricPredictor = init_params(
            "predictor", int(seeds[2]), PredictorConfig(spectral_norm=config.spectral_norm)
        )
        lr = config.learning_rate
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=lr)
        self.opt_n = (
            torch.optim.Adam(self.degenerator.parameters(), lr=lr)
            if self.degenerator is not None
            else None
        )
        self.opt_d = torch.optim.Adam(self.predictor.parameters(), lr=lr)

        self.rng_sampler = np.random.default_rng(seeds[3])
        self.rng_buffer = np.random.default_rng(seeds[4])
        self.rng_replay = np.random.default_rng(seeds[5])
        self.buffer: list[ReplayEntry] = []
        self.epoch = 0
        self.history: list[dict] = []
        self._audio_cache: dict = {}
        self.run_hash = config_hash(asdict(config))
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "history.jsonl", "w")

    # ----- plumbing --------------------------------------------------------

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    def _true_score(self, deg: AudioSignal, ref: AudioSignal) -> float:
        _, normalized = metrics.evaluate_pair(
            deg, ref, self.config.objective, external=self.external
        )
        return normalized

    def _segment(self, entry) -> _Segment:
        if entry.id not in self._audio_cache:
            clean, noisy = load_pair(entry)
            q_noisy = self._true_score(noisy, clean)  # invariant across epochs
            self._audio_cache[entry.id] = (clean, noisy, q_noisy)
        clean, noisy, q_noisy = self._audio_cache[entry.id]
        return _Segment(entry.id, clean, noisy, q_noisy, self.frame_params)

    def _resynth(self, mag: np.ndarray, seg: _Segment) -> AudioSignal:
        return resynthesize(
            mag,
            seg.noisy_phase,
            self.frame_params,
            sample_rate=seg.noisy.sample_rate,
            length=len(seg.noisy),
        )

    def _check_finite(self, loss, step, seg_id):
        if not torch.isfinite(loss):
            self._dump_diagnostic(step, seg_id)
            raise TrainingDivergedError(
                f"non-finite loss at epoch {self.epoch} step {step!r} segment {seg_id!r}"
            )

    def _dump_diagnostic(self, step, seg_id):
        if self.out_dir is not None:
            with open(self.out_dir / "diverged.json", "w") as fh:
                json.dump({"epoch": self.epoch, "step": step, "segment": seg_id}, fh)

    def _record(self, step, loss, mean_q_enh, mean_q_degen):
        rec = {
            "epoch": self.epoch,
            "step": step,
            "loss": loss,
            "mean_q_enh": mean_q_enh,
            "mean_q_deenh": mean_q_degen,
            "buffer_size": len(self.buffer),
        }
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(rec) + "\n")
            self._log_fh.flush()

    def _freeze_predictor(self, frozen: bool):
        for p in self.predictor.parameters():
            p.requires_grad_(not frozen)

    # ----- epoch phases ----------------------------------------------------

    def compute_frozen_outputs(self, segments):
        """Frozen mask-network forwards + true scores for every segment.

        Fails fast if the objective metric needs an external evaluator that
        is not configured.
        """
        if not metrics.metric_info(self.config.objective).native and self.external is None:
            raise MetricUnavailableError(
                f"objective {self.config.objective!r} needs an external evaluator; "
                "none configured, aborting epoch"
            )
        self.generator.eval()
        if self.degenerator is not None:
            self.degenerator.eval()
        for seg in segments:
            with torch.no_grad():
                enh_mag = self.generator(seg.noisy_feats) * seg.noisy_mag
                seg.enh_feats = torch.log1p(enh_mag)
            seg.q_enh = self._true_score(self._resynth(enh_mag.numpy(), seg), seg.clean)
            if self.degenerator is not None:
                with torch.no_grad():
                    degen_mag = self.degenerator(seg.noisy_feats) * seg.noisy_mag
                    seg.degen_feats = torch.log1p(degen_mag)
                seg.q_degen = self._true_score(
                    self._resynth(degen_mag.numpy(), seg), seg.clean
                )

    def _d_step_on_segments(self, segments, step_name):
        """One predictor optimization step per segment with the full loss.

        The segment's 3-4 equal-length pairs are scored in one batched
        forward; the optimization step stays per-utterance.
        """
        self.predictor.train()
        total = 0.0
        for seg in segments:
            self.opt_d.zero_grad()
            degs = [seg.clean_feats, seg.enh_feats, seg.noisy_feats]
            if seg.degen_feats is not None:
                degs.append(seg.degen_feats)
            preds = self.predictor(
                torch.stack(degs),
                seg.clean_feats.expand(len(degs), -1, -1),
            )
            if seg.degen_feats is not None:
                loss = loss_discriminator(
                    preds[0], preds[1], preds[2], seg.q_enh, seg.q_noisy,
                    pred_degen=preds[3], q_degen=seg.q_degen,
                )
            else:
                loss = loss_discriminator(
                    preds[0], preds[1], preds[2], seg.q_enh, seg.q_noisy
                )
            self._check_finite(loss, step_name, seg.id)
            loss.backward()
            self.opt_d.step()
            total += loss.detach().item()
        return total / len(segments)

    def _d_step_replay(self):
        """One full shuffled pass over the replay buffer (score term only)."""
        if not self.buffer:
            return None
        self.predictor.train()
        total = 0.0
        order = self.rng_replay.permutation(len(self.buffer))
        for i in order:
            entry = self.buffer[i]
            self.opt_d.zero_grad()
            pred = self.predictor(
                torch.as_tensor(entry.processed_features, dtype=torch.float32),
                torch.as_tensor(entry.clean_features, dtype=torch.float32),
            )
            loss = (pred - entry.true_score) ** 2
            self._check_finite(loss, "d_replay", f"buffer[{i}]")
            loss.backward()
            self.opt_d.step()
            total += loss.detach().item()
        return total / len(self.buffer)

    def d_phase(self, segments):
        """Steps 1-3: segment pass, replay pass, segment pass again.

        Requires compute_frozen_outputs(segments) to have run.  Mask-network
        parameters are untouched throughout.
        """
        loss1 = self._d_step_on_segments(segments, "d_segments_1")
        loss_replay = self._d_step_replay()
        loss2 = self._d_step_on_segments(segments, "d_segments_2")
        return {"d_segments_1": loss1, "d_replay": loss_replay, "d_segments_2": loss2}

    def _masknet_phase(self, segments, net, optimizer, target, step_name):
        """Per-segment training of a mask network through the frozen predictor."""
        net.train()
        self.predictor.eval()  # no power-iteration updates while frozen
        self._freeze_predictor(True)
        total = 0.0
        try:
            for seg in segments:
                optimizer.zero_grad()
                masked_feats = torch.log1p(net(seg.noisy_feats) * seg.noisy_mag)
                pred = self.predictor(masked_feats, seg.clean_feats)
                loss = (pred - target) ** 2
                self._check_finite(loss, step_name, seg.id)
                loss.backward()
                optimizer.step()
                total += loss.detach().item()
        finally:
            self._freeze_predictor(False)
        return total / len(segments)

    def degen_phase(self, segments):
        return self._masknet_phase(
            segments, self.degenerator, self.opt_n, self.config.degen_target,
            "degenerator",
        )

    def gen_phase(self, segments):
        return self._masknet_phase(
            segments, self.generator, self.opt_g, 1.0, "generator"
        )

    def _collect_candidates(self, segments):
        items = []
        for seg in segments:
            items.append(
                ReplayEntry(
                    seg.enh_feats.numpy().astype(np.float32),
                    seg.clean_feats.numpy().astype(np.float32),
                    seg.q_enh,
                    "enhanced",
                )
            )
        for seg in segments:
            if seg.degen_feats is not None:
                items.append(
                    ReplayEntry(
                        seg.degen_feats.numpy().astype(np.float32),
                        seg.clean_feats.numpy().astype(np.float32),
                        seg.q_degen,
                        "de_enhanced",
                    )
                )
        return items

    def run_epoch(self) -> dict:
        """One full training epoch; returns the epoch summary record."""
        cfg = self.config
        self.epoch += 1
        entries = sample_segments(self.manifest, cfg.segments_per_epoch, self.rng_sampler)
        segments = [self._segment(e) for e in entries]

        self.compute_frozen_outputs(segments)
        candidates = self._collect_candidates(segments)
        mean_q_enh = float(np.mean([s.q_enh for s in segments]))
        mean_q_degen = (
            float(np.mean([s.q_degen for s in segments]))
            if cfg.mode == "degen"
            else None
        )

        d_losses = self.d_phase(segments)
        self._record("d_segments_1", d_losses["d_segments_1"], mean_q_enh, mean_q_degen)
        self._record("d_replay", d_losses["d_replay"], mean_q_enh, mean_q_degen)
        self._record("d_segments_2", d_losses["d_segments_2"], mean_q_enh, mean_q_degen)

        n_loss = None
        if cfg.mode == "degen":
            n_loss = self.degen_phase(segments)
            self._record("degenerator", n_loss, mean_q_enh, mean_q_degen)
        g_loss = self.gen_phase(segments)
        self._record("generator", g_loss, mean_q_enh, mean_q_degen)

        buffer_update(
            self.buffer, candidates, cfg.history_portion,
            cfg.segments_per_epoch, self.rng_buffer,
        )

        summary = {
            "epoch": self.epoch,
            "d_segments_1": d_losses["d_segments_1"],
            "d_replay": d_losses["d_replay"],
            "d_segments_2": d_losses["d_segments_2"],
            "degenerator": n_loss,
            "generator": g_loss,
            "mean_q_enh": mean_q_enh,
            "mean_q_deenh": mean_q_degen,
            "buffer_size": len(self.buffer),
        }
        self.history.append(summary)
        return summary

    # ----- checkpointing -----------------------------------------------------

    def nets(self) -> dict:
        nets = {"generator": self.generator, "predictor": self.predictor}
        if self.degenerator is not None:
            nets["degenerator"] = self.degenerator
        return nets

    def checkpoint_meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "config": asdict(self.config),
            "config_hash": self.run_hash,
            "frame_params": asdict(self.frame_params),
        }

    def save(self, path=None) -> Path:
        if path is None:
            if self.out_dir is None:
                raise ValueError("no out_dir configured and no path given")
            path = self.out_dir / f"ckpt_e{self.epoch:04d}_{self.run_hash}.pt"
        save_checkpoint(path, self.nets(), self.checkpoint_meta())
        return Path(path)


def train(
    config: TrainConfig,
    manifest: PairManifest,
    out_dir=None,
    frame_params: FrameParams | None = None,
    external_evaluator: metrics.ExternalEvaluator | None = None,
):
    """Run the full schedule. Returns (checkpoint paths, epoch summaries)."""
    trainer = Trainer(config, manifest, frame_params, out_dir, external_evaluator)
    paths = []
    try:
        for _ in range(config.epochs):
            trainer.run_epoch()
            periodic = config.checkpoint_every and trainer.epoch % config.checkpoint_every == 0
            if (periodic or trainer.epoch == config.epochs) and (
                out_dir is not None
            ):
                paths.append(trainer.save())
    finally:
        trainer.close()
    return paths, trainer.history
