"""Inference and evaluation: file enhancement/degradation, test-set scoring
reports, and spectrogram export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .data import PairManifest, load_pair
from .errors import CheckpointMismatchError, MetricUnavailableError
from .models import load_checkpoint, mask_forward
from .signal import (
    AudioSignal,
    FrameParams,
    apply_mask,
    compute_features,
    read_wav,
    resynthesize,
    write_wav,
)

ROLE_TO_NET = {"generator": "generator", "de_generator": "degenerator"}


def _frame_params_from_meta(meta: dict) -> FrameParams:
    if "frame_params" in meta:
        return FrameParams(**meta["frame_params"])
    return FrameParams()


def _net_for_role(nets: dict, role: str):
    if role not in ROLE_TO_NET:
        raise ValueError(f"role must be one of {sorted(ROLE_TO_NET)}, got {role!r}")
    key = ROLE_TO_NET[role]
    if key not in nets:
        raise CheckpointMismatchError(
            f"checkpoint has no {key!r} network (roles stored: {sorted(nets)})"
        )
    return nets[key]


def enhance_signal(net, signal: AudioSignal, frame_params: FrameParams) -> AudioSignal:
    """features -> mask -> masked magnitude -> resynthesis with noisy phase."""
    feats, frames = compute_features(signal, frame_params)
    mask = mask_forward(net, feats)
    masked = apply_mask(mask, frames.magnitude)
    return resynthesize(
        masked, frames.phase, frame_params,
        sample_rate=signal.sample_rate, length=len(signal),
    )


def enhance_file(checkpoint_path, in_wav, out_wav, role: str = "generator") -> Path:
    """Run one WAV through the stored generator (or degenerator)."""
    nets, meta = load_checkpoint(checkpoint_path)
    net = _net_for_role(nets, role)
    params = _frame_params_from_meta(meta)
    out = enhance_signal(net, read_wav(in_wav), params)
    out_wav = Path(out_wav)
    out_wav.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out_wav, out)
    return out_wav


# ---------------------------------------------------------------------------
# Test-set evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-utterance raw scores plus their arithmetic means.

    ``rows`` hold raw scores keyed by metric name (None where an external
    evaluator failed); the intelligibility score appears as a fraction in
    machine output and as percent in the text table.
    """

    rows: list = field(default_factory=list)   # dicts: id + metric -> raw | None
    metric_names: tuple = ("stoi",)
    config_snapshot: dict = field(default_factory=dict)

    @property
    def means(self) -> dict:
        out = {}
        for name in self.metric_names:
            vals = [r[name] for r in self.rows if r[name] is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    @property
    def failure_count(self) -> int:
        return sum(
            1 for r in self.rows if any(r[m] is None for m in self.metric_names)
        )

    def to_machine_rows(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", *self.metric_names])
        for r in self.rows:
            writer.writerow([r["id"], *[_fmt_machine(r[m]) for m in self.metric_names]])
        writer.writerow(["mean", *[_fmt_machine(self.means[m]) for m in self.metric_names]])
        return buf.getvalue()

    def to_table_text(self) -> str:
        headers = ["id"] + [m.upper() + (" (%)" if m == "stoi" else "") for m in self.metric_names]
        body = []
        for r in self.rows:
            body.append([r["id"], *[_fmt_table(m, r[m]) for m in self.metric_names]])
        body.append(["mean", *[_fmt_table(m, self.means[m]) for m in self.metric_names]])
        widths = [max(len(str(row[i])) for row in [headers, *body]) for i in range(len(headers))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in [headers, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.failure_count:
            lines.append(f"({self.failure_count} utterance(s) failed; means over successes)")
        return "\n".join(lines)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(self.to_machine_rows())
        (out_dir / "report.txt").write_text(self.to_table_text() + "\n")
        with open(out_dir / "report_config.json", "w") as fh:
            json.dump(self.config_snapshot, fh, indent=2, default=str)


def _fmt_machine(value):
    return "" if value is None else repr(float(value))


def _fmt_table(metric, value):
    if value is None:
        return "failed"
    if metric == "stoi":
        return f"{100.0 * value:.1f}"
    return f"{value:.2f}"


def evaluate_testset(
    checkpoint_path,
    manifest: PairManifest,
    metric_names=("stoi",),
    external: dict | None = None,
    role: str = "generator",
) -> EvalReport:
    """Enhance every test pair and score it with the requested metrics.

    ``checkpoint_path=None`` evaluates the noisy signal unprocessed (the
    passthrough baseline row).  ``external`` maps metric name to an
    ExternalEvaluator.  A failing external call marks that row's metric as
    failed; means are over successes.  Checkpoints and data are read-only.
    """
    external = external or {}
    metric_names = tuple(m.lower() for m in metric_names)
    for name in metric_names:
        info = metrics.metric_info(name)
        if not info.native and name not in external:
            raise MetricUnavailableError(
                f"metric {name!r} needs an external evaluator; none configured"
            )
    net = None
    params = FrameParams()
    snapshot = {"checkpoint": None, "metrics": list(metric_names), "role": role}
    if checkpoint_path is not None:
        nets, meta = load_checkpoint(checkpoint_path)
        net = _net_for_role(nets, role)
        params = _frame_params_from_meta(meta)
        snapshot.update(
            {"checkpoint": str(checkpoint_path), "config": meta.get("config", {}),
             "config_hash": meta.get("config_hash")}
        )
    pairs = manifest.test_entries
    if not pairs:
        raise MetricUnavailableError("manifest has no test entries")

    rows = []
    for entry in sorted(pairs, key=lambda e: e.id):
        clean, noisy = load_pair(entry)
        processed = enhance_signal(net, noisy, params) if net is not None else noisy
        row = {"id": entry.id}
        for name in metric_names:
            try:
                raw, _ = metrics.evaluate_pair(
                    processed, clean, name, external=external.get(name)
                )
                row[name] = raw
            except MetricUnavailableError:
                row[name] = None
        rows.append(row)
    return EvalReport(rows, metric_names, snapshot)


# ---------------------------------------------------------------------------
# Spectrogram export
# ---------------------------------------------------------------------------

def export_spectrograms(checkpoint_path, clean_wav, noisy_wav, out_dir) -> list:
    """Write the pipeline matrices for one pair as .npy plus rendered .png.

    Always: clean features, noisy features, generator mask, enhanced
    features; with a degenerator in the checkpoint additionally its mask and
    the degraded features.  Returns the .npy paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    nets, meta = load_checkpoint(checkpoint_path)
    params = _frame_params_from_meta(meta)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    clean = read_wav(clean_wav)
    noisy = read_wav(noisy_wav)
    clean_feats, _ = compute_features(clean, params)
    noisy_feats, frames = compute_features(noisy, params)

    matrices = {
        "clean_features": clean_feats,
        "noisy_features": noisy_feats,
    }
    gen_mask = mask_forward(nets["generator"], noisy_feats)
    matrices["generator_mask"] = gen_mask
    matrices["enhanced_features"] = np.log1p(apply_mask(gen_mask, frames.magnitude))
    if "degenerator" in nets:
        degen_mask = mask_forward(nets["degenerator"], noisy_feats)
        matrices["degenerator_mask"] = degen_mask
        matrices["degraded_features"] = np.log1p(apply_mask(degen_mask, frames.magnitude))

    hop_s = params.hop_length / noisy.sample_rate
    nyquist = noisy.sample_rate / 2.0
    paths = []
    for name, matrix in matrices.items():
        npy_path = out_dir / f"{name}.npy"
        np.save(npy_path, matrix)
        paths.append(npy_path)
        fig, ax = plt.subplots(figsize=(6, 4))
        im = ax.imshow(
            matrix.T,
            origin="lower",
            aspect="auto",
            extent=[0.0, matrix.shape[0] * hop_s, 0.0, nyquist],
        )
        ax.set_xlabel("time (s)")
        ax.set_ylabel("frequency (Hz)")
        ax.set_title(name.replace("_", " "))
        fig.colorbar(im, ax=ax)
        fig.savefig(out_dir / f"{name}.png", dpi=120)
        plt.close(fig)
    return paths
