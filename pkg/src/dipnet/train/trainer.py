"""Training loop for the four modes.

* ``S``: one noise level, L1 only.
* ``B``: blind (noise level drawn per patch), L1 only.
* ``BF``: blind with the feature-level prior. One backward pass of
  ``L1 + lambda1 * CE`` updates both the network and the noise-level
  classifier; the gradient-reversal layer flips the classifier term for the
  network.
* ``BP``: blind with the pixel-level prior. Per batch, one discriminator step
  on detached outputs, then one generator step on ``L1 + lambda2 * L_adv``
  with the discriminator frozen.

Batches, noise and initial weights are all derived from ``seed``, so a run is
reproducible and can resume from a checkpoint bitwise.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..autodiff import NonFiniteError, Tensor
from ..checkpoint import Checkpoint, blobs_from_state, fingerprint, load_checkpoint, save_checkpoint
from ..data import PAPER_SIGMAS, BatchStream, DatasetSpec, NoiseMode
from ..losses import (
    combined_feat_loss,
    combined_pix_loss,
    discriminator_loss,
    generator_loss,
    l1_loss,
    multiclass_ce_loss,
)
from ..model import (
    ModelConfig,
    build_extractor,
    build_feature_discriminator,
    build_pixel_discriminator,
    build_transform_net,
    forward_denoise,
)
from .diagnostics import (
    discriminator_report,
    fused_features,
    make_probe_set,
    retrained_probe_report,
)
from .evaluate import evaluate
from .optim import Adam, cosine_lr

MODES = ("S", "B", "BF", "BP")
METRIC_COLUMNS = ("step", "sigma", "psnr_db", "ssim", "l1", "prior_loss", "hdiv", "lr", "wall_s")
DIAG_COLUMNS = ("step", "disc_accuracy", "disc_hdiv", "probe_accuracy", "probe_hdiv", "probe_hdiv_raw")


class DivergenceError(FloatingPointError):
    """A loss or activation became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "S"
    sigma: float = 25.0  # mode S
    noise: str = "set"  # blind modes: "set" draws from sigma_set, "range" from sigma_range
    sigma_set: Tuple[float, ...] = PAPER_SIGMAS
    sigma_range: Tuple[float, float] = (15.0, 75.0)
    batch_size: int = 64
    max_steps: int = 2000
    lr0: float = 1e-3
    lambda1: float = 0.001
    lambda2: float = 0.001
    lambda_grl: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    eval_sigmas: Tuple[float, ...] = ()  # empty: sigma for S, sigma_set otherwise
    eval_seed: int = 0
    diag_per_class: int = 100
    hdiv_probe: str = "retrained"  # retrained | discriminator
    probe_steps: int = 150
    checkpoint_every: int = 0  # 0: only at the end
    record_wall_clock: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sigma_set", tuple(float(s) for s in self.sigma_set))
        object.__setattr__(self, "sigma_range", tuple(float(s) for s in self.sigma_range))
        object.__setattr__(self, "eval_sigmas", tuple(float(s) for s in self.eval_sigmas))
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise not in ("set", "range"):
            raise ValueError(f"noise must be 'set' or 'range', got {self.noise!r}")
        if self.mode == "BF" and self.noise != "set":
            raise ValueError("mode BF needs noise = set (the classifier predicts a noise class)")
        for name in ("lambda1", "lambda2", "lambda_grl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.batch_size <= 0 or self.max_steps <= 0:
            raise ValueError("batch_size and max_steps must be positive")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be non-negative")
        if self.hdiv_probe not in ("retrained", "discriminator"):
            raise ValueError("hdiv_probe must be 'retrained' or 'discriminator'")
        if self.hdiv_probe == "discriminator" and self.mode != "BF":
            raise ValueError("hdiv_probe = discriminator needs mode BF")
        if self.diag_per_class < 2 or self.probe_steps < 1:
            raise ValueError("diag_per_class must be at least 2 and probe_steps at least 1")
        # constructing the noise mode checks sigma_set / sigma_range
        self.noise_mode()

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small batches and a short schedule for a single CPU."""
        base = dict(batch_size=8, max_steps=2000, eval_every=500)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def noise_mode(self) -> NoiseMode:
        if self.mode == "S":
            return NoiseMode.fixed(self.sigma)
        if self.noise == "set":
            return NoiseMode.blind_set(self.sigma_set)
        return NoiseMode.blind_range(*self.sigma_range)

    def resolved_eval_sigmas(self) -> Tuple[float, ...]:
        if self.eval_sigmas:
            return self.eval_sigmas
        if self.mode == "S":
            return (self.sigma,)
        return self.sigma_set if self.noise == "set" else (float(np.mean(self.sigma_range)),)

    def has_diagnostics(self) -> bool:
        return self.mode != "S" and self.noise == "set" and len(self.sigma_set) >= 2


def dataset_to_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)


def _fmt(x: float) -> str:
    return repr(float(x))


class Trainer:
    """Owns the models, optimizers and data stream for one run.

    ``out_dir`` (optional) receives ``metrics.csv``, ``diagnostics.csv`` and
    ``checkpoint.ckpt``.
    """

    def __init__(self, tc: TrainConfig, mc: ModelConfig, spec: DatasetSpec, out_dir=None):
        if tc.mode == "BF" and mc.num_noise_classes != len(tc.sigma_set):
            raise ValueError(f"num_noise_classes ({mc.num_noise_classes}) must equal the number of noise "
                             f"levels in sigma_set ({len(tc.sigma_set)})")
        self.tc, self.mc, self.spec = tc, mc, spec
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.images = spec.load()
        self.eval_images = spec.load_eval()
        self.stream = BatchStream(self.images, tc.batch_size, spec.patch_size, tc.noise_mode(), tc.seed)

        self.net = build_transform_net(mc, [tc.seed, 0, 1])
        self.fdisc = build_feature_discriminator(mc, [tc.seed, 0, 2]) if tc.mode == "BF" else None
        self.pdisc = None
        if tc.mode == "BP":
            extractor = build_extractor(mc.extractor, mc.extractor_channels, mc.extractor_seed)
            self.pdisc = build_pixel_discriminator(mc, extractor, [tc.seed, 0, 3])
        self.opts: Dict[str, Adam] = OrderedDict()
        for name, module in self.modules().items():
            self.opts[name] = Adam(module.trainable_parameters(), tc.beta1, tc.beta2, tc.adam_eps)

        self.step = 0
        self.last_lr = float("nan")
        self.last_hdiv = float("nan")
        self.wall_s = 0.0
        self.accum = {"l1": 0.0, "prior": 0.0, "count": 0}
        self.records: List[dict] = []
        self.diagnostics: List[dict] = []
        self._probe = None

    # -- structure ---------------------------------------------------------
    def modules(self) -> "OrderedDict[str, object]":
        out = OrderedDict(gen=self.net)
        if self.fdisc is not None:
            out["fdisc"] = self.fdisc
        if self.pdisc is not None:
            out["pdisc"] = self.pdisc
        return out

    def fingerprint(self) -> str:
        return fingerprint({"model": self.mc.descriptor(), "mode": self.tc.mode})

    # -- one update --------------------------------------------------------
    def lr_at(self, index: int) -> float:
        return cosine_lr(index, self.tc.max_steps, self.tc.lr0)

    def train_step(self, observer: Optional[Callable[[str], None]] = None) -> Tuple[float, float]:
        """Apply update number ``self.step`` and return ``(l1, prior_loss)``.

        ``observer`` (BP only) is called with ``"disc"`` after the
        discriminator update and ``"gen"`` after the generator update.
        """
        index = self.step
        if index >= self.tc.max_steps:
            raise RuntimeError("training already finished")
        batch = self.stream.batch(index)
        lr = self.lr_at(index)
        try:
            l1, prior = self._update(batch, lr, observer)
        except NonFiniteError as exc:
            raise DivergenceError(f"step {index + 1}: {exc}") from None
        if not (math.isfinite(l1) and math.isfinite(prior)):
            raise DivergenceError(f"step {index + 1}: non-finite loss (l1={l1}, prior={prior})")
        self.step = index + 1
        self.last_lr = lr
        self.accum["l1"] += l1
        self.accum["prior"] += prior
        self.accum["count"] += 1
        return l1, prior

    def _update(self, batch, lr: float, observer) -> Tuple[float, float]:
        tc = self.tc
        noisy, clean = Tensor(batch.noisy), Tensor(batch.clean)
        gen_opt = self.opts["gen"]
        if tc.mode in ("S", "B"):
            gen_opt.zero_grad()
            l1 = l1_loss(forward_denoise(self.net, noisy, "train").denoised, clean)
            l1.backward()
            gen_opt.step(lr)
            return l1.item(), 0.0

        if tc.mode == "BF":
            disc_opt = self.opts["fdisc"]
            gen_opt.zero_grad()
            disc_opt.zero_grad()
            out = forward_denoise(self.net, noisy, "train")
            l1 = l1_loss(out.denoised, clean)
            ce = multiclass_ce_loss(self.fdisc(out.fused_features, tc.lambda_grl), batch.class_index)
            combined_feat_loss(l1, ce, tc.lambda1).backward()
            gen_opt.step(lr)
            disc_opt.step(lr)
            return l1.item(), ce.item()

        # BP: generator forward once (its batch statistics update once per batch)
        disc_opt = self.opts["pdisc"]
        out = forward_denoise(self.net, noisy, "train")
        disc_opt.zero_grad()
        self.pdisc.train(True)
        d_loss = discriminator_loss(self.pdisc(out.denoised.detach()), self.pdisc(clean))
        grads = d_loss.backward()
        disc_ids = {id(p) for p in self.pdisc.parameters()}
        assert all(id(t) in disc_ids for t in grads), "discriminator loss reached the generator"
        disc_opt.step(lr)
        if observer is not None:
            observer("disc")

        gen_opt.zero_grad()
        # backward stays inside the block: leaves are filtered by requires_grad at backward time
        with self.pdisc.frozen(), self.pdisc.stats_frozen():
            g_adv = generator_loss(self.pdisc(out.denoised))
            l1 = l1_loss(out.denoised, clean)
            grads = combined_pix_loss(l1, g_adv, tc.lambda2).backward()
        assert not any(id(t) in disc_ids for t in grads), "generator loss reached the discriminator"
        gen_opt.step(lr)
        if observer is not None:
            observer("gen")
        return l1.item(), g_adv.item()

    # -- evaluation and diagnostics ----------------------------------------
    def probe_set(self):
        if self._probe is None:
            self._probe = make_probe_set(self.eval_images, self.tc.sigma_set, self.tc.diag_per_class,
                                         self.spec.patch_size, self.tc.eval_seed)
        return self._probe

    def run_diagnostics(self) -> dict:
        """Domain-classifier accuracy and H-divergence on held-out fused features."""
        tc = self.tc
        probe = self.probe_set()
        feats = fused_features(self.net, probe.noisy)
        m = len(tc.sigma_set)
        row = {"step": self.step}
        if self.fdisc is not None:
            rep = discriminator_report(self.fdisc, feats, probe.labels, m)
            row.update(disc_accuracy=rep.accuracy, disc_hdiv=rep.hdiv.value)
        else:
            row.update(disc_accuracy=float("nan"), disc_hdiv=float("nan"))
        rep = retrained_probe_report(self.mc, feats, probe.labels, m, steps=tc.probe_steps,
                                     seed=[tc.eval_seed, self.step])
        row.update(probe_accuracy=rep.accuracy, probe_hdiv=rep.hdiv.value, probe_hdiv_raw=rep.hdiv.raw)
        self.last_hdiv = row["disc_hdiv"] if tc.hdiv_probe == "discriminator" else row["probe_hdiv"]
        self.diagnostics.append(row)
        return row

    def record(self) -> List[dict]:
        """Evaluate at the configured noise levels and emit one row per level."""
        n = max(self.accum["count"], 1)
        l1, prior = self.accum["l1"] / n, self.accum["prior"] / n
        if self.tc.has_diagnostics():
            self.run_diagnostics()
        rows = []
        for sigma in self.tc.resolved_eval_sigmas():
            res = evaluate(self.net, self.eval_images, sigma, self.tc.eval_seed)
            rows.append(dict(step=self.step, sigma=sigma, psnr_db=res.psnr_db, ssim=res.ssim, l1=l1,
                             prior_loss=prior, hdiv=self.last_hdiv, lr=self.last_lr,
                             wall_s=self.wall_s if self.tc.record_wall_clock else 0.0))
        self.accum = {"l1": 0.0, "prior": 0.0, "count": 0}
        self.records.extend(rows)
        return rows

    # -- loop --------------------------------------------------------------
    def run(self, until: Optional[int] = None, save: bool = True) -> List[dict]:
        """Train up to step ``until`` (default: ``max_steps``), recording on
        cadence, and save a checkpoint at the end."""
        tc = self.tc
        until = tc.max_steps if until is None else min(until, tc.max_steps)
        if self.step == 0 and tc.has_diagnostics() and not self.diagnostics:
            self.run_diagnostics()
            self._write_csvs()
        while self.step < until:
            t0 = time.perf_counter()
            self.train_step()
            self.wall_s += time.perf_counter() - t0
            s = self.step
            if (tc.eval_every and s % tc.eval_every == 0) or s == tc.max_steps:
                self.record()
                self._write_csvs()
            if save and tc.checkpoint_every and s % tc.checkpoint_every == 0:
                self.save()
        if save:
            self.save()
        return self.records

    # -- persistence -------------------------------------------------------
    def metrics_csv(self) -> str:
        return _csv_text(METRIC_COLUMNS, self.records)

    def diagnostics_csv(self) -> str:
        return _csv_text(DIAG_COLUMNS, self.diagnostics)

    def _write_csvs(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.out_dir / "metrics.csv", self.metrics_csv())
        if self.tc.has_diagnostics():
            _atomic_write(self.out_dir / "diagnostics.csv", self.diagnostics_csv())

    def checkpoint(self) -> Checkpoint:
        blobs = OrderedDict()
        for name, module in self.modules().items():
            blobs.update(blobs_from_state(f"{name}.", module.state_dict()))
        for name, opt in self.opts.items():
            blobs.update(blobs_from_state("", opt.state_blobs(f"opt.{name}.")))
        header = {
            "kind": "dipnet-train",
            "fingerprint": self.fingerprint(),
            "model_config": self.mc.descriptor(),
            "train_config": self.tc.to_dict(),
            "dataset": dataset_to_dict(self.spec),
            "step": self.step,
            "optimizer_steps": {name: opt.state.step for name, opt in self.opts.items()},
            "accum": dict(self.accum),
            "last_lr": self.last_lr,
            "last_hdiv": self.last_hdiv,
            "wall_s": self.wall_s if self.tc.record_wall_clock else 0.0,
            "rng": {"scheme": "per-step", "seed": self.tc.seed, "next_step": self.step},
            "records": self.records,
            "diagnostics": self.diagnostics,
        }
        return Checkpoint(header, blobs)

    def save(self, path=None) -> Optional[Path]:
        if path is None:
            if self.out_dir is None:
                return None
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "checkpoint.ckpt"
        save_checkpoint(self.checkpoint(), path)
        return Path(path)

    @classmethod
    def from_checkpoint(cls, path, out_dir=None, max_steps: Optional[int] = None) -> "Trainer":
        """Rebuild a run from a checkpoint; training continues from its step."""
        ckpt = load_checkpoint(path)
        h = ckpt.header
        if h.get("kind") != "dipnet-train":
            raise ValueError(f"{path} is not a training checkpoint")
        tc = TrainConfig(**h["train_config"])
        if max_steps is not None:
            tc = tc.with_(max_steps=max_steps)
        trainer = cls(tc, ModelConfig(**h["model_config"]), DatasetSpec(**h["dataset"]), out_dir)
        if trainer.fingerprint() != h["fingerprint"]:
            raise ValueError("checkpoint fingerprint does not match its own configuration")
        trainer.load_state(ckpt)
        return trainer

    def load_state(self, ckpt: Checkpoint) -> None:
        h = ckpt.header
        for name, module in self.modules().items():
            module.load_state_dict(ckpt.section(f"{name}."))
        for name, opt in self.opts.items():
            opt.load_state_blobs(ckpt.blobs, f"opt.{name}.", h["optimizer_steps"][name])
        self.step = int(h["step"])
        self.accum = dict(h["accum"])
        self.last_lr = float(h["last_lr"])
        self.last_hdiv = float(h["last_hdiv"])
        self.wall_s = float(h["wall_s"])
        self.records = [dict(r) for r in h["records"]]
        self.diagnostics = [dict(r) for r in h["diagnostics"]]
        self._write_csvs()


def load_generator(path):
    """Transformation network (eval-ready) and the header of a checkpoint."""
    ckpt = load_checkpoint(path)
    mc = ModelConfig(**ckpt.header["model_config"])
    net = build_transform_net(mc)
    net.load_state_dict(ckpt.section("gen."))
    net.eval()
    return net, ckpt.header


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r["step"]] + [_fmt(r[c]) for c in columns[1:]])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train(tc: TrainConfig, mc: ModelConfig, spec: DatasetSpec, out_dir=None) -> Trainer:
    trainer = Trainer(tc, mc, spec, out_dir)
    trainer.run()
    return trainer
