"""Training loop: sample a bin, run both branches, compose the objective, update."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data import BinSample
from ..diffcore.optim import ParameterStore, adam_cosine_step
from ..model import OmniGaussian, depth_init_for, step_loss
from ..splat.io import ensure_dir
from ..splat.render import RenderSettings
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .dataset import list_bins, load_bin

log = logging.getLogger(__name__)

LOG_NAME = "loss_log.jsonl"


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; the CLI maps it to exit code 3."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


def build_model(cfg: RunConfig) -> OmniGaussian:
    """Deterministic initialization from ``cfg.train.seed`` (drawn in float64, then cast)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(cfg.train.seed)
        model = OmniGaussian(cfg.model, cfg.volume)
    finally:
        torch.set_default_dtype(prev)
    return model.to(cfg.torch_dtype)


def bin_depth_seed(cfg: RunConfig, sample: BinSample) -> int:
    return int(np.random.SeedSequence([cfg.train.seed, zlib.crc32(sample.name.encode())]).generate_state(1)[0])


def init_depth_for(cfg: RunConfig, sample: BinSample) -> torch.Tensor:
    """Noisy depth initialization for one bin, fixed per (seed, bin)."""
    d = depth_init_for(sample, cfg.train.depth_noise, bin_depth_seed(cfg, sample))
    return torch.as_tensor(d, dtype=cfg.torch_dtype)


def check_sample(cfg: RunConfig, sample: BinSample) -> None:
    sc = cfg.scene
    cam = sample.input_cams[0]
    if (cam.width, cam.height) != (sc.width, sc.height) or sample.n_input != sc.K:
        raise ConfigError(f"bin {sample.name}: {sample.n_input} views of {cam.width}x{cam.height}, "
                          f"config expects {sc.K} of {sc.width}x{sc.height}")
    if sample.spec != cfg.volume:
        raise ConfigError(f"bin {sample.name}: volume {sample.spec} differs from config {cfg.volume}")


class BinCache:
    def __init__(self, cfg: RunConfig, data_dir):
        self.cfg = cfg
        self.paths = list_bins(data_dir)
        self._cache: dict[int, tuple[BinSample, torch.Tensor]] = {}

    def __len__(self):
        return len(self.paths)

    def get(self, i: int):
        if i not in self._cache:
            s = load_bin(self.paths[i], self.cfg.torch_dtype)
            check_sample(self.cfg, s)
            self._cache[i] = (s, init_depth_for(self.cfg, s))
        return self._cache[i]


@dataclass
class TrainResult:
    model: OmniGaussian
    store: ParameterStore
    rng: np.random.Generator
    records: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _dump(out_dir: Path, step: int, values: dict, store: ParameterStore, reason: str) -> Path:
    p = out_dir / "abort_dump.json"
    norms = {k: (v if math.isfinite(v) else repr(v)) for k, v in store.norm_table().items()}
    vals = {k: (v if math.isfinite(v) else repr(v)) for k, v in values.items()}
    p.write_text(json.dumps({"step": step, "reason": reason, "components": vals, "param_norms": norms}, indent=1))
    return p


class Trainer:
    def __init__(self, cfg: RunConfig, data_dir, out_dir, resume=None, settings: RenderSettings = RenderSettings(),
                 lpips=None):
        self.cfg, self.settings, self.lpips = cfg, settings, lpips
        self.out = ensure_dir(out_dir)
        self.bins = BinCache(cfg, data_dir)
        self.model = build_model(cfg)
        self.store = ParameterStore.from_module(self.model)
        if resume is not None:
            ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
            if ck.config != cfg:
                raise ConfigError("checkpoint config differs from the run config")
            ck.restore(self.store)
            self.rng = ck.generator()
        else:
            self.rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 1]))
        self.schedule = cfg.schedule()

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.cfg, self.store, self.rng)

    def save(self, name: str) -> Path:
        return save_checkpoint(self.out / name, self.checkpoint())

    def sample_step(self):
        t = self.cfg.train
        b = int(self.rng.integers(len(self.bins)))
        sample, depth = self.bins.get(b)
        nidx = self.rng.choice(sample.n_novel, size=min(t.novel_views_per_step, sample.n_novel), replace=False)
        iidx = self.rng.choice(sample.n_input, size=min(t.input_views_per_step, sample.n_input), replace=False)
        return sample, depth, [int(i) for i in nidx], [int(i) for i in iidx]

    def step(self) -> dict:
        cfg = self.cfg
        t = self.store.step
        sample, depth, nidx, iidx = self.sample_step()
        res = step_loss(self.model, sample, depth, nidx, iidx, cfg.loss, self.settings,
                        lpips=self.lpips, background=cfg.train.background)
        rep = res.report
        values = rep.values()
        if not math.isfinite(values["total"]):
            p = _dump(self.out, t, values, self.store, "non-finite loss")
            raise NumericalAbort(f"non-finite loss at step {t}", p)
        self.store.zero_grad()
        rep.total.backward()
        try:
            st = adam_cosine_step(self.store, schedule=self.schedule, betas=cfg.optim.betas, eps=cfg.optim.eps,
                                  weight_decay=cfg.optim.weight_decay, clip_norm=cfg.optim.clip_norm)
        except FloatingPointError as e:
            p = _dump(self.out, t, values, self.store, str(e))
            raise NumericalAbort(f"non-finite gradient at step {t}: {e}", p) from e
        rec = {"step": t, "bin": sample.name, "novel": nidx, "input": iidx, **values,
               "recomposition_error": rep.recomposition_error(), "mask_fraction": rep.mask_fraction,
               "lr": st["lr"], "grad_norm": st["grad_norm"]}
        return rec

    def run(self, steps: int | None = None, time_limit: float | None = None) -> TrainResult:
        """Train up to ``cfg.train.steps`` total updates (or ``steps`` more), logging every step."""
        cfg = self.cfg
        end = cfg.train.steps if steps is None else min(self.store.step + steps, cfg.train.steps)
        records = []
        t0 = time.time()
        with open(self.out / LOG_NAME, "a", encoding="utf-8") as fh:
            while self.store.step < end:
                rec = self.step()
                records.append(rec)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                done = self.store.step
                if cfg.train.checkpoint_every and done % cfg.train.checkpoint_every == 0:
                    self.save(f"ckpt_{done:06d}.omni")
                if done % 50 == 0:
                    log.info("step %d total %.5f (%.1fs)", done, rec["total"], time.time() - t0)
                if time_limit is not None and time.time() - t0 > time_limit:
                    log.warning("time limit reached at step %d", done)
                    break
        final = self.save("final.omni")
        return TrainResult(self.model, self.store, self.rng, records, final)


def train(cfg: RunConfig, data_dir, out_dir, resume=None, steps: int | None = None, **kw) -> TrainResult:
    return Trainer(cfg, data_dir, out_dir, resume, **kw).run(steps)


def read_loss_log(path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / LOG_NAME
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def model_from_checkpoint(ck: Checkpoint) -> OmniGaussian:
    model = OmniGaussian(ck.config.model, ck.config.volume).to(ck.config.torch_dtype)
    ck.restore(ParameterStore.from_module(model))
    return model
