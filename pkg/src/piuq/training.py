"""Alternating critic/generator optimisation, checkpoints and the patch-weight grid search."""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import UnpairedDataset
from .losses import LossBreakdown, Mode, critic_risk, generator_risk
from .networks import Critic, CriticSpec, Generator, GeneratorSpec, spec_hash
from .patch import sample_patch_configs

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "piuq-checkpoint/1"


class CheckpointError(RuntimeError):
    """Checkpoint exists but cannot be used."""


class CorruptCheckpointError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainRunConfig:
    mode: Mode = Mode.UAPI
    batch_size: int = 8
    critic_steps_per_cycle: int = 15
    generator_updates_total: int = 15000
    lr_generator: float = 5e-5
    lr_critic: float = 2e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    penalty: float = 10.0
    patch_weight: float = 10.0
    patch_penalty: bool = False
    use_patches: bool = True
    seed: int = 0
    checkpoint_every: int = 1000
    generator_width: int = 22
    critic_width: int = 42
    dataset: str | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.batch_size < 1 or self.critic_steps_per_cycle < 1 or self.generator_updates_total < 0:
            raise ValueError("batch size, critic steps and update count must be positive")
        if self.penalty < 0 or self.patch_weight < 0:
            raise ValueError("penalty and patch weight must be non-negative")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainRunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "TrainRunConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(raw)

    def overrides(self) -> dict:
        """Fields that differ from the published defaults."""
        default = TrainRunConfig().to_dict()
        return {k: v for k, v in self.to_dict().items() if default[k] != v}


class EpochSampler:
    """Minibatches without replacement, reshuffled every epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self, b: int) -> np.ndarray:
        idx = []
        while len(idx) < b:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(b - len(idx), self.n - self.pos)
            idx.extend(self.order[self.pos:self.pos + take].tolist())
            self.pos += take
        return np.asarray(idx)

    def state(self):
        return {"order": torch.as_tensor(self.order), "pos": self.pos}

    def load(self, state):
        self.order = state["order"].numpy()
        self.pos = int(state["pos"])


@contextmanager
def frozen(module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


class Trainer:
    """Owns networks, optimisers and random state for one run."""

    def __init__(self, cfg: TrainRunConfig, data: UnpairedDataset, out_dir=None):
        if not data.inputs or not data.targets:
            raise ValueError("both domains must be non-empty")
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.x_all = torch.as_tensor(data.input_array(), dtype=torch.float32)
        self.y_all = torch.as_tensor(data.target_array(), dtype=torch.float32)
        self.d = self.x_all.shape[-1]

        torch.manual_seed(cfg.seed)
        self.generator_spec = GeneratorSpec(self.x_all.shape[1], self.y_all.shape[1], cfg.generator_width)
        self.critic_spec = CriticSpec(self.y_all.shape[1], cfg.critic_width)
        self.generator = Generator(self.generator_spec)
        self.critic = Critic(self.critic_spec)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr_generator, betas=betas, eps=cfg.adam_eps)
        self.opt_c = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr_critic, betas=betas, eps=cfg.adam_eps)

        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rng = np.random.default_rng(seeds[0])
        self.torch_rng = torch.Generator().manual_seed(int(seeds[1].generate_state(1)[0]))
        sx, sy = (np.random.default_rng(s) for s in seeds[2].spawn(2))
        self.x_sampler = EpochSampler(len(self.x_all), sx)
        self.y_sampler = EpochSampler(len(self.y_all), sy)
        self.critic_steps = 0
        self.generator_steps = 0
        self.records: list[dict] = []
        self._t0 = time.perf_counter()

    @property
    def spec_hash(self) -> str:
        return spec_hash(self.generator_spec, self.critic_spec)

    def _check_finite(self, loss: LossBreakdown, phase: str):
        if not torch.isfinite(loss.total):
            path = None
            if self.out_dir is not None:
                path = self.out_dir / "diagnostic.pt"
                save_checkpoint(self, path)
            raise NonFiniteLossError(
                f"non-finite {phase} loss at generator step {self.generator_steps}, "
                f"critic step {self.critic_steps} (diagnostic checkpoint: {path})"
            )

    def _record(self, phase: str, loss: LossBreakdown):
        rec = {"phase": phase, "critic_step": self.critic_steps, "generator_step": self.generator_steps}
        rec.update(loss.as_record())
        rec["wall_time"] = round(time.perf_counter() - self._t0, 4)
        self.records.append(rec)
        return rec

    def critic_step(self) -> dict:
        b = self.cfg.batch_size
        x = self.x_all[self.x_sampler.next(b)]
        y = self.y_all[self.y_sampler.next(b)]
        cfgs = sample_patch_configs(self.rng, self.d, b)
        self.opt_c.zero_grad(set_to_none=True)
        loss = critic_risk(self.critic, self.generator, y, x, self.cfg.penalty, cfgs,
                           rng=self.torch_rng, patch_penalty=self.cfg.patch_penalty,
                           use_patches=self.cfg.use_patches)
        self._check_finite(loss, "critic")
        loss.total.backward()
        self.opt_c.step()
        self.critic_steps += 1
        return self._record("critic", loss)

    def generator_step(self) -> dict:
        b = self.cfg.batch_size
        x = self.x_all[self.x_sampler.next(b)]
        cfgs = sample_patch_configs(self.rng, self.d, b)
        self.opt_g.zero_grad(set_to_none=True)
        with frozen(self.critic):
            loss = generator_risk(self.generator, self.critic, x, cfgs, self.cfg.patch_weight, self.cfg.mode,
                                  self.cfg.use_patches)
            self._check_finite(loss, "generator")
            loss.total.backward()
        self.opt_g.step()
        self.generator_steps += 1
        return self._record("generator", loss)

    def run(self, log_file=None, progress_every: int = 0):
        """Cycle ``critic_steps_per_cycle`` critic updates and one generator update until done."""
        fh = open(log_file, "a") if log_file is not None else None
        try:
            while self.generator_steps < self.cfg.generator_updates_total:
                for _ in range(self.cfg.critic_steps_per_cycle):
                    rec = self.critic_step()
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                rec = self.generator_step()
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if progress_every and self.generator_steps % progress_every == 0:
                    log.info("generator step %d: %s", self.generator_steps, rec)
                if (self.out_dir is not None and self.cfg.checkpoint_every
                        and self.generator_steps % self.cfg.checkpoint_every == 0):
                    save_checkpoint(self, self.out_dir / f"checkpoint-{self.generator_steps:06d}.pt")
        finally:
            if fh:
                fh.close()
        return self


def train(cfg: TrainRunConfig, data: UnpairedDataset, out_dir=None, progress_every: int = 0) -> Trainer:
    """Run a full training; with ``out_dir`` writes config, log and checkpoints there."""
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
        log_file = out_dir / "train_log.jsonl"
        log_file.write_text("")
        if cfg.overrides():
            log.info("config overrides: %s", cfg.overrides())
    trainer = Trainer(cfg, data, out_dir).run(log_file, progress_every)
    if out_dir is not None:
        save_checkpoint(trainer, out_dir / "checkpoint-final.pt")
    return trainer


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(trainer: Trainer, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "spec_hash": trainer.spec_hash,
        "generator_spec": asdict(trainer.generator_spec),
        "critic_spec": asdict(trainer.critic_spec),
        "config": trainer.cfg.to_dict(),
        "critic_steps": trainer.critic_steps,
        "generator_steps": trainer.generator_steps,
        "generator": trainer.generator.state_dict(),
        "critic": trainer.critic.state_dict(),
        "opt_g": trainer.opt_g.state_dict(),
        "opt_c": trainer.opt_c.state_dict(),
        "np_rng": trainer.rng.bit_generator.state,
        "torch_rng": trainer.torch_rng.get_state(),
        "x_sampler": {"rng": trainer.x_sampler.rng.bit_generator.state, **trainer.x_sampler.state()},
        "y_sampler": {"rng": trainer.y_sampler.rng.bit_generator.state, **trainer.y_sampler.state()},
    }, path)


def read_checkpoint(path) -> dict:
    """Load and validate a checkpoint payload without building a trainer."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    stored = spec_hash(GeneratorSpec(**payload["generator_spec"]), CriticSpec(**payload["critic_spec"]))
    if stored != payload["spec_hash"]:
        raise CorruptCheckpointError(f"{path}: spec hash does not match stored specs")
    return payload


def load_checkpoint(path, data: UnpairedDataset | None = None, cfg: TrainRunConfig | None = None,
                    out_dir=None) -> Trainer:
    """Restore a :class:`Trainer`; ``cfg`` (default: the stored one) must describe the same networks."""
    payload = read_checkpoint(path)
    cfg = cfg or TrainRunConfig.from_dict(payload["config"])
    if data is None:
        raise ValueError("a dataset is required to resume training; use load_generator for inference")
    trainer = Trainer(cfg, data, out_dir)
    if trainer.spec_hash != payload["spec_hash"]:
        raise SpecMismatchError(
            f"{path}: checkpoint networks ({payload['generator_spec']}, {payload['critic_spec']}) "
            f"do not match requested ({asdict(trainer.generator_spec)}, {asdict(trainer.critic_spec)})"
        )
    trainer.generator.load_state_dict(payload["generator"])
    trainer.critic.load_state_dict(payload["critic"])
    trainer.opt_g.load_state_dict(payload["opt_g"])
    trainer.opt_c.load_state_dict(payload["opt_c"])
    trainer.rng.bit_generator.state = payload["np_rng"]
    trainer.torch_rng.set_state(payload["torch_rng"])
    for sampler, key in ((trainer.x_sampler, "x_sampler"), (trainer.y_sampler, "y_sampler")):
        sampler.rng.bit_generator.state = payload[key]["rng"]
        sampler.load(payload[key])
    trainer.critic_steps = payload["critic_steps"]
    trainer.generator_steps = payload["generator_steps"]
    return trainer


def load_generator(path, expected_spec: GeneratorSpec | None = None) -> tuple[Generator, Mode]:
    """Generator and training mode from a checkpoint, for inference."""
    payload = read_checkpoint(path)
    spec = GeneratorSpec(**payload["generator_spec"])
    if expected_spec is not None and expected_spec != spec:
        raise SpecMismatchError(f"{path}: generator spec {spec} != expected {expected_spec}")
    gen = Generator(spec)
    gen.load_state_dict(payload["generator"])
    gen.eval()
    return gen, Mode(payload["config"]["mode"])


# ---------------------------------------------------------------------------
# patch-weight grid search

@dataclass
class GridRow:
    weight: float
    ssim: float
    psnr: float


@dataclass
class GridResult:
    rows: list[GridRow]
    recommended: float

    @property
    def pure_adversarial(self) -> bool:
        return [r.weight for r in self.rows] == [0.0]


def grid_search_lambda(cfg: TrainRunConfig, data: UnpairedDataset, grid, run_fraction: float = 0.1,
                       out_dir=None) -> GridResult:
    """Short runs per candidate weight, scored by clean-input SSIM on the evaluation pairs.

    Recommends the largest SSIM, ties going to the smaller weight.
    """
    from .evaluation import Scenario, evaluate

    grid = sorted({float(w) for w in grid})
    if not grid:
        raise ValueError("empty patch-weight grid")
    if not data.eval_pairs:
        raise ValueError("grid search needs evaluation pairs")
    steps = max(1, int(round(run_fraction * cfg.generator_updates_total)))
    rows = []
    for w in grid:
        run_cfg = replace(cfg, patch_weight=w, generator_updates_total=steps)
        sub = Path(out_dir) / f"lambda-{w:g}" if out_dir is not None else None
        trainer = train(run_cfg, data, sub)
        report = evaluate(trainer.generator, data.eval_pairs, [Scenario.parse("GN0")], mode=cfg.mode,
                          seed=cfg.seed)
        row = report.rows[0]
        rows.append(GridRow(w, row.ssim_mean, row.psnr_mean))
    best = max(rows, key=lambda r: (r.ssim, -r.weight))
    return GridResult(rows, best.weight)
