"""Two-phase training (generator pre-training, then GAN) with simulated
synchronous data parallelism.

Each optimizer step follows one protocol, for the generator and the
discriminator alike:

1. the owner advances spectral-norm estimates and publishes the snapshot;
2. the batch is cut into W contiguous equal shards;
3. every worker computes gradients of its shard's mean loss against the same
   snapshot, without mutating anything (batch-norm statistics are captured,
   not applied);
4. a barrier collects all W results; the owner averages gradients in worker
   order, applies the averaged batch-norm statistics and takes one optimizer
   step.

Because shards are equal and aggregation order is fixed, the averaged
gradient equals the full-batch gradient (for networks without train-mode
batch norm) and the trajectory does not depend on thread scheduling.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_into, save_checkpoint
from .config import ConfigError, TrainConfig
from .imaging import Image, ImagePair, denormalize_sr, normalize_lr, sample_batch
from .layers import BatchNorm2d, Module, collect_batch_stats
from .models import (
    adversarial_loss,
    build_discriminator,
    build_generator,
    content_loss_mse,
    gan_losses,
    perceptual_loss,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

BARRIER_TIMEOUT = 600.0


class TrainingError(Exception):
    pass


class BarrierTimeoutError(TrainingError):
    pass


class WorkerError(TrainingError):
    def __init__(self, shard_id: int, message: str) -> None:
        super().__init__(f"worker {shard_id}: {message}")
        self.shard_id = shard_id


class NumericalAbort(TrainingError):
    """Training hit a non-finite value; ``checkpoint`` is the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment optimizer over named parameters."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.params = OrderedDict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - self.lr * update

    def state(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k in self.params:
            out[f"{prefix}m/{k}"] = self.m[k].copy()
            out[f"{prefix}v/{k}"] = self.v[k].copy()
        out[f"{prefix}t"] = np.array(float(self.t))
        return out

    def load_state(self, records: dict, prefix: str = "") -> None:
        for k, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}{slot}/{k}"
                if key not in records:
                    raise CheckpointError(f"optimizer state missing tensor '{key}'")
                if records[key].shape != p.shape:
                    raise CheckpointError(f"optimizer tensor '{key}' has shape {records[key].shape}, "
                                          f"expected {p.shape}")
                store[k] = np.array(records[key])
        self.t = int(records[f"{prefix}t"])


# ---------------------------------------------------------------------------
# data-parallel protocol


def shard_batch(batch, workers: int) -> list:
    """Split along axis 0 into ``workers`` contiguous equal shards.

    ``batch`` is an array or a tuple of arrays sharing their first dimension;
    shards have the same structure.
    """
    arrays = batch if isinstance(batch, tuple) else (batch,)
    n = len(arrays[0])
    if workers < 1 or n % workers:
        raise ConfigError(f"batch of {n} cannot be split evenly over {workers} workers")
    size = n // workers
    shards = [tuple(a[i * size:(i + 1) * size] for a in arrays) for i in range(workers)]
    return shards if isinstance(batch, tuple) else [s[0] for s in shards]


@dataclass
class WorkerResult:
    worker_id: int
    grads: "OrderedDict[str, np.ndarray]"
    loss: float
    terms: dict = field(default_factory=dict)
    bn_stats: list = field(default_factory=list)


LossFn = Callable[[tuple], tuple[Tensor, dict]]


def worker_gradients(model: Module, loss_fn: LossFn, shard, worker_id: int = 0) -> WorkerResult:
    """Gradients of ``loss_fn(shard)`` for ``model``'s parameters.

    Reads the shared snapshot only: gradients are returned rather than stored
    on parameters, and train-mode batch-norm statistics are captured in the
    result instead of being applied.
    """
    named = model.named_parameters()
    try:
        # overflow is detected explicitly below, so numpy's warnings are noise
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            with collect_batch_stats() as stats:
                loss, terms = loss_fn(shard)
            value = loss.item()
            if not np.isfinite(value):
                raise T.NonFiniteError("loss is not finite")
            grads = T.grad(loss, [p for _, p in named])
    except T.NonFiniteError as exc:
        raise WorkerError(worker_id, str(exc)) from exc
    for (name, _), g in zip(named, grads):
        if not np.isfinite(g).all():
            raise WorkerError(worker_id, f"non-finite gradient for {name}")
    return WorkerResult(worker_id, OrderedDict((n, g) for (n, _), g in zip(named, grads)),
                        value, terms, list(stats))


class GradientBarrier:
    """Collects one result per worker; :meth:`wait` blocks until all arrive."""

    def __init__(self, workers: int, timeout: float | None = BARRIER_TIMEOUT) -> None:
        self.workers = workers
        self.timeout = timeout
        self._slots: list[WorkerResult | None] = [None] * workers
        self._cond = threading.Condition()

    def submit(self, result: WorkerResult) -> None:
        with self._cond:
            self._slots[result.worker_id] = result
            self._cond.notify_all()

    def wait(self) -> list[WorkerResult]:
        with self._cond:
            done = self._cond.wait_for(lambda: all(s is not None for s in self._slots), self.timeout)
            if not done:
                missing = [i for i, s in enumerate(self._slots) if s is None]
                raise BarrierTimeoutError(f"barrier timed out waiting for workers {missing}")
            return list(self._slots)


def run_workers(model: Module, loss_fn: LossFn, shards: list, threaded: bool = True,
                timeout: float | None = BARRIER_TIMEOUT) -> list[WorkerResult]:
    """Run one worker per shard against the current snapshot and wait at the barrier."""
    barrier = GradientBarrier(len(shards), timeout)

    def task(i: int) -> None:
        barrier.submit(worker_gradients(model, loss_fn, shards[i], i))

    if threaded and len(shards) > 1:
        with ThreadPoolExecutor(len(shards)) as pool:
            for fut in [pool.submit(task, i) for i in range(len(shards))]:
                fut.result()
    else:
        for i in range(len(shards)):
            task(i)
    return barrier.wait()


def average_gradients(results: list, workers: int | None = None) -> "OrderedDict[str, np.ndarray]":
    """Mean of the workers' gradient maps, summed in worker order."""
    maps = [r.grads if isinstance(r, WorkerResult) else r for r in results]
    if workers is not None and (len(maps) != workers or any(m is None for m in maps)):
        raise BarrierTimeoutError(f"expected {workers} gradient maps, got {sum(m is not None for m in maps)}")
    out = OrderedDict()
    for name in maps[0]:
        acc = np.array(maps[0][name], copy=True)
        for m in maps[1:]:
            acc += m[name]
        out[name] = acc / len(maps)
    return out


def aggregate_and_step(results: list, optimizer: Adam, workers: int | None = None):
    """Average the workers' gradients and apply one optimizer step."""
    grads = average_gradients(results, workers)
    optimizer.step(grads)
    return grads


def apply_batch_stats(results: list[WorkerResult]) -> None:
    """Average captured batch-norm statistics over workers and update running stats."""
    records = [r.bn_stats for r in results]
    if any(len(r) != len(records[0]) for r in records):
        raise TrainingError("workers recorded different batch-norm call sequences")
    w = len(records)
    for k in range(len(records[0])):
        layer = records[0][k][0]
        mean = records[0][k][1].copy()
        var = records[0][k][2].copy()
        for r in records[1:]:
            mean += r[k][1]
            var += r[k][2]
        layer.update_running(mean / w, var / w)


def parallel_step(model: Module, optimizer: Adam, loss_fn: LossFn, batch, workers: int,
                  threaded: bool = True) -> list[WorkerResult]:
    """One synchronous data-parallel update: shard, compute, barrier, aggregate, step."""
    shards = shard_batch(batch, workers)
    results = run_workers(model, loss_fn, shards, threaded=threaded)
    apply_batch_stats(results)
    aggregate_and_step(results, optimizer, workers)
    return results


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns both networks, their optimizers and the global step counter."""

    def __init__(self, config: TrainConfig, pairs: list[ImagePair], out_dir=None) -> None:
        if not pairs:
            raise TrainingError("dataset is empty")
        self.config = config
        self.pairs = pairs
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.generator = build_generator(config.generator_config())
        self.opt_g = self._adam(self.generator)
        self.discriminator = None
        self.opt_d = None
        self.gan_start: int | None = None
        if config.phase == "gan":
            self.discriminator = build_discriminator(config.discriminator_config())
            self.opt_d = self._adam(self.discriminator)
            self.gan_start = 0
        self.weights = config.loss_weights()
        self.global_step = 0
        self.counters = {"D": 0, "G": 0}
        self.audit: list[tuple[str, int]] = []
        self.log_lines: list[str] = []
        self.elapsed = 0.0
        self._collapse_run = 0
        self.collapse_warnings = 0

    def _adam(self, model: Module) -> Adam:
        c = self.config
        return Adam(model.named_parameters(), c.learning_rate, c.beta1, c.beta2, c.adam_eps)

    @property
    def threaded(self) -> bool:
        return self.config.threaded_workers and self.config.workers > 1

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """The (lr, hr) batch for a global step; a pure function of (seed, step)."""
        rng = np.random.default_rng([self.config.seed, step])
        return sample_batch(self.pairs, self.config.batch_size, self.config.crop_size, rng)

    # -- single steps ---------------------------------------------------
    def _parallel_step(self, model: Module, optimizer: Adam, loss_fn: LossFn, batch) -> list[WorkerResult]:
        return parallel_step(model, optimizer, loss_fn, batch, self.config.workers, self.threaded)

    def generator_step(self, batch) -> dict:
        g = self.generator
        adversarial = self.discriminator is not None

        def loss_fn(shard):
            lr, hr = shard
            sr = g(Tensor(lr))
            content = content_loss_mse(sr, hr)
            if not adversarial:
                return content, {"content": content.item()}
            # discriminator statistics from the generator step are discarded
            with collect_batch_stats():
                d_fake = self.discriminator(sr)
            adv = adversarial_loss(d_fake)
            total = perceptual_loss(content, adv, self.weights)
            return total, {"content": content.item(), "adv": adv.item()}

        results = self._parallel_step(g, self.opt_g, loss_fn, batch)
        self.counters["G"] += 1
        self.audit.append(("G", self.global_step))
        return _mean_terms(results)

    def discriminator_step(self, batch) -> dict:
        g, d = self.generator, self.discriminator

        def loss_fn(shard):
            lr, hr = shard
            # generator statistics from the discriminator step are discarded
            with T.no_grad(), collect_batch_stats():
                sr = g(Tensor(lr)).data
            d_real = d(Tensor(hr))
            d_fake = d(Tensor(sr))
            d_loss, _ = gan_losses(d_real, d_fake)
            acc = 0.5 * (np.mean(d_real.data > 0.5) + np.mean(d_fake.data < 0.5))
            return d_loss, {"d_loss": d_loss.item(), "d_acc": float(acc)}

        results = self._parallel_step(d, self.opt_d, loss_fn, batch)
        self.counters["D"] += 1
        self.audit.append(("D", self.global_step))
        return _mean_terms(results)

    def step(self) -> dict:
        """One global step: (D update then G update) in the GAN phase, G update otherwise."""
        start = time.perf_counter()
        batch = self.batch(self.global_step)
        self._train_mode(self.generator)
        self.generator.power_iterate(self.config.sn_iterations)
        terms = {}
        if self.discriminator is not None:
            self._train_mode(self.discriminator)
            self.discriminator.power_iterate(self.config.sn_iterations)
            terms.update(self.discriminator_step(batch))
            self._watch_collapse(terms["d_acc"])
        terms.update(self.generator_step(batch))
        self.global_step += 1
        ms = 1000.0 * (time.perf_counter() - start)
        self.elapsed += ms / 1000.0
        self._log(terms, ms)
        return terms

    def _train_mode(self, model: Module) -> None:
        model.train()
        if self.config.frozen_batch_norm:
            for _, mod in model.named_modules():
                if isinstance(mod, BatchNorm2d):
                    mod.eval()

    def _watch_collapse(self, acc: float) -> None:
        self._collapse_run = self._collapse_run + 1 if acc == 1.0 else 0
        if self._collapse_run == self.config.collapse_window:
            self.collapse_warnings += 1
            logger.warning("discriminator accuracy pinned at 1.0 for %d steps (possible mode collapse)",
                           self.config.collapse_window)

    def _log(self, terms: dict, ms: float) -> None:
        parts = [f"step={self.global_step}", f"phase={self.config.phase}"]
        parts += [f"{k}={v:.6g}" for k, v in terms.items()]
        parts.append(f"ms={ms:.1f}")
        line = " ".join(parts)
        self.log_lines.append(line)
        logger.info(line)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "train.log", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    # -- checkpoints ----------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        model = OrderedDict(("G/" + k, v) for k, v in self.generator.state_dict().items())
        optimizer = self.opt_g.state("G/")
        if self.discriminator is not None:
            model.update(("D/" + k, v) for k, v in self.discriminator.state_dict().items())
            optimizer.update(self.opt_d.state("D/"))
        state = OrderedDict()
        state["global_step"] = np.array(float(self.global_step))
        state["counters"] = np.array([float(self.counters["D"]), float(self.counters["G"])])
        # batches are drawn from default_rng([seed, step]); this pair is the full RNG state
        state["rng"] = np.array([float(self.config.seed), float(self.global_step)])
        if self.gan_start is not None:
            state["gan_start"] = np.array(float(self.gan_start))
        return Checkpoint(self.config.dumps(), model, optimizer, state)

    def restore(self, ckpt: Checkpoint, generator_only: bool = False) -> None:
        """Load state from ``ckpt``.

        With ``generator_only`` only the generator (weights, buffers and, when
        present, its optimizer state) is transferred, and the GAN phase starts
        at the checkpoint's step.
        """
        load_into(self.generator, ckpt.with_prefix("model", "G/"), "generator")
        g_opt = ckpt.with_prefix("optimizer", "G/")
        if g_opt:
            self.opt_g.load_state(g_opt)
        self.global_step = ckpt.global_step
        if generator_only:
            self.gan_start = self.global_step
            return
        d_counts, g_counts = ckpt.state["counters"]
        self.counters = {"D": int(d_counts), "G": int(g_counts)}
        if self.discriminator is not None:
            if "gan_start" not in ckpt.state:
                raise CheckpointError("checkpoint holds no discriminator state")
            load_into(self.discriminator, ckpt.with_prefix("model", "D/"), "discriminator")
            self.opt_d.load_state(ckpt.with_prefix("optimizer", "D/"))
            self.gan_start = int(ckpt.state["gan_start"])

    def save(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.to_checkpoint(), self.out_dir / name)

    # -- loop -----------------------------------------------------------
    def run_until(self, end_step: int) -> Checkpoint:
        interval = self.config.checkpoint_interval
        while self.global_step < end_step:
            try:
                self.step()
            except (WorkerError, T.NonFiniteError) as exc:
                ckpt = self.to_checkpoint()
                self.save("last_good.asrg")
                raise NumericalAbort(f"numerical failure at step {self.global_step}: {exc}", ckpt) from exc
            if interval and self.global_step % interval == 0:
                self.save(f"ckpt_{self.global_step:06d}.asrg")
        self.save("final.asrg")
        return self.to_checkpoint()


def _mean_terms(results: list[WorkerResult]) -> dict:
    keys = results[0].terms.keys()
    return {k: sum(r.terms[k] for r in results) / len(results) for k in keys}


def train_resnet(config: TrainConfig, dataset: list[ImagePair], resume: Checkpoint | None = None,
                 out_dir=None) -> Checkpoint:
    """Generator-only training on the content loss until ``config.steps`` global steps."""
    if config.phase != "resnet":
        raise ConfigError("train_resnet needs phase = resnet")
    trainer = Trainer(config, dataset, out_dir)
    if resume is not None:
        if resume.phase != "resnet":
            raise CheckpointError("cannot resume generator pre-training from a GAN checkpoint")
        trainer.restore(resume)
    return trainer.run_until(config.steps)


def train_gan(config: TrainConfig, dataset: list[ImagePair], init: Checkpoint, out_dir=None) -> Checkpoint:
    """Adversarial training for ``config.steps`` global steps after ``init``.

    A generator pre-training checkpoint seeds the generator (weights,
    buffers and optimizer state); a GAN checkpoint resumes both networks.
    """
    if config.phase != "gan":
        raise ConfigError("train_gan needs phase = gan")
    if init is None:
        raise ConfigError("GAN training needs an initial checkpoint")
    trainer = Trainer(config, dataset, out_dir)
    trainer.restore(init, generator_only=init.phase == "resnet")
    return trainer.run_until(trainer.gan_start + config.steps)


def generator_from_checkpoint(ckpt: Checkpoint, pool_size: int | None = None):
    """Rebuild the generator stored in ``ckpt`` in eval mode."""
    config = TrainConfig.loads(ckpt.config_text)
    gen = build_generator(config.generator_config())
    load_into(gen, ckpt.with_prefix("model", "G/"), "generator")
    if pool_size is not None:
        gen.set_pool_size(pool_size)
    return gen.eval()


def super_resolve(generator, lr: Image) -> Image:
    """Run an eval-mode generator on a whole LR image."""
    with T.no_grad():
        return denormalize_sr(generator(normalize_lr(lr)))
