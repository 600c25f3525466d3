"""Mini-batch training over paired clean/augmented feature views.

One optimizer step per batch: per-utterance objective gradients are
averaged in batch order by a single reducer, then applied with Adam.
Every ``checkpoint_every`` steps the clean-view dev EER is measured and
the argmin checkpoint retained (ties keep the earlier iteration).
Shuffling is a stateless seeded permutation per epoch, so a run can be
resumed bit-exactly from any checkpoint.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericFault
from .metrics import ScoreRecord, compute_eer
from .model import (ModelParams, build_topology, forward, init_params,
                    loss_and_grad)
from .numerics import AdamState, adam_step
from .seeding import rng_for
from .stacks import LayerStack, ManifestEntry, read_features, read_manifest

CKPT_MAGIC = b"RCKP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.25
    learning_rate: float = 1e-6
    weight_decay: float = 1e-4
    batch_size: int = 24
    max_iterations: int = 1000
    seed: int = 0
    class_weight_mode: str = "balanced"  # or "none"
    checkpoint_every: int = 50

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate and batch size must be positive")
        if self.max_iterations < 1 or self.checkpoint_every < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.class_weight_mode not in ("balanced", "none"):
            raise ValueError(f"unknown class weight mode "
                             f"{self.class_weight_mode!r}")


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    iteration: int
    rng_state: tuple[int, int, int]  # (seed, epoch, batches done in epoch)
    fingerprint: str = ""
    dev_eer: float | None = None


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class _Pair:
    utt: str
    label: int
    clean_path: str
    aug_path: str


class _StackCache:
    """Feature stacks kept in memory as float32 payloads."""

    def __init__(self) -> None:
        self._store: dict[str, tuple[str, str, int | None, int, np.ndarray]] = {}

    def get(self, path: str) -> LayerStack:
        if path not in self._store:
            s = read_features(path)
            self._store[path] = (s.utt_id, s.dataset_id, s.label, s.view_id,
                                 s.features.astype(np.float32))
        utt, ds, label, view, feats = self._store[path]
        return LayerStack(utt_id=utt, dataset_id=ds, label=label,
                          view_id=view, features=feats.astype(np.float64))


def _pair_views(entries: list[ManifestEntry]) -> list[_Pair]:
    by_utt: dict[str, dict[int, ManifestEntry]] = {}
    order: list[str] = []
    for e in entries:
        if e.utt not in by_utt:
            order.append(e.utt)
        by_utt.setdefault(e.utt, {})[e.view] = e
    pairs = []
    for utt in order:
        views = by_utt[utt]
        if 0 not in views or 1 not in views:
            raise ValueError(f"utterance {utt!r} lacks a clean/augmented "
                             f"view pair")
        clean, aug = views[0], views[1]
        if clean.label != aug.label:
            raise ValueError(f"utterance {utt!r} has inconsistent labels")
        pairs.append(_Pair(utt=utt, label=clean.label,
                           clean_path=clean.path, aug_path=aug.path))
    return pairs


def class_weights_for(labels: list[int],
                      mode: str = "balanced") -> tuple[float, float]:
    """Balanced inverse-frequency weights w_c = N / (2 N_c)."""
    if mode == "none":
        return (1.0, 1.0)
    n = len(labels)
    n1 = sum(labels)
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("training set must contain both classes")
    return (n / (2.0 * n0), n / (2.0 * n1))


def _dev_eer(dev_entries: list[ManifestEntry], params: ModelParams,
             cache: _StackCache) -> float:
    records = []
    for e in dev_entries:
        trace = forward(cache.get(e.path), params)
        records.append(ScoreRecord(utt_id=e.utt, dataset_id=e.dataset,
                                   label=e.label, view_id=e.view,
                                   score=trace.posterior))
    eer, _ = compute_eer(records)
    return eer


def train(config: TrainConfig, train_manifest: str | Path,
          dev_manifest: str | Path, fingerprint: str = "",
          resume: Checkpoint | None = None) -> TrainResult:
    """Run the optimization loop and return best/final checkpoints plus
    the training log (one entry per dev evaluation)."""
    train_entries, _ = read_manifest(train_manifest)
    dev_entries, _ = read_manifest(dev_manifest)
    pairs = _pair_views(train_entries)
    dev_clean = [e for e in dev_entries if e.view == 0]
    if not pairs:
        raise ValueError("empty training manifest")
    if not dev_clean:
        raise ValueError("dev manifest has no clean-view entries")

    cache = _StackCache()
    first = cache.get(pairs[0].clean_path)
    topo = build_topology(first.n_layers, first.dim)
    weights = class_weights_for([p.label for p in pairs],
                                config.class_weight_mode)

    if resume is not None:
        params = resume.params.copy()
        adam = resume.adam
        iteration = resume.iteration
        _, epoch, start_batch = resume.rng_state
    else:
        params = init_params(topo, config.seed)
        adam = AdamState.init(params.vector.size, config.learning_rate,
                              weight_decay=config.weight_decay)
        iteration, epoch, start_batch = 0, 0, 0

    best: Checkpoint | None = None
    log: list[dict] = []
    n = len(pairs)

    while iteration < config.max_iterations:
        perm = rng_for(config.seed, epoch).permutation(n)
        n_batches = (n + config.batch_size - 1) // config.batch_size
        for bi in range(start_batch, n_batches):
            batch = [pairs[i] for i in
                     perm[bi * config.batch_size:(bi + 1) * config.batch_size]]
            grad_sum = np.zeros_like(params.vector)
            cls_sum = cons_sum = total_sum = 0.0
            for pair in batch:
                clean = cache.get(pair.clean_path)
                aug = cache.get(pair.aug_path)
                try:
                    breakdown, grad = loss_and_grad(
                        clean, aug, pair.label, params, config.lam, weights)
                except NumericFault as exc:
                    raise NumericFault(
                        f"iteration {iteration}, utterance {pair.utt!r}: "
                        f"{exc}") from exc
                grad_sum += grad
                cls_sum += breakdown.cls
                cons_sum += breakdown.cons
                total_sum += breakdown.total
            k = len(batch)
            new_vec, adam = adam_step(params.vector, grad_sum / k, adam)
            params = ModelParams(topo, new_vec)
            iteration += 1

            if (iteration % config.checkpoint_every == 0
                    or iteration == config.max_iterations):
                dev = _dev_eer(dev_clean, params, cache)
                log.append({"iteration": iteration, "cls": cls_sum / k,
                            "cons": cons_sum / k, "total": total_sum / k,
                            "dev_eer": dev})
                if best is None or dev < best.dev_eer:
                    best = Checkpoint(params=params.copy(), adam=adam,
                                      iteration=iteration,
                                      rng_state=(config.seed, epoch, bi + 1),
                                      fingerprint=fingerprint, dev_eer=dev)
            if iteration >= config.max_iterations:
                final = Checkpoint(params=params.copy(), adam=adam,
                                   iteration=iteration,
                                   rng_state=(config.seed, epoch, bi + 1),
                                   fingerprint=fingerprint,
                                   dev_eer=log[-1]["dev_eer"])
                return TrainResult(best=best, final=final, log=log)
        epoch += 1
        start_batch = 0

    raise RuntimeError("unreachable: loop exits via max_iterations")


_WORKER_PARAMS: ModelParams | None = None


def _init_worker(vector: np.ndarray, n_layers: int, dim: int) -> None:
    global _WORKER_PARAMS
    _WORKER_PARAMS = ModelParams(build_topology(n_layers, dim), vector)


def _score_path(path: str) -> float:
    stack = read_features(path)
    return forward(stack, _WORKER_PARAMS).posterior


def evaluate(ckpt: Checkpoint, manifest: str | Path,
             workers: int = 1) -> list[ScoreRecord]:
    """Score every (utterance, view) in the manifest, in manifest order."""
    entries, _ = read_manifest(manifest)
    params = ckpt.params
    topo = params.topology
    for e in entries:
        pass  # dims validated per file below
    if workers > 1:
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_init_worker,
                initargs=(params.vector, topo.n_layers, topo.dim)) as pool:
            posteriors = list(pool.map(_score_path, [e.path for e in entries]))
    else:
        posteriors = []
        for e in entries:
            stack = read_features(e.path)
            if stack.n_layers != topo.n_layers or stack.dim != topo.dim:
                raise ValueError(
                    f"utterance {e.utt!r}: dims (L={stack.n_layers}, "
                    f"D={stack.dim}) do not match checkpoint "
                    f"(L={topo.n_layers}, D={topo.dim})")
            posteriors.append(forward(stack, params).posterior)
    return [ScoreRecord(utt_id=e.utt, dataset_id=e.dataset, label=e.label,
                        view_id=e.view, score=p)
            for e, p in zip(entries, posteriors)]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Versioned binary: magic, version, counters, rng state, fingerprint,
    topology, parameters, optimizer state.  Bitwise round-trip."""
    p = ckpt.params
    a = ckpt.adam
    fp = ckpt.fingerprint.encode("utf-8")
    dev = float("nan") if ckpt.dev_eer is None else ckpt.dev_eer
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(struct.pack("<Qd", ckpt.iteration, dev))
        f.write(struct.pack("<QQQ", *[v & 0xFFFFFFFFFFFFFFFF
                                      for v in ckpt.rng_state]))
        f.write(struct.pack("<I", len(fp)))
        f.write(fp)
        f.write(struct.pack("<II", p.topology.n_layers, p.topology.dim))
        f.write(struct.pack("<Q", p.vector.size))
        f.write(p.vector.astype("<f8").tobytes())
        f.write(struct.pack("<Qddddd", a.step, a.learning_rate, a.beta1,
                            a.beta2, a.epsilon, a.weight_decay))
        f.write(struct.pack("<Q", a.m.size))
        f.write(a.m.astype("<f8").tobytes())
        f.write(a.v.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 6
    iteration, dev = struct.unpack_from("<Qd", blob, off)
    off += 16
    rng_state = struct.unpack_from("<QQQ", blob, off)
    off += 24
    (fp_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    fingerprint = blob[off:off + fp_len].decode("utf-8")
    off += fp_len
    n_layers, dim = struct.unpack_from("<II", blob, off)
    off += 8
    (n_params,) = struct.unpack_from("<Q", blob, off)
    off += 8
    topo = build_topology(n_layers, dim)
    if n_params != topo.param_count():
        raise FormatError(f"{path}: parameter count {n_params} does not "
                          f"match topology ({topo.param_count()})")
    need = n_params * 8
    if off + need > len(blob):
        raise FormatError(f"{path}: corrupt payload, parameter block "
                          f"truncated at offset {off}")
    vector = np.frombuffer(blob, dtype="<f8", count=n_params,
                           offset=off).copy()
    off += need
    step, lr, b1, b2, eps, wd = struct.unpack_from("<Qddddd", blob, off)
    off += 48
    (n_mom,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if n_mom != n_params or off + 2 * need > len(blob):
        raise FormatError(f"{path}: corrupt payload, moment block truncated")
    m = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off).copy()
    off += need
    v = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off).copy()
    adam = AdamState(step=step, m=m, v=v, learning_rate=lr, beta1=b1,
                     beta2=b2, epsilon=eps, weight_decay=wd)
    return Checkpoint(params=ModelParams(topo, vector), adam=adam,
                      iteration=iteration, rng_state=tuple(rng_state),
                      fingerprint=fingerprint,
                      dev_eer=None if np.isnan(dev) else dev)
