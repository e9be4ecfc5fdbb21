"""Federated class inversion: learn a condition embedding per class.

Each client holding images of a class optimizes that class's embedding
against the frozen denoiser (the denoiser itself is never touched; a
checksum guards that). The server averages the uploaded embeddings,
optionally after clients add Gaussian noise for privacy, and broadcasts
the mean for the next round. Once a task's rounds complete, its
embeddings freeze and become the only per-class state carried forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import PretrainedDiffusion, condition_rows, draw_timesteps_and_noise, ldm_loss
from .optim import adam, apply_gradient_step
from .params import ParamSet
from .rng import stream
from .tensor import evaluate_with_gradients


class NoLocalData(Exception):
    """The client has no images of the requested class; skip it this round."""


class EmbeddingFrozen(Exception):
    pass


@dataclass
class ClassEmbedding:
    class_index: int
    vector: np.ndarray
    round_counter: int = 0
    provenance: str = "local"  # "local" | "aggregated"

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"class {self.class_index}: embedding has non-finite entries")


@dataclass
class InversionConfig:
    rounds: int = 10
    local_steps: int = 50
    lr: float = 1e-2
    batch: int = 16
    sigma_g: float = 0.0
    init_std: float = 0.1


@dataclass
class EmbeddingStore:
    """Frozen per-class embeddings plus the per-round aggregate history."""

    embed_dim: int
    entries: dict[int, ClassEmbedding] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def freeze(self, emb: ClassEmbedding) -> None:
        if emb.class_index in self.entries:
            raise EmbeddingFrozen(f"class {emb.class_index} is already frozen in the store")
        if emb.vector.shape != (self.embed_dim,):
            raise ValueError(f"class {emb.class_index}: embedding dim {emb.vector.shape} != ({self.embed_dim},)")
        self.entries[emb.class_index] = emb

    def get(self, class_index: int) -> ClassEmbedding:
        if class_index not in self.entries:
            raise KeyError(f"class {class_index} has no frozen embedding")
        return self.entries[class_index]

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def to_paramset(self) -> ParamSet:
        return ParamSet({f"class_{c:05d}": self.entries[c].vector for c in self.entries})

    @classmethod
    def from_paramset(cls, params: ParamSet, embed_dim: int, meta: dict | None = None) -> "EmbeddingStore":
        store = cls(embed_dim=embed_dim)
        rounds = (meta or {}).get("rounds", {})
        for name in params:
            c = int(name.split("_")[1])
            store.freeze(
                ClassEmbedding(
                    class_index=c,
                    vector=params[name],
                    round_counter=int(rounds.get(str(c), 0)),
                    provenance="aggregated",
                )
            )
        return store


def add_gaussian_noise(value, sigma: float, rng: np.random.Generator):
    """value + N(0, sigma^2) element-wise; works on arrays and ParamSets."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return value
    if isinstance(value, ParamSet):
        return ParamSet({k: v + rng.normal(0.0, sigma, size=v.shape).astype(np.float32) for k, v in value.items()})
    arr = np.asarray(value, dtype=np.float32)
    return arr + rng.normal(0.0, sigma, size=arr.shape).astype(np.float32)


def local_class_inversion(
    shard_images: np.ndarray,
    class_index: int,
    start: ClassEmbedding,
    steps: int,
    model: PretrainedDiffusion,
    rng: np.random.Generator,
    lr: float = 1e-2,
    batch: int = 16,
    probe_rng: np.random.Generator | None = None,
) -> tuple[ClassEmbedding, float, float]:
    """Optimize one class embedding on one client's images of that class.

    Returns (embedding, loss_start, loss_end); the losses are evaluated on
    a fixed probe batch so they compare embeddings rather than timestep
    luck, and a caller that re-creates `probe_rng` with the same key every
    round gets traces comparable across rounds. Gradients flow only into
    the embedding; denoiser parameters and the prompt enter the graph as
    constants.
    """
    images = np.asarray(shard_images, dtype=np.float32)
    if images.shape[0] == 0:
        raise NoLocalData(f"client holds no images of class {class_index}")
    flat = images.reshape(images.shape[0], -1)
    if steps == 0:
        return ClassEmbedding(class_index, start.vector.copy(), start.round_counter, "local"), 0.0, 0.0

    denoiser_consts = {name: model.params[name] for name in model.params}

    probe_source = probe_rng if probe_rng is not None else rng
    probe_idx = probe_source.integers(0, flat.shape[0], size=min(batch, flat.shape[0]))
    probe_t, probe_eps = draw_timesteps_and_noise(probe_source, probe_idx.size, flat.shape[1], model.sched.T)

    def probe_loss(vector: np.ndarray) -> float:
        cond = condition_rows(model.prompt, vector, probe_idx.size)
        value = ldm_loss(denoiser_consts, flat[probe_idx], cond, model.sched, probe_t, probe_eps,
                         model.temb_table)
        return value.item()

    params = ParamSet({"v": start.vector})
    loss_start = probe_loss(start.vector)
    opt = adam(lr)
    for _ in range(steps):
        idx = rng.integers(0, flat.shape[0], size=min(batch, flat.shape[0]))
        t, eps = draw_timesteps_and_noise(rng, idx.size, flat.shape[1], model.sched.T)

        def objective(leaves):
            cond = condition_rows(model.prompt, leaves["v"], idx.size)
            return ldm_loss(denoiser_consts, flat[idx], cond, model.sched, t, eps, model.temb_table)

        _, grads = evaluate_with_gradients(objective, params)
        params = apply_gradient_step(params, grads, opt)
    loss_end = probe_loss(params["v"])
    return (
        ClassEmbedding(class_index, params["v"], start.round_counter + 1, "local"),
        loss_start,
        loss_end,
    )


def aggregate_embeddings(uploads: list[ClassEmbedding]) -> ClassEmbedding:
    """Unweighted element-wise mean of the uploads that exist this round."""
    if not uploads:
        raise ValueError("aggregate_embeddings: no uploads (class has no data on any client)")
    dim = uploads[0].vector.shape
    for u in uploads[1:]:
        if u.vector.shape != dim:
            raise ValueError(f"aggregate_embeddings: dim mismatch {u.vector.shape} vs {dim}")
    acc = np.zeros(dim, dtype=np.float64)
    for u in uploads:
        acc += u.vector.astype(np.float64)
    return ClassEmbedding(
        class_index=uploads[0].class_index,
        vector=(acc / len(uploads)).astype(np.float32),
        round_counter=max(u.round_counter for u in uploads),
        provenance="aggregated",
    )


def federated_class_inversion(
    task_classes: list[int],
    client_images_by_class: list[dict[int, np.ndarray]],
    model: PretrainedDiffusion,
    cfg: InversionConfig,
    seed: int,
    store: EmbeddingStore,
    task_index: int = 0,
) -> list[dict]:
    """Run the round loop for every class of one task and freeze the results.

    client_images_by_class[j][c] is client j's stack of class-c images
    (possibly empty). Clients without data for a class skip it and are
    excluded from that class's average. Returns the per-round report
    records (one dict per round, class, client).
    """
    checksum_before = model.checksum()
    k = len(client_images_by_class)
    for c in task_classes:
        if c in store.entries:
            raise EmbeddingFrozen(f"class {c} was already inverted in an earlier task")
        total = sum(client_images_by_class[j].get(c, np.zeros((0,))).shape[0] for j in range(k))
        if total == 0:
            raise ValueError(f"class {c} has no samples on any client")

    current: dict[int, ClassEmbedding] = {}
    for c in sorted(task_classes):
        init = stream(seed, "invert-init", c).normal(0.0, cfg.init_std, size=model.dims.embed_dim)
        current[c] = ClassEmbedding(c, init.astype(np.float32), 0, "aggregated")

    report: list[dict] = []
    for rnd in range(1, cfg.rounds + 1):
        for c in sorted(task_classes):
            uploads: list[ClassEmbedding] = []
            for j in range(k):
                images = client_images_by_class[j].get(c)
                if images is None or images.shape[0] == 0:
                    report.append(
                        {"task": task_index, "round": rnd, "class": c, "client": j,
                         "loss_start": None, "loss_end": None, "participated": False}
                    )
                    continue
                rng = stream(seed, "invert", task_index, rnd, j, c)
                probe_rng = stream(seed, "invert-probe", task_index, j, c)  # round-independent
                local, loss_start, loss_end = local_class_inversion(
                    images, c, current[c], cfg.local_steps, model, rng, lr=cfg.lr, batch=cfg.batch,
                    probe_rng=probe_rng,
                )
                if cfg.sigma_g > 0:
                    noise_rng = stream(seed, "invert-noise", task_index, rnd, j, c)
                    local.vector = add_gaussian_noise(local.vector, cfg.sigma_g, noise_rng)
                uploads.append(local)
                report.append(
                    {"task": task_index, "round": rnd, "class": c, "client": j,
                     "loss_start": loss_start, "loss_end": loss_end, "participated": True}
                )
            current[c] = aggregate_embeddings(uploads)
            store.history.append({"task": task_index, "round": rnd, "class": c,
                                  "vector": current[c].vector.copy()})
    for c in sorted(task_classes):
        store.freeze(current[c])

    if model.checksum() != checksum_before:
        raise AssertionError("denoiser or prompt changed during inversion (freeze contract violated)")
    return report
