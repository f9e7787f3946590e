"""Lifelong training orchestration: Adam with a stepped LR decay, the
per-domain epoch loop with freeze/grow protocol, streaming statistics
finalization, deterministic logging, and checkpointing.

Run directory layout:
    config.json               resolved configuration echo
    checkpoints/domain_<t>/   manifest.json + params.bin
    logs/losses.jsonl         one record per optimization step
    metrics/curve.csv         trained_through_domain, eval_domain, mAP, rank1
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, fields
from pathlib import Path

import numpy as np

from . import losses as lx
from . import numerics as nx
from .data import DomainData, load_domain, load_sequence, pk_batches
from .distribution import DomainStats
from .errors import ConfigError, IntegrityError, NumericalError
from .evaluation import evaluate_domain
from .model import BackboneConfig, DkuaModel
from .numerics import Tensor


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 15
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_period: int = 10
    p: int = 4
    k: int = 4
    margin: float = 0.3
    temperature: float = 0.1
    height: int = 32
    width: int = 16
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 12
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    use_dse: bool = True
    enable_ka: bool = True
    enable_uka: bool = True
    enable_dkt: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.height, self.width, self.channels,
                              self.patch_size, self.embed_dim, self.depth,
                              self.heads, self.mlp_ratio)


def load_train_config(path: Path) -> TrainConfig:
    raw = json.loads(Path(path).read_text())
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in raw:
        raise ConfigError("missing required config key: seed")
    return TrainConfig(**raw)


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch // config.lr_period)


class Adam:
    """Standard bias-corrected Adam keyed by parameter name.

    Moments exist only for updatable parameters; ``drop`` prunes state when
    parameters freeze at a domain boundary.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self, named_params, lr: float):
        for name, p in named_params:
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ConfigError(f"gradient shape mismatch for {name}")
            m, v, t = self.state.get(name, (np.zeros_like(p.data),
                                            np.zeros_like(p.data), 0))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.state[name] = (m, v, t)

    def drop(self, names):
        for name in names:
            self.state.pop(name, None)


def prune_optimizer(optimizer: Adam, model: DkuaModel):
    """Drop state for frozen parameters and for the unification head,
    which is re-created at a new width on every domain boundary."""
    optimizer.drop(model.frozen_names() | {"unify.w", "unify.b"})


def train_step(model: DkuaModel, stats: DomainStats, batch,
               config: TrainConfig, loss_cfg: lx.LossConfig) -> lx.LossBreakdown:
    """One forward/backward pass; returns the scalar breakdown. The caller
    applies the optimizer."""
    out = model.forward(batch.images)
    t = model.t
    probs = model.classify(t - 1, out.theta)
    l_reid, l_ce, l_tri = lx.reid_loss(probs, batch.labels, out.theta,
                                       config.margin)
    zero = Tensor(0.0)
    l_ka = zero
    if config.use_dse and config.enable_ka and t >= 2:
        l_ka, _ = lx.ka_loss(out.thetas)
    l_uka = zero
    if config.use_dse and config.enable_uka and t >= 2:
        assocs = [lx.association(th, out.theta, config.temperature)
                  for th in out.thetas]
        l_uka = lx.uka_loss(assocs)
    l_dkt = zero
    if config.use_dse and config.enable_dkt and t >= 2:
        sigma_batch = nx.covariance(out.thetas[-1])
        l_dkt = stats.dkt_loss(sigma_batch)
    total = lx.total_loss(l_reid, l_ka, l_uka, l_dkt, loss_cfg)
    model.zero_grads()
    total.backward()
    breakdown = lx.LossBreakdown(
        l_ce=l_ce.item(), l_tri=l_tri.item(), l_reid=l_reid.item(),
        l_ka=l_ka.item(), l_uka=l_uka.item(), l_dkt=l_dkt.item(),
        total=total.item())
    return breakdown, out


def train_domain(model: DkuaModel, stats: DomainStats, domain: DomainData,
                 config: TrainConfig, optimizer: Adam,
                 rng: np.random.Generator, log, step_offset: int = 0) -> int:
    """Train one domain for the configured epochs; accumulates the current
    domain's representations into ``stats`` during the final epoch.
    Returns the global step counter after the domain."""
    loss_cfg = lx.LossConfig(margin=config.margin,
                             temperature=config.temperature)
    model.domain_open = True
    t = model.t
    step = step_offset
    try:
        for epoch in range(config.epochs):
            lr = lr_at(config, epoch)
            final_epoch = epoch == config.epochs - 1
            for batch in pk_batches(domain, config.p, config.k, rng):
                try:
                    breakdown, out = train_step(model, stats, batch, config,
                                                loss_cfg)
                except NumericalError as exc:
                    raise NumericalError(
                        f"step {step} (domain {t}, epoch {epoch}): {exc}"
                    ) from exc
                if final_epoch and config.use_dse:
                    stats.accumulate(out.thetas[-1].data)
                optimizer.step(model.named_params(), lr)
                if log is not None:
                    record = {"step": step, "domain": t, "epoch": epoch}
                    record.update(breakdown.as_dict())
                    log.write(json.dumps(record) + "\n")
                step += 1
    finally:
        model.domain_open = False
    return step


def lifelong_train(config: TrainConfig, data_dir: Path, out_dir: Path) -> Path:
    """Sequentially train over every seen domain, checkpointing and
    evaluating all seen-so-far plus unseen domains after each."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    manifest = load_sequence(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    (out_dir / "logs").mkdir(exist_ok=True)
    (out_dir / "metrics").mkdir(exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")

    seed_seq = np.random.SeedSequence(config.seed)
    init_rng, data_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    model = DkuaModel(config.backbone_config(), init_rng, use_dse=config.use_dse)
    stats = DomainStats(config.embed_dim)
    optimizer = Adam()
    curve_rows = []
    step = 0

    seen = [load_domain(data_dir / name) for name in manifest["seen"]]
    unseen = [load_domain(data_dir / name) for name in manifest["unseen"]]
    _check_disjoint_identities(seen + unseen)

    with open(out_dir / "logs" / "losses.jsonl", "w") as log:
        for t, domain in enumerate(seen, start=1):
            model.grow_domain(domain.class_count, init_rng)
            prune_optimizer(optimizer, model)
            if config.use_dse:
                stats.open_domain(domain.class_count)
            step = train_domain(model, stats, domain, config, optimizer,
                                data_rng, log, step)
            if config.use_dse:
                stats.finalize_domain()
                stats.unified_update()
            save_checkpoint(out_dir / "checkpoints" / f"domain_{t}",
                            model, stats, config, step)
            for past in seen[:t]:
                m, r1 = evaluate_domain(model, past)
                curve_rows.append((t, past.name, m, r1))
            for extra in unseen:
                m, r1 = evaluate_domain(model, extra)
                curve_rows.append((t, extra.name, m, r1))

    with open(out_dir / "metrics" / "curve.csv", "w") as fh:
        fh.write("trained_through_domain,eval_domain,mAP,rank1\n")
        for t, name, m, r1 in curve_rows:
            fh.write(f"{t},{name},{m!r},{r1!r}\n")
    return out_dir


def _check_disjoint_identities(domains):
    seen_ids: set = set()
    for domain in domains:
        ids = {r.identity for r in domain.records}
        overlap = seen_ids & ids
        if overlap:
            raise ConfigError(
                f"identity ids shared across domains: {sorted(overlap)[:5]}")
        seen_ids |= ids


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "dkua-checkpoint v1"


def save_checkpoint(directory: Path, model: DkuaModel, stats: DomainStats,
                    config: TrainConfig, step: int):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    frozen = model.frozen_names()

    def add(name, array, kind, is_frozen=False):
        nonlocal offset
        data = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "kind": kind,
                        "shape": list(data.shape), "frozen": is_frozen,
                        "offset": offset, "size": int(data.size)})
        chunks.append(data.tobytes())
        offset += data.size * 8

    for name, p in model.named_params():
        add(name, p.data, "param", name in frozen)
    state = stats.state()
    for i, sigma in enumerate(state["sigmas"]):
        add(f"stats.sigma.{i}", sigma, "stat")
    if state["sigma_cum"] is not None:
        add("stats.sigma_cum", state["sigma_cum"], "stat")

    payload = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(config),
        "t": model.t,
        "use_dse": model.use_dse,
        "head_classes": [h.num_classes for h in model.heads],
        "class_counts": state["class_counts"],
        "step": step,
        "tensors": entries,
        "payload_len": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    (directory / "params.bin").write_bytes(payload)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory: Path) -> tuple:
    """Rebuild (model, stats, config, step) from a checkpoint directory.

    Refuses to load on any manifest/payload disagreement."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        payload = (directory / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read checkpoint: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError("unknown checkpoint format")
    if len(payload) != manifest["payload_len"]:
        raise IntegrityError("payload length mismatch")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch")

    config = TrainConfig(**manifest["config"])
    t = int(manifest["t"])
    rng = np.random.default_rng(0)  # placeholder init; overwritten below
    model = DkuaModel(config.backbone_config(), rng,
                      use_dse=bool(manifest["use_dse"]))
    for classes in manifest["head_classes"]:
        model.grow_domain(int(classes), rng)
    if model.t != t:
        raise IntegrityError("manifest domain count disagrees with heads")
    if model.use_dse and len(model.tms) != t:
        raise IntegrityError("manifest domain count disagrees with modules")

    arrays = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        end = start + entry["size"] * 8
        if end > len(payload):
            raise IntegrityError(f"tensor {entry['name']} overruns payload")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(entry["shape"]).copy()

    frozen = {e["name"] for e in manifest["tensors"] if e["frozen"]}
    for name, p in model.named_params():
        if name not in arrays:
            raise IntegrityError(f"missing tensor {name} in checkpoint")
        if tuple(p.data.shape) != arrays[name].shape:
            raise IntegrityError(f"shape mismatch for tensor {name}")
        p.data = arrays[name]
        p.requires_grad = name not in frozen
    for i, tm in enumerate(model.tms):
        tm.frozen = any(n in frozen for n, _ in tm.named_params(f"tm.{i}"))

    sigmas = []
    i = 0
    while f"stats.sigma.{i}" in arrays:
        sigmas.append(arrays[f"stats.sigma.{i}"])
        i += 1
    stats = DomainStats.from_state({
        "dim": config.embed_dim,
        "sigmas": sigmas,
        "class_counts": manifest["class_counts"],
        "sigma_cum": arrays.get("stats.sigma_cum"),
    })
    return model, stats, config, int(manifest["step"])
