"""Two-phase training: copy-paste pre-training, then dual-student SSL with an EMA teacher.

One SSL step:

1. teacher predicts the two unlabeled volumes; argmax + largest-component refinement
   gives pseudo-labels;
2. a fresh copy-paste mask mixes labeled and unlabeled images/labels both ways;
3. both students predict the two mixed batches;
4. hard predictions give the discrepancy mask, each student's error mask and
   their product;
5. each student minimises seg + gamma * masked MSE + mu * masked KL-to-uniform;
6. independent Adam step per student;
7. EMA update of the teacher from student A.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, maskops, metrics, mixing, nets
from . import tensor as T
from .synthdata import VolumeRecord, by_split

logger = logging.getLogger(__name__)

LOSS_TERMS = ("seg_in", "seg_out", "mse_in", "mse_out", "kl_in", "kl_out", "total")
ADAM_MAGIC = "SDCLADAM"


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 2 / 3
    gamma: float = 0.3
    mu: float = 0.1
    learning_rate: float = 1e-3
    ema_momentum: float = 0.99
    pretrain_iters: int = 300
    ssl_iters: int = 1500
    batch_size: int = 4
    num_classes: int = 2
    seed: int = 0
    mask_mode: str = "random"
    log_every: int = 100
    width: int = 8
    depth: int = 4
    use_diff_gate: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size <= 0 or self.batch_size % 4:
            raise ConfigError(
                f"batch_size must be a positive multiple of 4 (half labeled, half unlabeled, "
                f"each half split into two pairing halves), got {self.batch_size}"
            )
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 < self.ema_momentum < 1.0:
            raise ConfigError(f"ema_momentum must lie in (0, 1), got {self.ema_momentum}")
        for name in ("alpha", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mask_mode not in ("random", "centered"):
            raise ConfigError(f"mask_mode must be 'random' or 'centered', got {self.mask_mode!r}")
        if self.pretrain_iters < 0 or self.ssl_iters < 0 or self.log_every <= 0:
            raise ConfigError("iteration counts must be >= 0 and log_every > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in d.items():
            kind = type(getattr(cls(), key))
            if kind is bool and not isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
            try:
                kwargs[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r} has invalid value {value!r}") from None
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    """Read a JSON config; ``overrides`` (e.g. from CLI flags) win over file values."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    data.update(overrides or {})
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[T.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[T.Tensor], state: AdamState, lr: float) -> None:
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


def adam_bytes(state: AdamState) -> bytes:
    flat = np.concatenate([a.reshape(-1) for a in state.m] + [a.reshape(-1) for a in state.v])
    header = [
        f"{ADAM_MAGIC} 1",
        f"t={state.t}",
        f"shapes={';'.join(','.join(map(str, a.shape)) for a in state.m)}",
        f"n_values={flat.size}",
        "end_header",
    ]
    return ("\n".join(header) + "\n").encode("ascii") + flat.astype("<f8").tobytes()


def adam_from_bytes(blob: bytes) -> AdamState:
    fields, offset = nets.parse_header(blob, ADAM_MAGIC, 1)
    shapes = [tuple(int(n) for n in s.split(",")) for s in fields["shapes"].split(";")]
    n_values = int(fields["n_values"])
    if len(blob) != offset + 8 * n_values:
        raise nets.NetError(f"optimizer payload truncated at offset {offset}")
    flat = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
    arrays, pos = [], 0
    for shape in shapes * 2:
        size = int(np.prod(shape))
        arrays.append(flat[pos : pos + size].reshape(shape).copy())
        pos += size
    half = len(shapes)
    return AdamState(arrays[:half], arrays[half:], int(fields["t"]))


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray  # (n, 1, W, H, D)
    ids: list[str]
    labels: np.ndarray | None = None  # (n, W, H, D)

    def halves(self):
        h = len(self.ids) // 2
        first = Batch(self.images[:h], self.ids[:h], None if self.labels is None else self.labels[:h])
        second = Batch(self.images[h:], self.ids[h:], None if self.labels is None else self.labels[h:])
        return first, second


def make_batch(records: list[VolumeRecord], with_labels: bool) -> Batch:
    images = np.stack([r.image for r in records])[:, None].astype(np.float64)
    labels = np.stack([r.label for r in records]).astype(np.int64) if with_labels else None
    return Batch(images, [r.id for r in records], labels)


def sample_batches(
    labeled: list[VolumeRecord], unlabeled: list[VolumeRecord], batch_size: int, rng: np.random.Generator
) -> tuple[Batch, Batch]:
    """Half labeled, half unlabeled, each drawn without replacement.

    Sampling without replacement and splitting each half in two pairs every
    j with a different i (and p with a different q).
    """
    half = batch_size // 2
    if len(labeled) < half or len(unlabeled) < half:
        raise ConfigError(f"batch needs {half} labeled and {half} unlabeled volumes")
    li = rng.choice(len(labeled), size=half, replace=False)
    ui = rng.choice(len(unlabeled), size=half, replace=False)
    return make_batch([labeled[i] for i in li], True), make_batch([unlabeled[i] for i in ui], False)


def new_mask(shape, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    return maskops.gen_copy_paste_mask(shape, config.beta, rng, centered=config.mask_mode == "centered")


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    student_a: nets.SegNet
    student_b: nets.SegNet
    teacher: nets.TeacherNet
    adam_a: AdamState
    adam_b: AdamState
    rng: np.random.Generator
    iteration: int = 0
    metric_log: list[dict] = field(default_factory=list)

    @classmethod
    def from_pretrained(cls, net_a: nets.SegNet, net_b: nets.SegNet, config: TrainConfig) -> "TrainState":
        a = nets.copy_net(net_a)
        b = nets.copy_net(net_b)
        return cls(
            student_a=a,
            student_b=b,
            teacher=nets.make_teacher(a, config.ema_momentum),
            adam_a=AdamState.for_params(a.parameters()),
            adam_b=AdamState.for_params(b.parameters()),
            rng=np.random.default_rng([config.seed & 0xFFFF_FFFF_FFFF_FFFF, 2]),
        )


def save_state(state: TrainState, out_dir: str | Path, config: TrainConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(state.student_a, out_dir / "student_a.ckpt", state.iteration)
    nets.save_checkpoint(state.student_b, out_dir / "student_b.ckpt", state.iteration)
    nets.save_checkpoint(state.teacher.net, out_dir / "teacher.ckpt", state.iteration)
    (out_dir / "student_a.adam").write_bytes(adam_bytes(state.adam_a))
    (out_dir / "student_b.adam").write_bytes(adam_bytes(state.adam_b))
    meta = {
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "config": config.to_dict(),
    }
    (out_dir / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_state(ckpt_dir: str | Path) -> tuple[TrainState, TrainConfig]:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "state.json"
    if not meta_path.exists():
        raise TrainingError(f"no training state in {ckpt_dir}")
    meta = json.loads(meta_path.read_text())
    config = TrainConfig.from_dict(meta["config"])
    a, _ = nets.load_checkpoint(ckpt_dir / "student_a.ckpt")
    b, _ = nets.load_checkpoint(ckpt_dir / "student_b.ckpt")
    t, _ = nets.load_checkpoint(ckpt_dir / "teacher.ckpt", requires_grad=False)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(
        student_a=a,
        student_b=b,
        teacher=nets.TeacherNet(t, config.ema_momentum),
        adam_a=adam_from_bytes((ckpt_dir / "student_a.adam").read_bytes()),
        adam_b=adam_from_bytes((ckpt_dir / "student_b.adam").read_bytes()),
        rng=rng,
        iteration=int(meta["iteration"]),
    )
    return state, config


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


def _spatial_dims(shape) -> int:
    return 2 if shape[-1] == 1 else 3


def pretrain_one(arch: str, config: TrainConfig, labeled: list[VolumeRecord], stream: int) -> nets.SegNet:
    shape = labeled[0].image.shape
    seed = config.seed & 0xFFFF_FFFF_FFFF_FFFF
    net = nets.init_params(
        arch,
        config.num_classes,
        seed * 2 + stream,
        width=config.width,
        depth=config.depth,
        spatial_dims=_spatial_dims(shape),
    )
    adam = AdamState.for_params(net.parameters())
    rng = np.random.default_rng([seed, 1, stream])
    half = config.batch_size // 2
    for it in range(config.pretrain_iters):
        idx = rng.choice(len(labeled), size=half, replace=False)
        first, second = make_batch([labeled[i] for i in idx], True).halves()
        mask = new_mask(shape, config, rng)
        # Both sources labeled: one-way paste of `first` into `second`.
        x = np.where(mask.astype(bool), first.images, second.images)
        y = np.where(mask.astype(bool), first.labels, second.labels)
        probs = nets.forward(net, x)
        loss = losses.bcp_seg_loss(probs, y, mask, 1.0, "in")
        _check_finite(loss, it, "pretrain_seg", {"mask": maskops.mask_stats(mask)})
        loss.backward()
        adam_step(net.parameters(), adam, config.learning_rate)
    return net


def pretrain(
    config: TrainConfig, labeled: list[VolumeRecord], out_dir: str | Path | None = None
) -> tuple[nets.SegNet, nets.SegNet]:
    """Train the plain (A) and residual (B) students independently on labeled copy-paste mixes."""
    if len(labeled) < 2:
        raise TrainingError(f"pre-training needs at least 2 labeled volumes, got {len(labeled)}")
    if len(labeled) < config.batch_size // 2:
        raise TrainingError(f"batch_size {config.batch_size} needs {config.batch_size // 2} labeled volumes")
    net_a = pretrain_one("plain", config, labeled, 0)
    net_b = pretrain_one("residual", config, labeled, 1)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        nets.save_checkpoint(net_a, out_dir / "pretrain_a.ckpt", config.pretrain_iters)
        nets.save_checkpoint(net_b, out_dir / "pretrain_b.ckpt", config.pretrain_iters)
        write_run_manifest(out_dir / "pretrain_manifest.json", config, "pretrain")
    return net_a, net_b


# ---------------------------------------------------------------------------
# SSL step
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    iteration: int
    terms: dict[str, dict[str, float]]  # student -> term -> value
    masks: dict[str, np.ndarray]
    mask_counts: dict[str, int]
    entropy: dict[str, float] = field(default_factory=dict)


def _check_finite(loss: T.Tensor, iteration: int, term: str, stats: dict) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingError(f"non-finite loss at iteration {iteration}, term {term}; mask stats {stats}")


def pseudo_labels(teacher: nets.TeacherNet, images: np.ndarray, num_classes: int) -> np.ndarray:
    raw = nets.predict(teacher, images)
    return maskops.largest_connected_component(raw, num_classes)


def mix_batch(labeled: Batch, unlabeled: Batch, pseudo: np.ndarray, mask: np.ndarray) -> mixing.MixedPair:
    l_j, l_i = labeled.halves()
    n = len(unlabeled.ids) // 2
    x_p, x_q = unlabeled.images[:n], unlabeled.images[n:]
    y_p, y_q = pseudo[:n], pseudo[n:]
    return mixing.mix_pair(
        l_i.images, l_j.images, x_p, x_q, l_i.labels, l_j.labels, y_p, y_q, mask,
        (",".join(l_i.ids), ",".join(l_j.ids), ",".join(unlabeled.ids[:n]), ",".join(unlabeled.ids[n:])),
    )


def _prepare(state: TrainState, labeled: Batch, unlabeled: Batch, config: TrainConfig):
    if len(labeled.ids) < 2 or len(unlabeled.ids) < 2:
        raise TrainingError("ssl_step needs at least two labeled and two unlabeled volumes")
    pseudo = pseudo_labels(state.teacher, unlabeled.images, config.num_classes)
    mask = new_mask(labeled.images.shape[2:], config, state.rng)
    return mix_batch(labeled, unlabeled, pseudo, mask), pseudo


def student_losses(
    probs: dict[str, T.Tensor],
    mixed: mixing.MixedPair,
    m_diff: dict[str, np.ndarray],
    m_differr: dict[str, np.ndarray],
    config: TrainConfig,
) -> dict[str, T.Tensor]:
    labels = {"in": mixed.y_in, "out": mixed.y_out}
    terms = {}
    for d in ("in", "out"):
        terms[f"seg_{d}"] = losses.bcp_seg_loss(probs[d], labels[d], mixed.mask, config.alpha, d)
        terms[f"mse_{d}"] = losses.masked_mse_loss(probs[d], labels[d], mixed.mask, m_diff[d], config.alpha, d)
        terms[f"kl_{d}"] = losses.masked_kl_uniform_loss(
            probs[d], mixed.mask, m_differr[d], config.alpha, d, config.num_classes
        )
    terms["total"] = losses.total_loss(
        terms["seg_in"], terms["seg_out"], terms["mse_in"], terms["mse_out"],
        terms["kl_in"], terms["kl_out"], config.gamma, config.mu,
    )
    return terms


def _mean_entropy(probs: np.ndarray, gate: np.ndarray) -> float | None:
    g = np.broadcast_to(gate, probs.shape[:1] + probs.shape[2:]).astype(bool)
    if not g.any():
        return None
    return float(losses.entropy_map(probs)[g].mean())


def ssl_step(
    state: TrainState,
    labeled: Batch,
    unlabeled: Batch,
    config: TrainConfig,
    *,
    dry_run: bool = False,
    probe_entropy: bool = False,
) -> StepRecord:
    """One SDCL iteration; mutates ``state`` unless ``dry_run``."""
    mixed, _ = _prepare(state, labeled, unlabeled, config)
    students = {"a": state.student_a, "b": state.student_b}
    probs = {s: {"in": nets.forward(net, mixed.x_in), "out": nets.forward(net, mixed.x_out)} for s, net in students.items()}
    hard = {s: {d: p.data.argmax(axis=1) for d, p in pd.items()} for s, pd in probs.items()}
    labels = {"in": mixed.y_in, "out": mixed.y_out}
    m_diff = {}
    for d in ("in", "out"):
        if config.use_diff_gate:
            m_diff[d] = maskops.diff_mask(hard["a"][d], hard["b"][d])
        else:
            m_diff[d] = np.ones_like(hard["a"][d], dtype=np.uint8)
    m_err = {s: {d: maskops.err_mask(hard[s][d], labels[d]) for d in ("in", "out")} for s in students}
    m_differr = {s: {d: maskops.differr_mask(m_diff[d], m_err[s][d]) for d in ("in", "out")} for s in students}

    masks = {"M": mixed.mask, "M_diff_in": m_diff["in"], "M_diff_out": m_diff["out"]}
    for s in students:
        for d in ("in", "out"):
            masks[f"M_err_{s}_{d}"] = m_err[s][d]
            masks[f"M_differr_{s}_{d}"] = m_differr[s][d]
    counts = {k: int(v.sum()) for k, v in masks.items()}
    record = StepRecord(state.iteration + 1, {}, masks, counts)

    entropy_before = {}
    if probe_entropy:
        for s in students:
            for d in ("in", "out"):
                entropy_before[(s, d)] = _mean_entropy(probs[s][d].data, m_differr[s][d])

    for s, net in students.items():
        terms = student_losses(probs[s], mixed, m_diff, m_differr[s], config)
        for name, value in terms.items():
            _check_finite(value, state.iteration + 1, f"{name}[{s}]", counts)
        record.terms[s] = {k: v.item() for k, v in terms.items()}
        if dry_run:
            continue
        terms["total"].backward()
        adam_step(net.parameters(), state.adam_a if s == "a" else state.adam_b, config.learning_rate)

    if dry_run:
        return record
    nets.ema_update(state.teacher, state.student_a, config.ema_momentum)
    state.iteration += 1

    if probe_entropy:
        before, after = [], []
        for s, net in students.items():
            with T.no_grad():
                new_probs = {"in": nets.forward(net, mixed.x_in).data, "out": nets.forward(net, mixed.x_out).data}
            for d in ("in", "out"):
                if entropy_before[(s, d)] is None:
                    continue
                n = int(m_differr[s][d].sum())
                before.append((entropy_before[(s, d)], n))
                after.append((_mean_entropy(new_probs[d], m_differr[s][d]), n))
        if before:
            total = sum(n for _, n in before)
            record.entropy = {
                "before": sum(e * n for e, n in before) / total,
                "after": sum(e * n for e, n in after) / total,
                "voxels": total,
            }
    return record


def bcp_step(state: TrainState, labeled: Batch, unlabeled: Batch, config: TrainConfig) -> dict[str, float]:
    """Copy-paste baseline step: segmentation losses only, no discrepancy masks."""
    mixed, _ = _prepare(state, labeled, unlabeled, config)
    out = {}
    for s, net, adam in (("a", state.student_a, state.adam_a), ("b", state.student_b, state.adam_b)):
        p_in = nets.forward(net, mixed.x_in)
        p_out = nets.forward(net, mixed.x_out)
        loss = losses.bcp_seg_loss(p_in, mixed.y_in, mixed.mask, config.alpha, "in") + losses.bcp_seg_loss(
            p_out, mixed.y_out, mixed.mask, config.alpha, "out"
        )
        out[s] = loss.item()
        loss.backward()
        adam_step(net.parameters(), adam, config.learning_rate)
    nets.ema_update(state.teacher, state.student_a, config.ema_momentum)
    state.iteration += 1
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def evaluate(net_a: nets.SegNet, net_b: nets.SegNet, records: list[VolumeRecord], num_classes: int) -> metrics.MetricsReport:
    reports = []
    for rec in records:
        pred = metrics.evaluate_students(net_a, net_b, rec.image)
        reports.append(metrics.evaluate_volume(pred, rec.label, num_classes))
    return metrics.average_reports(reports)


LOSS_CSV_FIELDS = ("iteration", "student", *LOSS_TERMS, "m_diff_in", "m_diff_out", "m_differr_in", "m_differr_out")


def _loss_rows(record: StepRecord) -> list[dict]:
    rows = []
    for s, terms in record.terms.items():
        row = {"iteration": record.iteration, "student": s, **terms}
        row["m_diff_in"] = record.mask_counts["M_diff_in"]
        row["m_diff_out"] = record.mask_counts["M_diff_out"]
        row["m_differr_in"] = record.mask_counts[f"M_differr_{s}_in"]
        row["m_differr_out"] = record.mask_counts[f"M_differr_{s}_out"]
        rows.append(row)
    return rows


def _append_csv(path: Path, fieldnames, rows: list[dict]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def write_run_manifest(path: str | Path, config: TrainConfig, phase: str, extra: dict | None = None) -> None:
    body = {"phase": phase, "config": config.to_dict(), "run_id": run_id(config, phase)}
    body.update(extra or {})
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def run_id(config: TrainConfig, phase: str) -> str:
    import hashlib

    payload = json.dumps({"phase": phase, **config.to_dict()}, sort_keys=True).encode()
    return hashlib.sha1(payload).hexdigest()[:12]


def train_ssl(
    config: TrainConfig,
    dataset: list[VolumeRecord],
    *,
    pretrained: tuple[nets.SegNet, nets.SegNet] | None = None,
    pretrained_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    resume_dir: str | Path | None = None,
    stop_at: int | None = None,
    checkpoint_every: int | None = None,
    method: str = "sdcl",
    deadline: float | None = None,
) -> TrainState:
    """Run SSL from pre-trained students (or resume), logging metrics every ``log_every`` steps.

    ``stop_at`` ends the run early at that iteration (used to simulate an
    interruption); ``method="bcp"`` runs the copy-paste baseline step instead.
    ``deadline`` is a ``time.monotonic()`` value past which a TimeoutError is raised.
    """
    labeled = by_split(dataset, "labeled")
    unlabeled = by_split(dataset, "unlabeled")
    test = by_split(dataset, "test")
    if method not in ("sdcl", "bcp"):
        raise ConfigError(f"unknown method {method!r}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_dir is not None:
        state, saved = load_state(resume_dir)
        if saved != config:
            raise ConfigError("resume config differs from the saved run config")
    else:
        if pretrained is None:
            if pretrained_dir is None:
                raise TrainingError("train_ssl needs pretrained nets or a pretrained checkpoint directory")
            pdir = Path(pretrained_dir)
            missing = [p for p in ("pretrain_a.ckpt", "pretrain_b.ckpt") if not (pdir / p).exists()]
            if missing:
                raise TrainingError(f"missing pretrained checkpoints in {pdir}: {missing}")
            pretrained = (nets.load_checkpoint(pdir / "pretrain_a.ckpt")[0], nets.load_checkpoint(pdir / "pretrain_b.ckpt")[0])
        state = TrainState.from_pretrained(*pretrained, config)
        if out is not None:
            for name in ("metrics.csv", "losses.csv"):
                (out / name).unlink(missing_ok=True)
            write_run_manifest(out / "run_manifest.json", config, "ssl", {"method": method})
        if test:
            _log_metrics(state, test, config, out)

    end = config.ssl_iters if stop_at is None else min(stop_at, config.ssl_iters)
    while state.iteration < end:
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError(f"deadline passed at iteration {state.iteration}")
        lab, unl = sample_batches(labeled, unlabeled, config.batch_size, state.rng)
        if method == "sdcl":
            record = ssl_step(state, lab, unl, config)
            if out is not None:
                _append_csv(out / "losses.csv", LOSS_CSV_FIELDS, _loss_rows(record))
        else:
            bcp_step(state, lab, unl, config)
        if test and state.iteration % config.log_every == 0:
            _log_metrics(state, test, config, out)
        if out is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_state(state, out / "checkpoint", config)
    if out is not None:
        save_state(state, out / "checkpoint", config)
    return state


def _log_metrics(state: TrainState, test: list[VolumeRecord], config: TrainConfig, out: Path | None) -> None:
    report = evaluate(state.student_a, state.student_b, test, config.num_classes)
    rows = metrics.report_rows(state.iteration, "test", report)
    state.metric_log.extend(rows)
    logger.info("iter %d test dice %.4f", state.iteration, report.dice)
    if out is not None:
        metrics.write_metrics_csv(out / "metrics.csv", rows, append=True)


# ---------------------------------------------------------------------------
# Trend experiment: SSL vs labeled-only, full vs single-component ablations
# ---------------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "no_mse": {"gamma": 0.0},
    "no_kl": {"mu": 0.0},
    "no_gate": {"use_diff_gate": False},
}


def run_trend(
    config: TrainConfig,
    dataset_for_seed,
    seeds: list[int],
    variants: dict[str, dict] | None = None,
    deadline: float | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Per-seed test Dice for the pre-trained baseline and each SSL variant.

    ``dataset_for_seed(seed)`` returns the record list for a seed.  Returns
    ``{"baseline": [...], variant: [...], ...}`` with one final Dice per seed.
    """
    variants = VARIANTS if variants is None else variants
    results: dict[str, list[float]] = {"baseline": [], **{v: [] for v in variants}}
    for seed in seeds:
        data = dataset_for_seed(seed)
        cfg = config.replace(seed=seed)
        labeled = by_split(data, "labeled")
        test = by_split(data, "test")
        pre = pretrain(cfg, labeled)
        results["baseline"].append(evaluate(*pre, test, cfg.num_classes).dice)
        for name, change in variants.items():
            sub = None if out_dir is None else Path(out_dir) / f"seed{seed}" / name
            state = train_ssl(cfg.replace(**change), data, pretrained=pre, out_dir=sub, deadline=deadline)
            results[name].append(evaluate(state.student_a, state.student_b, test, cfg.num_classes).dice)
            logger.info("seed %d %s dice %.4f (baseline %.4f)", seed, name, results[name][-1], results["baseline"][-1])
    return results
