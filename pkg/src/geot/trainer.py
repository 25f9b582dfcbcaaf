"""Semi-supervised training: weak/strong views, argmax pseudo-labels, the
transition-corrected objective and an AdamW schedule."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, feature_neighbors, init_backbone, seg_forward
from .clgs import ClassPrior, class_prior_matrix, fuse
from .cloudgen import TRUTH_DIR, Dataset, PointCloud, augment_strong, augment_weak, read_dataset
from .diffcore import ConfigError, ParamStore
from .metrics import evaluate_many, knn_vote_upsample
from .objective import LossBreakdown, combine, corrected_unsup_loss, supervised_loss, total_loss
from .optim import AdamW
from .plgr import AffinityGraph, build_graphs, plgr_loss
from .transition import estimate_idtm, init_transition

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.geotckpt"
LOG_NAME = "log.jsonl"
TIMING_NAME = "timing.jsonl"


@dataclass
class TrainConfig:
    data: str = ""
    labeled_ratio: float = 0.05
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    alpha: float = 1.0
    beta: float = 0.1
    lam: float = 0.9
    gamma: float = 2.0
    sigma_kernel: float = 1.0
    k1: int = 8
    k2: int = 8
    epochs: int = 10
    steps_per_epoch: int = 0
    lr: float = 1e-3
    lr_high_fraction: float = 0.9
    lr_decay: float = 0.1
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_idtm: bool = True
    use_plgr: bool = True
    use_clgs: bool = True
    width: int = 64
    blocks: int = 2
    k_feat: int = 8
    warmup: float = 0.1
    aggregate: str = "mean"
    detach_transition_input: bool = False
    trans_init_scale: float = 0.0
    trans_diag_init: float = 0.0
    sigma_init: float = 1.0
    sample_points: int = 0
    upsample_k: int = 5
    eval_every: int = 1

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lam must lie in [0, 1]")
        for name in ("batch_labeled", "batch_unlabeled", "k1", "k2", "epochs", "width", "blocks", "k_feat",
                     "upsample_k", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps_per_epoch < 0 or self.sample_points < 0:
            raise ConfigError("steps_per_epoch and sample_points must be >= 0")
        if self.sigma_kernel <= 0 or self.sigma_init <= 0:
            raise ConfigError("sigma_kernel and sigma_init must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not 0 <= self.warmup < 1:
            raise ConfigError("warmup must lie in [0, 1)")
        if self.aggregate not in ("mean", "sum"):
            raise ConfigError("aggregate must be 'mean' or 'sum'")
        if not 0 < self.lr_high_fraction <= 1:
            raise ConfigError("lr_high_fraction must lie in (0, 1]")

    def backbone(self, n_classes: int) -> BackboneConfig:
        return BackboneConfig(n_classes, self.width, self.blocks, self.k_feat, self.seed)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        values[key] = _coerce(key, types[key], raw)
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), str(path))
    if cfg.data and not Path(cfg.data).is_absolute():
        candidate = path.parent / cfg.data
        if candidate.exists():
            cfg = cfg.replace(data=str(candidate))
    return cfg


# model -----------------------------------------------------------------------------
@dataclass
class Model:
    params: ParamStore
    backbone: BackboneConfig
    prior: ClassPrior

    @property
    def n_classes(self) -> int:
        return self.backbone.n_classes


def init_model(cfg: TrainConfig, n_classes: int) -> Model:
    bb = cfg.backbone(n_classes)
    params = init_backbone(bb)
    init_transition(n_classes, params, seed=cfg.seed + 1, scale=cfg.trans_init_scale, diag_bias=cfg.trans_diag_init)
    prior = ClassPrior.default(n_classes)
    prior.init_params(params, cfg.sigma_init)
    return Model(params, bb, prior)


def pseudo_label(Q_u) -> np.ndarray:
    """Argmax class per row (lowest index on ties) as a plain integer array."""
    Q_u = Q_u.data if isinstance(Q_u, dc.Tensor) else np.asarray(Q_u)
    return np.asarray(Q_u.argmax(axis=1), dtype=np.int64)


# one step ----------------------------------------------------------------------------
@dataclass
class UnlabeledView:
    original: PointCloud
    strong: np.ndarray
    strong_neighbors: np.ndarray
    pseudo: np.ndarray
    intrinsic: AffinityGraph | None
    extrinsic: AffinityGraph | None


@dataclass
class PreparedBatch:
    labeled: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    unlabeled: list[UnlabeledView] = field(default_factory=list)

    @property
    def n_labeled(self) -> int:
        return sum(len(y) for _, _, y in self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return sum(len(u.pseudo) for u in self.unlabeled)


def prepare_batch(labeled, unlabeled, model: Model, cfg: TrainConfig, rng: np.random.Generator) -> PreparedBatch:
    """Everything that does not carry gradient: views, neighbours, pseudo-labels, graphs."""
    if not labeled and not unlabeled:
        raise ValueError("batch holds no clouds")
    out = PreparedBatch()
    k = model.backbone.k_feat
    for cloud in labeled:
        weak = augment_weak(cloud, rng).coords
        out.labeled.append((weak, feature_neighbors(weak, k), cloud.labels))
    for cloud in unlabeled:
        weak = augment_weak(cloud, rng).coords
        strong = augment_strong(cloud, rng).coords
        q = seg_forward(weak, model.params, model.backbone, trainable=False)
        pseudo = pseudo_label(q)
        graphs = (None, None)
        if cfg.use_idtm and cfg.use_plgr:
            graphs = build_graphs(cloud.coords, pseudo, cfg.k1, cfg.k2, cfg.sigma_kernel)
        out.unlabeled.append(UnlabeledView(cloud, strong, feature_neighbors(strong, k), pseudo, *graphs))
    return out


def batch_objective(params: ParamStore, batch: PreparedBatch, model: Model, cfg: TrainConfig, alpha: float):
    """Differentiable total and its breakdown for one prepared batch."""
    bb = model.backbone
    agg = cfg.aggregate
    zero = dc.Tensor(0.0)

    if batch.labeled:
        probs = [seg_forward(x, params, bb, neighbors=nb) for x, nb, _ in batch.labeled]
        P_l = dc.concat(probs, axis=0) if len(probs) > 1 else probs[0]
        Y_l = np.concatenate([y for _, _, y in batch.labeled])
        L_s = supervised_loss(P_l, Y_l, cfg.gamma, agg)
    else:
        L_s = zero

    L_u, L_m = zero, zero
    if batch.unlabeled:
        T_C = class_prior_matrix(model.prior, params) if (cfg.use_idtm and cfg.use_clgs) else None
        u_terms, m_terms = [], []
        for view in batch.unlabeled:
            P_u = seg_forward(view.strong, params, bb, neighbors=view.strong_neighbors)
            if not cfg.use_idtm:
                u_terms.append((P_u, None))
                continue
            t_in = dc.Tensor(P_u.data) if cfg.detach_transition_input else P_u
            T_I = estimate_idtm(t_in, params)
            T_F = fuse(T_I, T_C, cfg.lam) if T_C is not None else T_I
            u_terms.append((P_u, T_F))
            if cfg.use_plgr:
                m_terms.append(plgr_loss(view.intrinsic, view.extrinsic, T_I)[2])
        Y_hat = np.concatenate([v.pseudo for v in batch.unlabeled])
        P_all = dc.concat([p for p, _ in u_terms], axis=0) if len(u_terms) > 1 else u_terms[0][0]
        if cfg.use_idtm:
            T_all = dc.concat([t for _, t in u_terms], axis=0) if len(u_terms) > 1 else u_terms[0][1]
        else:
            T_all = None
        L_u = corrected_unsup_loss(P_all, T_all, Y_hat, cfg.gamma, agg)
        if m_terms:
            L_m = m_terms[0]
            for t in m_terms[1:]:
                L_m = L_m + t
            if agg == "mean":
                L_m = dc.mul(L_m, 1.0 / batch.n_unlabeled)

    beta = cfg.beta if (cfg.use_idtm and cfg.use_plgr) else 0.0
    total = combine(L_s, L_u, L_m, alpha, beta)
    parts = total_loss(L_s, L_u, L_m, alpha, beta, batch.n_labeled, batch.n_unlabeled)
    return total, parts


def train_step(labeled, unlabeled, model: Model, opt: AdamW, cfg: TrainConfig, rng, alpha: float):
    batch = prepare_batch(labeled, unlabeled, model, cfg, rng)
    model.params.zero_grad()
    holder = {}

    def loss_fn(p):
        total, parts = batch_objective(p, batch, model, cfg, alpha)
        holder["parts"] = parts
        return total

    dc.forward_backward(loss_fn, model.params)
    opt.step()
    return holder["parts"], batch


# schedule / loop ---------------------------------------------------------------------
def high_lr_epochs(cfg: TrainConfig) -> int:
    return max(1, int(round(cfg.lr_high_fraction * cfg.epochs)))


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr if epoch < high_lr_epochs(cfg) else cfg.lr * cfg.lr_decay


def steps_per_epoch(cfg: TrainConfig, ds: Dataset) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    n_u = math.ceil(len(ds.unlabeled) / cfg.batch_unlabeled) if ds.unlabeled else 0
    n_l = math.ceil(len(ds.labeled) / cfg.batch_labeled) if ds.labeled else 0
    return max(n_u, n_l, 1)


def alpha_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    ramp = cfg.warmup * total_steps
    if ramp <= 0:
        return cfg.alpha
    return cfg.alpha * min(1.0, step / ramp)


def _cycle_batches(items: list, size: int, n_batches: int, rng) -> list[list]:
    if not items:
        return [[] for _ in range(n_batches)]
    order: list[int] = []
    while len(order) < size * n_batches:
        order.extend(rng.permutation(len(items)).tolist())
    return [[items[i] for i in order[b * size : (b + 1) * size]] for b in range(n_batches)]


def predict_cloud(cloud: PointCloud, model: Model, cfg: TrainConfig, rng=None) -> np.ndarray:
    """Argmax labels for a full cloud, optionally via a random subsample plus k-NN voting."""
    coords = cloud.coords
    if cfg.sample_points and cloud.n_points > cfg.sample_points:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = np.sort(rng.choice(cloud.n_points, cfg.sample_points, replace=False))
        sub = seg_forward(coords[idx], model.params, model.backbone, trainable=False).data.argmax(axis=1)
        return knn_vote_upsample(coords[idx], sub, coords, cfg.upsample_k)
    return seg_forward(coords, model.params, model.backbone, trainable=False).data.argmax(axis=1)


def evaluate_model(clouds, model: Model, cfg: TrainConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    preds = [predict_cloud(c, model, cfg, rng) for c in clouds]
    return evaluate_many(preds, [c.labels for c in clouds], model.n_classes)


@dataclass
class TrainLogRecord:
    epoch: int
    losses: dict
    miou: float | None
    dsc: float | None
    acc: float | None
    pseudo_agreement: float | None
    lr: float
    seconds: float = 0.0

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return json.dumps(d, sort_keys=True)


def _mean_breakdown(parts: list[LossBreakdown]) -> dict:
    keys = ("L_s", "L_u", "L_m", "total", "alpha", "beta")
    return {k: float(np.mean([getattr(p, k) for p in parts])) for k in keys}


@dataclass
class TrainResult:
    model: Model
    records: list[TrainLogRecord]
    checkpoint: Path | None = None


def checkpoint_meta(model: Model, cfg: TrainConfig, epoch: int, opt_t: int) -> dict:
    bb = model.backbone
    return {
        "n_classes": bb.n_classes,
        "width": bb.width,
        "blocks": bb.blocks,
        "k_feat": bb.k_feat,
        "epoch": epoch,
        "opt_step": opt_t,
    }


def save_model(path, model: Model, cfg: TrainConfig, epoch: int, opt: AdamW | None = None) -> None:
    store = model.params.copy()
    if opt is not None:
        for name, arr in opt.state_groups().items():
            store.add(name, arr, model.params.shape(name.split("/", 1)[1]))
    dc.save_checkpoint(path, store, checkpoint_meta(model, cfg, epoch, opt.t if opt else 0))


def load_model(path) -> tuple[Model, dict, ParamStore]:
    """Returns the model, checkpoint metadata and the raw store (holds optimiser state)."""
    store, meta = dc.load_checkpoint(path)
    try:
        bb = BackboneConfig(int(meta["n_classes"]), int(meta["width"]), int(meta["blocks"]), int(meta["k_feat"]))
    except KeyError as exc:
        raise ConfigError(f"{path}: checkpoint lacks metadata {exc}") from None
    params = ParamStore()
    for name in store:
        if not name.startswith("adamw."):
            params.add(name, store.value(name), store.shape(name))
    return Model(params, bb, ClassPrior.default(bb.n_classes)), meta, store


def pseudo_agreement(batches: list[PreparedBatch], truth: dict[int, np.ndarray]) -> float | None:
    hits = total = 0
    for b in batches:
        for v in b.unlabeled:
            gt = truth.get(id(v.original))
            if gt is None:
                continue
            hits += int((gt == v.pseudo).sum())
            total += len(gt)
    return hits / total if total else None


def train(cfg: TrainConfig, out_dir=None, dataset: Dataset | None = None, resume=None,
          unlabeled_truth: list[np.ndarray] | None = None, max_epochs: int | None = None) -> TrainResult:
    """Run the full schedule; writes checkpoint and JSON-lines log to ``out_dir``.

    ``resume`` continues from a checkpoint written by an earlier call.
    ``unlabeled_truth`` (synthetic data only) enables the pseudo-label
    agreement diagnostic.
    """
    cfg.validate()
    if dataset is None:
        if not cfg.data:
            raise ConfigError("config key 'data' is required")
        if not Path(cfg.data).is_dir():
            raise ConfigError(f"data: dataset directory not found: {cfg.data}")
        dataset = read_dataset(cfg.data)
        if unlabeled_truth is None:
            unlabeled_truth = _read_truth(Path(cfg.data), dataset)
    if not dataset.labeled and not dataset.unlabeled:
        raise ConfigError("dataset has no training clouds")
    C = dataset.n_classes
    model = init_model(cfg, C)
    opt = AdamW(model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    start_epoch = 0
    if resume is not None:
        loaded, meta, store = load_model(resume)
        for name in model.params:
            model.params.set(name, loaded.params.value(name))
        opt.load_state_groups(store, int(meta["opt_step"]))
        start_epoch = int(meta["epoch"]) + 1

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        log_fh = open(out / LOG_NAME, mode, encoding="utf-8")
        time_fh = open(out / TIMING_NAME, mode, encoding="utf-8")
    truth = {}
    if unlabeled_truth is not None:
        truth = {id(c): t for c, t in zip(dataset.unlabeled, unlabeled_truth)}

    n_steps = steps_per_epoch(cfg, dataset)
    total_steps = n_steps * cfg.epochs
    records = []
    last_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)
    ckpt = None
    try:
        for epoch in range(start_epoch, last_epoch):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            opt.lr = lr_at(cfg, epoch)
            lab_batches = _cycle_batches(dataset.labeled, cfg.batch_labeled, n_steps, rng)
            unl_batches = _cycle_batches(dataset.unlabeled, cfg.batch_unlabeled, n_steps, rng)
            parts, prepared = [], []
            for s in range(n_steps):
                alpha = alpha_at(cfg, epoch * n_steps + s, total_steps)
                p, b = train_step(lab_batches[s], unl_batches[s], model, opt, cfg, rng, alpha)
                parts.append(p)
                if truth:
                    prepared.append(b)
            metrics = None
            if dataset.test and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
                metrics = evaluate_model(dataset.test, model, cfg, seed=cfg.seed)
            rec = TrainLogRecord(
                epoch=epoch,
                losses=_mean_breakdown(parts),
                miou=metrics.miou if metrics else None,
                dsc=metrics.dsc if metrics else None,
                acc=metrics.acc if metrics else None,
                pseudo_agreement=pseudo_agreement(prepared, truth),
                lr=opt.lr,
                seconds=time.perf_counter() - t0,
            )
            records.append(rec)
            log.info("epoch %d total %.4f miou %s", epoch, rec.losses["total"], rec.miou)
            if out is not None:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
                time_fh.write(json.dumps({"epoch": epoch, "seconds": rec.seconds}) + "\n")
                ckpt = out / CHECKPOINT_NAME
                save_model(ckpt, model, cfg, epoch, opt)
    finally:
        if out is not None:
            log_fh.close()
            time_fh.close()
    return TrainResult(model, records, ckpt)


def _read_truth(root: Path, ds: Dataset) -> list[np.ndarray] | None:
    """Hidden labels of the unlabeled split, if the generator left them behind."""
    tdir = root / TRUTH_DIR
    if not tdir.is_dir():
        return None
    out = []
    for name in ds.names.get("unlabeled", []):
        f = tdir / (Path(name).stem + ".labels")
        if not f.exists():
            return None
        out.append(np.array(f.read_text().split(), dtype=np.int64))
    return out
